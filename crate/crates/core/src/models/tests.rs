use super::*;
use crate::diffmath::{finite_diff_check_with, Stencil};
use std::f64::consts::PI;

/// Step for full-ELBO checks with the Richardson stencil: at 1e-5 a single
/// rounding unit of an O(100) ELBO already shifts a central difference by
/// ~1e-9, which swamps gradients of order 1e-6, while plain central
/// differences at larger steps carry O(h²) error from the inducing inputs.
const FD_STEP: f64 = 5e-4;

fn toy_data(n: usize, d_x: usize, d_y: usize, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, n, d_x);
    let y = Mat::from_fn(n, d_y, |i, k| {
        (x[(i, 0)] * (k as f64 + 1.0)).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)
    });
    Data::observed(x, &y).unwrap()
}

fn toy_spec(variant: Variant) -> ModelSpec {
    let mut s = ModelSpec::defaults(variant, 2, 3);
    s.l = 2;
    s.l_prime = variant.is_deep().then_some(2);
    s.d_h = variant.is_neural().then_some(3);
    // smooth activation: sampled kinks make difference quotients meaningless
    s.activation = "sherf".into();
    s.n_ind = 4;
    s.n_ind2 = 4;
    s.n_samples = 3;
    s
}

fn set(ps: &mut ParamSet, name: &str, v: Mat) {
    let id = ps.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.set_value(id, &v).unwrap();
}

#[test]
fn build_shapes() {
    let data = toy_data(20, 3, 4, 0);
    let m = Model::build(&ModelSpec::defaults(Variant::Mogp, 3, 4), &data, 0).unwrap();
    assert_eq!(m.f_bank.n_units(), 2);
    match &m.head {
        Head::Linear(mix) => assert_eq!(m.ps.value(mix.m0).shape(), (4, 2)),
        _ => panic!("MOGP head"),
    }
    // inducing points are capped by the data size
    assert_eq!(m.f_bank.groups[0].num_inducing(&m.ps), 20);

    let data = toy_data(30, 2, 8, 1);
    let m = Model::build(&ModelSpec::defaults(Variant::NDgp, 2, 8), &data, 0).unwrap();
    assert_eq!(m.f_bank.n_units(), 4);
    assert_eq!(m.layer2.as_ref().unwrap().n_units(), 6);
    assert_eq!(m.layer2.as_ref().unwrap().groups[0].num_inducing(&m.ps), 100);
    match &m.head {
        Head::Neural(mix, h) => {
            assert_eq!(m.ps.value(h.mt).shape(), (16, 6));
            assert_eq!(m.ps.value(mix.m0).shape(), (8, 16));
        }
        _ => panic!("N-DGP head"),
    }

    let y = toy_data(25, 1, 6, 2).y;
    let data = Data::outputs(&y, &OutputMask::all(25, 6)).unwrap();
    let m = Model::build(&ModelSpec::latent_defaults(Variant::NSbgprn, 6), &data, 0).unwrap();
    let q = m.train_latents().unwrap();
    assert_eq!(q.mean.shape(), (25, 4));
    assert_eq!(m.f_bank.n_units(), 4);
}

#[test]
fn build_is_deterministic_and_rejects_bad_data() {
    let data = toy_data(12, 2, 3, 3);
    let a = Model::build(&toy_spec(Variant::Gprn), &data, 5).unwrap();
    let b = Model::build(&toy_spec(Variant::Gprn), &data, 5).unwrap();
    for (p, q) in a.ps.iter().zip(b.ps.iter()) {
        assert_eq!(p.raw, q.raw);
    }
    let mut s = toy_spec(Variant::Mogp);
    s.d_y = 4;
    assert!(Model::build(&s, &data, 0).is_err());
    let m = Model::build(&toy_spec(Variant::Mogp), &data, 0).unwrap();
    assert!(m.elbo_minibatch(&data, &[], 0, 1.0).is_err());
}

#[test]
fn gradients_all_variants() {
    let data = toy_data(8, 2, 3, 4);
    let batch: Vec<usize> = (0..8).collect();
    for v in Variant::ALL {
        let model = Model::build(&toy_spec(v), &data, 1).unwrap();
        let mut ps = model.ps.clone();
        let r = finite_diff_check_with(&mut ps, FD_STEP, Stencil::Richardson, |t, b| {
            Ok(model.elbo_on_tape(t, b, &data, &batch, 9, 0.7)?.elbo)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{v}: {r:?}");
    }
}

#[test]
fn lvm_gradients() {
    let y = toy_data(8, 1, 3, 5).y;
    let data = Data::outputs(&y, &OutputMask::all(8, 3)).unwrap();
    let mut spec = ModelSpec::latent_defaults(Variant::NMogp, 3);
    spec.d_x = 2;
    spec.l = 2;
    spec.n_ind = 4;
    spec.d_h = Some(3);
    let model = Model::build(&spec, &data, 2).unwrap();
    let mut ps = model.ps.clone();
    let r = finite_diff_check_with(&mut ps, FD_STEP, Stencil::Richardson, |t, b| {
        Ok(model.elbo_on_tape(t, b, &data, &[1, 4, 6], 3, 1.0)?.elbo)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

/// Deterministic MOGP: tiny latent variance and mixing uncertainty.
fn collapse(model: &mut Model) {
    let names: Vec<String> = model.ps.iter().map(|p| p.name.clone()).collect();
    for name in names {
        if name.ends_with(".variance") {
            set(&mut model.ps, &name, Mat::from_element(1, 1, 1e-200));
        } else if name.ends_with(".q_chol") {
            let m = model.ps.get(model.ps.id_of(&name).unwrap()).raw.nrows();
            set(&mut model.ps, &name, Mat::identity(m, m) * 1e-150);
        } else if name.ends_with("sigma_M") || name.ends_with("b_scale") {
            let s = model.ps.get(model.ps.id_of(&name).unwrap()).raw.shape();
            set(&mut model.ps, &name, Mat::from_element(s.0, s.1, 1e-150));
        }
    }
}

#[test]
fn deterministic_elbo_is_data_log_likelihood() {
    let data = toy_data(10, 2, 3, 6);
    let batch: Vec<usize> = (0..10).collect();
    for mode in [EllMode::Analytic, EllMode::Sgvb] {
        let mut spec = toy_spec(Variant::Mogp);
        spec.ell_mode = mode;
        let mut model = Model::build(&spec, &data, 3).unwrap();
        collapse(&mut model);
        set(&mut model.ps, "f0.mean", Mat::from_element(1, 1, 0.7));
        set(&mut model.ps, "f1.mean", Mat::from_element(1, 1, -0.2));
        let beta = Mat::from_row_slice(1, 3, &[2.0, 5.0, 0.5]);
        set(&mut model.ps, "noise.beta", beta.clone());
        let m0 = model.ps.value(model.ps.id_of("mix.M0").unwrap());
        let pred = &m0 * Mat::from_column_slice(2, 1, &[0.7, -0.2]);
        let mut want = 0.0;
        for i in 0..10 {
            for k in 0..3 {
                let r = data.y[(i, k)] - pred[k];
                want += 0.5 * (beta[k] / (2.0 * PI)).ln() - 0.5 * beta[k] * r * r;
            }
        }
        let got = model.elbo_minibatch(&data, &batch, 0, 0.0).unwrap();
        assert!((got - want).abs() < 1e-9 * want.abs(), "{mode:?}: {got} vs {want}");
        let (pm, pv) = model.predict(&data.x).unwrap();
        assert!((pm.row(3).transpose() - &pred).amax() < 1e-12);
        assert!((pv[(0, 1)] - 0.2).abs() < 1e-12);
    }
}

#[test]
fn minibatch_rescaling() {
    let data = toy_data(12, 2, 3, 7);
    let mut spec = toy_spec(Variant::NSbgprn);
    spec.ell_mode = EllMode::Analytic;
    let model = Model::build(&spec, &data, 4).unwrap();
    let full: Vec<usize> = (0..12).collect();
    let t = model.elbo_terms(&data, &full, 0, 1.0).unwrap();
    assert!((t.elbo - (t.ell - t.kl - t.l2)).abs() < 1e-9 * t.elbo.abs().max(1.0));
    // partition: weighted batch ELLs sum to the full ELL (analytic mode is deterministic)
    let parts = [&full[..5], &full[5..]];
    let s: f64 = parts
        .iter()
        .map(|p| model.elbo_terms(&data, p, 0, 1.0).unwrap().ell)
        .sum();
    assert!((s - t.ell).abs() < 1e-9 * t.ell.abs());
    let half = model.elbo_terms(&data, parts[0], 0, 0.0).unwrap();
    assert!((half.elbo - (12.0 / 5.0 * half.ell - half.l2)).abs() < 1e-9 * half.elbo.abs());
}

#[test]
fn analytic_matches_sgvb_in_expectation() {
    let data = toy_data(5, 2, 3, 8);
    let batch: Vec<usize> = (0..5).collect();
    for v in [Variant::NMogp, Variant::Gprn] {
        let mut spec = toy_spec(v);
        spec.ell_mode = EllMode::Analytic;
        let model = Model::build(&spec, &data, 6).unwrap();
        let mut ps = model.ps.clone();
        // move away from the near-deterministic initialization
        for p in ps.iter_mut() {
            if p.name.ends_with("q_mean") {
                p.raw = Mat::from_fn(p.raw.nrows(), 1, |i, _| (i as f64 * 0.9).sin());
            }
            if p.name.ends_with("sigma_M") || p.name.ends_with("b_scale") {
                p.raw.fill(0.3f64.ln());
            }
        }
        let analytic = {
            let mut m = model.clone();
            m.ps = ps.clone();
            m.elbo_terms(&data, &batch, 0, 1.0).unwrap().ell
        };
        spec.ell_mode = EllMode::Sgvb;
        spec.n_samples = 1;
        let mut m = Model::build(&spec, &data, 6).unwrap();
        m.ps = ps;
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| m.elbo_terms(&data, &batch, s, 1.0).unwrap().ell)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.5 * se, "{v}: {mean} ± {se} vs {analytic}");
    }
}

#[test]
fn predict_matches_draws() {
    let data = toy_data(6, 2, 3, 9);
    let model = Model::build(&toy_spec(Variant::NMogp), &data, 7).unwrap();
    let (pm, pv) = model.predict(&data.x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = model.draw_mean_var(&Inputs::Observed(data.x.clone()), 100_000, &mut rng).unwrap();
    let beta = model.ps.value(model.noise.beta);
    for i in [0, 4] {
        for k in 0..3 {
            let ms: Vec<f64> = draws.iter().map(|(m, _)| m[(i, k)]).collect();
            let mean = ms.iter().sum::<f64>() / ms.len() as f64;
            let var_m = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ms.len() as f64;
            let ev = draws.iter().map(|(_, v)| v[(i, k)]).sum::<f64>() / ms.len() as f64;
            let se = (var_m / ms.len() as f64).sqrt();
            assert!((mean - pm[(i, k)]).abs() < 3.5 * se + 1e-12);
            let total = var_m + ev + 1.0 / beta[k];
            assert!((total - pv[(i, k)]).abs() < 0.02 * pv[(i, k)]);
        }
    }
}

#[test]
fn deep_prediction_uses_draws() {
    let data = toy_data(6, 2, 3, 10);
    let model = Model::build(&toy_spec(Variant::Dgp), &data, 8).unwrap();
    let (pm, pv) = model.predict(&data.x).unwrap();
    assert_eq!(pm.shape(), (6, 3));
    assert!(pv.iter().all(|&v| v > 0.0));
    let tape = Tape::new();
    let b = model.ps.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = model.dgp_forward_sample(&b, tape.constant(data.x.clone()), &mut rng).unwrap();
    assert_eq!(g.shape(), (6, 2));
    let m = Model::build(&toy_spec(Variant::Mogp), &data, 8).unwrap();
    assert!(m.dgp_forward_sample(&m.ps.bind(&tape), tape.constant(data.x.clone()), &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let data = toy_data(9, 2, 3, 11);
    for v in [Variant::NSbgprn, Variant::Gprn, Variant::NDgp] {
        let model = Model::build(&toy_spec(v), &data, 12).unwrap();
        let bytes = checkpoint::to_bytes(&model).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec, model.spec);
        let (a, b) = (model.predict(&data.x).unwrap(), back.predict(&data.x).unwrap());
        assert_eq!(a, b);
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint::from_bytes(&bad).is_err());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::build(&toy_spec(Variant::Mogp), &data, 1).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for (p, q) in model.ps.iter().zip(back.ps.iter()) {
        assert_eq!(p.raw, q.raw);
        assert_eq!(p.name, q.name);
    }
}

#[test]
fn latent_fitting() {
    let full = toy_data(30, 1, 4, 12);
    let train = Data::outputs(&full.y.rows(0, 24).into_owned(), &OutputMask::all(24, 4)).unwrap();
    let test = Data::outputs(&full.y.rows(24, 6).into_owned(), &OutputMask::all(6, 4)).unwrap();
    let mut spec = ModelSpec::latent_defaults(Variant::Mogp, 4);
    spec.d_x = 2;
    spec.n_ind = 8;
    let model = Model::build(&spec, &train, 0).unwrap();
    let q = model.train_latents().unwrap();

    // a test point equal to a training point starts at that point's latent mean
    let dup = train.select(&[7, 13]);
    let fit = model.fit_test_latents(&train, &dup, 0, 0.01, 0).unwrap();
    assert!(fit.history.is_empty());
    assert_eq!(fit.q.mean.row(0), q.mean.row(7));
    assert_eq!(fit.q.mean.row(1), q.mean.row(13));

    let init = model.fit_test_latents(&train, &test, 0, 0.05, 1).unwrap();
    let fit = model.fit_test_latents(&train, &test, 150, 0.05, 1).unwrap();
    let before = model.latent_objective(&init.q, &test, 20, 99).unwrap();
    let after = model.latent_objective(&fit.q, &test, 20, 99).unwrap();
    assert!(after >= before, "{after} < {before}");
    // model parameters stay untouched
    assert_eq!(model.train_latents().unwrap(), q);
    let lvm = model.lvm_ell(&train, &[0, 1, 2], 0).unwrap();
    assert!(lvm.is_finite());
    let sup = Model::build(&toy_spec(Variant::Mogp), &toy_data(8, 2, 3, 0), 0).unwrap();
    assert!(sup.fit_test_latents(&train, &test, 1, 0.1, 0).is_err());
}
