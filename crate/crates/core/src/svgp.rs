//! Sparse variational GPs with inducing points, in the unwhitened
//! parameterization `q(u) = N(m, S)`, `S = L_q L_qᵀ`.
//!
//! GPs are organized in groups that share a kernel, a mean function and
//! inducing locations `Z`, so `K_ZZ` and its factor are computed once per
//! group; a [`GpBank`] is a list of groups whose units are laid out
//! column-wise in group order.

use crate::diffmath::{hstack, vstack, Bound, Constraint, Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gauss::{tape_kl_full, DEFAULT_JITTER};
use crate::kernels::{Kernel, MeanFunction};

/// Variational parameters of one GP: `q(u) = N(q_mean, q_chol q_cholᵀ)`.
#[derive(Clone, Debug)]
pub struct UnitQ {
    /// `N_ind×1`.
    pub q_mean: ParamId,
    /// `N_ind×N_ind`, Cholesky-constrained.
    pub q_chol: ParamId,
}

/// GPs sharing a kernel, a mean function and inducing locations.
#[derive(Clone, Debug)]
pub struct GpGroup {
    pub kernel: Kernel,
    /// Constants are `1×units.len()`.
    pub mean_fn: MeanFunction,
    /// `N_ind×d_in`; may be shared with other groups.
    pub z: ParamId,
    pub units: Vec<UnitQ>,
}

/// Initial scale of the `q(u)` Cholesky factor.
pub const QU_CHOL_INIT: f64 = 1e-2;

impl GpGroup {
    /// Creates `n_units` GPs with `q(u) = N(0, (1e-2)²I)`.
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        kernel: Kernel,
        mean_fn: MeanFunction,
        z: ParamId,
        n_units: usize,
    ) -> Self {
        let m = ps.get(z).raw.nrows();
        let units = (0..n_units)
            .map(|u| UnitQ {
                q_mean: ps.add(format!("{prefix}.u{u}.q_mean"), Mat::zeros(m, 1), Constraint::None),
                q_chol: ps.add(
                    format!("{prefix}.u{u}.q_chol"),
                    Mat::from_diagonal_element(m, m, QU_CHOL_INIT.ln()),
                    Constraint::Cholesky,
                ),
            })
            .collect();
        Self {
            kernel,
            mean_fn,
            z,
            units,
        }
    }

    pub fn num_inducing(&self, ps: &ParamSet) -> usize {
        ps.get(self.z).raw.nrows()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GpBank {
    pub groups: Vec<GpGroup>,
}

/// Marginals of a bank at `n` inputs (`n×U`) and, optionally, the summed
/// inducing KL.
pub struct BankOut<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    pub kl: Option<Var<'t>>,
}

/// Cholesky factor of `K_ZZ + jI` for `j` in `{jitter, 10·jitter, 100·jitter}`.
fn chol_kzz<'t>(kzz: Var<'t>, jitter: f64) -> Result<Var<'t>> {
    let mut last = None;
    for j in [jitter, 10.0 * jitter, 100.0 * jitter] {
        match kzz.cholesky_with_jitter(j) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("three attempts"))
}

impl GpBank {
    pub fn new(groups: Vec<GpGroup>) -> Self {
        Self { groups }
    }

    pub fn n_units(&self) -> usize {
        self.groups.iter().map(|g| g.units.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.groups.first().map(|g| g.kernel.input_dim()).unwrap_or(0)
    }

    /// Predictive marginals `q(f(x))` of every unit at the rows of `x`, and
    /// the inducing KL when `with_kl`.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>, with_kl: bool) -> Result<BankOut<'t>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "GpBank::forward",
                format!("inputs have {} columns, GPs expect {}", x.ncols(), self.input_dim()),
            ));
        }
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut kl: Option<Var<'t>> = None;
        for g in &self.groups {
            let z = b.get(g.z);
            let lz = chol_kzz(g.kernel.k_sym(b, z)?, DEFAULT_JITTER)?;
            let kzx = g.kernel.k_matrix(b, z, x)?;
            let a = lz.solve_lower(kzx);
            let bm = lz.solve_lower_t(a);
            let qm = hstack(&g.units.iter().map(|u| b.get(u.q_mean)).collect::<Vec<_>>());
            let c = g.mean_fn.value(b);
            let mean = match c {
                Some(c) => bm.t().matmul(qm - c) + c,
                None => bm.t().matmul(qm),
            };
            means.push(mean);
            let base = g.kernel.k_diag(b, x)? - a.square().sum_rows().t();
            for (k, u) in g.units.iter().enumerate() {
                let lq = b.get(u.q_chol);
                let extra = lq.t().matmul(bm).square().sum_rows().t();
                vars.push((base + extra).clamp_min(0.0));
                if with_kl {
                    let pm = match c {
                        Some(c) => c.gather_cols(&[k]),
                        None => x.tape().scalar(0.0),
                    };
                    let term = tape_kl_full(b.get(u.q_mean), lq, pm, lz);
                    kl = Some(match kl {
                        Some(acc) => acc + term,
                        None => term,
                    });
                }
            }
        }
        Ok(BankOut {
            mean: hstack(&means),
            var: hstack(&vars),
            kl,
        })
    }

    /// Inducing KL only.
    pub fn kl<'t>(&self, b: &Bound<'t>, tape: &'t Tape) -> Result<Var<'t>> {
        let mut kl = tape.scalar(0.0);
        for g in &self.groups {
            let z = b.get(g.z);
            let lz = chol_kzz(g.kernel.k_sym(b, z)?, DEFAULT_JITTER)?;
            let c = g.mean_fn.value(b);
            for (k, u) in g.units.iter().enumerate() {
                let pm = match c {
                    Some(c) => c.gather_cols(&[k]),
                    None => tape.scalar(0.0),
                };
                kl = kl + tape_kl_full(b.get(u.q_mean), b.get(u.q_chol), pm, lz);
            }
        }
        Ok(kl)
    }

    /// Every parameter id referenced by the bank (kernels, means, Z, q(u)).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for g in &self.groups {
            let k = g.kernel.base();
            ids.push(k.variance);
            ids.push(k.lengthscales);
            ids.extend(k.noise);
            if let Some(net) = g.kernel.net() {
                for &(w, bb) in &net.layers {
                    ids.push(w);
                    ids.push(bb);
                }
            }
            if let crate::kernels::Kernel::Deep(d) = &g.kernel {
                ids.push(d.blend);
            }
            if let MeanFunction::Constant(c) = g.mean_fn {
                ids.push(c);
            }
            ids.push(g.z);
            for u in &g.units {
                ids.push(u.q_mean);
                ids.push(u.q_chol);
            }
        }
        ids.sort_by_key(|p| p.0);
        ids.dedup();
        ids
    }
}

/// `mean + √var ⊙ noise`. `noise` may stack several draws: with `mean` of
/// shape `n×U` and `noise` of shape `(S·n)×U`, row `s·n + i` is draw `s` at input `i`.
pub fn sample_marginals<'t>(mean: Var<'t>, var: Var<'t>, noise: Var<'t>) -> Result<Var<'t>> {
    let (n, u) = mean.shape();
    if var.shape() != (n, u) || noise.ncols() != u || n == 0 || noise.nrows() % n != 0 {
        return Err(Error::shape(
            "sample_marginals",
            format!(
                "mean {:?}, var {:?}, noise {:?}",
                mean.shape(),
                var.shape(),
                noise.shape()
            ),
        ));
    }
    let s = noise.nrows() / n;
    let (m, sd) = if s == 1 {
        (mean, var.sqrt())
    } else {
        (vstack(&vec![mean; s]), vstack(&vec![var.sqrt(); s]))
    };
    Ok(m + sd * noise)
}

/// Plain-value marginals of a bank at `x`.
pub fn predict_marginals(ps: &ParamSet, bank: &GpBank, x: &Mat) -> Result<(Mat, Mat)> {
    let t = Tape::new();
    let b = ps.bind(&t);
    let out = bank.forward(&b, t.constant(x.clone()), false)?;
    let mean = (*out.mean.value()).clone();
    let var = (*out.var.value()).clone();
    Ok((mean, var))
}

/// Plain-value summed inducing KL of a bank.
pub fn kl_inducing(ps: &ParamSet, bank: &GpBank) -> Result<f64> {
    let t = Tape::new();
    let b = ps.bind(&t);
    Ok(bank.kl(&b, &t)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;
    use crate::gauss::{kl_full, FullGaussian};
    use crate::kernels::RbfKernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    struct Setup {
        ps: ParamSet,
        bank: GpBank,
    }

    fn setup(rng: &mut ChaCha8Rng, d: usize, m: usize, units: usize, constant: bool) -> Setup {
        let mut ps = ParamSet::new();
        let kern = Kernel::Rbf(RbfKernel::new(&mut ps, "k", d, true, 1.4, 0.9, None));
        let z = ps.add("Z", randn(rng, m, d), Constraint::None);
        let mean_fn = if constant {
            let mf = MeanFunction::constant(&mut ps, "c", units);
            if let MeanFunction::Constant(id) = mf {
                ps.get_mut(id).raw = randn(rng, 1, units);
            }
            mf
        } else {
            MeanFunction::Zero
        };
        let g = GpGroup::new(&mut ps, "g", kern, mean_fn, z, units);
        Setup {
            ps,
            bank: GpBank::new(vec![g]),
        }
    }

    /// Dense `K_ZZ + jI` and its factor, as used internally.
    fn prior_factor(s: &Setup) -> Mat {
        let t = Tape::new();
        let b = s.ps.bind(&t);
        let g = &s.bank.groups[0];
        let kzz = g.kernel.k_sym(&b, b.get(g.z)).unwrap();
        let l = chol_kzz(kzz, DEFAULT_JITTER).unwrap().value();
        (*l).clone()
    }

    fn kernel_dense(s: &Setup, x: &Mat, x2: &Mat) -> Mat {
        let t = Tape::new();
        let b = s.ps.bind(&t);
        let k = s.bank.groups[0]
            .kernel
            .k_matrix(&b, t.constant(x.clone()), t.constant(x2.clone()))
            .unwrap();
        (*k.value()).clone()
    }

    #[test]
    fn prior_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = setup(&mut rng, 2, 30, 2, true);
        let lz = prior_factor(&s);
        let c = s.ps.get(s.ps.id_of("c").unwrap()).raw.clone();
        for (k, u) in s.bank.groups[0].units.clone().iter().enumerate() {
            s.ps.set_value(u.q_mean, &Mat::from_element(30, 1, c[k])).unwrap();
            s.ps.set_value(u.q_chol, &lz).unwrap();
        }
        let x = randn(&mut rng, 7, 2);
        let (mean, var) = predict_marginals(&s.ps, &s.bank, &x).unwrap();
        for i in 0..7 {
            for k in 0..2 {
                assert!((mean[(i, k)] - c[k]).abs() < 1e-10);
                assert!((var[(i, k)] - 1.4).abs() < 1e-10, "{}", var[(i, k)]);
            }
        }
        assert!(kl_inducing(&s.ps, &s.bank).unwrap().abs() < 1e-10);
    }

    #[test]
    fn interpolation_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = setup(&mut rng, 1, 4, 1, false);
        let zid = s.bank.groups[0].z;
        s.ps.set_value(zid, &Mat::from_column_slice(4, 1, &[0.0, 2.0, 4.0, 6.0])).unwrap();
        let u = s.bank.groups[0].units[0].clone();
        let v = randn(&mut rng, 4, 1);
        s.ps.set_value(u.q_mean, &v).unwrap();
        s.ps.set_value(u.q_chol, &Mat::from_diagonal_element(4, 4, 1e-9)).unwrap();
        let z = s.ps.value(s.bank.groups[0].z);
        let (mean, var) = predict_marginals(&s.ps, &s.bank, &z).unwrap();
        for i in 0..4 {
            assert!((mean[(i, 0)] - v[i]).abs() < 1e-4, "{} {}", mean[(i, 0)], v[i]);
            assert!(var[(i, 0)] < 1e-5);
        }
    }

    #[test]
    fn matches_dense_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = setup(&mut rng, 1, 6, 1, true);
        let u = s.bank.groups[0].units[0].clone();
        let m = randn(&mut rng, 6, 1);
        let lq = Mat::from_fn(6, 6, |i, j| if i == j { 0.3 + 0.1 * i as f64 } else if i > j { 0.05 } else { 0.0 });
        s.ps.set_value(u.q_mean, &m).unwrap();
        s.ps.set_value(u.q_chol, &lq).unwrap();
        let x = randn(&mut rng, 5, 1);
        let (mean, var) = predict_marginals(&s.ps, &s.bank, &x).unwrap();

        let z = s.ps.value(s.bank.groups[0].z);
        let c = s.ps.value(s.ps.id_of("c").unwrap())[(0, 0)];
        let mut kzz = kernel_dense(&s, &z, &z);
        for i in 0..6 {
            kzz[(i, i)] += DEFAULT_JITTER;
        }
        let kinv = kzz.try_inverse().unwrap();
        let kxz = kernel_dense(&s, &x, &z);
        let sq = &lq * lq.transpose();
        let want_mean = kxz.clone() * &kinv * m.map(|v| v - c) + Mat::from_element(5, 1, c);
        let cov = kernel_dense(&s, &x, &x) - &kxz * &kinv * kxz.transpose()
            + &kxz * &kinv * sq * &kinv * kxz.transpose();
        for i in 0..5 {
            assert!((mean[i] - want_mean[i]).abs() < 1e-9);
            assert!((var[i] - cov[(i, i)]).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // far-apart inducing points: K_ZZ = s²I with s² = 1
        let mut ps = ParamSet::new();
        let kern = Kernel::Rbf(RbfKernel::new(&mut ps, "k", 1, true, 1.0, 0.1, None));
        let z = ps.add("Z", Mat::from_column_slice(3, 1, &[0.0, 10.0, 20.0]), Constraint::None);
        let g = GpGroup::new(&mut ps, "g", kern, MeanFunction::Zero, z, 1);
        let u = g.units[0].clone();
        let bank = GpBank::new(vec![g]);
        let l = Mat::from_diagonal_element(3, 3, (1.0 + DEFAULT_JITTER).sqrt());
        ps.set_value(u.q_chol, &l).unwrap();
        let delta = 0.7;
        ps.set_value(u.q_mean, &Mat::from_column_slice(3, 1, &[0.0, delta, 0.0])).unwrap();
        let kl = kl_inducing(&ps, &bank).unwrap();
        assert!((kl - delta * delta / 2.0).abs() < 1e-6, "{kl}");

        let mut s = setup(&mut rng, 2, 5, 1, true);
        let u = s.bank.groups[0].units[0].clone();
        let m = randn(&mut rng, 5, 1);
        let lq = Mat::from_fn(5, 5, |i, j| if i == j { 0.5 } else if i > j { 0.1 } else { 0.0 });
        s.ps.set_value(u.q_mean, &m).unwrap();
        s.ps.set_value(u.q_chol, &lq).unwrap();
        let c = s.ps.value(s.ps.id_of("c").unwrap())[(0, 0)];
        let lz = prior_factor(&s);
        let want = kl_full(
            &FullGaussian::new(m, lq).unwrap(),
            &FullGaussian::new(Mat::from_element(5, 1, c), lz).unwrap(),
        )
        .unwrap();
        assert!((kl_inducing(&s.ps, &s.bank).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn variance_bounded_by_prior_for_small_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = setup(&mut rng, 2, 10, 1, false);
        let x = randn(&mut rng, 20, 2);
        let (_, var) = predict_marginals(&s.ps, &s.bank, &x).unwrap();
        assert!(var.iter().all(|&v| v >= 0.0 && v <= 1.4 + 1e-8));
    }

    #[test]
    fn sampling_examples_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = setup(&mut rng, 2, 5, 1, true);
        let u = s.bank.groups[0].units[0].clone();
        s.ps.set_value(u.q_mean, &randn(&mut rng, 5, 1)).unwrap();
        let x = randn(&mut rng, 3, 2);
        let (mean, var) = predict_marginals(&s.ps, &s.bank, &x).unwrap();

        let t = Tape::new();
        let m = t.constant(mean.clone());
        let v = t.constant(var.clone());
        let zero = sample_marginals(m, v, t.constant(Mat::zeros(3, 1))).unwrap();
        assert_eq!(*zero.value(), mean);
        let dead = sample_marginals(m, t.constant(Mat::zeros(3, 1)), t.constant(randn(&mut rng, 3, 1))).unwrap();
        assert_eq!(*dead.value(), mean);

        let draws = 100_000;
        let samples = sample_marginals(m, v, t.constant(randn(&mut rng, 3 * draws, 1))).unwrap().value();
        for i in 0..3 {
            let vals: Vec<f64> = (0..draws).map(|k| samples[k * 3 + i]).collect();
            let mu = vals.iter().sum::<f64>() / draws as f64;
            let se = (var[i] / draws as f64).sqrt();
            assert!((mu - mean[i]).abs() < 3.0 * se);
            let emp = vals.iter().map(|x| (x - mean[i]).powi(2)).sum::<f64>() / draws as f64;
            let se_v = var[i] * (2.0 / draws as f64).sqrt();
            assert!((emp - var[i]).abs() < 3.0 * se_v);
        }
    }

    #[test]
    fn gradients_through_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = setup(&mut rng, 2, 4, 2, true);
        for u in s.bank.groups[0].units.clone() {
            s.ps.set_value(u.q_mean, &randn(&mut rng, 4, 1)).unwrap();
            let lq = Mat::from_fn(4, 4, |i, j| if i == j { 0.4 } else if i > j { 0.1 } else { 0.0 });
            s.ps.set_value(u.q_chol, &lq).unwrap();
        }
        let x = randn(&mut rng, 6, 2);
        let w = randn(&mut rng, 6, 2);
        let noise = randn(&mut rng, 6, 2);
        let bank = s.bank.clone();
        let r = finite_diff_check(&mut s.ps, 1e-5, |t, b| {
            let out = bank.forward(b, t.constant(x.clone()), true)?;
            let f = sample_marginals(out.mean, out.var, t.constant(noise.clone()))?;
            Ok((f * t.constant(w.clone())).sum() + out.var.sum() + out.kl.unwrap())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
