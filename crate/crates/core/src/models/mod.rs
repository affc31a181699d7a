//! Model assembly for the supervised variants and their latent-input
//! counterparts, ELBO evaluation (SGVB and analytic), latent fitting at test
//! time, prediction and checkpointing.

mod checkpoint;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use spec::{EllMode, ModelSpec, Variant, SGVB_SAMPLES, SGVB_SAMPLES_DEEP};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{adam_step, vstack, AdamState, Bound, Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gauss::{kmeans, tape_kl_diag, DiagGaussian};
use crate::kernels::{DeepKernel, Kernel, MeanFunction, Mlp, RbfKernel, DEEP_BLEND_INIT};
use crate::likelihoods::{
    head_mean_var_gprn, head_mean_var_linear, head_mean_var_neural, head_mean_var_sbgprn,
    head_sample_linear, head_sample_net, l2_penalty, scrub, tape_ell, GprnMixBank, HiddenLayer,
    LinearBayesMix, MixNet, NoiseModel, OutputMask,
};
use crate::quadmoments::{default_rule, gh_rule, QuadratureRule, DEFAULT_ORDER};
use crate::svgp::{sample_marginals, GpBank, GpGroup};

/// Initial observation precision.
pub const BETA_INIT: f64 = 10.0;
/// Initial diagonal noise of the GPRN mixing-weight kernel.
pub const GPRN_NOISE_INIT: f64 = 1e-2;
/// Initial scale of the latent-input posteriors.
pub const LATENT_SCALE_INIT: f64 = 0.1;
/// Lloyd iterations used to place inducing points.
const KMEANS_ITERS: usize = 25;
/// Upper bound on stacked rows per sampling pass.
const DRAW_ROWS: usize = 100_000;
/// Draws used for Monte-Carlo predictive moments of the deep variants.
const PREDICT_DRAWS: usize = 200;

/// Training or test data: inputs, outputs with unobserved entries zeroed,
/// and the 0/1 observation mask. Latent-input models carry `x` with zero columns.
#[derive(Clone, Debug)]
pub struct Data {
    pub x: Mat,
    pub y: Mat,
    pub mask: Mat,
}

impl Data {
    pub fn new(x: Mat, y: &Mat, mask: &OutputMask) -> Result<Self> {
        let m = mask.to_mat();
        if m.shape() != y.shape() {
            return Err(Error::shape("Data", "mask and outputs differ in shape"));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::shape("Data", "inputs and outputs differ in rows"));
        }
        Ok(Self {
            x,
            y: scrub(y, &m),
            mask: m,
        })
    }

    /// Fully observed outputs.
    pub fn observed(x: Mat, y: &Mat) -> Result<Self> {
        let mask = OutputMask::all(y.nrows(), y.ncols());
        Self::new(x, y, &mask)
    }

    /// Outputs only, for latent-input models.
    pub fn outputs(y: &Mat, mask: &OutputMask) -> Result<Self> {
        Self::new(Mat::zeros(y.nrows(), 0), y, mask)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let rows = |m: &Mat| Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Self {
            x: rows(&self.x),
            y: rows(&self.y),
            mask: rows(&self.mask),
        }
    }
}

/// Inputs at which to evaluate a model: observed, or a posterior over latents.
#[derive(Clone, Debug)]
pub enum Inputs {
    Observed(Mat),
    Latent(DiagGaussian),
}

impl Inputs {
    pub fn n(&self) -> usize {
        match self {
            Inputs::Observed(x) => x.nrows(),
            Inputs::Latent(q) => q.mean.nrows(),
        }
    }
}

/// `q(X) = Πᵢ N(xᵢ | mean_i, diag(scale_i²))` with a unit-normal prior.
#[derive(Clone, Debug)]
pub struct LatentInputs {
    /// `N×D_X`.
    pub mean: ParamId,
    /// Positive, `N×D_X`.
    pub scale: ParamId,
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Bayesian linear mixing (MOGP, DGP).
    Linear(LinearBayesMix),
    /// Hidden layer followed by Bayesian linear mixing (N-MOGP, N-DGP).
    Neural(LinearBayesMix, HiddenLayer),
    /// Network-valued mixing, optionally after a hidden layer (SBGPRN, N-SBGPRN).
    Net(MixNet, Option<HiddenLayer>),
    /// GP-valued mixing (GPRN).
    Gprn(GprnMixBank),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub ps: ParamSet,
    /// First-layer GPs (`L` units).
    pub f_bank: GpBank,
    /// Second-layer GPs of the deep variants (`L'` units).
    pub layer2: Option<GpBank>,
    pub head: Head,
    pub noise: NoiseModel,
    pub latents: Option<LatentInputs>,
    /// Training-set size used to rescale minibatch terms.
    pub n_data: usize,
    rule: QuadratureRule,
}

/// ELBO terms of one minibatch on a tape.
pub struct ElboOut<'t> {
    pub elbo: Var<'t>,
    /// Summed (unscaled) expected log-likelihood over the batch.
    pub ell: Var<'t>,
    /// Global KL terms: inducing, mixing, bias.
    pub kl: Var<'t>,
    /// Latent-input KL of the batch (unscaled), zero without latents.
    pub kl_x: Var<'t>,
    pub l2: Var<'t>,
}

/// Plain-value counterpart of [`ElboOut`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub ell: f64,
    pub kl: f64,
    pub kl_x: f64,
    pub l2: f64,
}

/// Result of fitting test-time latent posteriors.
#[derive(Clone, Debug)]
pub struct LatentFit {
    pub q: DiagGaussian,
    /// Objective estimate before each step.
    pub history: Vec<f64>,
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Principal-component scores of `y` standardized to unit variance; extra
/// dimensions beyond the rank are filled with small noise.
fn pca_scores(y: &Mat, d: usize, rng: &mut impl Rng) -> Mat {
    let n = y.nrows();
    let mut centered = y.clone();
    for j in 0..y.ncols() {
        let mu = y.column(j).mean();
        centered.column_mut(j).add_scalar_mut(-mu);
    }
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Mat::zeros(n, d);
    for c in 0..d {
        let usable = c < order.len() && eig.eigenvalues[order[c]] > 1e-10;
        if usable {
            let v = eig.eigenvectors.column(order[c]);
            let s = &centered * v;
            let sd = (s.norm_squared() / n.max(1) as f64).sqrt();
            for i in 0..n {
                out[(i, c)] = s[i] / sd;
            }
        } else {
            for i in 0..n {
                out[(i, c)] = LATENT_SCALE_INIT * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

impl Model {
    /// Constructs a model for `data`. Inducing inputs of the first layer are
    /// placed by k-means on the inputs (on PCA-initialized latent means for
    /// latent-input models); the deep variants' second-layer inducing inputs
    /// are standard normal and not shared.
    pub fn build(spec: &ModelSpec, data: &Data, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = data.n();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot build a model on empty data".into()));
        }
        if data.y.ncols() != spec.d_y {
            return Err(Error::Config(format!(
                "data has {} outputs, model expects D_Y = {}",
                data.y.ncols(),
                spec.d_y
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let act = spec.act()?;

        let (x_init, latents) = if spec.latent_inputs {
            let means = pca_scores(&data.y, spec.d_x, &mut rng);
            let lat = LatentInputs {
                mean: ps.add("latent.mean", means.clone(), crate::diffmath::Constraint::None),
                scale: ps.add_positive(
                    "latent.scale",
                    Mat::from_element(n, spec.d_x, LATENT_SCALE_INIT),
                ),
            };
            (means, Some(lat))
        } else {
            if data.x.ncols() != spec.d_x {
                return Err(Error::Config(format!(
                    "data has {} inputs, model expects D_X = {}",
                    data.x.ncols(),
                    spec.d_x
                )));
            }
            (data.x.clone(), None)
        };
        let m1 = spec.n_ind.min(n);
        let z_init = kmeans(&x_init, m1, KMEANS_ITERS, rng.gen())?;
        let z = ps.add("f.Z", z_init.clone(), crate::diffmath::Constraint::None);

        let shared_net = if spec.deep_kernel {
            let net = Mlp::new(&mut ps, "f.warp", &[spec.d_x, 50, 50, spec.d_x], 1.0, &mut rng);
            let blend = ps.add(
                "f.warp.blend",
                Mat::from_element(1, 1, DEEP_BLEND_INIT),
                crate::diffmath::Constraint::None,
            );
            Some((net, blend))
        } else {
            None
        };
        let neural = spec.variant.is_neural();
        let mut groups = Vec::with_capacity(spec.l);
        for u in 0..spec.l {
            let prefix = format!("f{u}");
            let base = RbfKernel::new(&mut ps, &format!("{prefix}.kern"), spec.d_x, spec.ard, 1.0, 1.0, None);
            let kernel = match &shared_net {
                Some((net, blend)) => Kernel::Deep(DeepKernel {
                    base,
                    net: net.clone(),
                    blend: *blend,
                }),
                None => Kernel::Rbf(base),
            };
            let mean_fn = if neural {
                MeanFunction::Zero
            } else {
                MeanFunction::constant(&mut ps, &format!("{prefix}.mean"), 1)
            };
            groups.push(GpGroup::new(&mut ps, &prefix, kernel, mean_fn, z, 1));
        }
        let f_bank = GpBank::new(groups);

        let layer2 = if spec.variant.is_deep() {
            let lp = spec.l_prime.expect("validated");
            let mut groups = Vec::with_capacity(lp);
            for u in 0..lp {
                let prefix = format!("g{u}");
                let z2 = ps.add(
                    format!("{prefix}.Z"),
                    randn(&mut rng, spec.n_ind2, spec.l),
                    crate::diffmath::Constraint::None,
                );
                let kernel = Kernel::Rbf(RbfKernel::new(&mut ps, &format!("{prefix}.kern"), spec.l, true, 1.0, 1.0, None));
                let mean_fn = if neural {
                    MeanFunction::Zero
                } else {
                    MeanFunction::constant(&mut ps, &format!("{prefix}.mean"), 1)
                };
                groups.push(GpGroup::new(&mut ps, &prefix, kernel, mean_fn, z2, 1));
            }
            Some(GpBank::new(groups))
        } else {
            None
        };

        let d_y = spec.d_y;
        let head = match spec.variant {
            Variant::Mogp => Head::Linear(LinearBayesMix::new(&mut ps, "mix", d_y, spec.l, &mut rng)),
            Variant::Dgp => Head::Linear(LinearBayesMix::new(
                &mut ps,
                "mix",
                d_y,
                spec.l_prime.expect("validated"),
                &mut rng,
            )),
            Variant::NMogp | Variant::NDgp => {
                let d_h = spec.d_h.expect("validated");
                let k = if spec.variant == Variant::NDgp {
                    spec.l_prime.expect("validated")
                } else {
                    spec.l
                };
                let hidden = HiddenLayer::new(&mut ps, "hidden", d_h, k, act, &mut rng);
                Head::Neural(LinearBayesMix::new(&mut ps, "mix", d_y, d_h, &mut rng), hidden)
            }
            Variant::Sbgprn => Head::Net(MixNet::new(&mut ps, "mixnet", spec.d_x, d_y, spec.l, &mut rng), None),
            Variant::NSbgprn => {
                let d_h = spec.d_h.expect("validated");
                let hidden = HiddenLayer::new(&mut ps, "hidden", d_h, spec.l, act, &mut rng);
                Head::Net(MixNet::new(&mut ps, "mixnet", spec.d_x, d_y, d_h, &mut rng), Some(hidden))
            }
            Variant::Gprn => {
                let units = d_y * spec.l;
                let zw = ps.add("w.Z", z_init, crate::diffmath::Constraint::None);
                let kernel = Kernel::Rbf(RbfKernel::new(
                    &mut ps,
                    "w.kern",
                    spec.d_x,
                    spec.ard,
                    1.0,
                    1.0,
                    Some(GPRN_NOISE_INIT),
                ));
                let c = ps.add(
                    "w.mean",
                    Mat::from_fn(1, units, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
                    crate::diffmath::Constraint::None,
                );
                let group = GpGroup::new(&mut ps, "w", kernel, MeanFunction::Constant(c), zw, units);
                Head::Gprn(GprnMixBank {
                    bank: GpBank::new(vec![group]),
                    d_y,
                    l: spec.l,
                })
            }
        };
        let noise = NoiseModel::new(&mut ps, "noise", d_y, BETA_INIT);
        let rule = if spec.quad_order == DEFAULT_ORDER {
            default_rule().clone()
        } else {
            gh_rule(spec.quad_order)?
        };
        Ok(Self {
            spec: spec.clone(),
            ps,
            f_bank,
            layer2,
            head,
            noise,
            latents,
            n_data: n,
            rule,
        })
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    fn hidden(&self) -> Option<&HiddenLayer> {
        match &self.head {
            Head::Neural(_, h) => Some(h),
            Head::Net(_, h) => h.as_ref(),
            _ => None,
        }
    }

    /// MAP weight matrices under the L2 penalty: `M̃`, mixing-network and
    /// deep-kernel network weights (biases excluded).
    pub fn l2_weights(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(h) = self.hidden() {
            ids.push(h.mt);
        }
        if let Head::Net(net, _) = &self.head {
            ids.extend(net.net.layers.iter().map(|&(w, _)| w));
        }
        for g in &self.f_bank.groups {
            if let Some(net) = g.kernel.net() {
                ids.extend(net.layers.iter().map(|&(w, _)| w));
            }
        }
        ids.sort_by_key(|p| p.0);
        ids.dedup();
        ids
    }

    /// Analytic head moments `(m, v)` at the rows of `x` (`B×D_Y`).
    pub fn head_analytic<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if self.layer2.is_some() {
            return Err(Error::Unsupported(format!(
                "analytic ELL is not available for {}",
                self.spec.variant
            )));
        }
        let out = self.f_bank.forward(b, x, false)?;
        let (fm, fv) = (out.mean, out.var);
        match &self.head {
            Head::Linear(mix) => Ok(head_mean_var_linear(b, mix, fm, fv)),
            Head::Neural(mix, h) => Ok(head_mean_var_neural(b, mix, h, fm, fv, &self.rule)),
            Head::Net(net, h) => {
                let mx = net.forward(b, x)?;
                head_mean_var_sbgprn(b, mx, self.spec.d_y, h.as_ref(), fm, fv, &self.rule)
            }
            Head::Gprn(g) => {
                let w = g.bank.forward(b, x, false)?;
                head_mean_var_gprn(w.mean, w.var, fm, fv, self.spec.d_y)
            }
        }
    }

    /// Head moments given `s` joint draws of every random quantity except
    /// the Bayesian mixing matrix, which is integrated out. Rows are
    /// `(S·B)×D_Y` with row `s·B + i` belonging to draw `s` at input `i`.
    pub fn head_sampled<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        s: usize,
        rng: &mut impl Rng,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let n = x.nrows();
        let rows = s * n;
        let out = self.f_bank.forward(b, x, false)?;
        let mut f = sample_marginals(out.mean, out.var, tape.constant(randn(rng, rows, self.spec.l)))?;
        if let Some(l2) = &self.layer2 {
            let g = l2.forward(b, f, false)?;
            f = sample_marginals(g.mean, g.var, tape.constant(randn(rng, rows, l2.n_units())))?;
        }
        let d_y = self.spec.d_y;
        let tile = |v: Var<'t>| if s == 1 { v } else { vstack(&vec![v; s]) };
        let zeros = || tape.constant(Mat::zeros(rows, d_y));
        match &self.head {
            Head::Linear(mix) => Ok(head_sample_linear(b, mix, f)),
            Head::Neural(mix, h) => {
                let eps = tape.constant(randn(rng, rows, h.d_h(&self.ps)));
                Ok(head_sample_linear(b, mix, h.sample(b, f, eps)))
            }
            Head::Net(net, h) => {
                let mx = tile(net.forward(b, x)?);
                let a = match h {
                    Some(h) => {
                        let eps = tape.constant(randn(rng, rows, h.d_h(&self.ps)));
                        h.sample(b, f, eps)
                    }
                    None => f,
                };
                Ok((head_sample_net(mx, a, d_y)?, zeros()))
            }
            Head::Gprn(g) => {
                let w = g.bank.forward(b, x, false)?;
                let wn = tape.constant(randn(rng, rows, g.bank.n_units()));
                let w = sample_marginals(w.mean, w.var, wn)?;
                Ok((head_sample_net(w, f, d_y)?, zeros()))
            }
        }
    }

    /// Summed ELL over the rows of `x`/`y` in the configured mode.
    fn ell_sum<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        y: &Mat,
        mask: &Mat,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        let tape = x.tape();
        let beta = b.get(self.noise.beta);
        match self.spec.ell_mode {
            EllMode::Analytic => {
                let (m, v) = self.head_analytic(b, x)?;
                Ok(tape_ell(tape.constant(y.clone()), tape.constant(mask.clone()), m, v, beta))
            }
            EllMode::Sgvb => {
                let s = self.spec.n_samples;
                let (m, v) = self.head_sampled(b, x, s, rng)?;
                let stack = |a: &Mat| {
                    let mut out = Mat::zeros(a.nrows() * s, a.ncols());
                    for k in 0..s {
                        out.rows_mut(k * a.nrows(), a.nrows()).copy_from(a);
                    }
                    out
                };
                let ell = tape_ell(tape.constant(stack(y)), tape.constant(stack(mask)), m, v, beta);
                Ok(ell.scale(1.0 / s as f64))
            }
        }
    }

    /// Global KL terms: inducing variables of every bank, `q(M)`, `q(b)`.
    pub fn kl_global<'t>(&self, b: &Bound<'t>, tape: &'t Tape) -> Result<Var<'t>> {
        let mut kl = self.f_bank.kl(b, tape)?;
        if let Some(l2) = &self.layer2 {
            kl = kl + l2.kl(b, tape)?;
        }
        match &self.head {
            Head::Linear(mix) => kl = kl + mix.kl(b, tape),
            Head::Neural(mix, h) => kl = kl + mix.kl(b, tape) + h.kl(b, tape),
            Head::Net(_, Some(h)) => kl = kl + h.kl(b, tape),
            Head::Net(_, None) => {}
            Head::Gprn(g) => kl = kl + g.bank.kl(b, tape)?,
        }
        Ok(kl)
    }

    fn latent_rows<'t>(
        &self,
        b: &Bound<'t>,
        tape: &'t Tape,
        lat: &LatentInputs,
        batch: &[usize],
        rng: &mut impl Rng,
    ) -> (Var<'t>, Var<'t>) {
        let mean = b.get(lat.mean).gather_rows(batch);
        let scale = b.get(lat.scale).gather_rows(batch);
        let eps = tape.constant(randn(rng, batch.len(), self.spec.d_x));
        let x = mean + scale * eps;
        (x, tape_kl_diag(mean, scale, tape.scalar(0.0), tape.scalar(1.0)))
    }

    /// `(N/|B|)·Σ_B ELL − kl_scale·[KL + (N/|B|)·KL_X(B)] − L2` on a tape.
    /// Random draws are a deterministic function of `seed`.
    pub fn elbo_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        data: &Data,
        batch: &[usize],
        seed: u64,
        kl_scale: f64,
    ) -> Result<ElboOut<'t>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= data.n()) {
            return Err(Error::InvalidArgument(format!("batch index {bad} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = data.select(batch);
        let (x, kl_x) = match &self.latents {
            Some(lat) => {
                if data.n() != self.n_data {
                    return Err(Error::shape("elbo", "latent models train on their own data only"));
                }
                self.latent_rows(b, tape, lat, batch, &mut rng)
            }
            None => (tape.constant(sub.x.clone()), tape.scalar(0.0)),
        };
        let ell = self.ell_sum(b, x, &sub.y, &sub.mask, &mut rng)?;
        let kl = self.kl_global(b, tape)?;
        let l2 = l2_penalty(b, tape, &self.l2_weights(), self.spec.l2);
        let rescale = self.n_data as f64 / batch.len() as f64;
        let elbo = ell.scale(rescale) - (kl + kl_x.scale(rescale)).scale(kl_scale) - l2;
        Ok(ElboOut {
            elbo,
            ell,
            kl,
            kl_x,
            l2,
        })
    }

    pub fn elbo_terms(&self, data: &Data, batch: &[usize], seed: u64, kl_scale: f64) -> Result<ElboTerms> {
        let tape = Tape::new();
        let b = self.ps.bind(&tape);
        let o = self.elbo_on_tape(&tape, &b, data, batch, seed, kl_scale)?;
        Ok(ElboTerms {
            elbo: o.elbo.item(),
            ell: o.ell.item(),
            kl: o.kl.item(),
            kl_x: o.kl_x.item(),
            l2: o.l2.item(),
        })
    }

    pub fn elbo_minibatch(&self, data: &Data, batch: &[usize], seed: u64, kl_scale: f64) -> Result<f64> {
        Ok(self.elbo_terms(data, batch, seed, kl_scale)?.elbo)
    }

    /// Layer-2 samples of the deep variants at the rows of `x`, one draw per row.
    pub fn dgp_forward_sample<'t>(&self, b: &Bound<'t>, x: Var<'t>, rng: &mut impl Rng) -> Result<Var<'t>> {
        let l2 = self.layer2.as_ref().ok_or_else(|| {
            Error::Unsupported(format!("{} has no second GP layer", self.spec.variant))
        })?;
        let tape = x.tape();
        let out = self.f_bank.forward(b, x, false)?;
        let f = sample_marginals(out.mean, out.var, tape.constant(randn(rng, x.nrows(), self.spec.l)))?;
        let g = l2.forward(b, f, false)?;
        sample_marginals(g.mean, g.var, tape.constant(randn(rng, x.nrows(), l2.n_units())))
    }

    /// Summed ELL of a latent-input model over `batch`, with one
    /// reparameterized draw per latent input.
    pub fn lvm_ell(&self, data: &Data, batch: &[usize], seed: u64) -> Result<f64> {
        let lat = self.latents.as_ref().ok_or_else(|| {
            Error::Unsupported("lvm_ell requires a latent-input model".into())
        })?;
        let tape = Tape::new();
        let b = self.ps.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = data.select(batch);
        let (x, _) = self.latent_rows(&b, &tape, lat, batch, &mut rng);
        Ok(self.ell_sum(&b, x, &sub.y, &sub.mask, &mut rng)?.item())
    }

    /// Training-latent posterior `q(X)`.
    pub fn train_latents(&self) -> Option<DiagGaussian> {
        self.latents.as_ref().map(|l| DiagGaussian {
            mean: self.ps.value(l.mean),
            scale: self.ps.value(l.scale),
        })
    }

    /// Fits `q(X*)` for the rows of `test` with every model parameter
    /// frozen. Means start at the latent mean of the nearest training point
    /// in observed-output space.
    pub fn fit_test_latents(
        &self,
        train: &Data,
        test: &Data,
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> Result<LatentFit> {
        let q_train = self
            .train_latents()
            .ok_or_else(|| Error::Unsupported("fit_test_latents requires a latent-input model".into()))?;
        if test.n() == 0 {
            return Err(Error::InvalidArgument("empty test set".into()));
        }
        if train.n() != q_train.mean.nrows() {
            return Err(Error::shape("fit_test_latents", "training data does not match the model"));
        }
        let nn: Vec<usize> = (0..test.n())
            .map(|i| nearest_observed(train, test, i))
            .collect();
        let init = DiagGaussian {
            mean: Mat::from_fn(test.n(), self.spec.d_x, |i, j| q_train.mean[(nn[i], j)]),
            scale: Mat::from_fn(test.n(), self.spec.d_x, |i, j| q_train.scale[(nn[i], j)]),
        };
        let mut ps = self.ps.clone();
        ps.set_all_trainable(false);
        let lat = LatentInputs {
            mean: ps.add("test_latent.mean", init.mean.clone(), crate::diffmath::Constraint::None),
            scale: ps.add_positive("test_latent.scale", init.scale.clone()),
        };
        let all: Vec<usize> = (0..test.n()).collect();
        let mut adam = AdamState::new(&ps);
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let tape = Tape::new();
            let b = ps.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(step as u64));
            let (x, kl) = self.latent_rows(&b, &tape, &lat, &all, &mut rng);
            let obj = self.ell_sum(&b, x, &test.y, &test.mask, &mut rng)? - kl;
            history.push(obj.item());
            let grads = tape.backward(-obj)?;
            ps.set_grads(&b, &grads);
            adam_step(&mut ps, &mut adam, lr)?;
        }
        Ok(LatentFit {
            q: DiagGaussian {
                mean: ps.value(lat.mean),
                scale: ps.value(lat.scale),
            },
            history,
        })
    }

    /// Monte-Carlo estimate of `E_q(X*)[ELL] − KL(q(X*) ‖ N(0, I))` on `test`
    /// averaged over `draws` latent draws seeded from `seed`.
    pub fn latent_objective(&self, q: &DiagGaussian, test: &Data, draws: usize, seed: u64) -> Result<f64> {
        let mut ps = self.ps.clone();
        let lat = LatentInputs {
            mean: ps.add("test_latent.mean", q.mean.clone(), crate::diffmath::Constraint::None),
            scale: ps.add_positive("test_latent.scale", q.scale.clone()),
        };
        let all: Vec<usize> = (0..test.n()).collect();
        let mut acc = 0.0;
        for d in 0..draws.max(1) {
            let tape = Tape::new();
            let b = ps.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(d as u64));
            let (x, kl) = self.latent_rows(&b, &tape, &lat, &all, &mut rng);
            acc += (self.ell_sum(&b, x, &test.y, &test.mask, &mut rng)? - kl).item();
        }
        Ok(acc / draws.max(1) as f64)
    }

    /// `n_draws` joint draws of the head moments at `inputs`, each `(m, v)`
    /// of shape `n×D_Y` (observation noise excluded). Latent inputs are
    /// redrawn for every draw.
    pub fn draw_mean_var(&self, inputs: &Inputs, n_draws: usize, rng: &mut impl Rng) -> Result<Vec<(Mat, Mat)>> {
        let n = inputs.n();
        if n == 0 {
            return Ok(vec![(Mat::zeros(0, self.spec.d_y), Mat::zeros(0, self.spec.d_y)); n_draws]);
        }
        self.check_inputs(inputs)?;
        let chunk = (DRAW_ROWS / n).max(1);
        let mut out = Vec::with_capacity(n_draws);
        while out.len() < n_draws {
            let s = chunk.min(n_draws - out.len());
            let tape = Tape::new();
            let b = self.ps.bind(&tape);
            let (m, v) = match inputs {
                Inputs::Observed(x) => self.head_sampled(&b, tape.constant(x.clone()), s, rng)?,
                Inputs::Latent(q) => {
                    let mut xs = Mat::zeros(s * n, q.mean.ncols());
                    for k in 0..s {
                        for i in 0..n {
                            for j in 0..q.mean.ncols() {
                                let e: f64 = rng.sample(StandardNormal);
                                xs[(k * n + i, j)] = q.mean[(i, j)] + q.scale[(i, j)] * e;
                            }
                        }
                    }
                    self.head_sampled(&b, tape.constant(xs), 1, rng)?
                }
            };
            let (m, v) = (m.value(), v.value());
            for k in 0..s {
                out.push((
                    m.rows(k * n, n).into_owned(),
                    v.rows(k * n, n).into_owned(),
                ));
            }
        }
        Ok(out)
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<()> {
        let d = match inputs {
            Inputs::Observed(x) => x.ncols(),
            Inputs::Latent(q) => q.mean.ncols(),
        };
        if d != self.spec.d_x {
            return Err(Error::shape(
                "inputs",
                format!("{d} columns, model expects D_X = {}", self.spec.d_x),
            ));
        }
        Ok(())
    }

    /// Predictive means and variances (observation noise included) at `x`.
    /// Analytic where available; the deep variants use moment-matched draws.
    pub fn predict(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let inputs = Inputs::Observed(x.clone());
        self.check_inputs(&inputs)?;
        let noise_var = self.ps.value(self.noise.beta).map(|b| 1.0 / b);
        let (mean, mut var) = if self.spec.variant.supports_analytic() {
            let tape = Tape::new();
            let b = self.ps.bind(&tape);
            let (m, v) = self.head_analytic(&b, tape.constant(x.clone()))?;
            let out = ((*m.value()).clone(), (*v.value()).clone());
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let draws = self.draw_mean_var(&inputs, PREDICT_DRAWS, &mut rng)?;
            let k = draws.len() as f64;
            let mut mean = Mat::zeros(x.nrows(), self.spec.d_y);
            let mut second = Mat::zeros(x.nrows(), self.spec.d_y);
            for (m, v) in &draws {
                mean += m;
                second += v + m.component_mul(m);
            }
            mean /= k;
            second /= k;
            let var = (second - mean.component_mul(&mean)).map(|v| v.max(0.0));
            (mean, var)
        };
        for mut row in var.row_iter_mut() {
            row += &noise_var;
        }
        Ok((mean, var))
    }
}

/// Index of the training row closest to test row `i` in mean squared
/// difference over jointly observed outputs.
fn nearest_observed(train: &Data, test: &Data, i: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for j in 0..train.n() {
        let mut s = 0.0;
        let mut c = 0usize;
        for k in 0..test.y.ncols() {
            if test.mask[(i, k)] != 0.0 && train.mask[(j, k)] != 0.0 {
                let d = test.y[(i, k)] - train.y[(j, k)];
                s += d * d;
                c += 1;
            }
        }
        if c > 0 && s / (c as f64) < best.1 {
            best = (j, s / c as f64);
        }
    }
    best.0
}

#[cfg(test)]
mod tests;
