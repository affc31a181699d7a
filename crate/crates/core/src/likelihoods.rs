//! Likelihood heads mapping latent GP values to observation means, the
//! diagonal Gaussian noise model, analytic mean/variance propagation through
//! the heads, and missing-output masks.
//!
//! All heads act on minibatches: latent means/variances are `B×L` (one row
//! per datapoint), head outputs are `B×D_Y`. Input-dependent mixing matrices
//! (`M(x)` of the SBGPRN family and the GPRN) are stored row-wise with
//! `D_Y·K` columns, column `k·K + j` holding entry `(k, j)`.

use std::f64::consts::PI;

use rand::Rng;

use crate::diffmath::{Bound, Constraint, Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gauss::tape_kl_diag;
use crate::kernels::Mlp;
use crate::quadmoments::{
    tape_act_cross_moment, tape_act_mean, tape_act_second_moment, Activation, QuadratureRule,
};
use crate::svgp::GpBank;

/// Default L2 strength on MAP weights.
pub const DEFAULT_L2: f64 = 1e-4;

/// Observation precisions `β` (one per output).
#[derive(Clone, Debug)]
pub struct NoiseModel {
    /// Positive, `1×D_Y`.
    pub beta: ParamId,
}

impl NoiseModel {
    pub fn new(ps: &mut ParamSet, prefix: &str, d_y: usize, beta: f64) -> Self {
        Self {
            beta: ps.add_positive(format!("{prefix}.beta"), Mat::from_element(1, d_y, beta)),
        }
    }
}

/// Observed-entry indicator; `true` = observed.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMask {
    pub observed: Vec<Vec<bool>>,
}

impl OutputMask {
    pub fn all(n: usize, d: usize) -> Self {
        Self {
            observed: vec![vec![true; d]; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.observed.len()
    }

    pub fn ncols(&self) -> usize {
        self.observed.first().map(|r| r.len()).unwrap_or(0)
    }

    /// `1.0` where observed, `0.0` elsewhere.
    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.nrows(), self.ncols(), |i, j| {
            if self.observed[i][j] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            observed: idx.iter().map(|&i| self.observed[i].clone()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.observed.iter().flatten().filter(|&&o| o).count()
    }
}

/// `y` with unobserved entries replaced by zero, so that their values never
/// enter any computation.
pub fn scrub(y: &Mat, mask: &Mat) -> Mat {
    y.zip_map(mask, |v, m| if m != 0.0 { v } else { 0.0 })
}

/// `Σ_k observed · [½ log(β_k/2π) − β_k/2 ((y_k − m_k)² + v_k)]` for one datapoint.
pub fn ell_gaussian_point(
    y: &[f64],
    m: &[f64],
    v: &[f64],
    beta: &[f64],
    observed: &[bool],
) -> Result<f64> {
    let d = y.len();
    if m.len() != d || v.len() != d || beta.len() != d || observed.len() != d {
        return Err(Error::shape("ell_gaussian_point", "length mismatch"));
    }
    if v.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let mut s = 0.0;
    for k in 0..d {
        if observed[k] {
            let r = y[k] - m[k];
            s += 0.5 * (beta[k] / (2.0 * PI)).ln() - 0.5 * beta[k] * (r * r + v[k]);
        }
    }
    Ok(s)
}

/// Tape version of the summed ELL over a block of rows. `y` must already be
/// scrubbed; `mask` holds 0/1 entries.
pub fn tape_ell<'t>(y: Var<'t>, mask: Var<'t>, m: Var<'t>, v: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let r = y - m;
    let per = (beta.scale(1.0 / (2.0 * PI))).ln().scale(0.5) - beta.scale(0.5) * (r.square() + v);
    (per * mask).sum()
}

/// `q(M) = N(M₀, σ_M²)` entry-wise with a unit-normal prior.
#[derive(Clone, Debug)]
pub struct LinearBayesMix {
    /// `D_Y×K`.
    pub m0: ParamId,
    /// Positive, `D_Y×K`.
    pub sm: ParamId,
}

pub const SIGMA_M_INIT: f64 = 1e-2;

impl LinearBayesMix {
    pub fn new(ps: &mut ParamSet, prefix: &str, d_y: usize, k: usize, rng: &mut impl Rng) -> Self {
        let m0 = Mat::from_fn(d_y, k, |_, _| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        Self {
            m0: ps.add(format!("{prefix}.M0"), m0, Constraint::None),
            sm: ps.add_positive(format!("{prefix}.sigma_M"), Mat::from_element(d_y, k, SIGMA_M_INIT)),
        }
    }

    pub fn kl<'t>(&self, b: &Bound<'t>, tape: &'t Tape) -> Var<'t> {
        tape_kl_diag(b.get(self.m0), b.get(self.sm), tape.scalar(0.0), tape.scalar(1.0))
    }
}

/// `σ(M̃ f + b)` with MAP `M̃` and `q(b) = N(b₀, s_b²)`, unit-normal prior on `b`.
#[derive(Clone, Debug)]
pub struct HiddenLayer {
    /// `D_H×L`.
    pub mt: ParamId,
    /// `1×D_H`.
    pub b_mean: ParamId,
    /// Positive, `1×D_H`.
    pub b_scale: ParamId,
    pub act: Activation,
    pairs_a: Vec<usize>,
    pairs_b: Vec<usize>,
}

pub const BIAS_SCALE_INIT: f64 = 0.1;

impl HiddenLayer {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        d_h: usize,
        l: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (l as f64).sqrt();
        let mt = Mat::from_fn(d_h, l, |_, _| rng.gen_range(-bound..bound));
        let mut pairs_a = Vec::new();
        let mut pairs_b = Vec::new();
        for h in 0..d_h {
            for h2 in h + 1..d_h {
                pairs_a.push(h);
                pairs_b.push(h2);
            }
        }
        Self {
            mt: ps.add(format!("{prefix}.Mtilde"), mt, Constraint::None),
            b_mean: ps.add(format!("{prefix}.b_mean"), Mat::zeros(1, d_h), Constraint::None),
            b_scale: ps.add_positive(
                format!("{prefix}.b_scale"),
                Mat::from_element(1, d_h, BIAS_SCALE_INIT),
            ),
            act,
            pairs_a,
            pairs_b,
        }
    }

    pub fn d_h(&self, ps: &ParamSet) -> usize {
        ps.get(self.mt).raw.nrows()
    }

    pub fn kl<'t>(&self, b: &Bound<'t>, tape: &'t Tape) -> Var<'t> {
        tape_kl_diag(b.get(self.b_mean), b.get(self.b_scale), tape.scalar(0.0), tape.scalar(1.0))
    }

    /// Moments of the hidden activations given Gaussian latent marginals.
    pub fn moments<'t>(
        &self,
        b: &Bound<'t>,
        fm: Var<'t>,
        fv: Var<'t>,
        rule: &QuadratureRule,
    ) -> HiddenMoments<'t> {
        let tape = fm.tape();
        let mt = b.get(self.mt);
        let sb = b.get(self.b_scale);
        let a_mean = fm.matmul(mt.t()) + b.get(self.b_mean);
        let a_var = fv.matmul(mt.square().t()) + sb.square();
        let mean = tape_act_mean(tape, self.act, a_mean, a_var);
        let second = tape_act_second_moment(tape, self.act, rule, a_mean, a_var);
        let vdiag = second - mean.square();
        let vpair = if self.pairs_a.is_empty() {
            None
        } else {
            let w = mt.gather_rows(&self.pairs_a) * mt.gather_rows(&self.pairs_b);
            let cov = fv.matmul(w.t());
            let cross = tape_act_cross_moment(
                tape,
                self.act,
                rule,
                a_mean.gather_cols(&self.pairs_a),
                a_mean.gather_cols(&self.pairs_b),
                a_var.gather_cols(&self.pairs_a),
                cov,
                a_var.gather_cols(&self.pairs_b),
            );
            Some(cross - mean.gather_cols(&self.pairs_a) * mean.gather_cols(&self.pairs_b))
        };
        HiddenMoments {
            mean,
            vdiag,
            vpair,
            second,
        }
    }

    /// `σ(f M̃ᵀ + b)` for sampled latents `f` and standard-normal bias noise `eps` (same rows).
    pub fn sample<'t>(&self, b: &Bound<'t>, f: Var<'t>, eps: Var<'t>) -> Var<'t> {
        let bias = b.get(self.b_mean) + b.get(self.b_scale) * eps;
        let act = self.act;
        (f.matmul(b.get(self.mt).t()) + bias).map(move |x| (act.eval(x), act.deriv(x)))
    }
}

/// Activation moments for a batch: `mean`, `vdiag` and `second` are `B×D_H`;
/// `vpair` is `B×P` over the pairs `h < h'` in lexicographic order.
pub struct HiddenMoments<'t> {
    pub mean: Var<'t>,
    pub vdiag: Var<'t>,
    pub vpair: Option<Var<'t>>,
    pub second: Var<'t>,
}

/// Deterministic input-dependent mixing matrix `M(x)`: a tanh network with
/// `D_Y·K` outputs.
#[derive(Clone, Debug)]
pub struct MixNet {
    pub net: Mlp,
    pub d_y: usize,
    pub k: usize,
}

impl MixNet {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_y: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            net: Mlp::new(ps, prefix, &[d_in, 50, 50, d_y * k], 1.0, rng),
            d_y,
            k,
        }
    }

    /// `B×(D_Y·K)`.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(b, x)
    }
}

/// GP-distributed mixing weights: `D_Y·L` GPs sharing one kernel.
#[derive(Clone, Debug)]
pub struct GprnMixBank {
    pub bank: GpBank,
    pub d_y: usize,
    pub l: usize,
}

/// `m = fm M₀ᵀ`, `v = fv (M₀² + σ_M²)ᵀ + fm² (σ_M²)ᵀ`.
pub fn head_mean_var_linear<'t>(
    b: &Bound<'t>,
    mix: &LinearBayesMix,
    fm: Var<'t>,
    fv: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let m0 = b.get(mix.m0);
    let s2 = b.get(mix.sm).square();
    let m = fm.matmul(m0.t());
    let v = fv.matmul((m0.square() + s2).t()) + fm.square().matmul(s2.t());
    (m, v)
}

/// Neural head with a Bayesian linear readout:
/// `m = m^σ M₀ᵀ`, `v = v₁ + v₂ + v₃` with
/// `v₁ = M₀ v^σ M₀ᵀ` (diagonal), `v₂ = (m^σ)² (σ_M²)ᵀ`, `v₃ = diag(v^σ) (σ_M²)ᵀ`.
pub fn head_mean_var_neural<'t>(
    b: &Bound<'t>,
    mix: &LinearBayesMix,
    hidden: &HiddenLayer,
    fm: Var<'t>,
    fv: Var<'t>,
    rule: &QuadratureRule,
) -> (Var<'t>, Var<'t>) {
    let hm = hidden.moments(b, fm, fv, rule);
    let m0 = b.get(mix.m0);
    let s2 = b.get(mix.sm).square();
    let m = hm.mean.matmul(m0.t());
    let mut v1 = hm.vdiag.matmul(m0.square().t());
    if let Some(vp) = hm.vpair {
        let q = m0.gather_cols(&hidden.pairs_a) * m0.gather_cols(&hidden.pairs_b);
        v1 = v1 + vp.matmul(q.t()).scale(2.0);
    }
    // v₂ + v₃ = E[σ²] (σ_M²)ᵀ
    let v23 = hm.second.matmul(s2.t());
    (m, (v1 + v23).clamp_min(0.0))
}

/// Row-wise `Σ_j mx[k, j] · a[j]` for `mx` of shape `B×(D_Y·K)` and `a` of shape `B×K`.
fn rowwise_mix<'t>(mx: Var<'t>, a: Var<'t>, d_y: usize) -> Var<'t> {
    let k = a.ncols();
    (mx * a.tile_cols(d_y)).sum_col_groups(k)
}

/// SBGPRN (`hidden = None`): `m = M(x) fm`, `v_k = Σ_ℓ M(x)[k,ℓ]² fv_ℓ`.
/// N-SBGPRN: `m = M(x) m^σ`, `v_k = Σ_{h,h'} M(x)[k,h] v^σ[h,h'] M(x)[k,h']`.
pub fn head_mean_var_sbgprn<'t>(
    b: &Bound<'t>,
    mx: Var<'t>,
    d_y: usize,
    hidden: Option<&HiddenLayer>,
    fm: Var<'t>,
    fv: Var<'t>,
    rule: &QuadratureRule,
) -> Result<(Var<'t>, Var<'t>)> {
    match hidden {
        None => {
            if mx.ncols() != d_y * fm.ncols() {
                return Err(Error::shape("head_mean_var_sbgprn", "M(x) width"));
            }
            let m = rowwise_mix(mx, fm, d_y);
            let v = rowwise_mix(mx.square(), fv, d_y);
            Ok((m, v))
        }
        Some(h) => {
            let hm = h.moments(b, fm, fv, rule);
            let d_h = hm.mean.ncols();
            if mx.ncols() != d_y * d_h {
                return Err(Error::shape("head_mean_var_sbgprn", "M(x) width"));
            }
            let m = rowwise_mix(mx, hm.mean, d_y);
            let mut v = rowwise_mix(mx.square(), hm.vdiag, d_y);
            if let Some(vp) = hm.vpair {
                let p = vp.ncols();
                let mut ia = Vec::with_capacity(d_y * p);
                let mut ib = Vec::with_capacity(d_y * p);
                for k in 0..d_y {
                    for q in 0..p {
                        ia.push(k * d_h + h.pairs_a[q]);
                        ib.push(k * d_h + h.pairs_b[q]);
                    }
                }
                let prod = mx.gather_cols(&ia) * mx.gather_cols(&ib);
                v = v + rowwise_mix(prod, vp, d_y).scale(2.0);
            }
            Ok((m, v.clamp_min(0.0)))
        }
    }
}

/// GPRN: with independent Gaussian `W[k,ℓ](x)` and `F_ℓ(x)`,
/// `m_k = Σ_ℓ μ_W μ_F`, `v_k = Σ_ℓ μ_W² σ_F² + μ_F² σ_W² + σ_W² σ_F²`.
pub fn head_mean_var_gprn<'t>(
    wm: Var<'t>,
    wv: Var<'t>,
    fm: Var<'t>,
    fv: Var<'t>,
    d_y: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    if wm.ncols() != d_y * fm.ncols() || wv.shape() != wm.shape() {
        return Err(Error::shape("head_mean_var_gprn", "mixing GP width"));
    }
    let m = rowwise_mix(wm, fm, d_y);
    let v = rowwise_mix(wm.square(), fv, d_y)
        + rowwise_mix(wv, fm.square(), d_y)
        + rowwise_mix(wv, fv, d_y);
    Ok((m, v))
}

/// Sampled-latent version of the Bayesian linear readout: `M` is integrated
/// given `a` (rows of latents or activations): `m = a M₀ᵀ`, `v = a² (σ_M²)ᵀ`.
pub fn head_sample_linear<'t>(b: &Bound<'t>, mix: &LinearBayesMix, a: Var<'t>) -> (Var<'t>, Var<'t>) {
    let m0 = b.get(mix.m0);
    let s2 = b.get(mix.sm).square();
    (a.matmul(m0.t()), a.square().matmul(s2.t()))
}

/// Sampled-latent version of the deterministic mixing: `m = M(x) a`.
pub fn head_sample_net<'t>(mx: Var<'t>, a: Var<'t>, d_y: usize) -> Result<Var<'t>> {
    if mx.ncols() != d_y * a.ncols() || mx.nrows() != a.nrows() {
        return Err(Error::shape("head_sample_net", "M(x) shape"));
    }
    Ok(rowwise_mix(mx, a, d_y))
}

/// `λ Σ w²` over the given MAP weight matrices.
pub fn l2_penalty<'t>(b: &Bound<'t>, tape: &'t Tape, weights: &[ParamId], lambda: f64) -> Var<'t> {
    let mut acc = tape.scalar(0.0);
    for &w in weights {
        acc = acc + b.get(w).square().sum();
    }
    acc.scale(lambda)
}
