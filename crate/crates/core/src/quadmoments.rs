//! Gauss–Hermite quadrature and moments of activation functions under
//! Gaussian inputs.
//!
//! For `x ~ N(μ, σ²)` this module provides `E[σ(x)]`, `E[σ(x)²]` and, for a
//! bivariate Gaussian, `E[σ(x₁)σ(x₂)]`, together with their partial
//! derivatives so they can be used as tape operations.

use std::collections::HashMap;
use std::f64::consts::SQRT_2;
use std::sync::{Arc, Mutex, OnceLock};

use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const SQRT_PI: f64 = 1.772_453_850_905_516;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Default number of quadrature points.
pub const DEFAULT_ORDER: usize = 100;

/// Half-width of the truncated standard-normal range used for kinked integrands.
const TRUNC: f64 = 10.0;

/// Nodes and weights integrating against `e^{−x²}` on the real line.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Legendre rule of the same order for piecewise-smooth integrands.
    legendre: Arc<LegendreRule>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug)]
struct LegendreRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Eigenvalues and squared first eigenvector components of the symmetric
/// tridiagonal matrix with zero diagonal and off-diagonal `off`
/// (implicit QL with Wilkinson shifts).
fn golub_welsch(off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = off.len() + 1;
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    e[..n - 1].copy_from_slice(off);
    // first row of the eigenvector matrix
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 100, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let nodes = idx.iter().map(|&i| d[i]).collect();
    let w = idx.iter().map(|&i| z[i] * z[i]).collect();
    (nodes, w)
}

/// Symmetrizes a rule computed numerically: nodes come in ± pairs.
fn symmetrize(nodes: &mut [f64], weights: &mut [f64]) {
    let n = nodes.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
}

fn legendre_rule(order: usize) -> Arc<LegendreRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<LegendreRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("legendre cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| {
            let off: Vec<f64> = (1..order)
                .map(|k| {
                    let k = k as f64;
                    k / (4.0 * k * k - 1.0).sqrt()
                })
                .collect();
            let (mut nodes, w) = golub_welsch(&off);
            let mut weights: Vec<f64> = w.into_iter().map(|v| 2.0 * v).collect();
            symmetrize(&mut nodes, &mut weights);
            Arc::new(LegendreRule { nodes, weights })
        })
        .clone()
}

/// Gauss–Hermite rule of the given order (weight function `e^{−x²}`).
pub fn gh_rule(order: usize) -> Result<QuadratureRule> {
    if order == 0 {
        return Err(Error::InvalidArgument("quadrature order must be at least 1".into()));
    }
    let off: Vec<f64> = (1..order).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let (mut nodes, w) = golub_welsch(&off);
    let mut weights: Vec<f64> = w.into_iter().map(|v| SQRT_PI * v).collect();
    symmetrize(&mut nodes, &mut weights);
    Ok(QuadratureRule {
        nodes,
        weights,
        legendre: legendre_rule(order),
    })
}

/// Shared default-order rule.
pub fn default_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gh_rule(DEFAULT_ORDER).expect("positive order"))
}

/// Element-wise non-linearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with slope `ε ∈ (0, 1)` on the negative side.
    Leaky(f64),
    Erf,
    /// `1 + erf(x)`.
    Sherf,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.35;

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "leaky" | "leaky_relu" | "lrelu" => Ok(Activation::Leaky(DEFAULT_LEAKY_SLOPE)),
            "erf" => Ok(Activation::Erf),
            "sherf" => Ok(Activation::Sherf),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Leaky(_) => "leaky",
            Activation::Erf => "erf",
            Activation::Sherf => "sherf",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::Leaky(e) if !(e > 0.0 && e < 1.0) => Err(Error::InvalidArgument(
                format!("leaky slope must lie in (0, 1), got {e}"),
            )),
            _ => Ok(()),
        }
    }

    /// Whether the function has a kink at zero.
    fn kinked(&self) -> bool {
        matches!(self, Activation::Relu | Activation::Leaky(_))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::Leaky(e) => {
                if x > 0.0 {
                    x
                } else {
                    e * x
                }
            }
            Activation::Erf => libm::erf(x),
            Activation::Sherf => 1.0 + libm::erf(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => (x > 0.0) as u8 as f64,
            Activation::Leaky(e) => {
                if x > 0.0 {
                    1.0
                } else {
                    e
                }
            }
            Activation::Erf | Activation::Sherf => FRAC_2_SQRT_PI * (-x * x).exp(),
        }
    }
}

/// A univariate Gaussian `N(mu, sigma²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianScalar {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianScalar {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need finite mu and sigma >= 0, got ({mu}, {sigma})"
            )));
        }
        Ok(Self { mu, sigma })
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `E[relu(x)]` and `E[relu(x)²]` with their `(μ, σ)` partials, for `σ > 0`.
fn relu_moments(mu: f64, sigma: f64) -> ([f64; 3], [f64; 3]) {
    let z = mu / sigma;
    let cdf = norm_cdf(z);
    let pdf = norm_pdf(z);
    let mean = mu * cdf + sigma * pdf;
    let second = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf;
    ([mean, cdf, pdf], [second, 2.0 * mean, 2.0 * sigma * cdf])
}

/// `E[σ(x)]` for `x ~ N(mu, sigma²)` with partials `(value, ∂μ, ∂σ)`.
pub fn act_mean_d(act: Activation, mu: f64, sigma: f64) -> (f64, f64, f64) {
    if sigma <= 0.0 {
        return (act.eval(mu), act.deriv(mu), 0.0);
    }
    match act {
        Activation::Erf | Activation::Sherf => {
            let s2 = 1.0 + 2.0 * sigma * sigma;
            let s = s2.sqrt();
            let e = FRAC_2_SQRT_PI * (-mu * mu / s2).exp() / s;
            let shift = if act == Activation::Sherf { 1.0 } else { 0.0 };
            (
                libm::erf(mu / s) + shift,
                e,
                -e * 2.0 * mu * sigma / s2,
            )
        }
        Activation::Relu => {
            let ([m, dm, ds], _) = relu_moments(mu, sigma);
            (m, dm, ds)
        }
        Activation::Leaky(eps) => {
            let ([m, dm, ds], _) = relu_moments(mu, sigma);
            (
                eps * mu + (1.0 - eps) * m,
                eps + (1.0 - eps) * dm,
                (1.0 - eps) * ds,
            )
        }
    }
}

/// `E[σ(x)]` for `x ~ g`.
pub fn act_mean(act: Activation, g: GaussianScalar) -> f64 {
    act_mean_d(act, g.mu, g.sigma).0
}

/// `E[xⁿ erf(x)]` for `x ~ g` and `n ∈ {1, 2}`.
pub fn act_poly_erf_mean(n: u32, g: GaussianScalar) -> Result<f64> {
    let (mu, sigma) = (g.mu, g.sigma);
    let s2 = 1.0 + 2.0 * sigma * sigma;
    let s = s2.sqrt();
    let e0 = libm::erf(mu / s);
    let gauss = (-mu * mu / s2).exp();
    let e1 = mu * e0 + 2.0 * sigma * sigma * gauss / (SQRT_PI * s);
    match n {
        1 => Ok(e1),
        2 => Ok(mu * e1 + sigma * sigma * (e0 + FRAC_2_SQRT_PI * mu * gauss / (s2 * s))),
        _ => Err(Error::Unsupported(format!(
            "polynomial-erf moments are available for degree 1 and 2, not {n}"
        ))),
    }
}

/// `E[σ(x)²]` with partials `(value, ∂μ, ∂σ)`.
///
/// Piecewise-linear activations use closed forms; the erf family goes through
/// the bivariate-normal form of [`act_cross_moment_d`] with `x₁ = x₂`.
pub fn act_second_moment_d(
    act: Activation,
    mu: f64,
    sigma: f64,
    rule: &QuadratureRule,
) -> (f64, f64, f64) {
    if sigma <= 0.0 {
        let v = act.eval(mu);
        return (v * v, 2.0 * v * act.deriv(mu), 0.0);
    }
    match act {
        Activation::Relu => {
            let (_, [r2, dm, ds]) = relu_moments(mu, sigma);
            (r2, dm, ds)
        }
        Activation::Leaky(eps) => {
            let (_, [r2, dm, ds]) = relu_moments(mu, sigma);
            let a = eps * eps;
            let b = 1.0 - a;
            (
                a * (mu * mu + sigma * sigma) + b * r2,
                2.0 * a * mu + b * dm,
                2.0 * a * sigma + b * ds,
            )
        }
        Activation::Erf | Activation::Sherf => {
            let v = sigma * sigma;
            let (c, d) = erf_cross_moment_d(act, mu, mu, v, v, v, rule);
            (c, d[0] + d[1], 2.0 * sigma * (d[2] + d[3] + d[4]))
        }
    }
}

/// `E[σ(x)²]` for `x ~ g`.
pub fn act_second_moment(act: Activation, g: GaussianScalar, rule: &QuadratureRule) -> f64 {
    act_second_moment_d(act, g.mu, g.sigma, rule).0
}

/// Correlations are kept strictly inside (−1, 1).
const MAX_CORR: f64 = 1.0 - 1e-9;

/// Integrates `f(t) φ(t)` for standard normal `t`, given in standard-normal
/// coordinates; `kinks` are points where `f` is not smooth.
fn normal_expectation<const K: usize>(
    rule: &QuadratureRule,
    kinked: bool,
    kinks: &[f64],
    mut f: impl FnMut(f64) -> [f64; K],
) -> [f64; K] {
    let mut acc = [0.0; K];
    if !kinked {
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let r = f(SQRT_2 * x);
            for k in 0..K {
                acc[k] += w * r[k];
            }
        }
        for a in &mut acc {
            *a /= SQRT_PI;
        }
        return acc;
    }
    let mut cuts: Vec<f64> = vec![-TRUNC];
    let mut inner: Vec<f64> = kinks
        .iter()
        .copied()
        .filter(|k| k.is_finite() && k.abs() < TRUNC)
        .collect();
    inner.sort_by(|a, b| a.total_cmp(b));
    cuts.extend(inner);
    cuts.push(TRUNC);
    let leg = &rule.legendre;
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        for (&x, &w) in leg.nodes.iter().zip(&leg.weights) {
            let t = mid + half * x;
            let ww = w * half * norm_pdf(t);
            let r = f(t);
            for k in 0..K {
                acc[k] += ww * r[k];
            }
        }
    }
    acc
}

/// `E[σ(x₁)σ(x₂)]` for `(x₁, x₂) ~ N((mu1, mu2), [[s11, s12], [s12, s22]])`
/// with partials with respect to `(mu1, mu2, s11, s12, s22)`.
///
/// For the piecewise-linear activations the pair is written as
/// `x₁ = μ₁ + L₁₁t`, `x₂ = μ₂ + L₂₁t + L₂₂ξ`; the expectation over `ξ` is the
/// closed-form mean and the one over `t` is done by Gauss–Legendre quadrature
/// split at the kinks. For the erf family see [`erf_cross_moment_d`].
pub fn act_cross_moment_d(
    act: Activation,
    mu1: f64,
    mu2: f64,
    s11: f64,
    s12: f64,
    s22: f64,
    rule: &QuadratureRule,
) -> (f64, [f64; 5]) {
    let s11 = s11.max(0.0);
    let s22 = s22.max(0.0);
    if !act.kinked() {
        return erf_cross_moment_d(act, mu1, mu2, s11, s12, s22, rule);
    }
    if s11 <= 0.0 {
        // x₁ is deterministic
        let g = act.eval(mu1);
        let (m, dm, ds) = act_mean_d(act, mu2, s22.sqrt());
        let d22 = if s22 > 0.0 { ds / (2.0 * s22.sqrt()) } else { 0.0 };
        return (g * m, [act.deriv(mu1) * m, g * dm, 0.0, 0.0, g * d22]);
    }
    let l11 = s11.sqrt();
    let bound = MAX_CORR * (s11 * s22).sqrt();
    let s12c = s12.clamp(-bound, bound);
    let l21 = s12c / l11;
    let l22 = (s22 - l21 * l21).max(0.0).sqrt();
    let kinks = [
        -mu1 / l11,
        if l21 != 0.0 { -mu2 / l21 } else { f64::NAN },
    ];
    let [c, d_mu1, d_mu2, d_l11, d_l21, d_l22] =
        normal_expectation(rule, act.kinked(), &kinks, |t| {
            let a = mu1 + l11 * t;
            let g = act.eval(a);
            let dg = act.deriv(a);
            let (m, mm, ms) = act_mean_d(act, mu2 + l21 * t, l22);
            [g * m, dg * m, g * mm, dg * t * m, g * mm * t, g * ms]
        });
    // chain rule from (L11, L21, L22) to (Σ11, Σ12, Σ22)
    let dl22_dl21 = if l22 > 0.0 { -l21 / l22 } else { 0.0 };
    let dl21_total = d_l21 + d_l22 * dl22_dl21;
    let d11 = d_l11 / (2.0 * l11) - dl21_total * s12c / (2.0 * l11 * s11);
    let d12 = if s12 == s12c { dl21_total / l11 } else { 0.0 };
    let d22 = if l22 > 0.0 { d_l22 / (2.0 * l22) } else { 0.0 };
    (c, [d_mu1, d_mu2, d11, d12, d22])
}

/// `E[σ(x₁)σ(x₂)]` for the erf family.
///
/// With `erf(x) = 2Φ(√2x) − 1`, `E[Φ(√2x₁)Φ(√2x₂)]` is a bivariate normal
/// orthant probability, so
/// `E[erf(x₁)erf(x₂)] = erf(μ₁/s₁)erf(μ₂/s₂) + 4T`, `sᵢ² = 1 + 2Σᵢᵢ`, where
/// `T = (2π)⁻¹ ∫₀^{asin ρ} exp(−(h₁² − 2h₁h₂ sinθ + h₂²) / (2cos²θ)) dθ`,
/// `hᵢ = √2μᵢ/sᵢ` and `ρ = 2Σ₁₂/(s₁s₂)`. The integrand is smooth, so a
/// Gauss–Legendre rule in `θ` is accurate to rounding. `|ρ| < 1` always holds,
/// so no special cases are needed.
fn erf_cross_moment_d(
    act: Activation,
    mu1: f64,
    mu2: f64,
    s11: f64,
    s12: f64,
    s22: f64,
    rule: &QuadratureRule,
) -> (f64, [f64; 5]) {
    let q1 = 1.0 + 2.0 * s11;
    let q2 = 1.0 + 2.0 * s22;
    let (r1, r2) = (q1.sqrt(), q2.sqrt());
    let h1 = SQRT_2 * mu1 / r1;
    let h2 = SQRT_2 * mu2 / r2;
    let rho = (2.0 * s12 / (r1 * r2)).clamp(-MAX_CORR, MAX_CORR);
    let theta = rho.asin();

    let (mut t, mut th1, mut th2) = (0.0, 0.0, 0.0);
    if theta != 0.0 {
        let leg = &rule.legendre;
        let half = 0.5 * theta;
        for (&x, &w) in leg.nodes.iter().zip(&leg.weights) {
            let th = half * (x + 1.0);
            let (sn, cs) = th.sin_cos();
            let c2 = cs * cs;
            let e = (-(h1 * h1 - 2.0 * h1 * h2 * sn + h2 * h2) / (2.0 * c2)).exp() * w;
            t += e;
            th1 -= e * (h1 - h2 * sn) / c2;
            th2 -= e * (h2 - h1 * sn) / c2;
        }
        let k = half / (2.0 * std::f64::consts::PI);
        t *= k;
        th1 *= k;
        th2 *= k;
    }
    let one_m = 1.0 - rho * rho;
    let trho = (-(h1 * h1 - 2.0 * h1 * h2 * rho + h2 * h2) / (2.0 * one_m)).exp()
        / (2.0 * std::f64::consts::PI * one_m.sqrt());

    // erf(μᵢ/sᵢ) and its partials
    let e1 = libm::erf(mu1 / r1);
    let e2 = libm::erf(mu2 / r2);
    let g1 = FRAC_2_SQRT_PI * (-mu1 * mu1 / q1).exp();
    let g2 = FRAC_2_SQRT_PI * (-mu2 * mu2 / q2).exp();
    let (de1_dm, de1_ds) = (g1 / r1, -g1 * mu1 / (q1 * r1));
    let (de2_dm, de2_ds) = (g2 / r2, -g2 * mu2 / (q2 * r2));
    // partials of h and ρ
    let (dh1_dm, dh1_ds) = (SQRT_2 / r1, -SQRT_2 * mu1 / (q1 * r1));
    let (dh2_dm, dh2_ds) = (SQRT_2 / r2, -SQRT_2 * mu2 / (q2 * r2));
    let clamped = (2.0 * s12 / (r1 * r2)).abs() > MAX_CORR;
    let (drho_12, drho_11, drho_22) = if clamped {
        (0.0, 0.0, 0.0)
    } else {
        (2.0 / (r1 * r2), -rho / q1, -rho / q2)
    };

    let mut val = e1 * e2 + 4.0 * t;
    let mut d = [
        de1_dm * e2 + 4.0 * th1 * dh1_dm,
        e1 * de2_dm + 4.0 * th2 * dh2_dm,
        de1_ds * e2 + 4.0 * (th1 * dh1_ds + trho * drho_11),
        4.0 * trho * drho_12,
        e1 * de2_ds + 4.0 * (th2 * dh2_ds + trho * drho_22),
    ];
    if act == Activation::Sherf {
        val += 1.0 + e1 + e2;
        d[0] += de1_dm;
        d[1] += de2_dm;
        d[2] += de1_ds;
        d[4] += de2_ds;
    }
    (val, d)
}

/// `E[σ(x₁)σ(x₂)]` for a bivariate Gaussian with mean `mu` and covariance `cov`.
pub fn act_cross_moment(
    act: Activation,
    mu: [f64; 2],
    cov: [[f64; 2]; 2],
    rule: &QuadratureRule,
) -> Result<f64> {
    let (a, b, c, d) = (cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    if (b - c).abs() > 1e-12 * (1.0 + b.abs()) {
        return Err(Error::InvalidArgument("covariance must be symmetric".into()));
    }
    if a < 0.0 || d < 0.0 || a * d - b * b < -1e-12 * (1.0 + a * d) {
        return Err(Error::InvalidArgument(
            "covariance must be positive semi-definite".into(),
        ));
    }
    Ok(act_cross_moment_d(act, mu[0], mu[1], a, b, d, rule).0)
}

/// Mean and standard deviation of `Σ bᵢ xᵢ` for independent `xᵢ ~ N(meansᵢ, variancesᵢ)`.
pub fn linear_gaussian_closure(
    coeffs: &[f64],
    means: &[f64],
    variances: &[f64],
) -> Result<GaussianScalar> {
    if coeffs.len() != means.len() || coeffs.len() != variances.len() {
        return Err(Error::shape(
            "linear_gaussian_closure",
            format!(
                "lengths {}, {}, {}",
                coeffs.len(),
                means.len(),
                variances.len()
            ),
        ));
    }
    let mu = coeffs.iter().zip(means).map(|(b, m)| b * m).sum();
    let var: f64 = coeffs
        .iter()
        .zip(variances)
        .map(|(b, v)| b * b * v)
        .sum();
    GaussianScalar::new(mu, var.sqrt())
}

/// `∂/∂var` from `∂/∂σ` where `σ = √var`.
fn dvar(ds: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        ds / (2.0 * sigma)
    } else {
        0.0
    }
}

/// Tape op: element-wise `E[σ(x)]` from matrices of means and variances.
pub fn tape_act_mean<'t>(tape: &'t Tape, act: Activation, mu: Var<'t>, var: Var<'t>) -> Var<'t> {
    tape.map_n([mu, var], move |[m, v]| {
        let s = v.max(0.0).sqrt();
        let (y, dm, ds) = act_mean_d(act, m, s);
        (y, [dm, dvar(ds, s)])
    })
}

/// Tape op: element-wise `E[σ(x)²]` from matrices of means and variances.
pub fn tape_act_second_moment<'t>(
    tape: &'t Tape,
    act: Activation,
    rule: &QuadratureRule,
    mu: Var<'t>,
    var: Var<'t>,
) -> Var<'t> {
    tape.map_n([mu, var], |[m, v]| {
        let s = v.max(0.0).sqrt();
        let (y, dm, ds) = act_second_moment_d(act, m, s, rule);
        (y, [dm, dvar(ds, s)])
    })
}

/// Tape op: element-wise `E[σ(x₁)σ(x₂)]` from means, variances and covariance.
pub fn tape_act_cross_moment<'t>(
    tape: &'t Tape,
    act: Activation,
    rule: &QuadratureRule,
    mu1: Var<'t>,
    mu2: Var<'t>,
    s11: Var<'t>,
    s12: Var<'t>,
    s22: Var<'t>,
) -> Var<'t> {
    tape.map_n([mu1, mu2, s11, s12, s22], |[a, b, c, d, e]| {
        act_cross_moment_d(act, a, b, c, d, e, rule)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const ACTS: [Activation; 4] = [
        Activation::Relu,
        Activation::Leaky(DEFAULT_LEAKY_SLOPE),
        Activation::Erf,
        Activation::Sherf,
    ];

    fn g(mu: f64, sigma: f64) -> GaussianScalar {
        GaussianScalar::new(mu, sigma).unwrap()
    }

    #[test]
    fn low_order_rules() {
        let r1 = gh_rule(1).unwrap();
        assert_eq!(r1.nodes, vec![0.0]);
        assert!((r1.weights[0] - SQRT_PI).abs() < 1e-14);
        let r2 = gh_rule(2).unwrap();
        assert!((r2.nodes[1] - 0.5f64.sqrt()).abs() < 1e-14);
        assert!((r2.nodes[0] + 0.5f64.sqrt()).abs() < 1e-14);
        assert!((r2.weights[0] - SQRT_PI / 2.0).abs() < 1e-14);
        assert!(gh_rule(0).is_err());
    }

    #[test]
    fn order_twenty_integrates_tenth_power() {
        let r = gh_rule(20).unwrap();
        let q: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * x.powi(10))
            .sum();
        let exact = 945.0 / 32.0 * SQRT_PI;
        assert!((q - exact).abs() < 1e-12, "{q} vs {exact}");
    }

    #[test]
    fn even_monomials_exact() {
        for order in [3, 10, 50, 100] {
            let r = gh_rule(order).unwrap();
            let s: f64 = r.weights.iter().sum();
            assert!((s - SQRT_PI).abs() < 1e-10);
            // ∫x^{2m}e^{-x²} = Γ(m+½) = (2m−1)!!/2^m √π
            let mut exact = SQRT_PI;
            for m in 0..order.min(20) {
                if 2 * m >= 2 * order {
                    break;
                }
                let q: f64 = r
                    .nodes
                    .iter()
                    .zip(&r.weights)
                    .map(|(x, w)| w * x.powi(2 * m as i32))
                    .sum();
                assert!(((q - exact) / exact).abs() < 1e-11, "order {order} m {m}");
                exact *= (2 * m + 1) as f64 / 2.0;
            }
        }
    }

    #[test]
    fn mean_examples() {
        assert_eq!(act_mean(Activation::Erf, g(0.0, 1.7)), 0.0);
        assert!((act_mean(Activation::Relu, g(0.0, 1.0)) - INV_SQRT_2PI).abs() < 1e-15);
        assert!((act_mean(Activation::Erf, g(1.0, 2.0)) - libm::erf(1.0 / 3.0)).abs() < 1e-15);
        assert!(
            (act_mean(Activation::Sherf, g(0.4, 0.3)) - 1.0 - act_mean(Activation::Erf, g(0.4, 0.3)))
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn poly_erf_examples() {
        let s = 0.8f64;
        let want = 2.0 * s * s / (SQRT_PI * (1.0 + 2.0 * s * s).sqrt());
        assert!((act_poly_erf_mean(1, g(0.0, s)).unwrap() - want).abs() < 1e-15);
        assert!(act_poly_erf_mean(2, g(0.0, s)).unwrap().abs() < 1e-15);
        assert!(act_poly_erf_mean(3, g(0.0, s)).is_err());
        let r = gh_rule(200).unwrap();
        for n in [1u32, 2] {
            let (mu, sigma) = (0.7, 1.3);
            let q: f64 = r
                .nodes
                .iter()
                .zip(&r.weights)
                .map(|(x, w)| {
                    let u = SQRT_2 * sigma * x + mu;
                    w * u.powi(n as i32) * libm::erf(u)
                })
                .sum::<f64>()
                / SQRT_PI;
            assert!((act_poly_erf_mean(n, g(mu, sigma)).unwrap() - q).abs() < 1e-10);
        }
    }

    #[test]
    fn second_moment_examples() {
        let r = default_rule();
        assert_eq!(act_second_moment(Activation::Erf, g(0.0, 0.0), r), 0.0);
        assert!(act_second_moment(Activation::Erf, g(0.0, 1e-9), r) < 1e-17);
        assert!((act_second_moment(Activation::Relu, g(0.0, 1.0), r) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sherf_second_moment_matches_monte_carlo() {
        let r = default_rule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = Activation::Sherf.eval(0.5 + z);
            s += v * v;
            s2 += v.powi(4);
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = act_second_moment(Activation::Sherf, g(0.5, 1.0), r);
        assert!((exact - mean).abs() < 3.0 * se, "{exact} {mean} {se}");
    }

    #[test]
    fn cross_moment_limits() {
        let r = default_rule();
        for act in ACTS {
            let m = act_cross_moment(act, [0.3, -0.6], [[0.8, 0.0], [0.0, 1.9]], r).unwrap();
            let want = act_mean(act, g(0.3, 0.8f64.sqrt())) * act_mean(act, g(-0.6, 1.9f64.sqrt()));
            assert!((m - want).abs() < 1e-10, "{act:?} {m} {want}");

            let m = act_cross_moment(act, [0.4, 0.4], [[1.3, 1.3], [1.3, 1.3]], r).unwrap();
            let want = act_second_moment(act, g(0.4, 1.3f64.sqrt()), r);
            assert!((m - want).abs() < 1e-7, "{act:?} {m} {want}");
        }
    }

    #[test]
    fn cross_moment_is_symmetric() {
        let r = default_rule();
        for act in ACTS {
            let a = act_cross_moment(act, [0.3, -1.1], [[0.7, 0.4], [0.4, 1.5]], r).unwrap();
            let b = act_cross_moment(act, [-1.1, 0.3], [[1.5, 0.4], [0.4, 0.7]], r).unwrap();
            assert!((a - b).abs() < 1e-10, "{act:?} {a} {b}");
        }
    }

    #[test]
    fn erf_cross_moment_matches_monte_carlo() {
        let r = default_rule();
        let exact =
            act_cross_moment(Activation::Erf, [0.3, -0.2], [[1.0, 0.5], [0.5, 2.0]], r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l21 = 0.5;
        let l22 = (2.0f64 - 0.25).sqrt();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let v = libm::erf(0.3 + a) * libm::erf(-0.2 + l21 * a + l22 * b);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((exact - mean).abs() < 3.0 * se, "{exact} {mean} {se}");
    }

    #[test]
    fn invalid_covariance_rejected() {
        let r = default_rule();
        assert!(act_cross_moment(Activation::Erf, [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], r).is_err());
        assert!(act_cross_moment(Activation::Erf, [0.0, 0.0], [[1.0, 0.2], [0.1, 1.0]], r).is_err());
    }

    #[test]
    fn closure_examples() {
        let c = linear_gaussian_closure(&[2.0, 3.0], &[1.0, -1.0], &[0.25, 1.0]).unwrap();
        assert!((c.mu + 1.0).abs() < 1e-15 && (c.sigma - 10f64.sqrt()).abs() < 1e-15);
        let c = linear_gaussian_closure(&[1.0, -1.0], &[0.3, 0.3], &[2.0, 2.0]).unwrap();
        assert!(c.mu.abs() < 1e-15 && (c.sigma - 2.0).abs() < 1e-15);
        assert!(linear_gaussian_closure(&[1.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() / (b.abs() + 1e-8) < 1e-5 || (a - b).abs() < 1e-9
    }

    #[test]
    fn moment_gradients_match_finite_differences() {
        let r = default_rule();
        for act in ACTS {
            for &(mu, s) in &[(-1.2, 0.7), (0.3, 1.4), (2.0, 0.3)] {
                let (_, dm, ds) = act_mean_d(act, mu, s);
                assert!(close(dm, fd(|m| act_mean_d(act, m, s).0, mu)), "{act:?}");
                assert!(close(ds, fd(|t| act_mean_d(act, mu, t).0, s)), "{act:?}");
                let (_, dm, ds) = act_second_moment_d(act, mu, s, r);
                assert!(close(dm, fd(|m| act_second_moment_d(act, m, s, r).0, mu)), "{act:?}");
                assert!(close(ds, fd(|t| act_second_moment_d(act, mu, t, r).0, s)), "{act:?}");
            }
            let base = [0.3, -0.5, 1.1, 0.4, 0.9];
            let (_, d) = act_cross_moment_d(act, base[0], base[1], base[2], base[3], base[4], r);
            for k in 0..5 {
                let num = fd(
                    |x| {
                        let mut p = base;
                        p[k] = x;
                        act_cross_moment_d(act, p[0], p[1], p[2], p[3], p[4], r).0
                    },
                    base[k],
                );
                assert!(close(d[k], num), "{act:?} k={k}: {} vs {num}", d[k]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn variance_is_nonnegative(mu in -3.0f64..3.0, s in 0.01f64..3.0, k in 0usize..4) {
            let act = ACTS[k];
            let m = act_mean(act, g(mu, s));
            let m2 = act_second_moment(act, g(mu, s), default_rule());
            proptest::prop_assert!(m2 - m * m >= -1e-10);
        }
    }
}
