//! Covariance and mean functions: RBF kernels (ARD or shared lengthscale),
//! deep kernels warping the inputs through a small tanh network, and
//! zero/constant mean functions.

use rand::Rng;

use crate::diffmath::{Bound, Mat, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Fully connected tanh network with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weights in×out, bias 1×out)` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Mlp {
    /// Weights drawn from `U(−1/√fan_in, 1/√fan_in)`, biases zero; the last
    /// layer's weights are multiplied by `out_scale`.
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        sizes: &[usize],
        out_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = if k + 2 == sizes.len() { out_scale } else { 1.0 };
            let weights = Mat::from_fn(fan_in, fan_out, |_, _| {
                scale * rng.gen_range(-bound..bound)
            });
            let wid = ps.add(
                format!("{prefix}.w{k}"),
                weights,
                crate::diffmath::Constraint::None,
            );
            let bid = ps.add(
                format!("{prefix}.b{k}"),
                Mat::zeros(1, fan_out),
                crate::diffmath::Constraint::None,
            );
            layers.push((wid, bid));
        }
        Self {
            layers,
            input_dim: sizes[0],
            output_dim: *sizes.last().unwrap(),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(
                "Mlp::forward",
                format!("input has {} columns, network expects {}", x.ncols(), self.input_dim),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, bias)) in self.layers.iter().enumerate() {
            h = h.matmul(b.get(w)) + b.get(bias);
            if k < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// `Σ w²` over weight matrices (biases excluded).
    pub fn weight_sq_sum<'t>(&self, b: &Bound<'t>) -> Var<'t> {
        let mut acc = b.get(self.layers[0].0).square().sum();
        for &(w, _) in &self.layers[1..] {
            acc = acc + b.get(w).square().sum();
        }
        acc
    }
}

/// `s²·exp(−½ Σ_d (x_d − x'_d)²/ℓ_d²)`, optionally plus diagonal noise on `k(X, X)`.
#[derive(Clone, Debug)]
pub struct RbfKernel {
    /// Positive, `1×1`.
    pub variance: ParamId,
    /// Positive, `1×d` (ARD) or `1×1` (shared).
    pub lengthscales: ParamId,
    /// Positive, `1×1`.
    pub noise: Option<ParamId>,
    pub input_dim: usize,
}

impl RbfKernel {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        ard: bool,
        variance: f64,
        lengthscale: f64,
        noise: Option<f64>,
    ) -> Self {
        let nl = if ard { input_dim } else { 1 };
        let variance = ps.add_positive(format!("{prefix}.variance"), Mat::from_element(1, 1, variance));
        let lengthscales =
            ps.add_positive(format!("{prefix}.lengthscales"), Mat::from_element(1, nl, lengthscale));
        let noise = noise.map(|n| ps.add_positive(format!("{prefix}.noise"), Mat::from_element(1, 1, n)));
        Self {
            variance,
            lengthscales,
            noise,
            input_dim,
        }
    }

    fn check(&self, x: Var<'_>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(
                "k_matrix",
                format!("inputs have {} columns, kernel expects {}", x.ncols(), self.input_dim),
            ));
        }
        Ok(())
    }

    fn cross<'t>(&self, b: &Bound<'t>, x: Var<'t>, x2: Var<'t>) -> Result<Var<'t>> {
        self.check(x)?;
        self.check(x2)?;
        let ell = b.get(self.lengthscales);
        let d = (x / ell).sqdist(x2 / ell);
        Ok(d.map(|v| {
            let e = (-0.5 * v).exp();
            (e, -0.5 * e)
        }) * b.get(self.variance))
    }
}

/// RBF kernel on inputs warped by `(1 − s)·x + s·net(x)`, `s = sigmoid(ρ)`.
#[derive(Clone, Debug)]
pub struct DeepKernel {
    pub base: RbfKernel,
    pub net: Mlp,
    /// Unconstrained `ρ`, `1×1`.
    pub blend: ParamId,
}

/// Initial `ρ`, so that the warp starts close to the identity.
pub const DEEP_BLEND_INIT: f64 = -4.0;

impl DeepKernel {
    pub fn new(ps: &mut ParamSet, prefix: &str, base: RbfKernel, rng: &mut impl Rng) -> Self {
        let d = base.input_dim;
        let net = Mlp::new(ps, &format!("{prefix}.net"), &[d, 50, 50, d], 1.0, rng);
        let blend = ps.add(
            format!("{prefix}.blend"),
            Mat::from_element(1, 1, DEEP_BLEND_INIT),
            crate::diffmath::Constraint::None,
        );
        Self { base, net, blend }
    }

    pub fn warp<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = b.get(self.blend).sigmoid();
        let h = self.net.forward(b, x)?;
        Ok(x + (h - x) * s)
    }
}

#[derive(Clone, Debug)]
pub enum Kernel {
    Rbf(RbfKernel),
    Deep(DeepKernel),
}

impl Kernel {
    pub fn base(&self) -> &RbfKernel {
        match self {
            Kernel::Rbf(k) => k,
            Kernel::Deep(k) => &k.base,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.base().input_dim
    }

    /// Cross-covariance `k(X, X2)`; no diagonal noise.
    pub fn k_matrix<'t>(&self, b: &Bound<'t>, x: Var<'t>, x2: Var<'t>) -> Result<Var<'t>> {
        match self {
            Kernel::Rbf(k) => k.cross(b, x, x2),
            Kernel::Deep(k) => {
                let (wx, wx2) = (k.warp(b, x)?, k.warp(b, x2)?);
                k.base.cross(b, wx, wx2)
            }
        }
    }

    /// `k(X, X)` including the diagonal noise term.
    pub fn k_sym<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let k = match self {
            Kernel::Rbf(k) => k.cross(b, x, x)?,
            Kernel::Deep(k) => {
                let wx = k.warp(b, x)?;
                k.base.cross(b, wx, wx)?
            }
        };
        Ok(match self.base().noise {
            Some(n) => {
                let eye = x.tape().constant(Mat::identity(x.nrows(), x.nrows()));
                k + eye * b.get(n)
            }
            None => k,
        })
    }

    /// Diagonal of `k(X, X)` as an `n×1` column, including noise.
    pub fn k_diag<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let base = self.base();
        base.check(x)?;
        let ones = x.tape().constant(Mat::from_element(x.nrows(), 1, 1.0));
        let mut s = b.get(base.variance);
        if let Some(n) = base.noise {
            s = s + b.get(n);
        }
        Ok(ones * s)
    }

    /// Deep-kernel network weights, for the L2 penalty.
    pub fn net(&self) -> Option<&Mlp> {
        match self {
            Kernel::Rbf(_) => None,
            Kernel::Deep(k) => Some(&k.net),
        }
    }
}

/// Prior mean function of a group of GPs evaluated column-wise.
#[derive(Clone, Debug)]
pub enum MeanFunction {
    Zero,
    /// Trainable constants, `1×U` for `U` GPs.
    Constant(ParamId),
}

impl MeanFunction {
    pub fn constant(ps: &mut ParamSet, name: &str, units: usize) -> Self {
        MeanFunction::Constant(ps.add(name, Mat::zeros(1, units), crate::diffmath::Constraint::None))
    }

    /// `1×U` row of constants, or `None` for the zero mean.
    pub fn value<'t>(&self, b: &Bound<'t>) -> Option<Var<'t>> {
        match self {
            MeanFunction::Zero => None,
            MeanFunction::Constant(c) => Some(b.get(*c)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_diff_check, Tape};
    use crate::gauss::cholesky_jittered;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn eval_k(ps: &ParamSet, k: &Kernel, x: &Mat, x2: &Mat) -> Mat {
        let t = Tape::new();
        let b = ps.bind(&t);
        let v = k.k_matrix(&b, t.constant(x.clone()), t.constant(x2.clone())).unwrap();
        let out = (*v.value()).clone();
        out
    }

    #[test]
    fn rbf_examples() {
        let mut ps = ParamSet::new();
        let k = Kernel::Rbf(RbfKernel::new(&mut ps, "k", 1, true, 1.0, 1.0, None));
        let x = Mat::from_element(1, 1, 0.0);
        let x1 = Mat::from_element(1, 1, 1.0);
        assert!((eval_k(&ps, &k, &x, &x)[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((eval_k(&ps, &k, &x, &x1)[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        let far = Mat::from_element(1, 1, 1e3);
        assert_eq!(eval_k(&ps, &k, &x, &far)[(0, 0)], 0.0);

        let t = Tape::new();
        let b = ps.bind(&t);
        assert!(k.k_matrix(&b, t.constant(Mat::zeros(2, 3)), t.constant(x.clone())).is_err());
    }

    #[test]
    fn noise_only_on_symmetric_diagonal() {
        let mut ps = ParamSet::new();
        let k = Kernel::Rbf(RbfKernel::new(&mut ps, "k", 2, false, 2.0, 0.7, Some(0.3)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 4, 2);
        let t = Tape::new();
        let b = ps.bind(&t);
        let xs = t.constant(x.clone());
        let sym = k.k_sym(&b, xs).unwrap().value();
        let cross = k.k_matrix(&b, xs, xs).unwrap().value();
        let diag = k.k_diag(&b, xs).unwrap().value();
        for i in 0..4 {
            assert!((sym[(i, i)] - 2.3).abs() < 1e-12);
            assert!((cross[(i, i)] - 2.0).abs() < 1e-12);
            assert!((diag[i] - 2.3).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_is_psd_after_jitter() {
        let mut ps = ParamSet::new();
        let k = Kernel::Rbf(RbfKernel::new(&mut ps, "k", 3, true, 1.0, 3.0, None));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 300, 3);
        let kxx = eval_k(&ps, &k, &x, &x);
        assert!((&kxx - kxx.transpose()).amax() == 0.0);
        cholesky_jittered(&kxx, 1e-6).unwrap();
    }

    #[test]
    fn kernel_gradients() {
        let mut ps = ParamSet::new();
        let k = Kernel::Rbf(RbfKernel::new(&mut ps, "k", 2, true, 1.3, 0.8, Some(0.1)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 5, 2);
        let w = randn(&mut rng, 5, 5);
        let r = finite_diff_check(&mut ps, 1e-5, |t, b| {
            let kx = k.k_sym(b, t.constant(x.clone()))?;
            Ok((kx * t.constant(w.clone())).sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn deep_kernel_blend_zero_matches_base() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = RbfKernel::new(&mut ps, "k", 3, true, 1.0, 1.0, None);
        let dk = DeepKernel::new(&mut ps, "k.deep", base.clone(), &mut rng);
        ps.get_mut(dk.blend).raw[(0, 0)] = -1e4; // sigmoid underflows to exactly 0
        let x = randn(&mut rng, 6, 3);
        let a = eval_k(&ps, &Kernel::Deep(dk), &x, &x);
        let b = eval_k(&ps, &Kernel::Rbf(base), &x, &x);
        assert!((a - b).amax() <= 1e-15);
    }

    #[test]
    fn deep_warp_examples_and_gradients() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = RbfKernel::new(&mut ps, "k", 2, true, 1.0, 1.0, None);
        let dk = DeepKernel::new(&mut ps, "k.deep", base, &mut rng);
        let x = randn(&mut rng, 4, 2);
        {
            // blend = 1 and a zero network gives the output-layer bias
            let mut ps1 = ps.clone();
            ps1.get_mut(dk.blend).raw[(0, 0)] = 1e4;
            for &(w, bias) in &dk.net.layers {
                ps1.get_mut(w).raw.fill(0.0);
                ps1.get_mut(bias).raw.fill(0.25);
            }
            let t = Tape::new();
            let b = ps1.bind(&t);
            let out = dk.warp(&b, t.constant(x.clone())).unwrap().value();
            assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        ps.get_mut(dk.blend).raw[(0, 0)] = 0.3;
        let r = finite_diff_check(&mut ps, 1e-5, |t, b| {
            Ok(dk.warp(b, t.constant(x.clone()))?.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
