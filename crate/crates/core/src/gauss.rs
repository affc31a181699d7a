//! Gaussian primitives: jittered Cholesky, log densities, KL divergences,
//! reparameterized samples and k-means for inducing-point initialization.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::linalg;
use crate::diffmath::{Mat, Var};
use crate::error::{Error, Result};

/// Base jitter added to kernel Gram matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;

fn jitter_levels(jitter: f64) -> [f64; 4] {
    [0.0, jitter, 10.0 * jitter, 100.0 * jitter]
}

/// Lower Cholesky factor of `A + jI` for the smallest `j` in
/// `{0, jitter, 10·jitter, 100·jitter}` that succeeds. Returns the factor and `j`.
pub fn cholesky_jittered(a: &Mat, jitter: f64) -> Result<(Mat, f64)> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape("cholesky_jittered", format!("{:?} is not square", a.shape())));
    }
    for j in jitter_levels(jitter) {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += j;
        }
        if let Some(l) = linalg::cholesky(&aj) {
            return Ok((l, j));
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: 100.0 * jitter,
    })
}

/// Tape version of [`cholesky_jittered`].
pub fn tape_cholesky_jittered<'t>(a: Var<'t>, jitter: f64) -> Result<(Var<'t>, f64)> {
    let mut last = None;
    for j in jitter_levels(jitter) {
        match a.cholesky_with_jitter(j) {
            Ok(l) => return Ok((l, j)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(Error::NotPositiveDefinite {
        max_jitter: 100.0 * jitter,
    }))
}

fn is_lower_with_positive_diag(l: &Mat) -> bool {
    let n = l.nrows();
    l.ncols() == n
        && (0..n).all(|i| l[(i, i)] > 0.0)
        && (0..n).all(|j| (0..j).all(|i| l[(i, j)] == 0.0))
}

/// `N(mean, chol·cholᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGaussian {
    pub mean: Mat,
    pub chol: Mat,
}

impl FullGaussian {
    pub fn new(mean: Mat, chol: Mat) -> Result<Self> {
        if mean.ncols() != 1 || chol.nrows() != mean.nrows() {
            return Err(Error::shape(
                "FullGaussian",
                format!("mean {:?}, chol {:?}", mean.shape(), chol.shape()),
            ));
        }
        if !is_lower_with_positive_diag(&chol) {
            return Err(Error::InvalidArgument(
                "chol must be lower triangular with a positive diagonal".into(),
            ));
        }
        Ok(Self { mean, chol })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: Mat::zeros(n, 1),
            chol: Mat::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cov(&self) -> Mat {
        &self.chol * self.chol.transpose()
    }
}

/// Independent Gaussians `N(meanᵢ, scaleᵢ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Mat,
    pub scale: Mat,
}

impl DiagGaussian {
    pub fn new(mean: Mat, scale: Mat) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(Error::shape(
                "DiagGaussian",
                format!("mean {:?}, scale {:?}", mean.shape(), scale.shape()),
            ));
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_full(&self) -> FullGaussian {
        let n = self.dim();
        FullGaussian {
            mean: Mat::from_column_slice(n, 1, self.mean.as_slice()),
            chol: Mat::from_diagonal(&nalgebra::DVector::from_column_slice(self.scale.as_slice())),
        }
    }
}

/// Log density of `x` (an `n×1` column) under `g`.
pub fn mvn_logpdf(x: &Mat, g: &FullGaussian) -> Result<f64> {
    if x.shape() != (g.dim(), 1) {
        return Err(Error::shape(
            "mvn_logpdf",
            format!("x is {:?}, gaussian has dim {}", x.shape(), g.dim()),
        ));
    }
    let z = linalg::solve_lower(&g.chol, &(x - &g.mean));
    let logdet: f64 = g.chol.diagonal().iter().map(|d| d.ln()).sum();
    let n = g.dim() as f64;
    Ok(-0.5 * z.norm_squared() - logdet - 0.5 * n * (2.0 * PI).ln())
}

/// `KL(q ‖ p)` between full-covariance Gaussians.
pub fn kl_full(q: &FullGaussian, p: &FullGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_full", format!("dims {} and {}", q.dim(), p.dim())));
    }
    let a = linalg::solve_lower(&p.chol, &q.chol);
    let b = linalg::solve_lower(&p.chol, &(&q.mean - &p.mean));
    let logdet_p: f64 = p.chol.diagonal().iter().map(|d| d.ln()).sum();
    let logdet_q: f64 = q.chol.diagonal().iter().map(|d| d.ln()).sum();
    let kl = 0.5 * (a.norm_squared() + b.norm_squared() - q.dim() as f64)
        + logdet_p
        - logdet_q;
    Ok(kl.max(0.0))
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::shape(
            "kl_diag",
            format!("{:?} and {:?}", q.mean.shape(), p.mean.shape()),
        ));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let r = q.scale[i] / p.scale[i];
        let d = (q.mean[i] - p.mean[i]) / p.scale[i];
        kl += 0.5 * (r * r + d * d - 1.0) - r.ln();
    }
    Ok(kl.max(0.0))
}

/// Tape `KL(N(q_mean, q_chol q_cholᵀ) ‖ N(p_mean, p_chol p_cholᵀ))` for `n×1` means.
pub fn tape_kl_full<'t>(
    q_mean: Var<'t>,
    q_chol: Var<'t>,
    p_mean: Var<'t>,
    p_chol: Var<'t>,
) -> Var<'t> {
    let n = q_mean.nrows() as f64;
    let a = p_chol.solve_lower(q_chol);
    let b = p_chol.solve_lower(q_mean - p_mean);
    let quad = (a.square().sum() + b.square().sum() - n).scale(0.5);
    quad + p_chol.diag().ln().sum() - q_chol.diag().ln().sum()
}

/// Tape `KL` between diagonal Gaussians, summed over all entries. Arguments
/// broadcast like the element-wise tape operators.
pub fn tape_kl_diag<'t>(
    q_mean: Var<'t>,
    q_scale: Var<'t>,
    p_mean: Var<'t>,
    p_scale: Var<'t>,
) -> Var<'t> {
    let r = q_scale / p_scale;
    let d = (q_mean - p_mean) / p_scale;
    ((r.square() + d.square() - 1.0).scale(0.5) - r.ln()).sum()
}

/// Gaussians that can be sampled by transforming standard-normal noise.
pub trait Reparam {
    fn reparam_sample(&self, noise: &Mat) -> Result<Mat>;
}

impl Reparam for FullGaussian {
    fn reparam_sample(&self, noise: &Mat) -> Result<Mat> {
        if noise.nrows() != self.dim() {
            return Err(Error::shape(
                "reparam_sample",
                format!("noise {:?}, dim {}", noise.shape(), self.dim()),
            ));
        }
        let mut out = &self.chol * noise;
        for mut c in out.column_iter_mut() {
            c += self.mean.column(0);
        }
        Ok(out)
    }
}

impl Reparam for DiagGaussian {
    fn reparam_sample(&self, noise: &Mat) -> Result<Mat> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::shape(
                "reparam_sample",
                format!("noise {:?}, mean {:?}", noise.shape(), self.mean.shape()),
            ));
        }
        Ok(&self.mean + self.scale.component_mul(noise))
    }
}

/// `mean + scale ⊙ noise` (or `mean + chol·noise`), whichever `g` is.
pub fn reparam_sample(g: &impl Reparam, noise: &Mat) -> Result<Mat> {
    g.reparam_sample(noise)
}

/// Tape version: `mean + chol·noise`, with `noise` of shape `n×S` giving `S` samples.
pub fn tape_reparam_full<'t>(mean: Var<'t>, chol: Var<'t>, noise: Var<'t>) -> Var<'t> {
    chol.matmul(noise) + mean
}

/// Tape version: `mean + scale ⊙ noise` (broadcasting).
pub fn tape_reparam_diag<'t>(mean: Var<'t>, scale: Var<'t>, noise: Var<'t>) -> Var<'t> {
    mean + scale * noise
}

fn sq_dist_row(points: &Mat, i: usize, centers: &Mat, c: usize) -> f64 {
    (0..points.ncols())
        .map(|d| {
            let t = points[(i, d)] - centers[(c, d)];
            t * t
        })
        .sum()
}

fn nearest(points: &Mat, i: usize, centers: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.nrows() {
        let d = sq_dist_row(points, i, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Within-cluster sum of squared distances of `points` to their nearest center.
pub fn kmeans_sse(points: &Mat, centers: &Mat) -> f64 {
    (0..points.nrows()).map(|i| nearest(points, i, centers).1).sum()
}

/// Lloyd's algorithm on the rows of `points`, initialized from `k` distinct
/// rows chosen with `seed`. Empty clusters are reseeded to the point farthest
/// from its nearest center.
pub fn kmeans(points: &Mat, k: usize, iters: usize, seed: u64) -> Result<Mat> {
    let (n, d) = points.shape();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = sample_indices(&mut rng, n, k).into_vec();
    let mut centers = Mat::from_fn(k, d, |c, j| points[(init[c], j)]);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (c, _) = nearest(points, i, &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[(c, j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, nearest(points, i, &centers).1))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                for j in 0..d {
                    centers[(c, j)] = points[(far, j)];
                }
            }
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_diff_check, Constraint, ParamSet, Tape};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn random_chol(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        Mat::from_fn(n, n, |i, j| {
            if i == j {
                0.5 + rng.gen::<f64>()
            } else if i > j {
                0.5 * rng.gen::<f64>() - 0.25
            } else {
                0.0
            }
        })
    }

    fn random_full(rng: &mut ChaCha8Rng, n: usize) -> FullGaussian {
        FullGaussian::new(randn(rng, n, 1), random_chol(rng, n)).unwrap()
    }

    #[test]
    fn cholesky_examples() {
        let (l, j) = cholesky_jittered(&Mat::identity(3, 3), 1e-6).unwrap();
        assert_eq!(l, Mat::identity(3, 3));
        assert_eq!(j, 0.0);
        let a = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let (l, _) = cholesky_jittered(&a, 1e-6).unwrap();
        assert_eq!(l, Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        let ones = Mat::from_element(2, 2, 1.0);
        let (l, j) = cholesky_jittered(&ones, 1e-6).unwrap();
        assert_eq!(j, 1e-6);
        assert!((&l * l.transpose() - &ones).amax() < 1e-6 + 1e-12);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_jittered(&bad, 1e-6),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn logpdf_examples() {
        let g = FullGaussian::standard(3);
        let v = mvn_logpdf(&Mat::zeros(3, 1), &g).unwrap();
        assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_full(&mut rng, 4);
        let cov = g.cov();
        let at_mean = mvn_logpdf(&g.mean, &g).unwrap();
        let det = (cov.scale(2.0 * PI)).determinant();
        assert!((at_mean + 0.5 * det.ln()).abs() < 1e-12);

        let x = randn(&mut rng, 4, 1);
        let r = &x - &g.mean;
        let quad = (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)];
        let want = -0.5 * quad - 0.5 * (2.0 * PI * 1.0f64).ln() * 4.0 - 0.5 * cov.determinant().ln();
        assert!((mvn_logpdf(&x, &g).unwrap() - want).abs() < 1e-10);
        assert!(mvn_logpdf(&Mat::zeros(3, 1), &g).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_full(&mut rng, 4);
        assert!(kl_full(&q, &q).unwrap().abs() < 1e-12);
        let q = FullGaussian::new(Mat::from_element(1, 1, 1.3), Mat::identity(1, 1)).unwrap();
        let p = FullGaussian::standard(1);
        assert!((kl_full(&q, &p).unwrap() - 0.5 * 1.3 * 1.3).abs() < 1e-14);

        let s = 0.4f64;
        let q = DiagGaussian::new(Mat::zeros(1, 1), Mat::from_element(1, 1, s)).unwrap();
        let p = DiagGaussian::new(Mat::zeros(1, 1), Mat::from_element(1, 1, 1.0)).unwrap();
        assert!((kl_diag(&q, &p).unwrap() - 0.5 * (s * s - 1.0 - 2.0 * s.ln())).abs() < 1e-14);
        assert!(kl_diag(&q, &q).unwrap().abs() < 1e-15);

        let q = DiagGaussian::new(randn(&mut rng, 3, 1), randn(&mut rng, 3, 1).map(|x| x.abs() + 0.1)).unwrap();
        let p = DiagGaussian::new(randn(&mut rng, 3, 1), randn(&mut rng, 3, 1).map(|x| x.abs() + 0.1)).unwrap();
        let a = kl_diag(&q, &p).unwrap();
        let b = kl_full(&q.to_full(), &p.to_full()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_full_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_full(&mut rng, 5);
        let p = random_full(&mut rng, 5);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = q.reparam_sample(&randn(&mut rng, 5, 1)).unwrap();
            let v = mvn_logpdf(&x, &q).unwrap() - mvn_logpdf(&x, &p).unwrap();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let kl = kl_full(&q, &p).unwrap();
        assert!((kl - mean).abs() < 3.0 * se, "{kl} {mean} {se}");
    }

    #[test]
    fn tape_kl_agrees_with_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_full(&mut rng, 4);
        let p = random_full(&mut rng, 4);
        let t = Tape::new();
        let v = tape_kl_full(
            t.constant(q.mean.clone()),
            t.constant(q.chol.clone()),
            t.constant(p.mean.clone()),
            t.constant(p.chol.clone()),
        );
        assert!((v.item() - kl_full(&q, &p).unwrap()).abs() < 1e-12);

        let qd = DiagGaussian::new(randn(&mut rng, 3, 2), randn(&mut rng, 3, 2).map(|x| x.abs() + 0.1)).unwrap();
        let pd = DiagGaussian::new(randn(&mut rng, 3, 2), randn(&mut rng, 3, 2).map(|x| x.abs() + 0.1)).unwrap();
        let v = tape_kl_diag(
            t.constant(qd.mean.clone()),
            t.constant(qd.scale.clone()),
            t.constant(pd.mean.clone()),
            t.constant(pd.scale.clone()),
        );
        assert!((v.item() - kl_diag(&qd, &pd).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tape_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_full(&mut rng, 3);
        let mut ps = ParamSet::new();
        let m = ps.add("m", randn(&mut rng, 3, 1), Constraint::None);
        let l = ps.add("L", random_chol(&mut rng, 3).map(|x| x * 0.5), Constraint::Cholesky);
        let r = finite_diff_check(&mut ps, 1e-5, |t, b| {
            Ok(tape_kl_full(
                b.get(m),
                b.get(l),
                t.constant(p.mean.clone()),
                t.constant(p.chol.clone()),
            ))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn reparam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_full(&mut rng, 3);
        assert_eq!(reparam_sample(&g, &Mat::zeros(3, 1)).unwrap(), g.mean);
        let d = DiagGaussian::new(randn(&mut rng, 3, 1), Mat::from_element(3, 1, 1e-300)).unwrap();
        assert_eq!(reparam_sample(&d, &randn(&mut rng, 3, 1)).unwrap(), d.mean);
        assert!(reparam_sample(&g, &Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn reparam_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_full(&mut rng, 2);
        let n = 100_000;
        let x = g.reparam_sample(&randn(&mut rng, 2, n)).unwrap();
        let cov = g.cov();
        let mean = x.column_mean();
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - g.mean[i]).abs() < 3.0 * se);
        }
        // covariance entries: Var(x_i x_j) = Σii Σjj + Σij² for Gaussians
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let emp: f64 = (0..n)
                .map(|k| (x[(i, k)] - g.mean[i]) * (x[(j, k)] - g.mean[j]))
                .sum::<f64>()
                / n as f64;
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((emp - cov[(i, j)]).abs() < 3.0 * se, "{i}{j}");
        }
    }

    #[test]
    fn reparam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = randn(&mut rng, 3, 20);
        let mut ps = ParamSet::new();
        let m = ps.add("m", randn(&mut rng, 3, 1), Constraint::None);
        let l = ps.add("L", Mat::zeros(3, 3), Constraint::Cholesky);
        let r = finite_diff_check(&mut ps, 1e-5, |t, b| {
            let x = tape_reparam_full(b.get(m), b.get(l), t.constant(noise.clone()));
            Ok(x.tanh().sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn kmeans_examples() {
        let pts = Mat::from_row_slice(3, 2, &[0.0, 1.0, 5.0, 5.0, -2.0, 3.0]);
        let c = kmeans(&pts, 3, 10, 1).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| c.row(i).iter().copied().collect()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![-2.0, 3.0], vec![0.0, 1.0], vec![5.0, 5.0]]);

        let pts = Mat::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 10.0, 10.0, 10.0, 11.0]);
        let c = kmeans(&pts, 2, 20, 3).unwrap();
        let mut rows: Vec<(f64, f64)> = (0..2).map(|i| (c[(i, 0)], c[(i, 1)])).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(rows, vec![(0.0, 0.5), (10.0, 10.5)]);
        assert!(kmeans(&pts, 5, 10, 0).is_err());
    }

    #[test]
    fn kmeans_beats_random_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = randn(&mut rng, 100, 2);
        let c = kmeans(&pts, 8, 100, 4).unwrap();
        let idx = sample_indices(&mut rng, 100, 8).into_vec();
        let base = Mat::from_fn(8, 2, |i, j| pts[(idx[i], j)]);
        assert!(kmeans_sse(&pts, &c) <= kmeans_sse(&pts, &base));
        assert_eq!(c, kmeans(&pts, 8, 100, 4).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn kl_full_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed % 5) as usize;
            let q = random_full(&mut rng, n);
            let p = random_full(&mut rng, n);
            proptest::prop_assert!(kl_full(&q, &p).unwrap() >= 0.0);
            proptest::prop_assert!(kl_full(&q, &q).unwrap().abs() < 1e-12);
        }
    }
}
