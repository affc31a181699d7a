//! Datasets (CSV ingestion, standardization, splits, missing-output masks,
//! unsupervised concatenation), the ball-cosine synthetic generator,
//! evaluation in standardized or original units, and the command line.

pub mod cli;
pub mod config;

use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Mat;
use crate::error::{Error, Result};
use crate::likelihoods::OutputMask;
use crate::models::{Data, Inputs, Model};
use crate::traineval::{mrmse, test_ll_points, EvalConfig};

/// Per-column affine standardization `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(m: &Mat, mask: Option<&OutputMask>) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let vals: Vec<f64> = (0..m.nrows())
            .filter(|&i| mask.map(|mk| mk.observed[i][j]).unwrap_or(true))
            .map(|i| m[(i, j)])
            .collect();
        let n = vals.len() as f64;
        let mu = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / n };
        let var = if vals.is_empty() {
            0.0
        } else {
            vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n
        };
        let sd = var.sqrt();
        means.push(mu);
        stds.push(if sd > 1e-12 * mu.abs().max(1.0) { sd } else { 1.0 });
    }
    (means, stds)
}

impl Standardizer {
    /// Statistics of `ds` (observed output entries only); constant columns get std 1.
    pub fn fit(ds: &Dataset) -> Self {
        let (x_mean, x_std) = column_stats(&ds.x, None);
        let (y_mean, y_std) = column_stats(&ds.y, Some(&ds.mask));
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn apply_x(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn apply_y(&self, y: &Mat) -> Mat {
        Mat::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - self.y_mean[j]) / self.y_std[j])
    }

    /// Means back to original output units.
    pub fn invert_y(&self, y: &Mat) -> Mat {
        Mat::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.y_std[j] + self.y_mean[j])
    }

    /// Variances back to original output units.
    pub fn invert_y_var(&self, v: &Mat) -> Mat {
        Mat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * self.y_std[j] * self.y_std[j])
    }
}

/// Inputs, outputs (NaN where unobserved) and the observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Mat,
    pub mask: OutputMask,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    /// Statistics applied to `x` and `y`, if standardized.
    pub standardization: Option<Standardizer>,
}

impl Dataset {
    /// Fully observed dataset with generated column names.
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape("Dataset", "inputs and outputs differ in rows"));
        }
        let mask = OutputMask::all(y.nrows(), y.ncols());
        Ok(Self {
            x_names: (0..x.ncols()).map(|j| format!("x{j}")).collect(),
            y_names: (0..y.ncols()).map(|j| format!("y{j}")).collect(),
            x,
            y,
            mask,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let rows = |m: &Mat| Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Self {
            x: rows(&self.x),
            y: rows(&self.y),
            mask: self.mask.rows(idx),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Model-facing view (unobserved outputs zeroed).
    pub fn to_data(&self) -> Result<Data> {
        Data::new(self.x.clone(), &self.y, &self.mask)
    }

    fn standardized_with(&self, s: &Standardizer) -> Self {
        Self {
            x: s.apply_x(&self.x),
            y: s.apply_y(&self.y),
            mask: self.mask.clone(),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            standardization: Some(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            d_in: 5,
            d_out: 8,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Noiseless synthetic output `cos(4‖x‖)`.
pub fn synthetic_mean(x: &[f64]) -> f64 {
    (4.0 * x.iter().map(|v| v * v).sum::<f64>().sqrt()).cos()
}

/// Inputs uniform in the unit ball (Gaussian direction, radius `u^{1/d}`);
/// every output is `cos(4‖x‖) + noise·ε`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n == 0 || cfg.d_in == 0 || cfg.d_out == 0 || !(cfg.noise >= 0.0) {
        return Err(Error::Config("synthetic data needs N, D_in, D_out ≥ 1 and noise ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Mat::zeros(cfg.n, cfg.d_in);
    for i in 0..cfg.n {
        let dir: Vec<f64> = loop {
            let d: Vec<f64> = (0..cfg.d_in).map(|_| rng.sample(StandardNormal)).collect();
            if d.iter().any(|v: &f64| *v != 0.0) {
                break d;
            }
        };
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = rng.gen::<f64>().powf(1.0 / cfg.d_in as f64);
        for j in 0..cfg.d_in {
            x[(i, j)] = dir[j] / norm * r;
        }
    }
    let y = Mat::from_fn(cfg.n, cfg.d_out, |i, _| {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        synthetic_mean(&xi)
    });
    let noise = Mat::from_fn(cfg.n, cfg.d_out, |_, _| cfg.noise * rng.sample::<f64, _>(StandardNormal));
    Dataset::new(x, y + noise)
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan")
}

/// Reads a CSV with a header row: the first `d_x` columns are inputs, the
/// rest outputs. Empty or `nan` output cells become unobserved entries.
pub fn load_csv(path: &Path, d_x: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if d_x >= header.len() {
        return Err(Error::Config(format!(
            "D_X = {d_x} leaves no output columns among {}",
            header.len()
        )));
    }
    let d_y = header.len() - d_x;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut observed = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let mut mrow = Vec::with_capacity(d_y);
        for (j, cell) in rec.iter().enumerate() {
            if j >= d_x && is_missing(cell) {
                ys.push(f64::NAN);
                mrow.push(false);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Config(format!("line {line}, column {}: '{cell}' is not a number", j + 1))
            })?;
            if j < d_x {
                if !v.is_finite() {
                    return Err(Error::Config(format!("line {line}: non-finite input")));
                }
                xs.push(v);
            } else {
                ys.push(v);
                mrow.push(v.is_finite());
            }
        }
        if !mrow.iter().any(|&o| o) {
            log::warn!("line {line}: no observed outputs");
        }
        observed.push(mrow);
    }
    let n = observed.len();
    if n == 0 {
        return Err(Error::Config("CSV has no data rows".into()));
    }
    Ok(Dataset {
        x: Mat::from_row_slice(n, d_x, &xs),
        y: Mat::from_row_slice(n, d_y, &ys),
        mask: OutputMask { observed },
        x_names: header[..d_x].to_vec(),
        y_names: header[d_x..].to_vec(),
        standardization: None,
    })
}

/// Writes `ds` as CSV (inputs then outputs; unobserved outputs as `nan`),
/// with shortest round-trip decimal representations.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ds.x_names.iter().chain(ds.y_names.iter()))?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        for k in 0..ds.d_y() {
            row.push(if ds.mask.observed[i][k] {
                format!("{}", ds.y[(i, k)])
            } else {
                "nan".into()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded disjoint `(train, test)` index sets with `round(fraction·N)` test points.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config("test fraction must lie in (0, 1)".into()));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} of {n} points leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Random train/test split; both parts are standardized with training statistics.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(ds.n(), test_fraction, seed)?;
    let train = ds.select(&tr);
    let test = ds.select(&te);
    let stats = Standardizer::fit(&train);
    Ok((train.standardized_with(&stats), test.standardized_with(&stats)))
}

/// Hides exactly `missing_per_point` uniformly chosen observed outputs of every datapoint.
pub fn mask_outputs(ds: &Dataset, missing_per_point: usize, seed: u64) -> Result<Dataset> {
    if missing_per_point >= ds.d_y() {
        return Err(Error::Config(format!(
            "cannot hide {missing_per_point} of {} outputs per point",
            ds.d_y()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for i in 0..ds.n() {
        let obs: Vec<usize> = (0..ds.d_y()).filter(|&k| ds.mask.observed[i][k]).collect();
        if obs.len() <= missing_per_point {
            return Err(Error::Config(format!(
                "datapoint {i} has only {} observed outputs",
                obs.len()
            )));
        }
        for pick in sample(&mut rng, obs.len(), missing_per_point).into_iter() {
            let k = obs[pick];
            out.mask.observed[i][k] = false;
            out.y[(i, k)] = f64::NAN;
        }
    }
    Ok(out)
}

/// Unsupervised dataset with no inputs and outputs `[X | Y]`.
pub fn concat_unsupervised(ds: &Dataset) -> Result<Dataset> {
    if ds.d_x() == 0 {
        return Err(Error::Config("dataset has no inputs to concatenate".into()));
    }
    let (n, dx, dy) = (ds.n(), ds.d_x(), ds.d_y());
    let y = Mat::from_fn(n, dx + dy, |i, j| if j < dx { ds.x[(i, j)] } else { ds.y[(i, j - dx)] });
    let observed = (0..n)
        .map(|i| {
            let mut row = vec![true; dx];
            row.extend_from_slice(&ds.mask.observed[i]);
            row
        })
        .collect();
    let standardization = ds.standardization.as_ref().map(|s| Standardizer {
        x_mean: Vec::new(),
        x_std: Vec::new(),
        y_mean: s.x_mean.iter().chain(&s.y_mean).copied().collect(),
        y_std: s.x_std.iter().chain(&s.y_std).copied().collect(),
    });
    Ok(Dataset {
        x: Mat::zeros(n, 0),
        y,
        mask: OutputMask { observed },
        x_names: Vec::new(),
        y_names: ds.x_names.iter().chain(&ds.y_names).cloned().collect(),
        standardization,
    })
}

/// Test metrics of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Average per-datapoint test log-likelihood.
    pub test_ll: f64,
    pub mrmse: f64,
}

/// Test log-likelihood and MRMSE on `test`. Latent-input models first fit
/// `q(X*)`. With `cfg.destandardize`, metrics are reported in original
/// output units: log densities shift by `−Σ_k log std_k` over observed
/// outputs and errors scale by `std_k`.
pub fn evaluate(model: &Model, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<Metrics> {
    let test_data = test.to_data()?;
    let (inputs, pred_x) = if model.latents.is_some() {
        let fit = model.fit_test_latents(&train.to_data()?, &test_data, cfg.latent_steps, cfg.latent_lr, cfg.seed)?;
        let means = fit.q.mean.clone();
        (Inputs::Latent(fit.q), means)
    } else {
        (Inputs::Observed(test.x.clone()), test.x.clone())
    };
    let mut pts = test_ll_points(model, &inputs, &test_data, cfg)?;
    let (mean, _) = model.predict(&pred_x)?;
    let (pred, target) = match (&test.standardization, cfg.destandardize) {
        (Some(s), true) => {
            for (i, p) in pts.iter_mut().enumerate() {
                for k in 0..test.d_y() {
                    if test.mask.observed[i][k] {
                        *p -= s.y_std[k].ln();
                    }
                }
            }
            (s.invert_y(&mean), s.invert_y(&test_data.y))
        }
        _ => (mean, test_data.y.clone()),
    };
    Ok(Metrics {
        test_ll: pts.iter().sum::<f64>() / pts.len() as f64,
        mrmse: mrmse(&pred, &target, &test_data.mask)?,
    })
}
