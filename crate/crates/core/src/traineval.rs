//! Training loop (minibatch Adam with restarts, step-wise learning-rate
//! decay and KL warm-up) and evaluation metrics (nested Monte-Carlo test
//! log-likelihood, MRMSE).

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{adam_step, AdamState, Mat, Tape};
use crate::error::{Error, Result};
use crate::models::{Data, Inputs, Model, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub restarts: usize,
    pub screen_epochs: usize,
    pub kl_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 500,
            lr: 0.01,
            lr_milestones: vec![125, 200],
            lr_factor: 0.5,
            restarts: 5,
            screen_epochs: 10,
            kl_warmup_epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Default minibatch sizes of the robotics benchmarks; doubled for the deep variants.
pub fn default_batch_size(dataset: &str, deep: bool) -> Option<usize> {
    let base = match dataset.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
        "mujoco" => 1000,
        "kuka" => 500,
        "fbaxter" => 500,
        "sarcos" => 500,
        "rbaxter" => 250,
        _ => return None,
    };
    Some(if deep { 2 * base } else { base })
}

/// Learning rate at `epoch`: the initial rate times `factor` per milestone passed.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_factor.powi(passed as i32)
}

/// Linear KL warm-up from 0 to 1.
pub fn kl_scale_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.kl_warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / cfg.kl_warmup_epochs as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch ELBO estimate.
    pub elbo: f64,
    /// Average ELL per datapoint.
    pub ell: f64,
    pub lr: f64,
    pub kl_scale: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Screening ELL per datapoint of every restart.
    pub restart_ells: Vec<f64>,
    pub selected_restart: usize,
    /// The configured minibatch exceeded the dataset and the full batch was used.
    pub full_batch_fallback: bool,
}

impl TrainHistory {
    /// Final-epoch average ELL per datapoint, or `None` before any epoch.
    pub fn final_ell(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.ell)
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.restart_ells == other.restart_ells
            && self.selected_restart == other.selected_restart
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.elbo.to_bits() == b.elbo.to_bits()
                    && a.ell.to_bits() == b.ell.to_bits()
                    && a.lr == b.lr
                    && a.kl_scale == b.kl_scale
            })
    }
}

/// A model with its optimizer state and noise stream.
struct Run {
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
}

fn run_epoch(run: &mut Run, data: &Data, cfg: &TrainConfig, batch: usize, epoch: usize) -> Result<EpochRecord> {
    let start = Instant::now();
    let lr = lr_at(cfg, epoch);
    let kl_scale = kl_scale_at(cfg, epoch);
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut run.rng);
    let mut elbo_sum = 0.0;
    let mut ell_sum = 0.0;
    let mut steps = 0usize;
    for idx in order.chunks(batch) {
        let seed: u64 = run.rng.gen();
        let tape = Tape::new();
        let b = run.model.ps.bind(&tape);
        let out = run.model.elbo_on_tape(&tape, &b, data, idx, seed, kl_scale)?;
        let (elbo, ell) = (out.elbo.item(), out.ell.item());
        if !elbo.is_finite() {
            return Err(Error::NonFinite(format!("ELBO at epoch {epoch} is {elbo}")));
        }
        let grads = tape.backward(-out.elbo)?;
        run.model.ps.set_grads(&b, &grads);
        adam_step(&mut run.model.ps, &mut run.adam, lr)?;
        if run.model.ps.iter().any(|p| p.raw.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameters diverged at epoch {epoch}")));
        }
        elbo_sum += elbo;
        ell_sum += ell;
        steps += 1;
    }
    Ok(EpochRecord {
        epoch,
        elbo: elbo_sum / steps as f64,
        ell: ell_sum / data.n() as f64,
        lr,
        kl_scale,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Builds `cfg.restarts` models with distinct seeds, trains each for the
/// screening epochs, keeps the one with the highest training ELL and trains
/// it to `cfg.epochs`. Deterministic given `cfg.seed`.
pub fn train(spec: &ModelSpec, data: &Data, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if data.n() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut history = TrainHistory::default();
    let batch = if cfg.batch_size > data.n() {
        log::warn!(
            "minibatch size {} exceeds {} training points; using the full batch",
            cfg.batch_size,
            data.n()
        );
        history.full_batch_fallback = true;
        data.n()
    } else {
        cfg.batch_size
    };
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let screen = if cfg.restarts > 1 {
        cfg.screen_epochs.min(cfg.epochs)
    } else {
        0
    };
    let mut best: Option<(f64, usize, Run, Vec<EpochRecord>)> = None;
    for r in 0..cfg.restarts {
        let build_seed: u64 = master.gen();
        let noise_seed: u64 = master.gen();
        let model = Model::build(spec, data, build_seed)?;
        let adam = AdamState::new(&model.ps);
        let mut run = Run {
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
        };
        let mut recs = Vec::new();
        for epoch in 0..screen {
            recs.push(run_epoch(&mut run, data, cfg, batch, epoch)?);
        }
        let score = recs.last().map(|e| e.ell).unwrap_or(f64::NEG_INFINITY);
        log::info!("{} restart {r}: screening ELL/point {score:.4}", spec.variant);
        history.restart_ells.push(score);
        let better = match &best {
            None => true,
            Some((s, ..)) => score > *s,
        };
        if better {
            best = Some((score, r, run, recs));
        }
    }
    let (_, selected, mut run, recs) = best.expect("at least one restart");
    history.selected_restart = selected;
    history.epochs = recs;
    for epoch in screen..cfg.epochs {
        let rec = run_epoch(&mut run, data, cfg, batch, epoch)?;
        log::debug!(
            "{} epoch {epoch}: ELBO {:.4}, ELL/point {:.4}",
            spec.variant,
            rec.elbo,
            rec.ell
        );
        history.epochs.push(rec);
    }
    Ok((run.model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    #[serde(rename = "N_outer")]
    pub n_outer: usize,
    #[serde(rename = "N_inner")]
    pub n_inner: usize,
    pub seed: u64,
    /// Report metrics in the original output units instead of standardized ones.
    pub destandardize: bool,
    /// Adam steps and learning rate for fitting test latents of latent-input models.
    pub latent_steps: usize,
    pub latent_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_outer: 25,
            n_inner: 50,
            seed: 0,
            destandardize: false,
            latent_steps: 500,
            latent_lr: 0.01,
        }
    }
}

fn log_gauss(y: f64, m: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (y - m) * (y - m) / var
}

/// Per-datapoint nested estimate
/// `(1/N_outer) Σ_k log[(1/N_inner) Σ_j p(y*ᵢ | x*ᵢ, F*_{jk})]` over observed outputs,
/// where `p(y | F) = N(y | m, v + 1/β)` with the mixing matrix integrated out.
pub fn test_ll_points(model: &Model, inputs: &Inputs, data: &Data, cfg: &EvalConfig) -> Result<Vec<f64>> {
    if cfg.n_outer == 0 || cfg.n_inner == 0 {
        return Err(Error::Config("N_outer and N_inner must be at least 1".into()));
    }
    if model.latents.is_some() && matches!(inputs, Inputs::Observed(_)) {
        return Err(Error::InvalidArgument(
            "latent-input models need fitted test latents".into(),
        ));
    }
    let n = data.n();
    if inputs.n() != n || data.y.ncols() != model.spec.d_y {
        return Err(Error::shape("test_ll", "inputs, outputs and model disagree"));
    }
    let beta = model.ps.value(model.noise.beta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = vec![0.0; n];
    let mut lp = vec![0.0; cfg.n_inner];
    for _ in 0..cfg.n_outer {
        let draws = model.draw_mean_var(inputs, cfg.n_inner, &mut rng)?;
        for (i, a) in acc.iter_mut().enumerate() {
            for (j, (m, v)) in draws.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..data.y.ncols() {
                    if data.mask[(i, k)] != 0.0 {
                        s += log_gauss(data.y[(i, k)], m[(i, k)], v[(i, k)] + 1.0 / beta[k]);
                    }
                }
                lp[j] = s;
            }
            let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = lp.iter().map(|&l| (l - mx).exp()).sum();
            *a += mx + (se / cfg.n_inner as f64).ln();
        }
    }
    let out: Vec<f64> = acc.into_iter().map(|a| a / cfg.n_outer as f64).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("test log-likelihood".into()));
    }
    Ok(out)
}

/// Average of [`test_ll_points`] over datapoints.
pub fn test_ll(model: &Model, inputs: &Inputs, data: &Data, cfg: &EvalConfig) -> Result<f64> {
    let pts = test_ll_points(model, inputs, data, cfg)?;
    Ok(pts.iter().sum::<f64>() / pts.len().max(1) as f64)
}

/// Mean over output dimensions (with at least one observed entry) of the
/// per-dimension RMSE over observed entries. Unobserved entries are never read.
pub fn mrmse(pred: &Mat, y: &Mat, mask: &Mat) -> Result<f64> {
    if pred.shape() != y.shape() || mask.shape() != y.shape() {
        return Err(Error::shape("mrmse", "prediction, target and mask shapes differ"));
    }
    let mut total = 0.0;
    let mut dims = 0usize;
    for k in 0..y.ncols() {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..y.nrows() {
            if mask[(i, k)] != 0.0 {
                let d = pred[(i, k)] - y[(i, k)];
                s += d * d;
                c += 1;
            }
        }
        if c > 0 {
            total += (s / c as f64).sqrt();
            dims += 1;
        }
    }
    if dims == 0 {
        return Err(Error::InvalidArgument("no observed outputs".into()));
    }
    Ok(total / dims as f64)
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub train_ell: f64,
    pub test_ll: f64,
    pub mrmse: f64,
    pub wall_time_s: f64,
}

/// Appends `rec` as one JSON line.
pub fn append_record(path: &Path, rec: &RunRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}
