//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::config::{resolve_config, CliOverrides, ConfigFile, ResolvedConfig};
use super::{concat_unsupervised, evaluate, gen_synthetic, load_csv, mask_outputs, split, write_csv, Dataset, Metrics, Standardizer, SynthConfig};
use crate::diffmath::Mat;
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, EllMode, Model, Variant};
use crate::traineval::{append_record, train, RunRecord};

#[derive(Debug, Parser)]
#[command(name = "nlgp", version, about = "Multi-output Gaussian processes with neural likelihoods")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the ball-cosine synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Train a model, save it and report test metrics.
    Train(TrainArgs),
    /// Evaluate a saved model on the test split of a dataset.
    Eval(EvalArgs),
    /// Predictive means and variances at new inputs.
    Predict(PredictArgs),
    /// Train a neural variant for several hidden widths.
    SweepHidden(SweepHiddenArgs),
    /// Train variants with a growing number of hidden outputs per datapoint.
    MaskSweep(MaskSweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub d_in: usize,
    #[arg(long, default_value_t = 8)]
    pub d_out: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV with a header row; inputs first, then outputs.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of leading input columns.
    #[arg(long)]
    pub d_x: usize,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Model inputs and outputs jointly with latent inputs.
    #[arg(long)]
    pub unsupervised: bool,
    /// Outputs hidden per training datapoint.
    #[arg(long, default_value_t = 0)]
    pub missing: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// TOML file with [model], [train] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Benchmark name selecting the default minibatch size.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub ell_mode: Option<EllMode>,
    #[arg(long)]
    pub quad_order: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report metrics in original output units.
    #[arg(long)]
    pub destandardize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory for the checkpoint, history and metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML file whose [eval] section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub destandardize: bool,
    /// JSON-lines file to append the result to.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV of inputs with a header row, in original units.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Standardization statistics; defaults to `standardizer.json` next to the checkpoint.
    #[arg(long)]
    pub standardizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepHiddenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub hidden: Vec<usize>,
    /// CSV table of results.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskSweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "MOGP,N-MOGP")]
    pub variants: Vec<Variant>,
    /// Comma-separated numbers of hidden outputs per training datapoint.
    #[arg(long, value_delimiter = ',', required = true)]
    pub levels: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::SweepHidden(a) => cmd_sweep_hidden(&a),
        Command::MaskSweep(a) => cmd_mask_sweep(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = gen_synthetic(&SynthConfig {
        n: a.n,
        d_in: a.d_in,
        d_out: a.d_out,
        noise: a.noise,
        seed: a.seed,
    })?;
    write_csv(&ds, &a.out)
}

/// Loads, optionally concatenates, splits (training statistics) and masks
/// the training outputs.
pub fn prepare(a: &DataArgs, missing: usize) -> Result<(Dataset, Dataset)> {
    let mut ds = load_csv(&a.data, a.d_x)?;
    if a.unsupervised {
        ds = concat_unsupervised(&ds)?;
    }
    let (train, test) = split(&ds, a.test_fraction, a.split_seed)?;
    let train = if missing > 0 {
        mask_outputs(&train, missing, a.split_seed)?
    } else {
        train
    };
    Ok((train, test))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map(ConfigFile::load).unwrap_or_else(|| Ok(ConfigFile::default()))
}

fn resolve(m: &ModelArgs, d: &DataArgs, train: &Dataset) -> Result<ResolvedConfig> {
    let file = load_config(m.config.as_deref())?;
    let over = CliOverrides {
        variant: m.variant,
        dataset: m.dataset.clone(),
        ell_mode: m.ell_mode,
        quad_order: m.quad_order,
        seed: m.seed,
        unsupervised: d.unsupervised,
    };
    let mut r = resolve_config(&file, &over, train.d_x(), train.d_y())?;
    r.eval.destandardize |= m.destandardize;
    Ok(r)
}

struct Outcome {
    model: Model,
    history: crate::traineval::TrainHistory,
    metrics: Metrics,
    wall_time_s: f64,
}

fn fit_and_score(cfg: &ResolvedConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<Outcome> {
    let t0 = Instant::now();
    let (model, history) = train(&cfg.model, &train_ds.to_data()?, &cfg.train)?;
    let wall_time_s = t0.elapsed().as_secs_f64();
    let metrics = evaluate(&model, train_ds, test_ds, &cfg.eval)?;
    Ok(Outcome {
        model,
        history,
        metrics,
        wall_time_s,
    })
}

fn split_label(d: &DataArgs) -> String {
    format!("{}:{}", d.split_seed, d.test_fraction)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (train_ds, test_ds) = prepare(&a.data, a.data.missing)?;
    let cfg = resolve(&a.model, &a.data, &train_ds)?;
    let out = fit_and_score(&cfg, &train_ds, &test_ds)?;
    std::fs::create_dir_all(&a.out)?;
    save_checkpoint(&out.model, &a.out.join("model.ckpt"))?;
    let json = |v: serde_json::Result<String>| v.map_err(|e| Error::Config(e.to_string()));
    std::fs::write(a.out.join("config.json"), json(serde_json::to_string_pretty(&cfg))?)?;
    std::fs::write(a.out.join("history.json"), json(serde_json::to_string_pretty(&out.history))?)?;
    if let Some(s) = &train_ds.standardization {
        std::fs::write(a.out.join("standardizer.json"), json(serde_json::to_string_pretty(s))?)?;
    }
    let rec = RunRecord {
        variant: cfg.model.variant.name().into(),
        seed: cfg.train.seed,
        split: split_label(&a.data),
        train_ell: out.history.final_ell().unwrap_or(f64::NAN),
        test_ll: out.metrics.test_ll,
        mrmse: out.metrics.mrmse,
        wall_time_s: out.wall_time_s,
    };
    append_record(&a.out.join("metrics.jsonl"), &rec)?;
    println!("{}", json(serde_json::to_string(&rec))?);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let (train_ds, test_ds) = prepare(&a.data, 0)?;
    if model.spec.d_y != test_ds.d_y() || (!model.spec.latent_inputs && model.spec.d_x != test_ds.d_x()) {
        return Err(Error::Config("checkpoint does not match the dataset's dimensions".into()));
    }
    let mut eval = load_config(a.config.as_deref())?.eval;
    if let Some(s) = a.seed {
        eval.seed = s;
    }
    eval.destandardize |= a.destandardize;
    let t0 = Instant::now();
    let m = evaluate(&model, &train_ds, &test_ds, &eval)?;
    let rec = RunRecord {
        variant: model.spec.variant.name().into(),
        seed: eval.seed,
        split: split_label(&a.data),
        train_ell: f64::NAN,
        test_ll: m.test_ll,
        mrmse: m.mrmse,
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    if let Some(p) = &a.out {
        append_record(p, &rec)?;
    }
    println!("{{\"test_ll\":{},\"mrmse\":{}}}", m.test_ll, m.mrmse);
    Ok(())
}

fn read_inputs(path: &Path) -> Result<Mat> {
    let mut rdr = csv::Reader::from_path(path)?;
    let d = rdr.headers()?.len();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        for cell in rec?.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("'{cell}' is not a number")))?;
            vals.push(v);
        }
    }
    Ok(Mat::from_row_slice(vals.len() / d.max(1), d, &vals))
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    if model.spec.latent_inputs {
        return Err(Error::Unsupported("prediction needs an observed-input model".into()));
    }
    let x = read_inputs(&a.inputs)?;
    if x.ncols() != model.spec.d_x {
        return Err(Error::Config(format!("expected {} input columns, found {}", model.spec.d_x, x.ncols())));
    }
    let stats_path = a
        .standardizer
        .clone()
        .or_else(|| a.checkpoint.parent().map(|p| p.join("standardizer.json")))
        .filter(|p| p.exists());
    let stats: Option<Standardizer> = match stats_path {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?),
        None => None,
    };
    let xs = stats.as_ref().map(|s| s.apply_x(&x)).unwrap_or_else(|| x.clone());
    let (mut mean, mut var) = model.predict(&xs)?;
    if let Some(s) = &stats {
        mean = s.invert_y(&mean);
        var = s.invert_y_var(&var);
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    let d_y = mean.ncols();
    let header: Vec<String> = (0..d_y)
        .map(|k| format!("mean{k}"))
        .chain((0..d_y).map(|k| format!("var{k}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..mean.nrows() {
        let row: Vec<String> = mean.row(i).iter().chain(var.row(i).iter()).map(|v| format!("{v}")).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep_hidden(a: &SweepHiddenArgs) -> Result<()> {
    let (train_ds, test_ds) = prepare(&a.data, a.data.missing)?;
    let base = resolve(&a.model, &a.data, &train_ds)?;
    if !base.model.variant.is_neural() {
        return Err(Error::Config(format!("{} has no hidden layer", base.model.variant)));
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["D_H", "train_ell", "test_ll", "mrmse", "wall_time_s"])?;
    for &d_h in &a.hidden {
        let mut cfg = base.clone();
        cfg.model.d_h = Some(d_h);
        cfg.model.validate()?;
        let o = fit_and_score(&cfg, &train_ds, &test_ds)?;
        let row = [
            d_h.to_string(),
            o.history.final_ell().unwrap_or(f64::NAN).to_string(),
            o.metrics.test_ll.to_string(),
            o.metrics.mrmse.to_string(),
            o.wall_time_s.to_string(),
        ];
        println!("{}", row.join(","));
        w.write_record(&row)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_mask_sweep(a: &MaskSweepArgs) -> Result<()> {
    let (train_full, test_ds) = prepare(&a.data, 0)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["variant", "missing", "train_ell", "test_ll", "mrmse", "wall_time_s"])?;
    for &missing in &a.levels {
        let train_ds = mask_outputs(&train_full, missing, a.data.split_seed)?;
        for &v in &a.variants {
            let margs = ModelArgs {
                variant: Some(v),
                ..a.model.clone()
            };
            let cfg = resolve(&margs, &a.data, &train_ds)?;
            let o = fit_and_score(&cfg, &train_ds, &test_ds)?;
            let row = [
                v.name().to_string(),
                missing.to_string(),
                o.history.final_ell().unwrap_or(f64::NAN).to_string(),
                o.metrics.test_ll.to_string(),
                o.metrics.mrmse.to_string(),
                o.wall_time_s.to_string(),
            ];
            println!("{}", row.join(","));
            w.write_record(&row)?;
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
        let c = Cli::try_parse_from([
            "nlgp", "train", "--data", "d.csv", "--d-x", "21", "--variant", "n-sbgprn", "--dataset", "R-Baxter", "--out", "o",
        ])
        .unwrap();
        match c.command {
            Command::Train(t) => {
                assert_eq!(t.model.variant, Some(Variant::NSbgprn));
                assert_eq!(t.data.test_fraction, 0.1);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["nlgp", "train", "--variant", "XGP"]).is_err());
        let c = Cli::try_parse_from([
            "nlgp", "mask-sweep", "--data", "d", "--d-x", "5", "--levels", "0,2", "--out", "t.csv",
        ])
        .unwrap();
        match c.command {
            Command::MaskSweep(m) => assert_eq!(m.variants, vec![Variant::Mogp, Variant::NMogp]),
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("elbo".into())), 3);
        assert_eq!(exit_code(&Error::NotPositiveDefinite { max_jitter: 1e-4 }), 3);
    }
}
