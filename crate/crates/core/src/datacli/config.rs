//! TOML run configuration: `[model]` overrides on top of the variant
//! defaults, `[train]` and `[eval]` settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EllMode, ModelSpec, Variant};
use crate::traineval::{default_batch_size, EvalConfig, TrainConfig};

/// Optional replacements for fields of the variant's default [`ModelSpec`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub variant: Option<Variant>,
    #[serde(rename = "D_X")]
    pub d_x: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[serde(rename = "L_prime")]
    pub l_prime: Option<usize>,
    #[serde(rename = "D_H")]
    pub d_h: Option<usize>,
    pub activation: Option<String>,
    #[serde(rename = "N_ind")]
    pub n_ind: Option<usize>,
    #[serde(rename = "N_ind2")]
    pub n_ind2: Option<usize>,
    pub ard: Option<bool>,
    pub deep_kernel: Option<bool>,
    pub latent_inputs: Option<bool>,
    pub ell_mode: Option<EllMode>,
    pub n_samples: Option<usize>,
    pub quad_order: Option<usize>,
    pub l2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelOverrides,
    /// Kept raw so that an explicit `batch_size` can be told apart from the default.
    pub train: toml::Table,
    pub eval: EvalConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Settings given on the command line; they take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliOverrides {
    pub variant: Option<Variant>,
    /// Benchmark name selecting the default minibatch size.
    pub dataset: Option<String>,
    pub ell_mode: Option<EllMode>,
    pub quad_order: Option<usize>,
    pub seed: Option<u64>,
    pub unsupervised: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Combines defaults, file and command line for data with `d_x` inputs and
/// `d_y` outputs. The minibatch size comes from `[train]` if set, else from
/// the named benchmark, else 500.
pub fn resolve_config(file: &ConfigFile, cli: &CliOverrides, d_x: usize, d_y: usize) -> Result<ResolvedConfig> {
    let m = &file.model;
    let variant = cli
        .variant
        .or(m.variant)
        .ok_or_else(|| Error::Config("no model variant given".into()))?;
    let latent = cli.unsupervised || m.latent_inputs == Some(true);
    let mut spec = if latent {
        ModelSpec::latent_defaults(variant, d_y)
    } else {
        ModelSpec::defaults(variant, d_x, d_y)
    };
    if let Some(v) = m.d_x {
        if !latent && v != d_x {
            return Err(Error::Config(format!("D_X = {v} but the data has {d_x} inputs")));
        }
        spec.d_x = v;
    }
    if let Some(v) = m.l {
        spec.l = v;
    }
    if m.l_prime.is_some() {
        spec.l_prime = m.l_prime;
    }
    if m.d_h.is_some() {
        spec.d_h = m.d_h;
    }
    if let Some(v) = &m.activation {
        spec.activation = v.clone();
    }
    if let Some(v) = m.n_ind {
        spec.n_ind = v;
    }
    if let Some(v) = m.n_ind2 {
        spec.n_ind2 = v;
    }
    if let Some(v) = m.ard {
        spec.ard = v;
    }
    if let Some(v) = m.deep_kernel {
        spec.deep_kernel = v;
    }
    if let Some(v) = m.ell_mode {
        spec.ell_mode = v;
    }
    if let Some(v) = m.n_samples {
        spec.n_samples = v;
    }
    if let Some(v) = m.quad_order {
        spec.quad_order = v;
    }
    if let Some(v) = m.l2 {
        spec.l2 = v;
    }
    if let Some(v) = cli.ell_mode {
        spec.ell_mode = v;
    }
    if let Some(v) = cli.quad_order {
        spec.quad_order = v;
    }
    spec.validate()?;

    let mut train: TrainConfig = toml::Value::Table(file.train.clone()).try_into()?;
    if !file.train.contains_key("batch_size") {
        train.batch_size = cli
            .dataset
            .as_deref()
            .and_then(|d| default_batch_size(d, variant.is_deep()))
            .unwrap_or(500);
    }
    let mut eval = file.eval.clone();
    if let Some(s) = cli.seed {
        train.seed = s;
        eval.seed = s;
    }
    train.validate()?;
    Ok(ResolvedConfig {
        model: spec,
        train,
        eval,
    })
}
