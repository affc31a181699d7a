use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadmoments::{Activation, DEFAULT_ORDER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MOGP")]
    Mogp,
    #[serde(rename = "GPRN")]
    Gprn,
    #[serde(rename = "DGP")]
    Dgp,
    #[serde(rename = "SBGPRN")]
    Sbgprn,
    #[serde(rename = "N-MOGP")]
    NMogp,
    #[serde(rename = "N-SBGPRN")]
    NSbgprn,
    #[serde(rename = "N-DGP")]
    NDgp,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Mogp,
        Variant::Gprn,
        Variant::Dgp,
        Variant::Sbgprn,
        Variant::NMogp,
        Variant::NSbgprn,
        Variant::NDgp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mogp => "MOGP",
            Variant::Gprn => "GPRN",
            Variant::Dgp => "DGP",
            Variant::Sbgprn => "SBGPRN",
            Variant::NMogp => "N-MOGP",
            Variant::NSbgprn => "N-SBGPRN",
            Variant::NDgp => "N-DGP",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Variant::NMogp | Variant::NSbgprn | Variant::NDgp)
    }

    pub fn is_deep(self) -> bool {
        matches!(self, Variant::Dgp | Variant::NDgp)
    }

    pub fn supports_analytic(self) -> bool {
        !self.is_deep()
    }

    pub fn supports_latent(self) -> bool {
        matches!(self, Variant::Mogp | Variant::NMogp | Variant::NSbgprn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EllMode {
    Sgvb,
    Analytic,
}

impl FromStr for EllMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgvb" => Ok(EllMode::Sgvb),
            "analytic" => Ok(EllMode::Analytic),
            _ => Err(Error::Config(format!("unknown ELL mode '{s}'"))),
        }
    }
}

/// Everything needed to construct a model, independent of the data values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Input dimension; the latent dimension for latent-input models.
    #[serde(rename = "D_X")]
    pub d_x: usize,
    #[serde(rename = "D_Y")]
    pub d_y: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Second-layer width of the deep variants.
    #[serde(rename = "L_prime", default)]
    pub l_prime: Option<usize>,
    /// Hidden width of the neural variants.
    #[serde(rename = "D_H", default)]
    pub d_h: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    /// Inducing points of the first layer (and of the GPRN mixing GPs).
    #[serde(rename = "N_ind")]
    pub n_ind: usize,
    /// Inducing points of the deep variants' second layer.
    #[serde(rename = "N_ind2", default = "default_n_ind2")]
    pub n_ind2: usize,
    /// Per-dimension lengthscales; off means one shared lengthscale.
    #[serde(default = "default_true")]
    pub ard: bool,
    #[serde(default)]
    pub deep_kernel: bool,
    #[serde(default)]
    pub latent_inputs: bool,
    pub ell_mode: EllMode,
    pub n_samples: usize,
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
}

fn default_activation() -> String {
    "sherf".into()
}

fn default_n_ind2() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_quad_order() -> usize {
    DEFAULT_ORDER
}

fn default_l2() -> f64 {
    crate::likelihoods::DEFAULT_L2
}

/// Default SGVB sample count for single-layer variants.
pub const SGVB_SAMPLES: usize = 250;
/// Default SGVB sample count for the deep variants.
pub const SGVB_SAMPLES_DEEP: usize = 5;

impl ModelSpec {
    /// Default configuration of a variant for `d_x` inputs and `d_y` outputs:
    /// `L = ⌈D_Y/2⌉`, `L' = ⌈¾D_Y⌉`, `D_H = 2D_Y` (N-MOGP, N-DGP) or `D_Y`
    /// (N-SBGPRN), 400 inducing points (100 for the GPRN and the second DGP
    /// layer), SGVB training except for the GPRN (analytic), sherf/leaky/erf
    /// activations for N-MOGP/N-SBGPRN/N-DGP.
    pub fn defaults(variant: Variant, d_x: usize, d_y: usize) -> Self {
        let l = d_y.div_ceil(2).max(1);
        let l_prime = variant.is_deep().then(|| (3 * d_y).div_ceil(4).max(1));
        let d_h = match variant {
            Variant::NMogp | Variant::NDgp => Some(2 * d_y),
            Variant::NSbgprn => Some(d_y),
            _ => None,
        };
        let n_ind = if variant == Variant::Gprn { 100 } else { 400 };
        let ell_mode = if variant == Variant::Gprn {
            EllMode::Analytic
        } else {
            EllMode::Sgvb
        };
        let n_samples = if variant.is_deep() {
            SGVB_SAMPLES_DEEP
        } else {
            SGVB_SAMPLES
        };
        let activation = match variant {
            Variant::NSbgprn => "leaky",
            Variant::NDgp => "erf",
            _ => "sherf",
        };
        Self {
            variant,
            d_x,
            d_y,
            l,
            l_prime,
            d_h,
            activation: activation.into(),
            n_ind,
            n_ind2: default_n_ind2(),
            ard: true,
            deep_kernel: false,
            latent_inputs: false,
            ell_mode,
            n_samples,
            quad_order: DEFAULT_ORDER,
            l2: default_l2(),
        }
    }

    /// Latent-input configuration: `D_X = 4`, `L = 4`, shared-lengthscale RBF,
    /// 200 inducing points, analytic ELL at one latent draw per datapoint,
    /// leaky ReLU for the N-MOGP and ReLU for the N-SBGPRN.
    pub fn latent_defaults(variant: Variant, d_y: usize) -> Self {
        let mut s = Self::defaults(variant, 4, d_y);
        s.l = 4;
        s.n_ind = 200;
        s.ard = false;
        s.latent_inputs = true;
        s.ell_mode = EllMode::Analytic;
        match variant {
            Variant::NMogp => s.activation = "leaky".into(),
            Variant::NSbgprn => s.activation = "relu".into(),
            _ => {}
        }
        s
    }

    pub fn act(&self) -> Result<Activation> {
        Activation::parse(&self.activation)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.variant)));
        if self.d_x == 0 || self.d_y == 0 {
            return bad("D_X and D_Y must be positive");
        }
        if self.l == 0 {
            return bad("L must be at least 1");
        }
        if self.n_ind == 0 {
            return bad("N_ind must be at least 1");
        }
        if self.variant.is_deep() {
            if self.l_prime.unwrap_or(0) == 0 {
                return bad("L_prime must be at least 1");
            }
            if self.n_ind2 == 0 {
                return bad("N_ind2 must be at least 1");
            }
        }
        if self.variant.is_neural() && self.d_h.unwrap_or(0) == 0 {
            return bad("D_H must be at least 1");
        }
        if self.ell_mode == EllMode::Analytic && !self.variant.supports_analytic() {
            return bad("analytic ELL is not available for deep variants");
        }
        if self.ell_mode == EllMode::Sgvb && self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if self.latent_inputs && !self.variant.supports_latent() {
            return bad("latent inputs are only available for MOGP, N-MOGP and N-SBGPRN");
        }
        if self.quad_order == 0 {
            return bad("quad_order must be at least 1");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        self.act()?;
        Ok(())
    }
}
