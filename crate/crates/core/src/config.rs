//! Training configuration: a TOML file whose fields can be overridden from
//! the command line.
//!
//! ```toml
//! model = "cyclegan"            # pix2pix | cyclegan | sharegan
//! conditioning = "latent_concat" # none | image_add | latent_add | latent_concat
//! learning_rate = 0.0002
//! epochs = 100
//! batch_size = 2
//! betas = [0.5, 0.999]
//! seed = 0
//! adversarial = "log_sigmoid"   # or least_squares
//! augment_enabled = true
//! # lr_decay_start = 50         # linear decay to zero from this epoch on
//! # max_steps = 200             # stop after this many optimizer steps
//! # split_sizes = [910, 242, 186]
//!
//! [weights]                     # defaults depend on the model
//! lambda_l1 = 0.0
//! lambda_cyc1 = 10.0
//! lambda_cyc2 = 10.0
//! lambda_idt = 0.3
//!
//! [augment]
//! noise_sigma = 0.02
//! # ...
//!
//! [generator]
//! encoder_channels = [32, 64, 128]
//! # ...
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::conditioning::ConditioningMode;
use crate::error::{Error, Result};
use crate::losses::{AdversarialLoss, LossWeights};
use crate::networks::GeneratorSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pix2pix,
    Cyclegan,
    Sharegan,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Pix2pix => "pix2pix",
            ModelKind::Cyclegan => "cyclegan",
            ModelKind::Sharegan => "sharegan",
        }
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            ModelKind::Pix2pix => LossWeights::pix2pix(),
            ModelKind::Cyclegan => LossWeights::cyclegan(),
            ModelKind::Sharegan => LossWeights::sharegan(),
        }
    }

    /// Pix2pix realizes its noise input as decoder dropout.
    pub fn default_generator(self) -> GeneratorSpec {
        let dropout = if self == ModelKind::Pix2pix { 0.5 } else { 0.0 };
        GeneratorSpec { dropout, ..GeneratorSpec::default() }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Pix2pix, ModelKind::Cyclegan, ModelKind::Sharegan]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model '{s}' (pix2pix|cyclegan|sharegan)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub conditioning: ConditioningMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub seed: u64,
    pub adversarial: AdversarialLoss,
    /// Model defaults when absent.
    pub weights: Option<LossWeights>,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    /// Model defaults when absent.
    pub generator: Option<GeneratorSpec>,
    /// Epoch (0-based) from which the learning rate decays linearly to zero
    /// at the end of training; constant when absent.
    pub lr_decay_start: Option<usize>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Image counts (train, val, test) used when no split file is given.
    pub split_sizes: Option<[usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cyclegan,
            conditioning: ConditioningMode::LatentConcat,
            learning_rate: 2e-4,
            epochs: 100,
            batch_size: 2,
            betas: (0.5, 0.999),
            seed: 0,
            adversarial: AdversarialLoss::LogSigmoid,
            weights: None,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            generator: None,
            lr_decay_start: None,
            max_steps: None,
            split_sizes: None,
        }
    }
}

impl TrainConfig {
    pub fn for_model(model: ModelKind) -> Self {
        Self { model, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("invalid training config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| self.model.default_weights())
    }

    pub fn generator(&self) -> GeneratorSpec {
        self.generator.clone().unwrap_or_else(|| self.model.default_generator())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        self.weights().validate()?;
        self.generator().validate()?;
        if self.augment_enabled {
            self.augment.validate()?;
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch under the configured schedule.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_start {
            Some(start) if epoch >= start && self.epochs > start => {
                let span = (self.epochs - start) as f64;
                self.learning_rate * (1.0 - (epoch - start) as f64 / span)
            }
            _ => self.learning_rate,
        }
    }

    /// Hex SHA-256 of the canonical JSON form with model defaults resolved.
    pub fn hash(&self) -> String {
        let resolved = Self {
            weights: Some(self.weights()),
            generator: Some(self.generator()),
            ..self.clone()
        };
        let json = serde_json::to_vec(&resolved).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
