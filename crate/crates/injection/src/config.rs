//! Configuration schema, the `key=value` config-file loader, and the
//! learning-rate schedule.
//!
//! The file format is one `key=value` per line; `#` starts a comment and
//! blank lines are ignored. Keys not listed below are rejected. Missing
//! keys take the defaults documented on each field.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected key=value, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config key `{key}`: cannot parse value `{value}`")]
    Parse { key: String, value: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: u32, total: u32 },
}

/// Generator backbone variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Unet,
    Resnet,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Unet => "unet",
            Backbone::Resnet => "resnet",
        })
    }
}

/// Network and data geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square image edge length. Default 128.
    pub image_size: usize,
    /// Image channels. Default 3.
    pub in_channels: usize,
    /// Number of domains K. Default 2.
    pub num_domains: usize,
    /// Latent code length d. Default 8.
    pub latent_dim: usize,
    /// Generator backbone. Default unet.
    pub backbone: Backbone,
    /// Channel count of the first convolution. Default 64.
    pub base_width: usize,
    /// Down/up-sampling stages. Default 4.
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            in_channels: 3,
            num_domains: 2,
            latent_dim: 8,
            backbone: Backbone::Unet,
            base_width: 64,
            depth: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let div = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(ConfigError::Validation(format!(
                "image_size {} not divisible by 2^depth = {}",
                self.image_size, div
            )));
        }
        // Keeps the patch-score map larger than 1x1.
        if self.image_size / div < 2 {
            return Err(ConfigError::Validation(format!(
                "image_size {} too small for depth {} (needs >= {})",
                self.image_size,
                self.depth,
                2 * div
            )));
        }
        if self.num_domains < 2 {
            return Err(ConfigError::Validation(format!(
                "num_domains must be >= 2, got {}",
                self.num_domains
            )));
        }
        if self.latent_dim < 1 {
            return Err(ConfigError::Validation("latent_dim must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(ConfigError::Validation("in_channels must be >= 1".into()));
        }
        if self.base_width < 1 || self.depth < 1 {
            return Err(ConfigError::Validation(
                "base_width and depth must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the objective terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Domain-classification weight on generated images. Default 2.5.
    pub lambda_cls: f64,
    /// Domain-classification weight on real images in the critic total.
    /// Default 2.5.
    pub lambda_cls_real: f64,
    /// Cycle reconstruction weight. Default 1.
    pub lambda_image: f64,
    /// Latent-code recovery weight. Default 10.
    pub lambda_latent: f64,
    /// KL prior weight. Default 0.5.
    pub lambda_kl: f64,
    /// Gradient-penalty weight. Default 5.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.5,
            lambda_cls_real: 2.5,
            lambda_image: 1.0,
            lambda_latent: 10.0,
            lambda_kl: 0.5,
            lambda_gp: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_cls_real", self.lambda_cls_real),
            ("lambda_image", self.lambda_image),
            ("lambda_latent", self.lambda_latent),
            ("lambda_kl", self.lambda_kl),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ConfigError::Validation(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which latent code the cycle reconstruction uses; programmatic only
/// (not part of the config-file schema).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleLatent {
    /// Re-encode the source image and sample from its posterior.
    #[default]
    Encoded,
    /// Reuse the prior draw that produced the translated image.
    Forward,
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Default 16.
    pub batch_size: usize,
    /// Default 1e-4.
    pub base_lr: f64,
    /// Default 0.5.
    pub beta1: f64,
    /// Default 0.999.
    pub beta2: f64,
    /// Epochs at constant base_lr. Default 100.
    pub epochs_constant: u32,
    /// Epochs of linear decay to zero. Default 100.
    pub epochs_decay: u32,
    /// Generator/encoder updates per discriminator update. Default 5.
    pub g_steps_per_d_step: u32,
    /// Experiment seed. Default 0.
    pub seed: u64,
    /// Swap the update ratio (one generator step per `g_steps_per_d_step`
    /// discriminator steps). Programmatic only; defaults to false.
    pub invert_update_ratio: bool,
    /// Cycle latent source. Programmatic only.
    pub cycle_latent: CycleLatent,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs_constant: 100,
            epochs_decay: 100,
            g_steps_per_d_step: 5,
            seed: 0,
            invert_update_ratio: false,
            cycle_latent: CycleLatent::Encoded,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 1 {
            return Err(ConfigError::Validation("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::Validation(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(ConfigError::Validation(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.epochs_constant + self.epochs_decay == 0 {
            return Err(ConfigError::Validation("schedule has zero epochs".into()));
        }
        if self.g_steps_per_d_step < 1 {
            return Err(ConfigError::Validation(
                "g_steps_per_d_step must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> u32 {
        self.epochs_constant + self.epochs_decay
    }
}

/// Learning rate for `epoch`: the base rate through the constant phase,
/// then a linear ramp that reaches zero at the end of the decay phase.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: u32) -> Result<f64, ConfigError> {
    let total = cfg.total_epochs();
    if epoch >= total {
        return Err(ConfigError::EpochOutOfRange { epoch, total });
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.base_lr);
    }
    let into_decay = (epoch - cfg.epochs_constant + 1) as f64;
    Ok(cfg.base_lr * (1.0 - into_decay / cfg.epochs_decay as f64))
}

/// The full config triple.
pub type ConfigTriple = (ModelConfig, LossWeights, TrainConfig);

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Parse {
        key: key.to_owned(),
        value: value.trim().to_owned(),
    })
}

/// Parse config text. Unset keys fall back to defaults; all invariants are
/// checked before returning.
pub fn parse_config(text: &str) -> Result<ConfigTriple, ConfigError> {
    let mut model = ModelConfig::default();
    let mut weights = LossWeights::default();
    let mut train = TrainConfig::default();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Malformed {
                line: i + 1,
                text: raw.to_owned(),
            });
        };
        let key = key.trim();
        match key {
            "image_size" => model.image_size = parse(key, value)?,
            "in_channels" => model.in_channels = parse(key, value)?,
            "num_domains" => model.num_domains = parse(key, value)?,
            "latent_dim" => model.latent_dim = parse(key, value)?,
            "backbone" => {
                model.backbone = match value.trim() {
                    "unet" => Backbone::Unet,
                    "resnet" => Backbone::Resnet,
                    other => {
                        return Err(ConfigError::Parse {
                            key: key.to_owned(),
                            value: other.to_owned(),
                        })
                    }
                }
            }
            "base_width" => model.base_width = parse(key, value)?,
            "depth" => model.depth = parse(key, value)?,
            "lambda_cls" => weights.lambda_cls = parse(key, value)?,
            "lambda_cls_real" => weights.lambda_cls_real = parse(key, value)?,
            "lambda_image" => weights.lambda_image = parse(key, value)?,
            "lambda_latent" => weights.lambda_latent = parse(key, value)?,
            "lambda_kl" => weights.lambda_kl = parse(key, value)?,
            "lambda_gp" => weights.lambda_gp = parse(key, value)?,
            "batch_size" => train.batch_size = parse(key, value)?,
            "base_lr" => train.base_lr = parse(key, value)?,
            "beta1" => train.beta1 = parse(key, value)?,
            "beta2" => train.beta2 = parse(key, value)?,
            "epochs_constant" => train.epochs_constant = parse(key, value)?,
            "epochs_decay" => train.epochs_decay = parse(key, value)?,
            "g_steps_per_d_step" => train.g_steps_per_d_step = parse(key, value)?,
            "seed" => train.seed = parse(key, value)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    key: other.to_owned(),
                })
            }
        }
    }

    model.validate()?;
    weights.validate()?;
    train.validate()?;
    Ok((model, weights, train))
}

/// Load and validate a config file.
pub fn load_config(path: &Path) -> Result<ConfigTriple, ConfigError> {
    parse_config(&fs::read_to_string(path)?)
}

/// Render a config triple in the file format; `parse_config` of the result
/// reproduces the triple exactly.
pub fn serialize_config(model: &ModelConfig, weights: &LossWeights, train: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("image_size", model.image_size.to_string());
    kv("in_channels", model.in_channels.to_string());
    kv("num_domains", model.num_domains.to_string());
    kv("latent_dim", model.latent_dim.to_string());
    kv("backbone", model.backbone.to_string());
    kv("base_width", model.base_width.to_string());
    kv("depth", model.depth.to_string());
    kv("lambda_cls", weights.lambda_cls.to_string());
    kv("lambda_cls_real", weights.lambda_cls_real.to_string());
    kv("lambda_image", weights.lambda_image.to_string());
    kv("lambda_latent", weights.lambda_latent.to_string());
    kv("lambda_kl", weights.lambda_kl.to_string());
    kv("lambda_gp", weights.lambda_gp.to_string());
    kv("batch_size", train.batch_size.to_string());
    kv("base_lr", train.base_lr.to_string());
    kv("beta1", train.beta1.to_string());
    kv("beta2", train.beta2.to_string());
    kv("epochs_constant", train.epochs_constant.to_string());
    kv("epochs_decay", train.epochs_decay.to_string());
    kv("g_steps_per_d_step", train.g_steps_per_d_step.to_string());
    kv("seed", train.seed.to_string());
    s
}
