use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the backbone receives speaker identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Per-phoneme fine-grained speaker embeddings via reference attention.
    Cdfse,
    /// Baseline: one pooled utterance vector replicated to every position.
    Cls,
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::Cdfse => "cdfse",
            ConditioningMode::Cls => "cls",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ConditioningMode> {
        match s {
            "cdfse" => Ok(ConditioningMode::Cdfse),
            "cls" => Ok(ConditioningMode::Cls),
            other => Err(Error::Config {
                field: "mode",
                detail: format!("expected `cdfse` or `cls`, got `{other}`"),
            }),
        }
    }
}

/// Architecture hyperparameters for the reference encoder, reference
/// attention, and backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub n_mels: usize,
    pub mode: ConditioningMode,
    /// Downsampling factor is `2^pool_stages`; up to 4 pools interleave with
    /// the conv stack, the remainder (at most 2) follow it.
    pub pool_stages: usize,
    pub prenet_channels: usize,
    pub prenet_kernel: usize,
    pub content_blocks: usize,
    pub content_dim: usize,
    pub downsample_channels: [usize; 4],
    pub downsample_kernel: usize,
    pub out_dim: usize,
    pub attention_dim: usize,
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub ffn_kernel1: usize,
    pub ffn_kernel2: usize,
}

impl Default for ModelConfig {
    /// Full-scale layout: 512-channel pre-net, 4-block encoders, 256-dim
    /// embeddings, 16× downsampling.
    fn default() -> ModelConfig {
        ModelConfig {
            n_phonemes: 72,
            n_speakers: 174,
            n_mels: 80,
            mode: ConditioningMode::Cdfse,
            pool_stages: 4,
            prenet_channels: 512,
            prenet_kernel: 5,
            content_blocks: 4,
            content_dim: 256,
            downsample_channels: [128, 256, 512, 512],
            downsample_kernel: 3,
            out_dim: 256,
            attention_dim: 128,
            hidden: 256,
            encoder_blocks: 4,
            decoder_blocks: 4,
            n_heads: 2,
            ffn_mult: 4,
            ffn_kernel1: 9,
            ffn_kernel2: 1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale layout that trains in minutes on one CPU core while keeping
    /// every architectural element (including the 256→hidden bridge).
    pub fn toy(n_phonemes: usize, n_speakers: usize) -> ModelConfig {
        ModelConfig {
            n_phonemes,
            n_speakers,
            prenet_channels: 32,
            content_blocks: 2,
            content_dim: 32,
            downsample_channels: [16, 32, 32, 32],
            attention_dim: 32,
            hidden: 64,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ffn_mult: 2,
            ffn_kernel1: 3,
            ..ModelConfig::default()
        }
    }

    pub fn factor(&self) -> usize {
        1 << self.pool_stages
    }

    /// Set `pool_stages` from a downsampling factor (must be a power of two
    /// no larger than 64).
    pub fn with_factor(mut self, factor: usize) -> Result<ModelConfig> {
        if !factor.is_power_of_two() || factor > 64 {
            return Err(Error::Config {
                field: "factor",
                detail: format!("downsampling factor must be a power of two ≤ 64, got {factor}"),
            });
        }
        self.pool_stages = factor.trailing_zeros() as usize;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_phonemes", self.n_phonemes),
            ("n_speakers", self.n_speakers),
            ("n_mels", self.n_mels),
            ("prenet_channels", self.prenet_channels),
            ("content_blocks", self.content_blocks),
            ("content_dim", self.content_dim),
            ("out_dim", self.out_dim),
            ("attention_dim", self.attention_dim),
            ("hidden", self.hidden),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("ffn_mult", self.ffn_mult),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config { field, detail: "must be positive".into() });
            }
        }
        if self.downsample_channels.contains(&0) {
            return Err(Error::Config {
                field: "downsample_channels",
                detail: "all four channel counts must be positive".into(),
            });
        }
        // 4 pools fit the conv stack; 2 more may follow it (factor 64).
        if self.pool_stages > 6 {
            return Err(Error::Config {
                field: "pool_stages",
                detail: format!("at most 6 pooling stages (factor 64), got {}", self.pool_stages),
            });
        }
        for (field, k) in [
            ("prenet_kernel", self.prenet_kernel),
            ("downsample_kernel", self.downsample_kernel),
            ("ffn_kernel1", self.ffn_kernel1),
            ("ffn_kernel2", self.ffn_kernel2),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config {
                    field,
                    detail: format!("kernel widths must be odd, got {k}"),
                });
            }
        }
        if self.n_heads == 0
            || self.content_dim % self.n_heads != 0
            || self.hidden % self.n_heads != 0
        {
            return Err(Error::Config {
                field: "n_heads",
                detail: format!(
                    "{} heads must divide content_dim {} and hidden {}",
                    self.n_heads, self.content_dim, self.hidden
                ),
            });
        }
        for (field, d) in [("content_dim", self.content_dim), ("hidden", self.hidden)] {
            if d % 2 != 0 {
                return Err(Error::Config {
                    field,
                    detail: "position encoding needs an even width".into(),
                });
            }
        }
        Ok(())
    }
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub base_scale: f64,
    pub warmup_steps: u64,
    pub w_mel: f64,
    pub w_duration: f64,
    pub w_phoneme: f64,
    pub w_speaker: f64,
    pub seed: u64,
    pub holdout_per_speaker: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            max_steps: 1500,
            base_scale: 0.05,
            warmup_steps: 400,
            w_mel: 1.0,
            w_duration: 0.1,
            w_phoneme: 0.1,
            w_speaker: 0.1,
            seed: 7,
            holdout_per_speaker: 5,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config { field: "batch_size", detail: "must be at least 1".into() });
        }
        if self.max_steps == 0 {
            return Err(Error::Config { field: "max_steps", detail: "must be at least 1".into() });
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config { field: "warmup_steps", detail: "must be at least 1".into() });
        }
        if !(self.base_scale.is_finite() && self.base_scale > 0.0) {
            return Err(Error::Config {
                field: "base_scale",
                detail: format!("must be positive, got {}", self.base_scale),
            });
        }
        for (field, w) in [
            ("w_mel", self.w_mel),
            ("w_duration", self.w_duration),
            ("w_phoneme", self.w_phoneme),
            ("w_speaker", self.w_speaker),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config {
                    field,
                    detail: format!("loss weights must be ≥ 0, got {w}"),
                });
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config { field: "checkpoint_every", detail: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

macro_rules! config_fields {
    ($apply:ident) => {
        $apply!(model, n_phonemes);
        $apply!(model, n_speakers);
        $apply!(model, n_mels);
        $apply!(model, mode);
        $apply!(model, pool_stages);
        $apply!(model, prenet_channels);
        $apply!(model, prenet_kernel);
        $apply!(model, content_blocks);
        $apply!(model, content_dim);
        $apply!(model, downsample_channels);
        $apply!(model, downsample_kernel);
        $apply!(model, out_dim);
        $apply!(model, attention_dim);
        $apply!(model, hidden);
        $apply!(model, encoder_blocks);
        $apply!(model, decoder_blocks);
        $apply!(model, n_heads);
        $apply!(model, ffn_mult);
        $apply!(model, ffn_kernel1);
        $apply!(model, ffn_kernel2);
        $apply!(train, batch_size);
        $apply!(train, max_steps);
        $apply!(train, base_scale);
        $apply!(train, warmup_steps);
        $apply!(train, w_mel);
        $apply!(train, w_duration);
        $apply!(train, w_phoneme);
        $apply!(train, w_speaker);
        $apply!(train, seed);
        $apply!(train, holdout_per_speaker);
        $apply!(train, checkpoint_every);
    };
}

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> Option<Self>;
}

macro_rules! primitive_config_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

primitive_config_value!(usize, u64, f64);

impl ConfigValue for ConditioningMode {
    fn render(&self) -> String {
        self.to_string()
    }

    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl ConfigValue for [usize; 4] {
    fn render(&self) -> String {
        self.map(|v| v.to_string()).join(",")
    }

    fn parse_value(s: &str) -> Option<Self> {
        let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        parts.try_into().ok()
    }
}

/// Serialize as flat `key=value` lines, one per field, in declaration order.
pub fn render_config(cfg: &Config) -> String {
    let mut out = String::new();
    macro_rules! emit {
        ($section:ident, $field:ident) => {
            out.push_str(&format!("{}={}\n", stringify!($field), cfg.$section.$field.render()));
        };
    }
    config_fields!(emit);
    out
}

pub fn save_config(path: &Path, cfg: &Config) -> Result<()> {
    std::fs::write(path, render_config(cfg))
        .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
}

/// Parse a flat `key=value` config. Unlisted keys keep their defaults;
/// unknown or repeated keys are errors naming the offender.
pub fn parse_config(text: &str, origin: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, lineno, format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::format(origin, lineno, format!("duplicate key `{key}`")));
        }
        let mut matched = false;
        macro_rules! try_set {
            ($section:ident, $field:ident) => {
                if key == stringify!($field) {
                    cfg.$section.$field = ConfigValue::parse_value(value).ok_or_else(|| {
                        Error::format(
                            origin,
                            lineno,
                            format!("bad value `{value}` for field `{key}`"),
                        )
                    })?;
                    matched = true;
                }
            };
        }
        config_fields!(try_set);
        if !matched {
            return Err(Error::format(origin, lineno, format!("unknown config field `{key}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    parse_config(&text, &path.display().to_string())
}
