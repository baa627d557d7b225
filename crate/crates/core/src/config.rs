//! Run configuration: documented defaults, a line-based `key = value`
//! file format with '#' comments, and strict unknown-key rejection.

use crate::model::{ModelConfig, Variant};
use std::fmt::Write as _;
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: malformed value for {key:?}: {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    #[error("line {line}: expected \"key = value\", got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub channels: usize,
    pub radius: i64,
    pub kernels: (usize, usize),
    pub iters_train: usize,
    pub iters_eval: usize,
    pub gamma: f64,
    pub lr_peak: f64,
    pub steps: usize,
    pub clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub max_disp: f64,
    pub variant: Variant,
    pub csa_ratio: usize,
    pub sae_kernel: usize,
    pub eval_samples: usize,
    pub checkpoint_every: usize,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            channels: 32,
            radius: 4,
            kernels: (1, 3),
            iters_train: 8,
            iters_eval: 16,
            gamma: 0.9,
            lr_peak: 1e-3,
            steps: 2000,
            clip: 1.0,
            weight_decay: 1e-5,
            seed: 0,
            width: 96,
            height: 64,
            max_disp: 12.0,
            variant: Variant::SruCsaFull,
            csa_ratio: 4,
            sae_kernel: 7,
            eval_samples: 50,
            checkpoint_every: 500,
            canny_low: 0.1,
            canny_high: 0.2,
        }
    }
}

impl RunConfig {
    /// Maximum ground-truth disparity still counted as valid in the loss.
    pub fn max_disp_valid(&self) -> f64 {
        1.5 * self.max_disp
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            radius: self.radius,
            kernels: self.kernels,
            variant: self.variant,
            csa_ratio: self.csa_ratio,
            sae_kernel: self.sae_kernel,
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |detail: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            detail: detail.to_string(),
        };
        macro_rules! parse {
            ($field:ident, $desc:expr) => {
                self.$field = value.trim().parse().map_err(|_| bad($desc))?
            };
        }
        match key {
            "channels" => parse!(channels, "expected a positive integer"),
            "radius" => parse!(radius, "expected a positive integer"),
            "kernels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad("expected \"small,large\""));
                }
                let s = parts[0].parse().map_err(|_| bad("small kernel not an integer"))?;
                let l = parts[1].parse().map_err(|_| bad("large kernel not an integer"))?;
                self.kernels = (s, l);
            }
            "iters_train" => parse!(iters_train, "expected a positive integer"),
            "iters_eval" => parse!(iters_eval, "expected a positive integer"),
            "gamma" => parse!(gamma, "expected a real number"),
            "lr_peak" => parse!(lr_peak, "expected a real number"),
            "steps" => parse!(steps, "expected a positive integer"),
            "clip" => parse!(clip, "expected a real number"),
            "weight_decay" => parse!(weight_decay, "expected a real number"),
            "seed" => parse!(seed, "expected a nonnegative integer"),
            "width" => parse!(width, "expected a positive integer"),
            "height" => parse!(height, "expected a positive integer"),
            "max_disp" => parse!(max_disp, "expected a real number"),
            "variant" => {
                self.variant = Variant::parse(value.trim()).ok_or_else(|| {
                    bad("expected one of gru_baseline, sru_sum, sru_csa_contrary, sru_csa_full")
                })?
            }
            "csa_ratio" => parse!(csa_ratio, "expected a positive integer"),
            "sae_kernel" => parse!(sae_kernel, "expected a positive odd integer"),
            "eval_samples" => parse!(eval_samples, "expected a positive integer"),
            "checkpoint_every" => parse!(checkpoint_every, "expected a positive integer"),
            "canny_low" => parse!(canny_low, "expected a real number"),
            "canny_high" => parse!(canny_high, "expected a real number"),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: content.to_string(),
                });
            };
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 {
            problems.push("channels must be positive");
        }
        if self.radius < 1 {
            problems.push("radius must be >= 1");
        }
        if self.kernels.0 >= self.kernels.1 {
            problems.push("small kernel must be smaller than large kernel");
        }
        if self.kernels.0.is_multiple_of(2) || self.kernels.1.is_multiple_of(2) {
            problems.push("kernels must be odd");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            problems.push("gamma must be in (0, 1]");
        }
        if self.iters_train == 0 || self.iters_eval == 0 {
            problems.push("iteration counts must be positive");
        }
        if self.steps == 0 {
            problems.push("steps must be positive");
        }
        if !(self.lr_peak > 0.0) {
            problems.push("lr_peak must be positive");
        }
        if !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) {
            problems.push("width and height must be divisible by 32");
        }
        if !(self.max_disp > 0.0) || self.max_disp >= self.width as f64 / 4.0 {
            problems.push("max_disp must be in (0, width/4)");
        }
        if self.canny_low >= self.canny_high {
            problems.push("canny_low must be < canny_high");
        }
        if let Some(p) = problems.first() {
            return Err(ConfigError::Invalid(p.to_string()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of the full configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "radius = {}", self.radius);
        let _ = writeln!(s, "kernels = {},{}", self.kernels.0, self.kernels.1);
        let _ = writeln!(s, "iters_train = {}", self.iters_train);
        let _ = writeln!(s, "iters_eval = {}", self.iters_eval);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lr_peak = {}", self.lr_peak);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "max_disp = {}", self.max_disp);
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "csa_ratio = {}", self.csa_ratio);
        let _ = writeln!(s, "sae_kernel = {}", self.sae_kernel);
        let _ = writeln!(s, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "canny_low = {}", self.canny_low);
        let _ = writeln!(s, "canny_high = {}", self.canny_high);
        s
    }
}
