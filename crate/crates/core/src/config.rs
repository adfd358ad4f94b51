//! Plain-text `key = value` configuration shared by the CLI commands.
//!
//! Unknown keys and malformed values are rejected with the offending line
//! number. An empty file yields the stock defaults.

use std::path::Path;

use crate::analysis::ErfConfig;
use crate::correct::{ClampMode, CorrectionConfig};
use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::robustness::AttackConfig;
use crate::train::TrainConfig;

/// Fully merged configuration.
#[derive(Clone, Debug)]
pub struct Config {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub correction: CorrectionConfig,
    pub erf: ErfConfig,
    pub attack: AttackConfig,
    /// Working resolution `(H, W)`.
    pub resolution: (usize, usize),
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            correction: CorrectionConfig::default(),
            erf: ErfConfig::default(),
            attack: AttackConfig::default(),
            resolution: (64, 112),
            synth: SynthConfig::default(),
        }
    }
}

fn err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

macro_rules! parse_as {
    ($ty:ty, $value:expr, $path:expr, $line:expr, $key:expr) => {
        $value.parse::<$ty>().map_err(|_| {
            err(
                $path,
                $line,
                format!(
                    "value {:?} for key {} is not a valid {}",
                    $value,
                    $key,
                    stringify!($ty)
                ),
            )
        })?
    };
}

impl Config {
    /// Apply one key/value pair. `line` is used for error reporting only.
    pub fn apply(&mut self, key: &str, value: &str, path: &Path, line: usize) -> Result<()> {
        let positive = |v: f64, key: &str| -> Result<f64> {
            if v > 0.0 {
                Ok(v)
            } else {
                Err(err(path, line, format!("{key} must be positive, got {v}")))
            }
        };
        match key {
            // training
            "epochs" => self.train.epochs = parse_as!(usize, value, path, line, key),
            "batch_size" => self.train.batch_size = parse_as!(usize, value, path, line, key),
            "lr" => self.train.lr = positive(parse_as!(f64, value, path, line, key), key)?,
            "adam_beta1" => self.train.adam_beta1 = parse_as!(f64, value, path, line, key),
            "adam_beta2" => self.train.adam_beta2 = parse_as!(f64, value, path, line, key),
            "frames_per_clip" => {
                self.train.frames_per_clip = parse_as!(usize, value, path, line, key)
            }
            "interval_step" => self.train.interval_step = parse_as!(usize, value, path, line, key),
            "interval_epoch_period" => {
                self.train.interval_epoch_period = parse_as!(usize, value, path, line, key)
            }
            "seed" => {
                let seed = parse_as!(u64, value, path, line, key);
                self.train.seed = seed;
                self.synth.seed = seed;
            }
            "cycle_weight" => {
                let v = parse_as!(f64, value, path, line, key);
                if v < 0.0 {
                    return Err(err(path, line, "cycle_weight must be >= 0"));
                }
                self.train.cycle_weight = v;
            }
            "augment" => self.train.augment = parse_as!(bool, value, path, line, key),
            "checkpoint_every" => {
                self.train.checkpoint_every = parse_as!(usize, value, path, line, key)
            }
            "strategy" => {
                self.train.strategy = value
                    .parse()
                    .map_err(|e: Error| err(path, line, e.to_string()))?
            }
            "mem_stride" => {
                let v = parse_as!(usize, value, path, line, key);
                if v == 0 {
                    return Err(err(path, line, "mem_stride must be >= 1"));
                }
                self.train.mem_stride = v;
            }
            // losses
            "gamma" => {
                let v = parse_as!(f64, value, path, line, key);
                if v < 0.0 {
                    return Err(err(path, line, "gamma must be >= 0"));
                }
                self.loss.gamma = v;
            }
            "bootstrap_frac" => {
                let v = parse_as!(f64, value, path, line, key);
                if !(v > 0.0 && v <= 1.0) {
                    return Err(err(path, line, "bootstrap_frac must lie in (0,1]"));
                }
                self.loss.bootstrap_frac = v;
            }
            "lambda" => {
                let v = parse_as!(f64, value, path, line, key);
                if v < 0.0 {
                    return Err(err(path, line, "lambda must be >= 0"));
                }
                self.loss.lambda = v;
                self.correction.lambda = v;
            }
            "eps" => self.loss.eps = positive(parse_as!(f64, value, path, line, key), key)?,
            // gradient correction
            "alpha" => {
                let v = positive(parse_as!(f64, value, path, line, key), key)?;
                self.correction.alpha = v;
                self.erf.alpha = v;
            }
            "n_iters" => self.correction.n_iters = parse_as!(usize, value, path, line, key),
            "every_k" => {
                let v = parse_as!(usize, value, path, line, key);
                if v == 0 {
                    return Err(err(path, line, "every_k must be >= 1"));
                }
                self.correction.every_k = v;
            }
            "clamp" => {
                self.correction.clamp = match value {
                    "unit_interval" => ClampMode::UnitInterval,
                    "none" => ClampMode::Unbounded,
                    other => {
                        return Err(err(
                            path,
                            line,
                            format!("clamp must be unit_interval|none, got {other:?}"),
                        ))
                    }
                }
            }
            // cycle-ERF
            "m_iters" => {
                let v = parse_as!(usize, value, path, line, key);
                if v == 0 {
                    return Err(err(path, line, "m_iters must be >= 1"));
                }
                self.erf.m_iters = v;
            }
            // attacks
            "epsilon" => {
                self.attack.epsilon = positive(parse_as!(f64, value, path, line, key), key)?
            }
            "mi_iters" => {
                let v = parse_as!(usize, value, path, line, key);
                if v == 0 {
                    return Err(err(path, line, "mi_iters must be >= 1"));
                }
                self.attack.mi_iters = v;
            }
            "mi_decay" => {
                let v = parse_as!(f64, value, path, line, key);
                if v < 0.0 {
                    return Err(err(path, line, "mi_decay must be >= 0"));
                }
                self.attack.mi_decay = v;
            }
            "attack_window" => {
                let v = parse_as!(usize, value, path, line, key);
                if v == 0 {
                    return Err(err(path, line, "attack_window must be >= 1"));
                }
                self.attack.attack_window = v;
            }
            // data
            "height" => {
                let v = parse_as!(usize, value, path, line, key);
                self.resolution.0 = v;
                self.synth.resolution.0 = v;
            }
            "width" => {
                let v = parse_as!(usize, value, path, line, key);
                self.resolution.1 = v;
                self.synth.resolution.1 = v;
            }
            "n_videos" => self.synth.n_videos = parse_as!(usize, value, path, line, key),
            "frames_per_video" => {
                self.synth.frames_per_video = parse_as!(usize, value, path, line, key)
            }
            "n_objects" => {
                let v = parse_as!(usize, value, path, line, key);
                if !(1..=3).contains(&v) {
                    return Err(err(path, line, "n_objects must lie in 1..=3"));
                }
                self.synth.n_objects = v;
            }
            "occluder_prob" => {
                let v = parse_as!(f64, value, path, line, key);
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(path, line, "occluder_prob must lie in [0,1]"));
                }
                self.synth.occluder_prob = v;
            }
            "velocity_max" => {
                let v = parse_as!(i64, value, path, line, key);
                if v < 1 {
                    return Err(err(path, line, "velocity_max must be >= 1"));
                }
                self.synth.velocity_max = v;
            }
            other => {
                return Err(err(path, line, format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Canonical key=value dump, stable across runs (used for manifests and
    /// the checkpoint config hash).
    pub fn snapshot(&self) -> String {
        let clamp = match self.correction.clamp {
            ClampMode::UnitInterval => "unit_interval",
            ClampMode::Unbounded => "none",
        };
        format!(
            "epochs = {}\nbatch_size = {}\nlr = {}\nadam_beta1 = {}\nadam_beta2 = {}\n\
             frames_per_clip = {}\ninterval_step = {}\ninterval_epoch_period = {}\nseed = {}\n\
             cycle_weight = {}\naugment = {}\ncheckpoint_every = {}\nstrategy = {}\nmem_stride = {}\n\
             gamma = {}\nbootstrap_frac = {}\nlambda = {}\neps = {}\n\
             alpha = {}\nn_iters = {}\nevery_k = {}\nclamp = {}\nm_iters = {}\n\
             epsilon = {}\nmi_iters = {}\nmi_decay = {}\nattack_window = {}\n\
             height = {}\nwidth = {}\nn_videos = {}\nframes_per_video = {}\nn_objects = {}\n\
             occluder_prob = {}\nvelocity_max = {}\n",
            self.train.epochs,
            self.train.batch_size,
            self.train.lr,
            self.train.adam_beta1,
            self.train.adam_beta2,
            self.train.frames_per_clip,
            self.train.interval_step,
            self.train.interval_epoch_period,
            self.train.seed,
            self.train.cycle_weight,
            self.train.augment,
            self.train.checkpoint_every,
            self.train.strategy,
            self.train.mem_stride,
            self.loss.gamma,
            self.loss.bootstrap_frac,
            self.loss.lambda,
            self.loss.eps,
            self.correction.alpha,
            self.correction.n_iters,
            self.correction.every_k,
            clamp,
            self.erf.m_iters,
            self.attack.epsilon,
            self.attack.mi_iters,
            self.attack.mi_decay,
            self.attack.attack_window,
            self.resolution.0,
            self.resolution.1,
            self.synth.n_videos,
            self.synth.frames_per_video,
            self.synth.n_objects,
            self.synth.occluder_prob,
            self.synth.velocity_max,
        )
    }
}

/// Parse a config file into typed configs with defaults for absent keys.
pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path)
}

/// Parse config text; `path` is used for error messages only.
pub fn parse_config_str(text: &str, path: &Path) -> Result<Config> {
    let mut cfg = Config::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(path, line_no, format!("expected key = value, got {raw:?}")));
        };
        cfg.apply(key.trim(), value.trim(), path, line_no)?;
    }
    Ok(cfg)
}
