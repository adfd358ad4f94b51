//! Command-line driver: data synthesis, training, inference, evaluation,
//! correction ablations, reference-noise attacks, and the ERF/frequency
//! analysis tools.

mod manifest;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclevos::config::Config;

#[derive(Parser)]
#[command(name = "cyclevos", version, about = "Cyclic video object segmentation toolkit")]
struct Cli {
    /// Cap on internal worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config-file keys; any flag overrides the file value.
#[derive(Args, Default, Clone)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    frames_per_clip: Option<usize>,
    #[arg(long)]
    interval_step: Option<usize>,
    #[arg(long)]
    interval_epoch_period: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycle_weight: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    mem_stride: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    bootstrap_frac: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long)]
    every_k: Option<usize>,
    #[arg(long)]
    clamp: Option<String>,
    #[arg(long)]
    m_iters: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    mi_iters: Option<usize>,
    #[arg(long)]
    mi_decay: Option<f64>,
    #[arg(long)]
    attack_window: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    frames_per_video: Option<usize>,
    #[arg(long)]
    n_objects: Option<usize>,
    #[arg(long)]
    occluder_prob: Option<f64>,
    #[arg(long)]
    velocity_max: Option<i64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) -> anyhow::Result<()> {
        let flag_path = PathBuf::from("<flag>");
        macro_rules! over {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    cfg.apply(stringify!($field), &v.to_string(), &flag_path, 0)?;
                })*
            };
        }
        over!(
            epochs,
            batch_size,
            lr,
            adam_beta1,
            adam_beta2,
            frames_per_clip,
            interval_step,
            interval_epoch_period,
            seed,
            cycle_weight,
            augment,
            checkpoint_every,
            strategy,
            mem_stride,
            gamma,
            bootstrap_frac,
            lambda,
            eps,
            alpha,
            n_iters,
            every_k,
            clamp,
            m_iters,
            epsilon,
            mi_iters,
            mi_decay,
            attack_window,
            height,
            width,
            n_videos,
            frames_per_video,
            n_objects,
            occluder_prob,
            velocity_max,
        );
        Ok(())
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Optional key = value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => cyclevos::config::parse_config(path)?,
            None => Config::default(),
        };
        self.overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset in the DAVIS layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Split name for ImageSets.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Encoder base width (architecture, stored in the checkpoint).
        #[arg(long, default_value_t = 32)]
        base_width: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run inference and save predicted annotation images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Periodic gradient correction on/off.
        #[arg(long, default_value = "off")]
        gc: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint: J and F per video plus the overall mean.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "off")]
        gc: String,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep correction iterations and step sizes, recording J&F and runtime.
    CorrectAblate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Inject reference noise under the mem strategy and measure the damage.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// none|lowq|box|fgsm|mifgsm
        #[arg(long)]
        noise: String,
        #[arg(long, default_value = "off")]
        gc: String,
        /// white|black
        #[arg(long, default_value = "white")]
        mode: String,
        /// Surrogate checkpoint (required for black-box attacks).
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Weak checkpoint for low-quality degradation.
        #[arg(long)]
        weak: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cycle effective receptive fields on a dataset split.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Reference frame: `mid` or a 1-based index.
        #[arg(long, default_value = "mid")]
        ref_frame: String,
        /// Target frame (1-based).
        #[arg(long, default_value_t = 1)]
        target: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Frequency response of the gradient-correction system.
    Freq {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_toggle(v: &str) -> anyhow::Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => anyhow::bail!("expected on|off, got {other:?}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: could not configure {workers} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { out, split, common } => {
            let cfg = common.resolve()?;
            ops::synth(&cfg, &out, &split)
        }
        Command::Train {
            data,
            out,
            split,
            base_width,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::train(&cfg, &data, &out, &split, base_width)
        }
        Command::Infer {
            ckpt,
            data,
            out,
            split,
            gc,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::infer(&cfg, &ckpt, &data, &out, &split, parse_toggle(&gc)?)
        }
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            gc,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::eval(&cfg, &ckpt, &data, &out, &split, parse_toggle(&gc)?)
        }
        Command::CorrectAblate {
            ckpt,
            data,
            out,
            split,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::correct_ablate(&cfg, &ckpt, &data, &out, &split)
        }
        Command::Attack {
            ckpt,
            data,
            out,
            split,
            noise,
            gc,
            mode,
            surrogate,
            weak,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::attack(
                &cfg,
                &ckpt,
                &data,
                &out,
                &split,
                &noise,
                parse_toggle(&gc)?,
                &mode,
                surrogate.as_deref(),
                weak.as_deref(),
            )
        }
        Command::Erf {
            ckpt,
            data,
            out,
            split,
            ref_frame,
            target,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::erf(&cfg, &ckpt, &data, &out, &split, &ref_frame, target)
        }
        Command::Freq {
            ckpt,
            data,
            out,
            split,
            common,
        } => {
            let cfg = common.resolve()?;
            ops::freq(&cfg, &ckpt, &data, &out, &split)
        }
    }
}
