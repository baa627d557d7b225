use clap::{Args, Parser, Subcommand};
use selective_stereo::config::{ConfigError, RunConfig};
use selective_stereo::imgio::{self, ImgError};
use selective_stereo::model::Model;
use selective_stereo::sru;
use selective_stereo::tensor::TensorError;
use selective_stereo::training::{self, restore_checkpoint, CkptError, OptimState, TrainError};
use selective_stereo::{data, verify};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Iterative stereo disparity estimation with selective recurrent units.
#[derive(Parser)]
#[command(name = "selective-stereo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file ("key = value" lines, '#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override individual config keys, e.g. --set variant=gru_baseline.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (i, kv) in self.sets.iter().enumerate() {
            cfg.apply_text(kv).map_err(|e| match e {
                ConfigError::Malformed { text, .. } => ConfigError::Malformed { line: i + 1, text },
                other => other,
            })?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic stereograms.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out samples.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of held-out samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Predict disparity for one stereo pair and write a PFM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Update iterations.
        #[arg(long, default_value_t = 16)]
        iters: usize,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck,
    /// Print the receptive fields of the multi-level dual-kernel stack.
    Rf {
        /// Kernel pair "small,large".
        #[arg(long, default_value = "1,3")]
        kernels: String,
    },
    /// Export attention maps and disparity visualizations for one sample.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &AppError) -> u8 {
    match err {
        AppError::Config(_) => 1,
        AppError::Tensor(TensorError::NonFinite { .. }) => 2,
        AppError::Tensor(_) => 1,
        AppError::Train(TrainError::NonFiniteLoss { .. }) => 2,
        AppError::Train(TrainError::Tensor(TensorError::NonFinite { .. })) => 2,
        AppError::Train(TrainError::Tensor(_)) => 1,
        AppError::Train(TrainError::Ckpt(_)) => 3,
        AppError::Img(_) | AppError::Ckpt(_) | AppError::Io(_) => 3,
        AppError::GradcheckFailed => 2,
    }
}

#[derive(thiserror::Error, Debug)]
enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("{0}")]
    Io(String),
    #[error("gradient check failed")]
    GradcheckFailed,
}

fn cmd_train(
    config: &ConfigArgs,
    out: Option<&PathBuf>,
    resume: Option<&PathBuf>,
) -> Result<(), AppError> {
    let (cfg, mut model, mut optim, start_step) = match resume {
        Some(path) => {
            let (mut cfg, model, optim, step) = restore_checkpoint(path)?;
            // Command-line eval/schedule overrides still apply on resume.
            if let Some(file_cfg) = config.config.as_ref() {
                let file = RunConfig::from_file(file_cfg)?;
                cfg.eval_samples = file.eval_samples;
                cfg.iters_eval = file.iters_eval;
                cfg.checkpoint_every = file.checkpoint_every;
            }
            (cfg, model, optim, step)
        }
        None => {
            let cfg = config.load()?;
            let model = Model::new(cfg.model_config(), cfg.seed)?;
            let optim = OptimState::new(&model.store, cfg.weight_decay, cfg.clip);
            (cfg, model, optim, 0)
        }
    };
    println!(
        "training {} | {} parameters | seed {} | steps {}..{}",
        cfg.variant.as_str(),
        model.param_count(),
        cfg.seed,
        start_step,
        cfg.steps
    );
    training::train_loop(
        &cfg,
        &mut model,
        &mut optim,
        start_step,
        out.map(|p| p.as_path()),
        &mut |stats| {
            if stats.step % 10 == 0 || stats.step + 1 == cfg.steps as u64 {
                println!(
                    "step {:>6}  loss {:>10.5}  lr {:.3e}",
                    stats.step, stats.loss, stats.lr
                );
            }
        },
    )?;
    let (epe, report) = training::evaluate(&cfg, &model, cfg.eval_samples, cfg.iters_eval)?;
    println!(
        "validation over {} samples at {} iterations: EPE {:.4}",
        cfg.eval_samples, cfg.iters_eval, epe
    );
    print!("{}", training::format_report(&report));
    Ok(())
}

fn cmd_eval(config: &ConfigArgs, ckpt: &Path, samples: Option<usize>) -> Result<(), AppError> {
    let (mut cfg, model, _optim, step) = restore_checkpoint(ckpt)?;
    if let Some(path) = &config.config {
        let file = RunConfig::from_file(path)?;
        cfg.eval_samples = file.eval_samples;
        cfg.iters_eval = file.iters_eval;
        cfg.canny_low = file.canny_low;
        cfg.canny_high = file.canny_high;
    }
    if let Some(n) = samples {
        cfg.eval_samples = n;
    }
    println!(
        "evaluating {} (step {}) on {} held-out samples, {} iterations",
        cfg.variant.as_str(),
        step,
        cfg.eval_samples,
        cfg.iters_eval
    );
    let (epe, report) = training::evaluate(&cfg, &model, cfg.eval_samples, cfg.iters_eval)?;
    println!("EPE {epe:.4}");
    print!("{}", training::format_report(&report));
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    left: &Path,
    right: &Path,
    out: &Path,
    iters: usize,
) -> Result<(), AppError> {
    let (_cfg, model, _optim, _step) = restore_checkpoint(ckpt)?;
    let li = imgio::read_image(left)?;
    let ri = imgio::read_image(right)?;
    let pred = training::predict(&model, &li, &ri, iters)?;
    imgio::write_pfm(out, &pred)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck() -> Result<(), AppError> {
    let results = verify::full_suite(100)?;
    let mut all_ok = true;
    println!("{:<28} {:>12} {:>10}  status", "operation", "max rel err", "tolerance");
    for r in &results {
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{:<28} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.max_rel,
            r.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(AppError::GradcheckFailed)
    }
}

fn cmd_rf(kernels: &str) -> Result<(), AppError> {
    let parts: Vec<&str> = kernels.split(',').map(str::trim).collect();
    let parse = |s: &str| -> Result<usize, AppError> {
        s.parse()
            .map_err(|_| AppError::Config(ConfigError::Invalid(format!("bad kernel {s:?}"))))
    };
    if parts.len() != 2 {
        return Err(AppError::Config(ConfigError::Invalid(
            "expected --kernels small,large".into(),
        )));
    }
    let (small, large) = (parse(parts[0])?, parse(parts[1])?);
    if small >= large || small % 2 == 0 || large % 2 == 0 {
        return Err(AppError::Config(ConfigError::Invalid(
            "kernels must be odd with small < large".into(),
        )));
    }
    println!("{:<8} {:>14} {:>14}", "level", "small field", "large field");
    for level in 0..3 {
        println!(
            "1/{:<7} {:>14} {:>14}",
            4usize << level,
            sru::level_receptive_field(level, small),
            sru::level_receptive_field(level, large)
        );
    }
    Ok(())
}

fn cmd_viz(ckpt: &Path, seed: u64, out: &Path) -> Result<(), AppError> {
    let (cfg, model, _optim, _step) = restore_checkpoint(ckpt)?;
    std::fs::create_dir_all(out).map_err(|e| AppError::Io(format!("{}: {e}", out.display())))?;
    let sample = data::gen_stereogram(
        cfg.width,
        cfg.height,
        cfg.max_disp,
        data::SceneMode::Planes,
        seed,
    )?;
    let mut tape = selective_stereo::Tape::new();
    let fwd = model.run(&mut tape, &sample.left, &sample.right, cfg.iters_eval)?;
    imgio::write_pgm(&out.join("left.pgm"), &sample.left)?;
    imgio::write_ppm(&out.join("gt_disparity.ppm"), &imgio::colormap(&sample.gt_disparity))?;
    let pred = tape.value(*fwd.predictions.last().unwrap());
    imgio::write_ppm(&out.join("pred_disparity.ppm"), &imgio::colormap(&pred))?;
    match fwd.attention {
        Some(maps) => {
            for (i, &m) in maps.iter().enumerate() {
                let v = tape.value(m);
                imgio::write_pgm(&out.join(format!("attention_l{}.pgm", 4usize << i)), &v)?;
            }
            println!("wrote attention maps and disparity images to {}", out.display());
        }
        None => {
            println!(
                "variant {} has no attention maps; wrote disparity images to {}",
                cfg.variant.as_str(),
                out.display()
            );
        }
    }
    Ok(())
}

fn run() -> Result<(), AppError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { config, out, resume } => cmd_train(config, out.as_ref(), resume.as_ref()),
        Command::Eval { config, ckpt, samples } => cmd_eval(config, ckpt, *samples),
        Command::Infer { ckpt, left, right, out, iters } => {
            cmd_infer(ckpt, left, right, out, *iters)
        }
        Command::Gradcheck => cmd_gradcheck(),
        Command::Rf { kernels } => cmd_rf(kernels),
        Command::Viz { ckpt, seed, out } => cmd_viz(ckpt, *seed, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
