//! `colorizer` command line: dataset synthesis, stage training, colorization
//! and evaluation. Flags override values from the optional JSON config, and
//! the effective config is written next to every output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use colorizer_core::pipeline::{colorize_stage, evaluate_stage, synth_stage, train_stage, RunConfig, Stage};
use colorizer_core::Error;

const SEED_ENV: &str = "COLORIZER_SEED";

#[derive(Debug, Parser)]
#[command(name = "colorizer", version, about = "Latent-diffusion image colorization")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic shapes dataset with masks and annotations.
    SynthData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one stage and writes its checkpoint and loss log.
    Train {
        stage: StageArg,
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Colorizes a grayscale (or color) PNG or a directory of PNGs.
    Colorize {
        input: PathBuf,
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Fraction of the trajectory that uses segmentation guidance.
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Guidance scale for the grayscale condition (1 = unguided).
        #[arg(long)]
        gray_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_seg_guidance: bool,
        /// Replaces the output lightness with the input lightness.
        #[arg(long)]
        lock_luminance: bool,
    },
    /// Computes colorfulness, PSNR and optionally Fréchet distance.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frechet: bool,
    },
}

#[derive(Debug, Args)]
struct PathArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Vae,
    Decoder,
    Cdm,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Vae => Stage::Vae,
            StageArg::Decoder => Stage::Decoder,
            StageArg::Cdm => Stage::Cdm,
        }
    }
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) -> Result<(), Failure> {
    if let Some(seed) = seed.or(env_seed()?) {
        cfg.seed = seed;
        cfg.vae_train.seed = seed;
        cfg.decoder_train.seed = seed;
        cfg.cdm_train.seed = seed;
    }
    Ok(())
}

fn apply_paths(cfg: &mut RunConfig, paths: PathArgs) {
    if let Some(d) = paths.data {
        cfg.data_dir = d;
    }
    if let Some(c) = paths.checkpoints {
        cfg.checkpoint_dir = c;
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::SynthData { seed, n, out } => {
            if n == 0 {
                return Err(Failure::Usage("--n must be at least 1".into()));
            }
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let samples = synth_stage(seed, n, &out)?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { stage, paths, seed } => {
            let mut cfg = base_config(config)?;
            apply_paths(&mut cfg, paths);
            apply_seed(&mut cfg, seed)?;
            let log = train_stage(&cfg, stage.into())?;
            if let Some(last) = log.last() {
                log::info!("{} steps, final loss {:.6}", log.len(), last.loss);
            }
        }
        Command::Colorize {
            input,
            paths,
            output,
            strength,
            cfg_scale,
            gray_scale,
            steps,
            eta,
            seed,
            no_seg_guidance,
            lock_luminance,
        } => {
            let mut cfg = base_config(config)?;
            apply_paths(&mut cfg, paths);
            apply_seed(&mut cfg, seed)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if let Some(s) = strength {
                cfg.guidance.strength = s;
            }
            if let Some(w) = cfg_scale {
                cfg.guidance.cfg_scale = w;
            }
            if let Some(s) = gray_scale {
                cfg.guidance.gray_scale = s;
            }
            if let Some(s) = steps {
                cfg.guidance.steps = s;
            }
            if let Some(e) = eta {
                cfg.eta = e;
            }
            cfg.seg_guidance &= !no_seg_guidance;
            cfg.luminance_lock |= lock_luminance;
            for path in colorize_stage(&cfg, &input)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { pred, reference, out, frechet } => {
            let report = evaluate_stage(&pred, &reference, &out, frechet)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::InvalidArgument(_) | Error::Json(_) => 1,
                Error::MissingPrerequisite(_) => 2,
                _ => 3,
            })
        }
    }
}
