use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use topdenoise::config::{load_config, Overrides, RunConfig};
use topdenoise::stages::{self, DirLock};
use topdenoise::CliError;

/// Face point cloud denoising and recognition toolkit.
#[derive(Parser)]
#[command(name = "topdenoise", version, about)]
struct Cli {
    /// Config file (JSON). Defaults come from TOPDENOISE_CONFIG or built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Write a noisy copy of the dataset.
    Noise {
        #[command(flatten)]
        overrides: Overrides,
        /// Gaussian noise variance to apply.
        #[arg(long)]
        variance: f64,
        /// Destination directory (default: <dataset_dir>_noisy).
        #[arg(long)]
        out_data: Option<PathBuf>,
    },
    /// Train one pipeline stage.
    Train {
        #[arg(value_enum)]
        stage: TrainStage,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Denoise a single XYZ file.
    Denoise {
        #[command(flatten)]
        overrides: Overrides,
        /// Input XYZ file.
        #[arg(long)]
        input: PathBuf,
        /// Output XYZ file.
        #[arg(long)]
        output: PathBuf,
        /// Also write the input's three plane projections as PGM images.
        #[arg(long)]
        dump_planes: bool,
    },
    /// Evaluate noisy vs denoised metrics on the test split.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare full, VAD-only, and RFD-only discriminator variants.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum TrainStage {
    Recognizer,
    Denoiser,
    Finetune,
}

fn resolve(config: Option<&PathBuf>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(config.map(|p| p.as_path()))?;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { overrides, force } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            let lock_name = format!(
                "{}.lock",
                cfg.dataset_dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into())
            );
            let lock_path = match cfg.dataset_dir.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.join(lock_name),
                _ => PathBuf::from(lock_name),
            };
            let _lock = DirLock::acquire(lock_path)?;
            let s = stages::stage_synth(&cfg, force)?;
            println!(
                "synth: {} clouds, {} meshes ({} train / {} test) in {}",
                s.clouds,
                s.meshes,
                s.train,
                s.test,
                cfg.dataset_dir.display()
            );
        }
        Command::Noise {
            overrides,
            variance,
            out_data,
        } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            let out = out_data.unwrap_or_else(|| {
                let mut name = cfg
                    .dataset_dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into());
                name.push_str("_noisy");
                match cfg.dataset_dir.parent() {
                    Some(p) if !p.as_os_str().is_empty() => p.join(name),
                    _ => PathBuf::from(name),
                }
            });
            let n = stages::stage_noise(&cfg, variance, &out)?;
            println!(
                "noise: wrote {n} clouds at variance {variance} to {}",
                out.display()
            );
        }
        Command::Train { stage, overrides } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            let _lock = DirLock::acquire(cfg.output_dir.join(".lock"))?;
            match stage {
                TrainStage::Recognizer => {
                    let s = stages::stage_train_recognizer(&cfg)?;
                    println!(
                        "train recognizer: {} epochs, final loss {:.4}, clean train accuracy {:.3}",
                        s.epochs, s.final_train_loss, s.final_train_accuracy
                    );
                }
                TrainStage::Denoiser => {
                    let s = stages::stage_train_denoiser(&cfg)?;
                    match (s.initial_holdout_recon, s.final_holdout_recon) {
                        (Some(a), Some(b)) => println!(
                            "train denoiser: {} pairs, {} epochs, recon {:.4}, holdout {:.4} -> {:.4}",
                            s.pairs, s.epochs, s.final_recon, a, b
                        ),
                        _ => println!(
                            "train denoiser: {} pairs, {} epochs, recon {:.4}",
                            s.pairs, s.epochs, s.final_recon
                        ),
                    }
                }
                TrainStage::Finetune => {
                    let s = stages::stage_finetune(&cfg)?;
                    println!(
                        "finetune: {} epochs, final loss {:.4}, clean train accuracy {:.3}",
                        s.epochs, s.final_train_loss, s.final_train_accuracy
                    );
                }
            }
        }
        Command::Denoise {
            overrides,
            input,
            output,
            dump_planes,
        } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            stages::stage_denoise(&cfg, &input, &output, dump_planes)?;
            println!("denoise: {} -> {}", input.display(), output.display());
        }
        Command::Eval { overrides } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            let _lock = DirLock::acquire(cfg.output_dir.join(".lock"))?;
            let report = stages::stage_eval(&cfg)?;
            print!("{}", report.csv());
            println!(
                "eval: wrote eval_{}.csv and eval_{}.json to {}",
                cfg.setting,
                cfg.setting,
                cfg.output_dir.display()
            );
        }
        Command::Ablate { overrides } => {
            let cfg = resolve(cli.config.as_ref(), &overrides)?;
            let _lock = DirLock::acquire(cfg.output_dir.join(".lock"))?;
            let report = stages::stage_ablate(&cfg)?;
            print!("{}", report.csv());
            println!("ablate: wrote ablation.csv and ablation.json to {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
