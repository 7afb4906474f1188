use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokenmotion_cli::*;
use tokenmotion_core::checkpoint;
use tokenmotion_core::data::load_dataset;
use tokenmotion_core::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "tokenmotion",
    about = "Camera and human-motion conditioned toy video diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value run configuration; defaults apply to absent keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to data_dir or out_dir from the config)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset
    GenData(Common),
    /// Train and write loss log plus checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample videos from a checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take prompt, camera and pose from these dataset clips
        #[arg(long = "clip")]
        clips: Vec<String>,
        /// Dataset directory for --clip (defaults to data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Camera trajectory file; omitted means a null camera signal
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Skeleton file; omitted means a null pose signal
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Score generated videos against reference clips
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Finite-difference gradient checks at toy sizes
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt one analytic gradient entry per check
        #[arg(long)]
        corrupt: bool,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TM_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            CoreError::Config(format!("TM_THREADS must be a positive integer, got {v:?}"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CoreError::Config(e.to_string()))?;
    }
    Ok(())
}

fn out_or(common: &Common, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            let out = out_or(&c, &cfg.data_dir);
            let clips = gen_data(&cfg, &out)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let out = out_or(&common, &cfg.out_dir);
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let outcome = train(&cfg, &data, &out)?;
            if let Some(last) = outcome.logs.last() {
                println!("{}", last.line());
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Sample {
            common,
            checkpoint: ckpt,
            clips,
            data,
            camera,
            pose,
            prompt,
            name,
        } => {
            let (stored, model) = checkpoint::load(&ckpt)?;
            // Sampling settings come from --config when given, the model from the checkpoint.
            let mut cfg = match &common.config {
                Some(_) => load_config(common.config.as_deref(), common.seed)?,
                None => stored.clone(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if cfg.model != stored.model {
                return Err(CoreError::Checkpoint(
                    "model settings in --config differ from the checkpoint".into(),
                ));
            }
            let out = out_or(&common, &cfg.out_dir);
            let requests = if clips.is_empty() {
                vec![SampleRequest::from_files(
                    &name,
                    &prompt,
                    camera.as_deref(),
                    pose.as_deref(),
                )?]
            } else {
                let dir = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
                let dataset = load_dataset(&dir)?;
                clips
                    .iter()
                    .map(|id| {
                        dataset
                            .iter()
                            .find(|c| &c.id == id)
                            .map(|c| SampleRequest::from_clip(id, c))
                            .ok_or_else(|| {
                                CoreError::Validation(format!("no clip {id} in {}", dir.display()))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            sample(&cfg, &model, &requests, &out)?;
            for r in &requests {
                println!(
                    "wrote {}",
                    out.join(format!("{}.video.ten1", r.name)).display()
                );
            }
        }
        Command::Eval {
            common,
            generated,
            reference,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let outcome = eval(&generated, &reference)?;
            for id in &outcome.unpaired {
                eprintln!("warning: {id} has no reference clip, skipped");
            }
            let out = out_or(&common, &cfg.out_dir);
            write_report(&out, &outcome.report.to_kv())?;
            print!("{}", outcome.report.to_text());
        }
        Command::Gradcheck { common, corrupt } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let results = gradcheck(cfg.seed, corrupt)?;
            for r in &results {
                println!("{}", r.line());
            }
            if results.iter().any(|r| !r.passed()) {
                return Ok(EXIT_GRADCHECK);
            }
        }
    }
    Ok(EXIT_OK)
}

fn write_report(dir: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
}

fn main() -> ExitCode {
    // clap's own exit code for usage errors (2) would read as a runtime failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_VALIDATION as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
