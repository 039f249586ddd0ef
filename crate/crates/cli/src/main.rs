use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transvg_cli::commands::{self, CONFIG_FILE};
use transvg_cli::CliError;

#[derive(Parser)]
#[command(name = "transvg", version, about = "Desk-scale visual grounding: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into OUT/train and OUT/val.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train; writes checkpoint, train_log.csv, config.txt and vocab.txt to OUT.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy@0.5 of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict the box for one sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer attention heatmaps of the regression token for one sample.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule and the composite loss.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Check name whose backward rule is deliberately broken.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = commands::load_config(config.as_deref(), seed)?;
            let (train, val) = commands::gen_data(&cfg, &out)?;
            println!("wrote {train} train and {val} val samples to {}", out.display());
        }
        Command::Train {
            config,
            seed,
            out,
            dataset,
            resume,
        } => {
            let config = config.or_else(|| {
                // a resumed run keeps its recorded configuration
                resume.as_ref().map(|r| r.with_file_name(CONFIG_FILE)).filter(|p| p.exists())
            });
            let cfg = commands::load_config(config.as_deref(), seed)?;
            let summary = commands::train(&cfg, dataset.as_deref(), &out, resume.as_deref(), |r| {
                let val = r.val_acc.map(|a| format!(" val_acc {a:.4}")).unwrap_or_default();
                println!(
                    "epoch {:>3} loss {:.4} l1 {:.4} giou {:.4} lr {:e}/{:e}{val}",
                    r.epoch, r.loss, r.l1_term, r.giou_term, r.lr_fusion, r.lr_branch
                );
            })?;
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            config,
        } => {
            let s = commands::eval(&checkpoint, config.as_deref(), &dataset, &out)?;
            println!("accuracy@0.5 {:.4} over {} samples (mean loss {:.4})", s.accuracy, s.samples, s.mean_loss);
        }
        Command::Predict {
            checkpoint,
            dataset,
            sample_id,
            config,
            out,
        } => {
            let p = commands::predict(&checkpoint, config.as_deref(), &dataset, &sample_id)?;
            let text = format!(
                "id {}\nexpression {}\npred {:?}\ngt {:?}\niou {:.4}\n",
                p.sample.id,
                p.sample.expression,
                p.inference.bbox.to_array(),
                p.sample.bbox.to_array(),
                p.iou
            );
            print!("{text}");
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                std::fs::write(out.join("prediction.txt"), text)?;
            }
        }
        Command::AttnDump {
            checkpoint,
            dataset,
            sample_id,
            out,
            config,
        } => {
            for f in commands::attn_dump(&checkpoint, config.as_deref(), &dataset, &sample_id, &out)? {
                println!("{}", f.display());
            }
        }
        Command::GradCheck { seed, corrupt, out } => {
            let report = commands::grad_check(seed.unwrap_or(0), corrupt)?;
            let mut text = String::new();
            for r in &report.results {
                text.push_str(&format!("{r}\n"));
            }
            text.push_str(&format!(
                "{} in {:.1}s\n",
                if report.passed() { "all checks passed" } else { "gradient check FAILED" },
                report.seconds
            ));
            print!("{text}");
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                std::fs::write(out.join("grad_check.txt"), &text)?;
            }
            if !report.passed() {
                return Err(CliError::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
