use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};
use stitchlab_core::config::RunConfig;
use stitchlab_core::pipeline;
use stitchlab_core::Error;

/// Reference-guided component compositing on a toy inspection benchmark.
#[derive(Parser, Debug)]
#[command(name = "stitchlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders the synthetic train/test scenes and reference views.
    MakeDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model and writes a checkpoint directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composites a referenced component into a background.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Directory of numbered reference views (0.png, 1.png, ...).
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on the test split and writes a JSON report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains and scores the five cumulative component settings into a CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STITCHLAB_LOG", "info"))
        .format(|buf, record| {
            let line = json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let (cfg, missing) = RunConfig::load(path)?;
            for key in missing {
                info!("config key {key} missing, default applied");
            }
            cfg
        }
        None => {
            info!("no config given, all defaults applied");
            RunConfig::default()
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cmd: Command) -> Result<Value, Error> {
    match cmd {
        Command::MakeDataset { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let manifest = pipeline::make_dataset(&cfg, &out)?;
            Ok(json!({ "manifest": path_str(&manifest) }))
        }
        Command::Train { cfg, dataset, out } => {
            let cfg = load_config(&cfg)?;
            let s = pipeline::train(&cfg, &dataset, &out)?;
            Ok(json!({
                "checkpoint": path_str(&out),
                "steps": s.steps,
                "first_window_loss": s.first_window_loss,
                "last_window_loss": s.last_window_loss,
                "final_loss": s.final_loss,
            }))
        }
        Command::Generate {
            checkpoint,
            background,
            mask,
            refs,
            seed,
            out,
        } => {
            let p = pipeline::generate(&checkpoint, &background, &mask, &refs, seed, &out)?;
            Ok(json!({ "image": path_str(&p) }))
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
        } => {
            let r = pipeline::evaluate(&checkpoint, &dataset, &out)?;
            let mut v = json!({ "report": path_str(&out), "aggregate": r.aggregate });
            if let Some(d) = r.downstream {
                v["downstream_accuracy"] = json!(d.classifier.accuracy);
            }
            Ok(v)
        }
        Command::Ablate { cfg, dataset, out } => {
            let cfg = load_config(&cfg)?;
            let rows = pipeline::ablate(&cfg, &dataset, &out)?;
            Ok(json!({ "table": path_str(&out), "rows": rows.len() }))
        }
    }
}

fn error_line(kind: &str, message: String, details: Option<&[String]>) -> String {
    let mut v = json!({ "error": kind, "message": message });
    if let Some(d) = details {
        v["details"] = json!(d);
    }
    v.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first.to_string(), None));
            return ExitCode::from(2);
        }
    };
    init_logging();
    match run(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let details = match &e {
                Error::Config(list) => Some(list.as_slice()),
                _ => None,
            };
            eprintln!("{}", error_line(e.kind(), e.to_string(), details));
            ExitCode::FAILURE
        }
    }
}
