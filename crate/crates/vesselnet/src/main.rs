//! Thin CLI over the library commands. Exit codes: 0 success, 2 invalid
//! configuration, 3 data errors, 4 numerical aborts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vesselnet::commands;
use vesselnet::config::RunConfig;
use vesselnet::error::{Error, Result};
use vesselnet::model::PoolingMode;

#[derive(Parser)]
#[command(
    name = "vesselnet",
    about = "Vessel-sound classification with a trainable Gabor filterbank frontend",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0 = all cores). Single-threaded runs are
    /// bit-identical to multi-threaded ones.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-scenario dataset.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Clips per (class, scenario) cell.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Feature pooling: attention | max.
        #[arg(long)]
        pooling: Option<String>,
        /// Fuse environmental metadata into the classifier head.
        #[arg(long)]
        ctdsv: Option<bool>,
        /// Comma-separated scenario subset, e.g. S1,S3.
        #[arg(long)]
        scenarios: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        filters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Assert the checkpoint's pooling mode.
        #[arg(long)]
        pooling: Option<String>,
        /// Assert the checkpoint's metadata-fusion setting.
        #[arg(long)]
        ctdsv: Option<bool>,
        #[arg(long)]
        scenarios: Option<String>,
    },
    /// Run the pooling/metadata ablation grid and report median accuracies.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated seeds, e.g. 0,1,2.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export filter-activation analysis CSVs for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scenarios: Option<String>,
    },
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.data.out_dir = Some(common.out.clone());
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn parse_pooling(s: &str) -> Result<PoolingMode> {
    PoolingMode::parse(s)
        .ok_or_else(|| Error::Config(format!("unknown pooling mode `{s}` (attention|max)")))
}

fn parse_scenario_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).collect()
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            common,
            clips,
            seed,
            sample_rate,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(c) = clips {
                cfg.synth.clips_per_cell = c;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(sr) = sample_rate {
                cfg.data.sample_rate = sr;
            }
            let summary = commands::cmd_gen(&cfg)?;
            println!(
                "wrote {} manifest rows to {}",
                summary.n_rows,
                summary.manifest.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            manifest,
            pooling,
            ctdsv,
            scenarios,
            epochs,
            seed,
            filters,
            batch,
            lr,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.data.manifest = Some(manifest);
            if let Some(p) = pooling {
                cfg.model.pooling = parse_pooling(&p)?;
            }
            if let Some(c) = ctdsv {
                cfg.model.use_ctdsv = c;
            }
            if let Some(s) = scenarios {
                cfg.train.scenarios = parse_scenario_list(&s);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(k) = filters {
                cfg.frontend.n_filters = k;
            }
            if let Some(b) = batch {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            let summary = commands::cmd_train(&cfg)?;
            println!(
                "trained on {} rows; best val accuracy {:.4}; checkpoint {}",
                summary.train_rows,
                summary.best_val_accuracy,
                summary.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            pooling,
            ctdsv,
            scenarios,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.data.manifest = Some(manifest);
            if let Some(s) = scenarios {
                cfg.train.scenarios = parse_scenario_list(&s);
            }
            let requested = pooling.map(|p| parse_pooling(&p)).transpose()?;
            let (path, metrics) = commands::cmd_eval(&cfg, &checkpoint, requested, ctdsv)?;
            println!(
                "test accuracy {:.4}; metrics at {}",
                metrics.accuracy,
                path.display()
            );
            Ok(())
        }
        Command::Ablate {
            common,
            manifest,
            seeds,
            epochs,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.data.manifest = Some(manifest);
            if let Some(s) = seeds {
                let parsed: std::result::Result<Vec<u64>, _> =
                    s.split(',').map(|x| x.trim().parse::<u64>()).collect();
                cfg.ablate.seeds =
                    parsed.map_err(|e| Error::Config(format!("bad seed list: {e}")))?;
            }
            if let Some(e) = epochs {
                cfg.ablate.epochs = Some(e);
            }
            let (path, rows) = commands::cmd_ablate(&cfg)?;
            for row in rows {
                println!(
                    "{} pooling={} ctdsv={} median accuracy {:.4}",
                    row.subset,
                    row.pooling.name(),
                    row.use_ctdsv,
                    row.median_accuracy
                );
            }
            println!("grid written to {}", path.display());
            Ok(())
        }
        Command::Analyze {
            common,
            checkpoint,
            manifest,
            scenarios,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.data.manifest = Some(manifest);
            if let Some(s) = scenarios {
                cfg.train.scenarios = parse_scenario_list(&s);
            }
            let files = commands::cmd_analyze(&cfg, &checkpoint)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
