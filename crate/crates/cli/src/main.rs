//! `tokflow` command-line interface.

mod plot;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use tokflow::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(name = "tokflow", version, about = "Token + flow-matching sequence models on a synthetic corpus")]
struct Cli {
    /// TOML run config; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Write SVG charts next to the outputs (train, ablate).
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, held-out set and evaluation pairs.
    MakeData,
    /// Train the configured model.
    Train {
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Continue held-out prompts with the trained model.
    Generate,
    /// Score the trained model and its continuations.
    Eval {
        /// Score held-out suffixes instead of generated continuations.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate,
    /// Print the resolved config.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Eval { ground_truth: true } = cli.command {
        cfg.eval.ground_truth = true;
    }
    Ok(cfg.resolve()?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::MakeData => {
            let m = pipeline::cmd_make_data(&cfg)?;
            for (k, v) in &m.counts {
                println!("{k}: {v}");
            }
            println!("held-out grammar perplexity: {:.4}", m.heldout_perplexity);
        }
        Command::Train { resume } => {
            let log = pipeline::cmd_train(&cfg, resume)?;
            if let Some(last) = log.last() {
                println!(
                    "step {}: sem {:.4} cfm {:.4} total {:.4}",
                    last.step, last.sem_loss, last.cfm_loss, last.total
                );
            }
            if cli.plot {
                let dir = cfg.dir("train");
                let records = pipeline::read_metrics(&dir.join("metrics.jsonl"))?;
                let path = dir.join("loss.svg");
                plot::loss_curves(&records, &path)?;
                info!("wrote {}", path.display());
            }
        }
        Command::Generate => {
            let s = pipeline::cmd_generate(&cfg)?;
            println!(
                "{} continuations, {} frames, {} flow-field evaluations",
                s.records.len(),
                s.frames,
                s.cfm_evals
            );
        }
        Command::Eval { .. } => {
            let r = pipeline::cmd_eval(&cfg)?;
            for (k, v) in &r.metrics {
                println!("{k:<26} {v:>10.4}  (n = {})", r.counts[k]);
            }
        }
        Command::Ablate => {
            let t = pipeline::cmd_ablate(&cfg)?;
            print!("{}", tokflow::train::format_table(&t.rows));
            if cli.plot {
                let path = cfg.dir("ablate").join("ablation.svg");
                plot::ablation_bars(&t.rows, &path)?;
                info!("wrote {}", path.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}
