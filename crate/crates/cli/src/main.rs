//! `haaf` command-line harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use haaf_cli::commands::{self, SweepParam};
use haaf_cli::config::RunConfig;
use haaf_core::Error;

#[derive(Parser)]
#[command(name = "haaf", version, about = "Few-shot anomaly detection experiments")]
struct Cli {
    /// Configuration file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets the episode, model and shuffling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set clsa.strategy=t2v`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the corpus manifest and optionally per-image feature bundles.
    Synth {
        #[arg(long)]
        emit_features: bool,
    },
    /// Trains one model per episode; writes checkpoints and loss traces.
    Train,
    /// Scores every episode's queries with its trained checkpoint.
    Eval {
        /// Directory holding `checkpoints/` from a train run; defaults to the
        /// output directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Component and stage ablation grids.
    Ablate {
        /// Full factorial grid instead of the component and stage rows.
        #[arg(long)]
        full: bool,
    },
    /// Sensitivity sweep over `lambda` or `beta`.
    Sweep {
        #[arg(long)]
        param: SweepParam,
    },
    /// Finite-difference check of every operation and parameter group.
    Gradcheck {
        /// Corrupts one backward rule; the report must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { emit_features } => {
            let s = commands::synth(&cfg, *emit_features)?;
            println!("manifest {} ({} samples)", s.manifest.display(), s.samples);
            if *emit_features {
                println!("{} feature bundles", s.bundles.len());
            }
        }
        Command::Train => {
            for t in commands::train(&cfg)? {
                println!(
                    "episode {} loss {:.6} -> {:.6} sha256 {}",
                    t.episode_seed, t.initial_loss, t.final_loss, t.checksum
                );
            }
        }
        Command::Eval { checkpoints } => {
            let from = checkpoints.clone().unwrap_or_else(|| cfg.out.clone());
            let scored = commands::eval(&cfg, &from)?;
            for s in &scored {
                let m = &s.metrics;
                println!(
                    "episode {} auc {:.4} ap {:.4} f1 {:.4} acc {:.4}",
                    s.report.seed, m.auc, m.ap, m.f1, m.acc
                );
            }
            let auc = commands::mean(scored.iter().map(|s| s.metrics.auc));
            println!("mean auc {auc:.4}");
        }
        Command::Ablate { full } => {
            for r in commands::ablate(&cfg, *full)? {
                println!("{:<10} {:<40} auc {:.4} ap {:.4}", r.row.table, r.row.label, r.mean_auc(), r.mean_ap());
            }
        }
        Command::Sweep { param } => {
            for p in commands::sweep(&cfg, *param)? {
                println!("{:<5} auc {:.4} ap {:.4}", p.value, p.mean_auc(), p.mean_ap());
            }
        }
        Command::Gradcheck { inject_fault } => {
            let r = commands::gradcheck(&cfg, *inject_fault)?;
            for l in r.ops.iter().chain(&r.params) {
                println!("{:<12} {:<40} {:.3e}", l.group, l.name, l.max_rel_err);
            }
            for (g, e) in r.group_maxima() {
                println!("group {g:<12} max relative error {e:.3e}");
            }
            let ok = r.passed();
            println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(2)
        }
    }
}
