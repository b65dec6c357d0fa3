use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use pragma_mcts::harness::{
    dump_space, emit_best_depth, emit_cutoff_counts, emit_trajectory, read_log, run_experiment, ExperimentConfig,
    LabeledLog, Method,
};
use pragma_mcts::loop_model::load_loop_nest;
use pragma_mcts::space::SpaceParams;

/// Tree-search autotuner for loop-transformation pragmas.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write its result log.
    Tune {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured method.
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot-ready tables computed from result logs.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
        /// JSONL result logs; each becomes one labeled series.
        #[arg(long = "log", required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// Top fraction for the cutoff report.
        #[arg(long, default_value_t = 0.05)]
        top: f64,
    },
    /// Inspect the search space of a loop nest.
    Space {
        #[command(subcommand)]
        command: SpaceCommand,
    },
}

#[derive(Subcommand)]
enum SpaceCommand {
    /// Node counts per depth and the root's children.
    Dump {
        /// Loop nest description (TOML).
        #[arg(long)]
        nest: PathBuf,
        /// Deepest level to enumerate.
        #[arg(long, default_value_t = 2)]
        max_depth: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ReportKind {
    Trajectory,
    Cutoff,
    BestDepth,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRAGMA_MCTS_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Tune { config, method, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = std::env::current_dir()?.join(dir);
            }
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Report { kind, logs, top } => {
            let logs = logs
                .iter()
                .map(|p| {
                    let records = read_log(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(LabeledLog {
                        label: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                        records,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let text = match kind {
                ReportKind::Trajectory => logs
                    .iter()
                    .map(|l| emit_trajectory(&l.records))
                    .collect::<Vec<_>>()
                    .join("\n"),
                ReportKind::Cutoff => emit_cutoff_counts(&logs, top),
                ReportKind::BestDepth => emit_best_depth(&logs),
            };
            print!("{text}");
        }
        Command::Space {
            command: SpaceCommand::Dump { nest, max_depth },
        } => {
            let text = std::fs::read_to_string(&nest).with_context(|| format!("reading {}", nest.display()))?;
            let nest = load_loop_nest(&text)?;
            print!("{}", dump_space(&nest, &SpaceParams::default(), max_depth)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["pragma-mcts", "tune", "--config", "a.toml", "--method", "gg", "--seed", "3"]).unwrap();
        assert!(matches!(cli.command, Command::Tune { method: Some(Method::Gg), seed: Some(3), .. }));
        assert!(Cli::try_parse_from(["pragma-mcts", "tune", "--config", "a.toml", "--method", "dfs"]).is_err());
        let cli = Cli::try_parse_from(["pragma-mcts", "report", "best-depth", "--log", "a", "b"]).unwrap();
        assert!(matches!(cli.command, Command::Report { ref logs, .. } if logs.len() == 2));
    }
}
