use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lendgov::checkpoint::Checkpoint;
use lendgov::harness::{self, HarnessError, LogRow, RunLogWriter, TrainRunConfig};
use lendgov::plot::{self, PlotKind};

/// Lending market simulator with a Q-learning collateral factor governor.
///
/// Run configuration is a TOML file with top-level run keys and the tables
/// [protocol], [market], [behavior] and [agent] (see configs/default.toml).
/// Unknown keys are rejected. Exit codes: 0 success, 2 usage or
/// configuration error, 3 numerical abort during training.
#[derive(Parser, Debug)]
#[command(name = "lendgov", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent; writes run.csv, summary.json, timing.json, final.ckpt
    /// and periodic checkpoints under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Overrides attacks_enabled in the config file.
        #[arg(long, value_enum)]
        attacks: Option<Switch>,
    },
    /// Evaluate a checkpoint against the fixed collateral factor benchmark on
    /// held-out seeds; writes eval.csv, eval_log.csv and eval_summary.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        attacks: Option<Switch>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Run the fixed collateral factor policy alone on held-out seeds;
    /// writes bench_log.csv and bench_summary.json.
    Bench {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        attacks: Option<Switch>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Re-simulate one logged episode from its seed and actions, check it
    /// against the log and print a per-step table (or write it with --out).
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        episode: usize,
        /// Run name inside the log (train, agent or benchmark).
        #[arg(long, default_value = "train")]
        run: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        attacks: Option<Switch>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures from a run or evaluation log. Kinds: prices, pool,
    /// training, netpos. Without --kind every kind the log supports is drawn.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        kind: Option<String>,
        /// Output directory; files are named <kind>.svg.
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long)]
        episode: Option<usize>,
        #[arg(long)]
        run: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::NumericalAbort { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<lendgov::checkpoint::CheckpointError> for Failure {
    fn from(e: lendgov::checkpoint::CheckpointError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<plot::PlotError> for Failure {
    fn from(e: plot::PlotError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    attacks: Option<Switch>,
) -> Result<TrainRunConfig, Failure> {
    let mut config = match path {
        Some(p) => TrainRunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => TrainRunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(a) = attacks {
        config.attacks_enabled = a == Switch::On;
    }
    config.validate()?;
    Ok(config)
}

fn held_out_seeds(config: &mut TrainRunConfig, count: Option<usize>) -> Vec<u64> {
    if let Some(n) = count {
        config.eval_seeds = n;
    }
    config.eval_seed_list()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            attacks,
        } => {
            let config = load_config(Some(&config), seed, attacks)?;
            let outcome = harness::train(&config, Some(&out))?;
            let s = &outcome.summary;
            println!(
                "trained {} episodes: mean score {:.3}, {} bankruptcies, median episode {:.0} ms",
                s.episodes.len(),
                s.mean_score,
                s.bankruptcies,
                outcome.timing.median_ms()
            );
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            seeds,
            config,
            seed,
            attacks,
            out,
        } => {
            let mut config = load_config(config.as_deref(), seed, attacks)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            if let Some(w) = ckpt.config_warning(config.hash()) {
                eprintln!("warning: {w}");
            }
            let network = ckpt.network()?;
            let seeds = held_out_seeds(&mut config, seeds);
            let (_, summary) = harness::evaluate(&config, &network, &seeds, Some(&out))?;
            println!(
                "win rate {:.3} ({}/{}); mean final net position agent {:.3}, benchmark {:.3}",
                summary.win_rate,
                summary.wins,
                summary.seeds,
                summary.mean_agent_final,
                summary.mean_benchmark_final
            );
        }
        Command::Bench {
            seeds,
            config,
            seed,
            attacks,
            out,
        } => {
            let mut config = load_config(config.as_deref(), seed, attacks)?;
            let seeds = held_out_seeds(&mut config, seeds);
            let eps = harness::run_benchmark(&config, &seeds, Some(&out))?;
            let bankrupt = eps.iter().filter(|e| e.bankrupt).count();
            let mean = eps.iter().map(|e| e.final_net_total).sum::<f64>() / eps.len().max(1) as f64;
            println!(
                "benchmark over {} seeds: mean final net position {mean:.3}, {bankrupt} bankruptcies",
                eps.len()
            );
        }
        Command::Replay {
            log,
            episode,
            run,
            config,
            attacks,
            out,
        } => {
            let config = load_config(config.as_deref(), None, attacks)?;
            let rows: Vec<LogRow> = harness::read_run_log(&log)?
                .into_iter()
                .filter(|r| r.run == run && r.episode == episode)
                .collect();
            if rows.is_empty() {
                return Err(Failure::Usage(format!(
                    "{} has no rows for run `{run}`, episode {episode}",
                    log.display()
                )));
            }
            let replayed = harness::replay_episode(&config, &rows)?;
            match out {
                Some(path) => {
                    let mut w = RunLogWriter::create(&path)?;
                    w.write_episode(&run, &replayed)?;
                    w.finish()?;
                    println!("replayed {} steps into {}", replayed.steps.len(), path.display());
                }
                None => {
                    println!("step action price_tkn cf_weth cf_usdc cf_tkn net_total flags");
                    for s in &replayed.steps {
                        let r = &s.record;
                        let f = r.flags;
                        let marks: String = [
                            (f.attack, 'A'),
                            (f.cf_changed, 'C'),
                            (f.liquidated, 'L'),
                            (f.default, 'D'),
                            (f.bankrupt, 'B'),
                        ]
                        .iter()
                        .filter(|(on, _)| *on)
                        .map(|(_, c)| *c)
                        .collect();
                        println!(
                            "{:4} {:6} {:9.4} {:7.2} {:7.2} {:6.2} {:9.3} {marks}",
                            r.step,
                            r.action,
                            r.prices[2],
                            r.collateral_factors[0],
                            r.collateral_factors[1],
                            r.collateral_factors[2],
                            r.net_total
                        );
                    }
                }
            }
        }
        Command::Plot {
            log,
            kind,
            out,
            episode,
            run,
        } => {
            let rows = harness::read_run_log(&log).map_err(|e| Failure::Usage(format!("{}: {e}", log.display())))?;
            let kinds = match kind {
                Some(k) => vec![k.parse::<PlotKind>()?],
                None => {
                    let has = |name: &str| rows.iter().any(|r| r.run == name);
                    PlotKind::ALL
                        .into_iter()
                        .filter(|k| match k {
                            PlotKind::NetPos => has("agent") && has("benchmark"),
                            PlotKind::Training => has("train"),
                            _ => true,
                        })
                        .collect()
                }
            };
            std::fs::create_dir_all(&out)?;
            for k in kinds {
                let path = out.join(format!("{k}.svg"));
                plot::render(k, &rows, run.as_deref(), episode, &path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
