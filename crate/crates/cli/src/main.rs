use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nomaptr::harness::{self, Preset};
use nomaptr::netsim::load_dataset;
use nomaptr::reinforce::{policy_from_checkpoint, train, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use nomaptr::tensorcore::Checkpoint;
use nomaptr::{Error, DEFAULT_EXHAUSTIVE_BUDGET};

#[derive(Parser)]
#[command(name = "nomaptr", version, about = "Multi-cell NOMA pairing and association experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample network instances into an NDJSON dataset.
    Generate {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Defaults to the network seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pointer-network policy, resuming from OUT/checkpoint.json if present.
    Train {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        seed: Option<u64>,
        /// Exhaustive-search budget for the held-out evaluation.
        #[arg(long)]
        budget: Option<u128>,
        /// Output directory for checkpoint.json and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a dataset with a trained policy.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive, random and OMA rates for a dataset.
    Oracle {
        #[command(flatten)]
        table: Table,
    },
    /// All solvers side by side, with the policy's optimality gap.
    Compare {
        #[command(flatten)]
        table: Table,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Scenario {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: five-cell, two-cell, four-cell or scaled.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct Table {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_BUDGET)]
    budget: u128,
    /// Seed of the random-pairing heuristic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Scenario {
    fn load(&self) -> nomaptr::Result<TrainConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => harness::load_config(path),
            (None, Some(name)) => Ok(Preset::from_name(name)?.train_config()),
            (None, None) => Err(Error::Config("either --config or --preset is required".into())),
        }
    }
}

fn load_policy(path: &Path) -> nomaptr::Result<nomaptr::PtrNet> {
    policy_from_checkpoint(&Checkpoint::load(path)?)
}

fn run(command: Command) -> nomaptr::Result<()> {
    match command {
        Command::Generate {
            scenario,
            count,
            seed,
            out,
        } => {
            let config = scenario.load()?;
            let seed = seed.unwrap_or(config.network.seed);
            harness::generate_to(&config.network, count, seed, &out)?;
            println!("wrote {count} instances to {}", out.display());
        }
        Command::Train {
            scenario,
            seed,
            budget,
            out,
        } => {
            let mut config = scenario.load()?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(budget) = budget {
                config.eval_budget = budget;
            }
            let total = config.total_steps();
            let outcome = train(&config, Some(&out), |row| {
                if let Some(phi) = row.eval_median_phi {
                    let gap = row.eval_median_gap.map(|g| format!("{g:.3}%")).unwrap_or_else(|| "n/a".into());
                    println!("step {}/{total}: eval median phi {phi:.4}, median gap {gap}", row.step);
                }
            })?;
            println!(
                "finished at step {}; checkpoint {} and metrics {} in {}",
                outcome.state.step,
                CHECKPOINT_FILE,
                METRICS_FILE,
                out.display()
            );
        }
        Command::Eval { dataset, checkpoint, out } => {
            let instances = load_dataset(&dataset)?;
            let net = load_policy(&checkpoint)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            let phis = harness::eval(&instances, &net, &out, &mut lock)?;
            if let Some(m) = nomaptr::reinforce::median(&phis) {
                writeln!(lock, "median phi {m}").map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        Command::Oracle { table } => {
            let instances = load_dataset(&table.dataset)?;
            let rows = harness::compare(&instances, None, table.budget, table.seed)?;
            harness::write_oracle_csv(&rows, &table.out)?;
            println!("wrote {} rows to {}", rows.len(), table.out.display());
        }
        Command::Compare { table, checkpoint } => {
            let instances = load_dataset(&table.dataset)?;
            let net = load_policy(&checkpoint)?;
            let rows = harness::compare(&instances, Some(&net), table.budget, table.seed)?;
            harness::write_compare_csv(&rows, &table.out)?;
            println!("wrote {} rows to {}", rows.len(), table.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 3 } else { 2 })
        }
    }
}
