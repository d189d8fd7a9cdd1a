//! Experiment orchestration behind the CLI: configuration files, scenario
//! presets, dataset generation and solver comparison tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netsim::{sample_instance, save_dataset, NetworkConfig, NetworkInstance};
use crate::ptrnet::{PolicySolver, PtrNet};
use crate::reinforce::{gap_percent, median, PolicyDims, TrainConfig};
use crate::solver::SolverRegistry;

/// Base-station sites of the five-cell layout, in meters.
pub const SITES: [[f64; 2]; 5] = [[0.0, 0.0], [25.0, 25.0], [25.0, -25.0], [-25.0, 25.0], [-25.0, -25.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Five cells, one PRB each, ten UEs.
    FiveCell,
    /// Sites 2 and 5, two PRBs each, eight UEs.
    TwoCell,
    /// Sites 2 to 5, three PRBs each, 24 UEs.
    FourCell,
    /// Sites 2 and 5, one PRB each, four UEs; 50 training steps.
    Scaled,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::FiveCell, Preset::TwoCell, Preset::FourCell, Preset::Scaled];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FiveCell => "five-cell",
            Preset::TwoCell => "two-cell",
            Preset::FourCell => "four-cell",
            Preset::Scaled => "scaled",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset '{name}'; available: {}", names.join(", ")))
        })
    }

    pub fn network(self) -> NetworkConfig {
        let sites = |idx: &[usize]| idx.iter().map(|&i| SITES[i]).collect::<Vec<_>>();
        match self {
            Preset::FiveCell => NetworkConfig::with_base_stations(SITES.to_vec(), 1),
            Preset::TwoCell => NetworkConfig::with_base_stations(sites(&[1, 4]), 2),
            Preset::FourCell => NetworkConfig::with_base_stations(sites(&[1, 2, 3, 4]), 3),
            Preset::Scaled => NetworkConfig::with_base_stations(sites(&[1, 4]), 1),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        let mut config = TrainConfig {
            episodes: 200,
            steps_per_episode: 10_000,
            batch_size: 128,
            baseline_decay: 0.9,
            learning_rate: 1e-3,
            seed: 0,
            eval_instances: 200,
            eval_every: 1000,
            eval_budget: crate::baselines::DEFAULT_EXHAUSTIVE_BUDGET,
            network: self.network(),
            policy: PolicyDims::default(),
        };
        if self == Preset::Scaled {
            // The four-UE problem is solved within a handful of updates, so the
            // run is short and evaluated after every step.
            config.episodes = 5;
            config.steps_per_episode = 10;
            config.batch_size = 64;
            config.eval_every = 1;
            config.policy = PolicyDims {
                embed_dim: 64,
                hidden_dim: 64,
            };
        }
        config
    }
}

/// Parses a TOML experiment file. Training keys are optional and fall back to
/// the full-scale defaults; the `[network]` table is required.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(config: &TrainConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

/// Samples `count` instances from `network` with a seeded stream.
pub fn generate(network: &NetworkConfig, count: usize, seed: u64) -> Result<Vec<NetworkInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_instance(network, &mut rng)).collect()
}

pub fn generate_to(network: &NetworkConfig, count: usize, seed: u64, out: &Path) -> Result<()> {
    save_dataset(&generate(network, count, seed)?, out)
}

/// Per-instance aggregate rates of every solver.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub instance: usize,
    pub phi_ptrnet: Option<f64>,
    /// `None` when the instance exceeds the exhaustive budget.
    pub phi_exhaustive: Option<f64>,
    pub phi_random: f64,
    pub phi_oma: f64,
}

impl CompareRow {
    pub fn gap_percent(&self) -> Option<f64> {
        Some(gap_percent(self.phi_exhaustive?, self.phi_ptrnet?))
    }
}

pub const ORACLE_HEADER: [&str; 4] = ["instance", "phi_exhaustive", "phi_random", "phi_oma"];
pub const COMPARE_HEADER: [&str; 6] = ["instance", "phi_ptrnet", "phi_exhaustive", "phi_random", "phi_oma", "gap_percent"];
pub const EVAL_HEADER: [&str; 3] = ["instance", "phi_ptrnet", "permutation"];

/// Runs every registered solver on every instance. The random heuristic uses
/// stream `i` of `seed` for instance `i`, so rows do not depend on each other.
pub fn compare(instances: &[NetworkInstance], policy: Option<&PtrNet>, budget: u128, seed: u64) -> Result<Vec<CompareRow>> {
    let mut registry = SolverRegistry::with_baselines(budget);
    if let Some(net) = policy {
        registry.register(Box::new(PolicySolver { net: net.clone() }));
    }
    let mut rows = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut run = |name: &str| -> Result<Option<f64>> {
            if !registry.contains(name) {
                return Ok(None);
            }
            match registry.get(name)?.solve(inst, &mut rng) {
                Ok(sol) => Ok(Some(sol.phi)),
                Err(Error::Budget { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let phi_exhaustive = run("exhaustive")?;
        let phi_random = run("random")?.unwrap_or_default();
        let phi_oma = run("oma")?.unwrap_or_default();
        let phi_ptrnet = run("ptrnet")?;
        rows.push(CompareRow {
            instance: i,
            phi_ptrnet,
            phi_exhaustive,
            phi_random,
            phi_oma,
        });
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn column_median(rows: &[CompareRow], f: impl Fn(&CompareRow) -> Option<f64>) -> Option<f64> {
    median(&rows.iter().filter_map(f).collect::<Vec<_>>())
}

pub fn write_oracle_csv(rows: &[CompareRow], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(ORACLE_HEADER)?;
    for r in rows {
        w.write_record([r.instance.to_string(), cell(r.phi_exhaustive), r.phi_random.to_string(), r.phi_oma.to_string()])?;
    }
    w.write_record([
        "median".to_string(),
        cell(column_median(rows, |r| r.phi_exhaustive)),
        cell(column_median(rows, |r| Some(r.phi_random))),
        cell(column_median(rows, |r| Some(r.phi_oma))),
    ])?;
    w.flush().map_err(|e| Error::io(out, e))
}

/// Comparison table with a trailing row of column medians.
pub fn write_compare_csv(rows: &[CompareRow], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(COMPARE_HEADER)?;
    for r in rows {
        w.write_record([
            r.instance.to_string(),
            cell(r.phi_ptrnet),
            cell(r.phi_exhaustive),
            r.phi_random.to_string(),
            r.phi_oma.to_string(),
            cell(r.gap_percent()),
        ])?;
    }
    w.write_record([
        "median".to_string(),
        cell(column_median(rows, |r| r.phi_ptrnet)),
        cell(column_median(rows, |r| r.phi_exhaustive)),
        cell(column_median(rows, |r| Some(r.phi_random))),
        cell(column_median(rows, |r| Some(r.phi_oma))),
        cell(column_median(rows, CompareRow::gap_percent)),
    ])?;
    w.flush().map_err(|e| Error::io(out, e))
}

/// Greedy policy decoding of every instance: a CSV of rates and permutations
/// plus a human-readable slot report.
pub fn eval(instances: &[NetworkInstance], net: &PtrNet, csv_out: &Path, report: &mut dyn Write) -> Result<Vec<f64>> {
    let solver = PolicySolver { net: net.clone() };
    let mut w = csv::Writer::from_path(csv_out)?;
    w.write_record(EVAL_HEADER)?;
    let mut phis = Vec::with_capacity(instances.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, inst) in instances.iter().enumerate() {
        let sol = crate::solver::Solver::solve(&solver, inst, &mut rng)?;
        let perm: Vec<String> = sol.assignment.permutation().iter().map(usize::to_string).collect();
        w.write_record([i.to_string(), sol.phi.to_string(), perm.join(" ")])?;
        let io = |e| Error::io("slot report", e);
        writeln!(report, "instance {i}: phi={}", sol.phi).map_err(io)?;
        for slot in sol.assignment.slot_reports(&inst.csi, &inst.radio())? {
            writeln!(report, "  {slot}").map_err(io)?;
        }
        phis.push(sol.phi);
    }
    w.flush().map_err(|e| Error::io(csv_out, e))?;
    Ok(phis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_layouts() {
        let five = Preset::FiveCell.network();
        assert_eq!(five.bs_positions, SITES.to_vec());
        assert_eq!(five.num_ues(), 10);
        let two = Preset::TwoCell.network();
        assert_eq!(two.bs_positions, vec![[25.0, 25.0], [-25.0, -25.0]]);
        assert_eq!(two.num_ues(), 8);
        let four = Preset::FourCell.network();
        assert_eq!(four.bs_positions, SITES[1..].to_vec());
        assert_eq!(four.num_ues(), 24);
        let scaled = Preset::Scaled.train_config();
        assert_eq!(scaled.network.num_ues(), 4);
        assert_eq!((scaled.batch_size, scaled.policy.hidden_dim), (64, 64));
        for p in Preset::ALL {
            assert_eq!(Preset::from_name(p.name()).unwrap(), p);
            p.train_config().validate().unwrap();
        }
        assert!(Preset::from_name("six-cell").is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let config = Preset::Scaled.train_config();
        assert_eq!(parse_config(&config_to_toml(&config)).unwrap(), config);
    }

    #[test]
    fn network_only_config_uses_defaults() {
        let text = r#"
[network]
bs_positions = [[25.0, 25.0], [-25.0, -25.0]]
prbs_per_bs = 1
area_half_width = 50.0
pathloss_exponent = 4.0
tx_power = 1.0
noise_variance = 4e-9
"#;
        let config = parse_config(text).unwrap();
        assert_eq!(config.batch_size, 128);
        assert_eq!(config.baseline_decay, 0.9);
        assert_eq!(config.policy, PolicyDims::default());
        assert!(parse_config("[network]\nprbs_per_bs = 1\n").is_err());
        assert!(parse_config(&format!("{text}\nbatch_sise = 3\n")).is_err());
    }

    #[test]
    fn all_surrogate_instances_score_zero() {
        let mut network = Preset::Scaled.network();
        network.active_ues = Some(0);
        let instances = generate(&network, 3, 1).unwrap();
        let net = PtrNet::new(Preset::Scaled.train_config().policy_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for row in compare(&instances, Some(&net), 1000, 0).unwrap() {
            assert_eq!(row.phi_ptrnet, Some(0.0));
            assert_eq!(row.phi_exhaustive, Some(0.0));
            assert_eq!((row.phi_random, row.phi_oma), (0.0, 0.0));
            assert_eq!(row.gap_percent(), Some(0.0));
        }
    }

    #[test]
    fn oversized_instances_leave_the_oracle_cell_empty() {
        let instances = generate(&Preset::TwoCell.network(), 2, 5).unwrap();
        let rows = compare(&instances, None, 10, 0).unwrap();
        assert!(rows.iter().all(|r| r.phi_exhaustive.is_none() && r.phi_random > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_compare_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "instance,phi_ptrnet,phi_exhaustive,phi_random,phi_oma,gap_percent");
        assert!(lines[1].starts_with("0,,,"));
        assert!(lines[3].starts_with("median,,,"));
    }
}
