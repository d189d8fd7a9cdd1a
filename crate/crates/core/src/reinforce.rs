//! Batched REINFORCE with an exponential-moving-average baseline and Adam.
//!
//! Each step samples `K_batch` fresh problems, draws one permutation per
//! problem from the policy, moves the baseline toward the batch-mean reward
//! and then ascends `mean((reward - baseline) * grad log p)`. The baseline is
//! updated before the advantages are formed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::score_permutation;
use crate::baselines::{exhaustive_noma, DEFAULT_EXHAUSTIVE_BUDGET};
use crate::error::{Error, Result};
use crate::netsim::{sample_instance, NetworkConfig, NetworkInstance};
use crate::ptrnet::{PtrNet, PtrNetConfig, Trace};
use crate::tensorcore::{AdamState, Checkpoint, ParameterStore};

/// A stochastic policy over permutations of a problem's elements.
pub trait Policy<P> {
    type Trace;

    fn store(&self) -> &ParameterStore;
    fn store_mut(&mut self) -> &mut ParameterStore;

    /// Draws a permutation and keeps whatever is needed for its gradient.
    fn sample(&self, problem: &P, rng: &mut dyn RngCore) -> Result<(Vec<usize>, Self::Trace)>;

    /// Adds `scale * grad log p(u|problem)` into `grad`.
    fn accumulate_grad(&self, trace: &Self::Trace, scale: f64, grad: &mut [f64]) -> Result<()>;
}

/// Problem distribution and reward.
pub trait Task {
    type Problem;

    fn sample_problem(&self, rng: &mut dyn RngCore) -> Result<Self::Problem>;
    fn reward(&self, problem: &Self::Problem, u: &[usize]) -> Result<f64>;
}

impl Policy<NetworkInstance> for PtrNet {
    type Trace = Trace;

    fn store(&self) -> &ParameterStore {
        PtrNet::store(self)
    }

    fn store_mut(&mut self) -> &mut ParameterStore {
        PtrNet::store_mut(self)
    }

    fn sample(&self, problem: &NetworkInstance, rng: &mut dyn RngCore) -> Result<(Vec<usize>, Trace)> {
        let (rollout, trace) = self.rollout_sample(problem, rng)?;
        Ok((rollout.u, trace))
    }

    fn accumulate_grad(&self, trace: &Trace, scale: f64, grad: &mut [f64]) -> Result<()> {
        self.accumulate_log_prob_grad(trace, scale, grad)
    }
}

/// Fresh network instances scored by their aggregate rate.
pub struct NomaTask {
    pub network: NetworkConfig,
}

impl Task for NomaTask {
    type Problem = NetworkInstance;

    fn sample_problem(&self, rng: &mut dyn RngCore) -> Result<NetworkInstance> {
        sample_instance(&self.network, rng)
    }

    fn reward(&self, problem: &NetworkInstance, u: &[usize]) -> Result<f64> {
        score_permutation(u, &problem.csi, &problem.radio(), problem.config.prbs_per_bs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default = "default_steps")]
    pub steps_per_episode: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Moving-average parameter of the baseline.
    #[serde(default = "default_decay")]
    pub baseline_decay: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Held-out instances evaluated with greedy decoding.
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    /// Evaluate every this many steps as well as at the end of every episode.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_budget")]
    pub eval_budget: u128,
    pub network: NetworkConfig,
    #[serde(default)]
    pub policy: PolicyDims,
}

/// Policy sizes; the input dimension follows from the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            embed_dim: 128,
            hidden_dim: 100,
        }
    }
}

fn default_episodes() -> u64 {
    200
}

fn default_steps() -> u64 {
    10_000
}

fn default_batch() -> usize {
    128
}

fn default_decay() -> f64 {
    0.9
}

fn default_lr() -> f64 {
    1e-3
}

fn default_eval_instances() -> usize {
    200
}

fn default_eval_every() -> u64 {
    100
}

fn default_budget() -> u128 {
    DEFAULT_EXHAUSTIVE_BUDGET
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.policy_config().validate()?;
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline_decay must lie in [0, 1), got {}", self.baseline_decay)));
        }
        if self.episodes == 0 || self.steps_per_episode == 0 || self.batch_size == 0 {
            return Err(Error::Config("episodes, steps_per_episode and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PtrNetConfig {
        PtrNetConfig {
            input_dim: self.network.num_bs(),
            embed_dim: self.policy.embed_dim,
            hidden_dim: self.policy.hidden_dim,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.episodes * self.steps_per_episode
    }

    /// Fingerprint of everything that shapes the training trajectory. The
    /// episode count is left out so a finished run can be extended.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&TrainConfig {
            episodes: 0,
            ..self.clone()
        })
        .expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Optimizer, baseline, step counter and random stream.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub adam: AdamState,
    pub baseline: f64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(num_params: usize, learning_rate: f64, seed: u64) -> Self {
        TrainingState {
            adam: AdamState::new(num_params, learning_rate),
            baseline: 0.0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub batch_mean_phi: f64,
    pub baseline: f64,
    pub grad_norm: f64,
}

/// One iteration of the policy-gradient loop.
pub fn train_step<T: Task, P: Policy<T::Problem>>(
    policy: &mut P,
    task: &T,
    state: &mut TrainingState,
    batch_size: usize,
    baseline_decay: f64,
) -> Result<StepMetrics> {
    let problems = (0..batch_size)
        .map(|_| task.sample_problem(&mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(batch_size);
    for problem in &problems {
        samples.push(policy.sample(problem, &mut state.rng)?);
    }
    let mut rewards = Vec::with_capacity(batch_size);
    for (problem, (u, _)) in problems.iter().zip(&samples) {
        let r = task.reward(problem, u)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("reward at step {}", state.step + 1)));
        }
        rewards.push(r);
    }
    let mean = rewards.iter().sum::<f64>() / batch_size as f64;
    state.baseline = baseline_decay * state.baseline + (1.0 - baseline_decay) * mean;

    let mut grad = vec![0.0; policy.store().len()];
    for ((_, trace), r) in samples.iter().zip(&rewards) {
        let advantage = r - state.baseline;
        if advantage != 0.0 {
            policy.accumulate_grad(trace, advantage / batch_size as f64, &mut grad)?;
        }
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    state.adam.ascent_step(policy.store_mut(), &grad)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        batch_mean_phi: mean,
        baseline: state.baseline,
        grad_norm,
    })
}

/// One line of the metrics log. Evaluation columns are filled only on
/// evaluation steps; step 0 holds the untrained evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub batch_mean_phi: Option<f64>,
    pub baseline: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eval_median_phi: Option<f64>,
    pub eval_median_gap: Option<f64>,
}

pub const METRICS_HEADER: [&str; 6] = [
    "step",
    "batch_mean_phi",
    "baseline",
    "grad_norm",
    "eval_median_phi",
    "eval_median_gap",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn record(&self) -> [String; 6] {
        [
            self.step.to_string(),
            cell(self.batch_mean_phi),
            cell(self.baseline),
            cell(self.grad_norm),
            cell(self.eval_median_phi),
            cell(self.eval_median_gap),
        ]
    }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != METRICS_HEADER.len() {
            return Err(parse_err(format!("expected {} fields, found {}", METRICS_HEADER.len(), fields.len())));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err(format!("bad number '{s}'")))
            }
        };
        rows.push(MetricsRow {
            step: fields[0].parse().map_err(|_| parse_err(format!("bad step '{}'", fields[0])))?,
            batch_mean_phi: opt(fields[1])?,
            baseline: opt(fields[2])?,
            grad_norm: opt(fields[3])?,
            eval_median_phi: opt(fields[4])?,
            eval_median_gap: opt(fields[5])?,
        });
    }
    Ok(rows)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// `100 * (optimum - phi) / optimum`, defined as 0 when the optimum is 0.
pub fn gap_percent(optimum: f64, phi: f64) -> f64 {
    if optimum == 0.0 {
        0.0
    } else {
        100.0 * (optimum - phi) / optimum
    }
}

/// Held-out instances with their exhaustive optima (when within budget).
pub struct EvalSet {
    pub instances: Vec<NetworkInstance>,
    pub optima: Vec<Option<f64>>,
}

impl EvalSet {
    pub fn sample(network: &NetworkConfig, count: usize, seed: u64, budget: u128) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EVAL_STREAM);
        let instances = (0..count)
            .map(|_| sample_instance(network, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let optima = instances
            .iter()
            .map(|inst| match exhaustive_noma(inst, budget) {
                Ok(sol) => Ok(Some(sol.phi)),
                Err(Error::Budget { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { instances, optima })
    }

    /// Median greedy aggregate rate and median optimality gap.
    pub fn evaluate(&self, net: &PtrNet) -> Result<(f64, Option<f64>)> {
        let mut phis = Vec::with_capacity(self.instances.len());
        let mut gaps = Vec::new();
        for (inst, opt) in self.instances.iter().zip(&self.optima) {
            let u = net.rollout_greedy(inst)?.u;
            let phi = score_permutation(&u, &inst.csi, &inst.radio(), inst.config.prbs_per_bs)?;
            phis.push(phi);
            if let Some(opt) = opt {
                gaps.push(gap_percent(*opt, phi));
            }
        }
        Ok((median(&phis).unwrap_or(0.0), median(&gaps)))
    }
}

const INIT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Deterministic initial policy for a configuration.
pub fn initial_policy(config: &TrainConfig) -> Result<PtrNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    PtrNet::new(config.policy_config(), &mut rng)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Packs policy and training state into a checkpoint.
pub fn to_checkpoint(config: &TrainConfig, net: &PtrNet, state: &TrainingState) -> Checkpoint {
    let store = net.store();
    let mut arrays = store.to_named_arrays("", store.flat());
    arrays.extend(store.to_named_arrays("adam.m.", &state.adam.m));
    arrays.extend(store.to_named_arrays("adam.v.", &state.adam.v));
    let mut meta = BTreeMap::new();
    meta.insert("config".into(), serde_json::to_string(config).expect("config serializes"));
    meta.insert("policy".into(), serde_json::to_string(net.config()).expect("policy serializes"));
    meta.insert("step".into(), state.step.to_string());
    meta.insert("baseline".into(), state.baseline.to_string());
    meta.insert("adam_t".into(), state.adam.t.to_string());
    meta.insert("learning_rate".into(), state.adam.learning_rate.to_string());
    meta.insert("rng_seed".into(), hex::encode(state.rng.get_seed()));
    meta.insert("rng_stream".into(), state.rng.get_stream().to_string());
    meta.insert("rng_word_pos".into(), state.rng.get_word_pos().to_string());
    Checkpoint {
        config_hash: config.hash(),
        meta,
        arrays,
    }
}

/// Restores only the policy network from a checkpoint.
pub fn policy_from_checkpoint(ckpt: &Checkpoint) -> Result<PtrNet> {
    let policy: PtrNetConfig = ckpt
        .meta
        .get("policy")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| Error::Dimension("checkpoint lacks policy dimensions".into()))?;
    let mut net = PtrNet::zeros(policy)?;
    let flat = net.store().from_named_arrays("", &ckpt.arrays)?;
    net.store_mut().flat_mut().copy_from_slice(&flat);
    Ok(net)
}

/// Restores policy and training state, checking the configuration hash.
pub fn from_checkpoint(config: &TrainConfig, ckpt: &Checkpoint) -> Result<(PtrNet, TrainingState)> {
    let expected = config.hash();
    if ckpt.config_hash != expected {
        return Err(Error::HashMismatch {
            expected,
            found: ckpt.config_hash.clone(),
        });
    }
    let net = policy_from_checkpoint(ckpt)?;
    let mut adam = AdamState::new(net.store().len(), ckpt.meta_value("learning_rate")?);
    adam.m = net.store().from_named_arrays("adam.m.", &ckpt.arrays)?;
    adam.v = net.store().from_named_arrays("adam.v.", &ckpt.arrays)?;
    adam.t = ckpt.meta_value("adam_t")?;
    let seed_hex: String = ckpt.meta_value("rng_seed")?;
    let seed: [u8; 32] = hex::decode(&seed_hex)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Dimension("checkpoint rng_seed is malformed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(ckpt.meta_value("rng_stream")?);
    rng.set_word_pos(ckpt.meta_value("rng_word_pos")?);
    let state = TrainingState {
        adam,
        baseline: ckpt.meta_value("baseline")?,
        step: ckpt.meta_value("step")?,
        rng,
    };
    Ok((net, state))
}

pub struct TrainOutcome {
    pub policy: PtrNet,
    pub state: TrainingState,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the full training loop. With `out_dir`, the latest checkpoint and the
/// metrics log are written after every episode, and an existing checkpoint
/// there is resumed from.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>, mut progress: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let eval = EvalSet::sample(&config.network, config.eval_instances, config.seed, config.eval_budget)?;
    let task = NomaTask {
        network: config.network.clone(),
    };

    let resume = match out_dir {
        Some(dir) if dir.join(CHECKPOINT_FILE).exists() => {
            let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
            let (net, state) = from_checkpoint(config, &ckpt)?;
            let mut metrics = if dir.join(METRICS_FILE).exists() {
                read_metrics(&dir.join(METRICS_FILE))?
            } else {
                Vec::new()
            };
            metrics.retain(|row| row.step <= state.step);
            Some((net, state, metrics))
        }
        _ => None,
    };
    let (mut net, mut state, mut metrics) = match resume {
        Some(r) => r,
        None => {
            let net = initial_policy(config)?;
            let state = TrainingState::new(net.store().len(), config.learning_rate, config.seed);
            let mut metrics = Vec::new();
            if !eval.instances.is_empty() {
                let (phi, gap) = eval.evaluate(&net)?;
                let row = MetricsRow {
                    step: 0,
                    eval_median_phi: Some(phi),
                    eval_median_gap: gap,
                    ..Default::default()
                };
                progress(&row);
                metrics.push(row);
            }
            (net, state, metrics)
        }
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let total = config.total_steps();
    while state.step < total {
        let step = match train_step(&mut net, &task, &mut state, config.batch_size, config.baseline_decay) {
            Ok(m) => m,
            Err(e) => {
                if let Some(dir) = out_dir {
                    to_checkpoint(config, &net, &state).save(&dir.join("checkpoint-diagnostic.json"))?;
                }
                return Err(e);
            }
        };
        let mut row = MetricsRow {
            step: step.step,
            batch_mean_phi: Some(step.batch_mean_phi),
            baseline: Some(step.baseline),
            grad_norm: Some(step.grad_norm),
            ..Default::default()
        };
        // Episode ends are always evaluated; they do not depend on the run length,
        // so an extended run keeps the rows of the shorter one.
        let eval_now = (config.eval_every > 0 && step.step % config.eval_every == 0)
            || step.step % config.steps_per_episode == 0;
        if eval_now && !eval.instances.is_empty() {
            let (phi, gap) = eval.evaluate(&net)?;
            row.eval_median_phi = Some(phi);
            row.eval_median_gap = gap;
        }
        progress(&row);
        metrics.push(row);
        if step.step % config.steps_per_episode == 0 {
            if let Some(dir) = out_dir {
                to_checkpoint(config, &net, &state).save(&dir.join(CHECKPOINT_FILE))?;
                write_metrics(&metrics, &dir.join(METRICS_FILE))?;
            }
        }
    }
    Ok(TrainOutcome {
        policy: net,
        state,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::ParamSpec;
    use rand::Rng;

    /// Two arms: permutation (0, 1) with probability sigmoid(theta), (1, 0)
    /// otherwise.
    struct TwoArm {
        store: ParameterStore,
    }

    impl TwoArm {
        fn new(theta: f64) -> Self {
            let mut store = ParameterStore::new(vec![ParamSpec::vector("logit", 1)]).unwrap();
            store.flat_mut()[0] = theta;
            TwoArm { store }
        }

        fn p_first(&self) -> f64 {
            1.0 / (1.0 + (-self.store.flat()[0]).exp())
        }
    }

    impl Policy<()> for TwoArm {
        type Trace = bool;

        fn store(&self) -> &ParameterStore {
            &self.store
        }

        fn store_mut(&mut self) -> &mut ParameterStore {
            &mut self.store
        }

        fn sample(&self, _: &(), rng: &mut dyn RngCore) -> Result<(Vec<usize>, bool)> {
            let first = rng.random::<f64>() < self.p_first();
            Ok((if first { vec![0, 1] } else { vec![1, 0] }, first))
        }

        fn accumulate_grad(&self, first: &bool, scale: f64, grad: &mut [f64]) -> Result<()> {
            let p = self.p_first();
            grad[0] += scale * if *first { 1.0 - p } else { -p };
            Ok(())
        }
    }

    struct Rewards(f64, f64);

    impl Task for Rewards {
        type Problem = ();

        fn sample_problem(&self, _: &mut dyn RngCore) -> Result<()> {
            Ok(())
        }

        fn reward(&self, _: &(), u: &[usize]) -> Result<f64> {
            Ok(if u[0] == 0 { self.0 } else { self.1 })
        }
    }

    #[test]
    fn baseline_update_formula() {
        let mut policy = TwoArm::new(0.0);
        let mut state = TrainingState::new(1, 1e-3, 0);
        let m = train_step(&mut policy, &Rewards(10.0, 10.0), &mut state, 4, 0.9).unwrap();
        assert!((m.baseline - 1.0).abs() < 1e-12);
        assert_eq!(m.batch_mean_phi, 10.0);
    }

    #[test]
    fn zero_advantage_leaves_parameters() {
        let mut policy = TwoArm::new(0.3);
        let mut state = TrainingState::new(1, 1e-3, 0);
        // decay 0: the baseline equals the batch mean, which equals every reward
        let m = train_step(&mut policy, &Rewards(5.0, 5.0), &mut state, 8, 0.0).unwrap();
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(policy.store.flat()[0], 0.3);
    }

    #[test]
    fn baseline_is_an_exponential_moving_average() {
        let mut policy = TwoArm::new(0.0);
        let mut state = TrainingState::new(1, 1e-3, 0);
        let lambda: f64 = 0.9;
        for k in 1..=30 {
            let m = train_step(&mut policy, &Rewards(3.0, 3.0), &mut state, 2, lambda).unwrap();
            let expected = 3.0 * (1.0 - lambda.powi(k));
            assert!((m.baseline - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn toy_policy_learns_the_better_arm() {
        let mut policy = TwoArm::new(0.0);
        let mut state = TrainingState::new(1, 1e-2, 7);
        for _ in 0..2000 {
            train_step(&mut policy, &Rewards(2.0, 1.0), &mut state, 16, 0.9).unwrap();
        }
        assert!(policy.p_first() > 0.99, "p = {}", policy.p_first());
    }

    #[test]
    fn gradient_estimator_is_unbiased_with_frozen_baseline() {
        // J(theta) = p r0 + (1-p) r1, dJ/dtheta = p(1-p)(r0 - r1).
        let theta = 0.4;
        let (r0, r1, b) = (3.0, 1.0, 1.7);
        let policy = TwoArm::new(theta);
        let p = policy.p_first();
        let exact = p * (1.0 - p) * (r0 - r1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let (u, first) = policy.sample(&(), &mut rng).unwrap();
            let r = if u[0] == 0 { r0 } else { r1 };
            let mut g = [0.0];
            policy.accumulate_grad(&first, r - b, &mut g).unwrap();
            sum += g[0];
            sum_sq += g[0] * g[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let sigma = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * sigma, "mean {mean} exact {exact} sigma {sigma}");
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            MetricsRow {
                step: 0,
                eval_median_phi: Some(12.5),
                eval_median_gap: Some(3.25),
                ..Default::default()
            },
            MetricsRow {
                step: 1,
                batch_mean_phi: Some(0.1 + 0.2),
                baseline: Some(1e-17),
                grad_norm: Some(2.0),
                ..Default::default()
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,batch_mean_phi,baseline,grad_norm,eval_median_phi,eval_median_gap\n"));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn median_and_gap() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(gap_percent(0.0, 0.0), 0.0);
        assert_eq!(gap_percent(10.0, 9.0), 10.0);
    }
}
