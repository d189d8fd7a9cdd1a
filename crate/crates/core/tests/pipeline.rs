use std::fs;

use nomaptr::harness::{self, Preset};
use nomaptr::reinforce::{self, policy_from_checkpoint, to_checkpoint, TrainingState};
use nomaptr::tensorcore::Checkpoint;
use nomaptr::{PtrNet, PtrNetConfig};

fn tiny_config() -> nomaptr::TrainConfig {
    let mut config = Preset::Scaled.train_config();
    config.episodes = 3;
    config.steps_per_episode = 4;
    config.batch_size = 6;
    config.eval_instances = 8;
    config.eval_every = 3;
    config.policy.embed_dim = 6;
    config.policy.hidden_dim = 5;
    config
}

#[test]
fn untrained_uniform_policy_matches_the_random_heuristic() {
    // With all weights zero every UE gets the same score, so greedy decoding
    // keeps the input order, which for exchangeable UEs is a uniformly random
    // pairing.
    let network = Preset::TwoCell.network();
    let config = PtrNetConfig {
        input_dim: network.num_bs(),
        embed_dim: 4,
        hidden_dim: 4,
    };
    let net = PtrNet::zeros(config).unwrap();
    let train = tiny_config();
    let state = TrainingState::new(net.store().len(), 1e-3, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("uniform.json");
    to_checkpoint(&train, &net, &state).save(&path).unwrap();
    let net = policy_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();

    let instances = harness::generate(&network, 1500, 21).unwrap();
    let rows = harness::compare(&instances, Some(&net), 0, 4).unwrap();
    let diffs: Vec<f64> = rows.iter().map(|r| r.phi_ptrnet.unwrap() - r.phi_random).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = mean / (var / n).sqrt();
    assert!(z.abs() < 4.0, "paired z = {z}");
}

#[test]
fn oracle_dominates_every_other_solver() {
    let network = Preset::TwoCell.network();
    let instances = harness::generate(&network, 40, 2).unwrap();
    let config = tiny_config();
    let net = PtrNet::new(
        PtrNetConfig {
            input_dim: 2,
            embed_dim: 6,
            hidden_dim: 5,
        },
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1),
    )
    .unwrap();
    let rows = harness::compare(&instances, Some(&net), config.eval_budget, 0).unwrap();
    for r in rows {
        let opt = r.phi_exhaustive.unwrap();
        assert!(opt >= r.phi_ptrnet.unwrap() && opt >= r.phi_random && opt >= r.phi_oma, "{r:?}");
        assert!(r.gap_percent().unwrap() >= 0.0);
    }
}

#[test]
fn one_step_run_makes_one_update() {
    let mut config = tiny_config();
    config.episodes = 1;
    config.steps_per_episode = 1;
    let initial = reinforce::initial_policy(&config).unwrap();
    let outcome = reinforce::train(&config, None, |_| {}).unwrap();
    assert_eq!(outcome.state.step, 1);
    assert_eq!(outcome.state.adam.t, 1);
    assert_ne!(outcome.policy.store().flat(), initial.store().flat());
    let steps: Vec<u64> = outcome.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 1]);
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let full = tiny_config();
    let straight = reinforce::train(&full, Some(&dir.path().join("straight")), |_| {}).unwrap();

    let resumed_dir = dir.path().join("resumed");
    let mut first = full.clone();
    first.episodes = 1;
    reinforce::train(&first, Some(&resumed_dir), |_| {}).unwrap();
    let mut seen = Vec::new();
    let resumed = reinforce::train(&full, Some(&resumed_dir), |row| seen.push(row.step)).unwrap();

    assert_eq!(seen.first(), Some(&(full.steps_per_episode + 1)));
    assert_eq!(resumed.metrics, straight.metrics);
    assert_eq!(resumed.policy.store().flat(), straight.policy.store().flat());
    assert_eq!(
        fs::read(dir.path().join("straight/metrics.csv")).unwrap(),
        fs::read(resumed_dir.join("metrics.csv")).unwrap()
    );
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    reinforce::train(&config, Some(dir.path()), |_| {}).unwrap();
    let mut other = config.clone();
    other.learning_rate = 5e-4;
    let err = reinforce::train(&other, Some(dir.path()), |_| {}).err().unwrap();
    assert!(matches!(err, nomaptr::Error::HashMismatch { .. }), "{err}");
}
