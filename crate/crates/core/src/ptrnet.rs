//! Pointer-network policy over UE permutations.
//!
//! Every UE's CSI vector goes through a shared affine embedding, an LSTM
//! encoder reads the embedded sequence, and an LSTM decoder emits one pointer
//! per output position. At decoding step `n` the score of UE `j` is
//! `v . tanh(W1 e_j + W2 d_n)`; already-chosen UEs are masked out before the
//! softmax, so every rollout is a permutation.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::baselines::Solution;
use crate::assignment::Assignment;
use crate::error::{Error, Result};
use crate::netsim::NetworkInstance;
use crate::rates::RadioParams;
use crate::solver::Solver;
use crate::tensorcore::{lstm_step, masked_softmax, LstmWeights, NodeId, ParamRef, ParamSpec, ParameterStore, Tape};

/// Channel gains span many decades, so the network sees `ln(1 + eta*h2)`
/// divided by this constant instead of the raw gains.
pub const FEATURE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtrNetConfig {
    /// CSI vector length, i.e. the number of base stations.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl PtrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("policy dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (k, e, h) = (self.input_dim, self.embed_dim, self.hidden_dim);
        let mut specs = vec![ParamSpec::matrix("embed.weight", e, k), ParamSpec::vector("embed.bias", e)];
        specs.extend(LstmWeights::specs("encoder", e, h));
        specs.extend(LstmWeights::specs("decoder", e, h));
        specs.push(ParamSpec::vector("decoder.sos", e));
        specs.push(ParamSpec::matrix("attention.w1", h, h));
        specs.push(ParamSpec::matrix("attention.w2", h, h));
        specs.push(ParamSpec::vector("attention.v", h));
        specs
    }
}

/// Normalized per-UE input vectors.
pub fn instance_features(instance: &NetworkInstance) -> Vec<Vec<f64>> {
    csi_features(instance, &instance.radio())
}

fn csi_features(instance: &NetworkInstance, radio: &RadioParams) -> Vec<Vec<f64>> {
    let eta = radio.snr();
    (0..instance.num_ues())
        .map(|n| {
            instance
                .csi
                .column(n)
                .into_iter()
                .map(|g| (eta * g).ln_1p() / FEATURE_SCALE)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    embed_w: ParamRef,
    embed_b: ParamRef,
    encoder: LstmWeights,
    decoder: LstmWeights,
    sos: ParamRef,
    w1: ParamRef,
    w2: ParamRef,
    v: ParamRef,
}

#[derive(Debug, Clone)]
pub struct PtrNet {
    config: PtrNetConfig,
    store: ParameterStore,
    layout: Layout,
}

/// Encoder output: hidden states, their attention projections `W1 e_j`, and
/// the final `(hidden, cell)` pair.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Vec<NodeId>,
    pub projected: Vec<NodeId>,
    pub last: (NodeId, NodeId),
}

/// A decoded permutation with its log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub u: Vec<usize>,
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    pub step_probs: Vec<Vec<f64>>,
}

/// Tape of a rollout; its output node is `log p(u|s)`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub tape: Tape,
    pub log_prob: NodeId,
}

pub enum Decode<'a> {
    Sample(&'a mut dyn RngCore),
    Greedy,
    /// Scores a given permutation.
    Forced(&'a [usize]),
}

impl PtrNet {
    /// Zero-initialized network.
    pub fn zeros(config: PtrNetConfig) -> Result<Self> {
        config.validate()?;
        let store = ParameterStore::new(config.param_specs())?;
        let layout = Layout {
            embed_w: store.get("embed.weight")?,
            embed_b: store.get("embed.bias")?,
            encoder: LstmWeights::lookup(&store, "encoder")?,
            decoder: LstmWeights::lookup(&store, "decoder")?,
            sos: store.get("decoder.sos")?,
            w1: store.get("attention.w1")?,
            w2: store.get("attention.w2")?,
            v: store.get("attention.v")?,
        };
        Ok(PtrNet { config, store, layout })
    }

    /// Uniform initialization in `[-1/sqrt(H), 1/sqrt(H)]`.
    pub fn new<R: Rng + ?Sized>(config: PtrNetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        net.store.init_uniform(bound, rng);
        Ok(net)
    }

    pub fn config(&self) -> &PtrNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Shared affine map applied to every input vector.
    pub fn embed(&self, tape: &mut Tape, inputs: &[Vec<f64>]) -> Result<Vec<NodeId>> {
        let bias = tape.param(&self.store, self.layout.embed_b);
        inputs
            .iter()
            .map(|x| {
                if x.len() != self.config.input_dim {
                    return Err(Error::Dimension(format!(
                        "input vector of length {} for a policy expecting {}",
                        x.len(),
                        self.config.input_dim
                    )));
                }
                let xi = tape.input(x.clone());
                let wx = tape.matvec(&self.store, self.layout.embed_w, xi)?;
                tape.add(wx, bias)
            })
            .collect()
    }

    /// Runs the encoder from a zero initial state.
    pub fn encode(&self, tape: &mut Tape, embedded: &[NodeId]) -> Result<Encoded> {
        if embedded.is_empty() {
            return Err(Error::Dimension("cannot encode an empty sequence".into()));
        }
        let h0 = tape.input(vec![0.0; self.config.hidden_dim]);
        let c0 = tape.input(vec![0.0; self.config.hidden_dim]);
        let mut state = (h0, c0);
        let mut states = Vec::with_capacity(embedded.len());
        let mut projected = Vec::with_capacity(embedded.len());
        for &x in embedded {
            state = lstm_step(tape, &self.store, &self.layout.encoder, x, state)?;
            states.push(state.0);
            projected.push(tape.matvec(&self.store, self.layout.w1, state.0)?);
        }
        Ok(Encoded {
            states,
            projected,
            last: state,
        })
    }

    /// One decoder step followed by masked pointing. Returns the logit node,
    /// the probabilities over all UEs, and the new decoder state.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        prev_input: NodeId,
        state: (NodeId, NodeId),
        encoded: &Encoded,
        mask: &[bool],
    ) -> Result<(NodeId, Vec<f64>, (NodeId, NodeId))> {
        let state = lstm_step(tape, &self.store, &self.layout.decoder, prev_input, state)?;
        let query = tape.matvec(&self.store, self.layout.w2, state.0)?;
        let v = tape.param(&self.store, self.layout.v);
        let mut scores = Vec::with_capacity(encoded.projected.len());
        for &key in &encoded.projected {
            let pre = tape.add(key, query)?;
            let act = tape.tanh(pre);
            scores.push(tape.dot(v, act)?);
        }
        let logits = tape.stack(scores)?;
        let probs = masked_softmax(tape.value(logits), mask)?;
        Ok((logits, probs, state))
    }

    /// Decodes a full permutation of the given input vectors.
    pub fn rollout(&self, inputs: &[Vec<f64>], mut mode: Decode<'_>) -> Result<(Rollout, Trace)> {
        let n = inputs.len();
        if let Decode::Forced(u) = &mode {
            if u.len() != n {
                return Err(Error::Dimension(format!("forced sequence of {} for {n} inputs", u.len())));
            }
        }
        let mut tape = Tape::new();
        let embedded = self.embed(&mut tape, inputs)?;
        let encoded = self.encode(&mut tape, &embedded)?;
        let mut state = encoded.last;
        let mut prev = tape.param(&self.store, self.layout.sos);
        let mut mask = vec![true; n];
        let mut u = Vec::with_capacity(n);
        let mut step_nodes = Vec::with_capacity(n);
        let mut step_log_probs = Vec::with_capacity(n);
        let mut step_probs = Vec::with_capacity(n);
        for step in 0..n {
            let (logits, probs, next) = self.decode_step(&mut tape, prev, state, &encoded, &mask)?;
            let choice = match &mut mode {
                Decode::Greedy => argmax(&probs),
                Decode::Sample(rng) => sample_index(&probs, &mask, &mut **rng),
                Decode::Forced(seq) => {
                    let j = seq[step];
                    if j >= n || !mask[j] {
                        return Err(Error::Constraint(format!("forced sequence repeats or exceeds index {j}")));
                    }
                    j
                }
            };
            let lp = tape.log_softmax_at(logits, mask.clone(), choice)?;
            step_log_probs.push(tape.scalar(lp));
            step_nodes.push(lp);
            step_probs.push(probs);
            mask[choice] = false;
            u.push(choice);
            prev = embedded[choice];
            state = next;
        }
        let total = tape.sum(step_nodes)?;
        let rollout = Rollout {
            u,
            log_prob: tape.scalar(total),
            step_log_probs,
            step_probs,
        };
        Ok((rollout, Trace { tape, log_prob: total }))
    }

    pub fn rollout_sample(&self, instance: &NetworkInstance, rng: &mut dyn RngCore) -> Result<(Rollout, Trace)> {
        self.rollout(&instance_features(instance), Decode::Sample(rng))
    }

    pub fn rollout_greedy(&self, instance: &NetworkInstance) -> Result<Rollout> {
        Ok(self.rollout(&instance_features(instance), Decode::Greedy)?.0)
    }

    /// Adds `scale * grad log p(u|s)` into `grad`.
    pub fn accumulate_log_prob_grad(&self, trace: &Trace, scale: f64, grad: &mut [f64]) -> Result<()> {
        trace.tape.backward_into(&self.store, trace.log_prob, scale, grad)
    }
}

/// First index of the largest probability.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], mask: &[bool], rng: &mut dyn RngCore) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        acc += p;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

/// Greedy pointer-network decoding as a registry solver.
pub struct PolicySolver {
    pub net: PtrNet,
}

impl Solver for PolicySolver {
    fn name(&self) -> &str {
        "ptrnet"
    }

    fn solve(&self, instance: &NetworkInstance, _rng: &mut dyn RngCore) -> Result<Solution> {
        let rollout = self.net.rollout_greedy(instance)?;
        let assignment = Assignment::from_permutation(rollout.u, instance.config.num_bs(), instance.config.prbs_per_bs)?
            .canonicalize(&instance.csi);
        let phi = assignment.aggregate_rate(&instance.csi, &instance.radio())?;
        Ok(Solution { assignment, phi })
    }
}
