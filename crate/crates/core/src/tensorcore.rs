//! Small differentiable kernel for the pointer network.
//!
//! Values are vectors of `f64`. A [`Tape`] records every primitive applied
//! during one forward pass; [`Tape::backward`] replays it in reverse and
//! accumulates exact gradients into a flat buffer aligned with a
//! [`ParameterStore`]. Weight matrices are never copied onto the tape: nodes
//! refer to them through [`ParamRef`] and read them from the store.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one named parameter inside the flat store. Matrices are
/// row-major; vectors have `cols == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpec {
    pub fn matrix(name: &str, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            rows,
            cols,
        }
    }

    pub fn vector(name: &str, len: usize) -> Self {
        Self::matrix(name, len, 1)
    }
}

/// Named parameter arrays laid out back to back in one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    specs: Vec<ParamSpec>,
    refs: Vec<ParamRef>,
    values: Vec<f64>,
}

impl ParameterStore {
    pub fn new(specs: Vec<ParamSpec>) -> Result<Self> {
        let mut refs = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (i, spec) in specs.iter().enumerate() {
            if specs[..i].iter().any(|s| s.name == spec.name) {
                return Err(Error::Config(format!("duplicate parameter name '{}'", spec.name)));
            }
            refs.push(ParamRef {
                offset,
                rows: spec.rows,
                cols: spec.cols,
            });
            offset += spec.rows * spec.cols;
        }
        Ok(ParameterStore {
            specs,
            refs,
            values: vec![0.0; offset],
        })
    }

    pub fn get(&self, name: &str) -> Result<ParamRef> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.refs[i])
            .ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn view(&self, r: ParamRef) -> &[f64] {
        &self.values[r.range()]
    }

    pub fn view_mut(&mut self, r: ParamRef) -> &mut [f64] {
        &mut self.values[r.range()]
    }

    /// Parameter name and local index of flat entry `i`.
    pub fn locate(&self, i: usize) -> (&str, usize) {
        let idx = self.refs.partition_point(|r| r.offset + r.len() <= i).min(self.refs.len() - 1);
        (&self.specs[idx].name, i - self.refs[idx].offset)
    }

    /// Uniform initialization in `[-bound, bound]`, in store order.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for v in &mut self.values {
            *v = rng.random_range(-bound..=bound);
        }
    }

    pub fn to_named_arrays(&self, prefix: &str, values: &[f64]) -> Vec<NamedArray> {
        self.specs
            .iter()
            .zip(&self.refs)
            .map(|(spec, r)| NamedArray {
                name: format!("{prefix}{}", spec.name),
                shape: [spec.rows, spec.cols],
                values: values[r.range()].to_vec(),
            })
            .collect()
    }

    /// Gathers arrays named `prefix + name` into a flat buffer in store order.
    pub fn from_named_arrays(&self, prefix: &str, arrays: &[NamedArray]) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; self.len()];
        for (spec, r) in self.specs.iter().zip(&self.refs) {
            let name = format!("{prefix}{}", spec.name);
            let array = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Dimension(format!("checkpoint lacks array '{name}'")))?;
            if array.shape != [spec.rows, spec.cols] || array.values.len() != r.len() {
                return Err(Error::Dimension(format!(
                    "array '{name}' has shape {:?}, expected [{}, {}]",
                    array.shape, spec.rows, spec.cols
                )));
            }
            flat[r.range()].copy_from_slice(&array.values);
        }
        Ok(flat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Checkpoint file: named arrays plus string-valued metadata, keyed to a
/// configuration hash. JSON numbers round-trip `f64` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Dimension(format!("checkpoint metadata '{key}' is missing or malformed")))
    }
}

/// `W x + b`.
pub fn linear(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: Option<&[f64]>) -> Result<Vec<f64>> {
    if w.len() != rows * cols || x.len() != cols || bias.is_some_and(|b| b.len() != rows) {
        return Err(Error::Dimension(format!(
            "linear map {rows}x{cols} applied to input of length {}",
            x.len()
        )));
    }
    Ok((0..rows)
        .map(|r| {
            let dot = dot(&w[r * cols..(r + 1) * cols], x);
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect())
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax restricted to entries where `mask` is true; masked entries get
/// probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Dimension(format!("{} logits with a mask of {}", logits.len(), mask.len())));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Constraint("mask excludes every element".into()));
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

fn masked_log_sum_exp(logits: &[f64], mask: &[bool]) -> f64 {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| (l - max).exp()).sum();
    max + total.ln()
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamRef),
    MatVec(ParamRef, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Slice(NodeId, usize),
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Sum(Vec<NodeId>),
    LogSoftmaxAt {
        logits: NodeId,
        mask: Vec<bool>,
        index: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (la, lb) = (self.nodes[a].value.len(), self.nodes[b].value.len());
        if la != lb {
            return Err(Error::Dimension(format!("{what} of vectors with lengths {la} and {lb}")));
        }
        Ok(())
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Parameter vector (or flattened matrix) read from the store.
    pub fn param(&mut self, store: &ParameterStore, r: ParamRef) -> NodeId {
        self.push(store.view(r).to_vec(), Op::Param(r))
    }

    pub fn matvec(&mut self, store: &ParameterStore, w: ParamRef, x: NodeId) -> Result<NodeId> {
        let value = linear(store.view(w), w.rows, w.cols, &self.nodes[x].value, None)?;
        Ok(self.push(value, Op::MatVec(w, x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "sum")?;
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "product")?;
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = tanh(&self.nodes[a].value);
        self.push(value, Op::Tanh(a))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.nodes[a].value;
        if start + len > src.len() {
            return Err(Error::Dimension(format!("slice {start}..{} of length {}", start + len, src.len())));
        }
        let value = src[start..start + len].to_vec();
        Ok(self.push(value, Op::Slice(a, start)))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "dot product")?;
        let value = vec![dot(&self.nodes[a].value, &self.nodes[b].value)];
        Ok(self.push(value, Op::Dot(a, b)))
    }

    /// Collects scalar nodes into one vector.
    pub fn stack(&mut self, scalars: Vec<NodeId>) -> Result<NodeId> {
        if scalars.iter().any(|&s| self.nodes[s].value.len() != 1) {
            return Err(Error::Dimension("stack expects scalar nodes".into()));
        }
        let value = scalars.iter().map(|&s| self.nodes[s].value[0]).collect();
        Ok(self.push(value, Op::Stack(scalars)))
    }

    /// Left-to-right sum of scalar nodes.
    pub fn sum(&mut self, scalars: Vec<NodeId>) -> Result<NodeId> {
        if scalars.iter().any(|&s| self.nodes[s].value.len() != 1) {
            return Err(Error::Dimension("sum expects scalar nodes".into()));
        }
        let value = vec![scalars.iter().map(|&s| self.nodes[s].value[0]).sum()];
        Ok(self.push(value, Op::Sum(scalars)))
    }

    /// Log-probability of `index` under the masked softmax of `logits`.
    pub fn log_softmax_at(&mut self, logits: NodeId, mask: Vec<bool>, index: usize) -> Result<NodeId> {
        let l = &self.nodes[logits].value;
        if mask.len() != l.len() || index >= l.len() {
            return Err(Error::Dimension(format!("log-softmax of {} logits at index {index}", l.len())));
        }
        if !mask[index] {
            return Err(Error::Constraint(format!("index {index} is masked")));
        }
        let value = vec![l[index] - masked_log_sum_exp(l, &mask)];
        Ok(self.push(value, Op::LogSoftmaxAt { logits, mask, index }))
    }

    /// Reverse pass from scalar node `output`, adding `seed * d output / d theta`
    /// into `grad` (aligned with the store's flat layout).
    pub fn backward_into(&self, store: &ParameterStore, output: NodeId, seed: f64, grad: &mut [f64]) -> Result<()> {
        if self.nodes.is_empty() || output >= self.nodes.len() {
            return Err(Error::Constraint("backward called without a recorded forward pass".into()));
        }
        if self.nodes[output].value.len() != 1 {
            return Err(Error::Dimension("backward needs a scalar output".into()));
        }
        if grad.len() != store.len() {
            return Err(Error::Dimension(format!("gradient buffer of {} for {} parameters", grad.len(), store.len())));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); output + 1];
        adj[output] = vec![seed];
        for id in (0..=output).rev() {
            let g = std::mem::take(&mut adj[id]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(r) => {
                    for (dst, gi) in grad[r.range()].iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::MatVec(w, x) => {
                    let xv = &self.nodes[*x].value;
                    let wv = store.view(*w);
                    let gw = &mut grad[w.range()];
                    let gx = accum(&mut adj[*x], xv.len());
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &wv[r * w.cols..(r + 1) * w.cols];
                        let grow = &mut gw[r * w.cols..(r + 1) * w.cols];
                        for c in 0..w.cols {
                            grow[c] += gr * xv[c];
                            gx[c] += gr * row[c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(accum(&mut adj[*a], g.len()), &g);
                    add_into(accum(&mut adj[*b], g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    {
                        let ga = accum(&mut adj[*a], g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let gb = accum(&mut adj[*b], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = accum(&mut adj[*a], g.len());
                    for (i, &s) in node.value.iter().enumerate() {
                        ga[i] += g[i] * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let ga = accum(&mut adj[*a], g.len());
                    for (i, &t) in node.value.iter().enumerate() {
                        ga[i] += g[i] * (1.0 - t * t);
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.nodes[*a].value.len();
                    add_into(&mut accum(&mut adj[*a], len)[*start..*start + g.len()], &g);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    {
                        let ga = accum(&mut adj[*a], av.len());
                        for i in 0..av.len() {
                            ga[i] += g[0] * bv[i];
                        }
                    }
                    let gb = accum(&mut adj[*b], bv.len());
                    for i in 0..bv.len() {
                        gb[i] += g[0] * av[i];
                    }
                }
                Op::Stack(parts) => {
                    for (&p, gi) in parts.iter().zip(&g) {
                        accum(&mut adj[p], 1)[0] += gi;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accum(&mut adj[p], 1)[0] += g[0];
                    }
                }
                Op::LogSoftmaxAt { logits, mask, index } => {
                    let lv = &self.nodes[*logits].value;
                    let probs = masked_softmax(lv, mask)?;
                    let gl = accum(&mut adj[*logits], lv.len());
                    for (j, p) in probs.iter().enumerate() {
                        let indicator = if j == *index { 1.0 } else { 0.0 };
                        gl[j] += g[0] * (indicator - p);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of scalar node `output` over the whole store.
    pub fn backward(&self, store: &ParameterStore, output: NodeId) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; store.len()];
        self.backward_into(store, output, 1.0, &mut grad)?;
        Ok(grad)
    }
}

fn accum(slot: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if slot.is_empty() {
        slot.resize(len, 0.0);
    }
    slot
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Weights of one LSTM cell. Gate rows are stacked in the order input,
/// forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: ParamRef,
    pub w_hh: ParamRef,
    pub bias: ParamRef,
}

impl LstmWeights {
    pub fn specs(prefix: &str, input_dim: usize, hidden_dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::matrix(&format!("{prefix}.w_ih"), 4 * hidden_dim, input_dim),
            ParamSpec::matrix(&format!("{prefix}.w_hh"), 4 * hidden_dim, hidden_dim),
            ParamSpec::vector(&format!("{prefix}.bias"), 4 * hidden_dim),
        ]
    }

    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(LstmWeights {
            w_ih: store.get(&format!("{prefix}.w_ih"))?,
            w_hh: store.get(&format!("{prefix}.w_hh"))?,
            bias: store.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.cols
    }
}

/// One LSTM step: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape,
    store: &ParameterStore,
    weights: &LstmWeights,
    x: NodeId,
    state: (NodeId, NodeId),
) -> Result<(NodeId, NodeId)> {
    let hd = weights.hidden_dim();
    let (h, c) = state;
    if tape.value(x).len() != weights.w_ih.cols || tape.value(h).len() != hd || tape.value(c).len() != hd {
        return Err(Error::Dimension(format!(
            "LSTM step with input {} and state ({}, {}) for weights expecting {} and {hd}",
            tape.value(x).len(),
            tape.value(h).len(),
            tape.value(c).len(),
            weights.w_ih.cols
        )));
    }
    let wx = tape.matvec(store, weights.w_ih, x)?;
    let wh = tape.matvec(store, weights.w_hh, h)?;
    let bias = tape.param(store, weights.bias);
    let pre = tape.add(wx, wh)?;
    let pre = tape.add(pre, bias)?;
    let i = tape.slice(pre, 0, hd)?;
    let f = tape.slice(pre, hd, hd)?;
    let g = tape.slice(pre, 2 * hd, hd)?;
    let o = tape.slice(pre, 3 * hd, hd)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Adam with bias correction, applied as an ascent step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Moves `store` along `grad` (maximization).
    pub fn ascent_step(&mut self, store: &mut ParameterStore, grad: &[f64]) -> Result<()> {
        if grad.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Dimension(format!(
                "Adam state of {} and gradient of {} for {} parameters",
                self.m.len(),
                grad.len(),
                store.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let (name, local) = store.locate(i);
            return Err(Error::NonFinite(format!("gradient of {name}[{local}]")));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let params = store.flat_mut();
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(specs: Vec<ParamSpec>, seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new(specs).unwrap();
        s.init_uniform(1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences of `f` over every flat parameter entry.
    fn finite_diff(s: &ParameterStore, f: impl Fn(&ParameterStore) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut probe = s.clone();
        (0..s.len())
            .map(|i| {
                let orig = probe.flat()[i];
                probe.flat_mut()[i] = orig + h;
                let up = f(&probe);
                probe.flat_mut()[i] = orig - h;
                let down = f(&probe);
                probe.flat_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_gradient() {
        let mut s = ParameterStore::new(vec![ParamSpec::vector("theta", 1)]).unwrap();
        s.flat_mut()[0] = 3.0;
        let mut tape = Tape::new();
        let theta = tape.param(&s, s.get("theta").unwrap());
        let sq = tape.mul(theta, theta).unwrap();
        let out = tape.sum(vec![sq]).unwrap();
        assert_eq!(tape.backward(&s, out).unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_without_forward() {
        let s = ParameterStore::new(vec![ParamSpec::vector("a", 1)]).unwrap();
        assert!(Tape::new().backward(&s, 0).is_err());
    }

    #[test]
    fn untouched_parameters_get_zero() {
        let s = store(vec![ParamSpec::vector("a", 2), ParamSpec::vector("b", 2)], 1);
        let mut tape = Tape::new();
        let a = tape.param(&s, s.get("a").unwrap());
        let out = tape.dot(a, a).unwrap();
        let g = tape.backward(&s, out).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn linear_tanh_sum_matches_finite_differences() {
        let s = store(vec![ParamSpec::matrix("w", 3, 4), ParamSpec::vector("b", 3)], 7);
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let forward = |p: &ParameterStore| -> (Tape, NodeId) {
            let mut t = Tape::new();
            let xi = t.input(x.clone());
            let wx = t.matvec(p, p.get("w").unwrap(), xi).unwrap();
            let b = t.param(p, p.get("b").unwrap());
            let z = t.add(wx, b).unwrap();
            let y = t.tanh(z);
            let parts: Vec<NodeId> = (0..3).map(|i| t.slice(y, i, 1).unwrap()).collect();
            let out = t.sum(parts).unwrap();
            (t, out)
        };
        let (tape, out) = forward(&s);
        let analytic = tape.backward(&s, out).unwrap();
        let numeric = finite_diff(&s, |p| {
            let (t, o) = forward(p);
            t.scalar(o)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn log_softmax_gradient() {
        let s = store(vec![ParamSpec::vector("z", 4)], 3);
        let mask = vec![true, false, true, true];
        let forward = |p: &ParameterStore| {
            let mut t = Tape::new();
            let z = t.param(p, p.get("z").unwrap());
            let o = t.log_softmax_at(z, mask.clone(), 2).unwrap();
            (t, o)
        };
        let (tape, out) = forward(&s);
        let analytic = tape.backward(&s, out).unwrap();
        assert_eq!(analytic[1], 0.0);
        let numeric = finite_diff(&s, |p| {
            let (t, o) = forward(p);
            t.scalar(o)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn softmax_examples() {
        let p = masked_softmax(&[0.5; 4], &[true; 4]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = masked_softmax(&[1.0, 1.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[2] - 0.5).abs() < 1e-15);
        let p = masked_softmax(&[1000.0, 0.0], &[true, true]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
    }

    /// Scalar LSTM recomputation, independent of the tape.
    fn lstm_reference(s: &ParameterStore, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w_ih = s.view(s.get("cell.w_ih").unwrap());
        let w_hh = s.view(s.get("cell.w_hh").unwrap());
        let bias = s.view(s.get("cell.bias").unwrap());
        let hd = h.len();
        let gate = |row: usize| -> f64 {
            let mut acc = bias[row];
            for (j, xv) in x.iter().enumerate() {
                acc += w_ih[row * x.len() + j] * xv;
            }
            for (j, hv) in h.iter().enumerate() {
                acc += w_hh[row * hd + j] * hv;
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for r in 0..hd {
            let i = sig(gate(r));
            let f = sig(gate(hd + r));
            let g = gate(2 * hd + r).tanh();
            let o = sig(gate(3 * hd + r));
            c2[r] = f * c[r] + i * g;
            h2[r] = o * c2[r].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_matches_scalar_reference() {
        let s = store(LstmWeights::specs("cell", 3, 5), 11);
        let w = LstmWeights::lookup(&s, "cell").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let (xi, hi, ci) = (tape.input(x.clone()), tape.input(h.clone()), tape.input(c.clone()));
        let (h2, c2) = lstm_step(&mut tape, &s, &w, xi, (hi, ci)).unwrap();
        let (rh, rc) = lstm_reference(&s, &x, &h, &c);
        for (a, b) in tape.value(h2).iter().zip(&rh).chain(tape.value(c2).iter().zip(&rc)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_zero_weights_give_zero_hidden() {
        let s = ParameterStore::new(LstmWeights::specs("cell", 2, 3)).unwrap();
        let w = LstmWeights::lookup(&s, "cell").unwrap();
        let mut tape = Tape::new();
        let x = tape.input(vec![0.0; 2]);
        let h = tape.input(vec![0.0; 3]);
        let c = tape.input(vec![0.0; 3]);
        let (h2, _) = lstm_step(&mut tape, &s, &w, x, (h, c)).unwrap();
        assert_eq!(tape.value(h2), &[0.0; 3]);
        let bad = tape.input(vec![0.0; 5]);
        assert!(lstm_step(&mut tape, &s, &w, bad, (h, c)).is_err());
    }

    #[test]
    fn lstm_open_forget_gate_keeps_cell() {
        let mut s = ParameterStore::new(LstmWeights::specs("cell", 2, 3)).unwrap();
        let w = LstmWeights::lookup(&s, "cell").unwrap();
        // forget bias large, input gate shut
        let bias = s.view_mut(w.bias);
        bias[..3].fill(-40.0);
        bias[3..6].fill(40.0);
        let mut tape = Tape::new();
        let x = tape.input(vec![0.0; 2]);
        let h = tape.input(vec![0.2, -0.1, 0.4]);
        let c = tape.input(vec![0.5, -1.5, 2.0]);
        let (_, c2) = lstm_step(&mut tape, &s, &w, x, (h, c)).unwrap();
        for (a, b) in tape.value(c2).iter().zip(&[0.5, -1.5, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = store(vec![ParamSpec::vector("p", 3)], 2);
        let before = s.flat().to_vec();
        let mut adam = AdamState::new(3, 1e-3);
        adam.ascent_step(&mut s, &[0.0; 3]).unwrap();
        assert_eq!(s.flat(), &before[..]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = ParameterStore::new(vec![ParamSpec::vector("p", 3)]).unwrap();
        let mut adam = AdamState::new(3, 1e-3);
        adam.ascent_step(&mut s, &[2.0, -0.5, 1e-3]).unwrap();
        let expected = [1e-3, -1e-3, 1e-3];
        for (p, e) in s.flat().iter().zip(&expected) {
            assert!((p - e).abs() < 1e-8, "{p} vs {e}");
        }
    }

    #[test]
    fn adam_constant_gradient_step_size() {
        let mut s = ParameterStore::new(vec![ParamSpec::vector("p", 1)]).unwrap();
        let mut adam = AdamState::new(1, 1e-3);
        let mut prev = 0.0;
        for _ in 0..5000 {
            adam.ascent_step(&mut s, &[0.3]).unwrap();
            let step = s.flat()[0] - prev;
            prev = s.flat()[0];
            assert!((step - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut s = ParameterStore::new(vec![ParamSpec::vector("a", 2), ParamSpec::matrix("b", 2, 2)]).unwrap();
        let mut adam = AdamState::new(6, 1e-3);
        let err = adam.ascent_step(&mut s, &[0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("b[1]"), "{err}");
    }

    #[test]
    fn store_rejects_duplicates_and_locates() {
        assert!(ParameterStore::new(vec![ParamSpec::vector("a", 1), ParamSpec::vector("a", 2)]).is_err());
        let s = ParameterStore::new(vec![ParamSpec::vector("a", 2), ParamSpec::matrix("b", 2, 3)]).unwrap();
        assert_eq!(s.locate(0), ("a", 0));
        assert_eq!(s.locate(2), ("b", 0));
        assert_eq!(s.locate(7), ("b", 5));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store(vec![ParamSpec::matrix("w", 3, 2), ParamSpec::vector("b", 3)], 21);
        let mut meta = BTreeMap::new();
        meta.insert("baseline".to_string(), format!("{}", 0.1f64 + 0.2));
        let ckpt = Checkpoint {
            config_hash: "abc".into(),
            meta,
            arrays: s.to_named_arrays("", s.flat()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let flat = s.from_named_arrays("", &back.arrays).unwrap();
        assert!(flat.iter().zip(s.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.meta_value::<f64>("baseline").unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    }
}
