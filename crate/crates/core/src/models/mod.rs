//! Toy model families with explicit forward and analytic backward passes,
//! parameter flattening, and bit-exact checkpoint I/O.
//!
//! Two families:
//! - `mlp`: tanh feed-forward classifier, small enough for exhaustive
//!   finite-difference checks;
//! - `tinylm`: a small pre-LN causal transformer mirroring the LM
//!   fine-tuning regime the experiments target.

mod checkpoint;
mod mlp;
mod tinylm;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

/// Architecture descriptor; fully determines parameter names, shapes and
/// canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    TinyLm(TinyLmConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of tanh hidden layers; 0 gives a pure linear classifier.
    pub hidden_layers: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub vocab: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

impl TinyLmConfig {
    /// Width of the feed-forward inner layer.
    pub fn mlp_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mlp(c) => {
                if c.input_dim == 0 || c.classes < 2 {
                    return Err(Error::argument(format!(
                        "mlp needs input_dim >= 1 and classes >= 2, got {c:?}"
                    )));
                }
                if c.hidden_layers > 0 && c.hidden_dim == 0 {
                    return Err(Error::argument("mlp hidden_dim must be >= 1".to_string()));
                }
            }
            ModelConfig::TinyLm(c) => {
                if c.vocab < 2 || c.hidden_dim == 0 || c.layers == 0 || c.heads == 0 || c.context == 0
                {
                    return Err(Error::argument(format!("tinylm dims must be >= 1, got {c:?}")));
                }
                if c.hidden_dim % c.heads != 0 {
                    return Err(Error::argument(format!(
                        "hidden_dim {} not divisible by heads {}",
                        c.hidden_dim, c.heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of residual blocks (tinylm) or hidden layers (mlp); valid
    /// range for activation-trace layer indices.
    pub fn trace_layers(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => c.hidden_layers,
            ModelConfig::TinyLm(c) => c.layers,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => c.hidden_dim,
            ModelConfig::TinyLm(c) => c.hidden_dim,
        }
    }

    /// Canonical `(name, shape)` list; the flattening order of every
    /// parameter vector, gradient, and checkpoint for this config.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self {
            ModelConfig::Mlp(c) => {
                let mut prev = c.input_dim;
                for i in 0..c.hidden_layers {
                    out.push((format!("fc{i}.w"), vec![prev, c.hidden_dim]));
                    out.push((format!("fc{i}.b"), vec![c.hidden_dim]));
                    prev = c.hidden_dim;
                }
                out.push(("out.w".to_string(), vec![prev, c.classes]));
                out.push(("out.b".to_string(), vec![c.classes]));
            }
            ModelConfig::TinyLm(c) => {
                let d = c.hidden_dim;
                let m = c.mlp_dim();
                out.push(("tok_emb".to_string(), vec![c.vocab, d]));
                out.push(("pos_emb".to_string(), vec![c.context, d]));
                for l in 0..c.layers {
                    out.push((format!("l{l}.ln1.g"), vec![d]));
                    out.push((format!("l{l}.ln1.b"), vec![d]));
                    out.push((format!("l{l}.wq"), vec![d, d]));
                    out.push((format!("l{l}.bq"), vec![d]));
                    out.push((format!("l{l}.wk"), vec![d, d]));
                    out.push((format!("l{l}.bk"), vec![d]));
                    out.push((format!("l{l}.wv"), vec![d, d]));
                    out.push((format!("l{l}.bv"), vec![d]));
                    out.push((format!("l{l}.wo"), vec![d, d]));
                    out.push((format!("l{l}.bo"), vec![d]));
                    out.push((format!("l{l}.ln2.g"), vec![d]));
                    out.push((format!("l{l}.ln2.b"), vec![d]));
                    out.push((format!("l{l}.w1"), vec![d, m]));
                    out.push((format!("l{l}.b1"), vec![m]));
                    out.push((format!("l{l}.w2"), vec![m, d]));
                    out.push((format!("l{l}.b2"), vec![d]));
                }
                out.push(("lnf.g".to_string(), vec![d]));
                out.push(("lnf.b".to_string(), vec![d]));
                out.push(("out.w".to_string(), vec![d, c.vocab]));
                out.push(("out.b".to_string(), vec![c.vocab]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// The full ordered parameter set of a model.
///
/// Immutable in spirit: training constructs new vectors rather than mutating
/// shared ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    entries: Vec<(String, Tensor)>,
}

impl ParameterVector {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParameterVector { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("no parameter tensor named `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("no parameter tensor named `{name}`"))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All values in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, t) in &self.entries {
            flat.extend_from_slice(&t.data);
        }
        flat
    }

    /// Rebuild a vector with this one's structure from flat values.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParameterVector> {
        if flat.len() != self.param_count() {
            return Err(Error::argument(format!(
                "flat vector has {} values, structure holds {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut at = 0;
        for (name, t) in &self.entries {
            let next = at + t.len();
            entries.push((
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data: flat[at..next].to_vec(),
                },
            ));
            at = next;
        }
        Ok(ParameterVector { entries })
    }

    pub fn zeros_like(&self) -> ParameterVector {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
            .collect();
        ParameterVector { entries }
    }

    /// `self += a * other`, tensor by tensor.
    pub fn axpy(&mut self, a: f64, other: &ParameterVector) {
        assert_eq!(self.entries.len(), other.entries.len(), "structure mismatch");
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (x, y) in t.data.iter_mut().zip(o.data.iter()) {
                *x += a * y;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for (_, t) in self.entries.iter_mut() {
            for x in t.data.iter_mut() {
                *x *= a;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Checks that two vectors share names and shapes in order.
    pub fn same_structure(&self, other: &ParameterVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape == bt.shape)
    }
}

/// One batch of model inputs.
#[derive(Debug, Clone)]
pub enum Batch {
    /// `[batch, input_dim]` feature rows for the mlp family.
    Features(Tensor),
    /// Equal-length token-id sequences for the tinylm family.
    Tokens(Vec<Vec<usize>>),
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        match self {
            Batch::Features(t) => t.rows(),
            Batch::Tokens(ids) => ids.len(),
        }
    }
}

/// Per-layer hidden states recorded during a forward pass.
///
/// For mlp, layer `l` holds the post-tanh activations `[batch, hidden]`;
/// for tinylm, the residual stream after block `l`, `[batch, seq, hidden]`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layers: Vec<Tensor>,
}

/// Gradients to inject at traced layers: `(layer index, gradient tensor)`.
pub type TraceGrads = [(usize, Tensor)];

/// Draws an initial parameter vector. Linear weights are uniform with scale
/// `1/sqrt(fan_in)`, embeddings with scale `1/sqrt(hidden)`, biases zero,
/// layer-norm gains one. Deterministic given `rng`.
pub fn init_model(config: &ModelConfig, rng: &mut RngStream) -> Result<ParameterVector> {
    config.validate()?;
    let hidden = config.hidden_dim().max(1);
    let mut entries = Vec::new();
    for (name, shape) in config.tensor_layout() {
        let mut t = Tensor::zeros(&shape);
        if shape.len() == 1 {
            // rank-1 tensors are biases/shifts (zero) or layer-norm gains (one)
            if name.ends_with(".g") {
                t.data.fill(1.0);
            }
        } else if name.contains("emb") {
            let s = 1.0 / (hidden as f64).sqrt();
            for v in t.data.iter_mut() {
                *v = rng.uniform(-s, s);
            }
        } else {
            let fan_in = shape[0] as f64;
            let s = 1.0 / fan_in.sqrt();
            for v in t.data.iter_mut() {
                *v = rng.uniform(-s, s);
            }
        }
        entries.push((name, t));
    }
    Ok(ParameterVector { entries })
}

/// Deterministic forward pass. Returns logits (`[batch, classes]` for mlp,
/// `[batch, seq, vocab]` for tinylm) and, when requested, the activation
/// trace.
pub fn forward(
    config: &ModelConfig,
    params: &ParameterVector,
    batch: &Batch,
    want_trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    match (config, batch) {
        (ModelConfig::Mlp(c), Batch::Features(x)) => mlp::forward(c, params, x, want_trace),
        (ModelConfig::TinyLm(c), Batch::Tokens(ids)) => tinylm::forward(c, params, ids, want_trace),
        _ => Err(Error::argument(
            "batch kind does not match model family".to_string(),
        )),
    }
}

/// Exact reverse-mode gradient of
/// `<logit_grad, logits> + sum_l <trace_grad_l, h_l>` with respect to the
/// parameters.
pub fn backward(
    config: &ModelConfig,
    params: &ParameterVector,
    batch: &Batch,
    logit_grad: &Tensor,
    trace_grads: Option<&TraceGrads>,
) -> Result<ParameterVector> {
    if let Some(tg) = trace_grads {
        for (layer, _) in tg {
            if *layer >= config.trace_layers() {
                return Err(Error::argument(format!(
                    "trace layer {layer} out of range (model has {})",
                    config.trace_layers()
                )));
            }
        }
    }
    match (config, batch) {
        (ModelConfig::Mlp(c), Batch::Features(x)) => {
            mlp::backward(c, params, x, logit_grad, trace_grads)
        }
        (ModelConfig::TinyLm(c), Batch::Tokens(ids)) => {
            tinylm::backward(c, params, ids, logit_grad, trace_grads)
        }
        _ => Err(Error::argument(
            "batch kind does not match model family".to_string(),
        )),
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] = dc[m,n] * b^T` where `b` is `[k,n]`.
pub(crate) fn matmul_bt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            *o = crate::numcore::dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k,n] += a^T * dc` where `a` is `[m,k]`, `dc` is `[m,n]`.
pub(crate) fn matmul_at_acc(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow.iter()) {
                *o += av * dv;
            }
        }
    }
}
