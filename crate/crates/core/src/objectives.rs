//! The unlearning loss family: retain cross-entropy, three forget losses
//! (gradient ascent, NPO, RMU), and the combined regularized objective
//! `loss_forget + gamma * loss_retain`. Every loss returns its exact
//! parameter gradient, assembled through `models::backward`.

use crate::datasets::LabeledSequence;
use crate::error::{Error, Result};
use crate::models::{backward, forward, Batch, ModelConfig, ParameterVector};
use crate::numcore::{log_softmax_into, sigmoid, softplus, RngStream, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Forget-objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Ga,
    Npo,
    Rmu,
}

impl std::fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UnlearnMethod::Ga => write!(f, "ga"),
            UnlearnMethod::Npo => write!(f, "npo"),
            UnlearnMethod::Rmu => write!(f, "rmu"),
        }
    }
}

/// Fixed unit-norm steering direction for RMU, kept for a whole run.
#[derive(Debug, Clone)]
pub struct RandomDirection {
    pub u: Tensor,
    pub seed: u64,
}

impl RandomDirection {
    /// Gaussian sample normalized to unit length; deterministic in `seed`.
    pub fn generate(hidden_dim: usize, seed: u64) -> RandomDirection {
        let mut rng = RngStream::new(seed, 0x0d12ec7);
        let mut u = Tensor::zeros(&[hidden_dim]);
        loop {
            for v in u.data.iter_mut() {
                *v = rng.gauss();
            }
            let norm = crate::numcore::l2_norm(&u.data);
            if norm > 1e-6 {
                for v in u.data.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
        RandomDirection { u, seed }
    }
}

/// Method selector plus hyperparameters and frozen-reference handle.
#[derive(Debug, Clone)]
pub struct UnlearnSpec {
    pub method: UnlearnMethod,
    /// Retain weight in the combined objective (unused for RMU, which
    /// carries its own `alpha`-weighted retain term).
    pub gamma: f64,
    /// NPO temperature.
    pub beta: f64,
    /// RMU steering coefficient.
    pub rmu_c: f64,
    /// RMU retain weight.
    pub rmu_alpha: f64,
    /// Which block's activations RMU steers.
    pub rmu_layer: usize,
    /// Frozen reference parameters (NPO reference model / RMU frozen model).
    pub reference: Option<Arc<ParameterVector>>,
    /// RMU steering direction.
    pub direction: Option<RandomDirection>,
}

impl UnlearnSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::argument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        match self.method {
            UnlearnMethod::Ga => Ok(()),
            UnlearnMethod::Npo => {
                if self.beta <= 0.0 {
                    return Err(Error::argument(format!("NPO beta must be > 0, got {}", self.beta)));
                }
                if self.reference.is_none() {
                    return Err(Error::argument("NPO needs a frozen reference model".to_string()));
                }
                Ok(())
            }
            UnlearnMethod::Rmu => {
                if self.rmu_c <= 0.0 {
                    return Err(Error::argument(format!("RMU c must be > 0, got {}", self.rmu_c)));
                }
                if self.rmu_alpha < 0.0 {
                    return Err(Error::argument(format!(
                        "RMU alpha must be >= 0, got {}",
                        self.rmu_alpha
                    )));
                }
                if self.rmu_layer >= config.trace_layers() {
                    return Err(Error::argument(format!(
                        "RMU layer {} out of range (model has {})",
                        self.rmu_layer,
                        config.trace_layers()
                    )));
                }
                if self.reference.is_none() || self.direction.is_none() {
                    return Err(Error::argument(
                        "RMU needs a frozen model and a steering direction".to_string(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// A loss value together with its exact parameter gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParameterVector,
}

/// Token batch prepared for supervised losses.
pub(crate) struct PreparedBatch {
    pub ids: Vec<Vec<usize>>,
    /// First supervised position per sequence.
    pub from: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    /// Total supervised positions across the batch.
    pub positions: usize,
}

pub(crate) fn prepare(batch: &[LabeledSequence]) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch".to_string()));
    }
    let mut ids = Vec::with_capacity(batch.len());
    let mut from = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut positions = 0;
    for seq in batch {
        let t = seq.next_tokens().to_vec();
        positions += t.len();
        from.push(seq.supervised_from());
        targets.push(t);
        ids.push(seq.input.clone());
    }
    Ok(PreparedBatch {
        ids,
        from,
        targets,
        positions,
    })
}

/// Per-position cross-entropy statistics over supervised positions.
pub(crate) struct CeStats {
    pub loss_sum: f64,
    /// `softmax - onehot` at each supervised position, zero elsewhere
    /// (same shape as the logits).
    pub grad_unscaled: Tensor,
    /// Per-sequence summed target log-probabilities.
    pub seq_logprob: Vec<f64>,
    pub logits: Tensor,
}

/// Forward pass only; logits for a prepared batch.
pub(crate) fn ce_stats_logits(
    config: &ModelConfig,
    params: &ParameterVector,
    pb: &PreparedBatch,
) -> Result<Tensor> {
    let (logits, _) = forward(config, params, &Batch::Tokens(pb.ids.clone()), false)?;
    Ok(logits)
}

pub(crate) fn ce_stats(config: &ModelConfig, params: &ParameterVector, pb: &PreparedBatch) -> Result<CeStats> {
    let (logits, _) = forward(config, params, &Batch::Tokens(pb.ids.clone()), false)?;
    let vocab = *logits.shape.last().unwrap();
    let t = logits.shape[1];
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss_sum = 0.0;
    let mut seq_logprob = vec![0.0; pb.ids.len()];
    let mut logp = vec![0.0; vocab];
    for (i, tgt) in pb.targets.iter().enumerate() {
        for (j, &y) in tgt.iter().enumerate() {
            let p = pb.from[i] + j;
            debug_assert!(p < t);
            let row = &logits.data[(i * t + p) * vocab..(i * t + p + 1) * vocab];
            let (lse, _) = log_softmax_into(row, &mut logp);
            loss_sum += lse - row[y];
            seq_logprob[i] += logp[y];
            let g = &mut grad.data[(i * t + p) * vocab..(i * t + p + 1) * vocab];
            for (gv, &lp) in g.iter_mut().zip(logp.iter()) {
                *gv = lp.exp();
            }
            g[y] -= 1.0;
        }
    }
    Ok(CeStats {
        loss_sum,
        grad_unscaled: grad,
        seq_logprob,
        logits,
    })
}

/// Mean token cross-entropy on the retain batch plus its exact gradient.
pub fn retain_loss(config: &ModelConfig, params: &ParameterVector, batch: &[LabeledSequence]) -> Result<LossOutput> {
    let pb = prepare(batch)?;
    let stats = ce_stats(config, params, &pb)?;
    let scale = 1.0 / pb.positions as f64;
    let mut logit_grad = stats.grad_unscaled;
    for v in logit_grad.data.iter_mut() {
        *v *= scale;
    }
    let grads = backward(config, params, &Batch::Tokens(pb.ids), &logit_grad, None)?;
    Ok(LossOutput {
        loss: stats.loss_sum * scale,
        grads,
    })
}

/// Negated cross-entropy on the forget batch; minimizing it ascends the
/// forget negative log-likelihood.
pub fn ga_forget_loss(config: &ModelConfig, params: &ParameterVector, batch: &[LabeledSequence]) -> Result<LossOutput> {
    let mut out = retain_loss(config, params, batch)?;
    out.loss = -out.loss;
    out.grads.scale(-1.0);
    Ok(out)
}

/// Negative preference optimization:
/// `(2/beta) * mean_i log(1 + (pi_theta(y|x) / pi_ref(y|x))^beta)` with the
/// sequence likelihood summed over target positions. The gradient carries
/// the per-sequence prefactor `2 * sigmoid(beta * r_i)` on the
/// log-likelihood gradient.
pub fn npo_forget_loss(
    config: &ModelConfig,
    params: &ParameterVector,
    ref_params: &ParameterVector,
    batch: &[LabeledSequence],
    beta: f64,
) -> Result<LossOutput> {
    if beta <= 0.0 {
        return Err(Error::argument(format!("NPO beta must be > 0, got {beta}")));
    }
    let pb = prepare(batch)?;
    let stats = ce_stats(config, params, &pb)?;
    let ref_stats = ce_stats(config, ref_params, &pb)?;
    let b = pb.ids.len() as f64;

    let mut loss = 0.0;
    // Per-sequence weight sigma(beta * r_i) * 2 / B on (p - y).
    let mut weights = Vec::with_capacity(pb.ids.len());
    for (lp, lp_ref) in stats.seq_logprob.iter().zip(ref_stats.seq_logprob.iter()) {
        let r = lp - lp_ref;
        loss += (2.0 / beta) * softplus(beta * r) / b;
        weights.push(2.0 * sigmoid(beta * r) / b);
    }

    let t = stats.logits.shape[1];
    let vocab = stats.logits.shape[2];
    let mut logit_grad = stats.grad_unscaled;
    for (i, &w) in weights.iter().enumerate() {
        let seg = &mut logit_grad.data[i * t * vocab..(i + 1) * t * vocab];
        for v in seg.iter_mut() {
            *v *= w;
        }
    }
    let grads = backward(config, params, &Batch::Tokens(pb.ids), &logit_grad, None)?;
    Ok(LossOutput { loss, grads })
}

/// Representation misdirection: pushes forget-batch activations at one layer
/// toward `c * u` and matches retain-batch activations to the frozen
/// model's, both as dimension-normalized mean squared error. Gradients flow
/// only through layers up to `layer`.
#[allow(clippy::too_many_arguments)]
pub fn rmu_loss(
    config: &ModelConfig,
    params: &ParameterVector,
    frozen: &ParameterVector,
    forget_batch: &Batch,
    retain_batch: &Batch,
    direction: &RandomDirection,
    c: f64,
    alpha: f64,
    layer: usize,
) -> Result<LossOutput> {
    if c <= 0.0 {
        return Err(Error::argument(format!("RMU c must be > 0, got {c}")));
    }
    if layer >= config.trace_layers() {
        return Err(Error::argument(format!(
            "RMU layer {layer} out of range (model has {})",
            config.trace_layers()
        )));
    }
    let d = config.hidden_dim();
    if direction.u.len() != d {
        return Err(Error::argument(format!(
            "steering direction has length {}, hidden dim is {d}",
            direction.u.len()
        )));
    }

    // Forget side: match c*u.
    let (f_logits, f_trace) = forward(config, params, forget_batch, true)?;
    let h_f = &f_trace.as_ref().unwrap().layers[layer];
    let rows_f = h_f.len() / d;
    let mut tg_f = Tensor::zeros(&h_f.shape);
    let mut loss_f = 0.0;
    for r in 0..rows_f {
        for j in 0..d {
            let diff = h_f.data[r * d + j] - c * direction.u.data[j];
            loss_f += diff * diff;
            tg_f.data[r * d + j] = 2.0 * diff;
        }
    }
    let norm_f = 1.0 / (rows_f as f64 * d as f64);
    loss_f *= norm_f;
    for v in tg_f.data.iter_mut() {
        *v *= norm_f;
    }
    let zero_logit_f = Tensor::zeros(&f_logits.shape);
    let mut grads = backward(config, params, forget_batch, &zero_logit_f, Some(&[(layer, tg_f)]))?;

    // Retain side: match the frozen model's activations.
    let (r_logits, r_trace) = forward(config, params, retain_batch, true)?;
    let (_, frozen_trace) = forward(config, frozen, retain_batch, true)?;
    let h_r = &r_trace.as_ref().unwrap().layers[layer];
    let h_z = &frozen_trace.as_ref().unwrap().layers[layer];
    let rows_r = h_r.len() / d;
    let mut tg_r = Tensor::zeros(&h_r.shape);
    let mut loss_r = 0.0;
    for i in 0..h_r.len() {
        let diff = h_r.data[i] - h_z.data[i];
        loss_r += diff * diff;
        tg_r.data[i] = 2.0 * diff;
    }
    let norm_r = 1.0 / (rows_r as f64 * d as f64);
    loss_r *= norm_r;
    if alpha != 0.0 {
        for v in tg_r.data.iter_mut() {
            *v *= alpha * norm_r;
        }
        let zero_logit_r = Tensor::zeros(&r_logits.shape);
        let g_r = backward(config, params, retain_batch, &zero_logit_r, Some(&[(layer, tg_r)]))?;
        grads.axpy(1.0, &g_r);
    }

    Ok(LossOutput {
        loss: loss_f + alpha * loss_r,
        grads,
    })
}

/// The combined regularized unlearning objective:
/// `loss_forget + gamma * loss_retain` for GA/NPO; for RMU the retain
/// regularizer is the built-in activation-matching term weighted by `alpha`
/// and `gamma` is unused.
pub fn unlearn_loss(
    config: &ModelConfig,
    params: &ParameterVector,
    spec: &UnlearnSpec,
    forget_batch: &[LabeledSequence],
    retain_batch: &[LabeledSequence],
) -> Result<LossOutput> {
    spec.validate(config)?;
    match spec.method {
        UnlearnMethod::Ga | UnlearnMethod::Npo => {
            let mut forget = match spec.method {
                UnlearnMethod::Ga => ga_forget_loss(config, params, forget_batch)?,
                UnlearnMethod::Npo => npo_forget_loss(
                    config,
                    params,
                    spec.reference.as_ref().unwrap(),
                    forget_batch,
                    spec.beta,
                )?,
                UnlearnMethod::Rmu => unreachable!(),
            };
            if spec.gamma != 0.0 {
                let retain = retain_loss(config, params, retain_batch)?;
                forget.loss += spec.gamma * retain.loss;
                forget.grads.axpy(spec.gamma, &retain.grads);
            }
            Ok(forget)
        }
        UnlearnMethod::Rmu => {
            let pb_f = prepare(forget_batch)?;
            let pb_r = prepare(retain_batch)?;
            rmu_loss(
                config,
                params,
                spec.reference.as_ref().unwrap(),
                &Batch::Tokens(pb_f.ids),
                &Batch::Tokens(pb_r.ids),
                spec.direction.as_ref().unwrap(),
                spec.rmu_c,
                spec.rmu_alpha,
                spec.rmu_layer,
            )
        }
    }
}
