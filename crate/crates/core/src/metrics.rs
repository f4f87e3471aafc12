//! Evaluation quantities: forget quality, fine-tuning accuracy, utility
//! accuracy, and robust accuracy over a fine-tuning trajectory.

use crate::datasets::LabeledSequence;
use crate::error::{Error, Result};
use crate::models::{forward, Batch, ModelConfig, ParameterVector};
use crate::objectives::prepare;
use serde::{Deserialize, Serialize};

/// Ordered per-epoch records; `epoch` indices are contiguous from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fq: f64,
    pub fa: f64,
}

impl Trajectory {
    pub fn new(records: Vec<EpochRecord>) -> Result<Trajectory> {
        if records.is_empty() {
            return Err(Error::argument("empty trajectory".to_string()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.epoch != i {
                return Err(Error::argument(format!(
                    "epoch indices must be contiguous from 0; record {i} has epoch {}",
                    r.epoch
                )));
            }
            if !(0.0..=1.0).contains(&r.fq) || !(0.0..=1.0).contains(&r.fa) {
                return Err(Error::argument(format!(
                    "FQ/FA must lie in [0, 1]; record {i} has fq={} fa={}",
                    r.fq, r.fa
                )));
            }
        }
        Ok(Trajectory { records })
    }

    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().unwrap()
    }
}

/// Exact-match accuracy on supervised positions: fraction of held-out
/// target positions predicted correctly by argmax.
pub fn exact_match_accuracy(
    config: &ModelConfig,
    params: &ParameterVector,
    eval: &[LabeledSequence],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::argument("empty evaluation set".to_string()));
    }
    // Evaluate in slabs so memory stays flat on large eval splits.
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in eval.chunks(64) {
        let pb = prepare(chunk)?;
        let (logits, _) = forward(config, params, &Batch::Tokens(pb.ids.clone()), false)?;
        let t = logits.shape[1];
        let classes = logits.shape[2];
        for (i, tgt) in pb.targets.iter().enumerate() {
            for (j, &y) in tgt.iter().enumerate() {
                let pos = i * t + pb.from[i] + j;
                let row = &logits.data[pos * classes..(pos + 1) * classes];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                correct += usize::from(best == y);
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Forget quality: `1 - accuracy` on the forget evaluation split.
pub fn forget_quality(
    config: &ModelConfig,
    params: &ParameterVector,
    forget_eval: &[LabeledSequence],
) -> Result<f64> {
    Ok(1.0 - exact_match_accuracy(config, params, forget_eval)?)
}

/// Utility stand-in: exact-match accuracy on the retain eval split.
/// (The role the MMLU zero-shot score plays at full scale.)
pub fn utility_accuracy(
    config: &ModelConfig,
    params: &ParameterVector,
    retain_eval: &[LabeledSequence],
) -> Result<f64> {
    exact_match_accuracy(config, params, retain_eval)
}

/// The three robust-accuracy milestones over `epochs` post-epoch
/// evaluations: first quartile, median, final (1-based, ceil rounding).
pub fn ra_milestones(epochs: usize) -> [usize; 3] {
    assert!(epochs >= 1);
    [epochs.div_ceil(4), epochs.div_ceil(2), epochs]
}

/// Robust accuracy: mean FQ at the first-quartile, median, and final
/// epochs of a fine-tuning trajectory. Coinciding milestones (short
/// trajectories) are still averaged as three values.
pub fn robust_accuracy(traj: &Trajectory) -> f64 {
    let e = traj.epochs();
    let ms = ra_milestones(e);
    ms.iter().map(|&m| traj.records[m - 1].fq).sum::<f64>() / 3.0
}
