//! Adversarial protocols against an unlearned checkpoint: downstream
//! fine-tuning on an unrelated task, and the relearning attack on a small
//! sample of forget-set instances.

use crate::datasets::{LabeledSequence, SuiteData};
use crate::error::{Error, Result};
use crate::invariance::{Environment, EnvRole};
use crate::metrics::{robust_accuracy, EpochRecord, Trajectory};
use crate::models::load_checkpoint;
use crate::numcore::RngStream;
use crate::trainer::{run_finetune, FinetuneRunInputs, RunRecord, TrainConfig, STREAM_RELEARN_PICK};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Downstream,
    Relearning,
}

/// Outcome of one attack. `trajectory` holds the post-epoch evaluations
/// (or the single pre-attack evaluation for a zero-epoch attack), so
/// `robust_accuracy(trajectory)` reproduces `ra` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub start_checkpoint: PathBuf,
    pub dataset: String,
    pub trajectory: Trajectory,
    pub fq_before: f64,
    pub fq_after: f64,
    /// `fq_before - fq_after`; may be negative.
    pub fq_drop: f64,
    pub ra: f64,
    pub fa_final: f64,
    /// The reference trajectory of the same fine-tune started from the
    /// original (non-unlearned) model, for downstream attacks.
    pub original_reference: Option<Trajectory>,
}

fn attack_trajectory(history: &Trajectory) -> Result<Trajectory> {
    // Post-epoch evaluations, re-indexed from 0; a zero-epoch run keeps its
    // single starting evaluation.
    if history.epochs() == 1 {
        return Trajectory::new(history.records.clone());
    }
    let records: Vec<EpochRecord> = history.records[1..]
        .iter()
        .enumerate()
        .map(|(i, r)| EpochRecord {
            epoch: i,
            fq: r.fq,
            fa: r.fa,
        })
        .collect();
    Trajectory::new(records)
}

fn report_from_history(
    kind: AttackKind,
    start_checkpoint: &Path,
    dataset: &str,
    history: &Trajectory,
    original_reference: Option<Trajectory>,
) -> Result<AttackReport> {
    let fq_before = history.records[0].fq;
    let trajectory = attack_trajectory(history)?;
    let last = trajectory.last();
    let fq_after = last.fq;
    let fa_final = last.fa;
    let ra = robust_accuracy(&trajectory);
    Ok(AttackReport {
        kind,
        start_checkpoint: start_checkpoint.to_path_buf(),
        dataset: dataset.to_string(),
        trajectory,
        fq_before,
        fq_after,
        fq_drop: fq_before - fq_after,
        ra,
        fa_final,
        original_reference,
    })
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(crate::datasets::hex_digest(&std::fs::read(path)?))
}

pub struct DownstreamAttackInputs<'a> {
    pub run_id: String,
    pub unlearned_checkpoint: &'a Path,
    pub original_checkpoint: &'a Path,
    pub task: &'a Environment,
    pub data: &'a SuiteData,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    /// Reference trajectory from a previous fine-tune of the original model
    /// on the same task with the same config; computed here when absent.
    pub original_reference: Option<Trajectory>,
}

/// Fine-tunes the unlearned checkpoint on a downstream task, tracking
/// forget quality every epoch; co-reports the original model's trajectory
/// under the same fine-tune.
pub fn downstream_attack(inputs: &DownstreamAttackInputs) -> Result<(AttackReport, RunRecord)> {
    if inputs.task.role != EnvRole::Attack {
        return Err(Error::argument(format!(
            "environment `{}` does not have the attack role",
            inputs.task.name
        )));
    }
    let forget_name = &inputs.data.forget_domain().name;
    if &inputs.task.dataset == forget_name {
        return Err(Error::argument(
            "downstream attack task must differ from the forget domain (use the relearning attack)"
                .to_string(),
        ));
    }

    let hash_before = file_sha256(inputs.unlearned_checkpoint)?;
    let (params, model_config) = load_checkpoint(inputs.unlearned_checkpoint)?;

    let train_set = inputs.data.split(&inputs.task.dataset, "train")?;
    let task_eval = inputs.data.split(&inputs.task.dataset, "eval")?;
    let forget_eval = inputs.data.split(forget_name, "eval")?;

    let record = run_finetune(&FinetuneRunInputs {
        run_id: inputs.run_id.clone(),
        model_config: &model_config,
        start_params: &params,
        task_name: inputs.task.dataset.clone(),
        train_set,
        task_eval,
        forget_eval,
        data: inputs.data,
        train: inputs.train,
        out_dir: inputs.out_dir,
        keep_epoch_checkpoints: false,
    })?;

    let original_reference = match &inputs.original_reference {
        Some(t) => t.clone(),
        None => {
            let (orig_params, orig_cfg) = load_checkpoint(inputs.original_checkpoint)?;
            let orig_record = run_finetune(&FinetuneRunInputs {
                run_id: format!("{}-original-ref", inputs.run_id),
                model_config: &orig_cfg,
                start_params: &orig_params,
                task_name: inputs.task.dataset.clone(),
                train_set,
                task_eval,
                forget_eval,
                data: inputs.data,
                train: inputs.train,
                out_dir: &inputs.out_dir.join("original-ref"),
                keep_epoch_checkpoints: false,
            })?;
            orig_record.eval_history.unwrap()
        }
    };

    if file_sha256(inputs.unlearned_checkpoint)? != hash_before {
        return Err(Error::argument(
            "attack mutated the input checkpoint file".to_string(),
        ));
    }

    let history = record.eval_history.clone().unwrap();
    let report = report_from_history(
        AttackKind::Downstream,
        inputs.unlearned_checkpoint,
        &inputs.task.dataset,
        &history,
        Some(original_reference),
    )?;
    write_report(inputs.out_dir, &report)?;
    Ok((report, record))
}

pub struct RelearningAttackInputs<'a> {
    pub run_id: String,
    pub unlearned_checkpoint: &'a Path,
    pub sample_count: usize,
    pub epochs: usize,
    pub data: &'a SuiteData,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
}

/// Fine-tunes on `sample_count` seeded-random forget-train instances for a
/// fixed number of epochs and reports the forget-quality drop.
pub fn relearning_attack(inputs: &RelearningAttackInputs) -> Result<(AttackReport, RunRecord)> {
    let forget_name = inputs.data.forget_domain().name.clone();
    let forget_train = inputs.data.split(&forget_name, "train")?;
    let forget_eval = inputs.data.split(&forget_name, "eval")?;
    if inputs.sample_count > forget_train.len() {
        return Err(Error::argument(format!(
            "relearning sample count {} exceeds forget train size {}",
            inputs.sample_count,
            forget_train.len()
        )));
    }

    let hash_before = file_sha256(inputs.unlearned_checkpoint)?;
    let (params, model_config) = load_checkpoint(inputs.unlearned_checkpoint)?;

    // Seeded sample without replacement from the run's dedicated stream.
    let mut order: Vec<usize> = (0..forget_train.len()).collect();
    let mut pick = RngStream::new(inputs.train.seed, STREAM_RELEARN_PICK);
    pick.shuffle(&mut order);
    let sample: Vec<LabeledSequence> = order[..inputs.sample_count]
        .iter()
        .map(|&i| forget_train[i].clone())
        .collect();

    let cfg = TrainConfig {
        max_epochs: inputs.epochs,
        // Fixed-epoch protocol: the convergence rule must not stop it early.
        convergence_threshold: 0.0,
        ..inputs.train.clone()
    };
    let record = if inputs.sample_count == 0 {
        // Zero samples: the model is untouched; evaluate once.
        run_finetune(&FinetuneRunInputs {
            run_id: inputs.run_id.clone(),
            model_config: &model_config,
            start_params: &params,
            task_name: forget_name.clone(),
            train_set: &forget_train[..1],
            task_eval: forget_eval,
            forget_eval,
            data: inputs.data,
            train: &TrainConfig { max_epochs: 0, ..cfg },
            out_dir: inputs.out_dir,
            keep_epoch_checkpoints: false,
        })?
    } else {
        run_finetune(&FinetuneRunInputs {
            run_id: inputs.run_id.clone(),
            model_config: &model_config,
            start_params: &params,
            task_name: forget_name.clone(),
            train_set: &sample,
            task_eval: forget_eval,
            forget_eval,
            data: inputs.data,
            train: &cfg,
            out_dir: inputs.out_dir,
            keep_epoch_checkpoints: false,
        })?
    };

    if file_sha256(inputs.unlearned_checkpoint)? != hash_before {
        return Err(Error::argument(
            "attack mutated the input checkpoint file".to_string(),
        ));
    }

    let history = record.eval_history.clone().unwrap();
    let report = report_from_history(
        AttackKind::Relearning,
        inputs.unlearned_checkpoint,
        &forget_name,
        &history,
        None,
    )?;
    write_report(inputs.out_dir, &report)?;
    Ok((report, record))
}

pub const REPORT_FILE: &str = "attack_report.json";

fn write_report(out_dir: &Path, report: &AttackReport) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut buf = serde_json::to_vec_pretty(report)?;
    buf.push(b'\n');
    std::fs::write(out_dir.join(REPORT_FILE), buf)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<AttackReport> {
    let bytes = std::fs::read(dir.join(REPORT_FILE))
        .map_err(|_| Error::Report(dir.join(REPORT_FILE).display().to_string()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_suite, SplitSpec, SyntheticSuiteConfig};
    use crate::models::{init_model, save_checkpoint, ModelConfig, TinyLmConfig};
    use crate::trainer::OptimizerKind;

    fn setup(dir: &Path) -> (SuiteData, PathBuf, PathBuf, ModelConfig) {
        let mut cfg = SyntheticSuiteConfig::default();
        cfg.seq_len = 16;
        cfg.splits = vec![
            SplitSpec { name: "train".to_string(), examples: 80 },
            SplitSpec { name: "eval".to_string(), examples: 24 },
        ];
        generate_suite(&cfg, dir).unwrap();
        let data = SuiteData::load(dir).unwrap();
        let mcfg = ModelConfig::TinyLm(TinyLmConfig {
            vocab: 64,
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            context: 16,
        });
        let params = init_model(&mcfg, &mut RngStream::new(5, 0)).unwrap();
        let unlearned = dir.join("unlearned.ckpt");
        let original = dir.join("original.ckpt");
        save_checkpoint(&params, &mcfg, &unlearned).unwrap();
        let params2 = init_model(&mcfg, &mut RngStream::new(6, 0)).unwrap();
        save_checkpoint(&params2, &mcfg, &original).unwrap();
        (data, unlearned, original, mcfg)
    }

    fn attack_env(task: &str) -> Environment {
        Environment {
            name: task.to_string(),
            dataset: task.to_string(),
            role: EnvRole::Attack,
            batch_size: 8,
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adamw_default(),
            max_epochs: 2,
            batch_size: 16,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epoch_attack_keeps_fq() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, original, _) = setup(dir.path());
        let out = tempfile::tempdir().unwrap();
        let (report, _) = downstream_attack(&DownstreamAttackInputs {
            run_id: "z".to_string(),
            unlearned_checkpoint: &unlearned,
            original_checkpoint: &original,
            task: &attack_env("t2"),
            data: &data,
            train: &TrainConfig {
                max_epochs: 0,
                ..quick_cfg()
            },
            out_dir: out.path(),
            original_reference: None,
        })
        .unwrap();
        assert_eq!(report.fq_after, report.fq_before);
        assert_eq!(report.fq_drop, 0.0);
        assert_eq!(report.ra, report.fq_before);
    }

    #[test]
    fn attack_does_not_mutate_checkpoint_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, original, _) = setup(dir.path());
        let before = std::fs::read(&unlearned).unwrap();
        let mut reports = Vec::new();
        for _ in 0..2 {
            let out = tempfile::tempdir().unwrap();
            let (report, _) = downstream_attack(&DownstreamAttackInputs {
                run_id: "d".to_string(),
                unlearned_checkpoint: &unlearned,
                original_checkpoint: &original,
                task: &attack_env("t3"),
                data: &data,
                train: &quick_cfg(),
                out_dir: out.path(),
                original_reference: None,
            })
            .unwrap();
            reports.push(serde_json::to_string(&report).unwrap());
        }
        assert_eq!(std::fs::read(&unlearned).unwrap(), before);
        assert_eq!(reports[0], reports[1]);
    }

    #[test]
    fn ra_matches_recomputation_from_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, original, _) = setup(dir.path());
        let out = tempfile::tempdir().unwrap();
        let (report, _) = downstream_attack(&DownstreamAttackInputs {
            run_id: "ra".to_string(),
            unlearned_checkpoint: &unlearned,
            original_checkpoint: &original,
            task: &attack_env("t1"),
            data: &data,
            train: &quick_cfg(),
            out_dir: out.path(),
            original_reference: None,
        })
        .unwrap();
        assert_eq!(report.ra, robust_accuracy(&report.trajectory));
        // And the serialized report reloads to the same values.
        let back = read_report(out.path()).unwrap();
        assert_eq!(back.ra, report.ra);
        assert_eq!(back.fq_drop, report.fq_drop);
    }

    #[test]
    fn downstream_attack_rejects_forget_task() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, original, _) = setup(dir.path());
        let out = tempfile::tempdir().unwrap();
        let err = downstream_attack(&DownstreamAttackInputs {
            run_id: "bad".to_string(),
            unlearned_checkpoint: &unlearned,
            original_checkpoint: &original,
            task: &attack_env("forget"),
            data: &data,
            train: &quick_cfg(),
            out_dir: out.path(),
            original_reference: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn relearning_identity_cases() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, _, _) = setup(dir.path());
        for (k, epochs) in [(0usize, 1usize), (10, 0)] {
            let out = tempfile::tempdir().unwrap();
            let (report, _) = relearning_attack(&RelearningAttackInputs {
                run_id: format!("rl-{k}-{epochs}"),
                unlearned_checkpoint: &unlearned,
                sample_count: k,
                epochs,
                data: &data,
                train: &quick_cfg(),
                out_dir: out.path(),
            })
            .unwrap();
            assert_eq!(report.fq_drop, 0.0, "k={k} epochs={epochs}");
            assert_eq!(report.fq_after, report.fq_before);
        }
    }

    #[test]
    fn relearning_rejects_oversized_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (data, unlearned, _, _) = setup(dir.path());
        let out = tempfile::tempdir().unwrap();
        let err = relearning_attack(&RelearningAttackInputs {
            run_id: "big".to_string(),
            unlearned_checkpoint: &unlearned,
            sample_count: 10_000,
            epochs: 1,
            data: &data,
            train: &quick_cfg(),
            out_dir: out.path(),
        })
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }
}
