//! End-to-end properties of the training loops on a miniature suite:
//! determinism, accumulation equivalence, degenerate budgets, milestone
//! reproducibility, and the non-finite abort path.

use ilu_core::datasets::{generate_suite, SplitSpec, SuiteData, SyntheticSuiteConfig};
use ilu_core::invariance::{Environment, EnvRole};
use ilu_core::models::{init_model, load_checkpoint, ModelConfig, ParameterVector, TinyLmConfig};
use ilu_core::numcore::RngStream;
use ilu_core::objectives::{UnlearnMethod, UnlearnSpec};
use ilu_core::trainer::{
    rounded_copy, run_finetune, run_unlearning, FinetuneRunInputs, OptimizerKind, TrainConfig,
    UnlearnRunInputs,
};
use std::path::Path;

fn mini_suite(dir: &Path) -> SuiteData {
    let mut cfg = SyntheticSuiteConfig::default();
    cfg.seq_len = 16;
    cfg.splits = vec![
        SplitSpec { name: "train".to_string(), examples: 64 },
        SplitSpec { name: "eval".to_string(), examples: 32 },
    ];
    generate_suite(&cfg, dir).unwrap();
    SuiteData::load(dir).unwrap()
}

fn mini_model() -> (ModelConfig, ParameterVector) {
    let cfg = ModelConfig::TinyLm(TinyLmConfig {
        vocab: 64,
        hidden_dim: 16,
        layers: 2,
        heads: 2,
        context: 16,
    });
    let params = init_model(&cfg, &mut RngStream::new(1, 0)).unwrap();
    (cfg, params)
}

fn ga_spec() -> UnlearnSpec {
    UnlearnSpec {
        method: UnlearnMethod::Ga,
        gamma: 1.0,
        beta: 1.0,
        rmu_c: 1.0,
        rmu_alpha: 1.0,
        rmu_layer: 0,
        reference: None,
        direction: None,
    }
}

fn quick_train(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        optimizer: OptimizerKind::adamw_default(),
        max_steps: steps,
        batch_size: 8,
        eval_interval: 10,
        seed: 7,
        ..Default::default()
    }
}

fn t1_env() -> Environment {
    Environment {
        name: "t1".to_string(),
        dataset: "t1".to_string(),
        role: EnvRole::Invariance,
        batch_size: 8,
    }
}

#[test]
fn unlearning_run_is_deterministic() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let spec = ga_spec();
    let train = quick_train(12);

    let mut ckpts = Vec::new();
    for tag in ["a", "b"] {
        let out = tempfile::tempdir().unwrap();
        let rec = run_unlearning(&UnlearnRunInputs {
            run_id: format!("det-{tag}"),
            model_config: &mcfg,
            base_params: &params,
            spec: &spec,
            lambda: 0.5,
            envs: &[t1_env()],
            data: &data,
            train: &train,
            out_dir: out.path(),
        })
        .unwrap();
        ckpts.push(std::fs::read(&rec.final_checkpoint).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1], "same seed must give byte-identical checkpoints");
}

#[test]
fn lambda_zero_ignores_environments() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let spec = ga_spec();
    let train = quick_train(10);

    let mut ckpts = Vec::new();
    for envs in [vec![], vec![t1_env()]] {
        let out = tempfile::tempdir().unwrap();
        let rec = run_unlearning(&UnlearnRunInputs {
            run_id: "lz".to_string(),
            model_config: &mcfg,
            base_params: &params,
            spec: &spec,
            lambda: 0.0,
            envs: &envs,
            data: &data,
            train: &train,
            out_dir: out.path(),
        })
        .unwrap();
        ckpts.push(std::fs::read(&rec.final_checkpoint).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1], "lambda = 0 run must be byte-identical to the baseline path");
}

#[test]
fn zero_steps_is_identity() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let out = tempfile::tempdir().unwrap();
    let rec = run_unlearning(&UnlearnRunInputs {
        run_id: "zero".to_string(),
        model_config: &mcfg,
        base_params: &params,
        spec: &ga_spec(),
        lambda: 0.0,
        envs: &[],
        data: &data,
        train: &quick_train(0),
        out_dir: out.path(),
    })
    .unwrap();
    let (loaded, _) = load_checkpoint(&rec.final_checkpoint).unwrap();
    assert_eq!(loaded, rounded_copy(&params));
}

#[test]
fn accumulation_matches_large_batch_under_sgd() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let spec = ga_spec();

    let run = |accum: usize, batch: usize| {
        let out = tempfile::tempdir().unwrap();
        let rec = run_unlearning(&UnlearnRunInputs {
            run_id: format!("acc{accum}"),
            model_config: &mcfg,
            base_params: &params,
            spec: &spec,
            lambda: 0.0,
            envs: &[],
            data: &data,
            train: &TrainConfig {
                learning_rate: 1e-2,
                optimizer: OptimizerKind::Sgd,
                max_steps: 6,
                batch_size: batch,
                grad_accumulation: accum,
                eval_interval: 100,
                seed: 11,
                ..Default::default()
            },
            out_dir: out.path(),
        })
        .unwrap();
        let (p, _) = load_checkpoint(&rec.final_checkpoint).unwrap();
        p.flatten()
    };

    // Accumulating k micro-batches of size b draws the same sample sequence
    // as one batch of size k*b, so the SGD updates must agree.
    let small = run(4, 4);
    let large = run(1, 16);
    let mut max_diff = 0.0f64;
    for (a, b) in small.iter().zip(large.iter()) {
        max_diff = max_diff.max((a - b).abs());
    }
    assert!(max_diff < 1e-10, "accumulation equivalence violated: {max_diff}");
}

#[test]
fn finetune_zero_epochs_has_only_initial_eval() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let out = tempfile::tempdir().unwrap();
    let rec = run_finetune(&FinetuneRunInputs {
        run_id: "f0".to_string(),
        model_config: &mcfg,
        start_params: &params,
        task_name: "t1".to_string(),
        train_set: data.split("t1", "train").unwrap(),
        task_eval: data.split("t1", "eval").unwrap(),
        forget_eval: data.split("forget", "eval").unwrap(),
        data: &data,
        train: &TrainConfig {
            max_epochs: 0,
            ..quick_train(0)
        },
        out_dir: out.path(),
        keep_epoch_checkpoints: false,
    })
    .unwrap();
    let hist = rec.eval_history.unwrap();
    assert_eq!(hist.epochs(), 1);
    assert_eq!(hist.records[0].epoch, 0);
}

#[test]
fn finetune_milestones_reproduce_logged_metrics() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let out = tempfile::tempdir().unwrap();
    let rec = run_finetune(&FinetuneRunInputs {
        run_id: "fm".to_string(),
        model_config: &mcfg,
        start_params: &params,
        task_name: "t2".to_string(),
        train_set: data.split("t2", "train").unwrap(),
        task_eval: data.split("t2", "eval").unwrap(),
        forget_eval: data.split("forget", "eval").unwrap(),
        data: &data,
        train: &TrainConfig {
            max_epochs: 3,
            convergence_window: 2,
            ..quick_train(0)
        },
        out_dir: out.path(),
        keep_epoch_checkpoints: true,
    })
    .unwrap();
    let hist = rec.eval_history.as_ref().unwrap();
    for m in rec.milestones.iter().filter(|m| m.label.starts_with("epoch")) {
        let epoch = m.epoch.unwrap();
        let (p, cfg) = load_checkpoint(&m.path).unwrap();
        let fa = ilu_core::metrics::exact_match_accuracy(&cfg, &p, data.split("t2", "eval").unwrap())
            .unwrap();
        let fq =
            ilu_core::metrics::forget_quality(&cfg, &p, data.split("forget", "eval").unwrap())
                .unwrap();
        let logged = hist.records[epoch];
        assert!((fa - logged.fa).abs() < 1e-9, "epoch {epoch} fa {fa} vs {}", logged.fa);
        assert!((fq - logged.fq).abs() < 1e-9, "epoch {epoch} fq {fq} vs {}", logged.fq);
    }
}

#[test]
fn divergent_run_aborts_with_diagnostic() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = mini_suite(data_dir.path());
    let (mcfg, params) = mini_model();
    let out = tempfile::tempdir().unwrap();
    let err = run_unlearning(&UnlearnRunInputs {
        run_id: "boom".to_string(),
        model_config: &mcfg,
        base_params: &params,
        spec: &ga_spec(),
        lambda: 0.0,
        envs: &[],
        data: &data,
        train: &TrainConfig {
            learning_rate: 1e160,
            optimizer: OptimizerKind::Sgd,
            max_steps: 10,
            batch_size: 4,
            eval_interval: 100,
            seed: 3,
            ..Default::default()
        },
        out_dir: out.path(),
    })
    .unwrap_err();
    assert!(matches!(err, ilu_core::Error::Numeric(_)), "{err}");
    assert!(out.path().join("diagnostic.json").exists());
}
