//! Experiment configuration: one TOML file drives the whole pipeline.
//! Unknown keys are rejected.

use ilu_core::datasets::SyntheticSuiteConfig;
use ilu_core::error::{Error, Result};
use ilu_core::models::{ModelConfig, TinyLmConfig};
use ilu_core::objectives::UnlearnMethod;
use ilu_core::trainer::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds for the unlearning/attack cells; pretraining and data
    /// generation use the suite seed.
    pub seeds: Vec<u64>,
    pub suite: SyntheticSuiteConfig,
    pub model: ModelConfig,
    pub unlearn: UnlearnPhase,
    pub finetune: FinetunePhase,
    pub envs: EnvAssignments,
    pub lambda: LambdaConfig,
    pub relearn: RelearnConfig,
    /// Matrix cells run concurrently up to this limit.
    pub parallel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnPhase {
    /// Base methods the matrix compares.
    pub methods: Vec<UnlearnMethod>,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub eval_interval: usize,
    pub gamma: f64,
    pub beta: f64,
    pub rmu_c: f64,
    pub rmu_alpha: f64,
    pub rmu_layer: usize,
    pub ga_lr: f64,
    pub npo_lr: f64,
    pub rmu_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetunePhase {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence_threshold: f64,
    pub convergence_window: usize,
    /// Pretraining epoch budget (same loop, mixture data).
    pub pretrain_max_epochs: usize,
    pub pretrain_learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvAssignments {
    /// The single invariance environment for ILU(single).
    pub invariance_env: String,
    /// Environments for ILU(multi).
    pub multi_envs: Vec<String>,
    /// Downstream tasks used as attack evaluations.
    pub attack_tasks: Vec<String>,
    pub single_env_batch: usize,
    pub multi_env_batch: usize,
    /// Attack tasks that overlap invariance environments must be listed
    /// here, acknowledging they were seen during unlearning.
    pub seen_tasks: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    pub default: f64,
    pub sweep: Vec<f64>,
    /// Task attacked in the lambda sweep.
    pub sweep_task: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelearnConfig {
    pub sample_count: usize,
    pub epochs: usize,
    /// Relearning reuses the fine-tuning learning rate unless overridden.
    pub learning_rate: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            suite: SyntheticSuiteConfig::default(),
            model: ModelConfig::TinyLm(TinyLmConfig {
                vocab: 64,
                hidden_dim: 32,
                layers: 2,
                heads: 4,
                context: 32,
            }),
            unlearn: UnlearnPhase::default(),
            finetune: FinetunePhase::default(),
            envs: EnvAssignments::default(),
            lambda: LambdaConfig::default(),
            relearn: RelearnConfig::default(),
            parallel: 2,
        }
    }
}

impl Default for UnlearnPhase {
    fn default() -> Self {
        UnlearnPhase {
            methods: vec![UnlearnMethod::Rmu, UnlearnMethod::Npo],
            steps: 300,
            batch_size: 16,
            grad_accumulation: 1,
            eval_interval: 50,
            gamma: 1.0,
            beta: 0.5,
            rmu_c: 4.0,
            rmu_alpha: 8.0,
            rmu_layer: 0,
            ga_lr: 3e-4,
            npo_lr: 3e-4,
            rmu_lr: 1e-3,
        }
    }
}

impl Default for FinetunePhase {
    fn default() -> Self {
        FinetunePhase {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 8,
            convergence_threshold: 0.01,
            convergence_window: 3,
            pretrain_max_epochs: 30,
            pretrain_learning_rate: 2e-3,
        }
    }
}

impl Default for EnvAssignments {
    fn default() -> Self {
        EnvAssignments {
            invariance_env: "t1".to_string(),
            multi_envs: vec!["t1".to_string(), "t2".to_string(), "t3".to_string()],
            attack_tasks: vec!["t1".to_string(), "t2".to_string(), "t3".to_string()],
            single_env_batch: 48,
            multi_env_batch: 16,
            seen_tasks: vec!["t1".to_string()],
        }
    }
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            default: 0.5,
            sweep: vec![0.05, 0.1, 0.5, 1.0, 2.0],
            sweep_task: "t2".to_string(),
        }
    }
}

impl Default for RelearnConfig {
    fn default() -> Self {
        RelearnConfig {
            sample_count: 60,
            epochs: 1,
            learning_rate: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::argument(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::argument(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::argument("seed list must be nonempty".to_string()));
        }
        self.suite.validate()?;
        self.model.validate()?;
        if self.parallel == 0 {
            return Err(Error::argument("parallel must be >= 1".to_string()));
        }
        let domain_names: Vec<&str> = self.suite.domains.iter().map(|d| d.name.as_str()).collect();
        for name in std::iter::once(&self.envs.invariance_env)
            .chain(self.envs.multi_envs.iter())
            .chain(self.envs.attack_tasks.iter())
            .chain(std::iter::once(&self.lambda.sweep_task))
        {
            if !domain_names.contains(&name.as_str()) {
                return Err(Error::argument(format!(
                    "environment `{name}` is not a suite domain"
                )));
            }
        }
        // Attack tasks that were invariance environments must be flagged.
        for task in &self.envs.attack_tasks {
            let is_inv = task == &self.envs.invariance_env || self.envs.multi_envs.contains(task);
            if is_inv && !self.envs.seen_tasks.contains(task) {
                return Err(Error::argument(format!(
                    "attack task `{task}` overlaps an invariance environment; list it under seen_tasks"
                )));
            }
        }
        if let ModelConfig::TinyLm(m) = &self.model {
            if m.vocab < self.suite.vocab {
                return Err(Error::argument(format!(
                    "model vocab {} smaller than suite vocab {}",
                    m.vocab, self.suite.vocab
                )));
            }
            if m.context < self.suite.seq_len {
                return Err(Error::argument(format!(
                    "model context {} shorter than suite sequences {}",
                    m.context, self.suite.seq_len
                )));
            }
            if self.unlearn.rmu_layer >= m.layers {
                return Err(Error::argument(format!(
                    "rmu_layer {} out of range for {} layers",
                    self.unlearn.rmu_layer, m.layers
                )));
            }
        }
        Ok(())
    }

    pub fn unlearn_lr(&self, method: UnlearnMethod) -> f64 {
        match method {
            UnlearnMethod::Ga => self.unlearn.ga_lr,
            UnlearnMethod::Npo => self.unlearn.npo_lr,
            UnlearnMethod::Rmu => self.unlearn.rmu_lr,
        }
    }

    pub fn unlearn_train_config(&self, method: UnlearnMethod, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.unlearn_lr(method),
            optimizer: OptimizerKind::adamw_default(),
            max_steps: self.unlearn.steps,
            max_epochs: 0,
            grad_accumulation: self.unlearn.grad_accumulation,
            batch_size: self.unlearn.batch_size,
            eval_interval: self.unlearn.eval_interval,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn finetune_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune.learning_rate,
            optimizer: OptimizerKind::adamw_default(),
            max_steps: 0,
            max_epochs: self.finetune.max_epochs,
            grad_accumulation: 1,
            batch_size: self.finetune.batch_size,
            convergence_threshold: self.finetune.convergence_threshold,
            convergence_window: self.finetune.convergence_window,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn pretrain_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune.pretrain_learning_rate,
            optimizer: OptimizerKind::adamw_default(),
            max_steps: 0,
            max_epochs: self.finetune.pretrain_max_epochs,
            grad_accumulation: 1,
            batch_size: 48,
            convergence_threshold: self.finetune.convergence_threshold,
            convergence_window: self.finetune.convergence_window,
            seed: self.suite.seed,
            ..TrainConfig::default()
        }
    }

    pub fn relearn_train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.finetune_train_config(seed);
        if let Some(lr) = self.relearn.learning_rate {
            cfg.learning_rate = lr;
        }
        cfg.batch_size = self.finetune.batch_size.min(self.relearn.sample_count.max(1));
        cfg
    }
}

/// Matrix run variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain unlearning, lambda = 0.
    Base,
    /// Invariance regularization with the single configured environment.
    IluSingle,
    /// Invariance regularization over all configured environments.
    IluMulti,
}

impl Variant {
    pub fn all() -> [Variant; 3] {
        [Variant::Base, Variant::IluSingle, Variant::IluMulti]
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::IluSingle => "ilu1",
            Variant::IluMulti => "ilum",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}
