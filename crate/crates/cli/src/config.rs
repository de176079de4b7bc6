//! Experiment configuration: strict JSON parsing (unknown fields rejected),
//! defaults for everything except `seed` and `mode`, and validation. The
//! fully resolved config is echoed into the output directory so a run can be
//! reproduced without the original file.

use serde::{Deserialize, Serialize};

use fedlease_core::federation::{Mode, RunConfig};
use fedlease_core::synthtasks::TaskGroupSpec;
use fedlease_core::trainer::AdamHyper;

/// Informational record of the adapter initialization scheme. Not tunable;
/// kept in the config echo so the choice is visible in every run's output.
pub const A_INIT_RULE: &str = "gaussian(0, 1/sqrt(fan_in))";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// One of `fedlease`, `single_lora`, `individual_lora`, `fixed_topk`.
    pub mode: String,
    /// Router fan-in for `fixed_topk`; required for that mode, rejected
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,

    #[serde(default = "d_num_groups")]
    pub num_groups: usize,
    /// Defaults to four clients in every group.
    #[serde(default)]
    pub clients_per_group: Option<Vec<usize>>,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_teacher_rank")]
    pub teacher_rank: usize,
    #[serde(default = "d_residual_scale")]
    pub residual_scale: f64,
    #[serde(default = "d_noise_flip_prob")]
    pub noise_flip_prob: f64,
    #[serde(default = "d_train_per_client")]
    pub train_per_client: usize,
    #[serde(default = "d_test_per_client")]
    pub test_per_client: usize,

    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_m_max")]
    pub m_max: usize,

    #[serde(default = "d_init_epochs")]
    pub init_epochs: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,

    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub router_weight_decay: f64,

    #[serde(default = "d_a_init")]
    pub a_init: String,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
}

fn d_num_groups() -> usize {
    3
}
fn d_input_dim() -> usize {
    16
}
fn d_hidden_dim() -> usize {
    16
}
fn d_num_classes() -> usize {
    4
}
fn d_teacher_rank() -> usize {
    2
}
fn d_residual_scale() -> f64 {
    1.0
}
fn d_noise_flip_prob() -> f64 {
    0.05
}
fn d_train_per_client() -> usize {
    400
}
fn d_test_per_client() -> usize {
    200
}
fn d_rank() -> usize {
    4
}
fn d_m_max() -> usize {
    8
}
fn d_init_epochs() -> usize {
    2
}
fn d_rounds() -> usize {
    10
}
fn d_local_epochs() -> usize {
    2
}
fn d_batch_size() -> usize {
    32
}
fn d_learning_rate() -> f64 {
    1e-2
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}
fn d_a_init() -> String {
    A_INIT_RULE.to_string()
}
fn d_out_dir() -> String {
    "out".to_string()
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self, String> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Materializes defaults that depend on other fields, so the echoed
    /// config is self-contained.
    fn resolve(&mut self) {
        if self.clients_per_group.is_none() {
            self.clients_per_group = Some(vec![4; self.num_groups]);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.mode_enum()?;
        if self.m_max < 2 {
            return Err(
                "m_max: expert selection sweeps k from 2, so m_max must be at least 2".into(),
            );
        }
        if self.init_epochs == 0 {
            return Err("init_epochs: must be at least 1 so B matrices leave zero".into());
        }
        if self.a_init != A_INIT_RULE {
            return Err(format!(
                "a_init: informational field, only \"{A_INIT_RULE}\" is supported"
            ));
        }
        self.task_spec()?.validate().map_err(|e| e.to_string())?;
        self.to_run_config()?
            .validate()
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn mode_enum(&self) -> Result<Mode, String> {
        let mode = match self.mode.as_str() {
            "fedlease" => Mode::FedLease,
            "single_lora" => Mode::SingleLora,
            "individual_lora" => Mode::IndividualLora,
            "fixed_topk" => {
                let k = self
                    .top_k
                    .ok_or_else(|| "top_k: required when mode is fixed_topk".to_string())?;
                Mode::FixedTopK(k)
            }
            other => {
                return Err(format!(
                    "mode: unknown mode {other:?}; expected fedlease, single_lora, individual_lora or fixed_topk"
                ))
            }
        };
        if self.mode != "fixed_topk" && self.top_k.is_some() {
            return Err(format!(
                "top_k: only valid with mode fixed_topk, not {:?}",
                self.mode
            ));
        }
        Ok(mode)
    }

    pub fn task_spec(&self) -> Result<TaskGroupSpec, String> {
        let clients_per_group = self
            .clients_per_group
            .clone()
            .unwrap_or_else(|| vec![4; self.num_groups]);
        Ok(TaskGroupSpec {
            num_groups: self.num_groups,
            clients_per_group,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            teacher_rank: self.teacher_rank,
            residual_scale: self.residual_scale,
            noise_flip_prob: self.noise_flip_prob,
            train_per_client: self.train_per_client,
            test_per_client: self.test_per_client,
        })
    }

    pub fn to_run_config(&self) -> Result<RunConfig, String> {
        Ok(RunConfig {
            seed: self.seed,
            task: self.task_spec()?,
            rank: self.rank,
            m_max: self.m_max,
            init_epochs: self.init_epochs,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optim: AdamHyper {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                weight_decay: self.weight_decay,
                router_weight_decay: self.router_weight_decay,
            },
            mode: self.mode_enum()?,
        })
    }

    /// Fields that must agree across configs fed to `compare`: everything
    /// except the strategy selector and output directory.
    pub fn shared_fingerprint(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.mode = String::new();
        c.top_k = None;
        c.out_dir = String::new();
        c
    }
}
