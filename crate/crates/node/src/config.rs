//! Run configuration shared by every peer.
//!
//! ```toml
//! epsilon = 1e-3
//! base_eta = 0.01
//! n_inferences = 4
//! max_iter = 200
//! quantized = true
//!
//! [task]
//! kind = "mlp"
//! inputs = 16
//! hidden = 48
//! classes = 4
//! dataset_seed = 1
//! ```

use std::path::Path;
use std::time::Duration;

use onebyte_core::codec::{CodecError, CompandRange};
use onebyte_core::spsa::EtaSchedule;
use onebyte_core::tasks::{Task, TaskError, TaskKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Quadratic,
    Linear,
    Constant,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskName,
    /// Dimension of the data-free objectives.
    pub dim: usize,
    pub value: f64,
    pub features: usize,
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dataset_seed: u64,
    pub batch_size: usize,
    pub eval_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskName::Quadratic,
            dim: 100,
            value: 0.0,
            features: 16,
            inputs: 16,
            hidden: 48,
            classes: 4,
            dataset_seed: 1,
            batch_size: 32,
            eval_size: 1024,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<Task, TaskError> {
        let kind = match self.kind {
            TaskName::Quadratic => TaskKind::Quadratic { dim: self.dim },
            TaskName::Linear => TaskKind::Linear { dim: self.dim },
            TaskName::Constant => TaskKind::Constant {
                dim: self.dim,
                value: self.value,
            },
            TaskName::Logistic => TaskKind::Logistic {
                features: self.features,
            },
            TaskName::Mlp => TaskKind::Mlp {
                inputs: self.inputs,
                hidden: self.hidden,
                classes: self.classes,
            },
        };
        let task = Task::new(kind, self.dataset_seed)
            .with_batch_size(self.batch_size)
            .with_eval_size(self.eval_size);
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub epsilon: f32,
    pub base_eta: f64,
    /// Halve the learning rate every this many iterations; unset means constant.
    pub eta_half_life: Option<u64>,
    pub n_inferences: usize,
    pub max_iter: u64,
    pub quantized: bool,
    pub g_min: f64,
    pub g_max: f64,
    pub t_timeout_ms: u64,
    pub t_apply_grads_ms: u64,
    pub history_window: usize,
    pub restore_every: u64,
    pub weight_chunk_bytes: u64,
    pub init_seed: u64,
    pub identical_data: bool,
    pub checksum_all_peers: bool,
    /// Training starts once this many peers (including self) are known.
    pub min_peers: usize,
    /// Evaluate the held-out loss every this many iterations (0 disables).
    pub eval_every: u64,
    /// After being cut off from every peer by timeouts, join again through a former peer.
    pub rejoin: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            epsilon: 1e-3,
            base_eta: 1e-2,
            eta_half_life: None,
            n_inferences: 4,
            max_iter: 100,
            quantized: true,
            g_min: CompandRange::DEFAULT_G_MIN,
            g_max: CompandRange::DEFAULT_G_MAX,
            t_timeout_ms: 60_000,
            t_apply_grads_ms: 30_000,
            history_window: 64,
            restore_every: 1,
            weight_chunk_bytes: 4 * 1024 * 1024,
            init_seed: 0,
            identical_data: false,
            checksum_all_peers: false,
            min_peers: 1,
            eval_every: 1,
            rejoin: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.build()?;
        self.range()?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.base_eta.is_finite() && self.base_eta >= 0.0) {
            return bad("base_eta must be non-negative");
        }
        if self.n_inferences == 0 || self.n_inferences > u16::MAX as usize {
            return bad("n_inferences must be in 1..=65535");
        }
        if self.history_window == 0 || self.restore_every == 0 || self.min_peers == 0 {
            return bad("history_window, restore_every and min_peers must be positive");
        }
        if self.weight_chunk_bytes < 4 || !self.weight_chunk_bytes.is_multiple_of(4) {
            return bad("weight_chunk_bytes must be a positive multiple of 4");
        }
        if self.weight_chunk_bytes > (onebyte_core::wire::MAX_PAYLOAD - 64) as u64 {
            return bad("weight_chunk_bytes exceeds the frame limit");
        }
        Ok(())
    }

    pub fn build_task(&self) -> Result<Task, ConfigError> {
        Ok(self.task.build()?)
    }

    pub fn range(&self) -> Result<CompandRange, ConfigError> {
        Ok(CompandRange::new(self.g_min, self.g_max)?)
    }

    /// The companding range when quantized mode is on.
    pub fn quantizer(&self) -> Option<CompandRange> {
        self.quantized.then(|| self.range().expect("validated range"))
    }

    pub fn eta_schedule(&self) -> EtaSchedule {
        EtaSchedule {
            base_eta: self.base_eta,
            half_life: self.eta_half_life,
        }
    }

    pub fn t_timeout(&self) -> Duration {
        Duration::from_millis(self.t_timeout_ms)
    }

    pub fn t_apply(&self) -> Duration {
        Duration::from_millis(self.t_apply_grads_ms)
    }
}
