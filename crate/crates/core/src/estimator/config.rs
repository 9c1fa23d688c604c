use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    #[default]
    Local,
    Worker,
    Ps,
    Evaluator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(rename = "type")]
    pub task_type: TaskType,
    #[serde(default)]
    pub index: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_ps: usize,
    pub num_workers: usize,
}

fn default_save_steps() -> u64 {
    100
}

fn default_keep_max() -> usize {
    5
}

fn default_log_steps() -> u64 {
    100
}

/// Everything the harness needs to know about where and how it runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_dir: PathBuf,
    #[serde(default = "default_save_steps")]
    pub save_checkpoints_steps: u64,
    #[serde(default = "default_keep_max")]
    pub keep_checkpoint_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_steps")]
    pub log_step_count_steps: u64,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub cluster: ClusterConfig,
}

impl RunConfig {
    pub fn new(model_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            model_dir: model_dir.into(),
            save_checkpoints_steps: default_save_steps(),
            keep_checkpoint_max: default_keep_max(),
            seed: 0,
            log_step_count_steps: default_log_steps(),
            task: TaskSpec::default(),
            cluster: ClusterConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_save_checkpoints_steps(mut self, steps: u64) -> Self {
        self.save_checkpoints_steps = steps;
        self
    }

    pub fn with_keep_checkpoint_max(mut self, n: usize) -> Self {
        self.keep_checkpoint_max = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dir.as_os_str().is_empty() {
            return Err(Error::Config("model_dir must not be empty".into()));
        }
        if self.save_checkpoints_steps == 0 {
            return Err(Error::Config(
                "save_checkpoints_steps must be at least 1".into(),
            ));
        }
        if self.keep_checkpoint_max == 0 {
            return Err(Error::Config(
                "keep_checkpoint_max must be at least 1".into(),
            ));
        }
        let limit = match self.task.task_type {
            TaskType::Local | TaskType::Evaluator => 1,
            TaskType::Worker => self.cluster.num_workers,
            TaskType::Ps => self.cluster.num_ps,
        };
        if self.task.index >= limit {
            return Err(Error::Config(format!(
                "task index {} out of range for {:?} tasks (cluster has {limit})",
                self.task.index, self.task.task_type
            )));
        }
        Ok(())
    }
}
