//! Run configuration: one TOML or JSON file per run, overridable from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{GenerateBenchConfig, KernelBenchConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::optim::TrainConfig;
use super::train::Stage2Options;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Windows of the built-in (or a user-supplied) text corpus.
    Corpus,
    /// Synthetic passkey retrieval.
    Passkey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: Task,
    /// Plain-text corpus; the built-in one when unset.
    pub corpus_path: Option<PathBuf>,
    /// Passkey JSONL files; generated from the seed when unset.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Passkey evaluation lengths.
    pub eval_lengths: Vec<usize>,
    /// Passkey examples per (length, depth decile) cell.
    pub per_cell: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Corpus,
            corpus_path: None,
            train_path: None,
            eval_path: None,
            seq_len: 128,
            n_train: 400,
            n_eval: 32,
            eval_lengths: vec![256, 384, 512, 768, 1024],
            per_cell: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent directory of run directories.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage2_options: Stage2Options,
    /// Skip stage 1 and fine-tune the freshly initialized student.
    pub no_approx: bool,
    pub checkpoints: CheckpointPaths,
    pub kernel_bench: KernelBenchConfig,
    pub generate_bench: GenerateBenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            teacher: TrainConfig {
                stage: "teacher".into(),
                ..TrainConfig::stage1()
            },
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            stage2_options: Stage2Options::default(),
            no_approx: false,
            checkpoints: CheckpointPaths::default(),
            kernel_bench: KernelBenchConfig::default(),
            generate_bench: GenerateBenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config toml: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config json: {e}")))
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for t in [&self.teacher, &self.stage1, &self.stage2] {
            t.validate()?;
        }
        let d = &self.data;
        if d.seq_len < 2 || d.n_train == 0 {
            return Err(Error::Config("data needs seq_len >= 2 and n_train >= 1".into()));
        }
        if d.task == Task::Passkey && (d.eval_lengths.is_empty() || d.per_cell == 0) {
            return Err(Error::Config("passkey evaluation needs eval_lengths and per_cell".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the snapshot, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.snapshot()?.as_bytes())))
    }
}
