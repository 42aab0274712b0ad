//! Flat run configuration: one JSON document holds every knob with its
//! default, and `key=value` command-line overrides are applied on top before
//! deserialization. Unknown keys are rejected by name.

use seqmatch_core::model::{ModeFlags, ModelConfig};
use seqmatch_core::skipgram::SkipGramConfig;
use seqmatch_core::trainer::TrainConfig;
use seqmatch_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model dimensions
    pub general_dim: usize,
    pub task_dim: usize,
    pub hidden_dim: usize,
    pub ahre_layers: usize,
    pub mlp_hidden: usize,

    // mode flags
    pub modification: bool,
    pub legacy_pooling: bool,
    pub single_layer_encoder: bool,
    pub trainable_embeddings: bool,

    // data handling
    pub max_context_len: usize,
    pub max_candidate_len: usize,
    pub speaker_tags: bool,
    pub min_count: usize,

    // task-specific embedding pretraining
    pub sg_window: usize,
    pub sg_negatives: usize,
    pub sg_epochs: usize,

    // optimization
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,

    // ensembling
    pub raw_ensemble: bool,

    // dataset files
    pub train_path: Option<String>,
    pub dev_path: Option<String>,
    pub test_path: Option<String>,
    pub corpus_path: Option<String>,
    pub general_embeddings_path: Option<String>,

    // artifacts
    pub vocab_path: String,
    pub embedding_path: String,
    pub checkpoint_path: String,
    pub log_path: String,
    pub scores_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            general_dim: 300,
            task_dim: 100,
            hidden_dim: 200,
            ahre_layers: 3,
            mlp_hidden: 256,
            modification: true,
            legacy_pooling: false,
            single_layer_encoder: false,
            trainable_embeddings: false,
            max_context_len: 160,
            max_candidate_len: 40,
            speaker_tags: false,
            min_count: 1,
            sg_window: 5,
            sg_negatives: 5,
            sg_epochs: 5,
            lr0: 0.001,
            decay_rate: 0.96,
            decay_steps: 5000,
            batch_size: 2,
            max_steps: 0,
            eval_every: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            raw_ensemble: false,
            train_path: None,
            dev_path: None,
            test_path: None,
            corpus_path: None,
            general_embeddings_path: None,
            vocab_path: "vocab.json".to_string(),
            embedding_path: "embeddings.bin".to_string(),
            checkpoint_path: "model.ckpt".to_string(),
            log_path: "train_log.jsonl".to_string(),
            scores_path: "scores.jsonl".to_string(),
        }
    }
}

impl RunConfig {
    /// Read the optional config file, apply `key=value` overrides, and
    /// deserialize with unknown-key rejection.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = match file {
            None => serde_json::Map::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config file {}: {e}", path.display()))
                })?;
                let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("config file {} is not JSON: {e}", path.display()))
                })?;
                match value {
                    serde_json::Value::Object(map) => map,
                    other => {
                        return Err(Error::Config(format!(
                            "config file {} must hold a JSON object, found {}",
                            path.display(),
                            json_kind(&other)
                        )))
                    }
                }
            }
        };
        for spec in overrides {
            let (key, raw) = spec.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {spec:?} is not of the form key=value"))
            })?;
            // bare words become strings; everything that parses as JSON
            // (numbers, booleans, null, quoted strings) is taken literally
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            doc.insert(key.to_string(), value);
        }
        serde_json::from_value(serde_json::Value::Object(doc))
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            general_dim: self.general_dim,
            task_dim: self.task_dim,
            hidden_dim: self.hidden_dim,
            ahre_layers: self.ahre_layers,
            mlp_hidden: self.mlp_hidden,
            modes: ModeFlags {
                modification: self.modification,
                legacy_pooling: self.legacy_pooling,
                single_layer_encoder: self.single_layer_encoder,
                trainable_embeddings: self.trainable_embeddings,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            decay_rate: self.decay_rate,
            decay_steps: self.decay_steps,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
        }
    }

    pub fn skipgram_config(&self) -> SkipGramConfig {
        SkipGramConfig {
            dim: self.task_dim,
            window: self.sg_window,
            negatives: self.sg_negatives,
            epochs: self.sg_epochs,
            seed: self.seed,
        }
    }

    pub fn require(path: &Option<String>, key: &str) -> Result<PathBuf> {
        path.as_ref().map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!(
                "{key} is not set; pass {key}=<file> or put it in the config file"
            ))
        })
    }

    /// The corpus for vocabulary and task-vector construction; defaults to
    /// the training set.
    pub fn corpus(&self) -> Result<PathBuf> {
        if self.corpus_path.is_some() {
            Self::require(&self.corpus_path, "corpus_path")
        } else {
            Self::require(&self.train_path, "train_path")
        }
    }
}

fn json_kind(value: &serde_json::Value) -> &'static str {
    match value {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a boolean",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}
