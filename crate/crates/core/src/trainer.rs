//! Training loop: Adam with staircase learning-rate decay, gradient
//! clipping by global norm, periodic dev evaluation, and best-checkpoint
//! retention by the mean of recall at 10 and MRR.

use crate::checkpoint::save_checkpoint;
use crate::data::{pad_batch, PreparedDialogue};
use crate::encoder::layer_weights;
use crate::error::{Error, Result};
use crate::metrics::{default_ks, rank_dialogue, report, MetricsReport};
use crate::model::{batch_loss, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_lr0() -> f64 {
    0.001
}
fn default_decay_rate() -> f64 {
    0.96
}
fn default_decay_steps() -> u64 {
    5000
}
fn default_batch_size() -> usize {
    2
}
fn default_eval_every() -> u64 {
    100
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_clip_norm() -> f64 {
    10.0
}

/// Optimization hyperparameters. The defaults reproduce the reference
/// recipe: Adam at 0.001 decayed by 0.96 every 5000 steps, batches of 2
/// dialogues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_decay_steps")]
    pub decay_steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub max_steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: default_lr0(),
            decay_rate: default_decay_rate(),
            decay_steps: default_decay_steps(),
            batch_size: default_batch_size(),
            max_steps: 0,
            eval_every: default_eval_every(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            clip_norm: default_clip_norm(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || !self.lr0.is_finite() {
            return Err(Error::Config("lr0 must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.decay_rate) || self.decay_rate == 0.0 {
            return Err(Error::Config("decay_rate must lie in (0, 1]".to_string()));
        }
        if self.decay_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "decay_steps, batch_size and eval_every must be positive".to_string(),
            ));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.epsilon <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "epsilon and clip_norm must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Staircase decay: lr0 * decay_rate^floor(step / decay_steps).
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay_rate.powi((step / config.decay_steps) as i32)
}

/// One Adam update over the listed (store index, gradient) pairs, with bias
/// correction and global-norm clipping. `step` is the 1-based Adam timestep;
/// the learning rate is the schedule value before this step.
pub fn adam_step(
    model: &mut Model,
    grads: &[(usize, Tensor<f32>)],
    step: u64,
    config: &TrainConfig,
) -> Result<()> {
    let lr = lr_at(step.saturating_sub(1), config);
    let mut squared_norm = 0.0f64;
    for (index, grad) in grads {
        let param = model.params().at(*index);
        if grad.shape() != param.value.shape() {
            return Err(Error::ParamMismatch {
                name: param.name.clone(),
                expected: param.value.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        for &g in grad.data() {
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("gradient of {}", param.name),
                });
            }
            squared_norm += f64::from(g) * f64::from(g);
        }
    }
    let norm = squared_norm.sqrt();
    let scale = if norm > config.clip_norm {
        (config.clip_norm / norm) as f32
    } else {
        1.0
    };

    let b1 = config.beta1 as f32;
    let b2 = config.beta2 as f32;
    let m_correction = 1.0 - (config.beta1).powi(step as i32);
    let v_correction = 1.0 - (config.beta2).powi(step as i32);
    let lr32 = lr as f32;
    let eps = config.epsilon as f32;

    for (index, grad) in grads {
        let param = model.params_mut().at_mut(*index);
        let pad_width = if param.name == "embedding.table" {
            // the padding row is structurally unreachable by gradients;
            // keep it pinned at zero regardless
            grad.shape()[1]
        } else {
            0
        };
        let m = param.m.data_mut();
        let v = param.v.data_mut();
        let p = param.value.data_mut();
        for (j, &raw) in grad.data().iter().enumerate() {
            let g = if j < pad_width { 0.0 } else { raw * scale };
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / m_correction as f32;
            let v_hat = v[j] / v_correction as f32;
            p[j] -= lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the training log, emitted at every evaluation point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub dev: MetricsReport,
    pub ahre_layer_weights: Vec<f64>,
}

/// Result of a training run: the best model by the selection metric, where
/// it was found, and the full evaluation log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_step: u64,
    pub best_metric: f64,
    pub last: Model,
    pub log: Vec<LogRecord>,
}

/// Score every dialogue of a labeled set and compute ranking metrics.
pub fn evaluate(model: &Model, dialogues: &[PreparedDialogue]) -> Result<MetricsReport> {
    if dialogues.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation set".to_string()));
    }
    let mut ranked = Vec::with_capacity(dialogues.len());
    let mut max_candidates = 1;
    for dialogue in dialogues {
        let batch = pad_batch(std::slice::from_ref(dialogue));
        let scores = model.score_batch(&batch)?.remove(0);
        max_candidates = max_candidates.max(scores.len());
        ranked.push(rank_dialogue(&dialogue.example_id, &scores, dialogue.label));
    }
    report(&ranked, &default_ks(max_candidates))
}

fn layer_mix(model: &Model) -> Vec<f64> {
    let logits: Vec<f64> = model
        .params()
        .get("encoder.layer_logits")
        .map(|p| p.value.data().iter().map(|&v| f64::from(v)).collect())
        .unwrap_or_default();
    layer_weights(&logits)
}

/// The full loop: shuffled epochs of mini-batches, Adam steps, periodic dev
/// evaluation, and best-model retention. If `checkpoint_path` is given, the
/// best checkpoint is (re)written whenever it improves, so a later
/// divergence still leaves the last good model on disk. `on_record` receives
/// every log record as it is produced.
pub fn train(
    model: Model,
    train_set: &[PreparedDialogue],
    dev_set: &[PreparedDialogue],
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::DegenerateInput(
            "training and dev sets must be non-empty".to_string(),
        ));
    }
    for dialogue in train_set {
        if dialogue.label.is_none() {
            return Err(Error::MissingLabels(format!(
                "training example {} has no label",
                dialogue.example_id
            )));
        }
    }

    let mut model = model;
    let mut log = Vec::new();
    let mut record_eval = |model: &Model,
                           step: u64,
                           train_loss: f64,
                           log: &mut Vec<LogRecord>|
     -> Result<MetricsReport> {
        let dev = evaluate(model, dev_set)?;
        let record = LogRecord {
            step,
            lr: lr_at(step, config),
            train_loss,
            dev: dev.clone(),
            ahre_layer_weights: layer_mix(model),
        };
        on_record(&record);
        log.push(record);
        Ok(dev)
    };

    let initial = record_eval(&model, 0, f64::NAN, &mut log)?;
    let mut best = model.clone();
    let mut best_step = 0u64;
    let mut best_metric = initial.selection_metric();
    if let Some(path) = checkpoint_path {
        save_checkpoint(&best, best_step, Some(best_metric), path)?;
    }

    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < config.max_steps {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch));
        order.shuffle(&mut rng);
        epoch += 1;

        for chunk in order.chunks(config.batch_size) {
            if step >= config.max_steps {
                break 'outer;
            }
            let dialogues: Vec<PreparedDialogue> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = pad_batch(&dialogues);

            let mut tape = Tape::<f32>::new();
            let graph = model.load_graph(&mut tape)?;
            let loss = batch_loss(&mut tape, &graph.refs, &model.config, &batch)?;
            let train_loss = f64::from(tape.value(loss).data()[0]);
            if !train_loss.is_finite() {
                return Err(Error::Divergence {
                    step: step + 1,
                    what: "training loss".to_string(),
                });
            }
            let grads = tape.backward(loss)?;
            let updates: Vec<(usize, Tensor<f32>)> = graph
                .trainable
                .iter()
                .filter_map(|&(index, leaf)| grads.get(leaf).map(|g| (index, g.clone())))
                .collect();
            adam_step(&mut model, &updates, step + 1, config)?;
            step += 1;

            if step.is_multiple_of(config.eval_every) || step == config.max_steps {
                let dev = record_eval(&model, step, train_loss, &mut log)?;
                let metric = dev.selection_metric();
                if metric > best_metric {
                    best = model.clone();
                    best_step = step;
                    best_metric = metric;
                    if let Some(path) = checkpoint_path {
                        save_checkpoint(&best, best_step, Some(best_metric), path)?;
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        best,
        best_step,
        best_metric,
        last: model,
        log,
    })
}

/// Forward-only scores for a labeled or unlabeled set, one row per dialogue,
/// preserving input order.
pub fn predict(model: &Model, dialogues: &[PreparedDialogue]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(dialogues.len());
    for dialogue in dialogues {
        let batch = pad_batch(std::slice::from_ref(dialogue));
        rows.push(model.score_batch(&batch)?.remove(0));
    }
    Ok(rows)
}
