//! Model parameters and end-to-end graph assembly.
//!
//! A [`Model`] owns every trainable array in a flat, name-indexed store and
//! knows how to lay the full scoring graph onto a tape: embed the token ids,
//! encode context and candidate with the shared weighted BiLSTM stack, align
//! and enhance both sides, compose, pool, and score. The same assembly code
//! runs at any float width, so the f32 training path and the f64
//! finite-difference path share one definition.

use crate::data::PaddedBatch;
use crate::embedding::EmbeddingTable;
use crate::encoder::{stack_encode, BiLstmRefs, LstmDirRefs, StackRefs};
use crate::error::{Error, Result};
use crate::matcher::{
    compose, enhance, last_state, legacy_pool, match_features, multidim_pool, soft_align,
    PoolingRefs,
};
use crate::scorer::{candidate_loss, mlp_score, modification_score, MlpRefs, ModificationRefs};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

fn default_true() -> bool {
    true
}

/// Ablation switches. The default configuration enables every feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    /// Add the bilinear last-utterance score to the MLP score.
    #[serde(default = "default_true")]
    pub modification: bool,
    /// Replace per-dimension attentive pooling with max + mean pooling.
    #[serde(default)]
    pub legacy_pooling: bool,
    /// Collapse the encoder stack to one BiLSTM layer.
    #[serde(default)]
    pub single_layer_encoder: bool,
    /// Let gradients update the embedding table.
    #[serde(default)]
    pub trainable_embeddings: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            modification: true,
            legacy_pooling: false,
            single_layer_encoder: false,
            trainable_embeddings: false,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the pretrained (general-purpose) embedding section.
    pub general_dim: usize,
    /// Width of the corpus-trained embedding section.
    pub task_dim: usize,
    /// Hidden units per LSTM direction.
    pub hidden_dim: usize,
    /// Encoder stack depth.
    pub ahre_layers: usize,
    /// Hidden units of the scoring MLP.
    pub mlp_hidden: usize,
    #[serde(default)]
    pub modes: ModeFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            general_dim: 300,
            task_dim: 100,
            hidden_dim: 200,
            ahre_layers: 3,
            mlp_hidden: 256,
            modes: ModeFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.general_dim + self.task_dim
    }

    /// Stack depth after applying the single-layer ablation.
    pub fn effective_layers(&self) -> usize {
        if self.modes.single_layer_encoder {
            1
        } else {
            self.ahre_layers
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim() == 0 {
            return Err(Error::Config(
                "embedding width must be positive".to_string(),
            ));
        }
        for (name, value) in [
            ("hidden_dim", self.hidden_dim),
            ("ahre_layers", self.ahre_layers),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One named parameter array with its optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
    /// Adam first-moment accumulator.
    pub m: Tensor<f32>,
    /// Adam second-moment accumulator.
    pub v: Tensor<f32>,
}

impl Param {
    pub fn new(name: &str, value: Tensor<f32>, trainable: bool) -> Param {
        let shape = value.shape().to_vec();
        Param {
            name: name.to_string(),
            trainable,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            value,
        }
    }
}

/// Ordered, name-indexed parameter collection. Insertion order is the
/// canonical order used for graph wiring and checkpoint payloads.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, param: Param) {
        assert!(
            !self.index.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::ParamMismatch {
                name: name.to_string(),
                expected: vec![],
                found: vec![],
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::ParamMismatch {
                name: name.to_string(),
                expected: vec![],
                found: vec![],
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn at(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }
}

/// Expected (name, shape) pairs for every parameter of a model over a
/// vocabulary of the given size, in canonical store order. Initialization
/// and checkpoint validation both derive from this single listing.
pub fn parameter_schema(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_dim;
    let e = config.embed_dim();
    let h = config.mlp_hidden;
    let layers = config.effective_layers();
    let mut out = vec![("embedding.table".to_string(), vec![vocab_size, e])];
    let lstm = |prefix: String, in_dim: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.w_x"), vec![in_dim, 4 * d]));
        out.push((format!("{prefix}.w_h"), vec![d, 4 * d]));
        out.push((format!("{prefix}.b"), vec![1, 4 * d]));
    };
    for l in 0..layers {
        let in_dim = if l == 0 { e } else { 2 * d };
        for dir in ["fw", "bw"] {
            lstm(format!("encoder.layer{l}.{dir}"), in_dim, &mut out);
        }
    }
    out.push(("encoder.layer_logits".to_string(), vec![1, layers]));
    for dir in ["fw", "bw"] {
        lstm(format!("composer.{dir}"), 8 * d, &mut out);
    }
    out.push(("pool.w1".to_string(), vec![2 * d, 2 * d]));
    out.push(("pool.b1".to_string(), vec![1, 2 * d]));
    out.push(("pool.w2".to_string(), vec![2 * d, 2 * d]));
    out.push(("pool.b2".to_string(), vec![1, 2 * d]));
    out.push(("mlp.w1".to_string(), vec![8 * d, h]));
    out.push(("mlp.b1".to_string(), vec![1, h]));
    out.push(("mlp.w2".to_string(), vec![h, 1]));
    out.push(("mlp.b2".to_string(), vec![1, 1]));
    out.push(("mod.m".to_string(), vec![2 * d, 2 * d]));
    out.push(("mod.w".to_string(), vec![1, 1]));
    out
}

/// Tape handles for every piece of the scoring graph.
#[derive(Clone, Debug)]
pub struct GraphRefs {
    pub embedding: TensorRef,
    pub encoder: StackRefs,
    pub composer: BiLstmRefs,
    pub pool: PoolingRefs,
    pub mlp: MlpRefs,
    pub modification: ModificationRefs,
}

/// A graph laid onto a tape, with the leaf handles of the trainable
/// parameters (paired with their store indices) for gradient readout.
#[derive(Clone, Debug)]
pub struct LoadedGraph {
    pub refs: GraphRefs,
    pub trainable: Vec<(usize, TensorRef)>,
}

/// The full response-selection model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    store: ParamStore,
}

impl Model {
    /// Fresh parameters: weight matrices uniform in ±sqrt(1/fan_in), biases
    /// zero except the LSTM forget-gate block at 1, layer logits zero, the
    /// bilinear matrix 0.1 * identity, and the combination weight zero so
    /// training starts from the pure MLP score.
    pub fn init(config: &ModelConfig, embedding: &EmbeddingTable, seed: u64) -> Result<Model> {
        config.validate()?;
        if embedding.width() != config.embed_dim() {
            return Err(Error::Config(format!(
                "embedding table width {} does not match configured {} + {}",
                embedding.width(),
                config.general_dim,
                config.task_dim
            )));
        }
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in parameter_schema(config, embedding.vocab_size()) {
            // classify by the final path segment so the ".bw" direction
            // segment is never mistaken for a bias
            let last = name.rsplit('.').next().unwrap_or(name.as_str());
            let value = match (name.as_str(), last) {
                ("embedding.table", _) => embedding.matrix().clone(),
                ("mod.m", _) => scaled_identity(2 * d, 0.1),
                ("encoder.layer_logits", _) | ("mod.w", _) => Tensor::zeros(shape.clone()),
                (_, "b") => lstm_bias(d),
                (_, "b1") | (_, "b2") => Tensor::zeros(shape.clone()),
                _ => uniform(&mut rng, shape[0], shape[1]),
            };
            debug_assert_eq!(value.shape(), &shape[..]);
            let trainable = name != "embedding.table" || config.modes.trainable_embeddings;
            store.insert(Param::new(&name, value, trainable));
        }

        Ok(Model {
            config: config.clone(),
            store,
        })
    }

    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Model {
        Model { config, store }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Lay the parameters onto a tape: trainable ones as gradient-tracked
    /// leaves, frozen ones as constants.
    pub fn load_graph<T: Real>(&self, tape: &mut Tape<T>) -> Result<LoadedGraph> {
        self.assemble(tape, |tape, param| {
            let value = param.value.cast::<T>();
            if param.trainable {
                tape.parameter(value)
            } else {
                tape.constant(value)
            }
        })
    }

    /// Lay the graph onto a tape using caller-provided leaves for the
    /// trainable parameters, in store order. Used by the finite-difference
    /// harness, which owns the leaves it perturbs.
    pub fn wire_with_leaves<T: Real>(
        &self,
        tape: &mut Tape<T>,
        leaves: &[TensorRef],
    ) -> Result<GraphRefs> {
        let expected = self.store.iter().filter(|p| p.trainable).count();
        if leaves.len() != expected {
            return Err(Error::Mismatch(format!(
                "{} leaves supplied for {} trainable parameters",
                leaves.len(),
                expected
            )));
        }
        let mut queue = leaves.iter().copied();
        let loaded = self.assemble(tape, |tape, param| {
            if param.trainable {
                queue.next().expect("count checked above")
            } else {
                tape.constant(param.value.cast::<T>())
            }
        })?;
        Ok(loaded.refs)
    }

    /// Names and 64-bit copies of the trainable parameters, in store order;
    /// the leaf list for the finite-difference harness.
    pub fn trainable_leaf_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        self.store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.cast::<f64>()))
            .collect()
    }

    fn assemble<T, F>(&self, tape: &mut Tape<T>, mut leaf_for: F) -> Result<LoadedGraph>
    where
        T: Real,
        F: FnMut(&mut Tape<T>, &Param) -> TensorRef,
    {
        let mut by_name = HashMap::new();
        let mut trainable = Vec::new();
        for (i, param) in self.store.iter().enumerate() {
            let leaf = leaf_for(tape, param);
            if param.trainable {
                trainable.push((i, leaf));
            }
            by_name.insert(param.name.clone(), leaf);
        }
        let r = |name: String| {
            by_name
                .get(&name)
                .copied()
                .ok_or_else(|| Error::ParamMismatch {
                    name,
                    expected: vec![],
                    found: vec![],
                })
        };
        let lstm = |prefix: &str| -> Result<LstmDirRefs> {
            Ok(LstmDirRefs {
                w_x: r(format!("{prefix}.w_x"))?,
                w_h: r(format!("{prefix}.w_h"))?,
                b: r(format!("{prefix}.b"))?,
            })
        };
        let d = self.config.hidden_dim;
        let refs = GraphRefs {
            embedding: r("embedding.table".to_string())?,
            encoder: StackRefs {
                layers: (0..self.config.effective_layers())
                    .map(|l| {
                        Ok(BiLstmRefs {
                            forward: lstm(&format!("encoder.layer{l}.fw"))?,
                            backward: lstm(&format!("encoder.layer{l}.bw"))?,
                            hidden: d,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                layer_logits: r("encoder.layer_logits".to_string())?,
            },
            composer: BiLstmRefs {
                forward: lstm("composer.fw")?,
                backward: lstm("composer.bw")?,
                hidden: d,
            },
            pool: PoolingRefs {
                w1: r("pool.w1".to_string())?,
                b1: r("pool.b1".to_string())?,
                w2: r("pool.w2".to_string())?,
                b2: r("pool.b2".to_string())?,
            },
            mlp: MlpRefs {
                w1: r("mlp.w1".to_string())?,
                b1: r("mlp.b1".to_string())?,
                w2: r("mlp.w2".to_string())?,
                b2: r("mlp.b2".to_string())?,
            },
            modification: ModificationRefs {
                m: r("mod.m".to_string())?,
                w: r("mod.w".to_string())?,
            },
        };
        Ok(LoadedGraph { refs, trainable })
    }

    /// Forward-only scoring of a padded batch on a fresh 32-bit tape.
    /// Returns one score row per dialogue in batch order.
    pub fn score_batch(&self, batch: &PaddedBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::<f32>::new();
        let graph = self.load_graph(&mut tape)?;
        let mut all = Vec::with_capacity(batch.example_ids.len());
        for i in 0..batch.example_ids.len() {
            let scores = score_dialogue(
                &mut tape,
                &graph.refs,
                &self.config,
                &batch.context_ids[i],
                &batch.context_mask[i],
                batch.last_spans[i],
                &batch.candidate_ids[i],
                &batch.candidate_masks[i],
            )?;
            all.push(
                tape.value(scores)
                    .data()
                    .iter()
                    .map(|&s| f64::from(s))
                    .collect(),
            );
        }
        Ok(all)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let k = (1.0 / rows as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-k..k)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent dims")
}

fn scaled_identity(n: usize, scale: f32) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = scale;
    }
    t
}

/// LSTM bias row with the forget-gate block at 1 to keep early memory open.
fn lstm_bias(d: usize) -> Tensor<f32> {
    let mut b = Tensor::zeros(vec![1, 4 * d]);
    for j in d..2 * d {
        b.data_mut()[j] = 1.0;
    }
    b
}

/// Score every candidate of one dialogue against its context: the context is
/// encoded once, each candidate is encoded, aligned against it, enhanced,
/// composed, pooled, and scored. Returns the 1 x n score row.
#[allow(clippy::too_many_arguments)]
pub fn score_dialogue<T: Real>(
    tape: &mut Tape<T>,
    refs: &GraphRefs,
    config: &ModelConfig,
    context_ids: &[usize],
    context_mask: &[bool],
    last_span: (usize, usize),
    candidate_ids: &[Vec<usize>],
    candidate_masks: &[Vec<bool>],
) -> Result<TensorRef> {
    if candidate_ids.is_empty() {
        return Err(Error::DegenerateInput(
            "dialogue has no candidates".to_string(),
        ));
    }
    if candidate_ids.len() != candidate_masks.len() {
        return Err(Error::Mismatch(format!(
            "{} candidate id rows but {} mask rows",
            candidate_ids.len(),
            candidate_masks.len()
        )));
    }
    if !context_mask.iter().any(|&m| m) {
        return Err(Error::DegenerateInput(
            "context is fully padded".to_string(),
        ));
    }
    let (start, end) = last_span;
    if start >= end || end > context_mask.len() || !context_mask[end - 1] {
        return Err(Error::DegenerateInput(format!(
            "last-utterance span {start}..{end} is outside the valid context region"
        )));
    }

    let ctx_emb = tape.gather_rows(refs.embedding, context_ids)?;
    let ctx_att = stack_encode(tape, ctx_emb, context_mask, &refs.encoder)?;
    // summary of the final context utterance: its last token's encoder row
    let u_last = tape.row(ctx_att, end - 1)?;

    let mut scores = Vec::with_capacity(candidate_ids.len());
    for (ids, mask) in candidate_ids.iter().zip(candidate_masks) {
        let cand_emb = tape.gather_rows(refs.embedding, ids)?;
        let cand_att = stack_encode(tape, cand_emb, mask, &refs.encoder)?;

        let (ctx_bar, cand_bar, _e) = soft_align(tape, ctx_att, cand_att, context_mask, mask)?;
        let ctx_enh = enhance(tape, ctx_att, ctx_bar)?;
        let cand_enh = enhance(tape, cand_att, cand_bar)?;
        let ctx_comp = compose(tape, ctx_enh, context_mask, &refs.composer)?;
        let cand_comp = compose(tape, cand_enh, mask, &refs.composer)?;

        let features = if config.modes.legacy_pooling {
            let ctx_pooled = legacy_pool(tape, ctx_comp, context_mask)?;
            let cand_pooled = legacy_pool(tape, cand_comp, mask)?;
            tape.concat(&[ctx_pooled, cand_pooled], 1)?
        } else {
            let d_ctx = multidim_pool(tape, ctx_comp, context_mask, &refs.pool)?;
            let d_cand = multidim_pool(tape, cand_comp, mask, &refs.pool)?;
            let v_ctx = last_state(tape, ctx_comp, context_mask)?;
            let v_cand = last_state(tape, cand_comp, mask)?;
            match_features(tape, d_ctx, d_cand, v_ctx, v_cand)?
        };
        let s1 = mlp_score(tape, features, &refs.mlp)?;

        if config.modes.modification {
            let b_last = last_state(tape, cand_att, mask)?;
            let (_s2, s) = modification_score(tape, u_last, b_last, &refs.modification, s1)?;
            scores.push(s);
        } else {
            scores.push(s1);
        }
    }
    tape.concat(&scores, 1)
}

/// Mean of the per-dialogue cross-entropy losses over a labeled batch.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    refs: &GraphRefs,
    config: &ModelConfig,
    batch: &PaddedBatch,
) -> Result<TensorRef> {
    if batch.example_ids.is_empty() {
        return Err(Error::DegenerateInput("empty batch".to_string()));
    }
    let mut losses = Vec::with_capacity(batch.example_ids.len());
    for i in 0..batch.example_ids.len() {
        let label = batch.labels[i].ok_or_else(|| {
            Error::MissingLabels(format!("example {} has no label", batch.example_ids[i]))
        })?;
        let scores = score_dialogue(
            tape,
            refs,
            config,
            &batch.context_ids[i],
            &batch.context_mask[i],
            batch.last_spans[i],
            &batch.candidate_ids[i],
            &batch.candidate_masks[i],
        )?;
        losses.push(candidate_loss(tape, scores, label)?);
    }
    let row = tape.concat(&losses, 1)?;
    tape.mean_axis(row, 1)
}
