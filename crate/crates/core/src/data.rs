//! Dataset ingestion and batching.
//!
//! Datasets are JSON-lines files, one dialogue per line:
//!
//! ```json
//! {"example_id": "d-001",
//!  "context": [{"speaker": "a", "text": "any ideas ?"}, ...],
//!  "candidates": ["try rebooting", ...],
//!  "label": 0}
//! ```
//!
//! `label` is optional; records without it are inference-only. Context
//! utterances are flattened into a single token stream joined by the
//! end-of-utterance separator, truncated to the trailing `max_context_len`
//! tokens, and the token span of the final utterance is recorded for the
//! scorer's bilinear term.

use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocabulary, EOU_ID, PAD_ID};
use serde::Deserialize;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Deserialize)]
struct RawUtterance {
    speaker: String,
    text: String,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    example_id: String,
    context: Vec<RawUtterance>,
    candidates: Vec<String>,
    #[serde(default)]
    label: Option<usize>,
}

/// One dialogue with all text already mapped to token ids.
#[derive(Clone, Debug)]
pub struct DialogueExample {
    pub example_id: String,
    pub utterances: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
    pub label: Option<usize>,
}

/// A dialogue after context assembly and truncation, ready for padding.
#[derive(Clone, Debug)]
pub struct PreparedDialogue {
    pub example_id: String,
    pub context: Vec<usize>,
    pub last_span: (usize, usize),
    pub candidates: Vec<Vec<usize>>,
    pub label: Option<usize>,
}

/// Dialogues padded to shared batch maxima with validity masks.
#[derive(Clone, Debug, Default)]
pub struct PaddedBatch {
    pub example_ids: Vec<String>,
    pub context_ids: Vec<Vec<usize>>,
    pub context_mask: Vec<Vec<bool>>,
    pub last_spans: Vec<(usize, usize)>,
    pub candidate_ids: Vec<Vec<Vec<usize>>>,
    pub candidate_masks: Vec<Vec<Vec<bool>>>,
    pub labels: Vec<Option<usize>>,
}

/// Parse and id-map a dataset file. With `speaker_tags` set, each utterance
/// is prefixed by an atomic `<speaker>` token built from its speaker field.
pub fn load_dataset(
    path: &Path,
    vocab: &Vocabulary,
    speaker_tags: bool,
) -> Result<Vec<DialogueExample>> {
    let mut examples = Vec::new();
    for (line_no, record) in read_records(path)? {
        if record.candidates.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("example {} has no candidates", record.example_id),
            });
        }
        if let Some(label) = record.label {
            if label >= record.candidates.len() {
                return Err(Error::LabelOutOfRange {
                    label,
                    candidates: record.candidates.len(),
                    context: format!(
                        "example {} ({}:{line_no})",
                        record.example_id,
                        path.display()
                    ),
                });
            }
        }
        let utterances = record
            .context
            .iter()
            .map(|u| vocab.ids(&utterance_tokens(u, speaker_tags)))
            .collect();
        let candidates = record
            .candidates
            .iter()
            .map(|c| vocab.ids(&tokenize(c)))
            .collect();
        examples.push(DialogueExample {
            example_id: record.example_id,
            utterances,
            candidates,
            label: record.label,
        });
    }
    Ok(examples)
}

/// Tokenized sentences of a dataset file (utterances and candidates), for
/// vocabulary construction and task-vector training.
pub fn corpus_sentences(path: &Path, speaker_tags: bool) -> Result<Vec<Vec<String>>> {
    let mut sentences = Vec::new();
    for (_, record) in read_records(path)? {
        for utterance in &record.context {
            sentences.push(utterance_tokens(utterance, speaker_tags));
        }
        for candidate in &record.candidates {
            sentences.push(tokenize(candidate));
        }
    }
    Ok(sentences)
}

fn utterance_tokens(utterance: &RawUtterance, speaker_tags: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    if speaker_tags {
        let tag: String = utterance
            .speaker
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        tokens.push(format!("<{tag}>"));
    }
    tokens.extend(tokenize(&utterance.text));
    tokens
}

fn read_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push((i + 1, record));
    }
    Ok(records)
}

/// Join utterances with the separator token, keep the trailing `max_len`
/// tokens, and return the surviving ids with the final utterance's
/// (start, end) offsets inside them.
pub fn assemble_context(
    utterances: &[Vec<usize>],
    max_len: usize,
) -> Result<(Vec<usize>, (usize, usize))> {
    let last = utterances
        .last()
        .ok_or_else(|| Error::DegenerateInput("context has no utterances".to_string()))?;
    if last.is_empty() {
        return Err(Error::DegenerateInput(
            "final context utterance has no tokens".to_string(),
        ));
    }
    let mut joined = Vec::new();
    for (i, utterance) in utterances.iter().enumerate() {
        if i > 0 {
            joined.push(EOU_ID);
        }
        joined.extend_from_slice(utterance);
    }
    let total = joined.len();
    let cut = total.saturating_sub(max_len);
    let kept = joined.split_off(cut);
    let last_start = (total - last.len()).max(cut) - cut;
    Ok((kept, (last_start, total - cut)))
}

/// Truncate candidates to their leading `max_candidate_len` tokens and
/// assemble the context. Empty candidates are rejected.
pub fn prepare_dialogue(
    example: &DialogueExample,
    max_context_len: usize,
    max_candidate_len: usize,
) -> Result<PreparedDialogue> {
    let (context, last_span) = assemble_context(&example.utterances, max_context_len)?;
    let mut candidates = Vec::with_capacity(example.candidates.len());
    for (i, candidate) in example.candidates.iter().enumerate() {
        if candidate.is_empty() {
            return Err(Error::DegenerateInput(format!(
                "candidate {i} of example {} has no tokens",
                example.example_id
            )));
        }
        candidates.push(candidate[..candidate.len().min(max_candidate_len)].to_vec());
    }
    Ok(PreparedDialogue {
        example_id: example.example_id.clone(),
        context,
        last_span,
        candidates,
        label: example.label,
    })
}

/// Right-pad every sequence to the batch maxima with the padding id and
/// record validity masks.
pub fn pad_batch(dialogues: &[PreparedDialogue]) -> PaddedBatch {
    let context_len = dialogues.iter().map(|d| d.context.len()).max().unwrap_or(0);
    let candidate_len = dialogues
        .iter()
        .flat_map(|d| d.candidates.iter().map(Vec::len))
        .max()
        .unwrap_or(0);

    let mut batch = PaddedBatch::default();
    for dialogue in dialogues {
        let (ids, mask) = pad_to(&dialogue.context, context_len);
        batch.example_ids.push(dialogue.example_id.clone());
        batch.context_ids.push(ids);
        batch.context_mask.push(mask);
        batch.last_spans.push(dialogue.last_span);
        let mut cand_ids = Vec::with_capacity(dialogue.candidates.len());
        let mut cand_masks = Vec::with_capacity(dialogue.candidates.len());
        for candidate in &dialogue.candidates {
            let (ids, mask) = pad_to(candidate, candidate_len);
            cand_ids.push(ids);
            cand_masks.push(mask);
        }
        batch.candidate_ids.push(cand_ids);
        batch.candidate_masks.push(cand_masks);
        batch.labels.push(dialogue.label);
    }
    batch
}

fn pad_to(ids: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut padded = ids.to_vec();
    let mut mask = vec![true; ids.len()];
    padded.resize(len, PAD_ID);
    mask.resize(len, false);
    (padded, mask)
}
