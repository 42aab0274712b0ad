//! Ranking metrics for candidate selection: recall at k, mean reciprocal
//! rank, and ensemble averaging of per-model output distributions.

use crate::error::{Error, Result};
use crate::scorer::softmax;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One dialogue's candidate ranking. `order` is the permutation of candidate
/// indices sorted by score descending (ties broken by ascending index);
/// `gold_rank` is the 1-based position of the labeled candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedDialogue {
    pub example_id: String,
    pub order: Vec<usize>,
    pub gold_rank: Option<usize>,
}

/// Metric bundle emitted as a single JSON document. `recall_at` keys
/// serialize as strings; `composite` is the mean of recall at 10 and MRR
/// when k = 10 was evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub composite: Option<f64>,
    pub num_dialogues: usize,
}

/// Per-dialogue record of the score file: raw scores plus their softmax.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreRecord {
    pub example_id: String,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ScoreRecord {
    pub fn from_scores(example_id: &str, scores: Vec<f64>) -> ScoreRecord {
        ScoreRecord {
            example_id: example_id.to_string(),
            probabilities: softmax(&scores),
            scores,
        }
    }
}

/// Candidate indices sorted by score descending; equal scores keep ascending
/// index order, making rankings deterministic.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Rank one dialogue's scores and locate the gold candidate if labeled.
pub fn rank_dialogue(example_id: &str, scores: &[f64], label: Option<usize>) -> RankedDialogue {
    let order = rank_candidates(scores);
    let gold_rank = label.map(|l| {
        order
            .iter()
            .position(|&i| i == l)
            .expect("order is a permutation of candidate indices")
            + 1
    });
    RankedDialogue {
        example_id: example_id.to_string(),
        order,
        gold_rank,
    }
}

fn gold_ranks(dialogues: &[RankedDialogue]) -> Result<Vec<usize>> {
    if dialogues.is_empty() {
        return Err(Error::DegenerateInput(
            "no dialogues to evaluate".to_string(),
        ));
    }
    dialogues
        .iter()
        .map(|d| {
            d.gold_rank.ok_or_else(|| {
                Error::MissingLabels(format!("example {} has no gold rank", d.example_id))
            })
        })
        .collect()
}

/// Fraction of dialogues whose gold candidate ranks within the top k.
pub fn recall_at_k(dialogues: &[RankedDialogue], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config(
            "recall cutoff k must be at least 1".to_string(),
        ));
    }
    let ranks = gold_ranks(dialogues)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean over dialogues of the reciprocal gold rank.
pub fn mrr(dialogues: &[RankedDialogue]) -> Result<f64> {
    let ranks = gold_ranks(dialogues)?;
    let total: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(total / ranks.len() as f64)
}

/// Default recall cutoffs for candidate sets of size n: the conventional
/// {1, 2, 5, 10, 50} plus n itself, clipped to [1, n].
pub fn default_ks(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 2, 5, 10, 50, n]
        .into_iter()
        .filter(|&k| k >= 1 && k <= n)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Evaluate recall at each requested cutoff plus MRR.
pub fn report(dialogues: &[RankedDialogue], ks: &[usize]) -> Result<MetricsReport> {
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(dialogues, k)?);
    }
    let mrr = mrr(dialogues)?;
    let composite = recall_at.get(&10).map(|r| (r + mrr) / 2.0);
    Ok(MetricsReport {
        recall_at,
        mrr,
        composite,
        num_dialogues: dialogues.len(),
    })
}

impl MetricsReport {
    /// The model-selection criterion: mean of recall at 10 and MRR, falling
    /// back to the largest evaluated cutoff when 10 was out of range.
    pub fn selection_metric(&self) -> f64 {
        match self.composite {
            Some(c) => c,
            None => {
                let fallback = self.recall_at.values().next_back().copied().unwrap_or(0.0);
                (fallback + self.mrr) / 2.0
            }
        }
    }
}

fn check_grid(matrices: &[Vec<Vec<f64>>]) -> Result<()> {
    let first = &matrices[0];
    for (m, matrix) in matrices.iter().enumerate().skip(1) {
        if matrix.len() != first.len() {
            return Err(Error::Mismatch(format!(
                "model {m} scored {} dialogues, model 0 scored {}",
                matrix.len(),
                first.len()
            )));
        }
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != first[i].len() {
                return Err(Error::Mismatch(format!(
                    "model {m} dialogue {i} has {} candidates, model 0 has {}",
                    row.len(),
                    first[i].len()
                )));
            }
        }
    }
    Ok(())
}

fn mean_grid(matrices: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let first = &matrices[0];
    let m = matrices.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            (0..row.len())
                .map(|j| matrices.iter().map(|mat| mat[i][j]).sum::<f64>() / m)
                .collect()
        })
        .collect()
}

/// Average per-candidate probabilities across models. Every row must be a
/// probability distribution; the averaged rows then are too.
pub fn ensemble_average(matrices: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if matrices.is_empty() {
        return Err(Error::DegenerateInput(
            "no model outputs to ensemble".to_string(),
        ));
    }
    check_grid(matrices)?;
    for (m, matrix) in matrices.iter().enumerate() {
        for (i, row) in matrix.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Mismatch(format!(
                    "model {m} dialogue {i}: row is not a probability distribution (sum {total})"
                )));
            }
        }
    }
    Ok(mean_grid(matrices))
}

/// Average raw scores across models (the alternative ensembling mode; no
/// distribution constraint on the inputs).
pub fn ensemble_average_scores(matrices: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if matrices.is_empty() {
        return Err(Error::DegenerateInput(
            "no model outputs to ensemble".to_string(),
        ));
    }
    check_grid(matrices)?;
    Ok(mean_grid(matrices))
}

/// Read a JSON-lines score file.
pub fn read_score_file(path: &std::path::Path) -> Result<Vec<ScoreRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write a JSON-lines score file.
pub fn write_score_file(path: &std::path::Path, records: &[ScoreRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Mismatch(format!("score record serialization: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
