//! Candidate scoring: an MLP over the matching features produces s1, a
//! bilinear form between the last context utterance's summary and the
//! candidate's last-token vector produces s2, and the final score is
//! s = s1 + w * s2 with a learned scalar w. Training minimizes multi-class
//! cross-entropy over each dialogue's candidate set.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Real, Tensor};

/// Tape handles for the scoring MLP: one ReLU hidden layer, linear scalar
/// output. w1 is 8d x h, b1 is 1 x h, w2 is h x 1, b2 is 1 x 1.
#[derive(Clone, Copy, Debug)]
pub struct MlpRefs {
    pub w1: TensorRef,
    pub b1: TensorRef,
    pub w2: TensorRef,
    pub b2: TensorRef,
}

/// Tape handles for the combination score: m is 2d x 2d, w is a 1 x 1
/// scalar.
#[derive(Clone, Copy, Debug)]
pub struct ModificationRefs {
    pub m: TensorRef,
    pub w: TensorRef,
}

/// s1 = relu(f w1 + b1) w2 + b2 as a 1 x 1 tensor.
pub fn mlp_score<T: Real>(
    tape: &mut Tape<T>,
    features: TensorRef,
    params: &MlpRefs,
) -> Result<TensorRef> {
    let hidden = tape.matmul(features, params.w1)?;
    let hidden = tape.add(hidden, params.b1)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul(hidden, params.w2)?;
    tape.add(out, params.b2)
}

/// s2 = u_last M b_last^T and the combined score s = s1 + w * s2.
/// Returns (s2, s).
pub fn modification_score<T: Real>(
    tape: &mut Tape<T>,
    u_last: TensorRef,
    b_last: TensorRef,
    params: &ModificationRefs,
    s1: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let projected = tape.matmul(u_last, params.m)?;
    let b_t = tape.transpose(b_last)?;
    let s2 = tape.matmul(projected, b_t)?;
    let weighted = tape.mul(params.w, s2)?;
    let s = tape.add(s1, weighted)?;
    Ok((s2, s))
}

/// Multi-class cross-entropy over one dialogue's candidate scores (1 x n):
/// loss = log(sum_j exp(s_j)) - s_label, stabilized by subtracting the
/// running maximum as a constant. The subtraction changes neither the value
/// nor the gradient, so stabilization is exact.
pub fn candidate_loss<T: Real>(
    tape: &mut Tape<T>,
    scores: TensorRef,
    label: usize,
) -> Result<TensorRef> {
    let shape = tape.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::ShapeMismatch {
            primitive: "candidate_loss",
            detail: format!("expected scores of shape [1, n], got {shape:?}"),
        });
    }
    let n = shape[1];
    if label >= n {
        return Err(Error::LabelOutOfRange {
            label,
            candidates: n,
            context: "candidate_loss".to_string(),
        });
    }
    let hi = tape
        .value(scores)
        .data()
        .iter()
        .cloned()
        .fold(T::neg_infinity(), T::max);
    let hi_const = tape.constant(Tensor::scalar(hi));
    let hi_row = tape.broadcast(hi_const, vec![1, n])?;
    let shifted = tape.sub(scores, hi_row)?;
    let exps = tape.exp(shifted)?;
    let total = tape.sum_axis(exps, 1)?;
    let log_total = tape.log(total)?;
    let lse = tape.add(log_total, hi_const)?;
    let gold = tape.slice(scores, 1, label, label + 1)?;
    tape.sub(lse, gold)
}

/// Host-side softmax used when emitting probabilities.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - hi).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
