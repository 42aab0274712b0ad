//! Sequence encoders: a masked bidirectional LSTM and an L-layer stack whose
//! per-layer outputs are mixed by softmax-normalized learned scalar weights.
//!
//! Gate layout inside the combined projections is [input, forget, cell,
//! output], each block of width d:
//!
//!   i_t = sigmoid(x_t W_xi + h_{t-1} W_hi + b_i)
//!   f_t = sigmoid(x_t W_xf + h_{t-1} W_hf + b_f)
//!   g_t = tanh  (x_t W_xg + h_{t-1} W_hg + b_g)
//!   o_t = sigmoid(x_t W_xo + h_{t-1} W_ho + b_o)
//!   c_t = f_t * c_{t-1} + i_t * g_t
//!   h_t = o_t * tanh(c_t)
//!
//! Masked positions are skipped entirely: the recurrent state carries
//! through unchanged and the output row is exactly zero. The backward
//! direction starts from zero state at the last valid position, so padding
//! on either end never influences valid outputs.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Real, Tensor};

/// Tape handles for one LSTM direction: w_x is in_dim x 4d, w_h is d x 4d,
/// b is 1 x 4d.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirRefs {
    pub w_x: TensorRef,
    pub w_h: TensorRef,
    pub b: TensorRef,
}

/// Both directions of one BiLSTM layer with d hidden units each; output
/// width is 2d.
#[derive(Clone, Copy, Debug)]
pub struct BiLstmRefs {
    pub forward: LstmDirRefs,
    pub backward: LstmDirRefs,
    pub hidden: usize,
}

/// An L-layer BiLSTM stack plus the raw layer-mixing logits (1 x L).
#[derive(Clone, Debug)]
pub struct StackRefs {
    pub layers: Vec<BiLstmRefs>,
    pub layer_logits: TensorRef,
}

/// Index of the last unmasked position, if any.
pub fn last_valid_index(mask: &[bool]) -> Option<usize> {
    mask.iter().rposition(|&m| m)
}

fn run_direction<T: Real>(
    tape: &mut Tape<T>,
    seq: TensorRef,
    mask: &[bool],
    params: &LstmDirRefs,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<TensorRef>> {
    let len = tape.value(seq).shape()[0];
    let in_dim = tape.value(seq).shape()[1];
    let w_x_shape = tape.value(params.w_x).shape().to_vec();
    if w_x_shape != [in_dim, 4 * hidden] {
        return Err(Error::ShapeMismatch {
            primitive: "bilstm",
            detail: format!(
                "input width {in_dim} does not match projection shape {w_x_shape:?} (hidden {hidden})"
            ),
        });
    }
    if mask.len() != len {
        return Err(Error::ShapeMismatch {
            primitive: "bilstm",
            detail: format!("mask length {} for sequence length {len}", mask.len()),
        });
    }

    let zero_row = tape.constant(Tensor::zeros(vec![1, hidden]));
    let mut h = zero_row;
    let mut c = zero_row;
    let mut rows = vec![zero_row; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        if !mask[t] {
            continue;
        }
        let x = tape.row(seq, t)?;
        let xs = tape.matmul(x, params.w_x)?;
        let hs = tape.matmul(h, params.w_h)?;
        let partial = tape.add(xs, hs)?;
        let pre = tape.add(partial, params.b)?;
        let i = tape.slice(pre, 1, 0, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(pre, 1, hidden, 2 * hidden)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(pre, 1, 2 * hidden, 3 * hidden)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(pre, 1, 3 * hidden, 4 * hidden)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c)?;
        h = tape.mul(o, ct)?;
        rows[t] = h;
    }
    Ok(rows)
}

/// Masked bidirectional pass: len x in_dim to len x 2d, forward and backward
/// halves concatenated per position.
pub fn bilstm_forward<T: Real>(
    tape: &mut Tape<T>,
    seq: TensorRef,
    mask: &[bool],
    params: &BiLstmRefs,
) -> Result<TensorRef> {
    let fwd = run_direction(tape, seq, mask, &params.forward, params.hidden, false)?;
    let bwd = run_direction(tape, seq, mask, &params.backward, params.hidden, true)?;
    let mut rows = Vec::with_capacity(fwd.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        rows.push(tape.concat(&[f, b], 1)?);
    }
    tape.concat(&rows, 0)
}

/// Encode through the whole stack and return the weighted combination of the
/// per-layer outputs, position-wise. With a single layer the softmax weight
/// is exactly 1 and the result is bit-identical to that layer's output.
pub fn stack_encode<T: Real>(
    tape: &mut Tape<T>,
    seq: TensorRef,
    mask: &[bool],
    params: &StackRefs,
) -> Result<TensorRef> {
    if params.layers.is_empty() {
        return Err(Error::Config(
            "encoder needs at least one layer".to_string(),
        ));
    }
    let logits_shape = tape.value(params.layer_logits).shape().to_vec();
    if logits_shape != [1, params.layers.len()] {
        return Err(Error::ShapeMismatch {
            primitive: "stack_encode",
            detail: format!(
                "layer logits shape {:?} for {} layers",
                logits_shape,
                params.layers.len()
            ),
        });
    }

    let mut current = seq;
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        current = bilstm_forward(tape, current, mask, layer)?;
        outputs.push(current);
    }

    let ones = tape.constant(Tensor::full(vec![1, params.layers.len()], T::one()));
    let weights = tape.softmax_masked(params.layer_logits, ones, 1)?;
    let out_shape = tape.value(outputs[0]).shape().to_vec();
    let mut combined: Option<TensorRef> = None;
    for (l, &layer_out) in outputs.iter().enumerate() {
        let w = tape.slice(weights, 1, l, l + 1)?;
        let w = tape.broadcast(w, out_shape.clone())?;
        let term = tape.mul(w, layer_out)?;
        combined = Some(match combined {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(combined.expect("at least one layer"))
}

/// Softmax of the stored logits, for reporting.
pub fn layer_weights(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - hi).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
