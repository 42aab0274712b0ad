//! Cross-sequence matching: dot-product soft alignment, local-inference
//! enhancement, a composition BiLSTM pass, and the pooling schemes that
//! reduce a composed sequence to fixed-width summary vectors.

use crate::encoder::{bilstm_forward, last_valid_index, BiLstmRefs};
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Real, Tensor};

/// Tape handles for the two pooling projections: w1 and w2 are width x
/// width, b1 and b2 are 1 x width bias rows.
#[derive(Clone, Copy, Debug)]
pub struct PoolingRefs {
    pub w1: TensorRef,
    pub b1: TensorRef,
    pub w2: TensorRef,
    pub b2: TensorRef,
}

// mask tensor with m[i][j] = rows[i]
fn row_mask_tensor<T: Real>(rows: &[bool], cols: usize) -> Tensor<T> {
    let data = rows
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, cols))
        .collect();
    Tensor::new(vec![rows.len(), cols], data).expect("consistent dims")
}

// mask tensor with m[i][j] = cols[j]
fn col_mask_tensor<T: Real>(cols: &[bool], rows: usize) -> Tensor<T> {
    let row: Vec<T> = cols
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![rows, cols.len()], data).expect("consistent dims")
}

/// Soft alignment between two encoded sequences of equal width. Returns the
/// aligned counterparts (each row a convex combination of the other side's
/// valid rows) and the shared attention logit matrix e with
/// e[i][j] = dot(a[i], b[j]).
pub fn soft_align<T: Real>(
    tape: &mut Tape<T>,
    a_att: TensorRef,
    b_att: TensorRef,
    mask_a: &[bool],
    mask_b: &[bool],
) -> Result<(TensorRef, TensorRef, TensorRef)> {
    let (la, wa) = {
        let s = tape.value(a_att).shape();
        (s[0], s[1])
    };
    let (lb, wb) = {
        let s = tape.value(b_att).shape();
        (s[0], s[1])
    };
    if wa != wb {
        return Err(Error::ShapeMismatch {
            primitive: "soft_align",
            detail: format!("widths differ: {wa} vs {wb}"),
        });
    }
    let b_t = tape.transpose(b_att)?;
    let e = tape.matmul(a_att, b_t)?;

    // rows of a attend over b's valid positions
    let over_b = tape.constant(col_mask_tensor(mask_b, la));
    let attn_a = tape.softmax_masked(e, over_b, 1)?;
    let a_bar = tape.matmul(attn_a, b_att)?;

    // columns of e: b's rows attend over a's valid positions
    let over_a = tape.constant(row_mask_tensor(mask_a, lb));
    let attn_b = tape.softmax_masked(e, over_a, 0)?;
    let attn_b_t = tape.transpose(attn_b)?;
    let b_bar = tape.matmul(attn_b_t, a_att)?;

    Ok((a_bar, b_bar, e))
}

/// Local-inference enhancement: concat(x; aligned; x - aligned; x * aligned)
/// along the feature axis, widening len x w to len x 4w.
pub fn enhance<T: Real>(tape: &mut Tape<T>, x: TensorRef, x_bar: TensorRef) -> Result<TensorRef> {
    let diff = tape.sub(x, x_bar)?;
    let prod = tape.mul(x, x_bar)?;
    tape.concat(&[x, x_bar, diff, prod], 1)
}

/// Composition pass over the enhanced features; a masked BiLSTM taking
/// len x 4w down to len x 2d.
pub fn compose<T: Real>(
    tape: &mut Tape<T>,
    enhanced: TensorRef,
    mask: &[bool],
    params: &BiLstmRefs,
) -> Result<TensorRef> {
    bilstm_forward(tape, enhanced, mask, params)
}

/// Per-dimension attentive pooling. Every feature dimension gets its own
/// softmax over the valid positions, built from logits
/// l(v_i) = ELU(v_i w1 + b1) w2 + b2, and the output is the per-dimension
/// convex combination of the rows.
pub fn multidim_pool<T: Real>(
    tape: &mut Tape<T>,
    v: TensorRef,
    mask: &[bool],
    params: &PoolingRefs,
) -> Result<TensorRef> {
    let shape = tape.value(v).shape().to_vec();
    let (len, width) = (shape[0], shape[1]);
    let b1 = tape.broadcast(params.b1, vec![len, width])?;
    let b2 = tape.broadcast(params.b2, vec![len, width])?;
    let proj = tape.matmul(v, params.w1)?;
    let proj = tape.add(proj, b1)?;
    let hidden = tape.elu(proj, 1.0)?;
    let logits = tape.matmul(hidden, params.w2)?;
    let logits = tape.add(logits, b2)?;
    let valid = tape.constant(row_mask_tensor(mask, width));
    let attn = tape.softmax_masked(logits, valid, 0)?;
    let weighted = tape.mul(attn, v)?;
    tape.sum_axis(weighted, 0)
}

/// Row at the last valid position, as the sequence's summary vector.
pub fn last_state<T: Real>(tape: &mut Tape<T>, v: TensorRef, mask: &[bool]) -> Result<TensorRef> {
    let index = last_valid_index(mask).ok_or(Error::FullyMaskedSlice {
        primitive: "last_state",
    })?;
    tape.row(v, index)
}

/// The matching feature vector: concat of the two pooled summaries and the
/// two last-state summaries, in that order.
pub fn match_features<T: Real>(
    tape: &mut Tape<T>,
    d_a: TensorRef,
    d_b: TensorRef,
    v_last_a: TensorRef,
    v_last_b: TensorRef,
) -> Result<TensorRef> {
    tape.concat(&[d_a, d_b, v_last_a, v_last_b], 1)
}

/// Original-style pooling: concat(column-wise max over valid rows;
/// column-wise mean over valid rows), 1 x 2w. Kept for the pooling ablation.
pub fn legacy_pool<T: Real>(tape: &mut Tape<T>, v: TensorRef, mask: &[bool]) -> Result<TensorRef> {
    let width = tape.value(v).shape()[1];
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::FullyMaskedSlice {
            primitive: "legacy_pool",
        });
    }
    let mask_t = tape.constant(row_mask_tensor(mask, width));
    let max = tape.masked_max(v, mask_t)?;
    let masked = tape.mul(v, mask_t)?;
    let total = tape.sum_axis(masked, 0)?;
    let mean = tape.scalar_mul(total, 1.0 / count as f64)?;
    tape.concat(&[max, mean], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn single_b_row_aligns_everything_to_it() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0]]));
        let b = tape.constant(t2(&[&[0.5, 0.25]]));
        let (a_bar, ..) = soft_align(&mut tape, a, b, &[true; 3], &[true]).unwrap();
        for t in 0..3 {
            assert_eq!(tape.value(a_bar).at2(t, 0), 0.5);
            assert_eq!(tape.value(a_bar).at2(t, 1), 0.25);
        }
    }

    #[test]
    fn identical_single_tokens_align_to_themselves() {
        let mut tape = Tape::new();
        let v = t2(&[&[0.3, -0.7]]);
        let a = tape.constant(v.clone());
        let b = tape.constant(v.clone());
        let (a_bar, b_bar, e) = soft_align(&mut tape, a, b, &[true], &[true]).unwrap();
        let dot = 0.3 * 0.3 + 0.7 * 0.7;
        assert!((tape.value(e).data()[0] - dot).abs() < 1e-12);
        assert_eq!(tape.value(a_bar).data(), v.data());
        assert_eq!(tape.value(b_bar).data(), v.data());
    }

    #[test]
    fn hand_computed_two_by_two_alignment() {
        let mut tape = Tape::new();
        // b is the identity so e[i][j] = a[i][j]; row softmaxes are then
        // [0.5, 0.5] and [0.75, 0.25]
        let a = tape.constant(t2(&[&[0.0, 0.0], &[3.0f64.ln(), 0.0]]));
        let b = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let (a_bar, ..) = soft_align(&mut tape, a, b, &[true; 2], &[true; 2]).unwrap();
        let got = tape.value(a_bar);
        assert!((got.at2(0, 0) - 0.5).abs() < 1e-12);
        assert!((got.at2(0, 1) - 0.5).abs() < 1e-12);
        assert!((got.at2(1, 0) - 0.75).abs() < 1e-12);
        assert!((got.at2(1, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn padded_b_rows_carry_no_alignment_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_t = random_tensor(&mut rng, vec![3, 2], 1.0);
        let b_valid = random_tensor(&mut rng, vec![2, 2], 1.0);

        let mut tape = Tape::new();
        let a = tape.constant(a_t.clone());
        let b = tape.constant(b_valid.clone());
        let (plain_bar, ..) = soft_align(&mut tape, a, b, &[true; 3], &[true; 2]).unwrap();
        let plain = tape.value(plain_bar).data().to_vec();

        // garbage values on the padded row must not leak into the result
        let mut padded_data = b_valid.data().to_vec();
        padded_data.extend_from_slice(&[50.0, -50.0]);
        let b_padded = tape.constant(Tensor::new(vec![3, 2], padded_data).unwrap());
        let (padded_bar, ..) =
            soft_align(&mut tape, a, b_padded, &[true; 3], &[true, true, false]).unwrap();
        for (x, y) in plain.iter().zip(tape.value(padded_bar).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_rows_stay_in_the_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&mut rng, vec![4, 3], 2.0));
        let b_t = random_tensor(&mut rng, vec![3, 3], 2.0);
        let b = tape.constant(b_t.clone());
        let (a_bar, ..) = soft_align(&mut tape, a, b, &[true; 4], &[true; 3]).unwrap();
        for t in 0..4 {
            for d in 0..3 {
                let column: Vec<f64> = (0..3).map(|j| b_t.at2(j, d)).collect();
                let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = tape.value(a_bar).at2(t, d);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fully_padded_side_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0, 4.0]]));
        let err = soft_align(&mut tape, a, b, &[true], &[false]).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedSlice { .. }));
    }

    #[test]
    fn enhance_identical_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[2.0, -3.0]]));
        let out = enhance(&mut tape, x, x).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[2.0, -3.0, 2.0, -3.0, 0.0, 0.0, 4.0, 9.0]
        );
    }

    #[test]
    fn enhance_zero_alignment() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[2.0, -3.0]]));
        let zero = tape.constant(Tensor::zeros(vec![1, 2]));
        let out = enhance(&mut tape, x, zero).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[2.0, -3.0, 0.0, 0.0, 2.0, -3.0, 0.0, 0.0]
        );
    }

    #[test]
    fn enhance_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_t = random_tensor(&mut rng, vec![1, 2], 1.0);
        let y_t = random_tensor(&mut rng, vec![1, 2], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let y = tape.constant(y_t.clone());
        let out = enhance(&mut tape, x, y).unwrap();
        let expected: Vec<f64> = x_t
            .data()
            .iter()
            .chain(y_t.data())
            .cloned()
            .chain(x_t.data().iter().zip(y_t.data()).map(|(&a, &b)| a - b))
            .chain(x_t.data().iter().zip(y_t.data()).map(|(&a, &b)| a * b))
            .collect();
        assert_eq!(tape.value(out).data(), &expected[..]);
    }

    fn zero_pooling(tape: &mut Tape<f64>, width: usize) -> PoolingRefs {
        PoolingRefs {
            w1: tape.constant(Tensor::zeros(vec![width, width])),
            b1: tape.constant(Tensor::zeros(vec![1, width])),
            w2: tape.constant(Tensor::zeros(vec![width, width])),
            b2: tape.constant(Tensor::zeros(vec![1, width])),
        }
    }

    fn identity_pooling(tape: &mut Tape<f64>, width: usize) -> PoolingRefs {
        let mut eye = Tensor::zeros(vec![width, width]);
        for i in 0..width {
            let w = width;
            eye.data_mut()[i * w + i] = 1.0;
        }
        PoolingRefs {
            w1: tape.constant(eye.clone()),
            b1: tape.constant(Tensor::zeros(vec![1, width])),
            w2: tape.constant(eye),
            b2: tape.constant(Tensor::zeros(vec![1, width])),
        }
    }

    #[test]
    fn pool_of_single_row_is_that_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let v_t = random_tensor(&mut rng, vec![1, 4], 1.0);
        let v = tape.constant(v_t.clone());
        let params = zero_pooling(&mut tape, 4);
        let out = multidim_pool(&mut tape, v, &[true], &params).unwrap();
        assert_eq!(tape.value(out).data(), v_t.data());
    }

    #[test]
    fn zero_projections_give_column_means() {
        let mut tape = Tape::new();
        let v = tape.constant(t2(&[&[1.0, 8.0], &[3.0, 2.0], &[99.0, 99.0]]));
        let params = zero_pooling(&mut tape, 2);
        let out = multidim_pool(&mut tape, v, &[true, true, false], &params).unwrap();
        assert!((tape.value(out).data()[0] - 2.0).abs() < 1e-12);
        assert!((tape.value(out).data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hand_logit_pool_combination() {
        let mut tape = Tape::new();
        // identity projections with non-negative inputs make logits = v, so
        // column softmaxes are [0.25, 0.75] and [0.75, 0.25]
        let l3 = 3.0f64.ln();
        let v = tape.constant(t2(&[&[0.0, l3], &[l3, 0.0]]));
        let params = identity_pooling(&mut tape, 2);
        let out = multidim_pool(&mut tape, v, &[true, true], &params).unwrap();
        let expected = 0.75 * l3;
        assert!((tape.value(out).data()[0] - expected).abs() < 1e-12);
        assert!((tape.value(out).data()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn pooled_values_stay_within_column_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let v_t = random_tensor(&mut rng, vec![5, 3], 2.0);
        let v = tape.constant(v_t.clone());
        let w1 = random_tensor(&mut rng, vec![3, 3], 0.8);
        let w2 = random_tensor(&mut rng, vec![3, 3], 0.8);
        let b1 = random_tensor(&mut rng, vec![1, 3], 0.4);
        let b2 = random_tensor(&mut rng, vec![1, 3], 0.4);
        let params = PoolingRefs {
            w1: tape.constant(w1),
            b1: tape.constant(b1),
            w2: tape.constant(w2),
            b2: tape.constant(b2),
        };
        let mask = [true, true, false, true, false];
        let out = multidim_pool(&mut tape, v, &mask, &params).unwrap();
        for d in 0..3 {
            let valid: Vec<f64> = (0..5).filter(|&t| mask[t]).map(|t| v_t.at2(t, d)).collect();
            let lo = valid.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = tape.value(out).data()[d];
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }

    #[test]
    fn match_features_preserves_block_order() {
        let mut tape = Tape::new();
        let d_a = tape.constant(Tensor::full(vec![1, 2], 1.0));
        let d_b = tape.constant(Tensor::full(vec![1, 2], 2.0));
        let v_a = tape.constant(Tensor::full(vec![1, 2], 3.0));
        let v_b = tape.constant(Tensor::full(vec![1, 2], 4.0));
        let f = match_features(&mut tape, d_a, d_b, v_a, v_b).unwrap();
        assert_eq!(
            tape.value(f).data(),
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn last_state_picks_final_valid_row() {
        let mut tape = Tape::new();
        let v = tape.constant(t2(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]));
        let out = last_state(&mut tape, v, &[true, true, false]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn legacy_pool_single_row_duplicates_it() {
        let mut tape = Tape::new();
        let v = tape.constant(t2(&[&[4.0, -1.0]]));
        let out = legacy_pool(&mut tape, v, &[true]).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, -1.0, 4.0, -1.0]);
    }

    #[test]
    fn legacy_pool_hand_values() {
        let mut tape = Tape::new();
        let v = tape.constant(t2(&[&[1.0, 3.0], &[3.0, 1.0]]));
        let out = legacy_pool(&mut tape, v, &[true, true]).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn legacy_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v_t = random_tensor(&mut rng, vec![6, 4], 3.0);
        let mask = [true, false, true, true, false, true];
        let mut tape = Tape::new();
        let v = tape.constant(v_t.clone());
        let out = legacy_pool(&mut tape, v, &mask).unwrap();
        for d in 0..4 {
            let valid: Vec<f64> = (0..6).filter(|&t| mask[t]).map(|t| v_t.at2(t, d)).collect();
            let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = valid.iter().sum::<f64>() / valid.len() as f64;
            assert!((tape.value(out).data()[d] - hi).abs() < 1e-12);
            assert!((tape.value(out).data()[4 + d] - mean).abs() < 1e-12);
        }
    }
}
