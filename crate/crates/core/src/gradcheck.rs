//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker records a program once, runs one backward pass, then perturbs
//! each leaf entry by +/- eps and replays the tape to form central
//! differences. Comparison uses a relative error scaled by the larger
//! magnitude, floored at 1.0 so gradients near zero are compared absolutely.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;

/// One entry whose analytic and numeric gradients disagree beyond tolerance.
#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a full gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub leaves: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// |a - b| scaled by max(|a|, |b|, 1).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference gradient of the recorded loss with respect to one leaf,
/// obtained by replaying the tape under perturbed leaf values. The tape is
/// restored to its original state before returning.
pub fn numeric_gradient(
    tape: &mut Tape<f64>,
    loss: TensorRef,
    leaf: TensorRef,
    eps: f64,
) -> Result<Tensor<f64>> {
    let original = tape.value(leaf).data().to_vec();
    let shape = tape.value(leaf).shape().to_vec();
    let mut grad = vec![0.0; original.len()];
    let mut probe = original.clone();
    for i in 0..original.len() {
        probe[i] = original[i] + eps;
        tape.set_leaf(leaf, &probe)?;
        tape.replay_forward()?;
        let plus = tape.value(loss).data()[0];

        probe[i] = original[i] - eps;
        tape.set_leaf(leaf, &probe)?;
        tape.replay_forward()?;
        let minus = tape.value(loss).data()[0];

        probe[i] = original[i];
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    tape.set_leaf(leaf, &original)?;
    tape.replay_forward()?;
    Tensor::new(shape, grad)
}

/// Build a scalar-loss program over the named leaves, then compare reverse-mode
/// gradients against central differences entry by entry.
///
/// Leaves the builder does not connect to the loss are still checked: their
/// analytic gradient is taken as zero, which the finite difference confirms.
pub fn check_gradients<F>(
    leaves: &[(String, Tensor<f64>)],
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = leaves
        .iter()
        .map(|(_, t)| tape.parameter(t.clone()))
        .collect();
    let loss = build(&mut tape, &refs)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = refs
        .iter()
        .zip(leaves)
        .map(|(&r, (_, t))| match grads.get(r) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut report = GradCheckReport {
        leaves: leaves.len(),
        ..GradCheckReport::default()
    };
    for ((name, _), (&r, analytic)) in leaves.iter().zip(refs.iter().zip(&analytic)) {
        let numeric = numeric_gradient(&mut tape, loss, r, eps)?;
        for (i, (&a, &n)) in analytic.iter().zip(numeric.data()).enumerate() {
            let rel = relative_error(a, n);
            report.entries += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tol {
                report.failures.push(GradMismatch {
                    leaf: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
