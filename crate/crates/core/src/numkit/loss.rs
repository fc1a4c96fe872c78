use serde::{Deserialize, Serialize};

use super::mlp::{softmax, Head};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    Mse,
}

impl LossKind {
    pub fn for_head(head: Head) -> Self {
        match head {
            Head::SoftmaxClassifier => LossKind::SoftmaxCe,
            Head::LinearRegressor => LossKind::Mse,
        }
    }
}

/// Supervision for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

/// Loss and its gradient w.r.t. `output`.
///
/// `output` is the final pre-activation: logits for softmax cross-entropy, the
/// predicted values for MSE. The squared error is summed over output
/// coordinates, so its gradient is `2 (output - target)`.
pub fn loss_eval(kind: LossKind, output: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    match (kind, target) {
        (LossKind::SoftmaxCe, Target::Class(y)) => {
            if y >= output.len() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: output.len(),
                });
            }
            let m = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + output.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let loss = (lse - output[y]).max(0.0);
            let mut grad = softmax(output);
            grad[y] -= 1.0;
            Ok((loss, grad))
        }
        (LossKind::Mse, Target::Values(t)) => {
            if t.len() != output.len() {
                return Err(Error::shape(&[output.len()], &[t.len()]));
            }
            let mut loss = 0.0;
            let grad = output
                .iter()
                .zip(t)
                .map(|(o, y)| {
                    let d = o - y;
                    loss += d * d;
                    2.0 * d
                })
                .collect();
            Ok((loss, grad))
        }
        (kind, target) => Err(Error::InvalidArgument(format!(
            "target {target:?} does not fit loss {kind:?}"
        ))),
    }
}
