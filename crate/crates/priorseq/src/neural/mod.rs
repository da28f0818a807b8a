//! Minimal dense numeric core: tensors, an LSTM cell, masked softmax, the
//! Adam optimizer, checkpoint I/O and a finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod lstm;
pub mod tensor;

pub use adam::AdamState;
pub use lstm::{lstm_backward, lstm_step, LstmCache, LstmParams};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::ngram::MaskVector;

/// Parameter collections expose their trainable tensors by name so the
/// optimizer, clipping, checkpoints and the gradient checker can treat every
/// architecture uniformly.
pub trait NamedTensors {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor(&self, name: &str) -> &Tensor;
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor;
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax restricted to the mask support. Off-mask probabilities are exact
/// zeros; on-mask entries are renormalized.
pub fn masked_softmax(logits: &[f64], mask: Option<&MaskVector>) -> Result<Vec<f64>> {
    let mask = match mask {
        None => return Ok(softmax(logits)),
        Some(m) => m,
    };
    if mask.len() != logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs logits length {}",
            mask.len(),
            logits.len()
        )));
    }
    if mask.cardinality() == 0 {
        return Err(Error::MaskEmpty);
    }
    let max = mask
        .ones()
        .map(|k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for k in mask.ones() {
        let e = (logits[k] - max).exp();
        out[k] = e;
        sum += e;
    }
    for k in mask.ones() {
        out[k] /= sum;
    }
    Ok(out)
}

/// Rescale all gradient tensors so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<P: NamedTensors>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for name in grads.tensor_names() {
        sq += grads
            .tensor(&name)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for name in grads.tensor_names() {
            for v in grads.tensor_mut(&name).data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Central finite-difference gradient check. `loss` recomputes the scalar
/// objective from the current parameter values; `analytic` is the gradient
/// under test, stored in a parameter-shaped container. Returns the maximum
/// relative error over all coordinates.
pub fn finite_diff_check<P: NamedTensors>(
    params: &mut P,
    analytic: &P,
    loss: &mut dyn FnMut(&P) -> f64,
    step: f64,
) -> f64 {
    let mut max_rel = 0.0;
    for name in params.tensor_names() {
        let n = params.tensor(&name).len();
        for i in 0..n {
            let orig = params.tensor(&name).data()[i];
            params.tensor_mut(&name).data_mut()[i] = orig + step;
            let plus = loss(params);
            params.tensor_mut(&name).data_mut()[i] = orig - step;
            let minus = loss(params);
            params.tensor_mut(&name).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.tensor(&name).data()[i];
            // The floor keeps central-difference cancellation noise (about
            // 1e-10 on an O(10) loss at step 1e-5) from dominating
            // coordinates whose true gradient is zero.
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
