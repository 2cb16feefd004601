//! Scalar losses recorded on the tape as fused nodes.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Per-row `-log softmax(z)[y]` and the row-wise softmax, using
/// max-subtraction for stability.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let width = logits.shape()[1];
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = logits.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= width {
            return Err(Error::Shape(format!("label {y} outside {width} logits")));
        }
        let row = &mut probs.data_mut()[r * width..(r + 1) * width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let lse = max + z.ln();
        losses.push(lse - logits.row(r)[y]);
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok((losses, probs))
}

impl Graph {
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (losses, mut grad) = softmax_cross_entropy(self.value(logits), labels)?;
        let width = grad.row_len();
        for (r, &y) in labels.iter().enumerate() {
            grad.data_mut()[r * width + y] -= 1.0;
        }
        let total: f64 = losses.iter().sum();
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => {
                let n = labels.len().max(1) as f64;
                grad.scale(1.0 / n);
                total / n
            }
        };
        self.fused_scalar(value, vec![(logits, grad)])
    }

    /// `Σ (pred − target)²`
    pub fn squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if !p.same_shape(target) {
            return Err(Error::Shape(format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let mut grad = p.clone();
        grad.axpy(-1.0, target);
        let value = grad.data().iter().map(|d| d * d).sum();
        grad.scale(2.0);
        self.fused_scalar(value, vec![(pred, grad)])
    }
}
