//! Top-1 evaluation over the base-class (rotation-0) head rows.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::model::{classify, encode, ModelParams};
use crate::tensor::Tensor;

/// Argmax over rows `head_row(c)` for each base class; ties go to the
/// lowest class id.
pub fn predict(params: &ModelParams, inputs: &Tensor) -> Result<Vec<usize>> {
    let logits = classify(params, &encode(params, inputs)?)?;
    let classes = params.arch.base_classes();
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..classes {
                if row[params.arch.head_row(c)] > row[params.arch.head_row(best)] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of correctly classified samples; side-effect free.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if data.num_classes() > params.arch.base_classes() {
        return Err(Error::Dimension(format!(
            "{} classes but the head predicts {}",
            data.num_classes(),
            params.arch.base_classes()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx);
    let pred = predict(params, &x)?;
    Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}
