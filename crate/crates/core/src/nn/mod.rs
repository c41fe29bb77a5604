//! Minimal batched tensor engine for the scene classifier: layers, focal
//! loss, Adam, and hand-derived reverse-mode gradients through the fixed
//! block composition.

mod adam;
mod layers;
mod loss;
mod model;
mod tensor;

pub use adam::Adam;
pub use layers::{
    dense_softmax, dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, maxpool2d,
    maxpool2d_backward, softmax, softmax_backward, BatchNorm, BnCache, Conv2d, Dense, Mode,
    RunningStats, SeCache, SqueezeExcite,
};
pub use loss::FocalLoss;
pub use model::{BlockCache, ConvStandardPost, Model, ModelSpec};
pub use tensor::Tensor;

use crate::dsp::FeatureMatrix;
use crate::{Error, Result};

/// Stacks feature matrices of equal shape into a `[batch, bands, frames, 1]`
/// input tensor.
pub fn batch_from_features(items: &[&FeatureMatrix]) -> Result<Tensor> {
    let Some(first) = items.first() else {
        return Err(Error::Input("empty batch".into()));
    };
    let (h, w) = (first.bands, first.frames);
    let mut data = Vec::with_capacity(items.len() * h * w);
    for m in items {
        if (m.bands, m.frames) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {h}x{w} feature matrices",
                m.bands, m.frames
            )));
        }
        data.extend(m.values.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![items.len(), h, w, 1], data)
}

/// Index of the largest entry in each row.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests;
