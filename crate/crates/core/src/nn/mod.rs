//! Minimal feed-forward CNN engine.

mod backprop;
mod format;
mod layer;
pub(crate) mod linalg;
mod model;
mod mutate;
mod tensor;
mod train;

pub use backprop::Gradients;
pub use format::{load_model, model_from_bytes, model_to_bytes, save_model};
pub(crate) use format::{read_model, write_model};
pub use layer::{LayerParams, LayerSpec};
pub use model::{mnist_reference_layers, ForwardOutput, Model, StochasticMode};
pub use mutate::mutate_fc_gaussian;
pub use tensor::Tensor;
pub use train::{train_sgd, EpochStats, TrainConfig, TrainHistory};

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
