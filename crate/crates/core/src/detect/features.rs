//! Chunked extraction of intermediate activations.

use crate::error::{config, Result};
use crate::nn::{Model, Tensor};

pub(crate) const CHUNK: usize = 64;

pub(crate) fn check_layers(model: &Model, layers: &[usize], what: &str) -> Result<()> {
    if layers.is_empty() {
        return config(format!("{what}: no layers selected"));
    }
    for w in layers.windows(2) {
        if w[0] >= w[1] {
            return config(format!("{what}: layer indices must be strictly increasing, got {layers:?}"));
        }
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= model.layers().len()) {
        return config(format!("{what}: layer {l} out of range for {} layers", model.layers().len()));
    }
    Ok(())
}

pub(crate) fn layer_dim(model: &Model, layer: usize) -> usize {
    model.layer_shape(layer).iter().product()
}

/// Runs `images` through `model` in chunks and hands `f` the chunk offset,
/// the selected layer outputs and the model output of each chunk.
pub(crate) fn for_each_chunk(
    model: &Model,
    images: &Tensor,
    layers: &[usize],
    mut f: impl FnMut(usize, &[&Tensor], &Tensor) -> Result<()>,
) -> Result<()> {
    let images = model.to_batch(images)?;
    let n = images.batch();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let out = model.forward(&images.slice_batch(start, end), true)?;
        let acts = out.activations.expect("recorded");
        let selected: Vec<&Tensor> = layers.iter().map(|&l| &acts[l]).collect();
        f(start, &selected, &out.output)?;
        start = end;
    }
    Ok(())
}
