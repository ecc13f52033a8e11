use super::LabeledDataset;
use crate::error::{config, Result};
use crate::nn::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Synthetic single-channel images: one Gaussian bump per class, placed on
/// a circle, plus i.i.d. pixel noise of standard deviation `spread`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    pub side: usize,
    pub spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, n_per_class: 100, classes: 4, side: 12, spread: 0.1 }
    }
}

fn prototype(class: usize, classes: usize, side: usize) -> Vec<f64> {
    let s = side as f64;
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    let (cy, cx) = (s / 2.0 + 0.3 * s * angle.sin(), s / 2.0 + 0.3 * s * angle.cos());
    let width = s / 6.0;
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            img.push(0.9 * (-d2 / (2.0 * width * width)).exp());
        }
    }
    img
}

/// Rows are grouped by class; shuffle before training if order matters.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if cfg.classes < 2 {
        return config("synthetic blobs need at least two classes");
    }
    if cfg.side < 2 || cfg.n_per_class == 0 {
        return config("synthetic blobs need side >= 2 and at least one sample per class");
    }
    if !(cfg.spread >= 0.0) {
        return config(format!("spread {} must be >= 0", cfg.spread));
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let per = cfg.side * cfg.side;
    let mut data = Vec::with_capacity(cfg.classes * cfg.n_per_class * per);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for c in 0..cfg.classes {
        let proto = prototype(c, cfg.classes, cfg.side);
        for _ in 0..cfg.n_per_class {
            for &p in &proto {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((p + cfg.spread * noise).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    LabeledDataset::clean(Tensor::new(vec![n, cfg.side, cfg.side, 1], data)?, labels, cfg.classes)
}
