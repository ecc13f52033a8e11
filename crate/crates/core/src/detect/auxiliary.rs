//! Auxiliary detectors: dropout uncertainty, region-based classification and
//! feature squeezing.

use crate::error::{config, Result};
use crate::nn::{argmax, Model, StochasticMode, Tensor};
use crate::{derive_seed, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Seed stream tied to a sample's pixels, so per-sample randomness does not
/// depend on batch order.
fn sample_seed(seed: u64, sample: &[f64]) -> u64 {
    let mut h = crc32fast::Hasher::new();
    for v in sample {
        h.update(&v.to_le_bytes());
    }
    derive_seed(seed, h.finalize() as u64)
}

fn tile(sample: &[f64], sample_shape: &[usize], times: usize) -> Tensor {
    let mut shape = vec![times];
    shape.extend_from_slice(sample_shape);
    let mut data = Vec::with_capacity(times * sample.len());
    for _ in 0..times {
        data.extend_from_slice(sample);
    }
    Tensor::new(shape, data).expect("tiled shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuParams {
    pub rate: f64,
    pub passes: usize,
    pub seed: u64,
}

impl Default for BuParams {
    fn default() -> Self {
        BuParams { rate: 0.75, passes: 50, seed: 0 }
    }
}

/// Share of `passes` dropout forward passes (dropout on every Dense layer's
/// input) whose prediction differs from the deterministic one.
pub fn bu_dropout_score(model: &Model, batch: &Tensor, rate: f64, passes: usize, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return config(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if passes == 0 {
        return config("dropout passes must be at least 1");
    }
    if model.dense_layers().is_empty() {
        return config("dropout scoring needs a model with Dense layers");
    }
    let batch = model.to_batch(batch)?;
    let base = model.predict(&batch)?;
    let mut out = Vec::with_capacity(base.len());
    for (x, &b) in batch.samples().zip(&base) {
        let mut rng = seeded_rng(sample_seed(seed, x));
        let mut mode = StochasticMode { rng: &mut rng, dense_input_dropout: Some(rate) };
        let probs = model.forward_stochastic(&tile(x, batch.sample_shape(), passes), false, &mut mode)?.output;
        let changes = probs.samples().filter(|p| argmax(p) != b).count();
        out.push(changes as f64 / passes as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionParams {
    pub radius: f64,
    pub m: usize,
    pub seed: u64,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams { radius: 0.3, m: 100, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionVote {
    /// Plurality label over the hypercube (ties to the smaller label).
    pub label: usize,
    /// Share of hypercube samples agreeing with the point prediction.
    pub agreement: f64,
}

/// Votes over `m` uniform samples from the L-inf ball of `radius` around
/// each input, clipped to `[0, 1]`.
pub fn region_based_predict(model: &Model, batch: &Tensor, radius: f64, m: usize, seed: u64) -> Result<Vec<RegionVote>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return config(format!("region radius must be finite and >= 0, got {radius}"));
    }
    if m == 0 {
        return config("region sample count must be at least 1");
    }
    let batch = model.to_batch(batch)?;
    let point = model.predict(&batch)?;
    let mut out = Vec::with_capacity(point.len());
    for (x, &p) in batch.samples().zip(&point) {
        let mut rng = seeded_rng(sample_seed(seed, x));
        let mut cube = tile(x, batch.sample_shape(), m);
        if radius > 0.0 {
            for v in cube.data_mut() {
                *v = (*v + rng.random_range(-radius..=radius)).clamp(0.0, 1.0);
            }
        }
        let labels = model.predict(&cube)?;
        let mut counts = vec![0usize; model.classes()];
        for &l in &labels {
            counts[l] += 1;
        }
        let label = (0..counts.len()).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
        out.push(RegionVote { label, agreement: counts[p] as f64 / m as f64 });
    }
    Ok(out)
}

/// Input simplification used by feature squeezing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Squeezer {
    /// `width × width` median filter with reflected borders. Even widths
    /// take the window `[i - w/2, i + w/2 - 1]` and the upper median.
    Median { width: usize },
    /// Quantisation to `2^bits` levels.
    BitDepth { bits: u32 },
}

impl Default for Squeezer {
    fn default() -> Self {
        Squeezer::Median { width: 2 }
    }
}

impl Squeezer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Squeezer::Median { width } if width == 2 || (width >= 3 && width % 2 == 1) => Ok(()),
            Squeezer::Median { width } => config(format!("median width must be 2 or odd >= 3, got {width}")),
            Squeezer::BitDepth { bits } if (1..=8).contains(&bits) => Ok(()),
            Squeezer::BitDepth { bits } => config(format!("bit depth must lie in 1..=8, got {bits}")),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Applies `squeezer` to an `[N, H, W, C]` batch.
pub fn squeeze(images: &Tensor, squeezer: &Squeezer) -> Result<Tensor> {
    squeezer.validate()?;
    if images.shape().len() != 4 {
        return config(format!("squeeze expects [N, H, W, C], got {:?}", images.shape()));
    }
    let (h, w, c) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    match *squeezer {
        Squeezer::BitDepth { bits } => {
            let levels = ((1u32 << bits) - 1) as f64;
            let data = images.data().iter().map(|&v| (v * levels).round() / levels).collect();
            Tensor::new(images.shape().to_vec(), data)
        }
        Squeezer::Median { width } => {
            let lo = (width / 2) as isize;
            let mut out = vec![0.0; images.len()];
            let mut window = Vec::with_capacity(width * width);
            for (img, dst) in images.samples().zip(out.chunks_exact_mut(h * w * c)) {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            window.clear();
                            for dy in 0..width as isize {
                                for dx in 0..width as isize {
                                    let yy = reflect(y as isize + dy - lo, h);
                                    let xx = reflect(x as isize + dx - lo, w);
                                    window.push(img[(yy * w + xx) * c + ch]);
                                }
                            }
                            window.sort_by(f64::total_cmp);
                            dst[(y * w + x) * c + ch] = window[window.len() / 2];
                        }
                    }
                }
            }
            Tensor::new(images.shape().to_vec(), out)
        }
    }
}

/// L1 distance between the class probabilities of the original and the
/// squeezed input; higher is more suspicious.
pub fn squeeze_score(model: &Model, batch: &Tensor, squeezer: &Squeezer) -> Result<Vec<f64>> {
    let batch = model.to_batch(batch)?;
    let squeezed = squeeze(&batch, squeezer)?;
    let p = model.forward(&batch, false)?.output;
    let q = model.forward(&squeezed, false)?.output;
    Ok(p.samples().zip(q.samples()).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()).collect())
}
