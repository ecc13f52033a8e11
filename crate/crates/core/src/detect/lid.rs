//! Local intrinsic dimensionality (maximum-likelihood estimate) of hidden
//! activations against same-class reference pools.

use super::features::{check_layers, for_each_chunk, layer_dim};
use super::kde::class_pools;
use crate::data::LabeledDataset;
use crate::error::{config, Error, Result};
use crate::nn::linalg::{dot, pairwise_sq_distances};
use crate::nn::{argmax, Model, Tensor};
use serde::{Deserialize, Serialize};

/// Returned when every neighbour sits at the same distance (the estimator
/// diverges).
pub const LID_MAX: f64 = 1e6;

/// Squared distances below this share of the pair's squared norms count as zero.
const ZERO_REL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidParams {
    pub k: usize,
    pub pool_cap: usize,
    /// Layer indices; defaults to the last three hidden layers.
    pub layers: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for LidParams {
    fn default() -> Self {
        LidParams { k: 20, pool_cap: 1000, layers: None, seed: 0 }
    }
}

/// Fitted LID reference: `pools[layer][class]` holds `n × dim` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct LidConfig {
    k: usize,
    layers: Vec<usize>,
    dims: Vec<usize>,
    pools: Vec<Vec<Vec<f64>>>,
    /// Squared row norms of every pool, same nesting as `pools`.
    norms: Vec<Vec<Vec<f64>>>,
}

impl LidConfig {
    pub fn new(k: usize, layers: Vec<usize>, dims: Vec<usize>, pools: Vec<Vec<Vec<f64>>>) -> Result<LidConfig> {
        if k < 2 {
            return config(format!("lid k must be at least 2, got {k}"));
        }
        if layers.is_empty() || dims.len() != layers.len() || pools.len() != layers.len() {
            return config("lid: layers, dims and pools disagree");
        }
        for (l, (&d, per_class)) in layers.iter().zip(dims.iter().zip(&pools)) {
            for (t, pool) in per_class.iter().enumerate() {
                if d == 0 || pool.len() % d != 0 {
                    return config(format!("lid: pool for layer {l} class {t} is not a multiple of width {d}"));
                }
                if pool.len() / d <= k {
                    return config(format!("lid: pool for layer {l} class {t} has {} points, needs more than k = {k}", pool.len() / d));
                }
            }
        }
        let norms = pools
            .iter()
            .zip(&dims)
            .map(|(per_class, &d)| per_class.iter().map(|p| p.chunks_exact(d).map(|r| dot(r, r)).collect()).collect())
            .collect();
        Ok(LidConfig { k, layers, dims, pools, norms })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn pool(&self, layer_pos: usize, class: usize) -> &[f64] {
        &self.pools[layer_pos][class]
    }

    pub fn classes(&self) -> usize {
        self.pools.first().map_or(0, |p| p.len())
    }
}

/// MLE of LID from raw (unsorted) neighbour distances:
/// `-(mean_{i<=k} ln(r_i / r_k))^-1` over the `k` smallest nonzero entries.
/// Fewer than `k` nonzero distances give `0`; a zero mean log ratio gives
/// [`LID_MAX`].
pub fn lid_from_distances(distances: &[f64], k: usize) -> f64 {
    let mut r: Vec<f64> = distances.iter().cloned().filter(|&d| d > 0.0).collect();
    if k == 0 || r.len() < k {
        return 0.0;
    }
    r.select_nth_unstable_by(k - 1, f64::total_cmp);
    r.truncate(k);
    r.sort_by(f64::total_cmp);
    let rk = r[k - 1];
    let mean = r.iter().map(|ri| (ri / rk).ln()).sum::<f64>() / k as f64;
    if mean == 0.0 {
        return LID_MAX;
    }
    (-1.0 / mean).min(LID_MAX)
}

pub fn lid_fit(model: &Model, train: &LabeledDataset, params: &LidParams) -> Result<LidConfig> {
    let layers = match &params.layers {
        Some(l) => l.clone(),
        None => {
            let h = model.hidden_feature_layers();
            h[h.len().saturating_sub(3)..].to_vec()
        }
    };
    check_layers(model, &layers, "lid")?;
    if params.k < 2 {
        return config(format!("lid k must be at least 2, got {}", params.k));
    }
    if params.pool_cap <= params.k {
        return config(format!("lid pool cap {} must exceed k = {}", params.pool_cap, params.k));
    }
    if train.classes() != model.classes() {
        return config(format!("dataset has {} classes, model {}", train.classes(), model.classes()));
    }
    let dims: Vec<usize> = layers.iter().map(|&l| layer_dim(model, l)).collect();
    let classes = train.classes();
    let by_class = class_pools(train.labels(), classes, Some(params.pool_cap), params.seed);
    let mut pools: Vec<Vec<Vec<f64>>> = dims.iter().map(|_| vec![Vec::new(); classes]).collect();
    for (t, idx) in by_class.iter().enumerate() {
        if idx.len() <= params.k {
            return Err(Error::Fit(format!("lid: class {t} has {} samples, needs more than k = {}", idx.len(), params.k)));
        }
        let images = train.images().select(idx)?;
        for_each_chunk(model, &images, &layers, |_, acts, _| {
            for (pos, a) in acts.iter().enumerate() {
                pools[pos][t].extend_from_slice(a.data());
            }
            Ok(())
        })?;
    }
    LidConfig::new(params.k, layers, dims, pools)
}

/// Mean LID over the selected layers, each against the pool of the
/// predicted class; higher is more suspicious.
pub fn lid_score(model: &Model, lid: &LidConfig, batch: &Tensor) -> Result<Vec<f64>> {
    check_layers(model, &lid.layers, "lid")?;
    if lid.layers.iter().zip(&lid.dims).any(|(&l, &d)| layer_dim(model, l) != d) || lid.classes() != model.classes() {
        return config("lid reference does not match the classifier");
    }
    let mut out = Vec::new();
    for_each_chunk(model, batch, &lid.layers, |_, acts, probs| {
        let preds: Vec<usize> = probs.samples().map(argmax).collect();
        let mut sums = vec![0.0; preds.len()];
        for (pos, a) in acts.iter().enumerate() {
            let d = lid.dims[pos];
            for t in 0..lid.classes() {
                let rows: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] == t).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut q = Vec::with_capacity(rows.len() * d);
                for &i in &rows {
                    q.extend_from_slice(a.sample(i));
                }
                let cn = &lid.norms[pos][t];
                let d2 = pairwise_sq_distances(&q, &lid.pools[pos][t], cn, d);
                for (r, &i) in rows.iter().enumerate() {
                    let qn = dot(a.sample(i), a.sample(i));
                    let dist: Vec<f64> = d2[r * cn.len()..(r + 1) * cn.len()]
                        .iter()
                        .zip(cn)
                        .map(|(&v, &n)| if v <= ZERO_REL * (qn + n) { 0.0 } else { v.sqrt() })
                        .collect();
                    sums[i] += lid_from_distances(&dist, lid.k);
                }
            }
        }
        out.extend(sums.into_iter().map(|s| s / lid.layers.len() as f64));
        Ok(())
    })?;
    Ok(out)
}
