//! Kernel density of last-hidden-layer features around the training
//! samples of the predicted class.

use super::features::{for_each_chunk, layer_dim};
use crate::data::LabeledDataset;
use crate::error::{config, Error, Result};
use crate::nn::{argmax, Model, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeParams {
    pub sigma: f64,
    /// Per-class bank cap; `None` keeps every training sample.
    pub bank_cap: Option<usize>,
    pub seed: u64,
}

impl Default for KdeParams {
    fn default() -> Self {
        KdeParams { sigma: 1.2, bank_cap: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    layer: usize,
    dim: usize,
    sigma: f64,
    /// Per class: `n_t × dim` features.
    banks: Vec<Vec<f64>>,
}

impl KdeModel {
    pub(crate) fn from_parts(layer: usize, dim: usize, sigma: f64, banks: Vec<Vec<f64>>) -> Result<KdeModel> {
        if !(sigma > 0.0) || dim == 0 || banks.iter().any(|b| b.len() % dim != 0) {
            return Err(Error::Format("kde model: inconsistent fields".into()));
        }
        Ok(KdeModel { layer, dim, sigma, banks })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn bank(&self, class: usize) -> &[f64] {
        &self.banks[class]
    }

    pub fn classes(&self) -> usize {
        self.banks.len()
    }
}

/// Per-class subsample of indices, capped and seeded.
pub(crate) fn class_pools(labels: &[usize], classes: usize, cap: Option<usize>, seed: u64) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    if let Some(cap) = cap {
        for (t, pool) in pools.iter_mut().enumerate() {
            if pool.len() > cap {
                let mut pick = rand::seq::index::sample(&mut crate::seeded_rng(crate::derive_seed(seed, t as u64)), pool.len(), cap).into_vec();
                pick.sort_unstable();
                *pool = pick.into_iter().map(|j| pool[j]).collect();
            }
        }
    }
    pools
}

pub fn kde_fit(model: &Model, train: &LabeledDataset, params: &KdeParams) -> Result<KdeModel> {
    if !(params.sigma > 0.0) || !params.sigma.is_finite() {
        return config(format!("kde sigma must be positive, got {}", params.sigma));
    }
    if train.classes() != model.classes() {
        return config(format!("dataset has {} classes, model {}", train.classes(), model.classes()));
    }
    let Some(layer) = model.last_hidden_layer() else {
        return config("kde needs a model with a Dense output layer");
    };
    let dim = layer_dim(model, layer);
    let pools = class_pools(train.labels(), train.classes(), params.bank_cap, params.seed);
    if let Some(t) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Fit(format!("kde: no training samples of class {t}")));
    }
    let mut owner = vec![usize::MAX; train.len()];
    for (t, p) in pools.iter().enumerate() {
        for &i in p {
            owner[i] = t;
        }
    }
    let keep: Vec<usize> = (0..train.len()).filter(|&i| owner[i] != usize::MAX).collect();
    let images = train.images().select(&keep)?;
    let mut banks: Vec<Vec<f64>> = pools.iter().map(|p| Vec::with_capacity(p.len() * dim)).collect();
    for_each_chunk(model, &images, &[layer], |start, acts, _| {
        for (r, row) in acts[0].samples().enumerate() {
            banks[owner[keep[start + r]]].extend_from_slice(row);
        }
        Ok(())
    })?;
    Ok(KdeModel { layer, dim, sigma: params.sigma, banks })
}

/// `(1/|X|) sum_i exp(-|x_i - x|^2 / sigma^2)` over an `n × dim` bank.
pub fn kde_value(bank: &[f64], dim: usize, x: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let n = bank.len() / dim;
    bank.chunks_exact(dim).map(|b| (-sq_dist(b, x) / s2).exp()).sum::<f64>() / n as f64
}

/// Natural log of [`kde_value`], evaluated with log-sum-exp so it stays
/// finite far from the bank.
pub fn kde_log_value(bank: &[f64], dim: usize, x: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let e: Vec<f64> = bank.chunks_exact(dim).map(|b| -sq_dist(b, x) / s2).collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + e.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - (e.len() as f64).ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn score_with(model: &Model, kde: &KdeModel, batch: &Tensor, f: fn(&[f64], usize, &[f64], f64) -> f64) -> Result<Vec<f64>> {
    if layer_dim(model, kde.layer) != kde.dim || model.classes() != kde.classes() {
        return config("kde model does not match the classifier");
    }
    let mut out = Vec::new();
    for_each_chunk(model, batch, &[kde.layer], |_, acts, probs| {
        for (feat, p) in acts[0].samples().zip(probs.samples()) {
            let t = argmax(p);
            let bank = &kde.banks[t];
            if bank.is_empty() {
                return Err(Error::Score(format!("kde: empty bank for predicted class {t}")));
            }
            out.push(f(bank, kde.dim, feat, kde.sigma));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Kernel density around the predicted class; in `[0, 1]`, lower is more
/// suspicious.
pub fn kde_score(model: &Model, kde: &KdeModel, batch: &Tensor) -> Result<Vec<f64>> {
    score_with(model, kde, batch, kde_value)
}

/// Log kernel density; same ordering as [`kde_score`] without underflow.
pub fn kde_log_score(model: &Model, kde: &KdeModel, batch: &Tensor) -> Result<Vec<f64>> {
    score_with(model, kde, batch, kde_log_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_point_bank_at_zero_distance() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(kde_value(&x, 3, &x, 1.2), 1.0);
        assert_eq!(kde_log_value(&x, 3, &x, 1.2), 0.0);
    }

    #[test]
    fn symmetric_pair() {
        let bank = [1.0, 0.0, -1.0, 0.0];
        let v = kde_value(&bank, 2, &[0.0, 0.0], 1.2);
        assert!((v - (-1.0f64 / 1.44).exp()).abs() < 1e-15);
    }

    #[test]
    fn brute_force_oracle() {
        let mut rng = crate::seeded_rng(11);
        let bank: Vec<f64> = (0..5 * 4).map(|_| rng.random::<f64>() * 2.0).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let mut sum = 0.0;
        for j in 0..5 {
            let mut d = 0.0;
            for i in 0..4 {
                d += (bank[j * 4 + i] - x[i]).powi(2);
            }
            sum += (-d / (1.2 * 1.2)).exp();
        }
        let oracle = sum / 5.0;
        let v = kde_value(&bank, 4, &x, 1.2);
        assert!(((v - oracle) / oracle).abs() < 1e-12);
        assert!((kde_log_value(&bank, 4, &x, 1.2) - oracle.ln()).abs() < 1e-12);
    }

    #[test]
    fn far_points_underflow_only_in_raw_form() {
        let v = kde_log_value(&[0.0], 1, &[100.0], 1.0);
        assert_eq!(kde_value(&[0.0], 1, &[100.0], 1.0), 0.0);
        assert!((v + 10000.0).abs() < 1e-9);
    }

    #[test]
    fn class_pool_cap_is_seeded() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let a = class_pools(&labels, 2, Some(10), 3);
        assert_eq!(a, class_pools(&labels, 2, Some(10), 3));
        assert!(a.iter().all(|p| p.len() == 10));
        assert!(a[1].iter().all(|&i| labels[i] == 1));
    }

    proptest! {
        #[test]
        fn monotone_along_rays(dir in proptest::collection::vec(-1.0f64..1.0, 3), steps in 2usize..20) {
            prop_assume!(dir.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let centre = [0.2, 0.4, -0.1];
            let mut prev = f64::INFINITY;
            for s in 0..steps {
                let t = s as f64 * 0.25;
                let x: Vec<f64> = centre.iter().zip(&dir).map(|(c, d)| c + t * d).collect();
                let v = kde_value(&centre, 3, &x, 1.2);
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
