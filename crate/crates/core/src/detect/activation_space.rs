//! Activation-space detector: per-layer PCA + KNN label predictions and the
//! likelihood of the resulting label-switching sequence.

use super::features::{check_layers, for_each_chunk, layer_dim};
use crate::error::{config, Error, Result};
use crate::nn::linalg::{gemm, pairwise_sq_distances};
use crate::nn::{Model, Tensor};
use crate::data::LabeledDataset;
use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Switching probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-4;

/// Above this dimension PCA uses randomized subspace iteration.
pub const EXACT_PCA_MAX_DIM: usize = 1024;

const SUBSPACE_ITERS: usize = 4;
const OVERSAMPLE: usize = 10;
const KNN_QUERY_CHUNK: usize = 256;

/// Mean-centred projection onto the leading principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    dim: usize,
    mean: Vec<f64>,
    /// `components × dim`, row-major, orthonormal rows.
    basis: Vec<f64>,
    variances: Vec<f64>,
}

impl Pca {
    /// Fits on `n × dim` rows, keeping `min(components, dim)` directions.
    pub fn fit(rows: &[f64], dim: usize, components: usize, seed: u64) -> Result<Pca> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return config(format!("pca: {} values do not form rows of width {dim}", rows.len()));
        }
        if components == 0 {
            return config("pca: components must be at least 1");
        }
        let n = rows.len() / dim;
        let c = components.min(dim);
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut xc = rows.to_vec();
        for r in xc.chunks_exact_mut(dim) {
            for (v, m) in r.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let total: f64 = xc.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if !(total > 1e-12) {
            return Err(Error::Fit("pca: activations are constant".into()));
        }
        let (basis, variances) = if dim <= EXACT_PCA_MAX_DIM {
            exact_pca(&xc, n, dim, c)
        } else {
            randomized_pca(&xc, n, dim, c, seed)
        };
        Ok(Pca { dim, mean, basis, variances })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.variances.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Variance captured by each direction, descending.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Projects `n × dim` rows to `n × components`.
    pub fn project(&self, rows: &[f64]) -> Vec<f64> {
        let n = rows.len() / self.dim;
        let mut xc = rows.to_vec();
        for r in xc.chunks_exact_mut(self.dim) {
            for (v, m) in r.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let c = self.components();
        let mut out = vec![0.0; n * c];
        gemm(n, self.dim, c, &xc, false, &self.basis, true, 0.0, &mut out);
        out
    }

    /// Maps projections back using only the first `keep` directions.
    pub fn reconstruct(&self, proj: &[f64], keep: usize) -> Vec<f64> {
        let c = self.components();
        let keep = keep.min(c);
        let n = proj.len() / c;
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            out.extend_from_slice(&self.mean);
        }
        let mut p = vec![0.0; n * keep];
        for i in 0..n {
            p[i * keep..(i + 1) * keep].copy_from_slice(&proj[i * c..i * c + keep]);
        }
        gemm(n, keep, self.dim, &p, false, &self.basis[..keep * self.dim], false, 1.0, &mut out);
        out
    }

    pub(crate) fn from_parts(dim: usize, mean: Vec<f64>, basis: Vec<f64>, variances: Vec<f64>) -> Result<Pca> {
        if mean.len() != dim || basis.len() != variances.len() * dim || variances.is_empty() {
            return Err(Error::Format("pca: inconsistent sizes".into()));
        }
        Ok(Pca { dim, mean, basis, variances })
    }
}

fn top_eigen(sym: DMatrix<f64>, c: usize) -> (Vec<usize>, SymmetricEigen<f64, nalgebra::Dyn>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(c);
    (order, eig)
}

fn exact_pca(xc: &[f64], n: usize, dim: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cov = vec![0.0; dim * dim];
    gemm(dim, n, dim, xc, true, xc, false, 0.0, &mut cov);
    cov.iter_mut().for_each(|v| *v /= n as f64);
    let (order, eig) = top_eigen(DMatrix::from_row_slice(dim, dim, &cov), c);
    let mut basis = Vec::with_capacity(c * dim);
    for &j in &order {
        basis.extend(eig.eigenvectors.column(j).iter());
    }
    (basis, order.iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect())
}

fn randomized_pca(xc: &[f64], n: usize, dim: usize, c: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let l = (c + OVERSAMPLE).min(dim);
    let mut rng = crate::seeded_rng(seed);
    // `v` is dim × l, row-major.
    let mut v: Vec<f64> = (0..dim * l).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut y = vec![0.0; n * l];
    for _ in 0..SUBSPACE_ITERS {
        gemm(n, dim, l, xc, false, &v, false, 0.0, &mut y);
        gemm(dim, n, l, xc, true, &y, false, 0.0, &mut v);
        v = orthonormalise(&v, dim, l);
    }
    gemm(n, dim, l, xc, false, &v, false, 0.0, &mut y);
    let mut g = vec![0.0; l * l];
    gemm(l, n, l, &y, true, &y, false, 0.0, &mut g);
    let (order, eig) = top_eigen(DMatrix::from_row_slice(l, l, &g), c);
    let mut basis = vec![0.0; c * dim];
    for (r, &j) in order.iter().enumerate() {
        let u = eig.eigenvectors.column(j);
        let row = &mut basis[r * dim..(r + 1) * dim];
        for (i, out) in row.iter_mut().enumerate() {
            *out = (0..l).map(|t| v[i * l + t] * u[t]).sum();
        }
    }
    (basis, order.iter().map(|&j| eig.eigenvalues[j].max(0.0) / n as f64).collect())
}

/// Orthonormal basis of the column space of a row-major `rows × cols` matrix.
fn orthonormalise(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let q = DMatrix::from_row_slice(rows, cols, m).qr().q();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = q[(i, j)];
        }
    }
    out
}

/// K-nearest-neighbour classifier over projected activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Knn {
    dim: usize,
    k: usize,
    classes: usize,
    corpus: Vec<f64>,
    norms: Vec<f64>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn new(corpus: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize, k: usize) -> Result<Knn> {
        if k == 0 {
            return config("knn: k must be at least 1");
        }
        if dim == 0 || corpus.len() != dim * labels.len() {
            return config("knn: corpus and labels disagree in length");
        }
        if labels.len() <= k {
            return config(format!("knn: corpus of {} points needs more than k = {k}", labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return config(format!("knn: label {l} out of range for {classes} classes"));
        }
        let norms = corpus.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
        Ok(Knn { dim, k, classes, corpus, norms, labels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predict(&self, queries: &[f64]) -> Vec<usize> {
        self.predict_impl(queries, None)
    }

    /// Leave-one-out predictions for every corpus point.
    pub fn predict_loo(&self) -> Vec<usize> {
        self.predict_impl(&self.corpus, Some(0))
    }

    fn predict_impl(&self, queries: &[f64], loo_offset: Option<usize>) -> Vec<usize> {
        let q = queries.len() / self.dim;
        let mut out = Vec::with_capacity(q);
        let mut start = 0;
        while start < q {
            let end = (start + KNN_QUERY_CHUNK).min(q);
            let d2 = pairwise_sq_distances(&queries[start * self.dim..end * self.dim], &self.corpus, &self.norms, self.dim);
            for (r, row) in d2.chunks_exact(self.len()).enumerate() {
                let skip = loo_offset.map(|o| o + start + r);
                out.push(self.vote(&nearest(row, self.k, skip)));
            }
            start = end;
        }
        out
    }

    /// Majority label; ties go to the smaller summed distance, then the
    /// smaller label.
    fn vote(&self, neighbours: &[(f64, usize)]) -> usize {
        let mut count = vec![0usize; self.classes];
        let mut dist = vec![0.0; self.classes];
        for &(d2, j) in neighbours {
            let l = self.labels[j];
            count[l] += 1;
            dist[l] += d2.sqrt();
        }
        (0..self.classes)
            .filter(|&l| count[l] > 0)
            .min_by(|&a, &b| count[b].cmp(&count[a]).then(dist[a].total_cmp(&dist[b])).then(a.cmp(&b)))
            .unwrap_or(0)
    }

    pub(crate) fn parts(&self) -> (&[f64], &[usize], usize) {
        (&self.corpus, &self.labels, self.classes)
    }
}

/// `k` smallest entries of `row` as `(value, index)`, ascending; equal values
/// keep the smaller index.
pub(crate) fn nearest(row: &[f64], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, &d) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(b, _)| b <= d);
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsParams {
    pub components: usize,
    pub k: usize,
    /// Training samples used as the KNN corpus.
    pub fit_samples: usize,
    /// Of those, how many fit the PCA bases.
    pub pca_samples: usize,
    /// Layer indices; defaults to the model's activation layers.
    pub layers: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for AsParams {
    fn default() -> Self {
        AsParams { components: 100, k: 5, fit_samples: 5000, pca_samples: 2000, layers: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsLayer {
    pub layer: usize,
    pub pca: Pca,
    pub knn: Knn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsModel {
    layers: Vec<AsLayer>,
    switch_probs: Vec<f64>,
}

impl AsModel {
    pub(crate) fn from_parts(layers: Vec<AsLayer>, switch_probs: Vec<f64>) -> Result<AsModel> {
        if layers.len() < 2 || switch_probs.len() + 1 != layers.len() {
            return Err(Error::Format("activation-space model: inconsistent layer count".into()));
        }
        if switch_probs.iter().any(|p| !(P_CLAMP..=1.0 - P_CLAMP).contains(p)) {
            return Err(Error::Format("activation-space model: switching probability out of range".into()));
        }
        Ok(AsModel { layers, switch_probs })
    }

    pub fn layers(&self) -> &[AsLayer] {
        &self.layers
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    /// Clamped switching probability between consecutive selected layers.
    pub fn switch_probs(&self) -> &[f64] {
        &self.switch_probs
    }
}

/// Fits per-layer PCA + KNN on a seeded subsample of `train` and estimates
/// switching probabilities from leave-one-out KNN labels.
pub fn as_fit(model: &Model, train: &LabeledDataset, params: &AsParams) -> Result<AsModel> {
    let layers = params.layers.clone().unwrap_or_else(|| model.activation_layers());
    check_layers(model, &layers, "activation space")?;
    if layers.len() < 2 {
        return config("activation space needs at least 2 layers to form a switching pair");
    }
    if params.k == 0 || params.components == 0 || params.pca_samples == 0 {
        return config("activation space: k, components and pca_samples must be positive");
    }
    let n = params.fit_samples.min(train.len());
    if n <= params.k {
        return config(format!("activation space: {n} fit samples do not exceed k = {}", params.k));
    }
    let mut idx = rand::seq::index::sample(&mut crate::seeded_rng(params.seed), train.len(), n).into_vec();
    idx.sort_unstable();
    let images = train.images().select(&idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
    let n_pca = params.pca_samples.min(n);

    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    for_each_chunk(model, &images.slice_batch(0, n_pca), &layers, |_, acts, _| {
        for (dst, a) in raw.iter_mut().zip(acts) {
            dst.extend_from_slice(a.data());
        }
        Ok(())
    })?;
    let mut pcas = Vec::with_capacity(layers.len());
    for (pos, (&layer, rows)) in layers.iter().zip(raw).enumerate() {
        let pca = Pca::fit(&rows, layer_dim(model, layer), params.components, crate::derive_seed(params.seed, pos as u64 + 1))
            .map_err(|e| match e {
                Error::Fit(m) => Error::Fit(format!("layer {layer} ({}): {m}", model.layers()[layer].name())),
                other => other,
            })?;
        pcas.push(pca);
    }

    let mut projected: Vec<Vec<f64>> = pcas.iter().map(|p| Vec::with_capacity(n * p.components())).collect();
    for_each_chunk(model, &images, &layers, |_, acts, _| {
        for ((dst, a), pca) in projected.iter_mut().zip(acts).zip(&pcas) {
            dst.extend(pca.project(a.data()));
        }
        Ok(())
    })?;
    let classes = model.classes();
    let mut as_layers = Vec::with_capacity(layers.len());
    for ((layer, pca), proj) in layers.iter().zip(pcas).zip(projected) {
        let knn = Knn::new(proj, pca.components(), labels.clone(), classes, params.k)?;
        as_layers.push(AsLayer { layer: *layer, pca, knn });
    }
    let loo: Vec<Vec<usize>> = as_layers.iter().map(|l| l.knn.predict_loo()).collect();
    let switch_probs = loo
        .windows(2)
        .map(|w| {
            let switches = w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count();
            (switches as f64 / n as f64).clamp(P_CLAMP, 1.0 - P_CLAMP)
        })
        .collect();
    Ok(AsModel { layers: as_layers, switch_probs })
}

/// Per-sample label sequences `[sample][layer]` from the stored classifiers.
pub fn as_labels(model: &Model, as_model: &AsModel, batch: &Tensor) -> Result<Vec<Vec<usize>>> {
    let layers = as_model.layer_indices();
    check_layers(model, &layers, "activation space")?;
    for l in &as_model.layers {
        if layer_dim(model, l.layer) != l.pca.dim() {
            return config(format!("activation space: layer {} width differs from the fitted model", l.layer));
        }
    }
    let mut out = Vec::new();
    for_each_chunk(model, batch, &layers, |_, acts, _| {
        let per_layer: Vec<Vec<usize>> = as_model
            .layers
            .iter()
            .zip(acts)
            .map(|(l, a)| l.knn.predict(&l.pca.project(a.data())))
            .collect();
        for i in 0..per_layer[0].len() {
            out.push(per_layer.iter().map(|p| p[i]).collect());
        }
        Ok(())
    })?;
    Ok(out)
}

/// `sum_i log(1 - p_i)` over agreeing consecutive pairs plus `log(p_i)` over
/// switching pairs.
pub fn loglik_from_labels(labels: &[usize], switch_probs: &[f64]) -> Result<f64> {
    if labels.len() != switch_probs.len() + 1 {
        return config(format!("{} labels for {} switching probabilities", labels.len(), switch_probs.len()));
    }
    Ok(labels
        .windows(2)
        .zip(switch_probs)
        .map(|(w, &p)| if w[0] == w[1] { (1.0 - p).ln() } else { p.ln() })
        .sum())
}

/// Log-likelihood of each sample's label-switching sequence; lower is more
/// suspicious.
pub fn as_loglik(model: &Model, as_model: &AsModel, batch: &Tensor) -> Result<Vec<f64>> {
    as_labels(model, as_model, batch)?
        .iter()
        .map(|l| loglik_from_labels(l, &as_model.switch_probs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};
    use crate::nn::{train_sgd, LayerSpec, TrainConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seeded_rng(seed);
        // Anisotropic: column j scaled by 1/(j+1).
        (0..n * d).map(|i| rng.random::<f64>() / ((i % d) as f64 + 1.0)).collect()
    }

    fn gram_error(p: &Pca) -> f64 {
        let (c, d) = (p.components(), p.dim());
        let mut worst: f64 = 0.0;
        for a in 0..c {
            for b in 0..c {
                let dot: f64 = (0..d).map(|i| p.basis()[a * d + i] * p.basis()[b * d + i]).sum();
                worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    fn recon_errors(p: &Pca, rows: &[f64]) -> Vec<f64> {
        let proj = p.project(rows);
        (0..=p.components())
            .map(|k| p.reconstruct(&proj, k).iter().zip(rows).map(|(a, b)| (a - b).powi(2)).sum())
            .collect()
    }

    #[test]
    fn exact_pca_is_orthonormal_and_monotone() {
        let rows = random_rows(200, 12, 1);
        let p = Pca::fit(&rows, 12, 5, 0).unwrap();
        assert!(gram_error(&p) < 1e-5);
        assert!(p.variances().windows(2).all(|w| w[0] >= w[1]));
        let e = recon_errors(&p, &rows);
        assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{e:?}");
        let full = Pca::fit(&rows, 12, 12, 0).unwrap();
        assert!(*recon_errors(&full, &rows).last().unwrap() < 1e-18 * rows.len() as f64 + 1e-9);
    }

    #[test]
    fn randomized_pca_matches_exact_variances() {
        let d = EXACT_PCA_MAX_DIM + 6;
        // Rank-3 signal plus small noise.
        let mut rng = crate::seeded_rng(3);
        let dirs: Vec<f64> = (0..3 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut rows = Vec::new();
        for _ in 0..60 {
            let coef = [rng.random::<f64>() * 9.0, rng.random::<f64>() * 3.0, rng.random::<f64>()];
            for i in 0..d {
                rows.push((0..3).map(|t| coef[t] * dirs[t * d + i]).sum::<f64>() + 1e-3 * rng.random::<f64>());
            }
        }
        let p = Pca::fit(&rows, d, 3, 7).unwrap();
        assert!(gram_error(&p) < 1e-5);
        let e = recon_errors(&p, &rows);
        let total = e[0];
        assert!(e[3] < 1e-3 * total, "{e:?}");
    }

    #[test]
    fn constant_rows_rejected() {
        let rows = vec![0.5; 40];
        assert!(matches!(Pca::fit(&rows, 4, 2, 0), Err(Error::Fit(_))));
    }

    #[test]
    fn knn_ties_break_by_distance_then_label() {
        // Query at 0; two neighbours of class 1 at distance 1 and 2, two of
        // class 0 at distance 1 and 3.
        let corpus = vec![1.0, 2.0, -1.0, -3.0, 10.0];
        let knn = Knn::new(corpus, 1, vec![1, 1, 0, 0, 2], 3, 4).unwrap();
        assert_eq!(knn.predict(&[0.0]), vec![1]);
        let knn = Knn::new(vec![1.0, -1.0, 5.0], 1, vec![1, 0, 2], 3, 2).unwrap();
        assert_eq!(knn.predict(&[0.0]), vec![0]);
    }

    #[test]
    fn loo_excludes_self() {
        let knn = Knn::new(vec![0.0, 0.1, 5.0, 5.1], 1, vec![0, 0, 1, 1], 2, 1).unwrap();
        assert_eq!(knn.predict_loo(), vec![0, 0, 1, 1]);
        let knn = Knn::new(vec![0.0, 5.0, 5.1, 5.2], 1, vec![0, 1, 1, 1], 2, 1).unwrap();
        assert_eq!(knn.predict_loo()[0], 1);
    }

    #[test]
    fn loglik_hand_values() {
        let ll = loglik_from_labels(&[3, 3, 3], &[0.1, 0.2]).unwrap();
        assert_eq!(ll, 0.9f64.ln() + 0.8f64.ln());
        let half = loglik_from_labels(&[1, 2, 2, 0], &[0.5, 0.5, 0.5]).unwrap();
        assert!((half - 3.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(loglik_from_labels(&[1, 2], &[0.5, 0.5]).is_err());
    }

    fn small_model() -> (Model, LabeledDataset) {
        let ds = synth_blobs(&SynthConfig { n_per_class: 30, classes: 3, side: 8, spread: 0.1, seed: 1 }).unwrap();
        let m = Model::new(
            vec![8, 8, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 16, outputs: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 8, outputs: 3 },
                LayerSpec::Softmax,
            ],
            3,
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 6, batch_size: 16, learning_rate: 0.05, momentum: 0.9, lr_decay: None, seed: 1 };
        (train_sgd(&m, &ds, &cfg).unwrap().0, ds)
    }

    #[test]
    fn fit_and_score_end_to_end() {
        let (m, ds) = small_model();
        let params = AsParams { components: 4, fit_samples: 90, pca_samples: 60, ..Default::default() };
        let a = as_fit(&m, &ds, &params).unwrap();
        assert_eq!(a.layer_indices(), vec![2, 4, 6]);
        assert!(a.switch_probs().iter().all(|p| (P_CLAMP..=1.0 - P_CLAMP).contains(p)));
        let labels = as_labels(&m, &a, ds.images()).unwrap();
        let ll = as_loglik(&m, &a, ds.images()).unwrap();
        for (l, v) in labels.iter().zip(&ll) {
            // Independent re-evaluation of the per-pair sum.
            let mut oracle = 0.0;
            for i in 1..l.len() {
                let p = a.switch_probs()[i - 1];
                oracle += (0.5 + if l[i] != l[i - 1] { -1.0 } else { 1.0 } * (0.5 - p)).ln();
            }
            assert!((oracle - v).abs() < 1e-12);
        }
        assert_eq!(as_loglik(&m, &a, ds.images()).unwrap(), ll);
        assert_eq!(as_fit(&m, &ds, &params).unwrap(), a);
    }

    #[test]
    fn single_layer_rejected() {
        let (m, ds) = small_model();
        let params = AsParams { layers: Some(vec![2]), ..Default::default() };
        assert!(matches!(as_fit(&m, &ds, &params), Err(Error::Config(_))));
    }

    #[test]
    fn constant_layer_named() {
        let (mut m, ds) = small_model();
        let p = m.params_mut()[1].as_mut().unwrap();
        p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let params = AsParams { fit_samples: 60, pca_samples: 30, ..Default::default() };
        match as_fit(&m, &ds, &params) {
            Err(Error::Fit(msg)) => assert!(msg.contains("layer 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loglik_is_sum_of_pair_terms(labels in proptest::collection::vec(0usize..3, 2..8), seed in 0u64..100) {
            let mut rng = crate::seeded_rng(seed);
            let ps: Vec<f64> = (1..labels.len()).map(|_| rng.random_range(P_CLAMP..1.0 - P_CLAMP)).collect();
            let total = loglik_from_labels(&labels, &ps).unwrap();
            let parts: f64 = (1..labels.len())
                .map(|i| loglik_from_labels(&labels[i - 1..=i], &ps[i - 1..i]).unwrap())
                .sum();
            prop_assert!((total - parts).abs() < 1e-12);
        }

        #[test]
        fn pca_basis_orthonormal(n in 5usize..40, d in 2usize..10, seed in 0u64..100) {
            let rows = random_rows(n, d, seed);
            let p = Pca::fit(&rows, d, 100, seed).unwrap();
            prop_assert_eq!(p.components(), d);
            prop_assert!(gram_error(&p) < 1e-5);
        }
    }
}
