//! Malicious-example populations: FGSM adversarial examples and
//! trigger-stamped backdoor examples.

use crate::binio::{Reader, Writer};
use crate::data::{stamp_batch, LabeledDataset, TriggerSpec};
use crate::error::{config, format, input, Error, Result};
use crate::nn::{Model, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

const KIND_ADVERSARIAL: u8 = 1;
const KIND_BACKDOOR: u8 = 2;

/// Gradients are taken in blocks of this many samples.
const FGSM_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    Adversarial,
    Backdoor,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Adversarial => "ae",
            AttackKind::Backdoor => "be",
        }
    }
}

/// Snapshot of the generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackParams {
    Fgsm { epsilon: f64, attempted: usize, correct: usize, retained: usize },
    Backdoor { target: usize },
}

/// A batch of malicious examples of a single kind. May be empty (an FGSM
/// run can retain nothing).
#[derive(Clone, Debug, PartialEq)]
pub struct AttackBatch {
    pub kind: AttackKind,
    pub image_shape: Vec<usize>,
    images: Vec<f64>,
    pub source_labels: Vec<usize>,
    /// Row index of each example in the dataset it was derived from.
    pub source_indices: Vec<usize>,
    /// Backdoor target; `None` for untargeted adversarial examples.
    pub target: Option<usize>,
    pub params: AttackParams,
}

impl AttackBatch {
    pub fn len(&self) -> usize {
        self.source_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_labels.is_empty()
    }

    /// Examples as an `[N, H, W, C]` tensor; errors on an empty batch.
    pub fn examples(&self) -> Result<Tensor> {
        if self.is_empty() {
            return input(format!("{} batch is empty", self.kind.name()));
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.image_shape);
        Tensor::new(shape, self.images.clone())
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let per: usize = self.image_shape.iter().product();
        &self.images[i * per..(i + 1) * per]
    }

    /// First `n` examples.
    pub fn truncate(&mut self, n: usize) {
        let per: usize = self.image_shape.iter().product();
        let n = n.min(self.len());
        self.images.truncate(n * per);
        self.source_labels.truncate(n);
        self.source_indices.truncate(n);
    }
}

/// Outcome counts of an FGSM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgsmReport {
    pub attempted: usize,
    pub correct: usize,
    pub retained: usize,
    /// `retained / correct`: share of correctly classified inputs flipped.
    pub yield_rate: f64,
}

/// Fast gradient sign method: `x' = clip(x + eps * sign(dL/dx), 0, 1)`.
///
/// Only samples the model classified correctly and misclassifies after the
/// perturbation are retained.
pub fn fgsm(model: &Model, images: &Tensor, labels: &[usize], epsilon: f64) -> Result<(AttackBatch, FgsmReport)> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return config(format!("epsilon must be finite and >= 0, got {epsilon}"));
    }
    let images = model.to_batch(images)?;
    model.check_labels(images.batch(), labels)?;
    let n = images.batch();
    let image_shape = images.sample_shape().to_vec();

    let mut kept_images = Vec::new();
    let mut kept_labels = Vec::new();
    let mut kept_indices = Vec::new();
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let end = (start + FGSM_CHUNK).min(n);
        let x = images.slice_batch(start, end);
        let y = &labels[start..end];
        let before = model.predict(&x)?;
        let grads = model.gradients(&x, y)?;
        let mut adv = x.clone();
        for (v, g) in adv.data_mut().iter_mut().zip(grads.input.data()) {
            let step = if *g > 0.0 {
                epsilon
            } else if *g < 0.0 {
                -epsilon
            } else {
                0.0
            };
            *v = (*v + step).clamp(0.0, 1.0);
        }
        let after = model.predict(&adv)?;
        for i in 0..end - start {
            if before[i] != y[i] {
                continue;
            }
            correct += 1;
            if after[i] != y[i] {
                kept_images.extend_from_slice(adv.sample(i));
                kept_labels.push(y[i]);
                kept_indices.push(start + i);
            }
        }
        start = end;
    }
    let retained = kept_labels.len();
    let report = FgsmReport {
        attempted: n,
        correct,
        retained,
        yield_rate: if correct == 0 { 0.0 } else { retained as f64 / correct as f64 },
    };
    let batch = AttackBatch {
        kind: AttackKind::Adversarial,
        image_shape,
        images: kept_images,
        source_labels: kept_labels,
        source_indices: kept_indices,
        target: None,
        params: AttackParams::Fgsm { epsilon, attempted: n, correct, retained },
    };
    Ok((batch, report))
}

/// Stamps every test image whose label differs from `target`.
pub fn make_backdoor_examples(test: &LabeledDataset, trigger: &TriggerSpec, target: usize) -> Result<AttackBatch> {
    if target >= test.classes() {
        return config(format!("target label {target} out of range for {} classes", test.classes()));
    }
    trigger.origin(test.image_shape())?;
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] != target).collect();
    let image_shape = test.image_shape().to_vec();
    if keep.is_empty() {
        return Ok(AttackBatch {
            kind: AttackKind::Backdoor,
            image_shape,
            images: Vec::new(),
            source_labels: Vec::new(),
            source_indices: Vec::new(),
            target: Some(target),
            params: AttackParams::Backdoor { target },
        });
    }
    let stamped = stamp_batch(&test.images().select(&keep)?, trigger)?;
    Ok(AttackBatch {
        kind: AttackKind::Backdoor,
        image_shape,
        images: stamped.into_data(),
        source_labels: keep.iter().map(|&i| test.labels()[i]).collect(),
        source_indices: keep,
        target: Some(target),
        params: AttackParams::Backdoor { target },
    })
}

/// Backdoor: share predicted as the target. Adversarial: share predicted
/// differently from the source label.
pub fn attack_success_rate(model: &Model, batch: &AttackBatch) -> Result<f64> {
    let x = batch.examples()?;
    let (pred, _) = model.predict_chunked(&x, 256)?;
    let hits = match (batch.kind, batch.target) {
        (AttackKind::Backdoor, Some(t)) => pred.iter().filter(|&&p| p == t).count(),
        (AttackKind::Backdoor, None) => return input("backdoor batch without a target label"),
        (AttackKind::Adversarial, _) => pred.iter().zip(&batch.source_labels).filter(|(p, s)| p != s).count(),
    };
    Ok(hits as f64 / batch.len() as f64)
}

pub fn save_attack_batch(batch: &AttackBatch, path: &Path) -> Result<()> {
    let mut w = Writer::new(crate::data::ARCHIVE_MAGIC);
    w.u8(match batch.kind {
        AttackKind::Adversarial => KIND_ADVERSARIAL,
        AttackKind::Backdoor => KIND_BACKDOOR,
    });
    w.usizes(&batch.image_shape);
    w.f64s(&batch.images);
    w.usizes(&batch.source_labels);
    w.usizes(&batch.source_indices);
    match batch.target {
        Some(t) => {
            w.u8(1);
            w.usize(t);
        }
        None => w.u8(0),
    }
    w.str(&serde_json::to_string(&batch.params).expect("params serialise"));
    w.write_to(path)
}

pub(crate) fn read_attack_body(kind: u8, r: &mut Reader<'_>) -> Result<AttackBatch> {
    let kind = match kind {
        KIND_ADVERSARIAL => AttackKind::Adversarial,
        KIND_BACKDOOR => AttackKind::Backdoor,
        k => return format(format!("archive: unknown kind {k}")),
    };
    let image_shape = r.usizes()?;
    let images = r.f64s()?;
    let source_labels = r.usizes()?;
    let source_indices = r.usizes()?;
    let target = match r.u8()? {
        0 => None,
        1 => Some(r.usize()?),
        f => return format(format!("archive: bad target flag {f}")),
    };
    let params: AttackParams =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("archive: attack params: {e}")))?;
    let per: usize = image_shape.iter().product();
    if per == 0 || images.len() != per * source_labels.len() || source_indices.len() != source_labels.len() {
        return format("archive: attack batch sizes are inconsistent");
    }
    if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return format("archive: attack pixels outside [0, 1]");
    }
    Ok(AttackBatch { kind, image_shape, images, source_labels, source_indices, target, params })
}

pub fn load_attack_batch(path: &Path) -> Result<AttackBatch> {
    match crate::data::load_archive(path)? {
        crate::data::Archive::Attack(b) => Ok(b),
        crate::data::Archive::Dataset(_) => format(format!("{}: archive holds a dataset, not an attack batch", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};
    use crate::nn::{train_sgd, LayerSpec, TrainConfig};
    use proptest::prelude::*;

    fn trained() -> (Model, LabeledDataset) {
        let ds = synth_blobs(&SynthConfig { n_per_class: 40, classes: 3, side: 8, spread: 0.15, seed: 4 }).unwrap();
        let m = Model::new(
            vec![8, 8, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 16, outputs: 3 },
                LayerSpec::Softmax,
            ],
            1,
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 16, learning_rate: 0.05, momentum: 0.9, lr_decay: None, seed: 2 };
        (train_sgd(&m, &ds, &cfg).unwrap().0, ds)
    }

    #[test]
    fn zero_epsilon_retains_nothing() {
        let (m, ds) = trained();
        let (batch, report) = fgsm(&m, ds.images(), ds.labels(), 0.0).unwrap();
        assert_eq!(report.retained, 0);
        assert_eq!(report.yield_rate, 0.0);
        assert!(batch.is_empty());
        assert!(matches!(attack_success_rate(&m, &batch), Err(Error::Input(_))));
    }

    #[test]
    fn retained_examples_are_misclassified_and_bounded() {
        let (m, ds) = trained();
        let eps = 0.4;
        let (batch, report) = fgsm(&m, ds.images(), ds.labels(), eps).unwrap();
        assert!(report.retained > 0, "{report:?}");
        assert_eq!(attack_success_rate(&m, &batch).unwrap(), 1.0);
        for i in 0..batch.len() {
            let orig = ds.images().sample(batch.source_indices[i]);
            for (a, b) in batch.example(i).iter().zip(orig) {
                assert!((a - b).abs() <= eps + 1e-12);
            }
        }
    }

    #[test]
    fn backdoor_examples_exclude_target() {
        let ds = synth_blobs(&SynthConfig { side: 28, n_per_class: 5, ..Default::default() }).unwrap();
        let b = make_backdoor_examples(&ds, &TriggerSpec::mnist_default(), 1).unwrap();
        assert_eq!(b.len(), ds.len() - ds.label_histogram()[1]);
        assert!(b.source_labels.iter().all(|&l| l != 1));
        for i in 0..b.len() {
            assert_eq!(b.example(i)[23 * 28 + 23], 1.0);
            assert_eq!(b.example(i)[26 * 28 + 26], 1.0);
        }
        assert_eq!(make_backdoor_examples(&ds, &TriggerSpec::mnist_default(), 1).unwrap(), b);
    }

    #[test]
    fn attack_archive_round_trip() {
        let (m, ds) = trained();
        let (batch, _) = fgsm(&m, ds.images(), ds.labels(), 0.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.uds");
        save_attack_batch(&batch, &p).unwrap();
        assert_eq!(load_attack_batch(&p).unwrap(), batch);
        assert!(crate::data::load_dataset(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fgsm_linf_bound(eps in 0.0f64..0.6, seed in 0u64..1000) {
            let m = Model::new(vec![4, 4, 1], vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 16, outputs: 3 },
                LayerSpec::Softmax,
            ], seed).unwrap();
            let mut rng = crate::seeded_rng(seed);
            use rand::Rng;
            let x: Vec<f64> = (0..8 * 16).map(|_| rng.random::<f64>()).collect();
            let x = Tensor::new(vec![8, 4, 4, 1], x).unwrap();
            let labels = m.predict(&x).unwrap();
            let (batch, _) = fgsm(&m, &x, &labels, eps).unwrap();
            for i in 0..batch.len() {
                let orig = x.sample(batch.source_indices[i]);
                for (a, b) in batch.example(i).iter().zip(orig) {
                    prop_assert!((a - b).abs() <= eps + 1e-12);
                    prop_assert!((0.0..=1.0).contains(a));
                }
            }
        }

        #[test]
        fn success_rate_is_permutation_invariant(seed in 0u64..100) {
            let ds = synth_blobs(&SynthConfig { side: 8, n_per_class: 6, classes: 3, ..Default::default() }).unwrap();
            let m = Model::new(vec![8, 8, 1], vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 3 },
                LayerSpec::Softmax,
            ], seed).unwrap();
            let trig = TriggerSpec::square(2, 1, 1.0, crate::data::Anchor {
                corner: crate::data::Corner::BottomRight, row_offset: 1, col_offset: 1 }).unwrap();
            let b = make_backdoor_examples(&ds, &trig, 0).unwrap();
            let mut order: Vec<usize> = (0..ds.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::seeded_rng(seed));
            let b2 = make_backdoor_examples(&ds.subset(&order).unwrap(), &trig, 0).unwrap();
            prop_assert_eq!(attack_success_rate(&m, &b).unwrap(), attack_success_rate(&m, &b2).unwrap());
        }
    }
}
