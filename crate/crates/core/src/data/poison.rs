use super::trigger::{stamp_in_place, TriggerSpec};
use super::{LabeledDataset, Provenance};
use crate::error::{config, Result};
use crate::nn::Tensor;
use rand::seq::{index, SliceRandom};

/// BadNets-style poisoning parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonConfig {
    pub count: usize,
    pub target: usize,
    pub seed: u64,
}

/// Appends `count` trigger-stamped, target-labelled copies of randomly
/// chosen rows, then shuffles the union. Originals are retained.
pub fn poison_dataset(dataset: &LabeledDataset, trigger: &TriggerSpec, cfg: &PoisonConfig) -> Result<LabeledDataset> {
    if cfg.count > dataset.len() {
        return config(format!("poison count {} exceeds dataset size {}", cfg.count, dataset.len()));
    }
    if cfg.target >= dataset.classes() {
        return config(format!("target label {} out of range for {} classes", cfg.target, dataset.classes()));
    }
    trigger.origin(dataset.image_shape())?;

    let mut rng = crate::seeded_rng(cfg.seed);
    let chosen = index::sample(&mut rng, dataset.len(), cfg.count).into_vec();

    let shape = dataset.image_shape().to_vec();
    let per = dataset.images().sample_len();
    let total = dataset.len() + cfg.count;
    let mut rows: Vec<(Vec<f64>, usize, Provenance)> = Vec::with_capacity(total);
    for i in 0..dataset.len() {
        rows.push((dataset.images().sample(i).to_vec(), dataset.labels()[i], dataset.tags()[i]));
    }
    for &i in &chosen {
        let mut img = dataset.images().sample(i).to_vec();
        stamp_in_place(&mut img, &shape, trigger)?;
        rows.push((img, cfg.target, Provenance::Poisoned));
    }
    rows.shuffle(&mut rng);

    let mut data = Vec::with_capacity(total * per);
    let mut labels = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);
    for (img, l, t) in rows {
        data.extend_from_slice(&img);
        labels.push(l);
        tags.push(t);
    }
    let mut full_shape = vec![total];
    full_shape.extend_from_slice(&shape);
    LabeledDataset::new(Tensor::new(full_shape, data)?, labels, tags, dataset.classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};

    fn base() -> LabeledDataset {
        synth_blobs(&SynthConfig { n_per_class: 20, side: 12, ..Default::default() }).unwrap()
    }

    fn trigger() -> TriggerSpec {
        TriggerSpec::square(3, 1, 1.0, super::super::Anchor {
            corner: super::super::Corner::BottomRight,
            row_offset: 1,
            col_offset: 1,
        })
        .unwrap()
    }

    #[test]
    fn zero_count_is_shuffled_copy() {
        let ds = base();
        let out = poison_dataset(&ds, &trigger(), &PoisonConfig { count: 0, target: 1, seed: 3 }).unwrap();
        assert_eq!(out.len(), ds.len());
        assert!(out.tags().iter().all(|&t| t == Provenance::Clean));
        assert_eq!(out.label_histogram(), ds.label_histogram());
        assert_ne!(out.labels(), ds.labels());
    }

    #[test]
    fn poisoned_rows_are_tagged_and_stamped() {
        let ds = base();
        let cfg = PoisonConfig { count: 30, target: 1, seed: 5 };
        let out = poison_dataset(&ds, &trigger(), &cfg).unwrap();
        assert_eq!(out.len(), ds.len() + 30);
        let poisoned: Vec<usize> = (0..out.len()).filter(|&i| out.tags()[i] == Provenance::Poisoned).collect();
        assert_eq!(poisoned.len(), 30);
        for &i in &poisoned {
            assert_eq!(out.labels()[i], 1);
            let img = out.images().sample(i);
            for y in 8..11 {
                for x in 8..11 {
                    assert_eq!(img[y * 12 + x], 1.0);
                }
            }
        }
        // clean rows keep the original label histogram
        assert_eq!(out.with_tag(Provenance::Clean).unwrap().label_histogram(), ds.label_histogram());
        assert_eq!(poison_dataset(&ds, &trigger(), &cfg).unwrap(), out);
    }

    #[test]
    fn validation() {
        let ds = base();
        assert!(poison_dataset(&ds, &trigger(), &PoisonConfig { count: ds.len() + 1, target: 0, seed: 0 }).is_err());
        assert!(poison_dataset(&ds, &trigger(), &PoisonConfig { count: 1, target: 9, seed: 0 }).is_err());
    }
}
