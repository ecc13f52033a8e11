use crate::error::{config, Result};
use crate::nn::Tensor;

/// Origin of a dataset row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Clean,
    /// Trigger-stamped copy relabelled to the backdoor target.
    Poisoned,
    /// Trigger-stamped without relabelling.
    Stamped,
}

impl Provenance {
    pub(crate) fn code(self) -> u8 {
        match self {
            Provenance::Clean => 0,
            Provenance::Poisoned => 1,
            Provenance::Stamped => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Provenance::Clean),
            1 => Some(Provenance::Poisoned),
            2 => Some(Provenance::Stamped),
            _ => None,
        }
    }
}

/// Images `N x H x W x C` in `[0, 1]` with class labels and provenance tags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    tags: Vec<Provenance>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, tags: Vec<Provenance>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return config(format!("images must be N x H x W x C, got {:?}", images.shape()));
        }
        let n = images.batch();
        if labels.len() != n || tags.len() != n {
            return config(format!("{n} images but {} labels and {} tags", labels.len(), tags.len()));
        }
        if classes < 2 {
            return config("a dataset needs at least two classes");
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return config(format!("label {l} out of range for {classes} classes"));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return config(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(LabeledDataset { images, labels, tags, classes })
    }

    pub fn clean(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        Self::new(images, labels, vec![Provenance::Clean; n], classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tags(&self) -> &[Provenance] {
        &self.tags
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledDataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
            classes: self.classes,
        })
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Rows of a given provenance.
    pub fn with_tag(&self, tag: Provenance) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.tags[i] == tag).collect();
        self.subset(&idx)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
