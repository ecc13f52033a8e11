//! Dataset archive: header, little-endian `f64` pixels, labels and tags.
//! Attack batches share the container with their own kind code.

use super::{LabeledDataset, Provenance};
use crate::attacks::AttackBatch;
use crate::binio::{Reader, Writer};
use crate::error::{format, Error, Result};
use crate::nn::Tensor;
use std::path::Path;

pub(crate) const MAGIC: &[u8; 8] = b"UDDATSET";
pub(crate) const KIND_DATASET: u8 = 0;

pub(crate) fn write_dataset_body(w: &mut Writer, ds: &LabeledDataset) {
    w.usize(ds.classes());
    w.usizes(ds.images().shape());
    w.f64s(ds.images().data());
    w.usizes(ds.labels());
    w.bytes(&ds.tags().iter().map(|t| t.code()).collect::<Vec<_>>());
}

pub(crate) fn read_dataset_body(r: &mut Reader<'_>) -> Result<LabeledDataset> {
    let classes = r.usize()?;
    let shape = r.usizes()?;
    let data = r.f64s()?;
    let labels = r.usizes()?;
    let tags = r
        .bytes()?
        .into_iter()
        .map(|c| Provenance::from_code(c).ok_or_else(|| Error::Format(format!("dataset: unknown tag {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let images = Tensor::new(shape, data).map_err(|e| Error::Format(format!("dataset: {e}")))?;
    LabeledDataset::new(images, labels, tags, classes).map_err(|e| Error::Format(format!("dataset: {e}")))
}

/// Contents of an archive file.
#[derive(Clone, Debug, PartialEq)]
pub enum Archive {
    Dataset(LabeledDataset),
    Attack(AttackBatch),
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(MAGIC);
    w.u8(KIND_DATASET);
    write_dataset_body(&mut w, ds);
    w.write_to(path)
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, MAGIC, "archive")?;
    let archive = match r.u8()? {
        KIND_DATASET => Archive::Dataset(read_dataset_body(&mut r)?),
        kind => Archive::Attack(crate::attacks::read_attack_body(kind, &mut r)?),
    };
    r.finish()?;
    Ok(archive)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    match load_archive(path)? {
        Archive::Dataset(ds) => Ok(ds),
        Archive::Attack(_) => format(format!("{}: archive holds an attack batch, not a dataset", path.display())),
    }
}
