//! Datasets: IDX ingestion, synthetic blobs, trigger stamping, poisoning.

mod archive;
mod dataset;
mod idx;
mod poison;
mod synth;
mod trigger;

pub use archive::{load_archive, load_dataset, save_dataset, Archive};
pub(crate) use archive::MAGIC as ARCHIVE_MAGIC;
pub use dataset::{LabeledDataset, Provenance};
pub use idx::{load_idx, parse_idx};
pub use poison::{poison_dataset, PoisonConfig};
pub use synth::{synth_blobs, SynthConfig};
pub use trigger::{stamp_batch, stamp_trigger, Anchor, Corner, TriggerSpec};
