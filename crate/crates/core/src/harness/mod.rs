//! Desk-scale data handling, training and evaluation.

pub mod container;
mod dataset;
mod synth;
mod train;

pub use container::{read_tensor, write_tensor};
pub use dataset::{ingest, ingest_with_classes, write_dataset, Dataset, Sample, Split, MANIFEST};
pub use synth::{nearest_centroid_accuracy, synth_dataset, synth_image, synth_samples, Grating, SynthConfig};
pub use train::{augment, evaluate, log_csv, train, train_with_progress, LogRow, TrainConfig, TrainOutcome, LOG_HEADER};
