//! Synthetic benchmark generation and image IO.

pub mod dataset;
pub mod io;
pub mod synth;

pub use dataset::{build_dataset, Dataset, LoadedSample, ManifestEntry, Split, SplitCounts};
pub use io::{read_gray, write_gray, Gray};
pub use synth::{generate_normal, inject_anomaly, LabeledSample, SynthConfig};
