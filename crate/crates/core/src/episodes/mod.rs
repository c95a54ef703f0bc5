//! Multi-domain datasets, base/novel splits and episode sampling.

mod csv;
mod dataset;
mod sampler;
mod synth;

pub use self::csv::{ingest_csv, CsvSchema};
pub use dataset::{
    split_base_novel, CellFile, ClassEntry, Dataset, DatasetManifest, DomainEntry, MANIFEST_FILE,
};
pub use sampler::{sample_batch, sample_episode, Episode};
pub use synth::{
    default_classes, default_domains, gen_synthetic, render, ClassSpec, DomainSpec, Family,
    GeneratorSpec,
};
