//! Dataset ingestion, calibration sampling and on-disk formats.

pub mod checkpoint;
pub mod dataset;
pub mod tensor_file;

pub use checkpoint::{Checkpoint, ModelKind};
pub use dataset::{
    sample_nat, AttackMetadata, Dataset, DatasetFormat, DatasetManifest, PixelEncoding,
};
pub use dataset::{read_json, write_json};
