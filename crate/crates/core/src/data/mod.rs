//! Embedding banks, triplet manifests, and the synthetic generator.

mod bank;
mod manifest;
mod split;
pub mod synth;

pub use bank::{EmbeddingBank, BANK_MAGIC};
pub use manifest::{
    load_manifest, manifest_to_string, parse_manifest, save_manifest, validate_manifest, Manifest, TripletRecord,
};
pub use split::split_manifest;
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
