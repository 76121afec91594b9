//! Skeleton graphs, skeleton sequences and datasets.

mod data;
mod graph;
mod io;
mod synth;

pub use data::{harmonize, Dataset, DatasetManifest, SkeletonSequence, Split, CHANNELS};
pub use graph::{AdjacencyNorm, AdjacencyOptions, SkeletonGraph, BUILTIN_GRAPHS};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub(crate) use io::{put_string, put_u32, ByteReader};
pub use synth::{generate_synthetic, NoisePreset, SynthParams};
