pub mod manifest;
pub mod pnm;
pub mod synth;

pub use manifest::{load_manifest, load_split, ManifestEntry, MANIFEST_FILE};
pub use synth::{generate_dataset, generate_sample, generate_split, DatasetSpec, Sample, Split};
