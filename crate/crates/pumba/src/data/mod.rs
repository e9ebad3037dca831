//! On-disk formats and dataset generation.

pub mod container;
pub mod synthetic;
pub mod tensor_file;

pub use container::{write_container, ContainerWriter, DatasetContainer, ManifestRecord};
pub use synthetic::{generate, generate_synthetic, SyntheticSpec};
