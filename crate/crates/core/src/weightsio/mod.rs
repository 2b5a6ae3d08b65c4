//! Named-tensor archives, synthetic Markov heads and weight import.

pub mod archive;
pub mod checkpoint;
mod heads;
pub mod mapping;
pub mod synth;

pub use archive::{load_archive, save_archive, ArchiveTensor, DType, WeightArchive, MAGIC};
pub use checkpoint::{load_checkpoint, model_from_archive, model_to_archive, save_checkpoint};
pub use heads::{archive_qk_products, parse_head_name};
pub use mapping::{init_from_archive, MapEntry, Mapping, Truncation};
pub use synth::{install_synthetic_heads, synth_markov_head, synth_markov_head_scaled, SynthHead};
