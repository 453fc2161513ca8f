//! File formats, synthetic data and configuration used by the binary.

pub mod config;
pub mod io;
pub mod pnm;
pub mod synth;

pub use config::ConfigFile;
pub use io::{load_logits, load_sequence, save_logits, Sequence};
pub use synth::{render, RandomSceneParams, SyntheticSceneConfig, SyntheticSequence};
