//! Synthetic data, dataset directories and checkpoints.

pub mod rng;
pub mod store;
pub mod synth;

pub use store::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, read_dataset, save_checkpoint, write_dataset,
    CheckpointMeta,
};
pub use synth::{synth_dataset, synth_sample, Mask, SegSample, SynthConfig};
