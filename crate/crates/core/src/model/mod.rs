//! Convolutional frontend, Transformer encoder with a CTC tap and optional
//! compression, Transformer decoder, and the multi-task loss.

pub(crate) mod checkpoint;
mod config;
mod decode;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointJson};
pub use config::{ModelConfig, TargetVocabulary, EOS};
pub use decode::{label_smoothed_ce, Translation};
pub use network::{
    conv_out_len, log_distance_penalty, multitask_loss, sinusoidal_positions, subsampled_len, Dropout,
    EncodeTrace, EncoderOutput, ItemLengths, ItemLoss, ItemLossValues, Seq2Seq,
};
