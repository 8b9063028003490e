//! Encoder assembly, readout heads, training and checkpoints.

mod checkpoint;
mod config;
mod encoder;
mod train;

pub use checkpoint::{from_bytes as checkpoint_from_bytes, load as load_checkpoint, save as save_checkpoint, to_bytes as checkpoint_to_bytes};
pub use config::{preset, presets, EncoderConfig, HeadKind, Preset, TrainConfig, BYTE_VOCAB, LISTOPS_VOCAB};
pub use encoder::{
    build_encoder, encode, forward_classify, forward_classify_bound, forward_match, forward_match_bound, param_shapes,
    BoundParams, ForwardCtx, ForwardOutput, ModelParams,
};
pub use train::{
    batch_logits, evaluate, loss_and_grads, predict, train, Adam, EvalPoint, Example, Input, TrainHistory, Trainer,
};
