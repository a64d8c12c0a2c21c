//! The spatio-temporal mixer network: patch-embedding encoder, depthwise
//! mixer blocks with a long skip, and a shuffle-then-reassemble decoder.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod init;
pub mod network;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use complexity::{count_flops, count_flops_batch, count_params, layer_table, LayerInfo};
pub use config::{encoder_geometry, EncoderGeometry, ModelConfig, Preset};
pub use init::init_weights;
pub use network::{BatchNorm2d, Conv2d, MixerBlock, Model, TraceEvent};
