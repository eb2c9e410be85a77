//! The two-branch alignment model: audio-visual encoder and projection,
//! text encoder and projection, and the two reconstruction decoders.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AblationSwitches, LabelEmbedding, LossTerms, Modality, ModelDims};
pub use forward::{
    backward, decode, embed_audio_visual, embed_classes, encode_audio_visual, encode_text,
    forward_batch, project_output, project_text, BatchInput, ForwardCache, ForwardTrace,
    TraceGrads,
};
pub use params::{ModelGrads, ModelParams, BLOCK_NAMES};
