//! The toy autoregressive language model.

mod config;
mod decode;
mod model;
mod prefix;
mod sample;
mod train;

pub use config::LMConfig;
pub use decode::{generate_cached, generate_full, IncrementalDecoder};
pub use model::{
    attach_prefix, AdapterVars, BoundModel, ForwardInput, ForwardOutput, HiddenCache, LanguageModel, Layer, LogitsMode,
    ModelView, Projection, TokenId,
};
pub use prefix::PrefixState;
pub use sample::{argmax, sample_next, DecodeConfig, Strategy};
pub use train::{pretrain, sequence_loss, unigram_entropy, PretrainConfig, PretrainStep};
