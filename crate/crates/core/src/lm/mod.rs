//! Tokenizer and the frozen decoder-only backbone.

pub mod decode;
pub mod layers;
pub mod model;
pub mod pretrain;
pub mod tokenizer;

pub use decode::{sample_completion, Completion, DecodeState};
pub use layers::Binding;
pub use model::{Backbone, BackboneVars, TransformerConfig};
pub use tokenizer::Tokenizer;
