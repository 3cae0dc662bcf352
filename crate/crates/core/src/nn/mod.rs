//! A small transformer encoder with a shallow decoder, trained through a
//! hand-written reverse-mode tape.

pub mod checkpoint;
pub mod mat;
pub mod model;
pub mod params;
pub mod tape;

pub use mat::{dot, Mat};
pub use model::{span_representation, widen_logits, EncoderOutput, Model, ModelConfig, SpanRepMode, DECODER_PREFIX};
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
