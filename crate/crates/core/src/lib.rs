//! Span-level knowledge injection for small transformer encoders.
//!
//! The crate covers the whole pipeline: aligning a fact store and entity
//! pages with anchor-annotated text ([`kb`]), turning sentences into
//! encoder inputs with levitated span markers ([`text`]), the attention
//! visibility rules that keep those markers out of the text's view
//! ([`attn`]), a small transformer with reverse-mode autodiff ([`nn`]),
//! the three pre-training losses ([`objectives`]), the training loop
//! ([`pretrain`]) and downstream fine-tuning and evaluation
//! ([`downstream`]). [`toy`] generates a deterministic synthetic world used
//! by the tests and the command-line smoke runs.

pub mod attn;
pub mod downstream;
pub mod error;
pub mod kb;
pub mod nn;
pub mod objectives;
pub mod pretrain;
pub mod text;
pub mod toy;
pub(crate) mod util;

pub use error::{Error, Result};
