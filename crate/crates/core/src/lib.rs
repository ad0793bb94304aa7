//! Multilingual multimodal machine translation with language-aware visual
//! prompts.
//!
//! One shared encoder-decoder translates a pivot language into several
//! target languages. A target-language tag is prefixed to the source, and
//! the embedding of that tag drives a controller network which generates
//! the parameters of the affine map turning frozen visual tokens into
//! visual prompts. Text and prompts are fused by co-attention before
//! decoding.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff
//! ([`autodiff`]), a byte-level BPE tokenizer and corpus handling
//! ([`text`]), the visual-token file format ([`vision`]), the network and
//! its ablation variants ([`model`]), optimization ([`train`]) and
//! decoding/BLEU evaluation ([`eval`]).

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
