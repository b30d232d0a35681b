//! casa-core: a desk-scale laboratory for text/image fusion inside a small
//! causal transformer.
//!
//! The crate implements three families of vision-language fusion — token
//! insertion into the text stream, gated cross-attention, and windowed
//! cross-attention-via-self-attention (CASA) — over one shared tape-based
//! autodiff substrate, plus the machinery needed to cross-check them:
//! blockwise masked attention, streaming inference with constant-size image
//! caches, attention cost models, ablation probes, and a synthetic
//! patch-color retrieval task that trains on a CPU in minutes.

pub mod attention;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod mask;
pub mod probes;
pub mod rng;
pub mod sequence;
pub mod streaming;
pub mod tape;
pub mod tensor;
pub mod toytask;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{DType, Scalar, Tensor};
