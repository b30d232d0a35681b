//! Shared fixtures for the criterion benches: small stacks and interleaved
//! streams sized so a full sweep stays under a couple of minutes.

use casa_core::fusion::{FusionConfig, FusionMode, LayerStack};
use casa_core::sequence::{MultimodalSequence, TokenEvent};
use casa_core::{RngStream, Scalar, Tensor};

pub const D_MODEL: usize = 32;
pub const N_HEADS: usize = 4;
pub const N_LAYERS: usize = 2;
pub const VOCAB: usize = 32;

pub fn all_modes() -> Vec<(&'static str, FusionMode)> {
    vec![
        ("insertion", FusionMode::Insertion),
        ("cross-attn", FusionMode::CrossAttn { gated: false }),
        ("gated-cross-attn", FusionMode::CrossAttn { gated: true }),
        ("casa-parallel", FusionMode::CasaParallel),
        ("casa-pre", FusionMode::CasaPre),
        ("casa-replace", FusionMode::CasaReplace { period: 2, offset: 1 }),
    ]
}

pub fn stack<E: Scalar>(mode: FusionMode, seed: u64) -> LayerStack<E> {
    let cfg = FusionConfig::new(D_MODEL, N_HEADS, N_LAYERS, VOCAB, mode);
    let mut rng = RngStream::new(seed);
    LayerStack::init(cfg, &mut rng).expect("stack init")
}

/// One sample: a 4-token text preamble, then `windows` windows of
/// (4 image rows + 6 text tokens).
pub fn packed_stream<E: Scalar>(windows: usize, seed: u64) -> MultimodalSequence<E> {
    let mut rng = RngStream::new(seed);
    let mut events: Vec<TokenEvent<E>> =
        (0..4).map(|t| TokenEvent::Text(1 + (t as u32 + seed as u32) % (VOCAB as u32 - 1))).collect();
    for _ in 0..windows {
        events.push(TokenEvent::ImageBlock { embeddings: image_rows(&mut rng, 4) });
        events.extend((0..6).map(|t: u32| TokenEvent::Text(1 + (t * 7 + 3) % (VOCAB as u32 - 1))));
    }
    MultimodalSequence::single(events).expect("stream builds")
}

pub fn image_rows<E: Scalar>(rng: &mut RngStream, rows: usize) -> Tensor<E> {
    rng.normal_tensor(vec![rows, D_MODEL], 1.0)
}
