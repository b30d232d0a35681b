//! Randomized invariants over streams, masks, and parameter layouts.
//! Forward-pass properties run few cases (each case is a full model run);
//! pure mask/count properties run many.

use casa_core::fusion::{
    param_counts, ForwardOptions, FusionConfig, FusionMode, LayerStack,
};
use casa_core::mask::{
    build_ca_image_mask, build_ca_mask, build_casa_mask, build_insertion_mask,
    build_text_causal_mask, PreamblePolicy,
};
use casa_core::sequence::{segment_windows, MultimodalSequence, TokenEvent, TokenKind};
use casa_core::{RngStream, Scalar, Tensor};
use proptest::prelude::*;

const D: usize = 16;
const VOCAB: usize = 12;

// ── generators ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum EventPlan {
    Text(u32),
    Image { rows: usize, seed: u64 },
}

fn event_plan() -> impl Strategy<Value = EventPlan> {
    prop_oneof![
        3 => (0u32..VOCAB as u32).prop_map(EventPlan::Text),
        1 => (1usize..4, any::<u64>()).prop_map(|(rows, seed)| EventPlan::Image { rows, seed }),
    ]
}

fn stream_plan(max_events: usize) -> impl Strategy<Value = Vec<EventPlan>> {
    prop::collection::vec(event_plan(), 2..max_events)
}

fn mode_strategy() -> impl Strategy<Value = FusionMode> {
    prop_oneof![
        Just(FusionMode::Insertion),
        Just(FusionMode::CrossAttn { gated: false }),
        Just(FusionMode::CrossAttn { gated: true }),
        Just(FusionMode::CasaParallel),
        Just(FusionMode::CasaPre),
        (2usize..4)
            .prop_flat_map(|p| (Just(p), 0..p))
            .prop_map(|(period, offset)| FusionMode::CasaReplace { period, offset }),
    ]
}

fn realize<E: Scalar>(plan: &[EventPlan]) -> Vec<TokenEvent<E>> {
    plan.iter()
        .map(|p| match p {
            EventPlan::Text(t) => TokenEvent::Text(*t),
            EventPlan::Image { rows, seed } => TokenEvent::ImageBlock {
                embeddings: RngStream::new(*seed).normal_tensor(vec![*rows, D], 1.0),
            },
        })
        .collect()
}

fn single<E: Scalar>(events: Vec<TokenEvent<E>>) -> MultimodalSequence<E> {
    MultimodalSequence { events, sample_boundaries: vec![0] }
}

fn stack_for(mode: FusionMode, seed: u64) -> LayerStack<f64> {
    let cfg = FusionConfig::new(D, 2, 2, VOCAB, mode);
    LayerStack::init(cfg, &mut RngStream::new(seed)).expect("init")
}

fn logits(stack: &LayerStack<f64>, seq: &MultimodalSequence<f64>) -> Tensor<f64> {
    stack
        .forward(seq, &ForwardOptions { inference: true, ..Default::default() })
        .expect("forward")
        .logits_tensor()
}

/// Flat text index of each text event, in event order.
fn text_positions(plan: &[EventPlan]) -> Vec<usize> {
    let mut t = 0;
    let mut out = Vec::new();
    for p in plan {
        if matches!(p, EventPlan::Text(_)) {
            out.push(t);
            t += 1;
        }
    }
    out
}

// ── stream-level isolation properties ───────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// Editing one text token never changes logits at earlier positions.
    #[test]
    fn editing_a_token_leaves_earlier_rows_untouched(
        plan in stream_plan(8),
        mode in mode_strategy(),
        pick in any::<prop::sample::Index>(),
        replacement in 0u32..VOCAB as u32,
    ) {
        let texts = text_positions(&plan);
        prop_assume!(!texts.is_empty());
        let event_idx = {
            let nth = pick.index(texts.len());
            plan.iter()
                .enumerate()
                .filter(|(_, p)| matches!(p, EventPlan::Text(_)))
                .nth(nth)
                .unwrap()
                .0
        };
        let edited_text_idx = texts[plan[..event_idx]
            .iter()
            .filter(|p| matches!(p, EventPlan::Text(_)))
            .count()];

        let stack = stack_for(mode, 91);
        let base = logits(&stack, &single(realize::<f64>(&plan)));
        let mut plan2 = plan.clone();
        let EventPlan::Text(old) = plan2[event_idx] else { unreachable!() };
        plan2[event_idx] = EventPlan::Text((old + 1 + replacement) % VOCAB as u32);
        let edited = logits(&stack, &single(realize::<f64>(&plan2)));

        let vocab = base.shape()[1];
        for t in 0..edited_text_idx {
            let a = &base.data()[t * vocab..(t + 1) * vocab];
            let b = &edited.data()[t * vocab..(t + 1) * vocab];
            prop_assert!(a == b, "row {t} changed by an edit at text index {edited_text_idx}");
        }
    }

    /// Editing an image block never changes logits at positions before it.
    #[test]
    fn editing_an_image_leaves_earlier_rows_untouched(
        plan in stream_plan(8),
        mode in mode_strategy(),
        pick in any::<prop::sample::Index>(),
    ) {
        let images: Vec<usize> = plan
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, EventPlan::Image { .. }))
            .map(|(i, _)| i)
            .collect();
        prop_assume!(!images.is_empty());
        let event_idx = images[pick.index(images.len())];
        let texts_before = plan[..event_idx]
            .iter()
            .filter(|p| matches!(p, EventPlan::Text(_)))
            .count();

        let stack = stack_for(mode, 92);
        let base = logits(&stack, &single(realize::<f64>(&plan)));
        let mut plan2 = plan.clone();
        let EventPlan::Image { rows, seed } = plan2[event_idx] else { unreachable!() };
        plan2[event_idx] = EventPlan::Image { rows, seed: seed.wrapping_add(1) };
        let edited = logits(&stack, &single(realize::<f64>(&plan2)));

        let vocab = base.shape()[1];
        for t in 0..texts_before {
            let a = &base.data()[t * vocab..(t + 1) * vocab];
            let b = &edited.data()[t * vocab..(t + 1) * vocab];
            prop_assert!(a == b, "row {t} changed by an image edit with {texts_before} texts before it");
        }
    }

    /// In a packed pair of samples, editing either sample leaves every
    /// logits row of the other sample bitwise unchanged.
    #[test]
    fn packed_samples_never_interact(
        plan_a in stream_plan(6),
        plan_b in stream_plan(6),
        mode in mode_strategy(),
        edit_first in any::<bool>(),
    ) {
        let texts_a = text_positions(&plan_a).len();
        let texts_b = text_positions(&plan_b).len();
        prop_assume!(texts_a > 0 && texts_b > 0);

        let packed = |a: &[EventPlan], b: &[EventPlan]| {
            let mut events = realize::<f64>(a);
            events.extend(realize::<f64>(b));
            MultimodalSequence { events, sample_boundaries: vec![0, a.len()] }
        };
        let stack = stack_for(mode, 93);
        let base = logits(&stack, &packed(&plan_a, &plan_b));

        // Flip the first text token of the edited sample.
        let flip = |plan: &[EventPlan]| {
            let mut p = plan.to_vec();
            for ev in p.iter_mut() {
                if let EventPlan::Text(t) = ev {
                    *t = (*t + 1) % VOCAB as u32;
                    break;
                }
            }
            p
        };
        let edited = if edit_first {
            logits(&stack, &packed(&flip(&plan_a), &plan_b))
        } else {
            logits(&stack, &packed(&plan_a, &flip(&plan_b)))
        };

        let vocab = base.shape()[1];
        let untouched: Vec<usize> = if edit_first {
            (texts_a..texts_a + texts_b).collect()
        } else {
            (0..texts_a).collect()
        };
        for t in untouched {
            let a = &base.data()[t * vocab..(t + 1) * vocab];
            let b = &edited.data()[t * vocab..(t + 1) * vocab];
            prop_assert!(a == b, "row {t} of the untouched sample changed");
        }
    }

    /// A stream with no images gives bitwise backbone logits in every mode.
    #[test]
    fn imageless_streams_match_the_backbone(
        ids in prop::collection::vec(0u32..VOCAB as u32, 2..10),
        mode in mode_strategy(),
    ) {
        prop_assume!(mode != FusionMode::Insertion);
        let events: Vec<TokenEvent<f64>> = ids.iter().map(|&t| TokenEvent::Text(t)).collect();
        let seq = single(events);

        let fused = stack_for(mode, 94);
        let mut backbone_cfg = fused.cfg().clone();
        backbone_cfg.mode = FusionMode::Insertion;
        let mut backbone = LayerStack::<f64>::init(backbone_cfg, &mut RngStream::new(1)).unwrap();
        backbone.copy_matching_params(&fused).unwrap();

        let a = logits(&fused, &seq);
        let b = logits(&backbone, &seq);
        prop_assert!(a.data() == b.data(), "imageless logits diverge from the backbone");
    }
}

// ── mask properties (cheap: many cases) ─────────────────────────────────

fn layout_from_plan(plan: &[EventPlan]) -> casa_core::sequence::WindowLayout {
    segment_windows(&single(realize::<f64>(plan))).expect("layout")
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Every mask builder's random-access view, dense rendering, and pair
    /// count agree with each other.
    #[test]
    fn mask_views_are_consistent(plan in stream_plan(10), policy_zero in any::<bool>()) {
        let layout = layout_from_plan(&plan);
        let policy = if policy_zero { PreamblePolicy::ZeroUpdate } else { PreamblePolicy::WindowCausal };
        let masks = [
            build_insertion_mask(&layout).unwrap(),
            build_text_causal_mask(&layout).unwrap(),
            build_casa_mask(&layout, policy).unwrap(),
            build_ca_mask(&layout).unwrap(),
            build_ca_image_mask(&layout).unwrap(),
        ];
        for mask in &masks {
            let dense = mask.to_dense();
            let mut popcount = 0u128;
            for q in 0..mask.q_len {
                for k in 0..mask.k_len {
                    let bit = dense[q * mask.k_len + k];
                    prop_assert_eq!(bit, mask.allows(q, k), "cell ({}, {})", q, k);
                    popcount += bit as u128;
                }
            }
            prop_assert_eq!(popcount, mask.allowed_pair_count());
            let mat = mask.materialize();
            prop_assert!(mat.to_dense() == dense, "materialized mask changed bits");
        }
    }

    /// Windowed fusion never lets a text query see keys outside its own
    /// window, its own sample, or (for text keys) its own past.
    #[test]
    fn windowed_fusion_keys_stay_inside_the_window(plan in stream_plan(10)) {
        let layout = layout_from_plan(&plan);
        let mask = build_casa_mask(&layout, PreamblePolicy::ZeroUpdate).unwrap();
        for t in 0..layout.flat_text_len {
            let q = layout.text_to_interleaved(t);
            for p in 0..layout.n_tokens {
                if !mask.allows(t, p) {
                    continue;
                }
                prop_assert_eq!(layout.window_of(p), layout.window_of(q), "cross-window key");
                prop_assert_eq!(layout.sample_of(p), layout.sample_of(q), "cross-sample key");
                if layout.kind(p) == TokenKind::Text {
                    prop_assert!(p <= q, "future text key {} for query {}", p, q);
                }
            }
        }
    }

    /// The replacement mode's parameter count always equals the backbone's,
    /// for any period/offset; additive modes always exceed it.
    #[test]
    fn replacement_mode_never_adds_parameters(
        (period, offset) in (1usize..5).prop_flat_map(|p| (Just(p), 0..p)),
        layers in 1usize..4,
    ) {
        let backbone = param_counts(&FusionConfig::new(D, 2, layers, VOCAB, FusionMode::Insertion))
            .unwrap();
        let replace = param_counts(&FusionConfig::new(
            D, 2, layers, VOCAB, FusionMode::CasaReplace { period, offset },
        ))
        .unwrap();
        prop_assert_eq!(replace.fusion, 0);
        prop_assert_eq!(replace.total(), backbone.total());

        let parallel =
            param_counts(&FusionConfig::new(D, 2, layers, VOCAB, FusionMode::CasaParallel))
                .unwrap();
        prop_assert!(parallel.fusion > 0);
        prop_assert!(parallel.total() > backbone.total());
    }
}
