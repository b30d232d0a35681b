//! Re-runnable verification suites behind the CLI's `verify` subcommand.
//!
//! Each suite re-derives a family of invariants from scratch on fresh random
//! instances — mask predicates against brute force, model-level equalities,
//! gradients against finite differences, streaming decode against offline
//! forwards — and reports one [`CaseResult`] per named case. The whole run
//! renders to a JUnit-style JSON document via [`junit_json`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::cost::{
    exact_attention_entries, fit_growth_exponent, symbolic_cost, synthetic_layout, CostParams,
    WReading,
};
use crate::fusion::{
    cross_entropy_at, param_counts, ForwardOptions, FusionConfig, FusionMode, LayerStack,
    QFormerConfig,
};
use crate::mask::{
    build_ca_image_mask, build_ca_mask, build_casa_mask, build_insertion_mask,
    build_text_causal_mask, MaskSpec, PreamblePolicy,
};
use crate::probes::{ablate_mask, attention_stats, grad_check, AblationRule};
use crate::rng::RngStream;
use crate::sequence::{segment_windows, MultimodalSequence, TokenEvent, TokenKind, WindowLayout};
use crate::streaming::{ledger_csv, StreamSession};

// ── Results and harness ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Empty on success; a failure message otherwise.
    pub detail: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Masks,
    Equivalence,
    Gradients,
    Streaming,
}

impl Suite {
    pub const ALL: [Suite; 4] =
        [Suite::Masks, Suite::Equivalence, Suite::Gradients, Suite::Streaming];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Masks => "masks",
            Suite::Equivalence => "equivalence",
            Suite::Gradients => "gradients",
            Suite::Streaming => "streaming",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Suite, String> {
        match s {
            "masks" => Ok(Suite::Masks),
            "equivalence" => Ok(Suite::Equivalence),
            "gradients" => Ok(Suite::Gradients),
            "streaming" => Ok(Suite::Streaming),
            other => Err(format!(
                "unknown suite {other:?}; expected masks, equivalence, gradients, or streaming"
            )),
        }
    }
}

/// A case body reports failure as a message rather than panicking, so one
/// broken invariant never hides the others.
type CaseOutcome = std::result::Result<(), String>;

fn lib<T>(r: crate::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn run_case(
    out: &mut Vec<CaseResult>,
    suite: &'static str,
    name: &'static str,
    body: impl FnOnce() -> CaseOutcome,
) {
    let t0 = Instant::now();
    let outcome = body();
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    out.push(match outcome {
        Ok(()) => CaseResult { suite, name, passed: true, detail: String::new(), wall_ms },
        Err(detail) => CaseResult { suite, name, passed: false, detail, wall_ms },
    });
}

pub fn run_suite(suite: Suite) -> Vec<CaseResult> {
    let mut out = Vec::new();
    match suite {
        Suite::Masks => masks_suite(&mut out),
        Suite::Equivalence => equivalence_suite(&mut out),
        Suite::Gradients => gradients_suite(&mut out),
        Suite::Streaming => streaming_suite(&mut out),
    }
    out
}

pub fn run_all() -> Vec<CaseResult> {
    Suite::ALL.iter().flat_map(|s| run_suite(*s)).collect()
}

/// JUnit-style JSON: per-suite test/failure counts with per-case rows.
pub fn junit_json(results: &[CaseResult]) -> String {
    let mut suites: Vec<&'static str> = Vec::new();
    for r in results {
        if !suites.contains(&r.suite) {
            suites.push(r.suite);
        }
    }
    let suite_docs: Vec<serde_json::Value> = suites
        .iter()
        .map(|s| {
            let cases: Vec<&CaseResult> = results.iter().filter(|r| r.suite == *s).collect();
            serde_json::json!({
                "name": s,
                "tests": cases.len(),
                "failures": cases.iter().filter(|c| !c.passed).count(),
                "time_ms": cases.iter().map(|c| c.wall_ms).sum::<f64>(),
                "cases": cases.iter().map(|c| serde_json::json!({
                    "name": c.name,
                    "passed": c.passed,
                    "time_ms": c.wall_ms,
                    "detail": c.detail,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "format": "junit-json",
        "tests": results.len(),
        "failures": results.iter().filter(|r| !r.passed).count(),
        "time_ms": results.iter().map(|r| r.wall_ms).sum::<f64>(),
        "suites": suite_docs,
    });
    serde_json::to_string_pretty(&doc).expect("document is finite and string-keyed")
}

// ── Shared fixtures ─────────────────────────────────────────────────────

fn all_modes() -> Vec<FusionMode> {
    vec![
        FusionMode::Insertion,
        FusionMode::CrossAttn { gated: false },
        FusionMode::CrossAttn { gated: true },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 2, offset: 1 },
    ]
}

fn small_cfg(mode: FusionMode) -> FusionConfig {
    FusionConfig::new(16, 2, 3, 12, mode)
}

fn small_stack(mode: FusionMode, seed: u64) -> LayerStack<f64> {
    let mut rng = RngStream::new(seed);
    LayerStack::init(small_cfg(mode), &mut rng).expect("small config is valid")
}

/// Single-sample event stream mixing text runs, image blocks of varying row
/// counts, back-to-back blocks (which merge into one window), and an
/// occasional trailing image. Always starts with text so preamble windows
/// occur.
fn random_events(rng: &mut RngStream, d: usize, vocab: u32, n_events: usize) -> Vec<TokenEvent<f64>> {
    let mut events: Vec<TokenEvent<f64>> =
        vec![TokenEvent::Text(rng.below(vocab as usize) as u32)];
    for _ in 0..n_events {
        if rng.uniform(0.0, 1.0) < 0.4 {
            let rows = 1 + rng.below(3);
            events.push(TokenEvent::ImageBlock {
                embeddings: rng.normal_tensor(vec![rows, d], 1.0),
            });
        } else {
            events.push(TokenEvent::Text(rng.below(vocab as usize) as u32));
        }
    }
    events
}

/// Two-sample packed sequence over random per-sample streams.
fn random_packed(rng: &mut RngStream, d: usize, vocab: u32) -> MultimodalSequence<f64> {
    let a = random_events(rng, d, vocab, 6);
    let b = random_events(rng, d, vocab, 5);
    let boundary = a.len();
    let mut events = a;
    events.extend(b);
    MultimodalSequence { events, sample_boundaries: vec![0, boundary] }
}

fn layout_of(seq: &MultimodalSequence<f64>) -> std::result::Result<WindowLayout, String> {
    lib(segment_windows(seq))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Text-only stack sharing every backbone tensor with `stack`.
fn backbone_of(stack: &LayerStack<f64>) -> std::result::Result<LayerStack<f64>, String> {
    let mut cfg = stack.cfg().clone();
    cfg.mode = FusionMode::Insertion;
    cfg.image_ffn_update = false;
    cfg.qformer = None;
    let mut rng = RngStream::new(999);
    let mut backbone = lib(LayerStack::<f64>::init(cfg, &mut rng))?;
    let copied = lib(backbone.copy_matching_params(stack))?;
    check!(copied >= 4, "backbone shares too few tensors ({copied})");
    Ok(backbone)
}

// ── Masks ───────────────────────────────────────────────────────────────

/// Compare a mask against an independently-stated predicate on every
/// (query, key) cell, through `allows`, `to_dense`, the materialized copy,
/// and the zero-update row list.
fn assert_mask_matches(
    mask: &MaskSpec,
    what: &str,
    predicate: impl Fn(usize, usize) -> bool,
) -> CaseOutcome {
    lib(mask.validate())?;
    let dense = mask.to_dense();
    let materialized = mask.materialize();
    let mut pair_count: u128 = 0;
    for q in 0..mask.q_len {
        let mut row_empty = true;
        for k in 0..mask.k_len {
            let want = predicate(q, k);
            let got = mask.allows(q, k);
            check!(got == want, "{what}: cell ({q},{k}) is {got}, predicate says {want}");
            check!(
                dense[q * mask.k_len + k] == want,
                "{what}: dense expansion disagrees at ({q},{k})"
            );
            check!(
                materialized.allows(q, k) == want,
                "{what}: materialized copy disagrees at ({q},{k})"
            );
            if want {
                row_empty = false;
                pair_count += 1;
            }
        }
        let flagged = mask.zero_update_rows().contains(&q);
        check!(
            flagged == row_empty,
            "{what}: row {q} zero-update flag {flagged} but row_empty {row_empty}"
        );
    }
    check!(
        mask.allowed_pair_count() == pair_count,
        "{what}: pair count {} vs brute force {pair_count}",
        mask.allowed_pair_count()
    );
    Ok(())
}

fn masks_suite(out: &mut Vec<CaseResult>) {
    let layouts = || -> std::result::Result<Vec<WindowLayout>, String> {
        let mut ls = Vec::new();
        for seed in [11u64, 12, 13, 14] {
            let mut rng = RngStream::new(seed);
            ls.push(layout_of(&random_packed(&mut rng, 4, 10))?);
        }
        Ok(ls)
    };

    run_case(out, "masks", "interleaved_causal_mask_matches_brute_force", || {
        for layout in layouts()? {
            let mask = lib(build_insertion_mask(&layout))?;
            assert_mask_matches(&mask, "interleaved causal", |q, k| {
                layout.sample_of(k) == layout.sample_of(q) && k <= q
            })?;
        }
        Ok(())
    });

    run_case(out, "masks", "text_causal_mask_matches_brute_force", || {
        for layout in layouts()? {
            let mask = lib(build_text_causal_mask(&layout))?;
            assert_mask_matches(&mask, "text causal", |q, k| {
                layout.sample_of_text(k) == layout.sample_of_text(q) && k <= q
            })?;
        }
        Ok(())
    });

    run_case(out, "masks", "windowed_fusion_mask_matches_brute_force", || {
        for layout in layouts()? {
            for policy in [PreamblePolicy::ZeroUpdate, PreamblePolicy::WindowCausal] {
                let mask = lib(build_casa_mask(&layout, policy))?;
                assert_mask_matches(&mask, "windowed fusion", |t, p| {
                    let w = layout.window_of_text(t);
                    let preamble = layout.windows[w].is_preamble();
                    if preamble && policy == PreamblePolicy::ZeroUpdate {
                        return false;
                    }
                    if layout.window_of(p) != w {
                        return false;
                    }
                    match layout.kind(p) {
                        TokenKind::Image => true,
                        TokenKind::Text => p <= layout.text_to_interleaved(t),
                    }
                })?;
            }
        }
        Ok(())
    });

    run_case(out, "masks", "image_only_fusion_mask_matches_brute_force", || {
        for layout in layouts()? {
            let mask = lib(build_ca_mask(&layout))?;
            assert_mask_matches(&mask, "image-key fusion", |t, p| {
                layout.kind(p) == TokenKind::Image
                    && layout.window_of(p) == layout.window_of_text(t)
            })?;
            let flat = lib(build_ca_image_mask(&layout))?;
            assert_mask_matches(&flat, "flat image-key fusion", |t, j| {
                layout.window_of(layout.image_to_interleaved(j)) == layout.window_of_text(t)
            })?;
        }
        Ok(())
    });

    run_case(out, "masks", "windowed_keys_are_a_strict_subset_of_causal_keys", || {
        let mut rng = RngStream::new(15);
        let layout = layout_of(&random_packed(&mut rng, 4, 10))?;
        let full = lib(build_insertion_mask(&layout))?;
        let windowed = lib(build_casa_mask(&layout, PreamblePolicy::ZeroUpdate))?;
        let mut windowed_pairs: u128 = 0;
        let mut causal_pairs_on_text_rows: u128 = 0;
        for t in 0..windowed.q_len {
            let q = layout.text_to_interleaved(t);
            for p in 0..windowed.k_len {
                if windowed.allows(t, p) {
                    windowed_pairs += 1;
                    check!(
                        full.allows(q, p),
                        "windowed pair ({t},{p}) not allowed by the causal mask"
                    );
                }
                if full.allows(q, p) {
                    causal_pairs_on_text_rows += 1;
                }
            }
        }
        check!(
            windowed_pairs < causal_pairs_on_text_rows,
            "windowing saved nothing: {windowed_pairs} vs {causal_pairs_on_text_rows}"
        );
        Ok(())
    });

    run_case(out, "masks", "attention_mass_partition_sums_to_one", || {
        let stack = small_stack(FusionMode::CasaParallel, 21);
        let mut rng = RngStream::new(22);
        let seq = MultimodalSequence {
            events: random_events(&mut rng, 16, 12, 8),
            sample_boundaries: vec![0],
        };
        let stats = lib(attention_stats(&stack, &seq, Some(11)))?;
        check!(stats.n_queries > 0, "no text queries were included");
        check!(
            stats.max_partition_error <= 1e-9,
            "group masses do not partition: error {:e}",
            stats.max_partition_error
        );
        check!(
            stats.groups.iter().any(|(label, _)| label == "self"),
            "missing the self group"
        );
        for (label, mass) in &stats.groups {
            check!(
                (0.0..=1.0 + 1e-12).contains(mass),
                "group {label} has mass {mass} outside [0,1]"
            );
        }
        Ok(())
    });

    run_case(out, "masks", "self_key_removal_edits_exactly_the_diagonal", || {
        let stack = small_stack(FusionMode::CasaParallel, 23);
        let mut rng = RngStream::new(24);
        let events = random_events(&mut rng, 16, 12, 8);
        let seq = MultimodalSequence { events, sample_boundaries: vec![0] };
        let layout = layout_of(&seq)?;
        let clean = lib(stack.forward(&seq, &ForwardOptions { inference: true, ..Default::default() }))?
            .logits_tensor();
        let ablated = lib(ablate_mask(&stack, &seq, AblationRule::MaskSelf, 7))?;
        check!(!ablated.report.edits.is_empty(), "no edits were applied");
        for &(layer, q, k) in &ablated.report.edits {
            check!(
                k == layout.text_to_interleaved(q),
                "layer {layer}: edit ({q},{k}) is not the query's own key"
            );
        }
        let diff = max_abs_diff(clean.data(), ablated.logits.data());
        check!(diff > 0.0, "removing self keys left the logits untouched");
        let again = lib(ablate_mask(&stack, &seq, AblationRule::MaskSelf, 7))?;
        check!(
            again.report.edits == ablated.report.edits,
            "same seed produced different edits"
        );
        Ok(())
    });
}

// ── Equivalence ─────────────────────────────────────────────────────────

fn equivalence_suite(out: &mut Vec<CaseResult>) {
    run_case(out, "equivalence", "blockwise_fusion_matches_dense_bitwise", || {
        let mut rng = RngStream::new(31);
        let seq = random_packed(&mut rng, 16, 12);
        for (i, mode) in all_modes().into_iter().enumerate() {
            let stack = small_stack(mode, 300 + i as u64);
            let dense = lib(stack.forward(&seq, &ForwardOptions { inference: true, ..Default::default() }))?;
            let block = lib(stack.forward(
                &seq,
                &ForwardOptions { inference: true, blockwise_fusion: true, ..Default::default() },
            ))?;
            let (a, b) = (dense.logits_tensor(), block.logits_tensor());
            let diff = max_abs_diff(a.data(), b.data());
            check!(diff == 0.0, "{mode}: blockwise diverges from dense by {diff:e}");
        }
        Ok(())
    });

    run_case(out, "equivalence", "imageless_stream_matches_text_backbone", || {
        let text_seq = MultimodalSequence {
            events: (0..9u32).map(TokenEvent::Text).collect(),
            sample_boundaries: vec![0, 5],
        };
        for (i, mode) in all_modes().into_iter().enumerate() {
            let stack = small_stack(mode, 320 + i as u64);
            let backbone = backbone_of(&stack)?;
            let a = lib(stack.forward(&text_seq, &ForwardOptions::default()))?.logits_tensor();
            let b = lib(backbone.forward(&text_seq, &ForwardOptions::default()))?.logits_tensor();
            check!(a.shape() == b.shape(), "{mode}: logit shapes differ");
            for (j, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                check!(x == y, "{mode}: logit {j} differs without any image: {x} vs {y}");
            }
        }
        Ok(())
    });

    run_case(out, "equivalence", "zero_gate_ignores_images_exactly", || {
        let mut rng = RngStream::new(33);
        let seq = random_packed(&mut rng, 16, 12);
        let text_seq = MultimodalSequence {
            events: seq
                .events
                .iter()
                .filter(|e| matches!(e, TokenEvent::Text(_)))
                .cloned()
                .collect(),
            sample_boundaries: vec![
                0,
                seq.events[..seq.sample_boundaries[1]]
                    .iter()
                    .filter(|e| matches!(e, TokenEvent::Text(_)))
                    .count(),
            ],
        };
        let stack = small_stack(FusionMode::CrossAttn { gated: true }, 330);
        let backbone = backbone_of(&stack)?;
        let a = lib(stack.forward(&seq, &ForwardOptions::default()))?.logits_tensor();
        let b = lib(backbone.forward(&text_seq, &ForwardOptions::default()))?.logits_tensor();
        check!(a.shape() == b.shape(), "logit shapes differ");
        for (j, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            check!(x == y, "a freshly initialized gate leaks image content at logit {j}");
        }
        Ok(())
    });

    run_case(out, "equivalence", "replacement_fusion_adds_no_parameters", || {
        let baseline = lib(param_counts(&small_cfg(FusionMode::Insertion)))?;
        let replace = lib(param_counts(&small_cfg(FusionMode::CasaReplace {
            period: 4,
            offset: 3,
        })))?;
        check!(replace.fusion == 0, "replacement mode reports {} fusion scalars", replace.fusion);
        check!(
            replace.total() == baseline.total(),
            "replacement total {} differs from text backbone {}",
            replace.total(),
            baseline.total()
        );
        let additive = lib(param_counts(&small_cfg(FusionMode::CasaParallel)))?;
        check!(additive.fusion > 0, "additive mode reports no fusion parameters");
        Ok(())
    });

    run_case(out, "equivalence", "query_compression_fixes_rows_per_image_block", || {
        let mut cfg = small_cfg(FusionMode::CasaParallel);
        cfg.qformer = Some(QFormerConfig { n_queries: 2, n_layers: 1 });
        let mut rng = RngStream::new(35);
        let stack = lib(LayerStack::<f64>::init(cfg, &mut rng))?;
        let events = vec![
            TokenEvent::Text(1),
            TokenEvent::ImageBlock { embeddings: rng.normal_tensor(vec![5, 16], 1.0) },
            TokenEvent::Text(2),
            TokenEvent::ImageBlock { embeddings: rng.normal_tensor(vec![1, 16], 1.0) },
            TokenEvent::Text(3),
        ];
        let seq = MultimodalSequence { events, sample_boundaries: vec![0] };
        let pass = lib(stack.forward(&seq, &ForwardOptions { inference: true, ..Default::default() }))?;
        check!(
            pass.layout.flat_image_len == 4,
            "two compressed blocks should hold 4 image rows, got {}",
            pass.layout.flat_image_len
        );
        for (w, win) in pass.layout.windows.iter().enumerate() {
            if !win.is_preamble() {
                check!(
                    win.image_len() == 2,
                    "window {w} holds {} image rows, not the query count",
                    win.image_len()
                );
            }
        }
        Ok(())
    });

    run_case(out, "equivalence", "attention_cost_worked_figures", || {
        let p = CostParams {
            text: 500,
            images: 10240,
            text_per_window: 50,
            windows: 10,
            window_size: 1024,
            images_are_per_window: false,
        };
        let ins = symbolic_cost(FusionMode::Insertion, &p);
        check!(
            ins.len() == 1 && ins[0].value == 115_347_600,
            "interleaved cost is {:?}, want 115347600",
            ins[0].value
        );
        let ca = symbolic_cost(FusionMode::CrossAttn { gated: false }, &p);
        check!(
            ca.len() == 1 && ca[0].value == 5_370_000,
            "image-key cost is {:?}, want 5370000",
            ca[0].value
        );
        let rep = symbolic_cost(FusionMode::CasaReplace { period: 4, offset: 3 }, &p);
        check!(rep.len() == 2, "replacement mode should report both W readings");
        check!(
            rep[0].w_reading == Some(WReading::WindowCount) && rep[0].w_value == Some(10),
            "first reading should plug in the window count"
        );
        check!(
            rep[1].w_reading == Some(WReading::WindowSize) && rep[1].w_value == Some(1024),
            "second reading should plug in the window size"
        );
        check!(
            rep[0].value != rep[1].value,
            "the two W readings coincide; the figure is not discriminating"
        );
        Ok(())
    });

    run_case(out, "equivalence", "attention_cost_growth_exponents", || {
        // Interleaved attention: quadratic in total stream length.
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &s in &[8usize, 16, 32, 64] {
            let layout = lib(synthetic_layout(&[(s, s / 2), (s, s / 2)]))?;
            xs.push(layout.n_tokens as f64);
            ys.push(lib(exact_attention_entries(FusionMode::Insertion, &layout))? as f64);
        }
        let e_ins = fit_growth_exponent(&xs, &ys);
        check!(e_ins >= 1.9, "interleaved growth exponent {e_ins} < 1.9");

        // Windowed fusion: linear in per-window image rows at fixed text.
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &n in &[8usize, 16, 32, 64] {
            let layout = lib(synthetic_layout(&[(n, 6), (n, 6), (n, 6)]))?;
            xs.push(n as f64);
            ys.push(lib(exact_attention_entries(FusionMode::CasaParallel, &layout))? as f64);
        }
        let e_win = fit_growth_exponent(&xs, &ys);
        check!(e_win <= 1.1, "windowed growth exponent {e_win} > 1.1");
        Ok(())
    });

    run_case(out, "equivalence", "exact_entry_counts_match_dense_popcount", || {
        let mut rng = RngStream::new(37);
        let layout = layout_of(&random_packed(&mut rng, 4, 10))?;
        let popcount = |m: &MaskSpec| m.to_dense().iter().filter(|b| **b).count() as u128;
        for mode in all_modes() {
            let got = lib(exact_attention_entries(mode, &layout))?;
            let want: u128 = match mode {
                FusionMode::Insertion => popcount(&lib(build_insertion_mask(&layout))?),
                FusionMode::CrossAttn { .. } => {
                    popcount(&lib(build_text_causal_mask(&layout))?)
                        + popcount(&lib(build_ca_image_mask(&layout))?)
                }
                FusionMode::CasaParallel | FusionMode::CasaPre => {
                    popcount(&lib(build_text_causal_mask(&layout))?)
                        + popcount(&lib(build_casa_mask(&layout, PreamblePolicy::ZeroUpdate))?)
                }
                FusionMode::CasaReplace { .. } => {
                    popcount(&lib(build_text_causal_mask(&layout))?)
                        + popcount(&lib(build_casa_mask(&layout, PreamblePolicy::WindowCausal))?)
                }
            };
            check!(got == want, "{mode}: exact entries {got} vs dense popcount {want}");
        }
        Ok(())
    });
}

// ── Gradients ───────────────────────────────────────────────────────────

fn fd_case(stack: &LayerStack<f64>, seq: &MultimodalSequence<f64>, what: &str) -> CaseOutcome {
    let report = lib(grad_check(stack, seq, 1e-4, 8, 5))?;
    if report.pass {
        return Ok(());
    }
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite by contract"))
        .expect("report has entries");
    Err(format!(
        "{what}: finite differences disagree; worst tensor {} at rel err {:e}",
        worst.tensor, worst.max_rel_err
    ))
}

fn gradients_suite(out: &mut Vec<CaseResult>) {
    run_case(out, "gradients", "finite_differences_agree_for_every_mode", || {
        let mut rng = RngStream::new(41);
        let seq = random_packed(&mut rng, 16, 12);
        for (i, mode) in all_modes().into_iter().enumerate() {
            let stack = small_stack(mode, 400 + i as u64);
            fd_case(&stack, &seq, &mode.to_string())?;
        }
        Ok(())
    });

    run_case(out, "gradients", "finite_differences_agree_with_image_state_refresh", || {
        let mut rng = RngStream::new(42);
        let seq = random_packed(&mut rng, 16, 12);
        for mode in [FusionMode::CasaParallel, FusionMode::CrossAttn { gated: true }] {
            let mut cfg = small_cfg(mode);
            cfg.image_ffn_update = true;
            let mut init = RngStream::new(420);
            let stack = lib(LayerStack::<f64>::init(cfg, &mut init))?;
            fd_case(&stack, &seq, &format!("{mode} + refresh"))?;
        }
        Ok(())
    });

    run_case(out, "gradients", "finite_differences_agree_with_query_compression", || {
        let mut rng = RngStream::new(43);
        let seq = random_packed(&mut rng, 16, 12);
        let mut cfg = small_cfg(FusionMode::CasaPre);
        cfg.qformer = Some(QFormerConfig { n_queries: 2, n_layers: 1 });
        cfg.image_ffn_update = true;
        let mut init = RngStream::new(430);
        let stack = lib(LayerStack::<f64>::init(cfg, &mut init))?;
        fd_case(&stack, &seq, "compressed queries + refresh")
    });

    run_case(out, "gradients", "imageless_stream_leaves_fusion_gradients_zero", || {
        let text_seq = MultimodalSequence {
            events: (0..8u32).map(TokenEvent::Text).collect(),
            sample_boundaries: vec![0],
        };
        for mode in [FusionMode::CasaParallel, FusionMode::CrossAttn { gated: true }] {
            let stack = small_stack(mode, 44);
            let mut pass = lib(stack.forward(&text_seq, &ForwardOptions::default()))?;
            let targets: Vec<(usize, u32)> = (0..7usize).map(|i| (i, (i as u32 + 1) % 12)).collect();
            let loss = lib(cross_entropy_at(&mut pass.tape, pass.logits, &targets))?;
            let grads = lib(pass.tape.backward(loss))?;
            let mut fusion_tensors = 0;
            let mut live_tensors = 0;
            for (name, var) in &pass.params {
                let Some(g) = grads.get(*var) else { continue };
                let live = g.data().iter().any(|x| *x != 0.0);
                if name.contains(".fuse") {
                    fusion_tensors += 1;
                    check!(!live, "{mode}: fusion tensor {name} received gradient without images");
                } else if live {
                    live_tensors += 1;
                }
            }
            check!(fusion_tensors > 0, "{mode}: no fusion tensors were bound");
            check!(live_tensors > 0, "{mode}: the loss reached no backbone tensor");
        }
        Ok(())
    });
}

// ── Streaming ───────────────────────────────────────────────────────────

fn assert_decode_matches_offline(
    stack: &LayerStack<f64>,
    events: &[TokenEvent<f64>],
    tol: f64,
    what: &str,
) -> CaseOutcome {
    let seq = MultimodalSequence { events: events.to_vec(), sample_boundaries: vec![0] };
    let offline = lib(stack.forward(&seq, &ForwardOptions { inference: true, ..Default::default() }))?;
    let logits = offline.logits_tensor();
    let vocab = logits.shape()[1];

    let mut session = StreamSession::new(stack);
    let mut t = 0usize;
    for ev in events {
        match ev {
            TokenEvent::ImageBlock { embeddings } => {
                lib(session.ingest_image(embeddings))?;
            }
            TokenEvent::Text(id) => {
                let (row, _) = lib(session.decode_step(*id))?;
                let want = &logits.data()[t * vocab..(t + 1) * vocab];
                let diff = max_abs_diff(want, row.data());
                check!(diff <= tol, "{what}: text position {t} diverges by {diff:e}");
                t += 1;
            }
        }
    }
    check!(t == logits.shape()[0], "{what}: offline produced {} rows, decode {t}", logits.shape()[0]);
    Ok(())
}

fn streaming_suite(out: &mut Vec<CaseResult>) {
    run_case(out, "streaming", "decode_matches_offline_forward_for_every_mode", || {
        for (i, mode) in all_modes().into_iter().enumerate() {
            let stack = small_stack(mode, 500 + i as u64);
            for h in 0..2u64 {
                let mut rng = RngStream::new(510 + 10 * i as u64 + h);
                let mut events = random_events(&mut rng, 16, 12, 8);
                events.push(TokenEvent::Text(rng.below(12) as u32));
                assert_decode_matches_offline(&stack, &events, 1e-8, &mode.to_string())?;
            }
        }
        Ok(())
    });

    run_case(out, "streaming", "decode_matches_offline_with_refresh_and_compression", || {
        let mut rng = RngStream::new(52);
        let mut events = random_events(&mut rng, 16, 12, 8);
        events.push(TokenEvent::Text(0));
        for (mode, refresh, compress) in [
            (FusionMode::CasaParallel, true, false),
            (FusionMode::CrossAttn { gated: true }, true, true),
            (FusionMode::CasaPre, false, true),
        ] {
            let mut cfg = small_cfg(mode);
            cfg.image_ffn_update = refresh;
            if compress {
                cfg.qformer = Some(QFormerConfig { n_queries: 2, n_layers: 1 });
            }
            let mut init = RngStream::new(520);
            let stack = lib(LayerStack::<f64>::init(cfg, &mut init))?;
            assert_decode_matches_offline(
                &stack,
                &events,
                1e-8,
                &format!("{mode} refresh={refresh} compress={compress}"),
            )?;
        }
        Ok(())
    });

    run_case(out, "streaming", "window_cache_merges_then_resets", || {
        let mut rng = RngStream::new(53);
        let stack = small_stack(FusionMode::CasaParallel, 530);
        let mut session = StreamSession::new(&stack);
        lib(session.ingest_image(&rng.normal_tensor(vec![2, 16], 1.0)))?;
        let after_first = session.memory_report().window_cache_rows;
        check!(after_first == 2, "first frame cached {after_first} rows, not 2");
        lib(session.ingest_image(&rng.normal_tensor(vec![3, 16], 1.0)))?;
        let merged = session.memory_report().window_cache_rows;
        check!(merged == 5, "back-to-back frames cached {merged} rows, not 5");
        lib(session.decode_step(1))?;
        lib(session.ingest_image(&rng.normal_tensor(vec![1, 16], 1.0)))?;
        let reset = session.memory_report().window_cache_rows;
        check!(reset == 1, "a frame after text cached {reset} rows, not 1");
        check!(
            session.memory_report().peak_window_scalars
                > session.memory_report().casa_window_scalars,
            "the peak should remember the larger merged window"
        );
        Ok(())
    });

    run_case(out, "streaming", "frame_ingest_cost_is_constant_over_time", || {
        let mut rng = RngStream::new(54);
        let stack = small_stack(FusionMode::CasaParallel, 540);
        let mut session = StreamSession::new(&stack);
        let mut ingest_rows = Vec::new();
        let mut decode_rows = Vec::new();
        for f in 0..40 {
            ingest_rows.push(lib(session.ingest_image(&rng.normal_tensor(vec![2, 16], 1.0)))?);
            for _ in 0..2 {
                let (_, row) = lib(session.decode_step((f % 12) as u32))?;
                decode_rows.push(row);
            }
        }
        let first = &ingest_rows[0];
        for row in &ingest_rows {
            check!(
                row.casa_window_scalars == first.casa_window_scalars,
                "frame {}: window cache drifted to {} scalars",
                row.step,
                row.casa_window_scalars
            );
            check!(
                row.peak_scratch_scalars == first.peak_scratch_scalars,
                "frame {}: ingest scratch drifted to {} scalars",
                row.step,
                row.peak_scratch_scalars
            );
        }
        for pair in decode_rows.windows(2) {
            check!(
                pair[1].text_kv_scalars > pair[0].text_kv_scalars,
                "text cache stopped growing at step {}",
                pair[1].step
            );
        }
        let insertion = small_stack(FusionMode::Insertion, 541);
        let mut session = StreamSession::new(&insertion);
        let row = lib(session.ingest_image(&rng.normal_tensor(vec![2, 16], 1.0)))?;
        check!(
            row.casa_window_scalars == 0,
            "interleaved mode should hold no separate window cache"
        );
        Ok(())
    });

    run_case(out, "streaming", "event_ledger_csv_has_pinned_schema", || {
        let mut rng = RngStream::new(55);
        let stack = small_stack(FusionMode::CasaPre, 550);
        let mut session = StreamSession::new(&stack);
        lib(session.ingest_image(&rng.normal_tensor(vec![2, 16], 1.0)))?;
        lib(session.decode_step(3))?;
        let csv = ledger_csv(session.ledger());
        let mut lines = csv.lines();
        check!(
            lines.next()
                == Some("step,event_kind,text_kv_scalars,casa_window_scalars,peak_scratch_scalars,wall_ms"),
            "ledger header changed"
        );
        check!(lines.count() == 2, "expected one ledger row per event");
        Ok(())
    });
}

// ── Tests ───────────────────────────────────────────────────────────────
