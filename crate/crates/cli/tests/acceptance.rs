//! Acceptance suite: one test per promised behavior, each with its stated
//! tolerance and wall-clock budget. Run with `cargo test --test acceptance`.

use std::time::Instant;

use casa_core::cost::{exact_attention_entries, symbolic_cost, synthetic_layout, CostParams};
use casa_core::fusion::{ForwardOptions, FusionConfig, FusionMode, LayerStack, QFormerConfig};
use casa_core::probes::{grad_check, AblationRule};
use casa_core::sequence::{MultimodalSequence, TokenEvent};
use casa_core::streaming::{simulate_live_captioning, CaptioningConfig, StreamSession};
use casa_core::toytask::{
    evaluate, evaluate_ablated, generate_episodes, train, TaskSpec, TrainConfig,
};
use casa_core::{RngStream, Scalar};

// ── shared fixtures ─────────────────────────────────────────────────────

const D: usize = 16;
const VOCAB: usize = 12;

fn small_stack(mode: FusionMode, seed: u64) -> LayerStack<f64> {
    let cfg = FusionConfig::new(D, 2, 2, VOCAB, mode);
    LayerStack::init(cfg, &mut RngStream::new(seed)).expect("stack init")
}

fn casa_modes() -> [FusionMode; 3] {
    [
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 2, offset: 1 },
    ]
}

fn image_free_modes() -> [FusionMode; 5] {
    [
        FusionMode::CrossAttn { gated: false },
        FusionMode::CrossAttn { gated: true },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 2, offset: 1 },
    ]
}

fn max_abs_diff<E: Scalar>(a: &[E], b: &[E]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

fn image_block(rng: &mut RngStream, rows: usize) -> TokenEvent<f64> {
    TokenEvent::ImageBlock { embeddings: rng.normal_tensor(vec![rows, D], 1.0) }
}

// ── 1. blockwise fusion == dense rule, exhaustively ─────────────────────

/// Every interleaving of up to 5 events (text token or 1–4-row image
/// block) with at most 16 tokens total: the blockwise fusion path must
/// reproduce the dense whole-sequence rule within 1e-10 in f64, for all
/// three windowed-fusion variants, inside a 60 s budget.
#[test]
fn a1_blockwise_fusion_matches_dense_rule_exhaustively() {
    let started = Instant::now();
    // Alphabet: 0 = text, k = image block of k rows (k in 1..=4).
    let alphabet = 5usize;
    let stacks: Vec<(FusionMode, LayerStack<f64>)> =
        casa_modes().into_iter().map(|m| (m, small_stack(m, 41))).collect();

    let mut streams = 0usize;
    let mut compared = 0usize;
    for len in 1..=5usize {
        for code in 0..alphabet.pow(len as u32) {
            let mut digits = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                digits.push(c % alphabet);
                c /= alphabet;
            }
            let tokens: usize = digits.iter().map(|&d| d.max(1)).sum();
            if tokens > 16 {
                continue;
            }
            let mut rng = RngStream::new(4100 + code as u64 + ((len as u64) << 40));
            let events: Vec<TokenEvent<f64>> = digits
                .iter()
                .enumerate()
                .map(|(i, &d)| match d {
                    0 => TokenEvent::Text(((i * 5 + code) % VOCAB) as u32),
                    k => image_block(&mut rng, k),
                })
                .collect();
            let seq = MultimodalSequence { events, sample_boundaries: vec![0] };
            streams += 1;

            for (mode, stack) in &stacks {
                let dense = stack.forward(
                    &seq,
                    &ForwardOptions { inference: true, ..Default::default() },
                );
                let block = stack.forward(
                    &seq,
                    &ForwardOptions {
                        inference: true,
                        blockwise_fusion: true,
                        ..Default::default()
                    },
                );
                match (dense, block) {
                    (Ok(d), Ok(b)) => {
                        let diff = max_abs_diff(
                            d.logits_tensor().data(),
                            b.logits_tensor().data(),
                        );
                        assert!(
                            diff <= 1e-10,
                            "{mode} on stream {code} (len {len}) diverges by {diff:e}"
                        );
                        compared += 1;
                    }
                    (Err(de), Err(_)) => {
                        // Both paths must reject the same degenerate streams.
                        let _ = de;
                    }
                    (d, b) => panic!(
                        "{mode} on stream {code}: dense ok={} blockwise ok={}",
                        d.is_ok(),
                        b.is_ok()
                    ),
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(streams > 3000, "enumeration covered only {streams} streams");
    assert!(compared > 9000, "only {compared} comparisons ran");
    assert!(elapsed <= 60.0, "exhaustive sweep took {elapsed:.1}s, budget 60s");
    println!(
        "blockwise==dense: {streams} streams, {compared} comparisons, {elapsed:.1}s"
    );
}

// ── 2. streaming decode == offline forward, randomized ──────────────────

/// 100 random interleaved histories per fusion mode (up to 6 windows, up
/// to 64 tokens): incremental decode must match the offline forward at
/// every text position within 1e-5, inside a 5-minute budget.
#[test]
fn a2_streaming_decode_matches_offline_forward() {
    let started = Instant::now();
    let mut histories = 0usize;
    for (i, mode) in [
        FusionMode::Insertion,
        FusionMode::CrossAttn { gated: false },
        FusionMode::CrossAttn { gated: true },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 2, offset: 1 },
    ]
    .into_iter()
    .enumerate()
    {
        let stack = small_stack(mode, 600 + i as u64);
        for h in 0..100u64 {
            let mut rng = RngStream::new(6000 + 100 * i as u64 + h);
            let mut events: Vec<TokenEvent<f64>> = Vec::new();
            let mut tokens = 0usize;
            for _ in 0..=rng.below(2) {
                events.push(TokenEvent::Text(rng.below(VOCAB) as u32));
                tokens += 1;
            }
            let windows = 1 + rng.below(6) as usize;
            for _ in 0..windows {
                let rows = 1 + rng.below(4) as usize;
                if tokens + rows + 1 > 64 {
                    break;
                }
                events.push(image_block(&mut rng, rows));
                tokens += rows;
                for _ in 0..=rng.below(5) {
                    if tokens == 64 {
                        break;
                    }
                    events.push(TokenEvent::Text(rng.below(VOCAB) as u32));
                    tokens += 1;
                }
            }
            events.push(TokenEvent::Text(0));

            let seq =
                MultimodalSequence { events: events.clone(), sample_boundaries: vec![0] };
            let offline = stack
                .forward(&seq, &ForwardOptions { inference: true, ..Default::default() })
                .expect("offline forward");
            let logits = offline.logits_tensor();
            let vocab = logits.shape()[1];

            let mut session = StreamSession::new(&stack);
            let mut t = 0usize;
            for ev in &events {
                match ev {
                    TokenEvent::ImageBlock { embeddings } => {
                        session.ingest_image(embeddings).expect("ingest");
                    }
                    TokenEvent::Text(id) => {
                        let (row, _) = session.decode_step(*id).expect("decode");
                        let want = &logits.data()[t * vocab..(t + 1) * vocab];
                        let diff = max_abs_diff(want, row.data());
                        assert!(
                            diff <= 1e-5,
                            "{mode} history {h}: position {t} diverges by {diff:e}"
                        );
                        t += 1;
                    }
                }
            }
            assert_eq!(t, logits.shape()[0], "{mode} history {h}: row count");
            histories += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(histories, 600);
    assert!(elapsed <= 300.0, "streaming sweep took {elapsed:.1}s, budget 300s");
    println!("decode==offline: {histories} histories, {elapsed:.1}s");
}

// ── 3. finite differences across the whole mode grid ────────────────────

/// Every fusion mode, crossed with the image-state refresh and query
/// compression toggles where they are legal: analytic gradients must agree
/// with central differences within 1e-4 relative error on 32 sampled
/// coordinates per tensor, in f64.
#[test]
fn a3_gradients_match_finite_differences_across_the_mode_grid() {
    let started = Instant::now();
    let mut rng = RngStream::new(777);
    let events: Vec<TokenEvent<f64>> = vec![
        TokenEvent::Text(3),
        TokenEvent::Text(7),
        image_block(&mut rng, 3),
        TokenEvent::Text(1),
        TokenEvent::Text(4),
        image_block(&mut rng, 2),
        TokenEvent::Text(9),
        TokenEvent::Text(2),
        TokenEvent::Text(5),
    ];
    let seq = MultimodalSequence { events, sample_boundaries: vec![0] };

    let mut cells = 0usize;
    for mode in [
        FusionMode::Insertion,
        FusionMode::CrossAttn { gated: false },
        FusionMode::CrossAttn { gated: true },
        FusionMode::CasaParallel,
        FusionMode::CasaPre,
        FusionMode::CasaReplace { period: 2, offset: 1 },
    ] {
        for refresh in [false, true] {
            if refresh && mode == FusionMode::Insertion {
                continue; // no separate image state to refresh
            }
            for compress in [false, true] {
                let mut cfg = FusionConfig::new(D, 2, 2, VOCAB, mode);
                cfg.image_ffn_update = refresh;
                if compress {
                    cfg.qformer = Some(QFormerConfig { n_queries: 2, n_layers: 1 });
                }
                let stack = LayerStack::<f64>::init(cfg, &mut RngStream::new(7100 + cells as u64))
                    .expect("stack init");
                let report = grad_check(&stack, &seq, 1e-4, 32, 7200 + cells as u64)
                    .expect("gradient check runs");
                if !report.pass {
                    let worst = report
                        .entries
                        .iter()
                        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                        .unwrap();
                    panic!(
                        "{mode} refresh={refresh} compress={compress}: {} rel err {:e}",
                        worst.tensor, worst.max_rel_err
                    );
                }
                cells += 1;
            }
        }
    }
    assert_eq!(cells, 22);
    println!(
        "finite differences: {cells} mode cells, 32 coords/tensor, {:.1}s",
        started.elapsed().as_secs_f64()
    );
}

// ── 4. cache-size invariants across stream lengths ──────────────────────

/// The text KV cache holds exactly the text tokens fed so far, and the
/// windowed fusion cache never exceeds the largest single window — both
/// regardless of how many frames have streamed (1, 10, or 200).
#[test]
fn a4_cache_sizes_track_text_count_and_single_window_only() {
    let stack = small_stack(FusionMode::CasaParallel, 44);
    let mut single_window_scalars = None;
    for frames in [1usize, 10, 200] {
        let mut session = StreamSession::new(&stack);
        let mut rng = RngStream::new(440);
        let mut texts = 0usize;
        for f in 0..frames {
            let row = session
                .ingest_image(&rng.normal_tensor(vec![4, D], 1.0))
                .expect("ingest");
            let expect = *single_window_scalars.get_or_insert(row.casa_window_scalars);
            assert_eq!(
                row.casa_window_scalars, expect,
                "frame {f}/{frames}: window cache depends on history"
            );
            for _ in 0..2 {
                session.decode_step(1 + (texts % (VOCAB - 1)) as u32).expect("decode");
                texts += 1;
            }
            let report = session.memory_report();
            assert_eq!(report.text_cache_rows, texts, "frame {f}/{frames}: text rows");
        }
        let report = session.memory_report();
        assert_eq!(report.text_cache_rows, 2 * frames);
        // Peak window residency: one full window (its images plus its text).
        let peak_expected = report.casa_window_scalars;
        assert_eq!(report.peak_window_scalars, peak_expected, "{frames} frames: peak");
        assert_eq!(
            report.window_cache_rows, 6,
            "{frames} frames: window rows should be 4 image + 2 text"
        );
    }
    println!("cache invariants hold at 1, 10, and 200 frames");
}

// ── 5. attention-cost scaling and the worked figure ─────────────────────

/// Insertion's attention entries grow ~quadratically in the token count
/// (log-log slope ≥ 1.9); windowed fusion grows ~linearly in the image
/// count (slope ≤ 1.1). The closed form reproduces the worked figure:
/// T=500 text with N=10240 image tokens → (T+N)² = 115,347,600.
#[test]
fn a5_attention_cost_exponents_and_worked_figure() {
    // Insertion: double the stream, expect ≥ 2^1.9 growth per doubling.
    let mut prev: Option<(f64, f64)> = None;
    for s in [8usize, 16, 32, 64] {
        let layout = synthetic_layout(&[(s, s / 2); 2]).unwrap();
        let entries =
            exact_attention_entries(FusionMode::Insertion, &layout).unwrap() as f64;
        let x = layout.n_tokens as f64;
        if let Some((px, pe)) = prev {
            let slope = (entries / pe).ln() / (x / px).ln();
            assert!(slope >= 1.9, "insertion slope {slope:.3} at {s}");
        }
        prev = Some((x, entries));
    }

    // Windowed fusion: grow the image payload, expect ≤ 2^1.1 per doubling.
    prev = None;
    for n in [8usize, 16, 32, 64] {
        let layout = synthetic_layout(&[(n, 6); 3]).unwrap();
        let entries =
            exact_attention_entries(FusionMode::CasaParallel, &layout).unwrap() as f64;
        let x = layout.flat_image_len as f64;
        if let Some((px, pe)) = prev {
            let slope = (entries / pe).ln() / (x / px).ln();
            assert!(slope <= 1.1, "windowed slope {slope:.3} at {n}");
        }
        prev = Some((x, entries));
    }

    let layout = synthetic_layout(&[(1024, 50); 10]).unwrap();
    let p = CostParams::from_layout(&layout);
    assert_eq!((p.text, p.images), (500, 10240));
    let insertion = symbolic_cost(FusionMode::Insertion, &p);
    assert_eq!(insertion[0].value, 115_347_600);
    println!("cost exponents and the 115,347,600 worked figure hold");
}

// ── 6. imageless streams reduce to the text backbone exactly ────────────

/// On a stream with no images, every fusion-capable mode must produce
/// bit-for-bit the text backbone's logits (f64, zero tolerance).
#[test]
fn a6_imageless_streams_reduce_to_the_backbone_exactly() {
    let events: Vec<TokenEvent<f64>> =
        [3u32, 7, 1, 4, 9, 2, 5, 8, 0, 6].iter().map(|&t| TokenEvent::Text(t)).collect();
    let seq = MultimodalSequence {
        events: events.clone(),
        sample_boundaries: vec![0, 4],
    };

    for (i, mode) in image_free_modes().into_iter().enumerate() {
        let fused = small_stack(mode, 660 + i as u64);
        let mut backbone_cfg = fused.cfg().clone();
        backbone_cfg.mode = FusionMode::Insertion;
        backbone_cfg.image_ffn_update = false;
        backbone_cfg.qformer = None;
        let mut backbone =
            LayerStack::<f64>::init(backbone_cfg, &mut RngStream::new(1)).expect("init");
        let copied = backbone.copy_matching_params(&fused).expect("weight copy");
        assert!(copied >= 4, "{mode}: only {copied} shared tensors");

        let opts = ForwardOptions { inference: true, ..Default::default() };
        let a = fused.forward(&seq, &opts).expect("fused forward").logits_tensor();
        let b = backbone.forward(&seq, &opts).expect("backbone forward").logits_tensor();
        let diff = max_abs_diff(a.data(), b.data());
        assert_eq!(diff, 0.0, "{mode}: imageless stream diverges by {diff:e}");
    }
    println!("imageless reduction is exact for all five fusion modes");
}

// ── 7. the trained reference run ────────────────────────────────────────

/// Training the parallel-fusion model on the patch-color task must reach
/// ≥ 0.9 color accuracy, beat the image-blinded control by ≥ 0.3, and show
/// the self-key ablation hurting more than random-key removal — all within
/// 15 minutes of CPU time.
#[test]
fn a7_trained_reference_reads_images_and_leans_on_self_keys() {
    let started = Instant::now();
    let spec = TaskSpec::new(64);
    let cfg = FusionConfig::new(64, 4, 4, spec.vocab_size(), FusionMode::CasaParallel);
    let train_eps = generate_episodes::<f32>(&spec, 2048, 1).expect("train episodes");
    let eval_eps = generate_episodes::<f32>(&spec, 256, 2).expect("eval episodes");
    let tcfg = TrainConfig { batch: 16, seed: 0, ..TrainConfig::default() };

    let outcome = train::<f32>(&cfg, &train_eps, &eval_eps, &tcfg).expect("training runs");
    assert!(!outcome.diverged, "training diverged");

    let sighted = evaluate(&outcome.stack, &eval_eps, false).expect("eval");
    let blinded = evaluate(&outcome.stack, &eval_eps, true).expect("blinded eval");
    println!(
        "reference run: color {:.4}, recall {:.4}, blinded color {:.4} ({} steps)",
        sighted.acc_color, sighted.acc_recall, blinded.acc_color, outcome.steps_run
    );
    assert!(
        sighted.acc_color >= 0.9,
        "color accuracy {:.4} below 0.9",
        sighted.acc_color
    );
    assert!(
        sighted.acc_color - blinded.acc_color >= 0.3,
        "sighted {:.4} vs blinded {:.4}: images are not being read",
        sighted.acc_color,
        blinded.acc_color
    );

    let ablated = |rule: AblationRule| {
        evaluate_ablated(&outcome.stack, &eval_eps, rule, 99)
            .expect("ablated eval")
            .combined_accuracy()
    };
    let self_acc = ablated(AblationRule::MaskSelf);
    let rand_any_acc = ablated(AblationRule::MaskRandomAny);
    println!("ablations: mask-self {self_acc:.4}, mask-random-any {rand_any_acc:.4}");
    assert!(
        self_acc < rand_any_acc,
        "removing the self key ({self_acc:.4}) should hurt more than removing a \
         random key ({rand_any_acc:.4})"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed <= 900.0, "reference run took {elapsed:.0}s, budget 900s");
    println!("reference run finished in {elapsed:.0}s");
}

// ── 8. long-stream cache and wall-clock behavior ────────────────────────

/// Over 200 streamed frames: the insertion-mode cache grows strictly,
/// the windowed fusion cache stays flat after the first frame, and frame
/// ingest cost stays flat for windowed fusion (≤ 2× the frame-10 wall)
/// while insertion ingest keeps getting slower.
#[test]
fn a8_long_streams_keep_fusion_cost_flat_while_insertion_grows() {
    let ccfg = CaptioningConfig {
        n_frames: 200,
        frame_rows: 4,
        text_per_frame: 2,
        seed: 7,
        reps: 3,
    };

    let casa = small_stack(FusionMode::CasaParallel, 88);
    let rows = simulate_live_captioning(&casa, ccfg.clone()).expect("fusion stream");
    let ingest: Vec<&casa_core::streaming::LedgerRow> =
        rows.iter().filter(|r| r.event_kind == "image").collect();
    assert_eq!(ingest.len(), 200);
    let first = ingest[0].casa_window_scalars;
    assert!(
        ingest.iter().all(|r| r.casa_window_scalars == first),
        "fusion cache moved across frames"
    );
    let mut walls: Vec<f64> = ingest[11..].iter().map(|r| r.wall_ms).collect();
    walls.sort_by(f64::total_cmp);
    let median = walls[walls.len() / 2];
    let frame10 = ingest[10].wall_ms;
    assert!(
        median <= 2.0 * frame10,
        "fusion ingest drifted: median {median:.3}ms vs frame-10 {frame10:.3}ms"
    );

    let insertion = small_stack(FusionMode::Insertion, 88);
    let rows = simulate_live_captioning(&insertion, ccfg).expect("insertion stream");
    for pair in rows.windows(2) {
        assert!(
            pair[1].text_kv_scalars > pair[0].text_kv_scalars,
            "insertion cache stalled at step {}",
            pair[1].step
        );
    }
    let ingest: Vec<f64> = rows
        .iter()
        .filter(|r| r.event_kind == "image")
        .map(|r| r.wall_ms)
        .collect();
    let early: f64 = ingest[5..25].iter().sum::<f64>() / 20.0;
    let late: f64 = ingest[180..200].iter().sum::<f64>() / 20.0;
    assert!(
        late > early,
        "insertion ingest should slow down: early {early:.3}ms, late {late:.3}ms"
    );
    println!(
        "200-frame stream: fusion ingest flat (median {median:.3}ms), \
         insertion ingest {early:.3} → {late:.3}ms"
    );
}

// ── 9. the full verification binary ─────────────────────────────────────

/// `casa-lab verify --suite all` must exit 0 with a clean JSON summary
/// inside ten minutes.
#[test]
fn a9_verify_all_suites_exits_clean() {
    let started = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_casa-lab"))
        .args(["verify", "--suite", "all"])
        .output()
        .expect("binary runs");
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(
        out.status.code(),
        Some(0),
        "verify failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("summary is JSON");
    assert_eq!(doc["failures"], 0);
    assert_eq!(doc["suites"].as_array().unwrap().len(), 4);
    assert!(elapsed <= 600.0, "verify took {elapsed:.0}s, budget 600s");
    println!("verify --suite all: clean in {elapsed:.1}s");
}
