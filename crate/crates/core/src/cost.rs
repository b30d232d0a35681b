//! Attention cost accounting three ways: closed-form formulas in the
//! stream dimensions, exact unmasked-entry counts on real layouts, and a
//! wall-clock microbench of one block's components.
//!
//! The closed forms are evaluated literally from (T, N, T_W, W); what N
//! means (total vs per-window image tokens) is recorded rather than
//! assumed. For the replace mode the symbol W in `max(T², N·W²)` admits
//! two readings — window count and window size — so both are emitted side
//! by side instead of silently choosing one.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attention::mha_allowing_zero_rows;
use crate::attention::AttnParams;
use crate::error::{Error, Result};
use crate::fusion::{param_counts, FusionConfig, FusionMode};
use crate::mask::{
    build_ca_image_mask, build_casa_mask, build_insertion_mask, build_text_causal_mask, MaskSpec,
    PreamblePolicy,
};
use crate::rng::RngStream;
use crate::sequence::{segment_windows, MultimodalSequence, TokenEvent, WindowLayout};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

// ── Closed-form costs ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostParams {
    /// T: total text tokens.
    pub text: u64,
    /// N: image tokens. Whether this is the stream total or a per-window
    /// count is up to the caller; the flag travels with the number.
    pub images: u64,
    pub images_are_per_window: bool,
    /// T_W: mean text tokens per window.
    pub text_per_window: u64,
    /// W as a window count.
    pub windows: u64,
    /// W as a window size (mean tokens per window) — the alternative
    /// reading used by the replace-mode formula.
    pub window_size: u64,
}

impl CostParams {
    pub fn from_layout(layout: &WindowLayout) -> CostParams {
        let w = layout.windows.len().max(1) as u64;
        let text = layout.flat_text_len as u64;
        let images = layout.flat_image_len as u64;
        CostParams {
            text,
            images,
            images_are_per_window: false,
            text_per_window: text / w,
            windows: w,
            window_size: (text + images) / w,
        }
    }
}

/// Which value was substituted for W in the replace-mode formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WReading {
    WindowCount,
    WindowSize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymbolicCost {
    pub mode: String,
    pub formula: &'static str,
    pub value: u128,
    /// Echo of the N interpretation flag.
    pub images_are_per_window: bool,
    /// Present only for the replace mode's dual readings.
    pub w_reading: Option<WReading>,
    /// The numeric W that was plugged in, when the formula uses W.
    pub w_value: Option<u64>,
}

/// Literal evaluation of the closed-form attention-cost expressions:
/// insertion (T+N)², cross-attention T²+TN, additive windowed modes
/// T²+N(N+T_W), replace mode max(T², N·W²). The replace mode returns two
/// entries, one per W reading; every other mode returns one.
pub fn symbolic_cost(mode: FusionMode, p: &CostParams) -> Vec<SymbolicCost> {
    let t = p.text as u128;
    let n = p.images as u128;
    let tw = p.text_per_window as u128;
    match mode {
        FusionMode::Insertion => vec![SymbolicCost {
            mode: mode.to_string(),
            formula: "(T+N)^2",
            value: (t + n) * (t + n),
            images_are_per_window: p.images_are_per_window,
            w_reading: None,
            w_value: None,
        }],
        FusionMode::CrossAttn { .. } => vec![SymbolicCost {
            mode: mode.to_string(),
            formula: "T^2 + T*N",
            value: t * t + t * n,
            images_are_per_window: p.images_are_per_window,
            w_reading: None,
            w_value: None,
        }],
        FusionMode::CasaParallel | FusionMode::CasaPre => vec![SymbolicCost {
            mode: mode.to_string(),
            formula: "T^2 + N*(N+T_W)",
            value: t * t + n * (n + tw),
            images_are_per_window: p.images_are_per_window,
            w_reading: None,
            w_value: None,
        }],
        FusionMode::CasaReplace { .. } => {
            let eval = |w: u64, reading: WReading| SymbolicCost {
                mode: mode.to_string(),
                formula: "max(T^2, N*W^2)",
                value: (t * t).max(n * (w as u128) * (w as u128)),
                images_are_per_window: p.images_are_per_window,
                w_reading: Some(reading),
                w_value: Some(w),
            };
            vec![
                eval(p.windows, WReading::WindowCount),
                eval(p.window_size, WReading::WindowSize),
            ]
        }
    }
}

// ── Exact entry counts ──────────────────────────────────────────────────

/// Unmasked (query, key) pairs summed over the DISTINCT mask shapes a
/// stack of the given mode uses — one causal stream mask for insertion;
/// text-causal self-attention plus the fusion mask for everything else.
pub fn exact_attention_entries(mode: FusionMode, layout: &WindowLayout) -> Result<u128> {
    let masks: Vec<MaskSpec> = match mode {
        FusionMode::Insertion => vec![build_insertion_mask(layout)?],
        FusionMode::CrossAttn { .. } => {
            vec![build_text_causal_mask(layout)?, build_ca_image_mask(layout)?]
        }
        FusionMode::CasaParallel | FusionMode::CasaPre => vec![
            build_text_causal_mask(layout)?,
            build_casa_mask(layout, PreamblePolicy::ZeroUpdate)?,
        ],
        FusionMode::CasaReplace { .. } => vec![
            build_text_causal_mask(layout)?,
            build_casa_mask(layout, PreamblePolicy::WindowCausal)?,
        ],
    };
    Ok(masks.iter().map(MaskSpec::allowed_pair_count).sum())
}

// ── Microbenchmark ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub component: String,
    pub median_wall_us: f64,
    pub peak_scratch_scalars: usize,
    pub macs: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct MicrobenchReport {
    pub mode: String,
    pub rows: Vec<BenchRow>,
    /// Parameters a stack of this mode adds on top of the text backbone.
    pub params_added: u64,
    pub trials: usize,
}

impl MicrobenchReport {
    pub fn row(&self, component: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.component == component)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Time one op closure `trials` times after `warmup ≥ 3` discarded runs;
/// the closure builds a fresh tape each call and returns it for scratch
/// and MAC readings.
fn bench_op<E: Scalar>(
    trials: usize,
    warmup: usize,
    mut op: impl FnMut() -> Result<Tape<E>>,
) -> Result<(f64, usize, u128)> {
    for _ in 0..warmup {
        op()?;
    }
    let mut walls = Vec::with_capacity(trials);
    let mut scratch = 0;
    let mut macs = 0;
    for _ in 0..trials {
        let t0 = Instant::now();
        let tape = op()?;
        walls.push(t0.elapsed().as_secs_f64() * 1e6);
        scratch = tape.max_scratch_scalars();
        macs = tape.total_macs();
    }
    Ok((median(walls), scratch, macs))
}

/// Wall/scratch/MAC numbers for one block's components at the given
/// layout's shape: the mode's fusion attention read, the self-attention
/// read, and the FFN. Warmup runs (≥ 3) are discarded; reported walls are
/// medians over `trials`.
pub fn microbench_layer<E: Scalar>(
    cfg: &FusionConfig,
    layout: &WindowLayout,
    trials: usize,
) -> Result<MicrobenchReport> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::config("microbench needs trials ≥ 1"));
    }
    let warmup = 3;
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let t = layout.flat_text_len;
    let n = layout.flat_image_len;
    let mut rng = RngStream::new(99);
    let weights: Vec<Tensor<E>> = (0..4).map(|_| rng.normal_tensor(vec![d, d], 0.02)).collect();
    let w1 = rng.normal_tensor(vec![d, cfg.ffn_dim()], 0.02);
    let w2 = rng.normal_tensor(vec![cfg.ffn_dim(), d], 0.02);

    let attn_bench = |x_rows: usize, kv_rows: usize, mask: MaskSpec| {
        let x = rng.fork(x_rows as u64).normal_tensor(vec![x_rows, d], 1.0);
        let kv = rng.fork(kv_rows as u64).normal_tensor(vec![kv_rows, d], 1.0);
        let weights = weights.clone();
        move || -> Result<Tape<E>> {
            let mut tape = Tape::new();
            let xq = tape.constant(x.clone());
            let xkv = tape.constant(kv.clone());
            let params = AttnParams {
                wq: tape.constant(weights[0].clone()),
                wk: tape.constant(weights[1].clone()),
                wv: tape.constant(weights[2].clone()),
                wo: tape.constant(weights[3].clone()),
            };
            mha_allowing_zero_rows(&mut tape, xq, xkv, &params, h, &mask, None)?;
            Ok(tape)
        }
    };

    let mut rows = Vec::new();

    // The mode's fusion read (absent for insertion, whose single attention
    // covers the whole stream).
    match cfg.mode {
        FusionMode::Insertion => {
            let mask = build_insertion_mask(layout)?;
            let (w, s, m) = bench_op(trials, warmup, attn_bench(t + n, t + n, mask))?;
            rows.push(BenchRow {
                component: "attention".into(),
                median_wall_us: w,
                peak_scratch_scalars: s,
                macs: m,
            });
        }
        FusionMode::CrossAttn { .. } => {
            let mask = build_ca_image_mask(layout)?;
            let (w, s, m) = bench_op(trials, warmup, attn_bench(t, n, mask))?;
            rows.push(BenchRow {
                component: "fusion-attention".into(),
                median_wall_us: w,
                peak_scratch_scalars: s,
                macs: m,
            });
        }
        _ => {
            let policy = if cfg.mode.has_fusion_weights() {
                PreamblePolicy::ZeroUpdate
            } else {
                PreamblePolicy::WindowCausal
            };
            let mask = build_casa_mask(layout, policy)?;
            let (w, s, m) = bench_op(trials, warmup, attn_bench(t, t + n, mask))?;
            rows.push(BenchRow {
                component: "fusion-attention".into(),
                median_wall_us: w,
                peak_scratch_scalars: s,
                macs: m,
            });
        }
    }

    // Text self-attention (the windowed modes' second read).
    if cfg.mode.is_windowed() {
        let mask = build_text_causal_mask(layout)?;
        let (w, s, m) = bench_op(trials, warmup, attn_bench(t, t, mask))?;
        rows.push(BenchRow {
            component: "self-attention".into(),
            median_wall_us: w,
            peak_scratch_scalars: s,
            macs: m,
        });
    }

    // FFN over the rows that actually pass through it.
    let ffn_rows = if cfg.mode == FusionMode::Insertion { t + n } else { t };
    {
        let x = rng.fork(7).normal_tensor(vec![ffn_rows, d], 1.0);
        let w1 = w1.clone();
        let w2 = w2.clone();
        let (w, s, m) = bench_op(trials, warmup, move || -> Result<Tape<E>> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w1v = tape.constant(w1.clone());
            let w2v = tape.constant(w2.clone());
            let h = tape.matmul(xv, w1v)?;
            let h = tape.gelu(h);
            tape.matmul(h, w2v)?;
            Ok(tape)
        })?;
        rows.push(BenchRow {
            component: "ffn".into(),
            median_wall_us: w,
            peak_scratch_scalars: s,
            macs: m,
        });
    }

    let total = BenchRow {
        component: "total".into(),
        median_wall_us: rows.iter().map(|r| r.median_wall_us).sum(),
        peak_scratch_scalars: rows.iter().map(|r| r.peak_scratch_scalars).max().unwrap_or(0),
        macs: rows.iter().map(|r| r.macs).sum(),
    };
    rows.push(total);

    let counts = param_counts(cfg)?;
    Ok(MicrobenchReport {
        mode: cfg.mode.to_string(),
        rows,
        params_added: counts.fusion,
        trials,
    })
}

// ── Layout synthesis and the combined table ─────────────────────────────

/// Build a layout of the given shape: one sample, `windows` of
/// (image rows, text tokens) each. A leading `(0, k)` window is a text
/// preamble.
pub fn synthetic_layout(windows: &[(usize, usize)]) -> Result<WindowLayout> {
    let mut events: Vec<TokenEvent<f64>> = Vec::new();
    for &(imgs, text) in windows {
        if imgs > 0 {
            events.push(TokenEvent::ImageBlock { embeddings: Tensor::zeros(vec![imgs, 4]) });
        }
        for _ in 0..text {
            events.push(TokenEvent::Text(0));
        }
    }
    segment_windows(&MultimodalSequence { events, sample_boundaries: vec![0] })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostCsvRow {
    pub mode: String,
    pub t: u64,
    pub n: u64,
    pub t_w: u64,
    pub w: u64,
    pub symbolic: u128,
    pub exact_entries: u128,
    pub scratch_scalars: usize,
    pub wall_us: f64,
}

/// One table row per mode (two for the replace mode's W readings) at a
/// given layout, combining the closed form, the exact count, and a
/// microbench of the block's attention reads.
pub fn cost_table<E: Scalar>(
    base: &FusionConfig,
    modes: &[FusionMode],
    layout: &WindowLayout,
    trials: usize,
) -> Result<Vec<CostCsvRow>> {
    let p = CostParams::from_layout(layout);
    let mut out = Vec::new();
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.mode = mode;
        let exact = exact_attention_entries(mode, layout)?;
        let bench = microbench_layer::<E>(&cfg, layout, trials)?;
        let total = bench.row("total").unwrap();
        for sym in symbolic_cost(mode, &p) {
            let mode_label = match sym.w_reading {
                None => sym.mode.clone(),
                Some(WReading::WindowCount) => format!("{}/w=count", sym.mode),
                Some(WReading::WindowSize) => format!("{}/w=size", sym.mode),
            };
            out.push(CostCsvRow {
                mode: mode_label,
                t: p.text,
                n: p.images,
                t_w: p.text_per_window,
                w: sym.w_value.unwrap_or(p.windows),
                symbolic: sym.value,
                exact_entries: exact,
                scratch_scalars: total.peak_scratch_scalars,
                wall_us: total.median_wall_us,
            });
        }
    }
    Ok(out)
}

pub fn cost_csv(rows: &[CostCsvRow]) -> String {
    let mut s = String::from("mode,T,N,T_W,W,symbolic,exact_entries,scratch_scalars,wall_us\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.1}",
            r.mode, r.t, r.n, r.t_w, r.w, r.symbolic, r.exact_entries, r.scratch_scalars,
            r.wall_us
        )
        .unwrap();
    }
    s
}

/// Render the same rows as an aligned text table.
pub fn cost_text_table(rows: &[CostCsvRow]) -> String {
    let header = ["mode", "T", "N", "T_W", "W", "symbolic", "exact", "scratch", "wall_us"];
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.mode.clone(),
                r.t.to_string(),
                r.n.to_string(),
                r.t_w.to_string(),
                r.w.to_string(),
                r.symbolic.to_string(),
                r.exact_entries.to_string(),
                r.scratch_scalars.to_string(),
                format!("{:.1}", r.wall_us),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut s = String::new();
    for (i, head) in header.iter().enumerate() {
        let _ = write!(s, "{:<width$}  ", head, width = widths[i]);
    }
    s.push('\n');
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            let _ = write!(s, "{:<width$}  ", c, width = widths[i]);
        }
        s.push('\n');
    }
    s
}

/// Least-squares slope of log(y) against log(x) — the growth exponent of a
/// sweep.
pub fn fit_growth_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
