//! Incremental decoding with per-layer caches, equivalent to the offline
//! forward pass at every text position.
//!
//! Cache discipline by mode:
//!
//! * `insertion` — one stream-order key/value cache per block; image rows
//!   append to it exactly like text, so it grows with every frame;
//! * windowed modes — each block keeps (a) a text-only self-attention
//!   cache that grows one row per decoded token and never sees images, and
//!   (b) a window cache for the fusion read that is DISCARDED whenever a
//!   new image window opens. Consecutive image ingests with no text
//!   between them extend the current window instead of opening one.
//!
//! Cached keys are stored already position-rotated; values are stored raw.
//! Each step runs on a fresh tape with parameters bound as constants, so a
//! step's cost is independent of history length except through the cache
//! rows it attends over.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{attend_heads, merge_heads, split_heads};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, LayerStack};
use crate::rng::RngStream;
use crate::sequence::TokenId;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

// ── Caches ──────────────────────────────────────────────────────────────

/// Keys (pre-rotated) and values for one attention read, row-appended.
struct RowCache<E> {
    k: Vec<E>,
    v: Vec<E>,
    rows: usize,
}

impl<E: Scalar> RowCache<E> {
    fn new() -> Self {
        RowCache { k: Vec::new(), v: Vec::new(), rows: 0 }
    }
    fn scalars(&self) -> usize {
        self.k.len() + self.v.len()
    }
    fn clear(&mut self) {
        self.k.clear();
        self.v.clear();
        self.rows = 0;
    }
    fn append(&mut self, k_rows: &Tensor<E>, v_rows: &Tensor<E>) {
        debug_assert_eq!(k_rows.shape(), v_rows.shape());
        self.k.extend_from_slice(k_rows.data());
        self.v.extend_from_slice(v_rows.data());
        self.rows += k_rows.shape()[0];
    }
    fn tensors(&self, d: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        Ok((
            Tensor::new(vec![self.rows, d], self.k.clone())?,
            Tensor::new(vec![self.rows, d], self.v.clone())?,
        ))
    }
}

struct BlockCache<E> {
    /// Self-attention cache: absent for blocks where windowed attention
    /// replaces self-attention.
    sa: Option<RowCache<E>>,
    /// Window cache for the fusion read: absent for blocks that never fuse.
    win: Option<RowCache<E>>,
}

// ── Ledger ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LedgerRow {
    pub step: usize,
    pub event_kind: &'static str,
    pub text_kv_scalars: usize,
    pub casa_window_scalars: usize,
    pub peak_scratch_scalars: usize,
    pub wall_ms: f64,
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = String::from(
        "step,event_kind,text_kv_scalars,casa_window_scalars,peak_scratch_scalars,wall_ms\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.3}",
            r.step, r.event_kind, r.text_kv_scalars, r.casa_window_scalars,
            r.peak_scratch_scalars, r.wall_ms
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    /// Scalars held across all self-attention caches.
    pub text_kv_scalars: usize,
    /// Scalars held across all window fusion caches.
    pub casa_window_scalars: usize,
    /// Rows in one self-attention cache (they are all equal).
    pub text_cache_rows: usize,
    /// Rows in one window cache.
    pub window_cache_rows: usize,
    /// Largest `casa_window_scalars` seen so far.
    pub peak_window_scalars: usize,
}

// ── Session ─────────────────────────────────────────────────────────────

pub struct StreamSession<'a, E: Scalar> {
    stack: &'a LayerStack<E>,
    blocks: Vec<BlockCache<E>>,
    d: usize,
    text_count: usize,
    stream_count: usize,
    window_images: usize,
    window_text: usize,
    last_was_image: bool,
    peak_window_scalars: usize,
    steps: Vec<LedgerRow>,
}

/// Per-step working context: a fresh tape plus lazily bound parameters.
struct Step<'s, E: Scalar> {
    tape: Tape<E>,
    stack: &'s LayerStack<E>,
    bound: BTreeMap<String, Var>,
}

impl<E: Scalar> Step<'_, E> {
    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .stack
            .param(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        let v = self.tape.constant(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        let eps = self.stack.cfg().ln_eps;
        self.tape.layernorm(x, g, b, eps)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add(h, b1)?;
        let h = self.tape.gelu(h);
        let o = self.tape.matmul(h, w2)?;
        self.tape.add(o, b2)
    }

    /// Project and rotate this step's keys/values from normed rows `hn`.
    fn kv_rows(
        &mut self,
        hn: Var,
        attn_prefix: &str,
        positions: Vec<usize>,
    ) -> Result<(Var, Var)> {
        let wk = self.p(&format!("{attn_prefix}.wk"));
        let wv = self.p(&format!("{attn_prefix}.wv"));
        let hd = self.stack.cfg().head_dim();
        let base = self.stack.cfg().rope_base;
        let k = self.tape.matmul(hn, wk)?;
        let k = self.tape.rope(k, positions, hd, base)?;
        let v = self.tape.matmul(hn, wv)?;
        Ok((k, v))
    }

    /// Queries from `hn` at `positions`, attention over `(k, v)` (cached
    /// rows as constants), output projection — the streaming counterpart of
    /// one masked attention call.
    fn attend(
        &mut self,
        hn: Var,
        attn_prefix: &str,
        positions: Vec<usize>,
        k: Tensor<E>,
        v: Tensor<E>,
        blocked: Option<&[bool]>,
    ) -> Result<Var> {
        let wq = self.p(&format!("{attn_prefix}.wq"));
        let wo = self.p(&format!("{attn_prefix}.wo"));
        let hd = self.stack.cfg().head_dim();
        let h = self.stack.cfg().n_heads;
        let base = self.stack.cfg().rope_base;
        let q = self.tape.matmul(hn, wq)?;
        let q = self.tape.rope(q, positions, hd, base)?;
        let q3 = split_heads(&mut self.tape, q, h)?;
        let kc = self.tape.constant(k);
        let vc = self.tape.constant(v);
        let k3 = split_heads(&mut self.tape, kc, h)?;
        let v3 = split_heads(&mut self.tape, vc, h)?;
        let (ctx, _) = attend_heads(&mut self.tape, q3, k3, v3, blocked)?;
        let merged = merge_heads(&mut self.tape, ctx)?;
        self.tape.matmul(merged, wo)
    }
}

impl<'a, E: Scalar> StreamSession<'a, E> {
    pub fn new(stack: &'a LayerStack<E>) -> Self {
        let mode = stack.cfg().mode;
        let blocks = (0..stack.cfg().n_layers)
            .map(|b| {
                let fuses = mode.fuses_at(b);
                let replaced = fuses && !mode.has_fusion_weights() && mode.is_windowed();
                BlockCache {
                    sa: if replaced { None } else { Some(RowCache::new()) },
                    win: if fuses { Some(RowCache::new()) } else { None },
                }
            })
            .collect();
        StreamSession {
            stack,
            blocks,
            d: stack.cfg().d_model,
            text_count: 0,
            stream_count: 0,
            window_images: 0,
            window_text: 0,
            last_was_image: false,
            peak_window_scalars: 0,
            steps: Vec::new(),
        }
    }

    pub fn memory_report(&self) -> MemoryReport {
        let text_kv_scalars =
            self.blocks.iter().filter_map(|b| b.sa.as_ref()).map(RowCache::scalars).sum();
        let casa_window_scalars: usize =
            self.blocks.iter().filter_map(|b| b.win.as_ref()).map(RowCache::scalars).sum();
        MemoryReport {
            text_kv_scalars,
            casa_window_scalars,
            text_cache_rows: self
                .blocks
                .iter()
                .find_map(|b| b.sa.as_ref())
                .map_or(0, |c| c.rows),
            window_cache_rows: self
                .blocks
                .iter()
                .find_map(|b| b.win.as_ref())
                .map_or(0, |c| c.rows),
            peak_window_scalars: self.peak_window_scalars.max(casa_window_scalars),
        }
    }

    pub fn ledger(&self) -> &[LedgerRow] {
        &self.steps
    }

    fn step_ctx(&self) -> Step<'a, E> {
        Step { tape: Tape::new(), stack: self.stack, bound: BTreeMap::new() }
    }

    fn push_ledger(&mut self, event_kind: &'static str, scratch: usize, wall_ms: f64) -> LedgerRow {
        let m = self.memory_report();
        self.peak_window_scalars = m.peak_window_scalars;
        let row = LedgerRow {
            step: self.steps.len(),
            event_kind,
            text_kv_scalars: m.text_kv_scalars,
            casa_window_scalars: m.casa_window_scalars,
            peak_scratch_scalars: scratch,
            wall_ms,
        };
        self.steps.push(row.clone());
        row
    }

    /// Feed one image block. In windowed modes this opens a new window
    /// (discarding the previous window's cache) unless the immediately
    /// preceding event was also an image, in which case the rows extend the
    /// current window.
    pub fn ingest_image(&mut self, embeddings: &Tensor<E>) -> Result<LedgerRow> {
        let t0 = Instant::now();
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "ingest_image",
                lhs: shape.to_vec(),
                rhs: vec![1, self.d],
            });
        }
        let cfg = self.stack.cfg().clone();
        let mut step = self.step_ctx();

        // Optional compression: one ingest call is one image block, so the
        // compressor sees exactly the rows of this call.
        let mut x = step.tape.constant(embeddings.clone());
        if cfg.qformer.is_some() {
            for (name, _, t) in self.stack.params() {
                if name.starts_with("qf") {
                    let v = step.tape.constant(t.clone());
                    step.bound.insert(name.to_string(), v);
                }
            }
            x = self.stack.qformer_compress_var(&mut step.tape, &step.bound, x)?;
        }
        let r = step.tape.shape(x)[0];

        if cfg.mode == FusionMode::Insertion {
            // Image rows run through the stack like text, with causal
            // visibility among themselves.
            let t_old = self.stream_count;
            let positions: Vec<usize> = (t_old..t_old + r).collect();
            for b in 0..cfg.n_layers {
                let p = format!("blk{b:02}");
                let hn = step.ln(x, &format!("{p}.n1"))?;
                let (k_new, v_new) = step.kv_rows(hn, &format!("{p}.sa"), positions.clone())?;
                let cache = self.blocks[b].sa.as_mut().unwrap();
                cache.append(&step.tape.value_tensor(k_new), &step.tape.value_tensor(v_new));
                let (k, v) = cache.tensors(self.d)?;
                let tk = cache.rows;
                let mut blocked = vec![false; r * tk];
                for (i, row) in blocked.chunks_mut(tk).enumerate() {
                    for cell in row.iter_mut().skip(t_old + i + 1) {
                        *cell = true;
                    }
                }
                let upd = step.attend(
                    hn,
                    &format!("{p}.sa"),
                    positions.clone(),
                    k,
                    v,
                    Some(&blocked),
                )?;
                x = step.tape.add(x, upd)?;
                let h = step.ln(x, &format!("{p}.n2"))?;
                let h = step.ffn(h, &format!("{p}.ffn"))?;
                x = step.tape.add(x, h)?;
            }
            self.stream_count += r;
        } else {
            if !self.last_was_image {
                // New window: the previous window's keys and values are gone
                // for good — this is what keeps fusion memory constant.
                for b in &mut self.blocks {
                    if let Some(win) = b.win.as_mut() {
                        win.clear();
                    }
                }
                self.window_images = 0;
                self.window_text = 0;
            }
            let positions: Vec<usize> =
                (self.window_images..self.window_images + r).collect();
            for b in 0..cfg.n_layers {
                let p = format!("blk{b:02}");
                if cfg.image_ffn_update {
                    let h = step.ln(x, &format!("{p}.n2"))?;
                    let h = step.ffn(h, &format!("{p}.ffn"))?;
                    x = step.tape.add(x, h)?;
                }
                if cfg.mode.fuses_at(b) {
                    let (norm, attn) = fusion_names(&cfg.mode, b);
                    let kn = step.ln(x, &norm)?;
                    let (k_new, v_new) = step.kv_rows(kn, &attn, positions.clone())?;
                    let kt = step.tape.value_tensor(k_new);
                    let vt = step.tape.value_tensor(v_new);
                    self.blocks[b].win.as_mut().unwrap().append(&kt, &vt);
                }
            }
            self.window_images += r;
        }
        self.last_was_image = true;
        let scratch = step.tape.max_scratch_scalars();
        Ok(self.push_ledger("image", scratch, t0.elapsed().as_secs_f64() * 1e3))
    }

    /// Feed one text token; returns this position's next-token logits.
    pub fn decode_step(&mut self, token: TokenId) -> Result<(Tensor<E>, LedgerRow)> {
        let t0 = Instant::now();
        let cfg = self.stack.cfg().clone();
        if (token as usize) >= cfg.vocab_size {
            return Err(Error::contract(format!(
                "token {token} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        let mut step = self.step_ctx();
        let embed = self.stack.param("tok_embed").unwrap();
        let row = token as usize * self.d;
        let mut x = step.tape.constant(Tensor::new(
            vec![1, self.d],
            embed.data()[row..row + self.d].to_vec(),
        )?);

        let sa_pos = if cfg.mode == FusionMode::Insertion {
            self.stream_count
        } else {
            self.text_count
        };
        let win_pos = self.window_images + self.window_text;

        // With image_ffn_update the parallel image stream was already
        // refreshed at ingest time; decode never touches it.
        for b in 0..cfg.n_layers {
            let p = format!("blk{b:02}");
            match cfg.mode {
                FusionMode::Insertion => {
                    self.sa_substep(&mut step, &mut x, b, sa_pos)?;
                }
                FusionMode::CrossAttn { gated } => {
                    if self.window_images > 0 {
                        let qn = step.ln(x, &format!("{p}.fuse.n"))?;
                        let (k, v) = self.blocks[b].win.as_ref().unwrap().tensors(self.d)?;
                        let mut upd = step.attend(
                            qn,
                            &format!("{p}.fuse"),
                            vec![win_pos],
                            k,
                            v,
                            None,
                        )?;
                        if gated {
                            let g = step.p(&format!("{p}.fuse.gate"));
                            let tg = step.tape.tanh_op(g);
                            upd = step.tape.mul(upd, tg)?;
                        }
                        x = step.tape.add(x, upd)?;
                    }
                    self.sa_substep(&mut step, &mut x, b, sa_pos)?;
                }
                FusionMode::CasaPre => {
                    if self.window_images > 0 {
                        let upd = self.casa_substep(&mut step, x, b, win_pos)?;
                        x = step.tape.add(x, upd)?;
                    }
                    self.sa_substep(&mut step, &mut x, b, sa_pos)?;
                }
                FusionMode::CasaParallel => {
                    // Both residuals read the block input x0; tmp becomes
                    // x0 + sa_out, then the windowed residual is added.
                    let x0 = x;
                    let mut tmp = x0;
                    self.sa_substep(&mut step, &mut tmp, b, sa_pos)?;
                    if self.window_images > 0 {
                        let casa = self.casa_substep(&mut step, x0, b, win_pos)?;
                        x = step.tape.add(tmp, casa)?;
                    } else {
                        x = tmp;
                    }
                }
                FusionMode::CasaReplace { .. } => {
                    if cfg.mode.fuses_at(b) {
                        let upd = self.casa_substep(&mut step, x, b, win_pos)?;
                        x = step.tape.add(x, upd)?;
                    } else {
                        self.sa_substep(&mut step, &mut x, b, sa_pos)?;
                    }
                }
            }
            let h = step.ln(x, &format!("{p}.n2"))?;
            let h = step.ffn(h, &format!("{p}.ffn"))?;
            x = step.tape.add(x, h)?;
        }
        let xn = step.ln(x, "final_norm")?;
        let head = step.p("head");
        let logits = step.tape.matmul(xn, head)?;
        let out = step.tape.value_tensor(logits).reshaped(vec![cfg.vocab_size])?;

        self.text_count += 1;
        self.stream_count += 1;
        self.window_text += 1;
        self.last_was_image = false;
        let scratch = step.tape.max_scratch_scalars();
        let row = self.push_ledger("text", scratch, t0.elapsed().as_secs_f64() * 1e3);
        Ok((out, row))
    }

    /// Self-attention with cache append (the new row sees itself).
    fn sa_substep(
        &mut self,
        step: &mut Step<'_, E>,
        x: &mut Var,
        b: usize,
        pos: usize,
    ) -> Result<()> {
        let p = format!("blk{b:02}");
        let hn = step.ln(*x, &format!("{p}.n1"))?;
        let (k_new, v_new) = step.kv_rows(hn, &format!("{p}.sa"), vec![pos])?;
        let cache = self.blocks[b].sa.as_mut().unwrap();
        cache.append(&step.tape.value_tensor(k_new), &step.tape.value_tensor(v_new));
        let (k, v) = cache.tensors(self.d)?;
        let upd = step.attend(hn, &format!("{p}.sa"), vec![pos], k, v, None)?;
        *x = step.tape.add(*x, upd)?;
        Ok(())
    }

    /// Windowed attention with window-cache append: the new text row joins
    /// the window (after its images and earlier window text) and sees the
    /// whole window including itself.
    fn casa_substep(
        &mut self,
        step: &mut Step<'_, E>,
        x: Var,
        b: usize,
        win_pos: usize,
    ) -> Result<Var> {
        let cfg = self.stack.cfg();
        let (norm, attn) = fusion_names(&cfg.mode, b);
        let qn = step.ln(x, &norm)?;
        let (k_new, v_new) = step.kv_rows(qn, &attn, vec![win_pos])?;
        let cache = self.blocks[b].win.as_mut().unwrap();
        cache.append(&step.tape.value_tensor(k_new), &step.tape.value_tensor(v_new));
        let (k, v) = cache.tensors(self.d)?;
        step.attend(qn, &attn, vec![win_pos], k, v, None)
    }
}

/// (norm prefix, attention prefix) each fusing block reads from.
fn fusion_names(mode: &FusionMode, b: usize) -> (String, String) {
    let p = format!("blk{b:02}");
    if mode.has_fusion_weights() {
        (format!("{p}.fuse.n"), format!("{p}.fuse"))
    } else {
        (format!("{p}.n1"), format!("{p}.sa"))
    }
}

// ── Live-captioning simulation ──────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct CaptioningConfig {
    pub n_frames: usize,
    pub frame_rows: usize,
    pub text_per_frame: usize,
    pub seed: u64,
    /// Each run is repeated this many times; per-step wall times are
    /// medians across runs.
    pub reps: usize,
}

impl Default for CaptioningConfig {
    fn default() -> Self {
        CaptioningConfig { n_frames: 200, frame_rows: 4, text_per_frame: 2, seed: 7, reps: 3 }
    }
}

/// Stream `n_frames` frames, decoding `text_per_frame` tokens after each,
/// and return the per-event ledger with median-across-runs wall times.
pub fn simulate_live_captioning<E: Scalar>(
    stack: &LayerStack<E>,
    cfg: CaptioningConfig,
) -> Result<Vec<LedgerRow>> {
    if cfg.reps == 0 || cfg.n_frames == 0 {
        return Err(Error::config("captioning simulation needs reps ≥ 1 and n_frames ≥ 1"));
    }
    let d = stack.cfg().d_model;
    let vocab = stack.cfg().vocab_size as u32;
    let mut rng = RngStream::new(cfg.seed);
    let frames: Vec<Tensor<E>> = (0..cfg.n_frames)
        .map(|_| rng.normal_tensor(vec![cfg.frame_rows, d], 1.0))
        .collect();

    let mut walls: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<LedgerRow> = Vec::new();
    for _ in 0..cfg.reps {
        let mut session = StreamSession::new(stack);
        let mut run_rows = Vec::new();
        let mut tok: u32 = 0;
        for frame in &frames {
            run_rows.push(session.ingest_image(frame)?);
            for _ in 0..cfg.text_per_frame {
                let (_, row) = session.decode_step(tok % vocab)?;
                run_rows.push(row);
                tok += 1;
            }
        }
        walls.push(run_rows.iter().map(|r| r.wall_ms).collect());
        rows = run_rows;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        let mut ws: Vec<f64> = walls.iter().map(|run| run[i]).collect();
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        row.wall_ms = ws[ws.len() / 2];
    }
    Ok(rows)
}
