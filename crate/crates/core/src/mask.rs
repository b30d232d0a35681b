//! Attention mask specifications.
//!
//! A mask is either a dense boolean matrix (true = attend) or a list of
//! blocks, each binding a contiguous run of query rows to a contiguous run
//! of key columns. Blocks are self-contained: materializing to dense needs
//! no side information. Query rows and key columns live in different
//! coordinate spaces depending on the mask family:
//!
//! * insertion mask — rows and columns both index the interleaved stream;
//! * text-causal mask — rows and columns both index flat text;
//! * windowed fusion masks (cross-attention and CASA) — rows index flat
//!   text, columns index the interleaved stream.
//!
//! Rows with no allowed key are "zero-update" rows (text in an imageless
//! window under additive fusion). They are represented explicitly and
//! handled outside softmax by every consumer; nothing in this crate ever
//! softmaxes an all-masked row.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::sequence::{TokenKind, WindowLayout};

/// One attention block. Query `q` at offset `j = q - query_span.start` may
/// attend to the first `leading_keys` columns of `key_span` unconditionally
/// and, when `causal_text` is set, to the following `j + 1` columns (its own
/// window's text up to and including itself). With `causal_text` unset the
/// whole `key_span` is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBlock {
    pub query_span: Range<usize>,
    pub key_span: Range<usize>,
    pub leading_keys: usize,
    pub causal_text: bool,
    pub zero_update: bool,
}

impl AttnBlock {
    /// Number of visible keys (a prefix of `key_span`) for the query at
    /// offset `j` within `query_span`.
    pub fn allowed_in_row(&self, j: usize) -> usize {
        if self.zero_update {
            return 0;
        }
        let len = self.key_span.len();
        if self.causal_text {
            (self.leading_keys + j + 1).min(len)
        } else {
            len
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    /// Row-major q_len × k_len boolean matrix; true = may attend.
    Dense(Vec<bool>),
    Blockwise(Vec<AttnBlock>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub q_len: usize,
    pub k_len: usize,
}

impl MaskSpec {
    pub fn dense(q_len: usize, k_len: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != q_len * k_len {
            return Err(Error::ShapeMismatch {
                op: "MaskSpec::dense",
                lhs: vec![q_len, k_len],
                rhs: vec![bits.len()],
            });
        }
        Ok(MaskSpec {
            kind: MaskKind::Dense(bits),
            q_len,
            k_len,
        })
    }

    pub fn blockwise(q_len: usize, k_len: usize, blocks: Vec<AttnBlock>) -> Result<Self> {
        let spec = MaskSpec {
            kind: MaskKind::Blockwise(blocks),
            q_len,
            k_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Blockwise invariants: blocks stay in range, query spans are disjoint,
    /// and together they cover every query row exactly once.
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            MaskKind::Dense(bits) => {
                if bits.len() != self.q_len * self.k_len {
                    return Err(Error::contract("dense mask size mismatch"));
                }
            }
            MaskKind::Blockwise(blocks) => {
                let mut covered = vec![false; self.q_len];
                for b in blocks {
                    if b.query_span.end > self.q_len || b.key_span.end > self.k_len {
                        return Err(Error::contract(format!(
                            "block {:?}/{:?} exceeds mask dims {}×{}",
                            b.query_span, b.key_span, self.q_len, self.k_len
                        )));
                    }
                    if b.leading_keys > b.key_span.len() {
                        return Err(Error::contract("leading_keys exceeds key span"));
                    }
                    if b.zero_update && !b.key_span.is_empty() {
                        return Err(Error::contract(
                            "zero-update block must have an empty key span",
                        ));
                    }
                    for q in b.query_span.clone() {
                        if covered[q] {
                            return Err(Error::contract(format!(
                                "query row {q} covered by two blocks"
                            )));
                        }
                        covered[q] = true;
                    }
                }
                if let Some(missing) = covered.iter().position(|c| !c) {
                    return Err(Error::contract(format!(
                        "query row {missing} not covered by any block"
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when query `q` may attend to key `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match &self.kind {
            MaskKind::Dense(bits) => bits[q * self.k_len + k],
            MaskKind::Blockwise(blocks) => blocks.iter().any(|b| {
                b.query_span.contains(&q)
                    && b.key_span.contains(&k)
                    && (k - b.key_span.start) < b.allowed_in_row(q - b.query_span.start)
            }),
        }
    }

    /// Total and deterministic: expand any mask to its dense boolean matrix.
    pub fn to_dense(&self) -> Vec<bool> {
        match &self.kind {
            MaskKind::Dense(bits) => bits.clone(),
            MaskKind::Blockwise(blocks) => {
                let mut bits = vec![false; self.q_len * self.k_len];
                for b in blocks {
                    for (j, q) in b.query_span.clone().enumerate() {
                        let allowed = b.allowed_in_row(j);
                        let row = &mut bits[q * self.k_len..(q + 1) * self.k_len];
                        for k in b.key_span.start..b.key_span.start + allowed {
                            row[k] = true;
                        }
                    }
                }
                bits
            }
        }
    }

    pub fn materialize(&self) -> MaskSpec {
        MaskSpec {
            kind: MaskKind::Dense(self.to_dense()),
            q_len: self.q_len,
            k_len: self.k_len,
        }
    }

    /// Rows with no allowed key at all.
    pub fn zero_update_rows(&self) -> Vec<usize> {
        match &self.kind {
            MaskKind::Dense(bits) => (0..self.q_len)
                .filter(|&q| bits[q * self.k_len..(q + 1) * self.k_len].iter().all(|b| !b))
                .collect(),
            MaskKind::Blockwise(blocks) => {
                let mut rows: Vec<usize> = blocks
                    .iter()
                    .filter(|b| b.zero_update)
                    .flat_map(|b| b.query_span.clone())
                    .collect();
                rows.sort_unstable();
                rows
            }
        }
    }

    /// Count of allowed (query, key) pairs, by per-row arithmetic for
    /// blockwise masks — no materialization.
    pub fn allowed_pair_count(&self) -> u128 {
        match &self.kind {
            MaskKind::Dense(bits) => bits.iter().filter(|b| **b).count() as u128,
            MaskKind::Blockwise(blocks) => blocks
                .iter()
                .map(|b| {
                    (0..b.query_span.len())
                        .map(|j| b.allowed_in_row(j) as u128)
                        .sum::<u128>()
                })
                .sum(),
        }
    }

    /// Dense copy with specific (query, key) pairs removed. Out-of-range
    /// pairs are an error; removing from an already-false cell is a no-op.
    pub fn with_removed(&self, removals: &[(usize, usize)]) -> Result<MaskSpec> {
        let mut bits = self.to_dense();
        for &(q, k) in removals {
            if q >= self.q_len || k >= self.k_len {
                return Err(Error::contract(format!(
                    "mask edit ({q},{k}) outside {}×{}",
                    self.q_len, self.k_len
                )));
            }
            bits[q * self.k_len + k] = false;
        }
        MaskSpec::dense(self.q_len, self.k_len, bits)
    }
}

// ── Builders ────────────────────────────────────────────────────────────

/// Full causal mask over the interleaved stream, block-diagonal per sample.
/// Token-insertion attention uses this: every token (text or image) attends
/// to all earlier tokens of its own sample, itself included.
pub fn build_insertion_mask(layout: &WindowLayout) -> Result<MaskSpec> {
    let n = layout.n_tokens;
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let s = layout.sample_of(start);
        let mut end = start + 1;
        while end < n && layout.sample_of(end) == s {
            end += 1;
        }
        blocks.push(AttnBlock {
            query_span: start..end,
            key_span: start..end,
            leading_keys: 0,
            causal_text: true,
            zero_update: false,
        });
        start = end;
    }
    MaskSpec::blockwise(n, n, blocks)
}

/// Causal mask over flat text, block-diagonal per sample. The self-attention
/// layers of the windowed fusion modes use this; image tokens own no rows or
/// columns here.
pub fn build_text_causal_mask(layout: &WindowLayout) -> Result<MaskSpec> {
    let t = layout.flat_text_len;
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < t {
        let s = layout.sample_of_text(start);
        let mut end = start + 1;
        while end < t && layout.sample_of_text(end) == s {
            end += 1;
        }
        blocks.push(AttnBlock {
            query_span: start..end,
            key_span: start..end,
            leading_keys: 0,
            causal_text: true,
            zero_update: false,
        });
        start = end;
    }
    MaskSpec::blockwise(t, t, blocks)
}

/// How text in an imageless (preamble) window behaves in a windowed mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreamblePolicy {
    /// Additive fusion: the residual update is skipped entirely.
    ZeroUpdate,
    /// Replacement fusion: the block still runs, as causal attention over
    /// the window's own text.
    WindowCausal,
}

/// Windowed text→(image + text) mask: each text query sees all image tokens
/// of its own window plus that window's text up to and including itself.
/// No attention crosses windows or samples. Rows: flat text. Columns: the
/// interleaved stream.
pub fn build_casa_mask(layout: &WindowLayout, preamble: PreamblePolicy) -> Result<MaskSpec> {
    let mut blocks = Vec::new();
    for (w, win) in layout.windows.iter().enumerate() {
        if win.text_len() == 0 {
            continue; // no query rows
        }
        let q = layout.window_text_flat_span(w);
        if win.is_preamble() && preamble == PreamblePolicy::ZeroUpdate {
            blocks.push(AttnBlock {
                query_span: q,
                key_span: 0..0,
                leading_keys: 0,
                causal_text: false,
                zero_update: true,
            });
            continue;
        }
        // Window tokens are contiguous in the interleaved stream: images
        // first, then text.
        let key_start = if win.is_preamble() {
            win.text_span.start
        } else {
            win.image_span.start
        };
        blocks.push(AttnBlock {
            query_span: q,
            key_span: key_start..win.text_span.end,
            leading_keys: win.image_len(),
            causal_text: true,
            zero_update: false,
        });
    }
    MaskSpec::blockwise(layout.flat_text_len, layout.n_tokens, blocks)
}

/// Windowed text→image mask: each text query sees exactly the image tokens
/// of its own window; text in an imageless window is a zero-update row.
/// Same coordinates as [`build_casa_mask`].
pub fn build_ca_mask(layout: &WindowLayout) -> Result<MaskSpec> {
    let mut blocks = Vec::new();
    for (w, win) in layout.windows.iter().enumerate() {
        if win.text_len() == 0 {
            continue;
        }
        let q = layout.window_text_flat_span(w);
        if win.is_preamble() {
            blocks.push(AttnBlock {
                query_span: q,
                key_span: 0..0,
                leading_keys: 0,
                causal_text: false,
                zero_update: true,
            });
            continue;
        }
        blocks.push(AttnBlock {
            query_span: q,
            key_span: win.image_span.clone(),
            leading_keys: win.image_len(),
            causal_text: false,
            zero_update: false,
        });
    }
    MaskSpec::blockwise(layout.flat_text_len, layout.n_tokens, blocks)
}

/// Like [`build_ca_mask`] but with columns in flat-image coordinates, for
/// attention whose K/V source holds only the image rows. Each text query
/// sees its window's image rows; imageless-window text is a zero-update
/// row.
pub fn build_ca_image_mask(layout: &WindowLayout) -> Result<MaskSpec> {
    let mut blocks = Vec::new();
    for (w, win) in layout.windows.iter().enumerate() {
        if win.text_len() == 0 {
            continue;
        }
        let q = layout.window_text_flat_span(w);
        if win.is_preamble() {
            blocks.push(AttnBlock {
                query_span: q,
                key_span: 0..0,
                leading_keys: 0,
                causal_text: false,
                zero_update: true,
            });
            continue;
        }
        let keys = layout.window_image_flat_span(w);
        blocks.push(AttnBlock {
            query_span: q,
            key_span: keys.clone(),
            leading_keys: keys.len(),
            causal_text: false,
            zero_update: false,
        });
    }
    MaskSpec::blockwise(layout.flat_text_len, layout.flat_image_len, blocks)
}

// ── Labels and CSV dump ─────────────────────────────────────────────────

/// Labels for interleaved-stream coordinates: "t3" = fourth text token,
/// "i7" = eighth image token.
pub fn interleaved_labels(layout: &WindowLayout) -> Vec<String> {
    (0..layout.n_tokens)
        .map(|pos| match layout.kind(pos) {
            TokenKind::Text => format!("t{}", layout.flat_index(pos)),
            TokenKind::Image => format!("i{}", layout.flat_index(pos)),
        })
        .collect()
}

/// Labels for flat-text coordinates.
pub fn text_labels(layout: &WindowLayout) -> Vec<String> {
    (0..layout.flat_text_len).map(|t| format!("t{t}")).collect()
}

/// Dense 0/1 CSV with a header row of key labels and a leading column of
/// query labels.
pub fn mask_to_csv(mask: &MaskSpec, row_labels: &[String], col_labels: &[String]) -> Result<String> {
    if row_labels.len() != mask.q_len || col_labels.len() != mask.k_len {
        return Err(Error::ShapeMismatch {
            op: "mask_to_csv",
            lhs: vec![mask.q_len, mask.k_len],
            rhs: vec![row_labels.len(), col_labels.len()],
        });
    }
    let bits = mask.to_dense();
    let mut out = String::new();
    out.push_str("query");
    for c in col_labels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (q, label) in row_labels.iter().enumerate() {
        out.push_str(label);
        for k in 0..mask.k_len {
            out.push(',');
            out.push(if bits[q * mask.k_len + k] { '1' } else { '0' });
        }
        out.push('\n');
    }
    Ok(out)
}
