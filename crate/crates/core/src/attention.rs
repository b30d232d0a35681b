//! Multi-head attention on the tape.
//!
//! Two execution paths compute the same function. The dense path
//! materializes the full score matrix and fills disallowed cells with −inf;
//! the blockwise path slices each attention block out of the projected
//! tensors and never touches cross-window cells. Keys are visited in the
//! same ascending order either way, masked cells contribute exact zeros to
//! row sums, and the output projection is applied once at the end of both
//! paths — so the two agree bit for bit, and the tests assert `==` rather
//! than a tolerance.
//!
//! Rows the mask marks as zero-update (no allowed key) are zeroed exactly:
//! the dense path overwrites them after the output projection, the
//! blockwise path never computes them. Callers that should never see such
//! a row use [`mha`]; additive fusion layers use
//! [`mha_allowing_zero_rows`].

use crate::error::{Error, Result};
use crate::mask::{AttnBlock, MaskKind, MaskSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Projection weights for one attention layer, each `[d, d]`, bias-free.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Rotary positions for one attention call. Queries and keys may live in
/// different coordinate systems (e.g. cached keys at stream positions,
/// fresh queries at window-local positions), so each side carries its own
/// position list.
#[derive(Debug, Clone, Copy)]
pub struct RopeSpec<'a> {
    pub q_positions: &'a [usize],
    pub k_positions: &'a [usize],
    pub base: f64,
}

/// `[t, d]` → `[n_heads, t, d/n_heads]`.
pub fn split_heads<E: Scalar>(tape: &mut Tape<E>, x: Var, n_heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || n_heads == 0 || s[1] % n_heads != 0 {
        return Err(Error::config(format!(
            "cannot split {s:?} into {n_heads} heads"
        )));
    }
    let r = tape.reshape(x, vec![s[0], n_heads, s[1] / n_heads])?;
    tape.permute(r, vec![1, 0, 2])
}

/// `[n_heads, t, head_dim]` → `[t, n_heads·head_dim]`.
pub fn merge_heads<E: Scalar>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::contract(format!("merge_heads needs 3-d input, got {s:?}")));
    }
    let p = tape.permute(x, vec![1, 0, 2])?;
    tape.reshape(p, vec![s[1], s[0] * s[2]])
}

/// Scaled dot-product attention over already-split heads. `blocked`, when
/// present, is a row-major `[tq, tk]` matrix with true = may NOT attend,
/// shared across heads. Returns the context `[n_heads, tq, head_dim]` and
/// the post-softmax attention `[n_heads, tq, tk]`.
pub fn attend_heads<E: Scalar>(
    tape: &mut Tape<E>,
    q3: Var,
    k3: Var,
    v3: Var,
    blocked: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let sq = tape.shape(q3).to_vec();
    let sk = tape.shape(k3).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::ShapeMismatch { op: "attend_heads", lhs: sq, rhs: sk });
    }
    let (h, tq, hd) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    let kt = tape.permute(k3, vec![0, 2, 1])?;
    let scores = tape.matmul(q3, kt)?; // [h, tq, tk]
    let scores = tape.scale(scores, E::from_f64(1.0 / (hd as f64).sqrt()));
    let scores = match blocked {
        Some(b) if b.iter().any(|&x| x) => {
            if b.len() != tq * tk {
                return Err(Error::ShapeMismatch {
                    op: "attend_heads",
                    lhs: vec![tq, tk],
                    rhs: vec![b.len()],
                });
            }
            let mut tiled = Vec::with_capacity(h * tq * tk);
            for _ in 0..h {
                tiled.extend_from_slice(b);
            }
            tape.masked_fill(scores, tiled, E::neg_infinity())?
        }
        _ => scores,
    };
    let attn = tape.softmax_lastdim(scores)?;
    let ctx = tape.matmul(attn, v3)?;
    Ok((ctx, attn))
}

fn project_rope<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    head_dim: usize,
    rope: Option<RopeSpec<'_>>,
) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(x_q, params.wq)?;
    let k = tape.matmul(x_kv, params.wk)?;
    let v = tape.matmul(x_kv, params.wv)?;
    match rope {
        Some(r) => Ok((
            tape.rope(q, r.q_positions.to_vec(), head_dim, r.base)?,
            tape.rope(k, r.k_positions.to_vec(), head_dim, r.base)?,
            v,
        )),
        None => Ok((q, k, v)),
    }
}

fn mha_impl<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &MaskSpec,
    rope: Option<RopeSpec<'_>>,
    allow_zero_rows: bool,
) -> Result<(Var, Var)> {
    let sq = tape.shape(x_q).to_vec();
    let sk = tape.shape(x_kv).to_vec();
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::ShapeMismatch { op: "mha", lhs: sq, rhs: sk });
    }
    if sq[0] != mask.q_len || sk[0] != mask.k_len {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: vec![sq[0], sk[0]],
            rhs: vec![mask.q_len, mask.k_len],
        });
    }
    let d = sq[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!("{d} dims cannot split into {n_heads} heads")));
    }
    let zero_rows = mask.zero_update_rows();
    if !allow_zero_rows && !zero_rows.is_empty() {
        return Err(Error::contract(format!(
            "query rows {zero_rows:?} have no allowed key"
        )));
    }
    if mask.k_len == 0 {
        // No keys at all (e.g. image-only attention on an imageless input):
        // every row is a zero update.
        let out = tape.constant(Tensor::zeros(vec![mask.q_len, d]));
        let attn = tape.constant(Tensor::zeros(vec![n_heads, mask.q_len, 0]));
        return Ok((out, attn));
    }

    let (q, k, v) = project_rope(tape, x_q, x_kv, params, d / n_heads, rope)?;
    let q3 = split_heads(tape, q, n_heads)?;
    let k3 = split_heads(tape, k, n_heads)?;
    let v3 = split_heads(tape, v, n_heads)?;
    let blocked: Vec<bool> = mask.to_dense().iter().map(|&a| !a).collect();
    let (ctx, attn) = attend_heads(tape, q3, k3, v3, Some(&blocked))?;
    let merged = merge_heads(tape, ctx)?;
    let out = tape.matmul(merged, params.wo)?;
    if zero_rows.is_empty() {
        return Ok((out, attn));
    }
    // Zero-update rows: overwrite with exact 0.0 after the output
    // projection, which also cuts their gradient paths.
    let mut fill = vec![false; mask.q_len * d];
    for &r in &zero_rows {
        fill[r * d..(r + 1) * d].fill(true);
    }
    Ok((tape.masked_fill(out, fill, E::ZERO)?, attn))
}

/// Full multi-head attention: project, rotate, attend under `mask`, merge,
/// output-project. Errors if any query row has no allowed key.
pub fn mha<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &MaskSpec,
    rope: Option<RopeSpec<'_>>,
) -> Result<Var> {
    Ok(mha_impl(tape, x_q, x_kv, params, n_heads, mask, rope, false)?.0)
}

/// Like [`mha`], but query rows with no allowed key yield an exactly-zero
/// output row instead of an error. Additive windowed fusion uses this for
/// text ahead of the first image.
pub fn mha_allowing_zero_rows<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &MaskSpec,
    rope: Option<RopeSpec<'_>>,
) -> Result<Var> {
    Ok(mha_impl(tape, x_q, x_kv, params, n_heads, mask, rope, true)?.0)
}

/// [`mha_allowing_zero_rows`] that also returns the post-softmax attention
/// tensor `[n_heads, q_len, k_len]` for analysis probes.
pub fn mha_recording<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &MaskSpec,
    rope: Option<RopeSpec<'_>>,
) -> Result<(Var, Var)> {
    mha_impl(tape, x_q, x_kv, params, n_heads, mask, rope, true)
}

fn block_blocked(b: &AttnBlock) -> Option<Vec<bool>> {
    let (rows, cols) = (b.query_span.len(), b.key_span.len());
    let mut any = false;
    let mut out = vec![false; rows * cols];
    for j in 0..rows {
        let allowed = b.allowed_in_row(j);
        for c in allowed..cols {
            out[j * cols + c] = true;
            any = true;
        }
    }
    if any { Some(out) } else { None }
}

/// Blockwise execution of windowed attention: one attention computation per
/// mask block, concatenated in query order, output projection applied once
/// at the end. Produces bitwise the same values as the dense path.
pub fn blockwise_attend<E: Scalar>(
    tape: &mut Tape<E>,
    x_q: Var,
    x_kv: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &MaskSpec,
    rope: Option<RopeSpec<'_>>,
) -> Result<Var> {
    let MaskKind::Blockwise(blocks) = &mask.kind else {
        return Err(Error::contract("blockwise_attend needs a blockwise mask"));
    };
    let blocks = blocks.clone();
    let sq = tape.shape(x_q).to_vec();
    if sq.len() != 2 || sq[0] != mask.q_len {
        return Err(Error::ShapeMismatch {
            op: "blockwise_attend",
            lhs: sq,
            rhs: vec![mask.q_len],
        });
    }
    let d = sq[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!("{d} dims cannot split into {n_heads} heads")));
    }

    let (q, k, v) = project_rope(tape, x_q, x_kv, params, d / n_heads, rope)?;

    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by_key(|&i| blocks[i].query_span.start);
    let mut parts = Vec::with_capacity(order.len());
    for bi in order {
        let b = &blocks[bi];
        let rows = b.query_span.len();
        if b.zero_update {
            parts.push(tape.constant(Tensor::zeros(vec![rows, d])));
            continue;
        }
        let qs = tape.slice_rows(q, b.query_span.start, rows)?;
        let ks = tape.slice_rows(k, b.key_span.start, b.key_span.len())?;
        let vs = tape.slice_rows(v, b.key_span.start, b.key_span.len())?;
        let q3 = split_heads(tape, qs, n_heads)?;
        let k3 = split_heads(tape, ks, n_heads)?;
        let v3 = split_heads(tape, vs, n_heads)?;
        let blocked = block_blocked(b);
        let (ctx, _) = attend_heads(tape, q3, k3, v3, blocked.as_deref())?;
        parts.push(merge_heads(tape, ctx)?);
    }
    let cat = if parts.is_empty() {
        // A stream whose windows hold no text has zero query rows.
        tape.constant(Tensor::zeros(vec![0, d]))
    } else {
        tape.concat_rows(&parts)?
    };
    debug_assert_eq!(tape.shape(cat), &[mask.q_len, d]);
    tape.matmul(cat, params.wo)
}
