//! Analysis instruments that run against frozen weights: inference-time
//! fusion-mask ablations, attention-mass aggregation over key groups, and
//! a finite-difference gradient checker.
//!
//! Every probe is a pure function of (weights, sequence, seed): ablation
//! key choices are drawn per layer per query from one seeded stream, so a
//! report is reproducible bit for bit.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{cross_entropy_at, ForwardOptions, FusionMode, LayerStack, MaskEdit};
use crate::rng::RngStream;
use crate::sequence::{MultimodalSequence, TokenId, TokenKind};
use crate::tensor::{Scalar, Tensor};

// ── Mask ablations ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationRule {
    /// Remove each text query's own key.
    MaskSelf,
    /// Remove one uniformly random text key strictly before the query.
    MaskRandomText,
    /// Remove one uniformly random key (text or image) strictly before the
    /// query.
    MaskRandomAny,
}

impl AblationRule {
    pub fn name(self) -> &'static str {
        match self {
            AblationRule::MaskSelf => "mask-self",
            AblationRule::MaskRandomText => "mask-random-text",
            AblationRule::MaskRandomAny => "mask-random-any",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rule: &'static str,
    pub seed: u64,
    /// (layer, query row, removed key column) triples actually applied.
    pub edits: Vec<(usize, usize, usize)>,
    /// (layer, query) slots where the rule had no eligible key; those rows
    /// were left unedited.
    pub unsatisfiable_rows: usize,
}

pub struct AblationOutcome<E: Scalar> {
    pub logits: Tensor<E>,
    pub report: AblationReport,
}

fn require_windowed_text_fusion(mode: FusionMode) -> Result<()> {
    match mode {
        FusionMode::CasaParallel | FusionMode::CasaPre | FusionMode::CasaReplace { .. } => Ok(()),
        other => Err(Error::config(format!(
            "mask ablation needs a mode whose fusion keys include text; {other} has none"
        ))),
    }
}

/// Remove exactly one key per text query per fusion layer according to
/// `rule`, then run the edited forward. Key choices are sampled
/// independently per (layer, query) from the seeded stream.
pub fn ablate_mask<E: Scalar>(
    stack: &LayerStack<E>,
    seq: &MultimodalSequence<E>,
    rule: AblationRule,
    seed: u64,
) -> Result<AblationOutcome<E>> {
    require_windowed_text_fusion(stack.cfg().mode)?;
    // A first pass (unrecorded, unedited) exposes the per-layer fusion
    // masks and the layout in fusion coordinates.
    let base = stack.forward(seq, &ForwardOptions { inference: true, ..Default::default() })?;
    let layout = &base.layout;
    let mut rng = RngStream::new(seed);
    let mut edits: Vec<MaskEdit> = Vec::new();
    let mut flat_edits = Vec::new();
    let mut unsatisfiable = 0usize;

    for (layer, mask) in &base.fusion_masks {
        let mut removals = Vec::new();
        for q in 0..mask.q_len {
            let self_col = layout.text_to_interleaved(q);
            let choice = match rule {
                AblationRule::MaskSelf => mask.allows(q, self_col).then_some(self_col),
                AblationRule::MaskRandomText => {
                    let eligible: Vec<usize> = (0..self_col)
                        .filter(|&c| {
                            mask.allows(q, c) && layout.kind(c) == TokenKind::Text
                        })
                        .collect();
                    // One draw per (layer, query) even when the pool is
                    // empty would skew later draws; draw only on demand.
                    if eligible.is_empty() {
                        None
                    } else {
                        Some(eligible[rng.below(eligible.len())])
                    }
                }
                AblationRule::MaskRandomAny => {
                    let eligible: Vec<usize> =
                        (0..self_col).filter(|&c| mask.allows(q, c)).collect();
                    if eligible.is_empty() {
                        None
                    } else {
                        Some(eligible[rng.below(eligible.len())])
                    }
                }
            };
            match choice {
                Some(col) => {
                    removals.push((q, col));
                    flat_edits.push((*layer, q, col));
                }
                None => unsatisfiable += 1,
            }
        }
        if !removals.is_empty() {
            edits.push(MaskEdit { layer: *layer, removals });
        }
    }

    let edited = stack.forward(
        seq,
        &ForwardOptions { inference: true, mask_edits: &edits, ..Default::default() },
    )?;
    Ok(AblationOutcome {
        logits: edited.logits_tensor(),
        report: AblationReport {
            rule: rule.name(),
            seed,
            edits: flat_edits,
            unsatisfiable_rows: unsatisfiable,
        },
    })
}

// ── Attention statistics ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AttentionStats {
    /// (group label, mean post-softmax mass), averaged over layers, heads,
    /// and text queries with at least one allowed key. Labels: "self",
    /// "vision_delimiters" (only when a delimiter id is given),
    /// "image[a..b)" per 16-wide window-local image bucket, "other_text".
    pub groups: Vec<(String, f64)>,
    /// Queries included in the average.
    pub n_queries: usize,
    /// Largest |Σ group masses − 1| over included (layer, head, query).
    pub max_partition_error: f64,
}

/// Mean fusion-attention mass per key group. Keys partition into: the
/// query's own row, vision-delimiter text tokens (when `vd_token` is
/// given), image tokens bucketed 16 window-local positions at a time, and
/// all other text.
pub fn attention_stats<E: Scalar>(
    stack: &LayerStack<E>,
    seq: &MultimodalSequence<E>,
    vd_token: Option<TokenId>,
) -> Result<AttentionStats> {
    require_windowed_text_fusion(stack.cfg().mode)?;
    let pass = stack.forward(
        seq,
        &ForwardOptions { inference: true, record_fusion_attn: true, ..Default::default() },
    )?;
    let layout = &pass.layout;
    let text_ids = layout.text_ids().to_vec();
    let max_bucket = layout
        .windows
        .iter()
        .map(|w| w.image_len())
        .max()
        .unwrap_or(0)
        .div_ceil(16);

    let mut labels: Vec<String> = vec!["self".into()];
    if vd_token.is_some() {
        labels.push("vision_delimiters".into());
    }
    for b in 0..max_bucket.max(1) {
        labels.push(format!("image[{}..{})", b * 16, (b + 1) * 16));
    }
    labels.push("other_text".into());
    let idx_of = |label: &str| labels.iter().position(|l| l == label).unwrap();

    let mut sums = vec![0.0f64; labels.len()];
    let mut n_rows = 0usize;
    let mut max_err = 0.0f64;

    for (block, attn) in &pass.fusion_attn {
        let mask = &pass.fusion_masks.iter().find(|(b, _)| b == block).unwrap().1;
        let zero_rows = mask.zero_update_rows();
        let shape = pass.tape.shape(*attn).to_vec();
        let (h, tq, tk) = (shape[0], shape[1], shape[2]);
        let val = pass.tape.value(*attn);
        for head in 0..h {
            for q in 0..tq {
                if zero_rows.contains(&q) {
                    continue;
                }
                let self_col = layout.text_to_interleaved(q);
                let row = &val[head * tq * tk + q * tk..head * tq * tk + (q + 1) * tk];
                let mut row_sum = 0.0;
                for (c, &m) in row.iter().enumerate() {
                    let m = m.to_f64();
                    row_sum += m;
                    let label_idx = if c == self_col {
                        idx_of("self")
                    } else {
                        match layout.kind(c) {
                            TokenKind::Image => {
                                // Bucket by position inside the key's own
                                // window, 16 at a time.
                                let w = layout.window_of(c);
                                let local =
                                    c - layout.image_to_interleaved(
                                        layout.window_image_flat_span(w).start,
                                    );
                                idx_of(&format!(
                                    "image[{}..{})",
                                    (local / 16) * 16,
                                    (local / 16 + 1) * 16
                                ))
                            }
                            TokenKind::Text => {
                                let id = text_ids[layout.flat_index(c)];
                                if vd_token == Some(id) {
                                    idx_of("vision_delimiters")
                                } else {
                                    idx_of("other_text")
                                }
                            }
                        }
                    };
                    sums[label_idx] += m;
                }
                max_err = max_err.max((row_sum - 1.0).abs());
                n_rows += 1;
            }
        }
    }
    if n_rows == 0 {
        return Err(Error::contract(
            "attention_stats found no text query with an allowed fusion key",
        ));
    }
    let groups = labels
        .into_iter()
        .zip(sums)
        .map(|(l, s)| (l, s / n_rows as f64))
        .collect();
    Ok(AttentionStats { groups, n_queries: n_rows, max_partition_error: max_err })
}

// ── Gradient checking ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    // Central differences at h ≈ 1e-5 carry ~1e-11 of absolute rounding
    // noise on a loss of order one, so a coordinate whose gradient sits far
    // below that can only be compared absolutely. Flooring the denominator
    // at 1e-3 turns a relative tolerance of 1e-4 into an absolute one of
    // 1e-7 there; a genuinely wrong backward (missing term, wrong sign,
    // stray factor) errs at the gradient's own scale and still registers.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences against the tape's backward pass, on
/// `coords_per_tensor` seeded random coordinates of every parameter (all
/// of them for small tensors). Any non-finite value fails hard, naming
/// the tensor.
pub fn grad_check(
    stack: &LayerStack<f64>,
    seq: &MultimodalSequence<f64>,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_of = |s: &LayerStack<f64>| -> Result<f64> {
        let mut pass = s.forward(seq, &ForwardOptions::default())?;
        let targets = next_token_targets(&pass);
        let loss = cross_entropy_at(&mut pass.tape, pass.logits, &targets)?;
        Ok(pass.tape.value(loss)[0])
    };

    // Analytic gradients, one backward pass.
    let mut pass = stack.forward(seq, &ForwardOptions::default())?;
    let targets = next_token_targets(&pass);
    let loss = cross_entropy_at(&mut pass.tape, pass.logits, &targets)?;
    let grads = pass.tape.backward(loss)?;
    let analytic: Vec<(String, Tensor<f64>)> = pass
        .params
        .iter()
        .map(|(name, var)| (name.clone(), grads.dense(*var)))
        .collect();

    let mut work = stack.clone();
    let mut rng = RngStream::new(seed);
    let mut entries = Vec::new();
    for (name, grad) in &analytic {
        let tensor = stack.param(name).unwrap().clone();
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            // Sample without replacement from a seeded permutation.
            let perm = rng.permutation(numel);
            perm[..coords_per_tensor].to_vec()
        };
        let mut max_err = 0.0f64;
        for &c in &coords {
            let orig = tensor.data()[c];
            let h = 1e-5 * orig.abs().max(1.0);
            let mut bump = |delta: f64| -> Result<f64> {
                let mut t = tensor.clone();
                t.data_mut()[c] = orig + delta;
                work.set_param(name, t)?;
                loss_of(&work)
            };
            let up = bump(h)?;
            let down = bump(-h)?;
            work.set_param(name, tensor.clone())?;
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[c];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite gradient while checking {name}[{c}]: fd={fd}, analytic={an}"
                )));
            }
            max_err = max_err.max(rel_err(fd, an));
        }
        entries.push(GradCheckEntry {
            tensor: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_err,
            pass: max_err <= tolerance,
        });
    }
    let pass_all = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport { tolerance, entries, pass: pass_all })
}

/// Each supervised position predicts the next flat text token (wrapping at
/// the end) — semantics don't matter for a derivative check, coverage does.
fn next_token_targets<E: Scalar>(pass: &crate::fusion::ForwardPass<E>) -> Vec<(usize, u32)> {
    let ids = pass.layout.text_ids();
    let t = ids.len();
    (0..t).map(|i| (i, ids[(i + 1) % t])).collect()
}
