//! Synthetic patch-color task: the smallest problem whose solution requires
//! every moving part of the lab — reading image tokens (color questions),
//! window segmentation (several images per sample), and text-to-text flow
//! across windows (recall questions).
//!
//! A sample interleaves `n_windows` colored patch grids with text. Each grid
//! is followed directly by one question token and its answer: either "what
//! color is patch p of this grid" or "repeat the answer given after grid j"
//! (j earlier in the sample). Answer tokens are supervised with next-token
//! loss at the question rows; everything else is context.
//!
//! Placing the question as the first text token after the image block puts
//! the two question types in tension inside the fusion layers: a color
//! question must pull patch values out of its window, while a recall
//! question sees the same image keys as pure distractors and its only
//! non-image key is itself. A trained model therefore parks recall-row
//! fusion mass on the query's own key, and knocking that key out is far more
//! damaging than removing a random one — the mechanism the mask-ablation
//! probes are meant to expose.

use std::path::PathBuf;

use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{cross_entropy_at, ForwardOptions, FusionConfig, LayerStack};
use crate::probes::{ablate_mask, AblationRule};
use crate::rng::RngStream;
use crate::sequence::{MultimodalSequence, TokenEvent, TokenId};
use crate::tensor::{Scalar, Tensor};

// Stream ids keep the crate's seeded subsystems decoupled: episode i draws
// from stream EPISODE_STREAM_BASE + i, far above the small fixed ids.
const INIT_STREAM: u64 = 1;
const CODE_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const EPISODE_STREAM_BASE: u64 = 1 << 32;

/// Upper bound on windows per sample; fixes the number of recall tokens in
/// the vocabulary so the token layout never depends on a particular episode.
pub const MAX_WINDOWS: usize = 4;

// ── task description ──

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Patches per grid side; one grid holds `grid*grid` image tokens.
    pub grid: usize,
    pub n_colors: usize,
    /// Width of the patch codes; must equal the model's `d_model`.
    pub d_model: usize,
    /// Grids (and color questions) per sample; one recall question follows.
    pub n_windows: usize,
    /// Seed for the fixed (position, color) code book, independent of the
    /// dataset seed so train and eval share the same image vocabulary.
    pub code_seed: u64,
}

impl TaskSpec {
    pub fn new(d_model: usize) -> Self {
        TaskSpec {
            grid: 4,
            n_colors: 8,
            d_model,
            n_windows: 2,
            code_seed: 11,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::config("grid must be positive"));
        }
        if self.n_colors < 2 {
            return Err(Error::config("need at least two colors"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model must be positive"));
        }
        if self.n_windows == 0 || self.n_windows > MAX_WINDOWS {
            return Err(Error::config(format!(
                "n_windows must be in 1..={MAX_WINDOWS}"
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> TaskVocab {
        TaskVocab {
            n_colors: self.n_colors,
            n_patches: self.n_patches(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size()
    }
}

/// Token layout: colors, then one question token per patch position, then one
/// recall token per possible window index, then delimiter and start tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskVocab {
    pub n_colors: usize,
    pub n_patches: usize,
}

impl TaskVocab {
    pub fn color(&self, c: u8) -> TokenId {
        debug_assert!((c as usize) < self.n_colors);
        c as TokenId
    }

    pub fn question_at(&self, pos: usize) -> TokenId {
        debug_assert!(pos < self.n_patches);
        (self.n_colors + pos) as TokenId
    }

    pub fn recall(&self, window: usize) -> TokenId {
        debug_assert!(window < MAX_WINDOWS);
        (self.n_colors + self.n_patches + window) as TokenId
    }

    /// Delimiter emitted right after every image block.
    pub fn vision_delim(&self) -> TokenId {
        (self.n_colors + self.n_patches + MAX_WINDOWS) as TokenId
    }

    pub fn bos(&self) -> TokenId {
        self.vision_delim() + 1
    }

    pub fn size(&self) -> usize {
        self.bos() as usize + 1
    }

    pub fn color_of_token(&self, id: TokenId) -> Option<u8> {
        ((id as usize) < self.n_colors).then_some(id as u8)
    }
}

// ── patch code book ──

/// Fixed embedding per (patch position, color) pair. The first `d_model`
/// codes are exactly orthonormal (Gram-Schmidt); past that capacity the codes
/// are independent unit-norm draws, which keeps them distinct and roughly
/// decorrelated.
pub struct CodeBook<E: Scalar> {
    codes: Tensor<E>,
    n_colors: usize,
    d: usize,
}

impl<E: Scalar> CodeBook<E> {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let n = spec.n_patches() * spec.n_colors;
        let mut rng = RngStream::with_stream(spec.code_seed, CODE_STREAM);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut tries = 0;
            loop {
                let mut r: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
                if i < d {
                    // Previous rows with index < d are already orthonormal,
                    // so a single projection pass suffices.
                    for prev in &rows {
                        let dot: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
                        for (x, p) in r.iter_mut().zip(prev) {
                            *x -= dot * p;
                        }
                    }
                }
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for x in &mut r {
                        *x /= norm;
                    }
                    rows.push(r);
                    break;
                }
                tries += 1;
                if tries > 64 {
                    return Err(Error::contract("code draw degenerated"));
                }
            }
        }
        let data: Vec<E> = rows
            .iter()
            .flat_map(|r| r.iter().map(|&x| E::from_f64(x)))
            .collect();
        Ok(CodeBook {
            codes: Tensor::new(vec![n, d], data)?,
            n_colors: spec.n_colors,
            d,
        })
    }

    pub fn code(&self, pos: usize, color: u8) -> &[E] {
        let row = pos * self.n_colors + color as usize;
        &self.codes.data()[row * self.d..(row + 1) * self.d]
    }

    /// One image token per patch, in row-major patch order.
    pub fn image_rows(&self, grid_colors: &[u8]) -> Vec<Vec<E>> {
        grid_colors
            .iter()
            .enumerate()
            .map(|(p, &c)| self.code(p, c).to_vec())
            .collect()
    }

    pub fn codes(&self) -> &Tensor<E> {
        &self.codes
    }
}

// ── episodes ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    ColorAt,
    Recall,
}

/// One supervised prediction: the model's logits at text row `logits_row`
/// (the question token) must put their argmax on `target` (the answer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    pub logits_row: usize,
    pub target: TokenId,
    pub kind: QuestionKind,
}

/// The question asked right after one window's image block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowQuestion {
    ColorAt { pos: usize },
    /// Repeat the answer that followed window `window`'s image.
    Recall { window: usize },
}

#[derive(Debug, Clone)]
pub struct Episode<E: Scalar> {
    pub seq: MultimodalSequence<E>,
    pub supervised: Vec<Supervision>,
    /// Color assignment per window, row-major over patches.
    pub grids: Vec<Vec<u8>>,
    /// One question per window, in window order.
    pub questions: Vec<WindowQuestion>,
}

impl<E: Scalar> Episode<E> {
    /// The answer stated after window `w`; recall chains terminate because a
    /// recall question always points at a strictly earlier window.
    pub fn answer_color(&self, w: usize) -> u8 {
        match self.questions[w] {
            WindowQuestion::ColorAt { pos } => self.grids[w][pos],
            WindowQuestion::Recall { window } => self.answer_color(window),
        }
    }
}

/// Deterministic dataset: episode `i` of a given seed is identical no matter
/// how many episodes are requested. Grid colors, queried positions, question
/// types and recall referents are drawn uniformly, so supervised labels are
/// balanced over colors and color questions over positions.
///
/// Sample shape (text tokens lowercase, one grid per window):
/// `bos vd [IMG q a vd] [IMG q a vd] … [IMG q a]`
/// The delimiter announces the next image block; each question is the first
/// text token of its window. Window 0 always asks a color question so every
/// recall question has an earlier answer to point at — and window indices
/// are unique, so the referent is unique.
pub fn generate_episodes<E: Scalar>(
    spec: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode<E>>> {
    spec.validate()?;
    let book = CodeBook::<E>::new(spec)?;
    let vocab = spec.vocab();
    let p = spec.n_patches();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = RngStream::with_stream(seed, EPISODE_STREAM_BASE + i as u64);
        let mut events: Vec<TokenEvent<E>> =
            vec![TokenEvent::Text(vocab.bos()), TokenEvent::Text(vocab.vision_delim())];
        let mut supervised = Vec::with_capacity(spec.n_windows);
        let mut grids: Vec<Vec<u8>> = Vec::with_capacity(spec.n_windows);
        let mut questions = Vec::with_capacity(spec.n_windows);
        let mut answers: Vec<u8> = Vec::with_capacity(spec.n_windows);
        let mut text_at = 2; // flat text index of the next text token
        for w in 0..spec.n_windows {
            // Each grid is mostly one color with uniform exceptions: a color
            // question still requires a genuine patch lookup, while the
            // grid's mean carries strong evidence for one specific color —
            // evidence a recall question sitting on the same window must
            // actively keep out of its answer. Exceptions are uniform over
            // the other colors, so the marginal label stays exactly uniform:
            // P(c) = (1/8)·(3/4) + (7/8)·(1/4)·(1/7) = 1/8 at 8 colors.
            let dominant = rng.below(spec.n_colors) as u8;
            let grid: Vec<u8> = (0..p)
                .map(|_| {
                    if rng.below(4) == 0 {
                        let r = rng.below(spec.n_colors - 1) as u8;
                        if r >= dominant {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        dominant
                    }
                })
                .collect();
            events.push(TokenEvent::image(book.image_rows(&grid)));
            let question = if w == 0 || rng.below(2) == 0 {
                WindowQuestion::ColorAt { pos: rng.below(p) }
            } else {
                WindowQuestion::Recall { window: rng.below(w) }
            };
            let (q_token, answer, kind) = match question {
                WindowQuestion::ColorAt { pos } => {
                    (vocab.question_at(pos), grid[pos], QuestionKind::ColorAt)
                }
                WindowQuestion::Recall { window } => {
                    (vocab.recall(window), answers[window], QuestionKind::Recall)
                }
            };
            events.push(TokenEvent::Text(q_token));
            events.push(TokenEvent::Text(vocab.color(answer)));
            supervised.push(Supervision {
                logits_row: text_at, // the question token's row
                target: vocab.color(answer),
                kind,
            });
            text_at += 2;
            if w + 1 < spec.n_windows {
                events.push(TokenEvent::Text(vocab.vision_delim()));
                text_at += 1;
            }
            grids.push(grid);
            questions.push(question);
            answers.push(answer);
        }
        out.push(Episode {
            seq: MultimodalSequence::single(events)?,
            supervised,
            grids,
            questions,
        });
    }
    Ok(out)
}

/// Concatenate episodes into one packed sequence with sample boundaries,
/// shifting supervised rows into packed flat-text coordinates.
pub fn pack_episodes<'a, E: Scalar>(
    episodes: impl IntoIterator<Item = &'a Episode<E>>,
) -> Result<(MultimodalSequence<E>, Vec<Supervision>)> {
    let mut events = Vec::new();
    let mut boundaries = Vec::new();
    let mut supervised = Vec::new();
    let mut text_offset = 0;
    for ep in episodes {
        boundaries.push(events.len());
        events.extend(ep.seq.events.iter().cloned());
        supervised.extend(ep.supervised.iter().map(|s| Supervision {
            logits_row: s.logits_row + text_offset,
            ..*s
        }));
        text_offset += ep.seq.text_token_count();
    }
    let seq = MultimodalSequence {
        events,
        sample_boundaries: boundaries,
    };
    seq.validate()?;
    Ok((seq, supervised))
}

// ── evaluation ──

const EVAL_PACK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub acc_color: f64,
    pub acc_recall: f64,
    pub n_color: usize,
    pub n_recall: usize,
}

impl EvalReport {
    /// Accuracy over all questions regardless of kind.
    pub fn combined_accuracy(&self) -> f64 {
        let n = self.n_color + self.n_recall;
        if n == 0 {
            return 0.0;
        }
        (self.acc_color * self.n_color as f64 + self.acc_recall * self.n_recall as f64) / n as f64
    }
}

/// Greedy decoding at the answer rows: a question counts as solved when the
/// argmax of its next-token logits is the answer token. `blind` zeroes every
/// image embedding, leaving text-only evidence.
pub fn evaluate<E: Scalar>(
    stack: &LayerStack<E>,
    episodes: &[Episode<E>],
    blind: bool,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::contract("evaluate needs at least one episode"));
    }
    let vocab_size = stack.cfg().vocab_size;
    let (mut loss_sum, mut n_total) = (0.0, 0usize);
    let (mut hit_color, mut n_color) = (0usize, 0usize);
    let (mut hit_recall, mut n_recall) = (0usize, 0usize);
    for chunk in episodes.chunks(EVAL_PACK) {
        let (seq, sup) = pack_episodes(chunk)?;
        let opts = ForwardOptions {
            inference: true,
            blind_images: blind,
            ..ForwardOptions::default()
        };
        let mut pass = stack.forward(&seq, &opts)?;
        let targets: Vec<(usize, u32)> = sup.iter().map(|s| (s.logits_row, s.target)).collect();
        let loss = cross_entropy_at(&mut pass.tape, pass.logits, &targets)?;
        loss_sum += pass.tape.value(loss)[0].to_f64() * targets.len() as f64;
        n_total += targets.len();
        let logits = pass.logits_tensor();
        for s in &sup {
            let row = &logits.data()[s.logits_row * vocab_size..(s.logits_row + 1) * vocab_size];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as TokenId)
                .unwrap();
            let hit = (argmax == s.target) as usize;
            match s.kind {
                QuestionKind::ColorAt => {
                    hit_color += hit;
                    n_color += 1;
                }
                QuestionKind::Recall => {
                    hit_recall += hit;
                    n_recall += 1;
                }
            }
        }
    }
    let frac = |hit: usize, n: usize| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    Ok(EvalReport {
        mean_loss: loss_sum / n_total as f64,
        acc_color: frac(hit_color, n_color),
        acc_recall: frac(hit_recall, n_recall),
        n_color,
        n_recall,
    })
}

/// [`evaluate`], but with one key per text query removed from every fusion
/// layer before each forward pass. The removal seed is reused verbatim for
/// every packed chunk, so one seed pins the entire evaluation.
pub fn evaluate_ablated<E: Scalar>(
    stack: &LayerStack<E>,
    episodes: &[Episode<E>],
    rule: AblationRule,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::contract("evaluate needs at least one episode"));
    }
    let vocab_size = stack.cfg().vocab_size;
    let (mut loss_sum, mut n_total) = (0.0, 0usize);
    let (mut hit_color, mut n_color) = (0usize, 0usize);
    let (mut hit_recall, mut n_recall) = (0usize, 0usize);
    for chunk in episodes.chunks(EVAL_PACK) {
        let (seq, sup) = pack_episodes(chunk)?;
        let out = ablate_mask(stack, &seq, rule, seed)?;
        for s in &sup {
            let row =
                &out.logits.data()[s.logits_row * vocab_size..(s.logits_row + 1) * vocab_size];
            let m = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x.to_f64() - m).exp()).sum::<f64>().ln();
            loss_sum += lse - row[s.target as usize].to_f64();
            n_total += 1;
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as TokenId)
                .unwrap();
            let hit = (argmax == s.target) as usize;
            match s.kind {
                QuestionKind::ColorAt => {
                    hit_color += hit;
                    n_color += 1;
                }
                QuestionKind::Recall => {
                    hit_recall += hit;
                    n_recall += 1;
                }
            }
        }
    }
    let frac = |hit: usize, n: usize| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    Ok(EvalReport {
        mean_loss: loss_sum / n_total as f64,
        acc_color: frac(hit_color, n_color),
        acc_recall: frac(hit_recall, n_recall),
        n_color,
        n_recall,
    })
}

// ── training ──

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Episodes packed into each optimization step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate ramp from 0 to `lr`.
    pub warmup: usize,
    /// Held-out metrics cadence; also the divergence-recovery granularity.
    pub eval_every: usize,
    pub seed: u64,
    /// Stop once held-out color accuracy reaches this value.
    pub stop_at_color_acc: Option<f64>,
    /// When set, the final weights (or the last good ones on divergence) are
    /// saved here in checkpoint format.
    pub checkpoint_base: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup: 100,
            eval_every: 100,
            seed: 0,
            stop_at_color_acc: None,
            checkpoint_base: None,
        }
    }
}

/// One row of the metrics trace. Loss and accuracies are measured on the
/// held-out split, so with a zero learning rate every row repeats exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub acc_color: f64,
    pub acc_recall: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,acc_color,acc_recall\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.4}\n",
            r.step, r.loss, r.acc_color, r.acc_recall
        ));
    }
    out
}

pub struct TrainOutcome<E: Scalar> {
    pub stack: LayerStack<E>,
    pub metrics: Vec<MetricsRow>,
    pub diverged: bool,
    pub steps_run: usize,
}

/// Initialize a fresh model from `cfg` (seeded by `tcfg.seed`) and train it.
pub fn train<E: Scalar>(
    cfg: &FusionConfig,
    train_eps: &[Episode<E>],
    eval_eps: &[Episode<E>],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<E>> {
    let mut rng = RngStream::with_stream(tcfg.seed, INIT_STREAM);
    let stack = LayerStack::init(cfg.clone(), &mut rng)?;
    train_from(stack, train_eps, eval_eps, tcfg)
}

/// Adam with decoupled f64 moments and linear warmup. Supervision is
/// restricted to answer rows; all other positions only shape the context.
/// A non-finite training loss aborts the run and rolls the weights back to
/// the last evaluated (finite-loss) snapshot.
pub fn train_from<E: Scalar>(
    mut stack: LayerStack<E>,
    train_eps: &[Episode<E>],
    eval_eps: &[Episode<E>],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<E>> {
    if train_eps.is_empty() || eval_eps.is_empty() {
        return Err(Error::contract("training needs train and eval episodes"));
    }
    if tcfg.batch == 0 || tcfg.eval_every == 0 {
        return Err(Error::config("batch and eval_every must be positive"));
    }
    let mut moments: Vec<(Vec<f64>, Vec<f64>)> = stack
        .params()
        .map(|(_, _, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
        .collect();
    let mut shuffle = RngStream::with_stream(tcfg.seed, SHUFFLE_STREAM);
    let mut order = shuffle.permutation(train_eps.len());
    let mut cursor = 0;
    let mut metrics = Vec::new();
    let mut last_good = stack.clone();
    let mut diverged = false;
    let mut steps_run = 0;

    for step in 1..=tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch);
        for _ in 0..tcfg.batch {
            if cursor == order.len() {
                order = shuffle.permutation(train_eps.len());
                cursor = 0;
            }
            batch.push(&train_eps[order[cursor]]);
            cursor += 1;
        }
        let (seq, sup) = pack_episodes(batch.iter().copied())?;
        let mut pass = stack.forward(&seq, &ForwardOptions::default())?;
        let targets: Vec<(usize, u32)> = sup.iter().map(|s| (s.logits_row, s.target)).collect();
        let loss_var = cross_entropy_at(&mut pass.tape, pass.logits, &targets)?;
        let loss = pass.tape.value(loss_var)[0].to_f64();
        // The loss path renormalizes degenerate rows (an all-non-finite row
        // log-softmaxes to the uniform distribution), so a blown-up model can
        // still report a finite loss; inspect the raw logits as well.
        let healthy =
            loss.is_finite() && pass.tape.value(pass.logits).iter().all(|x| x.is_finite());
        if !healthy {
            stack = last_good.clone();
            diverged = true;
            break;
        }
        let grads = pass.tape.backward(loss_var)?;
        let grad_of: Vec<Tensor<E>> = stack
            .params()
            .map(|(name, _, _)| {
                let var = pass
                    .param_var(name)
                    .expect("forward binds every stack parameter");
                grads.dense(var)
            })
            .collect();
        let lr_t = tcfg.lr * ((step as f64) / (tcfg.warmup.max(1) as f64)).min(1.0);
        let bc1 = 1.0 - tcfg.beta1.powi(step as i32);
        let bc2 = 1.0 - tcfg.beta2.powi(step as i32);
        stack.update_params(|i, _, t| {
            let (m, v) = &mut moments[i];
            let g = grad_of[i].data();
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64();
                m[j] = tcfg.beta1 * m[j] + (1.0 - tcfg.beta1) * gj;
                v[j] = tcfg.beta2 * v[j] + (1.0 - tcfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + tcfg.eps);
                *w = E::from_f64(w.to_f64() - lr_t * update);
            }
        });
        steps_run = step;

        if step % tcfg.eval_every == 0 || step == tcfg.steps {
            let report = evaluate(&stack, eval_eps, false)?;
            metrics.push(MetricsRow {
                step,
                loss: report.mean_loss,
                acc_color: report.acc_color,
                acc_recall: report.acc_recall,
            });
            last_good = stack.clone();
            if let Some(th) = tcfg.stop_at_color_acc {
                if report.acc_color >= th {
                    break;
                }
            }
        }
    }

    if let Some(base) = &tcfg.checkpoint_base {
        checkpoint::save(&stack, base)?;
    }
    Ok(TrainOutcome {
        stack,
        metrics,
        diverged,
        steps_run,
    })
}

// ── tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::sequence::segment_windows;

    fn tiny_spec(d: usize) -> TaskSpec {
        TaskSpec {
            grid: 2,
            n_colors: 4,
            d_model: d,
            n_windows: 2,
            code_seed: 11,
        }
    }

    fn tiny_cfg(spec: &TaskSpec, mode: FusionMode) -> FusionConfig {
        FusionConfig::new(spec.d_model, 2, 2, spec.vocab_size(), mode)
    }

    #[test]
    fn codes_are_unit_norm_and_orthogonal_up_to_capacity() {
        let spec = TaskSpec {
            grid: 4,
            n_colors: 8,
            d_model: 32,
            n_windows: 2,
            code_seed: 11,
        };
        let book = CodeBook::<f64>::new(&spec).unwrap();
        let codes = book.codes();
        let n = codes.shape()[0];
        let d = codes.shape()[1];
        assert_eq!(n, 128);
        let row = |i: usize| &codes.data()[i * d..(i + 1) * d];
        for i in 0..n {
            let norm: f64 = row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
        }
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9, "rows {j},{i} dot {dot}");
            }
        }
        // Same (pos, color) pair always maps to the same row.
        let again = CodeBook::<f64>::new(&spec).unwrap();
        assert_eq!(codes.max_abs_diff(again.codes()), 0.0);
    }

    #[test]
    fn episodes_are_structurally_sound() {
        let spec = TaskSpec {
            n_windows: 3,
            ..tiny_spec(16)
        };
        let vocab = spec.vocab();
        let eps = generate_episodes::<f64>(&spec, 48, 9).unwrap();
        let mut saw_recall = false;
        for ep in &eps {
            assert_eq!(ep.supervised.len(), spec.n_windows);
            let layout = segment_windows(&ep.seq).unwrap();
            // [bos, vd] preamble plus one window per image.
            assert_eq!(layout.windows.len(), spec.n_windows + 1);
            assert!(layout.windows[0].is_preamble());
            let ids = layout.text_ids().to_vec();
            assert_eq!(ep.questions.len(), spec.n_windows);
            assert!(matches!(ep.questions[0], WindowQuestion::ColorAt { .. }));
            for (w, s) in ep.supervised.iter().enumerate() {
                // The supervised row holds the question token itself, as the
                // first text token of its window, and the target is the color
                // the generator placed there.
                match ep.questions[w] {
                    WindowQuestion::ColorAt { pos } => {
                        assert_eq!(s.kind, QuestionKind::ColorAt);
                        assert_eq!(ids[s.logits_row], vocab.question_at(pos));
                    }
                    WindowQuestion::Recall { window } => {
                        assert_eq!(s.kind, QuestionKind::Recall);
                        assert_eq!(ids[s.logits_row], vocab.recall(window));
                        // The referent is strictly earlier and its answer is
                        // replayed verbatim.
                        assert!(window < w);
                        let referent_row = ep.supervised[window].logits_row + 1;
                        assert!(referent_row < s.logits_row);
                        assert_eq!(s.target, ep.supervised[window].target);
                        saw_recall = true;
                    }
                }
                assert_eq!(s.target, vocab.color(ep.answer_color(w)));
                // The answer token follows its question row; the question is
                // the first text token of window w+1 (after the preamble).
                assert_eq!(ids[s.logits_row + 1], s.target);
                let span = layout.window_text_flat_span(w + 1);
                assert_eq!(span.start, s.logits_row);
            }
        }
        assert!(saw_recall);
        // Determinism and prefix stability: episode i doesn't depend on n.
        let fewer = generate_episodes::<f64>(&spec, 5, 9).unwrap();
        for (a, b) in fewer.iter().zip(&eps) {
            assert_eq!(a.grids, b.grids);
            assert_eq!(a.questions, b.questions);
        }
    }

    #[test]
    fn label_distribution_is_balanced() {
        let spec = TaskSpec {
            grid: 4,
            n_colors: 8,
            d_model: 8,
            n_windows: 2,
            code_seed: 11,
        };
        let eps = generate_episodes::<f32>(&spec, 10_000, 3).unwrap();
        let mut label_counts = vec![0usize; spec.n_colors];
        let mut pos_counts = vec![0usize; spec.n_patches()];
        let mut n_recall = 0usize;
        let mut total = 0usize;
        for ep in &eps {
            for s in &ep.supervised {
                label_counts[s.target as usize] += 1;
                total += 1;
            }
            for q in &ep.questions {
                match q {
                    WindowQuestion::ColorAt { pos } => pos_counts[*pos] += 1,
                    WindowQuestion::Recall { .. } => n_recall += 1,
                }
            }
        }
        for (c, &k) in label_counts.iter().enumerate() {
            let frac = k as f64 / total as f64;
            let want = 1.0 / spec.n_colors as f64;
            assert!((frac - want).abs() < 0.02, "color {c} frac {frac}");
        }
        let qtotal: usize = pos_counts.iter().sum();
        for (p, &k) in pos_counts.iter().enumerate() {
            let frac = k as f64 / qtotal as f64;
            let want = 1.0 / spec.n_patches() as f64;
            assert!((frac - want).abs() < 0.02, "pos {p} frac {frac}");
        }
        // Windows past the first split evenly between question types.
        let later = (eps.len() * (spec.n_windows - 1)) as f64;
        assert!((n_recall as f64 / later - 0.5).abs() < 0.02);
    }

    #[test]
    fn packing_shifts_supervised_rows_into_place() {
        let spec = tiny_spec(16);
        let vocab = spec.vocab();
        let eps = generate_episodes::<f64>(&spec, 3, 4).unwrap();
        let (seq, sup) = pack_episodes(&eps).unwrap();
        assert_eq!(seq.n_samples(), 3);
        assert_eq!(sup.len(), 3 * spec.n_windows);
        let layout = segment_windows(&seq).unwrap();
        let ids = layout.text_ids().to_vec();
        for s in &sup {
            assert!(ids[s.logits_row] >= vocab.question_at(0));
            assert_eq!(ids[s.logits_row + 1], s.target);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_heldout_metrics() {
        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let train_eps = generate_episodes::<f32>(&spec, 8, 1).unwrap();
        let eval_eps = generate_episodes::<f32>(&spec, 4, 2).unwrap();
        let tcfg = TrainConfig {
            steps: 15,
            batch: 2,
            lr: 0.0,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let mut rng = RngStream::with_stream(tcfg.seed, INIT_STREAM);
        let init = LayerStack::<f32>::init(cfg, &mut rng).unwrap();
        let out = train_from(init.clone(), &train_eps, &eval_eps, &tcfg).unwrap();
        assert_eq!(out.metrics.len(), 3);
        for row in &out.metrics[1..] {
            assert_eq!(row.loss, out.metrics[0].loss);
            assert_eq!(row.acc_color, out.metrics[0].acc_color);
            assert_eq!(row.acc_recall, out.metrics[0].acc_recall);
        }
        for (name, _, t) in out.stack.params() {
            assert_eq!(t.max_abs_diff(init.param(name).unwrap()), 0.0);
        }
    }

    #[test]
    fn same_seed_reproduces_identical_metrics() {
        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let train_eps = generate_episodes::<f32>(&spec, 12, 1).unwrap();
        let eval_eps = generate_episodes::<f32>(&spec, 4, 2).unwrap();
        let tcfg = TrainConfig {
            steps: 30,
            batch: 3,
            eval_every: 10,
            warmup: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train::<f32>(&cfg, &train_eps, &eval_eps, &tcfg).unwrap();
        let b = train::<f32>(&cfg, &train_eps, &eval_eps, &tcfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(!a.metrics.is_empty());
        for (name, _, t) in a.stack.params() {
            assert_eq!(t.max_abs_diff(b.stack.param(name).unwrap()), 0.0);
        }
    }

    #[test]
    fn divergent_loss_rolls_back_to_last_good_weights() {
        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let train_eps = generate_episodes::<f32>(&spec, 4, 1).unwrap();
        let eval_eps = generate_episodes::<f32>(&spec, 2, 2).unwrap();
        let mut rng = RngStream::with_stream(0, INIT_STREAM);
        let mut poisoned = LayerStack::<f32>::init(cfg, &mut rng).unwrap();
        let shape = poisoned.param("head").unwrap().shape().to_vec();
        poisoned
            .set_param("head", Tensor::full(shape, f32::NAN))
            .unwrap();
        let tcfg = TrainConfig {
            steps: 10,
            batch: 2,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let out = train_from(poisoned.clone(), &train_eps, &eval_eps, &tcfg).unwrap();
        assert!(out.diverged);
        assert_eq!(out.steps_run, 0);
        assert!(out.metrics.is_empty());
        // No finite-loss snapshot existed, so the rollback target is the
        // starting state itself.
        for (name, _, t) in out.stack.params() {
            let p = poisoned.param(name).unwrap();
            if name == "head" {
                assert!(t.data().iter().all(|x| x.is_nan()));
            } else {
                assert_eq!(t.max_abs_diff(p), 0.0);
            }
        }
    }

    #[test]
    fn single_episode_is_memorized_to_perfect_accuracy() {
        let spec = tiny_spec(32);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let eps = generate_episodes::<f32>(&spec, 1, 2).unwrap();
        // The memorization target must exercise both question types.
        assert!(eps[0]
            .questions
            .iter()
            .any(|q| matches!(q, WindowQuestion::Recall { .. })));
        let tcfg = TrainConfig {
            steps: 800,
            batch: 1,
            warmup: 20,
            eval_every: 25,
            stop_at_color_acc: None,
            ..TrainConfig::default()
        };
        let out = train::<f32>(&cfg, &eps, &eps, &tcfg).unwrap();
        assert!(!out.diverged);
        let last = out.metrics.last().unwrap();
        assert_eq!(last.acc_color, 1.0, "metrics: {:?}", out.metrics);
        assert_eq!(last.acc_recall, 1.0, "metrics: {:?}", out.metrics);
    }

    #[test]
    fn small_model_learns_beyond_chance_quickly() {
        let spec = TaskSpec {
            grid: 2,
            n_colors: 4,
            d_model: 32,
            n_windows: 2,
            code_seed: 11,
        };
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let train_eps = generate_episodes::<f32>(&spec, 64, 1).unwrap();
        let eval_eps = generate_episodes::<f32>(&spec, 32, 2).unwrap();
        let tcfg = TrainConfig {
            steps: 400,
            batch: 8,
            warmup: 50,
            eval_every: 100,
            stop_at_color_acc: Some(0.8),
            ..TrainConfig::default()
        };
        let out = train::<f32>(&cfg, &train_eps, &eval_eps, &tcfg).unwrap();
        assert!(!out.diverged);
        // Chance is 1/4; the model must be clearly past it within the budget.
        let last = out.metrics.last().unwrap();
        assert!(
            last.acc_color >= 0.5,
            "acc_color {} metrics {:?}",
            last.acc_color,
            out.metrics
        );
    }

    #[test]
    fn checkpoint_is_written_when_requested() {
        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CrossAttn { gated: true });
        let eps = generate_episodes::<f32>(&spec, 2, 1).unwrap();
        let base = std::env::temp_dir().join(format!("toytask-ckpt-{}", std::process::id()));
        let tcfg = TrainConfig {
            steps: 3,
            batch: 1,
            eval_every: 3,
            checkpoint_base: Some(base.clone()),
            ..TrainConfig::default()
        };
        let out = train::<f32>(&cfg, &eps, &eps, &tcfg).unwrap();
        let loaded = checkpoint::load::<f32>(&base).unwrap();
        for (name, _, t) in out.stack.params() {
            assert_eq!(t.max_abs_diff(loaded.param(name).unwrap()), 0.0);
        }
        let _ = std::fs::remove_file(base.with_extension("bin"));
        let _ = std::fs::remove_file(base.with_extension("json"));
    }

    #[test]
    fn metrics_csv_has_pinned_schema() {
        let rows = vec![
            MetricsRow {
                step: 100,
                loss: 1.25,
                acc_color: 0.5,
                acc_recall: 0.25,
            },
            MetricsRow {
                step: 200,
                loss: 0.5,
                acc_color: 0.875,
                acc_recall: 0.5,
            },
        ];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,loss,acc_color,acc_recall"));
        assert_eq!(lines.next(), Some("100,1.250000,0.5000,0.2500"));
        assert_eq!(lines.next(), Some("200,0.500000,0.8750,0.5000"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn rejects_bad_specs_and_empty_datasets() {
        let mut spec = tiny_spec(16);
        spec.n_windows = MAX_WINDOWS + 1;
        assert!(generate_episodes::<f64>(&spec, 1, 0).is_err());
        spec.n_windows = 2;
        spec.n_colors = 1;
        assert!(CodeBook::<f64>::new(&spec).is_err());

        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let eps = generate_episodes::<f32>(&spec, 2, 0).unwrap();
        assert!(train::<f32>(&cfg, &eps, &[], &TrainConfig::default()).is_err());
        assert!(train::<f32>(&cfg, &[], &eps, &TrainConfig::default()).is_err());
        let mut rng = RngStream::new(0);
        let stack = LayerStack::<f32>::init(cfg, &mut rng).unwrap();
        assert!(evaluate(&stack, &[], false).is_err());
    }

    #[test]
    fn ablated_evaluation_is_seeded_and_finite() {
        let spec = tiny_spec(16);
        let cfg = tiny_cfg(&spec, FusionMode::CasaParallel);
        let eps = generate_episodes::<f64>(&spec, 20, 5).unwrap();
        let mut rng = RngStream::new(1);
        let stack = LayerStack::<f64>::init(cfg, &mut rng).unwrap();

        let a = evaluate_ablated(&stack, &eps, AblationRule::MaskSelf, 99).unwrap();
        let b = evaluate_ablated(&stack, &eps, AblationRule::MaskSelf, 99).unwrap();
        assert_eq!(a, b, "same rule and seed must reproduce the report");
        assert!(a.mean_loss.is_finite());
        assert!((0.0..=1.0).contains(&a.combined_accuracy()));
        assert_eq!(a.n_color + a.n_recall, eps.iter().map(|e| e.supervised.len()).sum::<usize>());

        let c = evaluate_ablated(&stack, &eps, AblationRule::MaskRandomText, 99).unwrap();
        assert!(
            (a.mean_loss - c.mean_loss).abs() > 0.0,
            "different removal rules should leave different fingerprints"
        );
    }
}
