//! Interleaved text/image event streams and their window structure.
//!
//! A sample is a list of events: single text tokens and image blocks (each
//! block a [n, d_model] embedding matrix from a stand-in vision encoder).
//! Windows are delimited by image insertions: every image block starts a new
//! window unless it directly follows another image block, in which case the
//! two merge; text joins the window of the most recent image. Text before
//! any image forms an imageless preamble window. Windows never cross sample
//! boundaries, so a packed sequence behaves like a batch of independent
//! conversations.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type TokenId = u32;

#[derive(Debug, Clone)]
pub enum TokenEvent<E: Scalar> {
    Text(TokenId),
    /// Contiguous run of image tokens with their embeddings, [n_tokens, d].
    ImageBlock { embeddings: Tensor<E> },
}

impl<E: Scalar> TokenEvent<E> {
    pub fn image<I: IntoIterator<Item = Vec<E>>>(rows: I) -> Self {
        let rows: Vec<Vec<E>> = rows.into_iter().collect();
        TokenEvent::ImageBlock {
            embeddings: Tensor::from_rows(&rows),
        }
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            TokenEvent::Text(_) => 1,
            TokenEvent::ImageBlock { embeddings } => embeddings.shape()[0],
        }
    }
}

/// One or more samples laid head-to-tail. `sample_boundaries[i]` is the
/// event index where sample i starts; boundaries start at 0 and strictly
/// increase.
#[derive(Debug, Clone)]
pub struct MultimodalSequence<E: Scalar> {
    pub events: Vec<TokenEvent<E>>,
    pub sample_boundaries: Vec<usize>,
}

impl<E: Scalar> MultimodalSequence<E> {
    /// Single-sample sequence.
    pub fn single(events: Vec<TokenEvent<E>>) -> Result<Self> {
        let seq = MultimodalSequence {
            events,
            sample_boundaries: vec![0],
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::validation("sequence has no events"));
        }
        if self.sample_boundaries.first() != Some(&0) {
            return Err(Error::validation("sample_boundaries must start at 0"));
        }
        for w in self.sample_boundaries.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(
                    "sample_boundaries must be strictly increasing",
                ));
            }
        }
        if let Some(&last) = self.sample_boundaries.last() {
            if last >= self.events.len() {
                return Err(Error::validation(
                    "sample boundary points past the last event",
                ));
            }
        }
        for (i, ev) in self.events.iter().enumerate() {
            if let TokenEvent::ImageBlock { embeddings } = ev {
                if embeddings.shape().len() != 2 || embeddings.shape()[0] == 0 {
                    return Err(Error::validation(format!(
                        "event {i}: image block must be [n>0, d], got {:?}",
                        embeddings.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.sample_boundaries.len()
    }

    /// Event range of sample `s`.
    pub fn sample_events(&self, s: usize) -> Range<usize> {
        let start = self.sample_boundaries[s];
        let end = self
            .sample_boundaries
            .get(s + 1)
            .copied()
            .unwrap_or(self.events.len());
        start..end
    }

    /// Extract sample `s` as a standalone single-sample sequence.
    pub fn extract_sample(&self, s: usize) -> MultimodalSequence<E> {
        MultimodalSequence {
            events: self.events[self.sample_events(s)].to_vec(),
            sample_boundaries: vec![0],
        }
    }

    pub fn text_token_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TokenEvent::Text(_)))
            .count()
    }

    pub fn image_token_count(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                TokenEvent::Text(_) => 0,
                TokenEvent::ImageBlock { embeddings } => embeddings.shape()[0],
            })
            .sum()
    }

    /// All image-block embedding matrices stacked in event order, [N, d].
    /// `d_fallback` sizes the empty matrix when the sequence has no images.
    pub fn image_matrix(&self, d_fallback: usize) -> Tensor<E> {
        let mut d = d_fallback;
        let mut rows = Vec::new();
        for ev in &self.events {
            if let TokenEvent::ImageBlock { embeddings } = ev {
                d = embeddings.shape()[1];
                for r in 0..embeddings.shape()[0] {
                    rows.push(embeddings.row(r).to_vec());
                }
            }
        }
        if rows.is_empty() {
            Tensor::zeros(vec![0, d])
        } else {
            Tensor::from_rows(&rows)
        }
    }
}

// ── Window layout ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Image,
}

/// One attention window, in interleaved token coordinates (0..T+N).
/// `image_span` is empty for a preamble window; `text_span` may be empty for
/// a trailing image with no caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub sample: usize,
    pub image_span: Range<usize>,
    pub text_span: Range<usize>,
}

impl Window {
    pub fn image_len(&self) -> usize {
        self.image_span.len()
    }
    pub fn text_len(&self) -> usize {
        self.text_span.len()
    }
    pub fn token_count(&self) -> usize {
        self.image_len() + self.text_len()
    }
    pub fn is_preamble(&self) -> bool {
        self.image_span.is_empty()
    }
}

/// Token-level view of a sequence: window boundaries plus the coordinate
/// maps between interleaved positions, flat text positions, and flat image
/// positions that masks and attention need.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub windows: Vec<Window>,
    pub n_tokens: usize,
    pub flat_text_len: usize,
    pub flat_image_len: usize,
    /// Per interleaved position: token kind.
    kinds: Vec<TokenKind>,
    /// Per interleaved position: index into the flat text (or image) order.
    flat_index: Vec<usize>,
    /// Per interleaved position: owning window.
    window_of: Vec<usize>,
    /// Per interleaved position: owning sample.
    sample_of: Vec<usize>,
    /// Per flat text position: interleaved position.
    text_to_interleaved: Vec<usize>,
    /// Per flat image position: interleaved position.
    image_to_interleaved: Vec<usize>,
    /// Text token ids in flat text order.
    text_ids: Vec<TokenId>,
}

impl WindowLayout {
    pub fn kind(&self, pos: usize) -> TokenKind {
        self.kinds[pos]
    }
    pub fn flat_index(&self, pos: usize) -> usize {
        self.flat_index[pos]
    }
    pub fn window_of(&self, pos: usize) -> usize {
        self.window_of[pos]
    }
    pub fn sample_of(&self, pos: usize) -> usize {
        self.sample_of[pos]
    }
    pub fn text_to_interleaved(&self, t: usize) -> usize {
        self.text_to_interleaved[t]
    }
    pub fn image_to_interleaved(&self, i: usize) -> usize {
        self.image_to_interleaved[i]
    }
    pub fn text_ids(&self) -> &[TokenId] {
        &self.text_ids
    }

    /// Window owning flat text position `t`.
    pub fn window_of_text(&self, t: usize) -> usize {
        self.window_of[self.text_to_interleaved[t]]
    }

    pub fn sample_of_text(&self, t: usize) -> usize {
        self.sample_of[self.text_to_interleaved[t]]
    }

    /// Flat-text span of window `w` (text tokens of one window are
    /// contiguous in flat text order).
    pub fn window_text_flat_span(&self, w: usize) -> Range<usize> {
        let win = &self.windows[w];
        if win.text_span.is_empty() {
            let start = self.flat_text_len_before(win.text_span.start);
            return start..start;
        }
        let start = self.flat_index[win.text_span.start];
        start..start + win.text_len()
    }

    /// Flat-image span of window `w`.
    pub fn window_image_flat_span(&self, w: usize) -> Range<usize> {
        let win = &self.windows[w];
        if win.image_span.is_empty() {
            return 0..0;
        }
        let start = self.flat_index[win.image_span.start];
        start..start + win.image_len()
    }

    fn flat_text_len_before(&self, pos: usize) -> usize {
        self.kinds[..pos]
            .iter()
            .filter(|k| **k == TokenKind::Text)
            .count()
    }

    /// Position of each token inside its own window: the window's image
    /// tokens count 0..n_img, its text continues at n_img, n_img+1, …
    /// A preamble window's text starts at 0. Returned per interleaved token.
    pub fn window_local_positions(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.n_tokens];
        for win in &self.windows {
            let mut p = 0;
            for pos in win.image_span.clone() {
                out[pos] = p;
                p += 1;
            }
            for pos in win.text_span.clone() {
                out[pos] = p;
                p += 1;
            }
        }
        out
    }

    /// Window-local position per flat text token.
    pub fn text_window_positions(&self) -> Vec<usize> {
        let local = self.window_local_positions();
        (0..self.flat_text_len)
            .map(|t| local[self.text_to_interleaved[t]])
            .collect()
    }

    /// Per flat text token: its index among its own sample's text tokens.
    /// These are the positions the text-only attention layers rotate by, so
    /// a packed sequence matches the same samples run separately.
    pub fn sample_text_positions(&self) -> Vec<usize> {
        let mut counters = vec![0usize; self.max_sample() + 1];
        let mut out = Vec::with_capacity(self.flat_text_len);
        for t in 0..self.flat_text_len {
            let s = self.sample_of_text(t);
            out.push(counters[s]);
            counters[s] += 1;
        }
        out
    }

    /// Per interleaved token: its index within its own sample's stream.
    /// Token-insertion mode rotates by these.
    pub fn sample_stream_positions(&self) -> Vec<usize> {
        let mut counters = vec![0usize; self.max_sample() + 1];
        let mut out = Vec::with_capacity(self.n_tokens);
        for pos in 0..self.n_tokens {
            let s = self.sample_of[pos];
            out.push(counters[s]);
            counters[s] += 1;
        }
        out
    }

    fn max_sample(&self) -> usize {
        self.sample_of.iter().copied().max().unwrap_or(0)
    }

    /// Largest window, in tokens, across the layout.
    pub fn largest_window_tokens(&self) -> usize {
        self.windows.iter().map(|w| w.token_count()).max().unwrap_or(0)
    }
}

/// Split a sequence into attention windows. See the module docs for the
/// merge and preamble rules.
pub fn segment_windows<E: Scalar>(seq: &MultimodalSequence<E>) -> Result<WindowLayout> {
    seq.validate()?;
    let mut windows: Vec<Window> = Vec::new();
    let mut kinds = Vec::new();
    let mut flat_index = Vec::new();
    let mut window_of = Vec::new();
    let mut sample_of = Vec::new();
    let mut text_to_interleaved = Vec::new();
    let mut image_to_interleaved = Vec::new();
    let mut text_ids = Vec::new();

    let mut pos = 0usize; // interleaved cursor
    for s in 0..seq.n_samples() {
        let mut open: Option<usize> = None; // index into `windows`
        for ev_idx in seq.sample_events(s) {
            match &seq.events[ev_idx] {
                TokenEvent::Text(id) => {
                    let w = match open {
                        Some(w) => w,
                        None => {
                            // Text before any image: open a preamble window.
                            windows.push(Window {
                                sample: s,
                                image_span: pos..pos,
                                text_span: pos..pos,
                            });
                            let w = windows.len() - 1;
                            open = Some(w);
                            w
                        }
                    };
                    if windows[w].text_span.is_empty() {
                        windows[w].text_span = pos..pos;
                    }
                    windows[w].text_span.end = pos + 1;
                    kinds.push(TokenKind::Text);
                    flat_index.push(text_to_interleaved.len());
                    text_to_interleaved.push(pos);
                    text_ids.push(*id);
                    window_of.push(w);
                    sample_of.push(s);
                    pos += 1;
                }
                TokenEvent::ImageBlock { embeddings } => {
                    let n = embeddings.shape()[0];
                    // Merge with the open window only if it ends in images
                    // (an image directly following another image block).
                    let merge = matches!(
                        open,
                        Some(w) if !windows[w].image_span.is_empty()
                            && windows[w].text_span.is_empty()
                    );
                    let w = if merge {
                        let w = open.unwrap();
                        windows[w].image_span.end = pos + n;
                        w
                    } else {
                        windows.push(Window {
                            sample: s,
                            image_span: pos..pos + n,
                            text_span: pos + n..pos + n,
                        });
                        let w = windows.len() - 1;
                        open = Some(w);
                        w
                    };
                    // Text of this window, if any, starts after its images.
                    windows[w].text_span = pos + n..pos + n;
                    for _ in 0..n {
                        kinds.push(TokenKind::Image);
                        flat_index.push(image_to_interleaved.len());
                        image_to_interleaved.push(pos);
                        window_of.push(w);
                        sample_of.push(s);
                        pos += 1;
                    }
                }
            }
        }
    }

    let layout = WindowLayout {
        n_tokens: pos,
        flat_text_len: text_to_interleaved.len(),
        flat_image_len: image_to_interleaved.len(),
        windows,
        kinds,
        flat_index,
        window_of,
        sample_of,
        text_to_interleaved,
        image_to_interleaved,
        text_ids,
    };
    debug_assert_layout(&layout);
    Ok(layout)
}

fn debug_assert_layout(layout: &WindowLayout) {
    #[cfg(debug_assertions)]
    {
        // Windows tile the token range back-to-back within each sample, and
        // at most one window per sample lacks images (its preamble, first).
        let mut per_sample_preambles = std::collections::HashMap::new();
        for (i, w) in layout.windows.iter().enumerate() {
            assert!(w.image_span.end == w.text_span.start || w.image_span.is_empty());
            if w.is_preamble() {
                let count = per_sample_preambles.entry(w.sample).or_insert(0usize);
                *count += 1;
                assert_eq!(*count, 1, "two preamble windows in sample {}", w.sample);
                // Preamble must be the sample's first window.
                assert!(
                    i == 0 || layout.windows[i - 1].sample != w.sample,
                    "preamble window not first in sample {}",
                    w.sample
                );
            }
        }
    }
}

/// Greedy first-fit packing: scan samples in order, take each one that still
/// fits both budgets, and return the rest (in order) for the next pack.
/// A sample exceeding a budget on its own is an error.
pub fn pack_samples<E: Scalar>(
    samples: Vec<MultimodalSequence<E>>,
    max_text: usize,
    max_image: usize,
) -> Result<(MultimodalSequence<E>, Vec<MultimodalSequence<E>>)> {
    let mut events = Vec::new();
    let mut boundaries = Vec::new();
    let mut leftovers = Vec::new();
    let mut text_used = 0usize;
    let mut image_used = 0usize;

    for (i, sample) in samples.into_iter().enumerate() {
        sample.validate()?;
        if sample.n_samples() != 1 {
            return Err(Error::validation(format!(
                "pack_samples input {i} is already packed ({} samples)",
                sample.n_samples()
            )));
        }
        let t = sample.text_token_count();
        let n = sample.image_token_count();
        if t > max_text || n > max_image {
            return Err(Error::Oversize {
                sample: i,
                detail: format!(
                    "{t} text / {n} image tokens vs budgets {max_text} text / {max_image} image"
                ),
            });
        }
        if text_used + t <= max_text && image_used + n <= max_image {
            boundaries.push(events.len());
            events.extend(sample.events);
            text_used += t;
            image_used += n;
        } else {
            leftovers.push(sample);
        }
    }

    if events.is_empty() {
        return Err(Error::validation("packing produced an empty sequence"));
    }
    let packed = MultimodalSequence {
        events,
        sample_boundaries: boundaries,
    };
    packed.validate()?;
    Ok((packed, leftovers))
}

/// Text tokens in flat order with their window and sample assignments.
pub fn flatten_text<E: Scalar>(
    seq: &MultimodalSequence<E>,
) -> Result<(Vec<TokenId>, Vec<usize>, Vec<usize>)> {
    let layout = segment_windows(seq)?;
    let ids = layout.text_ids().to_vec();
    let windows = (0..layout.flat_text_len)
        .map(|t| layout.window_of_text(t))
        .collect();
    let samples = (0..layout.flat_text_len)
        .map(|t| layout.sample_of_text(t))
        .collect();
    Ok((ids, windows, samples))
}

// ── Serialization ───────────────────────────────────────────────────────
//
// JSON lines, one sample per line: {"events":[{"t":5},{"img":16},...]}.
// Image embeddings are not stored; loaders regenerate them from a seeded
// provider so files stay small and runs stay reproducible.

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EventRepr {
    Text { t: TokenId },
    Image { img: usize },
}

#[derive(Serialize, Deserialize)]
struct SampleRepr {
    events: Vec<EventRepr>,
}

pub fn write_jsonl<E: Scalar, W: Write>(
    out: &mut W,
    samples: &[MultimodalSequence<E>],
) -> Result<()> {
    for sample in samples {
        if sample.n_samples() != 1 {
            return Err(Error::validation(
                "write_jsonl expects unpacked single-sample sequences",
            ));
        }
        let repr = SampleRepr {
            events: sample
                .events
                .iter()
                .map(|e| match e {
                    TokenEvent::Text(id) => EventRepr::Text { t: *id },
                    TokenEvent::ImageBlock { embeddings } => EventRepr::Image {
                        img: embeddings.shape()[0],
                    },
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &repr)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Load samples from JSONL; `embed(sample_idx, block_idx, n_tokens)` supplies
/// each image block's embedding matrix.
pub fn read_jsonl<E: Scalar, R: BufRead>(
    input: R,
    mut embed: impl FnMut(usize, usize, usize) -> Tensor<E>,
) -> Result<Vec<MultimodalSequence<E>>> {
    let mut out = Vec::new();
    for (line_idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let repr: SampleRepr = serde_json::from_str(&line)?;
        let mut block_idx = 0;
        let events = repr
            .events
            .into_iter()
            .map(|e| match e {
                EventRepr::Text { t } => TokenEvent::Text(t),
                EventRepr::Image { img } => {
                    let emb = embed(line_idx, block_idx, img);
                    block_idx += 1;
                    TokenEvent::ImageBlock { embeddings: emb }
                }
            })
            .collect();
        out.push(MultimodalSequence::single(events)?);
    }
    Ok(out)
}

pub fn write_jsonl_file<E: Scalar>(
    path: &Path,
    samples: &[MultimodalSequence<E>],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut f, samples)
}

pub fn read_jsonl_file<E: Scalar>(
    path: &Path,
    embed: impl FnMut(usize, usize, usize) -> Tensor<E>,
) -> Result<Vec<MultimodalSequence<E>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_jsonl(f, embed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(n: usize, d: usize) -> TokenEvent<f64> {
        TokenEvent::ImageBlock {
            embeddings: Tensor::zeros(vec![n, d]),
        }
    }

    fn txt(id: TokenId) -> TokenEvent<f64> {
        TokenEvent::Text(id)
    }

    #[test]
    fn single_window_segmentation() {
        // [I(4), T, T] → one window: images 0..4, text 4..6.
        let seq = MultimodalSequence::single(vec![img(4, 2), txt(1), txt(2)]).unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.windows.len(), 1);
        assert_eq!(layout.windows[0].image_span, 0..4);
        assert_eq!(layout.windows[0].text_span, 4..6);
    }

    #[test]
    fn preamble_then_two_windows() {
        // [T, T, I(2), T, I(3)] → preamble text window, I(2)+text, trailing I(3).
        let seq =
            MultimodalSequence::single(vec![txt(1), txt(2), img(2, 2), txt(3), img(3, 2)])
                .unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.windows.len(), 3);
        assert!(layout.windows[0].is_preamble());
        assert_eq!(layout.windows[0].text_span, 0..2);
        assert_eq!(layout.windows[1].image_span, 2..4);
        assert_eq!(layout.windows[1].text_span, 4..5);
        assert_eq!(layout.windows[2].image_span, 5..8);
        assert!(layout.windows[2].text_span.is_empty());
    }

    #[test]
    fn consecutive_image_blocks_merge() {
        // [I(2), I(3), T] → a single window with 5 image tokens.
        let seq = MultimodalSequence::single(vec![img(2, 2), img(3, 2), txt(9)]).unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.windows.len(), 1);
        assert_eq!(layout.windows[0].image_span, 0..5);
        assert_eq!(layout.windows[0].text_span, 5..6);
    }

    #[test]
    fn text_after_image_after_text_starts_new_window() {
        // [I(1), T, I(1), T] → two windows, no merge across text.
        let seq = MultimodalSequence::single(vec![img(1, 2), txt(1), img(1, 2), txt(2)]).unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.windows.len(), 2);
        assert_eq!(layout.windows[0].image_span, 0..1);
        assert_eq!(layout.windows[1].image_span, 2..3);
    }

    #[test]
    fn windows_respect_sample_boundaries() {
        let seq = MultimodalSequence::<f64> {
            events: vec![img(2, 2), txt(1), img(2, 2), txt(2)],
            sample_boundaries: vec![0, 2],
        };
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.windows.len(), 2);
        assert_eq!(layout.windows[0].sample, 0);
        assert_eq!(layout.windows[1].sample, 1);
        // An image at a sample start never merges with the previous sample.
        assert_eq!(layout.windows[1].image_span, 3..5);
    }

    #[test]
    fn coordinate_maps_roundtrip() {
        let seq =
            MultimodalSequence::single(vec![txt(7), img(2, 2), txt(8), txt(9), img(1, 2)])
                .unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.n_tokens, 6);
        assert_eq!(layout.flat_text_len, 3);
        assert_eq!(layout.flat_image_len, 3);
        for t in 0..layout.flat_text_len {
            let pos = layout.text_to_interleaved(t);
            assert_eq!(layout.kind(pos), TokenKind::Text);
            assert_eq!(layout.flat_index(pos), t);
        }
        assert_eq!(layout.text_ids(), &[7, 8, 9]);
    }

    #[test]
    fn window_local_positions_continue_text_after_images() {
        // [I(3), T, T]: images at 0,1,2; text at 3,4. Preamble text from 0.
        let seq = MultimodalSequence::single(vec![img(3, 2), txt(1), txt(2)]).unwrap();
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.window_local_positions(), vec![0, 1, 2, 3, 4]);

        let seq2 = MultimodalSequence::single(vec![txt(1), txt(2), img(2, 2), txt(3)]).unwrap();
        let layout2 = segment_windows(&seq2).unwrap();
        // preamble text 0,1; window2 images 0,1; its text 2.
        assert_eq!(layout2.window_local_positions(), vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn sample_positions_restart_per_sample() {
        let seq = MultimodalSequence::<f64> {
            events: vec![txt(1), img(2, 2), txt(2), txt(3), img(1, 2), txt(4)],
            sample_boundaries: vec![0, 3],
        };
        let layout = segment_windows(&seq).unwrap();
        assert_eq!(layout.sample_text_positions(), vec![0, 1, 0, 1]);
        // Sample 0 spans 4 stream positions (t,i,i,t), sample 1 spans 3.
        assert_eq!(layout.sample_stream_positions(), vec![0, 1, 2, 3, 0, 1, 2]);
    }

    #[test]
    fn packing_first_fit_and_leftovers() {
        let mk = |n_txt: usize, n_img: usize| {
            let mut ev: Vec<TokenEvent<f64>> = Vec::new();
            if n_img > 0 {
                ev.push(img(n_img, 2));
            }
            for i in 0..n_txt {
                ev.push(txt(i as TokenId));
            }
            MultimodalSequence::single(ev).unwrap()
        };
        // Budgets 4 text / 4 image; samples: (2t,2i), (3t,0i), (2t,2i), (1t,1i).
        let (packed, leftovers) =
            pack_samples(vec![mk(2, 2), mk(3, 0), mk(2, 2), mk(1, 1)], 4, 4).unwrap();
        // First fits; second (3 text) exceeds remaining text budget (2);
        // third fits (2t/2i); fourth's image budget is gone? 2+2=4 ≤ 4 but
        // text 2+2=4 full → fourth (1t,1i) has no text room.
        assert_eq!(packed.n_samples(), 2);
        assert_eq!(packed.text_token_count(), 4);
        assert_eq!(packed.image_token_count(), 4);
        assert_eq!(leftovers.len(), 2);
        assert_eq!(leftovers[0].text_token_count(), 3);
    }

    #[test]
    fn packing_rejects_oversize_sample() {
        let big = MultimodalSequence::single(vec![img(10, 2), txt(0)]).unwrap();
        let err = pack_samples(vec![big], 100, 5).unwrap_err();
        assert!(matches!(err, Error::Oversize { sample: 0, .. }));
    }

    #[test]
    fn packing_unpack_roundtrip() {
        let mk = |base: TokenId| {
            MultimodalSequence::single(vec![txt(base), img(2, 3), txt(base + 1)]).unwrap()
        };
        let originals = vec![mk(10), mk(20), mk(30)];
        let (packed, leftovers) = pack_samples(originals.clone(), 100, 100).unwrap();
        assert!(leftovers.is_empty());
        for (s, original) in originals.iter().enumerate() {
            let back = packed.extract_sample(s);
            assert_eq!(back.events.len(), original.events.len());
            for (a, b) in back.events.iter().zip(&original.events) {
                match (a, b) {
                    (TokenEvent::Text(x), TokenEvent::Text(y)) => assert_eq!(x, y),
                    (
                        TokenEvent::ImageBlock { embeddings: ea },
                        TokenEvent::ImageBlock { embeddings: eb },
                    ) => assert_eq!(ea, eb),
                    _ => panic!("event kind changed by packing"),
                }
            }
        }
    }

    #[test]
    fn flatten_empty_text_sequence() {
        let seq = MultimodalSequence::single(vec![img(3, 2)]).unwrap();
        let (ids, windows, samples) = flatten_text(&seq).unwrap();
        assert!(ids.is_empty() && windows.is_empty() && samples.is_empty());
    }

    #[test]
    fn jsonl_roundtrip_regenerates_embeddings() {
        let samples = vec![
            MultimodalSequence::single(vec![txt(5), img(3, 4), txt(6)]).unwrap(),
            MultimodalSequence::single(vec![img(2, 4), txt(7)]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().count() == 2);
        assert!(text.contains(r#"{"t":5}"#) && text.contains(r#"{"img":3}"#));

        let loaded = read_jsonl::<f64, _>(&buf[..], |line, block, n| {
            Tensor::full(vec![n, 4], (line * 10 + block) as f64)
        })
        .unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image_token_count(), 3);
        match &loaded[1].events[0] {
            TokenEvent::ImageBlock { embeddings } => {
                assert_eq!(embeddings.data()[0], 10.0); // line 1, block 0
            }
            _ => panic!(),
        }
    }

    #[test]
    fn validation_rejects_empty_image_block() {
        let seq = MultimodalSequence::<f64> {
            events: vec![img(0, 2)],
            sample_boundaries: vec![0],
        };
        assert!(seq.validate().is_err());
    }
}
