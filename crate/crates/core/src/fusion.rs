//! Transformer block stacks for every fusion mode, plus the query-token
//! image compressor.
//!
//! Six ways to let text see images share one backbone (pre-norm causal
//! blocks: norm → attention → residual, norm → FFN → residual):
//!
//! * `insertion` — image embeddings occupy stream positions and pass
//!   through self-attention and FFNs like text;
//! * `cross-attn` / `gated-cross-attn` — each block first adds a residual
//!   where text queries attend to the window's image rows only (the gated
//!   variant scales that residual by tanh of a per-layer scalar, init 0);
//! * `casa-parallel` — the windowed text→(image+text) update and
//!   self-attention both read the block input and their residuals are
//!   summed;
//! * `casa-pre` — the windowed update is applied first, then
//!   self-attention;
//! * `casa-replace` — a periodic subset of blocks runs the windowed
//!   attention INSTEAD of self-attention, reusing the self-attention
//!   weights (zero added parameters); in replaced blocks, text ahead of
//!   any image falls back to window-local causal text attention.
//!
//! In all windowed modes image tokens never enter self-attention or the
//! FFNs; with `image_ffn_update` set, a parallel image stream is refreshed
//! through each block's FFN before serving as keys/values. Position
//! rotation: self-attention rotates by sample-relative text index,
//! insertion by sample-relative stream index, windowed fusion by
//! window-local positions (a window's images at 0.., its text after).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    blockwise_attend, mha, mha_allowing_zero_rows, mha_recording, AttnParams, RopeSpec,
};
use crate::error::{Error, Result};
use crate::mask::{
    build_ca_image_mask, build_casa_mask, build_insertion_mask, build_text_causal_mask, MaskSpec,
    PreamblePolicy,
};
use crate::rng::RngStream;
use crate::sequence::{segment_windows, MultimodalSequence, TokenEvent, TokenKind, WindowLayout};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FusionMode {
    Insertion,
    CrossAttn {
        #[serde(default)]
        gated: bool,
    },
    CasaParallel,
    CasaPre,
    CasaReplace {
        #[serde(default = "default_replace_period")]
        period: usize,
        #[serde(default = "default_replace_offset")]
        offset: usize,
    },
}

fn default_replace_period() -> usize {
    4
}
/// Default offset puts replaced blocks at depths period−1, 2·period−1, …
/// — uniform across depth with block 0 kept as plain self-attention.
fn default_replace_offset() -> usize {
    default_replace_period() - 1
}

impl FusionMode {
    pub fn is_windowed(self) -> bool {
        !matches!(self, FusionMode::Insertion)
    }

    /// Modes that carry their own fusion projection weights. `casa-replace`
    /// reuses the self-attention weights and owns none.
    pub fn has_fusion_weights(self) -> bool {
        matches!(
            self,
            FusionMode::CrossAttn { .. } | FusionMode::CasaParallel | FusionMode::CasaPre
        )
    }

    /// True when block `index` runs windowed attention. For additive modes
    /// every block does; for `casa-replace` only the periodic subset.
    pub fn fuses_at(self, index: usize) -> bool {
        match self {
            FusionMode::Insertion => false,
            FusionMode::CasaReplace { period, offset } => index % period == offset % period,
            _ => true,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionMode::Insertion => "insertion",
            FusionMode::CrossAttn { gated: false } => "cross-attn",
            FusionMode::CrossAttn { gated: true } => "gated-cross-attn",
            FusionMode::CasaParallel => "casa-parallel",
            FusionMode::CasaPre => "casa-pre",
            FusionMode::CasaReplace { .. } => "casa-replace",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insertion" => Ok(FusionMode::Insertion),
            "cross-attn" => Ok(FusionMode::CrossAttn { gated: false }),
            "gated-cross-attn" => Ok(FusionMode::CrossAttn { gated: true }),
            "casa-parallel" => Ok(FusionMode::CasaParallel),
            "casa-pre" => Ok(FusionMode::CasaPre),
            "casa-replace" => Ok(FusionMode::CasaReplace {
                period: default_replace_period(),
                offset: default_replace_offset(),
            }),
            other => Err(Error::config(format!(
                "unknown fusion mode {other:?}; expected one of insertion, cross-attn, \
                 gated-cross-attn, casa-parallel, casa-pre, casa-replace"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub n_queries: usize,
    pub n_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub mode: FusionMode,
    #[serde(default)]
    pub qformer: Option<QFormerConfig>,
    #[serde(default)]
    pub image_ffn_update: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ffn_mult() -> usize {
    4
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl FusionConfig {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        vocab_size: usize,
        mode: FusionMode,
    ) -> Self {
        FusionConfig {
            d_model,
            n_heads,
            n_layers,
            ffn_mult: default_ffn_mult(),
            vocab_size,
            mode,
            qformer: None,
            image_ffn_update: false,
            rope_base: default_rope_base(),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.vocab_size < 2 {
            return Err(Error::config("n_layers/ffn_mult must be ≥1, vocab_size ≥2"));
        }
        if let FusionMode::CasaReplace { period, offset } = self.mode {
            if period == 0 {
                return Err(Error::config("casa-replace period must be ≥ 1"));
            }
            if offset >= period {
                return Err(Error::config(format!(
                    "casa-replace offset {offset} must be < period {period}"
                )));
            }
        }
        if let Some(q) = &self.qformer {
            if q.n_queries == 0 || q.n_layers == 0 {
                return Err(Error::config("qformer n_queries and n_layers must be ≥ 1"));
            }
        }
        if self.image_ffn_update && self.mode == FusionMode::Insertion {
            return Err(Error::config(
                "image_ffn_update is meaningless with insertion: image tokens already pass \
                 through every FFN",
            ));
        }
        Ok(())
    }
}

// ── Parameter layout ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Token embedding, self-attention, FFNs, norms, LM head.
    Backbone,
    /// Windowed-fusion projections, their norm, and gates.
    Fusion,
    QFormer,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    CopyOf(String),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    group: ParamGroup,
}

const INIT_STD: f64 = 0.02;

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, group: ParamGroup) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            name: format!("{prefix}.{w}"),
            shape: vec![d, d],
            init: Init::Normal(INIT_STD),
            group,
        });
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, group: ParamGroup) {
    out.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![d],
        init: Init::Ones,
        group,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![d],
        init: Init::Zeros,
        group,
    });
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize, group: ParamGroup) {
    let items: [(&str, Vec<usize>, Init); 4] = [
        ("w1", vec![d, f], Init::Normal(INIT_STD)),
        ("b1", vec![f], Init::Zeros),
        ("w2", vec![f, d], Init::Normal(INIT_STD)),
        ("b2", vec![d], Init::Zeros),
    ];
    for (n, shape, init) in items {
        out.push(ParamSpec { name: format!("{prefix}.{n}"), shape, init, group });
    }
}

fn param_specs(cfg: &FusionConfig) -> Vec<ParamSpec> {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim(), cfg.vocab_size);
    let mut s = Vec::new();
    s.push(ParamSpec {
        name: "tok_embed".into(),
        shape: vec![v, d],
        init: Init::Normal(INIT_STD),
        group: ParamGroup::Backbone,
    });
    for b in 0..cfg.n_layers {
        let p = format!("blk{b:02}");
        norm_specs(&mut s, &format!("{p}.n1"), d, ParamGroup::Backbone);
        attn_specs(&mut s, &format!("{p}.sa"), d, ParamGroup::Backbone);
        norm_specs(&mut s, &format!("{p}.n2"), d, ParamGroup::Backbone);
        ffn_specs(&mut s, &format!("{p}.ffn"), d, f, ParamGroup::Backbone);
        if cfg.mode.has_fusion_weights() {
            // Fusion projections start as copies of the block's
            // self-attention weights.
            norm_specs(&mut s, &format!("{p}.fuse.n"), d, ParamGroup::Fusion);
            for w in ["wq", "wk", "wv", "wo"] {
                s.push(ParamSpec {
                    name: format!("{p}.fuse.{w}"),
                    shape: vec![d, d],
                    init: Init::CopyOf(format!("{p}.sa.{w}")),
                    group: ParamGroup::Fusion,
                });
            }
            if matches!(cfg.mode, FusionMode::CrossAttn { gated: true }) {
                s.push(ParamSpec {
                    name: format!("{p}.fuse.gate"),
                    shape: vec![1],
                    init: Init::Zeros,
                    group: ParamGroup::Fusion,
                });
            }
        }
    }
    norm_specs(&mut s, "final_norm", d, ParamGroup::Backbone);
    s.push(ParamSpec {
        name: "head".into(),
        shape: vec![d, v],
        init: Init::Normal(INIT_STD),
        group: ParamGroup::Backbone,
    });
    if let Some(q) = &cfg.qformer {
        s.push(ParamSpec {
            name: "qf.queries".into(),
            shape: vec![q.n_queries, d],
            init: Init::Normal(INIT_STD),
            group: ParamGroup::QFormer,
        });
        for l in 0..q.n_layers {
            let p = format!("qf{l:02}");
            norm_specs(&mut s, &format!("{p}.n1"), d, ParamGroup::QFormer);
            attn_specs(&mut s, &format!("{p}.attn"), d, ParamGroup::QFormer);
            norm_specs(&mut s, &format!("{p}.n2"), d, ParamGroup::QFormer);
            ffn_specs(&mut s, &format!("{p}.ffn"), d, f, ParamGroup::QFormer);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: u64,
    pub fusion: u64,
    pub qformer: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.backbone + self.fusion + self.qformer
    }
}

/// Parameter counts by shape arithmetic alone — no tensors are allocated,
/// so this is safe for full-scale reference configurations.
pub fn param_counts(cfg: &FusionConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let mut c = ParamCounts { backbone: 0, fusion: 0, qformer: 0 };
    for spec in param_specs(cfg) {
        let n: u64 = spec.shape.iter().map(|&x| x as u64).product();
        match spec.group {
            ParamGroup::Backbone => c.backbone += n,
            ParamGroup::Fusion => c.fusion += n,
            ParamGroup::QFormer => c.qformer += n,
        }
    }
    Ok(c)
}

// ── The stack ───────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct LayerStack<E: Scalar> {
    cfg: FusionConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Scalar> LayerStack<E> {
    pub fn init(cfg: FusionConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut groups = Vec::with_capacity(specs.len());
        let mut tensors: Vec<Tensor<E>> = Vec::with_capacity(specs.len());
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for spec in specs {
            let t = match &spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), E::ONE),
                Init::Normal(std) => rng.normal_tensor(spec.shape.clone(), *std),
                Init::CopyOf(src) => tensors[index[src.as_str()]].clone(),
            };
            index.insert(spec.name.clone(), tensors.len());
            names.push(spec.name);
            groups.push(spec.group);
            tensors.push(t);
        }
        Ok(LayerStack { cfg, names, groups, tensors, index })
    }

    pub fn cfg(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.len()
    }

    /// (name, group, tensor) triples in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor<E>)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, &g), t)| (n.as_str(), g, t))
    }

    /// Replace one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// In-place update of every parameter in declaration order (optimizer
    /// hook). The callback receives (ordinal, name, tensor).
    pub fn update_params(&mut self, mut f: impl FnMut(usize, &str, &mut Tensor<E>)) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(i, &self.names[i], t);
        }
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts { backbone: 0, fusion: 0, qformer: 0 };
        for (i, t) in self.tensors.iter().enumerate() {
            let n = t.numel() as u64;
            match self.groups[i] {
                ParamGroup::Backbone => c.backbone += n,
                ParamGroup::Fusion => c.fusion += n,
                ParamGroup::QFormer => c.qformer += n,
            }
        }
        c
    }

    /// Copy every parameter whose name also exists in `other` from `other`
    /// into `self`. Returns the number of tensors copied.
    pub fn copy_matching_params(&mut self, other: &LayerStack<E>) -> Result<usize> {
        let mut n = 0;
        for name in other.names.clone() {
            if self.index.contains_key(name.as_str()) {
                self.set_param(&name, other.param(&name).unwrap().clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn qformer_compress_var(
        &self,
        tape: &mut Tape<E>,
        bound: &BTreeMap<String, Var>,
        image_tokens: Var,
    ) -> Result<Var> {
        let q = self
            .cfg
            .qformer
            .as_ref()
            .ok_or_else(|| Error::config("no qformer configured"))?;
        let rows = tape.shape(image_tokens)[0];
        if rows == 0 {
            return Err(Error::contract("qformer_compress on an empty image block"));
        }
        let eps = self.cfg.ln_eps;
        let mut x = bound["qf.queries"];
        let all_visible = MaskSpec::dense(q.n_queries, rows, vec![true; q.n_queries * rows])?;
        for l in 0..q.n_layers {
            let p = format!("qf{l:02}");
            let g = bound[&format!("{p}.n1.g")];
            let b = bound[&format!("{p}.n1.b")];
            let qn = tape.layernorm(x, g, b, eps)?;
            // Keys/values are the raw image rows: a set-to-set read with no
            // positional rotation.
            let params = AttnParams {
                wq: bound[&format!("{p}.attn.wq")],
                wk: bound[&format!("{p}.attn.wk")],
                wv: bound[&format!("{p}.attn.wv")],
                wo: bound[&format!("{p}.attn.wo")],
            };
            let upd = mha(tape, qn, image_tokens, &params, self.cfg.n_heads, &all_visible, None)?;
            x = tape.add(x, upd)?;
            let g2 = bound[&format!("{p}.n2.g")];
            let b2 = bound[&format!("{p}.n2.b")];
            let h = tape.layernorm(x, g2, b2, eps)?;
            let h = ffn_apply(tape, h, bound, &format!("{p}.ffn"))?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Compress one image block to `n_queries` rows (inference entry point:
    /// parameters are bound as constants).
    pub fn qformer_compress(&self, image_tokens: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape: Tape<E> = Tape::new();
        let bound = self.bind(&mut tape, false);
        let img = tape.constant(image_tokens.clone());
        let out = self.qformer_compress_var(&mut tape, &bound, img)?;
        Ok(tape.value_tensor(out))
    }

    fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> BTreeMap<String, Var> {
        let mut m = BTreeMap::new();
        for (i, t) in self.tensors.iter().enumerate() {
            m.insert(self.names[i].clone(), tape.leaf(t.clone(), requires_grad));
        }
        m
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence<E>,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardPass<E>> {
        seq.validate()?;
        if opts.record_fusion_attn && opts.blockwise_fusion {
            return Err(Error::config(
                "attention recording needs the dense fusion path",
            ));
        }
        let mut tape: Tape<E> = Tape::new();
        let bound = self.bind(&mut tape, !opts.inference);

        // Image rows enter as constants (they stand in for a frozen vision
        // encoder), optionally blinded to zeros, optionally compressed.
        let scope = tape.set_scope("qf");
        let d = self.cfg.d_model;
        let mut block_vars: Vec<Var> = Vec::new();
        let mut effective_events: Vec<TokenEvent<E>> = Vec::with_capacity(seq.events.len());
        for ev in &seq.events {
            match ev {
                TokenEvent::Text(id) => effective_events.push(TokenEvent::Text(*id)),
                TokenEvent::ImageBlock { embeddings } => {
                    if embeddings.shape()[1] != d {
                        return Err(Error::ShapeMismatch {
                            op: "forward",
                            lhs: embeddings.shape().to_vec(),
                            rhs: vec![embeddings.shape()[0], d],
                        });
                    }
                    let raw = if opts.blind_images {
                        Tensor::zeros(embeddings.shape().to_vec())
                    } else {
                        embeddings.clone()
                    };
                    let var = tape.constant(raw);
                    let (var, n_out) = if self.cfg.qformer.is_some() {
                        let c = self.qformer_compress_var(&mut tape, &bound, var)?;
                        let n = tape.shape(c)[0];
                        (c, n)
                    } else {
                        (var, embeddings.shape()[0])
                    };
                    block_vars.push(var);
                    effective_events.push(TokenEvent::ImageBlock {
                        embeddings: Tensor::zeros(vec![n_out, d]),
                    });
                }
            }
        }
        tape.restore_scope(scope);
        let effective = MultimodalSequence {
            events: effective_events,
            sample_boundaries: seq.sample_boundaries.clone(),
        };
        let layout = segment_windows(&effective)?;
        let image_var = if block_vars.is_empty() {
            tape.constant(Tensor::zeros(vec![0, d]))
        } else {
            tape.concat_rows(&block_vars)?
        };

        let mut ctx = Fwd {
            stack: self,
            tape,
            bound,
            layout,
            image_var,
            opts,
            fusion_attn: Vec::new(),
            fusion_masks: Vec::new(),
        };
        let logits = match self.cfg.mode {
            FusionMode::Insertion => ctx.run_insertion()?,
            _ => ctx.run_windowed()?,
        };
        let Fwd { tape, layout, bound, fusion_attn, fusion_masks, .. } = ctx;
        let params = self
            .names
            .iter()
            .map(|n| (n.clone(), bound[n.as_str()]))
            .collect();
        Ok(ForwardPass { tape, logits, layout, params, fusion_attn, fusion_masks })
    }
}

// ── Forward options and result ──────────────────────────────────────────

/// One removed (query row, key column) set for the fusion mask of one
/// layer. Columns are in the layer's key coordinate system: interleaved
/// stream for the windowed text+image modes, flat image for cross-attn.
#[derive(Debug, Clone)]
pub struct MaskEdit {
    pub layer: usize,
    pub removals: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    /// Bind parameters without gradients.
    pub inference: bool,
    /// Run fusion layers through the blockwise path (bitwise-equal values,
    /// never materializes cross-window score entries).
    pub blockwise_fusion: bool,
    /// Record each fusion layer's post-softmax attention.
    pub record_fusion_attn: bool,
    /// Probe edits applied to per-layer fusion masks.
    pub mask_edits: &'a [MaskEdit],
    /// Zero all image embeddings at input (evaluation control).
    pub blind_images: bool,
}

impl Default for ForwardOptions<'static> {
    fn default() -> Self {
        ForwardOptions {
            inference: false,
            blockwise_fusion: false,
            record_fusion_attn: false,
            mask_edits: &[],
            blind_images: false,
        }
    }
}

pub struct ForwardPass<E: Scalar> {
    pub tape: Tape<E>,
    /// `[flat_text_len, vocab]` — logits per text position, every mode.
    pub logits: Var,
    pub layout: WindowLayout,
    /// Bound parameter vars in declaration order (for gradient reads).
    pub params: Vec<(String, Var)>,
    /// (block index, post-softmax fusion attention) when recorded.
    pub fusion_attn: Vec<(usize, Var)>,
    /// (block index, fusion mask actually used — after edits).
    pub fusion_masks: Vec<(usize, MaskSpec)>,
}

impl<E: Scalar> ForwardPass<E> {
    pub fn logits_tensor(&self) -> Tensor<E> {
        self.tape.value_tensor(self.logits)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

fn ffn_apply<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    bound: &BTreeMap<String, Var>,
    prefix: &str,
) -> Result<Var> {
    let h = tape.matmul(x, bound[&format!("{prefix}.w1")])?;
    let h = tape.add(h, bound[&format!("{prefix}.b1")])?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, bound[&format!("{prefix}.w2")])?;
    tape.add(o, bound[&format!("{prefix}.b2")])
}

// ── Forward internals ───────────────────────────────────────────────────

struct Fwd<'a, E: Scalar> {
    stack: &'a LayerStack<E>,
    tape: Tape<E>,
    bound: BTreeMap<String, Var>,
    layout: WindowLayout,
    image_var: Var,
    opts: &'a ForwardOptions<'a>,
    fusion_attn: Vec<(usize, Var)>,
    fusion_masks: Vec<(usize, MaskSpec)>,
}

impl<E: Scalar> Fwd<'_, E> {
    fn v(&self, name: &str) -> Var {
        self.bound[name]
    }

    fn attn_params(&self, prefix: &str) -> AttnParams {
        AttnParams {
            wq: self.v(&format!("{prefix}.wq")),
            wk: self.v(&format!("{prefix}.wk")),
            wv: self.v(&format!("{prefix}.wv")),
            wo: self.v(&format!("{prefix}.wo")),
        }
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.v(&format!("{prefix}.g"));
        let b = self.v(&format!("{prefix}.b"));
        self.tape.layernorm(x, g, b, self.stack.cfg.ln_eps)
    }

    fn embed_text(&mut self) -> Result<Var> {
        let scope = self.tape.set_scope("embed");
        let ids: Vec<usize> = self.layout.text_ids().iter().map(|&t| t as usize).collect();
        let e = self.tape.gather_rows(self.v("tok_embed"), ids)?;
        self.tape.restore_scope(scope);
        Ok(e)
    }

    fn head(&mut self, x: Var) -> Result<Var> {
        let scope = self.tape.set_scope("head");
        let xn = self.ln(x, "final_norm")?;
        let logits = self.tape.matmul(xn, self.v("head"))?;
        self.tape.restore_scope(scope);
        Ok(logits)
    }

    /// Interleave text rows and image rows into stream order.
    fn interleave(&mut self, text: Var, img: Var) -> Result<Var> {
        let t = self.layout.flat_text_len;
        let cat = self.tape.concat_rows(&[text, img])?;
        let idx: Vec<usize> = (0..self.layout.n_tokens)
            .map(|p| match self.layout.kind(p) {
                TokenKind::Text => self.layout.flat_index(p),
                TokenKind::Image => t + self.layout.flat_index(p),
            })
            .collect();
        self.tape.gather_rows(cat, idx)
    }

    fn layer_mask(&mut self, block: usize, base: &MaskSpec) -> Result<MaskSpec> {
        let mut mask = base.clone();
        for edit in self.opts.mask_edits.iter().filter(|e| e.layer == block) {
            mask = mask.with_removed(&edit.removals)?;
        }
        Ok(mask)
    }

    fn run_insertion(&mut self) -> Result<Var> {
        if !self.opts.mask_edits.is_empty() {
            return Err(Error::config("mask edits target fusion layers; insertion has none"));
        }
        let text = self.embed_text()?;
        let mut x = self.interleave(text, self.image_var)?;
        let mask = build_insertion_mask(&self.layout)?;
        let pos = self.layout.sample_stream_positions();
        let rope = self.stack.cfg.rope_base;
        for b in 0..self.stack.cfg.n_layers {
            let p = format!("blk{b:02}");
            let scope = self.tape.set_scope(&format!("{p}.sa"));
            let h = self.ln(x, &format!("{p}.n1"))?;
            let params = self.attn_params(&format!("{p}.sa"));
            let spec = RopeSpec { q_positions: &pos, k_positions: &pos, base: rope };
            let upd = mha(
                &mut self.tape,
                h,
                h,
                &params,
                self.stack.cfg.n_heads,
                &mask,
                Some(spec),
            )?;
            x = self.tape.add(x, upd)?;
            self.tape.set_scope(&format!("{p}.ffn"));
            let h = self.ln(x, &format!("{p}.n2"))?;
            let h = ffn_apply(&mut self.tape, h, &self.bound, &format!("{p}.ffn"))?;
            x = self.tape.add(x, h)?;
            self.tape.restore_scope(scope);
        }
        // Logits only at text positions.
        let text_rows: Vec<usize> =
            (0..self.layout.flat_text_len).map(|t| self.layout.text_to_interleaved(t)).collect();
        let xt = self.tape.gather_rows(x, text_rows)?;
        self.head(xt)
    }

    /// One windowed fusion update: text queries against this block's K/V
    /// source under `mask`, via the dense or blockwise path.
    #[allow(clippy::too_many_arguments)]
    fn fusion_update(
        &mut self,
        block: usize,
        x_q: Var,
        x_kv: Var,
        params: &AttnParams,
        mask: &MaskSpec,
        rope: RopeSpec<'_>,
        strict: bool,
    ) -> Result<Var> {
        let n_heads = self.stack.cfg.n_heads;
        let edited = self.layer_mask(block, mask)?;
        let out = if self.opts.record_fusion_attn {
            let (out, attn) =
                mha_recording(&mut self.tape, x_q, x_kv, params, n_heads, &edited, Some(rope))?;
            self.fusion_attn.push((block, attn));
            out
        } else if self.opts.blockwise_fusion && matches!(edited.kind, crate::mask::MaskKind::Blockwise(_)) {
            blockwise_attend(&mut self.tape, x_q, x_kv, params, n_heads, &edited, Some(rope))?
        } else if strict && edited.zero_update_rows().is_empty() {
            mha(&mut self.tape, x_q, x_kv, params, n_heads, &edited, Some(rope))?
        } else {
            mha_allowing_zero_rows(&mut self.tape, x_q, x_kv, params, n_heads, &edited, Some(rope))?
        };
        self.fusion_masks.push((block, edited));
        Ok(out)
    }

    fn run_windowed(&mut self) -> Result<Var> {
        let cfg = self.stack.cfg.clone();
        let mode = cfg.mode;
        let layout = self.layout.clone();
        let has_fuse_weights = mode.has_fusion_weights();

        // Masks and positions shared by all blocks.
        let sa_mask = build_text_causal_mask(&layout)?;
        let sa_pos = layout.sample_text_positions();
        let txt_wpos = layout.text_window_positions();
        let ivl_wpos = layout.window_local_positions();
        // Window-local positions of the flat image rows (images lead their
        // window: 0..n_img).
        let img_wpos: Vec<usize> =
            layout.windows.iter().flat_map(|w| 0..w.image_len()).collect();
        let fusion_mask = match mode {
            FusionMode::CrossAttn { .. } => build_ca_image_mask(&layout)?,
            FusionMode::CasaReplace { .. } => {
                build_casa_mask(&layout, PreamblePolicy::WindowCausal)?
            }
            _ => build_casa_mask(&layout, PreamblePolicy::ZeroUpdate)?,
        };
        for edit in self.opts.mask_edits {
            if edit.layer >= cfg.n_layers || !mode.fuses_at(edit.layer) {
                return Err(Error::config(format!(
                    "mask edit targets block {}, which runs no fusion attention",
                    edit.layer
                )));
            }
        }

        let mut x = self.embed_text()?;
        let mut img_state = self.image_var;
        let n_img = self.tape.shape(img_state)[0];

        for b in 0..cfg.n_layers {
            let p = format!("blk{b:02}");
            let scope = self.tape.set_scope(&format!("{p}.img_ffn"));
            if cfg.image_ffn_update && n_img > 0 {
                // Refresh the parallel image stream through this block's FFN
                // before it serves as keys/values.
                let h = self.ln(img_state, &format!("{p}.n2"))?;
                let h = ffn_apply(&mut self.tape, h, &self.bound, &format!("{p}.ffn"))?;
                img_state = self.tape.add(img_state, h)?;
            }

            match mode {
                FusionMode::CrossAttn { gated } => {
                    self.tape.set_scope(&format!("{p}.ca"));
                    let qn = self.ln(x, &format!("{p}.fuse.n"))?;
                    let kn = self.ln(img_state, &format!("{p}.fuse.n"))?;
                    let params = self.attn_params(&format!("{p}.fuse"));
                    let rope = RopeSpec {
                        q_positions: &txt_wpos,
                        k_positions: &img_wpos,
                        base: cfg.rope_base,
                    };
                    let mut upd =
                        self.fusion_update(b, qn, kn, &params, &fusion_mask, rope, false)?;
                    if gated {
                        let g = self.v(&format!("{p}.fuse.gate"));
                        let tg = self.tape.tanh_op(g);
                        upd = self.tape.mul(upd, tg)?;
                    }
                    x = self.tape.add(x, upd)?;
                    self.sa_update(&mut x, b, &sa_mask, &sa_pos)?;
                }
                FusionMode::CasaPre => {
                    self.tape.set_scope(&format!("{p}.casa"));
                    let upd = self.casa_update(b, x, img_state, &fusion_mask, &txt_wpos, &ivl_wpos, has_fuse_weights)?;
                    x = self.tape.add(x, upd)?;
                    self.sa_update(&mut x, b, &sa_mask, &sa_pos)?;
                }
                FusionMode::CasaParallel => {
                    // Both updates read the same block input; the residuals
                    // are summed.
                    let x0 = x;
                    self.tape.set_scope(&format!("{p}.sa"));
                    let h = self.ln(x0, &format!("{p}.n1"))?;
                    let params = self.attn_params(&format!("{p}.sa"));
                    let rope =
                        RopeSpec { q_positions: &sa_pos, k_positions: &sa_pos, base: cfg.rope_base };
                    let sa_out =
                        mha(&mut self.tape, h, h, &params, cfg.n_heads, &sa_mask, Some(rope))?;
                    self.tape.set_scope(&format!("{p}.casa"));
                    let casa_out = self.casa_update(
                        b, x0, img_state, &fusion_mask, &txt_wpos, &ivl_wpos, has_fuse_weights,
                    )?;
                    let s = self.tape.add(x0, sa_out)?;
                    x = self.tape.add(s, casa_out)?;
                }
                FusionMode::CasaReplace { .. } => {
                    if mode.fuses_at(b) {
                        self.tape.set_scope(&format!("{p}.casa"));
                        // Replaced block: windowed attention with the
                        // self-attention weights; text before any image does
                        // window-local causal text attention.
                        let upd = self.casa_update(
                            b, x, img_state, &fusion_mask, &txt_wpos, &ivl_wpos, false,
                        )?;
                        x = self.tape.add(x, upd)?;
                    } else {
                        self.sa_update(&mut x, b, &sa_mask, &sa_pos)?;
                    }
                }
                FusionMode::Insertion => unreachable!("handled by run_insertion"),
            }

            self.tape.set_scope(&format!("{p}.ffn"));
            let h = self.ln(x, &format!("{p}.n2"))?;
            let h = ffn_apply(&mut self.tape, h, &self.bound, &format!("{p}.ffn"))?;
            x = self.tape.add(x, h)?;
            self.tape.restore_scope(scope);
        }
        self.head(x)
    }

    fn sa_update(&mut self, x: &mut Var, b: usize, mask: &MaskSpec, pos: &[usize]) -> Result<()> {
        let p = format!("blk{b:02}");
        self.tape.set_scope(&format!("{p}.sa"));
        let h = self.ln(*x, &format!("{p}.n1"))?;
        let params = self.attn_params(&format!("{p}.sa"));
        let rope =
            RopeSpec { q_positions: pos, k_positions: pos, base: self.stack.cfg.rope_base };
        let upd = mha(
            &mut self.tape,
            h,
            h,
            &params,
            self.stack.cfg.n_heads,
            mask,
            Some(rope),
        )?;
        *x = self.tape.add(*x, upd)?;
        Ok(())
    }

    /// The windowed text→(image + window text) update. The owning block's
    /// fusion norm — or its n1 when the mode reuses self-attention weights —
    /// is applied to BOTH the text and image inputs.
    #[allow(clippy::too_many_arguments)]
    fn casa_update(
        &mut self,
        b: usize,
        x: Var,
        img_state: Var,
        mask: &MaskSpec,
        txt_wpos: &[usize],
        ivl_wpos: &[usize],
        own_weights: bool,
    ) -> Result<Var> {
        let p = format!("blk{b:02}");
        let (norm, attn) = if own_weights {
            (format!("{p}.fuse.n"), format!("{p}.fuse"))
        } else {
            (format!("{p}.n1"), format!("{p}.sa"))
        };
        let qn = self.ln(x, &norm)?;
        let kn = self.ln(img_state, &norm)?;
        let kv = self.interleave(qn, kn)?;
        let params = self.attn_params(&attn);
        let rope = RopeSpec {
            q_positions: txt_wpos,
            k_positions: ivl_wpos,
            base: self.stack.cfg.rope_base,
        };
        // Replaced blocks use the strict path (window-causal preambles have
        // no empty rows); additive blocks tolerate zero-update rows.
        self.fusion_update(b, qn, kv, &params, mask, rope, !own_weights)
    }
}

// ── Loss helper ─────────────────────────────────────────────────────────

/// Mean cross-entropy of `logits[row]` against `target`, over the given
/// (row, target) pairs only — all other positions are unsupervised.
pub fn cross_entropy_at<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: &[(usize, u32)],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::contract(format!("logits must be 2-d, got {shape:?}")));
    }
    if targets.is_empty() {
        return Err(Error::contract("cross_entropy_at with no supervised positions"));
    }
    let (rows, vocab) = (shape[0], shape[1]);
    let mut sel = vec![E::ZERO; rows * vocab];
    for &(r, t) in targets {
        if r >= rows || (t as usize) >= vocab {
            return Err(Error::contract(format!(
                "supervised position ({r},{t}) outside logits {rows}×{vocab}"
            )));
        }
        sel[r * vocab + t as usize] = E::ONE;
    }
    let logp = tape.log_softmax_lastdim(logits)?;
    let sel = tape.constant(Tensor::new(vec![rows, vocab], sel)?);
    let picked = tape.mul(logp, sel)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, E::from_f64(-1.0 / targets.len() as f64)))
}

// ── Cost walking ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params: ParamCounts,
    pub macs_by_scope: BTreeMap<String, u128>,
    pub macs_total: u128,
    pub macs_sa_attention: u128,
    pub macs_fusion_attention: u128,
    pub macs_ffn: u128,
    pub macs_image_ffn: u128,
    pub macs_qformer: u128,
    pub macs_embed_head: u128,
    pub peak_scratch_scalars: usize,
}

/// Rebuild a sequence with the same window geometry as `layout`: token ids
/// are zeros and each window's image run becomes one block.
fn sequence_from_layout<E: Scalar>(layout: &WindowLayout, d: usize) -> MultimodalSequence<E> {
    let mut events = Vec::new();
    let mut boundaries = Vec::new();
    let mut cur_sample = usize::MAX;
    for w in &layout.windows {
        if w.sample != cur_sample {
            boundaries.push(events.len());
            cur_sample = w.sample;
        }
        if w.image_len() > 0 {
            events.push(TokenEvent::ImageBlock {
                embeddings: Tensor::zeros(vec![w.image_len(), d]),
            });
        }
        for _ in 0..w.text_len() {
            events.push(TokenEvent::Text(0));
        }
    }
    MultimodalSequence { events, sample_boundaries: boundaries }
}

/// Exact multiply-accumulate counts per stack component, measured by
/// walking a real forward pass over a sequence with `layout`'s geometry,
/// plus parameter counts by group.
pub fn count_flops_and_params(cfg: &FusionConfig, layout: &WindowLayout) -> Result<CostReport> {
    cfg.validate()?;
    let seq = sequence_from_layout::<f32>(layout, cfg.d_model);
    let mut rng = RngStream::new(0);
    let stack = LayerStack::<f32>::init(cfg.clone(), &mut rng)?;
    let pass = stack.forward(
        &seq,
        &ForwardOptions { inference: true, ..Default::default() },
    )?;
    let macs_by_scope = pass.tape.macs_by_scope();
    let class_sum = |suffix: &str| -> u128 {
        macs_by_scope
            .iter()
            .filter(|(k, _)| k.rsplit('.').next() == Some(suffix))
            .map(|(_, &v)| v)
            .sum()
    };
    let macs_total = pass.tape.total_macs();
    Ok(CostReport {
        params: param_counts(cfg)?,
        macs_sa_attention: class_sum("sa"),
        macs_fusion_attention: class_sum("casa") + class_sum("ca"),
        macs_ffn: class_sum("ffn"),
        macs_image_ffn: class_sum("img_ffn"),
        macs_qformer: macs_by_scope.get("qf").copied().unwrap_or(0),
        macs_embed_head: macs_by_scope.get("embed").copied().unwrap_or(0)
            + macs_by_scope.get("head").copied().unwrap_or(0),
        macs_total,
        peak_scratch_scalars: pass.tape.max_scratch_scalars(),
        macs_by_scope,
    })
}
