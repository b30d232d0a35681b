//! Reverse-mode autodiff on a Wengert tape.
//!
//! A `Tape` owns every intermediate tensor of one forward pass. Ops append
//! nodes and return `Var` handles; `backward` walks the tape in reverse and
//! accumulates gradients in a fixed order, so repeated runs are bit-identical
//! at a given element type. The op set is deliberately small: matmul, add,
//! mul, scale, gelu, tanh, softmax / log-softmax, layernorm, row gather /
//! concat / slice, masked fill, rotary embedding, sum, reshape, permute.
//!
//! Nodes carry a scope tag (set via [`Tape::set_scope`]) used by the cost
//! model to attribute multiply-accumulate counts to model phases, and the
//! tape tracks the largest single intermediate buffer, which the streaming
//! ledger reports as peak scratch.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_into, Scalar, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op<E: Scalar> {
    Leaf,
    /// Batched matrix product: leading dims equal, trailing [m,k]·[k,n].
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    /// Elementwise add; rhs may broadcast if its shape is a suffix of lhs's
    /// (or rhs is a single scalar).
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    Gelu { a: Var },
    Tanh { a: Var },
    /// Softmax over the last axis. Rows whose inputs are all -inf produce a
    /// uniform distribution and are flagged (see [`Tape::softmax_flags`]).
    Softmax { a: Var, flagged: Arc<Vec<usize>> },
    LogSoftmax { a: Var, flagged: Arc<Vec<usize>> },
    Layernorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// out[i] = x[idx[i]]; backward scatter-adds. Doubles as embedding gather.
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, len: usize },
    /// out = mask ? fill : x. Gradient is zero at filled positions.
    MaskedFill { x: Var, mask: Arc<Vec<bool>> },
    /// Rotary embedding: adjacent even/odd pairs of each head_dim chunk are
    /// rotated by angle pos·base^(-2j/head_dim). Position 0 is the identity.
    Rope { x: Var, positions: Arc<Vec<usize>>, head_dim: usize, base: f64 },
    SumAll { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    op: Op<E>,
    shape: Vec<usize>,
    value: Vec<E>,
    requires_grad: bool,
    scope: u32,
}

/// Gradients keyed by tape position. Vars that never influenced the loss
/// have no entry; `dense` materializes those as zeros.
#[derive(Debug)]
pub struct GradMap<E: Scalar> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> GradMap<E> {
    pub fn get(&self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap())
    }

    /// Gradient of `v`, or a zero tensor of its shape if the loss never saw it.
    pub fn dense(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    scopes: Vec<String>,
    cur_scope: u32,
    max_node_numel: usize,
    total_node_numel: usize,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: vec!["(root)".to_string()],
            cur_scope: 0,
            max_node_numel: 0,
            total_node_numel: 0,
        }
    }

    // ── Scopes and accounting ───────────────────────────────────────────

    /// Tag subsequent nodes with a phase label (interned; repeated labels
    /// share one bucket). Returns the previous scope for restoration.
    pub fn set_scope(&mut self, label: &str) -> u32 {
        let prev = self.cur_scope;
        self.cur_scope = match self.scopes.iter().position(|s| s == label) {
            Some(i) => i as u32,
            None => {
                self.scopes.push(label.to_string());
                (self.scopes.len() - 1) as u32
            }
        };
        prev
    }

    pub fn restore_scope(&mut self, id: u32) {
        self.cur_scope = id;
    }

    /// Multiply-accumulate counts per scope label. Only matmul nodes carry
    /// MACs; elementwise ops are excluded by convention.
    pub fn macs_by_scope(&self) -> BTreeMap<String, u128> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Matmul { batch, m, k, n, .. } = node.op {
                let macs = batch as u128 * m as u128 * k as u128 * n as u128;
                *out.entry(self.scopes[node.scope as usize].clone())
                    .or_insert(0) += macs;
            }
        }
        out
    }

    pub fn total_macs(&self) -> u128 {
        self.macs_by_scope().values().sum()
    }

    /// Largest single intermediate buffer allocated so far, in scalars.
    /// Leaves (inputs and weights) are excluded: this measures scratch.
    pub fn max_scratch_scalars(&self) -> usize {
        self.max_node_numel
    }

    /// Total scalars allocated for intermediates so far.
    pub fn total_scratch_scalars(&self) -> usize {
        self.total_node_numel
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Node access ─────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone()).unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Rows flagged by a softmax / log-softmax node (all-(-inf) input rows
    /// that fell back to the uniform distribution). None for other ops.
    pub fn softmax_flags(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Softmax { flagged, .. } | Op::LogSoftmax { flagged, .. } => {
                Some(flagged.as_slice())
            }
            _ => None,
        }
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, value: Vec<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !matches!(op, Op::Leaf) {
            self.max_node_numel = self.max_node_numel.max(value.len());
            self.total_node_numel += value.len();
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            scope: self.cur_scope,
        });
        Var(self.nodes.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), requires_grad)
    }

    /// Leaf that never takes gradient (data, masks-as-values, constants).
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![E::ZERO; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for t in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul { a, b, batch, m, k, n }, shape, out, rg))
    }

    fn broadcast_ok(sa: &[usize], sb: &[usize]) -> bool {
        sa == sb
            || (sb.len() <= sa.len() && sa.ends_with(sb))
            || sb.iter().product::<usize>() == 1
    }

    fn binary_elementwise(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
    ) -> Result<(Vec<usize>, Vec<E>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !Self::broadcast_ok(&sa, &sb) {
            return Err(Error::ShapeMismatch { op: opname, lhs: sa, rhs: sb });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let chunk = bv.len();
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % chunk]))
            .collect();
        Ok((sa, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, shape, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push(Op::Scale { a, c }, shape, out, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| gelu_val(x)).collect();
        let rg = self.requires_grad(a);
        self.push(Op::Gelu { a }, shape, out, rg)
    }

    pub fn tanh_op(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        self.push(Op::Tanh { a }, shape, out, rg)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("softmax on 0-d tensor"))?;
        if d == 0 {
            return Err(Error::contract("softmax over empty last axis"));
        }
        let av = self.value(a).to_vec();
        let mut out = vec![E::ZERO; av.len()];
        let mut flagged = Vec::new();
        for (r, (row_in, row_out)) in av.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            if softmax_row(row_in, row_out) {
                flagged.push(r);
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Op::Softmax { a, flagged: Arc::new(flagged) },
            shape,
            out,
            rg,
        ))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("log_softmax on 0-d tensor"))?;
        if d == 0 {
            return Err(Error::contract("log_softmax over empty last axis"));
        }
        let av = self.value(a).to_vec();
        let mut out = vec![E::ZERO; av.len()];
        let mut flagged = Vec::new();
        for (r, (row_in, row_out)) in av.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let m = row_in.iter().fold(E::neg_infinity(), |acc, &x| acc.max_val(x));
            if m == E::neg_infinity() {
                // All-masked row: fall back to the uniform distribution.
                let v = (E::ONE / E::from_f64(d as f64)).ln();
                row_out.fill(v);
                flagged.push(r);
                continue;
            }
            let mut sum = E::ZERO;
            for &x in row_in {
                sum = sum + (x - m).exp();
            }
            let lse = m + sum.ln();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = x - lse;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Op::LogSoftmax { a, flagged: Arc::new(flagged) },
            shape,
            out,
            rg,
        ))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).to_vec();
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut out = vec![E::ZERO; xv.len()];
        for (row, orow) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv_std) = layernorm_stats(row, eps);
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(Op::Layernorm { x, gain, bias, eps }, shape, out, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::contract(format!(
                "gather_rows needs a 2-d source, got {sx:?}"
            )));
        }
        let (rows, d) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range (source has {rows} rows)"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(x);
        let shape = vec![idx.len(), d];
        Ok(self.push(Op::GatherRows { x, idx: Arc::new(idx) }, shape, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let d = self.shape(parts[0]).last().copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            rows += sp[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, d], out, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::contract(format!(
                "slice_rows needs a 2-d source, got {sx:?}"
            )));
        }
        if start + len > sx[0] {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} out of range for {} rows",
                start + len,
                sx[0]
            )));
        }
        let d = sx[1];
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, d], out, rg))
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, fill: E) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        if mask.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::MaskedFill { x, mask: Arc::new(mask) }, shape, out, rg))
    }

    /// Rotary embedding over rows. `x` is [rows, d] with d a multiple of
    /// `head_dim` (each chunk rotated identically); `positions[r]` is the
    /// integer position of row r.
    pub fn rope(
        &mut self,
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::contract(format!("rope needs 2-d input, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0 {
            return Err(Error::config(format!(
                "rope head_dim {head_dim} must be even and divide feature dim {d}"
            )));
        }
        if positions.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: vec![rows],
                rhs: vec![positions.len()],
            });
        }
        let mut out = self.value(x).to_vec();
        rope_rows(&mut out, &positions, d, head_dim, base, false);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Op::Rope { x, positions: Arc::new(positions), head_dim, base },
            shape,
            out,
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.value(x) {
            acc = acc + v;
        }
        let rg = self.requires_grad(x);
        self.push(Op::SumAll { x }, vec![1], vec![acc], rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, shape, out, rg))
    }

    pub fn permute(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let nd = sx.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "permute {perm:?} is not a permutation of {nd} axes"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_copy(self.value(x), &sx, &perm);
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Permute { x, perm }, out_shape, out, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulation order is the reverse
    /// tape order, fixed across runs.
    pub fn backward(&self, loss: Var) -> Result<GradMap<E>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![E::ONE]);
        }
        for i in (0..=loss.0).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut grads);
            // Leaves keep their gradient; intermediates were consumed above,
            // so only restore for leaves and requires_grad bookkeeping.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Ok(GradMap {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], v: Var, delta: &[E]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(delta) {
                    *gi = *gi + di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accum_owned(&self, grads: &mut [Option<Vec<E>>], v: Var, delta: Vec<E>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, dy: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let mut da = vec![E::ZERO; av.len()];
                    for t in 0..batch {
                        // dA = dC · Bᵀ
                        matmul_acc(
                            m,
                            n,
                            k,
                            &dy[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            true,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.accum_owned(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::ZERO; bv.len()];
                    for t in 0..batch {
                        // dB = Aᵀ · dC
                        matmul_acc(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            true,
                            &dy[t * m * n..(t + 1) * m * n],
                            false,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, dy);
                if self.requires_grad(*b) {
                    let chunk = self.value(*b).len();
                    let mut db = vec![E::ZERO; chunk];
                    for (j, &d) in dy.iter().enumerate() {
                        db[j % chunk] = db[j % chunk] + d;
                    }
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let chunk = bv.len();
                if self.requires_grad(*a) {
                    let da: Vec<E> = dy
                        .iter()
                        .enumerate()
                        .map(|(j, &d)| d * bv[j % chunk])
                        .collect();
                    self.accum_owned(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::ZERO; chunk];
                    for (j, &d) in dy.iter().enumerate() {
                        db[j % chunk] = db[j % chunk] + d * av[j];
                    }
                    self.accum_owned(grads, *b, db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<E> = dy.iter().map(|&d| d * *c).collect();
                self.accum_owned(grads, *a, da);
            }
            Op::Gelu { a } => {
                if self.requires_grad(*a) {
                    let da: Vec<E> = self
                        .value(*a)
                        .iter()
                        .zip(dy)
                        .map(|(&x, &d)| d * gelu_grad(x))
                        .collect();
                    self.accum_owned(grads, *a, da);
                }
            }
            Op::Tanh { a } => {
                if self.requires_grad(*a) {
                    let da: Vec<E> = node
                        .value
                        .iter()
                        .zip(dy)
                        .map(|(&y, &d)| d * (E::ONE - y * y))
                        .collect();
                    self.accum_owned(grads, *a, da);
                }
            }
            Op::Softmax { a, .. } => {
                if self.requires_grad(*a) {
                    let d = *node.shape.last().unwrap();
                    let mut da = vec![E::ZERO; dy.len()];
                    for ((yrow, drow), orow) in node
                        .value
                        .chunks(d)
                        .zip(dy.chunks(d))
                        .zip(da.chunks_mut(d))
                    {
                        let mut dot = E::ZERO;
                        for (y, dd) in yrow.iter().zip(drow) {
                            dot = dot + *y * *dd;
                        }
                        for j in 0..d {
                            orow[j] = yrow[j] * (drow[j] - dot);
                        }
                    }
                    self.accum_owned(grads, *a, da);
                }
            }
            Op::LogSoftmax { a, .. } => {
                if self.requires_grad(*a) {
                    let d = *node.shape.last().unwrap();
                    let mut da = vec![E::ZERO; dy.len()];
                    for ((yrow, drow), orow) in node
                        .value
                        .chunks(d)
                        .zip(dy.chunks(d))
                        .zip(da.chunks_mut(d))
                    {
                        let mut sum = E::ZERO;
                        for &dd in drow {
                            sum = sum + dd;
                        }
                        for j in 0..d {
                            orow[j] = drow[j] - yrow[j].exp() * sum;
                        }
                    }
                    self.accum_owned(grads, *a, da);
                }
            }
            Op::Layernorm { x, gain, bias, eps } => {
                let d = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let inv_d = E::from_f64(1.0 / d as f64);
                let mut dx = vec![E::ZERO; xv.len()];
                let mut dg = vec![E::ZERO; d];
                let mut db = vec![E::ZERO; d];
                for (row_i, (xrow, drow)) in xv.chunks(d).zip(dy.chunks(d)).enumerate() {
                    let (mean, inv_std) = layernorm_stats(xrow, *eps);
                    let dxrow = &mut dx[row_i * d..(row_i + 1) * d];
                    let mut mean_dxh = E::ZERO;
                    let mut mean_dxh_xh = E::ZERO;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv_std;
                        let dxh = drow[j] * gv[j];
                        dg[j] = dg[j] + drow[j] * xh;
                        db[j] = db[j] + drow[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh;
                    }
                    mean_dxh = mean_dxh * inv_d;
                    mean_dxh_xh = mean_dxh_xh * inv_d;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv_std;
                        let dxh = drow[j] * gv[j];
                        dxrow[j] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std;
                    }
                }
                self.accum_owned(grads, *x, dx);
                self.accum_owned(grads, *gain, dg);
                self.accum_owned(grads, *bias, db);
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(*x) {
                    let d = *node.shape.last().unwrap();
                    let mut dx = vec![E::ZERO; self.value(*x).len()];
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dx[src * d..(src + 1) * d];
                        for (g, &dd) in dst.iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                            *g = *g + dd;
                        }
                    }
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::ConcatRows { parts } => {
                let d = *node.shape.last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    self.accum(grads, p, &dy[off * d..(off + rows) * d]);
                    off += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.requires_grad(*x) {
                    let d = *node.shape.last().unwrap();
                    let mut dx = vec![E::ZERO; self.value(*x).len()];
                    dx[start * d..(start + len) * d].copy_from_slice(dy);
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::MaskedFill { x, mask, .. } => {
                if self.requires_grad(*x) {
                    let dx: Vec<E> = dy
                        .iter()
                        .zip(mask.iter())
                        .map(|(&d, &m)| if m { E::ZERO } else { d })
                        .collect();
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::Rope { x, positions, head_dim, base } => {
                if self.requires_grad(*x) {
                    let d = *node.shape.last().unwrap();
                    let mut dx = dy.to_vec();
                    rope_rows(&mut dx, positions, d, *head_dim, *base, true);
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.requires_grad(*x) {
                    let dx = vec![dy[0]; self.value(*x).len()];
                    self.accum_owned(grads, *x, dx);
                }
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, dy);
            }
            Op::Permute { x, perm } => {
                if self.requires_grad(*x) {
                    // Gradient flows through the inverse permutation.
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let dx = permute_copy(dy, &node.shape, &inv);
                    self.accum_owned(grads, *x, dx);
                }
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

fn gelu_val<E: Scalar>(x: E) -> E {
    // tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

/// Max-subtraction softmax of one row. Returns true when the row was all
/// -inf (output falls back to uniform). Rows containing +inf put all mass
/// uniformly on the +inf entries, so ±inf inputs stay deterministic.
fn softmax_row<E: Scalar>(row_in: &[E], row_out: &mut [E]) -> bool {
    let d = row_in.len();
    let m = row_in.iter().fold(E::neg_infinity(), |acc, &x| acc.max_val(x));
    if m == E::neg_infinity() {
        let u = E::ONE / E::from_f64(d as f64);
        row_out.fill(u);
        return true;
    }
    if !m.is_finite() {
        // +inf present: split mass uniformly over the +inf entries.
        let count = row_in.iter().filter(|x| !x.is_finite() && **x > E::ZERO).count();
        let u = E::ONE / E::from_f64(count as f64);
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            *o = if !x.is_finite() && x > E::ZERO { u } else { E::ZERO };
        }
        return false;
    }
    let mut sum = E::ZERO;
    for (o, &x) in row_out.iter_mut().zip(row_in) {
        let e = (x - m).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = E::ONE / sum;
    for o in row_out.iter_mut() {
        *o = *o * inv;
    }
    false
}

/// Population mean and 1/√(var+eps) of one row, two-pass.
fn layernorm_stats<E: Scalar>(row: &[E], eps: f64) -> (E, E) {
    let inv_d = E::from_f64(1.0 / row.len() as f64);
    let mut mean = E::ZERO;
    for &x in row {
        mean = mean + x;
    }
    mean = mean * inv_d;
    let mut var = E::ZERO;
    for &x in row {
        let c = x - mean;
        var = var + c * c;
    }
    var = var * inv_d;
    let inv_std = E::ONE / (var + E::from_f64(eps)).sqrt();
    (mean, inv_std)
}

/// In-place rotary rotation of rows; `inverse` rotates by -θ (the backward).
/// Angles are computed in f64 regardless of element type.
fn rope_rows<E: Scalar>(
    data: &mut [E],
    positions: &[usize],
    d: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    let half = head_dim / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * d..(r + 1) * d];
        for chunk in row.chunks_mut(head_dim) {
            for j in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                let (sin, cos) = if inverse {
                    ((-theta).sin(), (-theta).cos())
                } else {
                    (theta.sin(), theta.cos())
                };
                let (s, c) = (E::from_f64(sin), E::from_f64(cos));
                let a = chunk[2 * j];
                let b = chunk[2 * j + 1];
                chunk[2 * j] = a * c - b * s;
                chunk[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

fn permute_copy<E: Scalar>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if data.is_empty() {
        // A zero-sized axis (e.g. a stream with no text rows) has nothing to
        // permute; the odometer below would still run its body once.
        return Vec::new();
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    'outer: loop {
        let mut off = 0;
        for (axis, &i) in idx.iter().enumerate() {
            off += i * in_strides[perm[axis]];
        }
        out.push(data[off]);
        // Odometer increment over the output shape.
        for axis in (0..nd).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                continue 'outer;
            }
            idx[axis] = 0;
        }
        break;
    }
    if data.is_empty() {
        out.clear();
    }
    out
}
