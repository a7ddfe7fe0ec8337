//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation as a node appended in evaluation order,
//! so the node vector is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse and accumulates gradients in that fixed order,
//! which keeps results bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, transpose_data, Tensor};

/// Additive bias applied to attention logits of invalid keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Validity flags for a batch of attention sequences stacked along rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    /// Number of sequences stacked in the query/key matrices.
    pub batch: usize,
    pub query_valid: Vec<bool>,
    pub key_valid: Vec<bool>,
}

impl AttentionMask {
    /// Self-attention mask: queries and keys share one validity vector.
    pub fn self_attention(batch: usize, valid: Vec<bool>) -> Self {
        Self { batch, query_valid: valid.clone(), key_valid: valid }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Mean { x: Var, axis: usize },
    Sum(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    PickPerRow { x: Var, index: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_leaf: bool,
}

/// A single-threaded computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, is_leaf: true });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` for leaves that do
    /// not require gradients or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite()?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, is_leaf: false });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a])
    }

    fn broadcast_check(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        if ac != bc || !(br == ar || br == 1) {
            return Err(Error::Shape(format!(
                "{name}: incompatible shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv[i % bv.len()]).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Hadamard product; `b` may be a single row broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv[i % bv.len()]).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies row `i` of `a` by the scalar `s[i]`; `s` has one entry per row.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if self.value(s).numel() != r {
            return Err(Error::Shape(format!(
                "scale_rows: {:?} needs {r} row scales, got {:?}",
                self.value(a).shape(),
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x * sv[i / c]).collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push(out, Op::ScaleRows(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Shape(format!(
                "layer_norm over {c} features got gain {:?} and bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        self.push(out, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Natural logarithm; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Ln(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    /// Arithmetic mean along `axis` (0 = over rows, 1 = over columns).
    /// Axis 0 yields a `1×c` row, axis 1 an `r×1` column.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let xv = self.value(x).data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, v) in acc.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![1, c], acc.into_iter().map(|v| v / r as f64).collect())
            }
            1 => Tensor::from_parts(
                vec![r, 1],
                (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect(),
            ),
            _ => return Err(Error::Shape(format!("mean_pool axis {axis} on a matrix"))),
        };
        self.push(out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!("slice rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.dims(p)?.1,
            None => return Err(Error::Shape("concat of zero tensors".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::Shape(format!("concat rows: widths {c} and {pc} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Output row `i` is row `index[i]` of `x`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if index.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![index.len(), c], data);
        self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    /// Picks `x[i, index[i]]` for each row, giving an `r×1` column.
    pub fn pick_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if index.len() != r {
            return Err(Error::Shape(format!("pick_per_row: {r} rows, {} indices", index.len())));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(Error::OutOfRange { index: j, len: c });
            }
            data.push(xv[i * c + j]);
        }
        let out = Tensor::from_parts(vec![r, 1], data);
        self.push(out, Op::PickPerRow { x, index: index.to_vec() }, &[x])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite(format!("row {i} has zero norm")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::from_parts(vec![r, c], data);
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention over `mask.batch` stacked sequences.
    ///
    /// `q` holds `batch·n` rows and `k`, `v` hold `batch·m` rows, all of width `D`.
    /// Invalid keys get [`MASK_BIAS`] added to their logits; invalid query rows
    /// produce zeros.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Var> {
        let (qr, d) = self.dims(q)?;
        let (kr, kd) = self.dims(k)?;
        let (vr, vd) = self.dims(v)?;
        if kd != d || vd != d || vr != kr {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        let b = mask.batch;
        if b == 0 || qr % b != 0 || kr % b != 0 {
            return Err(Error::Shape(format!("{qr} query / {kr} key rows for batch {b}")));
        }
        if mask.query_valid.len() != qr || mask.key_valid.len() != kr {
            return Err(Error::Shape(format!(
                "mask lengths {}/{} for {qr} queries and {kr} keys",
                mask.query_valid.len(),
                mask.key_valid.len()
            )));
        }
        let (n, m) = (qr / b, kr / b);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; b * heads * n * m];
        let mut logits = vec![0.0; m];
        for s in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = s * n + i;
                    if !mask.query_valid[qi] {
                        continue;
                    }
                    let qrow = &qv[qi * d + off..qi * d + off + dh];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = s * m + j;
                        let krow = &kv[kj * d + off..kj * d + off + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *l = dot * scale + if mask.key_valid[kj] { 0.0 } else { MASK_BIAS };
                    }
                    softmax_in_place(&mut logits);
                    let pbase = ((s * heads + h) * n + i) * m;
                    probs[pbase..pbase + m].copy_from_slice(&logits);
                    let orow = &mut out[qi * d + off..qi * d + off + dh];
                    for (j, &a) in logits.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let vj = s * m + j;
                        for (o, x) in orow.iter_mut().zip(&vv[vj * d + off..vj * d + off + dh]) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![qr, d], out);
        let op = Op::Attention { q, k, v, heads, mask: mask.clone(), probs };
        self.push(out, op, &[q, k, v])
    }

    /// Reverse pass from a scalar loss. Populates gradients of every leaf that
    /// requires them; leaf gradients from earlier calls are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.is_leaf || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads)?;
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.is_leaf && node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        // Lazily allocates the gradient buffer of `v` when it needs one.
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<usize> {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; n.value.numel()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, nn) = self.dims(*b)?;
                if let Some(i) = slot(grads, *a) {
                    let g = grads[i].as_mut().unwrap();
                    matmul_nt_into(gout, self.value(*b).data(), g, m, nn, k);
                }
                if let Some(i) = slot(grads, *b) {
                    let g = grads[i].as_mut().unwrap();
                    matmul_tn_into(self.value(*a).data(), gout, g, m, k, nn);
                }
            }
            Op::Transpose(a) => {
                if let Some(i) = slot(grads, *a) {
                    let (r, c) = node.value.dims2()?;
                    let t = transpose_data(gout, r, c);
                    add_into(grads[i].as_mut().unwrap(), &t);
                }
            }
            Op::Add(a, b) => {
                if let Some(i) = slot(grads, *a) {
                    add_into(grads[i].as_mut().unwrap(), gout);
                }
                if let Some(i) = slot(grads, *b) {
                    let g = grads[i].as_mut().unwrap();
                    let bl = g.len();
                    for (j, x) in gout.iter().enumerate() {
                        g[j % bl] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bl = bv.len();
                if let Some(i) = slot(grads, *a) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j] += x * bv[j % bl];
                    }
                }
                if let Some(i) = slot(grads, *b) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j % bl] += x * av[j];
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let c = self.value(*a).cols();
                let av = self.value(*a).data();
                let sv = self.value(*s).data();
                if let Some(i) = slot(grads, *a) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j] += x * sv[j / c];
                    }
                }
                if let Some(i) = slot(grads, *s) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j / c] += x * av[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(i) = slot(grads, *a) {
                    for (g, x) in grads[i].as_mut().unwrap().iter_mut().zip(gout) {
                        *g += x * s;
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(i) = slot(grads, *a) {
                    let av = self.value(*a).data();
                    let g = grads[i].as_mut().unwrap();
                    for j in 0..g.len() {
                        let x = av[j];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g[j] += gout[j] * d;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = self.dims(*x)?;
                let gv = self.value(*gain).data();
                if let Some(i) = slot(grads, *x) {
                    let g = grads[i].as_mut().unwrap();
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let base = row * c;
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dxhat[j] = gout[base + j] * gv[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xhat[base + j];
                        }
                        let inv = inv_std[row];
                        for j in 0..c {
                            g[base + j] += inv / c as f64
                                * (c as f64 * dxhat[j] - sum - xhat[base + j] * dot);
                        }
                    }
                }
                if let Some(i) = slot(grads, *gain) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j % c] += x * xhat[j];
                    }
                }
                if let Some(i) = slot(grads, *bias) {
                    let g = grads[i].as_mut().unwrap();
                    for (j, x) in gout.iter().enumerate() {
                        g[j % c] += x;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(i) = slot(grads, *a) {
                    let c = node.value.cols();
                    let g = grads[i].as_mut().unwrap();
                    for (row, (y, dy)) in out.chunks(c).zip(gout.chunks(c)).enumerate() {
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[row * c + j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if let Some(i) = slot(grads, *a) {
                    let c = node.value.cols();
                    let g = grads[i].as_mut().unwrap();
                    for (row, (y, dy)) in out.chunks(c).zip(gout.chunks(c)).enumerate() {
                        let total: f64 = dy.iter().sum();
                        for j in 0..c {
                            g[row * c + j] += dy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(i) = slot(grads, *a) {
                    for ((g, y), dy) in grads[i].as_mut().unwrap().iter_mut().zip(out).zip(gout) {
                        *g += dy * y * (1.0 - y);
                    }
                }
            }
            Op::Ln(a) => {
                if let Some(i) = slot(grads, *a) {
                    let av = self.value(*a).data();
                    for ((g, x), dy) in grads[i].as_mut().unwrap().iter_mut().zip(av).zip(gout) {
                        *g += dy / x;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(i) = slot(grads, *a) {
                    let av = self.value(*a).data();
                    for ((g, x), dy) in grads[i].as_mut().unwrap().iter_mut().zip(av).zip(gout) {
                        if *x >= *lo && *x <= *hi {
                            *g += dy;
                        }
                    }
                }
            }
            Op::Mean { x, axis } => {
                if let Some(i) = slot(grads, *x) {
                    let (r, c) = self.dims(*x)?;
                    let g = grads[i].as_mut().unwrap();
                    for row in 0..r {
                        for j in 0..c {
                            g[row * c + j] += if *axis == 0 {
                                gout[j] / r as f64
                            } else {
                                gout[row] / c as f64
                            };
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(i) = slot(grads, *a) {
                    grads[i].as_mut().unwrap().iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(i) = slot(grads, *x) {
                    let c = node.value.cols();
                    let g = grads[i].as_mut().unwrap();
                    add_into(&mut g[start * c..start * c + gout.len()], gout);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(i) = slot(grads, p) {
                        add_into(grads[i].as_mut().unwrap(), &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index } => {
                if let Some(i) = slot(grads, *x) {
                    let c = node.value.cols();
                    let g = grads[i].as_mut().unwrap();
                    for (row, &src) in index.iter().enumerate() {
                        add_into(&mut g[src * c..(src + 1) * c], &gout[row * c..(row + 1) * c]);
                    }
                }
            }
            Op::PickPerRow { x, index } => {
                if let Some(i) = slot(grads, *x) {
                    let c = self.value(*x).cols();
                    let g = grads[i].as_mut().unwrap();
                    for (row, &j) in index.iter().enumerate() {
                        g[row * c + j] += gout[row];
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if let Some(i) = slot(grads, *x) {
                    let c = node.value.cols();
                    let g = grads[i].as_mut().unwrap();
                    for (row, (y, dy)) in out.chunks(c).zip(gout.chunks(c)).enumerate() {
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[row * c + j] += (dy[j] - y[j] * dot) / norms[row];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                self.attention_backward(*q, *k, *v, *heads, mask, probs, gout, grads, &slot)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        slot: &dyn Fn(&mut [Option<Vec<f64>>], Var) -> Option<usize>,
    ) -> Result<()> {
        let (qr, d) = self.dims(q)?;
        let kr = self.value(k).rows();
        let b = mask.batch;
        let (n, m) = (qr / b, kr / b);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = vec![0.0; qr * d];
        let mut dk = vec![0.0; kr * d];
        let mut dv = vec![0.0; kr * d];
        let mut ds = vec![0.0; m];
        for s in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = s * n + i;
                    if !mask.query_valid[qi] {
                        continue;
                    }
                    let pbase = ((s * heads + h) * n + i) * m;
                    let a = &probs[pbase..pbase + m];
                    let go = &gout[qi * d + off..qi * d + off + dh];
                    let mut r = 0.0;
                    for j in 0..m {
                        let vj = s * m + j;
                        let da: f64 =
                            go.iter().zip(&vv[vj * d + off..vj * d + off + dh]).map(|(x, y)| x * y).sum();
                        ds[j] = da;
                        r += a[j] * da;
                    }
                    for j in 0..m {
                        if a[j] == 0.0 {
                            continue;
                        }
                        let kj = s * m + j;
                        let dsj = a[j] * (ds[j] - r) * scale;
                        for t in 0..dh {
                            dq[qi * d + off + t] += dsj * kv[kj * d + off + t];
                            dk[kj * d + off + t] += dsj * qv[qi * d + off + t];
                            dv[kj * d + off + t] += a[j] * go[t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(i) = slot(grads, var) {
                add_into(grads[i].as_mut().unwrap(), &delta);
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relative error used by every gradient check:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central differences
/// and returns the largest relative error over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
