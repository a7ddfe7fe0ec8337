//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All learnable tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter `{name}` registered twice");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Binds store parameters into one graph, creating each leaf at most once.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable = false` binds parameters as constants (evaluation mode).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, vars: vec![None; store.len()], trainable }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients per parameter after `g.backward`; unbound or unreached
    /// parameters get zeros.
    pub fn gradients(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| g.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.tensors[i].shape()))
            })
            .collect()
    }
}

/// `y = x·W + b` with `W: in×out`; the bias is optional.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let mut l = Self::without_bias(store, name, fan_in, fan_out, std, rng);
        l.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        l
    }

    pub fn without_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let bias = b.var(g, bias);
                g.add(y, bias)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let gain = b.var(g, self.gain);
        let bias = b.var(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer feed-forward network: linear, GELU, linear.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, std, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let h = self.up.forward(g, b, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, b, h)
    }
}

/// Multi-head self-attention projections.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, std, rng),
            // A key bias shifts every logit of a query row equally, so it cannot
            // change the softmax.
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, std, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, std, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, std, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, mask: &crate::graph::AttentionMask) -> Result<Var> {
        let q = self.query.forward(g, b, x)?;
        let k = self.key.forward(g, b, x)?;
        let v = self.value.forward(g, b, x)?;
        let a = g.masked_attention(q, k, v, mask, self.heads)?;
        self.output.forward(g, b, a)
    }
}

/// Zeroes invalid rows of `x` using a constant 0/1 column.
pub fn mask_rows(g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        return Ok(x);
    }
    let m = g.constant(Tensor::from_parts(
        vec![valid.len(), 1],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    ));
    g.scale_rows(x, m)
}

/// Worst coordinate of a parameter-wide gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Central-difference check of the tape gradient of `loss` with respect to every
/// parameter coordinate in `store`.
pub fn grad_check_params<F>(store: &ParamStore, loss: F, eps: f64) -> Result<ParamGradCheck>
where
    F: Fn(&mut Graph, &mut Binder) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binder::new(store, true);
    let l = loss(&mut g, &mut b)?;
    g.backward(l)?;
    let analytic = b.gradients(&g);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(s, false);
        let l = loss(&mut g, &mut b)?;
        Ok(g.value(l).item())
    };
    let mut report = ParamGradCheck { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0, checked: 0 };
    let mut probe = store.clone();
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let x = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x;
            let (a, n) = (analytic[id.0].data()[i], (up - down) / (2.0 * eps));
            let err = crate::graph::relative_error(a, n);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}
