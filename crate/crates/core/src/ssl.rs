//! Pretext objectives: image-tabular contrastive alignment and image-tabular
//! matching with in-batch hard negatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Linear, ParamStore};
use crate::tensor::Tensor;

/// Probability clamp for the matching loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub tau: f64,
    /// L2-normalize projected embeddings before the similarity dot product.
    pub l2_normalize: bool,
    /// Detach mined negative embeddings before re-running fusion.
    pub stop_gradient_negatives: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self { tau: 0.1, l2_normalize: true, stop_gradient_negatives: false }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionHeads {
    pub image: Linear,
    pub table: Linear,
}

impl ProjectionHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, d_proj: usize, std: f64, rng: &mut R) -> Self {
        Self {
            image: Linear::new(store, "proj.image", d_model, d_proj, std, rng),
            table: Linear::new(store, "proj.table", d_model, d_proj, std, rng),
        }
    }

    /// Global embeddings `(f̂_i, f̂_t)`, each `batch × D_p`.
    ///
    /// `image_tokens` holds `batch` blocks of `C_i` rows; `table_tokens` holds
    /// `batch` blocks of `seq_len` rows whose first row is the class token.
    pub fn project_global(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        image_tokens: Var,
        table_tokens: Var,
        batch: usize,
        seq_len: usize,
        normalize: bool,
    ) -> Result<(Var, Var)> {
        let pooled = pool_images(g, image_tokens, batch)?;
        let cls = class_rows(g, table_tokens, batch, seq_len)?;
        let fi = self.image.forward(g, b, pooled)?;
        let ft = self.table.forward(g, b, cls)?;
        if normalize {
            Ok((g.l2_normalize_rows(fi)?, g.l2_normalize_rows(ft)?))
        } else {
            Ok((fi, ft))
        }
    }
}

/// Per-sample mean over the image tokens: `batch·C_i × D` to `batch × D`.
pub fn pool_images(g: &mut Graph, image_tokens: Var, batch: usize) -> Result<Var> {
    let rows = g.value(image_tokens).rows();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape(format!("{rows} image token rows for batch {batch}")));
    }
    let ci = rows / batch;
    let pooled = (0..batch)
        .map(|s| {
            let block = g.slice_rows(image_tokens, s * ci, ci)?;
            g.mean_pool(block, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&pooled)
}

/// Class-token rows (offset 0 of each tabular sequence).
pub fn class_rows(g: &mut Graph, table_tokens: Var, batch: usize, seq_len: usize) -> Result<Var> {
    let rows = g.value(table_tokens).rows();
    if rows != batch * seq_len {
        return Err(Error::Shape(format!("{rows} tabular rows for batch {batch} of length {seq_len}")));
    }
    let idx: Vec<usize> = (0..batch).map(|s| s * seq_len).collect();
    g.gather_rows(table_tokens, &idx)
}

/// `L = −(1/2B)·Σ_b [log softmax_j(f̂_i[b]·f̂_t[j]/τ)_b + log softmax_j(f̂_t[b]·f̂_i[j]/τ)_b]`.
pub fn itc_loss(g: &mut Graph, fi: Var, ft: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (bi, di) = g.value(fi).dims2()?;
    let (bt, dt) = g.value(ft).dims2()?;
    if bi != bt || di != dt {
        return Err(Error::Shape(format!(
            "contrastive embeddings {:?} and {:?} differ",
            g.value(fi).shape(),
            g.value(ft).shape()
        )));
    }
    let ftt = g.transpose(ft)?;
    let sim = g.matmul(fi, ftt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let logits_t = g.transpose(logits)?;
    let diag: Vec<usize> = (0..bi).collect();
    let li = g.log_softmax_rows(logits)?;
    let li = g.pick_per_row(li, &diag)?;
    let lt = g.log_softmax_rows(logits_t)?;
    let lt = g.pick_per_row(lt, &diag)?;
    let both = g.concat_rows(&[li, lt])?;
    let s = g.sum(both)?;
    g.scale(s, -1.0 / (2.0 * bi as f64))
}

/// One mined negative: the image of sample `image` paired with the table of sample `table`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativePair {
    pub image: usize,
    pub table: usize,
}

/// Positive pairs are implicit (`(b, b)` for every sample); negatives hold one
/// substitution per sample, so `N_1 = N_2 = B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItmBatch {
    pub batch: usize,
    pub negatives: Vec<NegativePair>,
}

impl ItmBatch {
    pub fn n_positive(&self) -> usize {
        self.batch
    }

    pub fn n_negative(&self) -> usize {
        self.negatives.len()
    }

    /// `1` for the positives followed by `0` for the negatives.
    pub fn labels(&self) -> Vec<u8> {
        let mut l = vec![1; self.batch];
        l.extend(std::iter::repeat(0).take(self.negatives.len()));
        l
    }
}

/// Hard negatives by dot-product similarity. Even samples keep their image and
/// take the most similar foreign table; odd samples keep their table and take
/// the most similar foreign image. Ties go to the lowest index.
pub fn mine_negatives(fi: &Tensor, ft: &Tensor) -> Result<ItmBatch> {
    let (b, d) = fi.dims2()?;
    if ft.dims2()? != (b, d) {
        return Err(Error::Shape(format!("embeddings {:?} and {:?} differ", fi.shape(), ft.shape())));
    }
    if b < 2 {
        return Err(Error::BatchSize(format!("negative mining needs at least 2 samples, got {b}")));
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let most_similar = |anchor: &[f64], pool: &Tensor, skip: usize| {
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for j in (0..b).filter(|&j| j != skip) {
            let s = dot(anchor, pool.row(j));
            if best == usize::MAX || s > best_score {
                best = j;
                best_score = s;
            }
        }
        best
    };
    let negatives = (0..b)
        .map(|s| {
            if s % 2 == 0 {
                NegativePair { image: s, table: most_similar(fi.row(s), ft, s) }
            } else {
                NegativePair { image: most_similar(ft.row(s), fi, s), table: s }
            }
        })
        .collect();
    Ok(ItmBatch { batch: b, negatives })
}

/// `−(1/N)[Σ log p⁺ + Σ log(1 − p⁻)]` with probabilities clamped to `[1e-7, 1 − 1e-7]`.
/// Either side may be `None`; both absent is an input error.
pub fn itm_loss(g: &mut Graph, p_pos: Option<Var>, p_neg: Option<Var>) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    let mut n = 0;
    if let Some(p) = p_pos {
        n += g.value(p).numel();
        let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let l = g.ln(c)?;
        terms.push(g.sum(l)?);
    }
    if let Some(p) = p_neg {
        n += g.value(p).numel();
        let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let neg = g.scale(c, -1.0)?;
        let one = g.constant(Tensor::ones(g.value(p).shape()));
        let q = g.add(neg, one)?;
        let l = g.ln(q)?;
        terms.push(g.sum(l)?);
    }
    if terms.is_empty() {
        return Err(Error::Input("matching loss needs at least one probability".into()));
    }
    let total = if terms.len() == 1 { terms[0] } else { g.add(terms[0], terms[1])? };
    g.scale(total, -1.0 / n as f64)
}

/// `½(L_itc + L_itm)`.
pub fn total_loss(g: &mut Graph, itc: Var, itm: Var) -> Result<Var> {
    let s = g.add(itc, itm)?;
    g.scale(s, 0.5)
}
