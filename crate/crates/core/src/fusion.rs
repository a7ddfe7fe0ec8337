//! Image encoder, unified self-attention fusion and prediction heads.
//!
//! Fusion layout per sample, fixed everywhere in the crate:
//! `[image tokens (C_i) | class | tabular tokens (C_t) | padding (L_max − C_t)]`.
//! The class token therefore sits at offset `C_i` of every fused sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Graph, Var};
use crate::params::{mask_rows, Binder, FeedForward, LayerNorm, Linear, ParamStore, SelfAttention};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ImageStem {
    /// Non-overlapping `p × p` patches.
    Patch,
    /// `K × K` kernels at stride `p` with symmetric zero padding `(K − p) / 2`.
    Conv { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    pub channels: usize,
    pub size: usize,
    pub patch: usize,
    pub stem: ImageStem,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { channels: 1, size: 16, patch: 4, stem: ImageStem::Patch }
    }
}

impl ImageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.size == 0 || self.patch == 0 || self.size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch {}",
                self.size, self.patch
            )));
        }
        if let ImageStem::Conv { kernel } = self.stem {
            if kernel < self.patch || (kernel - self.patch) % 2 != 0 {
                return Err(Error::Config(format!(
                    "conv kernel {kernel} must be >= patch {} with even difference",
                    self.patch
                )));
            }
        }
        Ok(())
    }

    /// Image token count `C_i = (S / p)²`.
    pub fn n_tokens(&self) -> usize {
        (self.size / self.patch).pow(2)
    }

    pub fn kernel(&self) -> usize {
        match self.stem {
            ImageStem::Patch => self.patch,
            ImageStem::Conv { kernel } => kernel,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel() * self.kernel()
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }
}

/// A synthetic `C × S × S` scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub grid: Tensor,
}

impl ToyImage {
    pub fn new(channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self { grid: Tensor::new(vec![channels, size, size], data)? })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self { grid: Tensor::zeros(&[channels, size, size]) }
    }
}

/// Unfolds a `C × S × S` grid into `C_i` rows of `C·K·K` values.
pub fn patchify(pixels: &[f64], cfg: &ImageConfig) -> Result<Vec<f64>> {
    if pixels.len() != cfg.pixels() {
        return Err(Error::Shape(format!("image has {} values, expected {}", pixels.len(), cfg.pixels())));
    }
    let (c, s, p, k) = (cfg.channels, cfg.size, cfg.patch, cfg.kernel());
    let pad = (k - p) / 2;
    let grid = s / p;
    let mut out = Vec::with_capacity(cfg.n_tokens() * cfg.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for ch in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let y = (py * p + dy) as isize - pad as isize;
                        let x = (px * p + dx) as isize - pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < s && (x as usize) < s;
                        out.push(if inside { pixels[(ch * s + y as usize) * s + x as usize] } else { 0.0 });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch stem followed by a per-token GELU MLP, standing in for a volumetric CNN
/// plus its projection layer.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageConfig,
    pub stem: Linear,
    pub projection: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ImageConfig, d_model: usize, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem_std = 1.0 / (config.patch_dim() as f64).sqrt();
        Ok(Self {
            config: config.clone(),
            stem: Linear::new(store, "image.stem", config.patch_dim(), d_model, stem_std, rng),
            projection: Linear::new(store, "image.projection", d_model, d_model, std, rng),
        })
    }

    /// Encodes `batch` images given as rows of `C·S·S` pixels; returns `batch·C_i × D`.
    pub fn encode(&self, g: &mut Graph, b: &mut Binder, images: &Tensor) -> Result<Var> {
        let (n, px) = images.dims2()?;
        if px != self.config.pixels() {
            return Err(Error::Shape(format!(
                "images {:?} do not match {}×{}×{}",
                images.shape(),
                self.config.channels,
                self.config.size,
                self.config.size
            )));
        }
        let mut patches = Vec::with_capacity(n * self.config.n_tokens() * self.config.patch_dim());
        for i in 0..n {
            patches.extend(patchify(images.row(i), &self.config)?);
        }
        let x = g.constant(Tensor::matrix(n * self.config.n_tokens(), self.config.patch_dim(), patches)?);
        let h = self.stem.forward(g, b, x)?;
        let h = g.gelu(h)?;
        self.projection.forward(g, b, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width; `0` means `2 · d_model`.
    pub hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, hidden: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub blocks: Vec<FusionBlock>,
    /// `D → 1` image-table matching head.
    pub match_head: Linear,
    /// `D → K` classification head.
    pub class_head: Linear,
    pub image_tokens: usize,
    pub table_len: usize,
}

/// Fused sequences for a batch.
pub struct Fused {
    /// `batch·(C_i + L_max + 1) × D`.
    pub tokens: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub class_offset: usize,
}

impl Fused {
    pub fn class_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|s| s * self.seq_len + self.class_offset).collect()
    }
}

impl FusionModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &FusionConfig,
        d_model: usize,
        image_tokens: usize,
        table_len: usize,
        n_classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = if config.hidden == 0 { 2 * d_model } else { config.hidden };
        let blocks = (0..config.n_layers)
            .map(|l| {
                let name = format!("fusion.block{l}");
                Ok(FusionBlock {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model),
                    attn: SelfAttention::new(store, &format!("{name}.attn"), d_model, config.n_heads, std, rng)?,
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, hidden, std, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            match_head: Linear::new(store, "fusion.match_head", d_model, 1, std, rng),
            class_head: Linear::new(store, "fusion.class_head", d_model, n_classes, std, rng),
            image_tokens,
            table_len,
        })
    }

    /// Concatenates per-sample image and tabular tokens and runs the fusion blocks.
    /// `table_valid` flags every row of `f_t`; image tokens are always valid.
    pub fn fuse(&self, g: &mut Graph, b: &mut Binder, f_i: Var, f_t: Var, table_valid: &[bool]) -> Result<Fused> {
        let (ci, lt) = (self.image_tokens, self.table_len);
        let (ir, d) = g.value(f_i).dims2()?;
        let (tr, td) = g.value(f_t).dims2()?;
        if td != d || ir % ci != 0 || tr % lt != 0 || ir / ci != tr / lt || table_valid.len() != tr {
            return Err(Error::Shape(format!(
                "fuse: image tokens {:?}, tabular tokens {:?}, {} validity flags",
                g.value(f_i).shape(),
                g.value(f_t).shape(),
                table_valid.len()
            )));
        }
        let batch = ir / ci;
        let seq = ci + lt;
        let both = g.concat_rows(&[f_i, f_t])?;
        let mut idx = Vec::with_capacity(batch * seq);
        let mut valid = Vec::with_capacity(batch * seq);
        for s in 0..batch {
            idx.extend(s * ci..(s + 1) * ci);
            valid.extend(std::iter::repeat(true).take(ci));
            idx.extend((s * lt..(s + 1) * lt).map(|r| ir + r));
            valid.extend_from_slice(&table_valid[s * lt..(s + 1) * lt]);
        }
        let mut x = g.gather_rows(both, &idx)?;
        let mask = AttentionMask::self_attention(batch, valid.clone());
        for block in &self.blocks {
            let h = block.attn_norm.forward(g, b, x)?;
            let a = block.attn.forward(g, b, h, &mask)?;
            let a = mask_rows(g, a, &valid)?;
            x = g.add(x, a)?;
            let h = block.ffn_norm.forward(g, b, x)?;
            let f = block.ffn.forward(g, b, h)?;
            let f = mask_rows(g, f, &valid)?;
            x = g.add(x, f)?;
        }
        Ok(Fused { tokens: x, batch, seq_len: seq, class_offset: ci })
    }

    pub fn class_tokens(&self, g: &mut Graph, fused: &Fused) -> Result<Var> {
        g.gather_rows(fused.tokens, &fused.class_rows())
    }

    /// Class-token logits, `batch × K`.
    pub fn classify(&self, g: &mut Graph, b: &mut Binder, fused: &Fused) -> Result<Var> {
        let cls = self.class_tokens(g, fused)?;
        self.class_head.forward(g, b, cls)
    }

    /// Matching probabilities `sigmoid(linear(class token))`, `batch × 1`.
    pub fn match_score(&self, g: &mut Graph, b: &mut Binder, fused: &Fused) -> Result<Var> {
        let cls = self.class_tokens(g, fused)?;
        let logit = self.match_head.forward(g, b, cls)?;
        g.sigmoid(logit)
    }
}
