//! Semantic-aware tabular encoder.
//!
//! Each cell value goes through one shared `1 → D` projection and is then
//! multiplied elementwise by its adapted header embedding. There is no
//! positional encoding anywhere in this path, so column order carries no
//! information: permuting `(value, header)` pairs permutes the output tokens.
//!
//! Sequence layout per sample: `[class, col_1, …, col_Ct, mask, …, mask]`,
//! padded to `L_max + 1` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Graph, Var};
use crate::header::HeaderAdapter;
use crate::params::{mask_rows, Binder, LayerNorm, ParamId, ParamStore, SelfAttention};
use crate::pmolin::PMoLin;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SatConfig {
    pub d_model: usize,
    pub d_header: usize,
    /// Maximum padded column count `L_max`.
    pub max_columns: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    /// Expert hidden width; `0` means `2 · d_model`.
    pub expert_hidden: usize,
}

impl Default for SatConfig {
    fn default() -> Self {
        Self { d_model: 64, d_header: 64, max_columns: 16, n_layers: 2, n_heads: 4, n_experts: 5, expert_hidden: 0 }
    }
}

impl SatConfig {
    pub fn hidden(&self) -> usize {
        if self.expert_hidden == 0 {
            2 * self.d_model
        } else {
            self.expert_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_header == 0 || self.max_columns == 0 {
            return Err(Error::Config("tabular encoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(1..=8).contains(&self.n_experts) {
            return Err(Error::Config(format!("expert count {} outside 1..=8", self.n_experts)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.max_columns + 1
    }
}

#[derive(Clone, Debug)]
pub struct SatBlock {
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub moe_norm: LayerNorm,
    pub moe: PMoLin,
}

/// Output of the tabular encoder for a batch of equally-shaped tables.
pub struct TabularEncoding {
    /// `B·(L_max+1) × D`.
    pub tokens: Var,
    /// Validity of every row of `tokens`.
    pub validity: Vec<bool>,
    /// Routing weights of each P-MoLin layer, `B·(L_max+1) × E`.
    pub routing: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SatEncoder {
    pub config: SatConfig,
    /// Shared value projection weight, `1 × D`.
    pub value_weight: ParamId,
    pub value_bias: ParamId,
    pub adapter: HeaderAdapter,
    pub class_token: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<SatBlock>,
}

impl SatEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &SatConfig,
        std: f64,
        prototype_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        // Token-level parameters start at unit scale so the products v ⊙ ĥ
        // stay well above the layer-norm epsilon. A nonzero value bias keeps
        // zero (missing) cells distinguishable by their header.
        let value_weight = store.add("sat.value.weight", Tensor::randn(&[1, d], 1.0, rng));
        let value_bias = store.add("sat.value.bias", Tensor::randn(&[d], 1.0, rng));
        let adapter = HeaderAdapter::new(store, config.d_header, d, 1.0, rng);
        let class_token = store.add("sat.class_token", Tensor::randn(&[1, d], 1.0, rng));
        let mask_token = store.add("sat.mask_token", Tensor::randn(&[1, d], 1.0, rng));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = format!("sat.block{l}");
            blocks.push(SatBlock {
                attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
                attn: SelfAttention::new(store, &format!("{name}.attn"), d, config.n_heads, std, rng)?,
                moe_norm: LayerNorm::new(store, &format!("{name}.moe_norm"), d),
                moe: PMoLin::new(store, &format!("{name}.pmolin"), d, config.hidden(), config.n_experts, prototype_std, std, rng)?,
            });
        }
        Ok(Self { config: config.clone(), value_weight, value_bias, adapter, class_token, mask_token, blocks })
    }

    /// `f̂_t[j] = (x_j·w + b) ⊙ ĥ[j]` for every row of `values` (`B × C_t`),
    /// stacked to `B·C_t × D`.
    pub fn semantic_embed(&self, g: &mut Graph, b: &mut Binder, values: &Tensor, h_hat: Var) -> Result<Var> {
        let (n, c) = values.dims2()?;
        if g.value(h_hat).rows() != c {
            return Err(Error::Shape(format!(
                "{c} cell values per row but {} header embeddings",
                g.value(h_hat).rows()
            )));
        }
        let x = g.constant(values.clone().reshape(vec![n * c, 1])?);
        let w = b.var(g, self.value_weight);
        let bias = b.var(g, self.value_bias);
        let v = g.matmul(x, w)?;
        let v = g.add(v, bias)?;
        let tiled = if n == 1 {
            h_hat
        } else {
            let idx: Vec<usize> = (0..n).flat_map(|_| 0..c).collect();
            g.gather_rows(h_hat, &idx)?
        };
        g.mul(v, tiled)
    }

    /// Prepends the class token and pads each of the `batch` sequences of
    /// `C_t` rows in `f_hat` with the mask token up to `L_max + 1` rows.
    pub fn pad_and_mask(&self, g: &mut Graph, b: &mut Binder, f_hat: Var, batch: usize) -> Result<(Var, Vec<bool>)> {
        let rows = g.value(f_hat).rows();
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!("{rows} token rows for batch {batch}")));
        }
        let c = rows / batch;
        let l_max = self.config.max_columns;
        if c > l_max {
            return Err(Error::Config(format!("{c} columns exceed the maximum padded length {l_max}")));
        }
        let cls = b.var(g, self.class_token);
        let mask = b.var(g, self.mask_token);
        let pool = g.concat_rows(&[cls, mask, f_hat])?;
        let mut idx = Vec::with_capacity(batch * (l_max + 1));
        let mut validity = Vec::with_capacity(batch * (l_max + 1));
        for s in 0..batch {
            idx.push(0);
            idx.extend((0..c).map(|j| 2 + s * c + j));
            idx.extend(std::iter::repeat(1).take(l_max - c));
            validity.extend(std::iter::repeat(true).take(c + 1));
            validity.extend(std::iter::repeat(false).take(l_max - c));
        }
        Ok((g.gather_rows(pool, &idx)?, validity))
    }

    /// Stacked pre-norm blocks: `x += MSA(LN(x))`, `x += P-MoLin(LN(x))`, with
    /// padded rows excluded from attention and from residual updates.
    pub fn encode_table(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        tokens: Var,
        validity: &[bool],
        batch: usize,
    ) -> Result<TabularEncoding> {
        let (rows, d) = g.value(tokens).dims2()?;
        if rows != batch * self.config.seq_len() || d != self.config.d_model || validity.len() != rows {
            return Err(Error::Shape(format!(
                "tabular tokens {:?} with {} flags for batch {batch} of length {}",
                g.value(tokens).shape(),
                validity.len(),
                self.config.seq_len()
            )));
        }
        let mask = AttentionMask::self_attention(batch, validity.to_vec());
        let mut x = tokens;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h = block.attn_norm.forward(g, b, x)?;
            let a = block.attn.forward(g, b, h, &mask)?;
            let a = mask_rows(g, a, validity)?;
            x = g.add(x, a)?;
            let h = block.moe_norm.forward(g, b, x)?;
            let (m, w) = block.moe.forward(g, b, h)?;
            let m = mask_rows(g, m, validity)?;
            x = g.add(x, m)?;
            routing.push(w);
        }
        Ok(TabularEncoding { tokens: x, validity: validity.to_vec(), routing })
    }

    /// Full tabular path for `values: B × C_t` sharing `headers: C_t × D_h`.
    pub fn encode(&self, g: &mut Graph, b: &mut Binder, values: &Tensor, headers: &Tensor) -> Result<TabularEncoding> {
        let batch = values.rows();
        let h_hat = self.adapter.adapt(g, b, headers)?;
        let f_hat = self.semantic_embed(g, b, values, h_hat)?;
        let (tokens, validity) = self.pad_and_mask(g, b, f_hat, batch)?;
        self.encode_table(g, b, tokens, &validity, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(max_columns: usize) -> (ParamStore, SatEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = SatConfig { d_model: 8, d_header: 6, max_columns, n_layers: 2, n_heads: 2, n_experts: 3, expert_hidden: 0 };
        let enc = SatEncoder::new(&mut store, &cfg, 0.3, 0.3, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn ones_header_gives_value_projection() {
        let (store, enc) = encoder(4);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let values = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let h = g.constant(Tensor::ones(&[3, 8]));
        let f = enc.semantic_embed(&mut g, &mut b, &values, h).unwrap();
        let w = store.get(enc.value_weight).data();
        let bias = store.get(enc.value_bias).data();
        for j in 0..3 {
            for t in 0..8 {
                assert_eq!(g.value(f).get2(j, t), values.data()[j] * w[t] + bias[t]);
            }
        }
    }

    #[test]
    fn zero_cell_and_bias_gives_zero_row() {
        let (mut store, enc) = encoder(4);
        store.set(enc.value_bias, Tensor::zeros(&[8])).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = g.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let values = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let f = enc.semantic_embed(&mut g, &mut b, &values, h).unwrap();
        assert!(g.value(f).row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn semantic_embed_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let cfg = SatConfig { d_model: 3, d_header: 3, max_columns: 2, n_layers: 1, n_heads: 1, n_experts: 1, expert_hidden: 0 };
        let enc = SatEncoder::new(&mut store, &cfg, 0.5, 0.5, &mut rng).unwrap();
        store.set(enc.value_bias, Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
        let hh = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let values = Tensor::randn(&[1, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let h = g.constant(hh.clone());
        let f = enc.semantic_embed(&mut g, &mut b, &values, h).unwrap();
        let w = store.get(enc.value_weight).data();
        let bias = store.get(enc.value_bias).data();
        for j in 0..2 {
            for t in 0..3 {
                let expected = (values.data()[j] * w[t] + bias[t]) * hh.get2(j, t);
                assert!((g.value(f).get2(j, t) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_layout() {
        let (store, enc) = encoder(5);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let f = g.constant(Tensor::ones(&[3, 8]));
        let (tokens, validity) = enc.pad_and_mask(&mut g, &mut b, f, 1).unwrap();
        assert_eq!(validity, vec![true, true, true, true, false, false]);
        assert_eq!(g.value(tokens).shape(), &[6, 8]);
        assert_eq!(g.value(tokens).row(0), store.get(enc.class_token).data());
        assert_eq!(g.value(tokens).row(5), store.get(enc.mask_token).data());

        let (store, enc) = encoder(3);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let f = g.constant(Tensor::ones(&[3, 8]));
        let (_, validity) = enc.pad_and_mask(&mut g, &mut b, f, 1).unwrap();
        assert!(validity.iter().all(|&v| v));
        let f = g.constant(Tensor::ones(&[4, 8]));
        assert!(matches!(enc.pad_and_mask(&mut g, &mut b, f, 1), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_output_shape() {
        let (store, enc) = encoder(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let values = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let headers = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let out = enc.encode(&mut g, &mut b, &values, &headers).unwrap();
        assert_eq!(g.value(out.tokens).shape(), &[12, 8]);
        assert_eq!(out.validity.iter().filter(|&&v| v).count(), 8);
        assert_eq!(out.routing.len(), 2);
    }
}
