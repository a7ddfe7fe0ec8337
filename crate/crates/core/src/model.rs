//! The full image-tabular model: encoders, fusion, heads and losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModule, Fused, ImageConfig, ImageEncoder};
use crate::graph::{Graph, Var};
use crate::params::{grad_check_params, Binder, ParamGradCheck, ParamStore};
use crate::pmolin::RoutingRecord;
use crate::sat::{SatConfig, SatEncoder, TabularEncoding};
use crate::ssl::{itc_loss, itm_loss, mine_negatives, total_loss, ItmBatch, ProjectionHeads, SslConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub sat: SatConfig,
    pub image: ImageConfig,
    pub fusion: FusionConfig,
    pub n_classes: usize,
    /// Projection width for the contrastive heads; `0` means `d_model`.
    pub d_proj: usize,
    pub init_std: f64,
    pub prototype_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sat: SatConfig::default(),
            image: ImageConfig::default(),
            fusion: FusionConfig::default(),
            n_classes: 3,
            d_proj: 0,
            init_std: 0.1,
            prototype_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn d_proj(&self) -> usize {
        if self.d_proj == 0 {
            self.sat.d_model
        } else {
            self.d_proj
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sat.validate()?;
        self.image.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if !(self.init_std > 0.0 && self.prototype_std > 0.0) {
            return Err(Error::Config("initialization scales must be positive".into()));
        }
        Ok(())
    }
}

/// One homogeneous mini-batch from a single cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `B × C_t` normalized cell values (missing cells are 0).
    pub values: Tensor,
    /// `C_t × D_h` frozen header embeddings.
    pub headers: Tensor,
    /// `B × (C·S·S)` flattened images.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub columns: Vec<String>,
}

impl TrainBatch {
    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

/// Scalar results of one pretraining step.
pub struct SslOutput {
    pub loss: Var,
    pub itc: Var,
    pub itm: Var,
    pub itm_batch: ItmBatch,
}

/// Embeddings of one forward pass in evaluation mode.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `B × D` tabular class tokens after the SAT encoder.
    pub tabular: Tensor,
    /// `B × D` class tokens after fusion.
    pub multimodal: Tensor,
    /// `B × K` class probabilities.
    pub probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct CitabModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub sat: SatEncoder,
    pub image: ImageEncoder,
    pub fusion: FusionModule,
    pub heads: ProjectionHeads,
}

impl CitabModel {
    /// Deterministic initialization from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.sat.d_model;
        let std = config.init_std;
        let sat = SatEncoder::new(&mut store, &config.sat, std, config.prototype_std, &mut rng)?;
        let image = ImageEncoder::new(&mut store, &config.image, d, std, &mut rng)?;
        let fusion = FusionModule::new(
            &mut store,
            &config.fusion,
            d,
            config.image.n_tokens(),
            config.sat.seq_len(),
            config.n_classes,
            std,
            &mut rng,
        )?;
        let heads = ProjectionHeads::new(&mut store, d, config.d_proj(), std, &mut rng);
        Ok(Self { config: config.clone(), store, sat, image, fusion, heads })
    }

    pub fn seq_len(&self) -> usize {
        self.config.sat.seq_len()
    }

    pub fn image_tokens(&self) -> usize {
        self.config.image.n_tokens()
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<()> {
        let n = batch.size();
        if batch.images.rows() != n || batch.images.cols() != self.config.image.pixels() {
            return Err(Error::Data(format!(
                "batch of {n} tables paired with images {:?}",
                batch.images.shape()
            )));
        }
        if batch.headers.rows() != batch.values.cols() || batch.headers.cols() != self.config.sat.d_header {
            return Err(Error::Shape(format!(
                "header embeddings {:?} for {} columns of width {}",
                batch.headers.shape(),
                batch.values.cols(),
                self.config.sat.d_header
            )));
        }
        Ok(())
    }

    /// Runs both encoders.
    pub fn encode(&self, g: &mut Graph, b: &mut Binder, batch: &TrainBatch) -> Result<(Var, TabularEncoding)> {
        self.check_batch(batch)?;
        let f_i = self.image.encode(g, b, &batch.images)?;
        let f_t = self.sat.encode(g, b, &batch.values, &batch.headers)?;
        Ok((f_i, f_t))
    }

    /// Fuses sample `pairs[k] = (image sample, table sample)` drawn from the
    /// encoded batch.
    pub fn fuse_pairs(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        f_i: Var,
        f_t: &TabularEncoding,
        pairs: &[(usize, usize)],
        detach: bool,
    ) -> Result<Fused> {
        let (ci, l) = (self.image_tokens(), self.seq_len());
        let img_idx: Vec<usize> = pairs.iter().flat_map(|&(i, _)| i * ci..(i + 1) * ci).collect();
        let tab_idx: Vec<usize> = pairs.iter().flat_map(|&(_, t)| t * l..(t + 1) * l).collect();
        let valid: Vec<bool> = tab_idx.iter().map(|&r| f_t.validity[r]).collect();
        let (mut fi, mut ft) = (f_i, f_t.tokens);
        if detach {
            fi = g.constant(g.value(fi).clone());
            ft = g.constant(g.value(ft).clone());
        }
        let fi = g.gather_rows(fi, &img_idx)?;
        let ft = g.gather_rows(ft, &tab_idx)?;
        self.fusion.fuse(g, b, fi, ft, &valid)
    }

    /// Pretraining objective `½(L_itc + L_itm)` for one batch.
    pub fn ssl_loss(&self, g: &mut Graph, b: &mut Binder, batch: &TrainBatch, ssl: &SslConfig) -> Result<SslOutput> {
        ssl.validate()?;
        let n = batch.size();
        let (f_i, f_t) = self.encode(g, b, batch)?;
        let (pi, pt) = self.heads.project_global(g, b, f_i, f_t.tokens, n, self.seq_len(), ssl.l2_normalize)?;
        let itc = itc_loss(g, pi, pt, ssl.tau)?;
        let itm_batch = mine_negatives(g.value(pi), g.value(pt))?;
        let positives: Vec<(usize, usize)> = (0..n).map(|s| (s, s)).collect();
        let fused = self.fuse_pairs(g, b, f_i, &f_t, &positives, false)?;
        let p_pos = self.fusion.match_score(g, b, &fused)?;
        let negatives: Vec<(usize, usize)> = itm_batch.negatives.iter().map(|p| (p.image, p.table)).collect();
        let fused = self.fuse_pairs(g, b, f_i, &f_t, &negatives, ssl.stop_gradient_negatives)?;
        let p_neg = self.fusion.match_score(g, b, &fused)?;
        let itm = itm_loss(g, Some(p_pos), Some(p_neg))?;
        let loss = total_loss(g, itc, itm)?;
        Ok(SslOutput { loss, itc, itm, itm_batch })
    }

    /// Class logits, `B × K`.
    pub fn logits(&self, g: &mut Graph, b: &mut Binder, batch: &TrainBatch) -> Result<Var> {
        let (f_i, f_t) = self.encode(g, b, batch)?;
        let pairs: Vec<(usize, usize)> = (0..batch.size()).map(|s| (s, s)).collect();
        let fused = self.fuse_pairs(g, b, f_i, &f_t, &pairs, false)?;
        self.fusion.classify(g, b, &fused)
    }

    /// Mean cross-entropy against the batch labels.
    pub fn classification_loss(&self, g: &mut Graph, b: &mut Binder, batch: &TrainBatch) -> Result<Var> {
        let labels = batch.labels.as_ref().ok_or_else(|| Error::Data("fine-tuning batch has no labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.config.n_classes) {
            return Err(Error::Config(format!("label {bad} outside {} classes", self.config.n_classes)));
        }
        let logits = self.logits(g, b, batch)?;
        let lp = g.log_softmax_rows(logits)?;
        let picked = g.pick_per_row(lp, labels)?;
        let s = g.sum(picked)?;
        g.scale(s, -1.0 / labels.len() as f64)
    }

    /// Class probabilities and embeddings in evaluation mode.
    pub fn embed(&self, batch: &TrainBatch) -> Result<Embeddings> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        let (f_i, f_t) = self.encode(&mut g, &mut b, batch)?;
        let pairs: Vec<(usize, usize)> = (0..batch.size()).map(|s| (s, s)).collect();
        let fused = self.fuse_pairs(&mut g, &mut b, f_i, &f_t, &pairs, false)?;
        let cls = crate::ssl::class_rows(&mut g, f_t.tokens, batch.size(), self.seq_len())?;
        let multimodal = self.fusion.class_tokens(&mut g, &fused)?;
        let logits = self.fusion.class_head.forward(&mut g, &mut b, multimodal)?;
        let probs = g.softmax_rows(logits)?;
        Ok(Embeddings {
            tabular: g.value(cls).clone(),
            multimodal: g.value(multimodal).clone(),
            probs: g.value(probs).clone(),
        })
    }

    pub fn predict_proba(&self, batch: &TrainBatch) -> Result<Tensor> {
        Ok(self.embed(batch)?.probs)
    }

    /// Routing weights of every sample at every SAT layer, padding rows removed.
    pub fn routing_records(&self, batch: &TrainBatch) -> Result<Vec<RoutingRecord>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        self.check_batch(batch)?;
        let enc = self.sat.encode(&mut g, &mut b, &batch.values, &batch.headers)?;
        let (l, c) = (self.seq_len(), batch.values.cols());
        let mut out = Vec::with_capacity(batch.size() * enc.routing.len());
        for s in 0..batch.size() {
            for (layer, &w) in enc.routing.iter().enumerate() {
                let wv = g.value(w);
                let e = wv.cols();
                let rows = wv.data()[s * l * e..(s * l + c + 1) * e].to_vec();
                out.push(RoutingRecord {
                    layer,
                    columns: batch.columns.clone(),
                    weights: Tensor::matrix(c + 1, e, rows)?,
                });
            }
        }
        Ok(out)
    }
}

/// Smallest complete model used for finite-difference checks: `D = 4`,
/// `L_max = 4`, one SAT layer with `E = 2`, one fusion layer.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        sat: SatConfig { d_model: 4, d_header: 4, max_columns: 4, n_layers: 1, n_heads: 2, n_experts: 2, expert_hidden: 4 },
        image: ImageConfig { channels: 1, size: 4, patch: 2, stem: crate::fusion::ImageStem::Patch },
        fusion: FusionConfig { n_layers: 1, n_heads: 2, hidden: 4 },
        n_classes: 3,
        d_proj: 4,
        init_std: 0.5,
        prototype_std: 0.5,
    }
}

/// Central-difference check of every parameter gradient of the pretraining loss
/// and of the classification loss, on a seeded model and a random batch of 2
/// with `columns ≤ 4` columns. Returns `[ssl, classification]`.
pub fn model_grad_check(seed: u64, columns: usize, eps: f64) -> Result<[ParamGradCheck; 2]> {
    let model = CitabModel::new(&grad_check_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let batch = TrainBatch {
        values: Tensor::randn(&[2, columns], 1.0, &mut rng),
        headers: Tensor::randn(&[columns, 4], 1.0, &mut rng),
        images: Tensor::randn(&[2, 16], 1.0, &mut rng),
        labels: Some(vec![0, 2]),
        columns: (0..columns).map(|j| format!("c{j}")).collect(),
    };
    let ssl = SslConfig::default();
    let a = grad_check_params(&model.store, |g, b| Ok(model.ssl_loss(g, b, &batch, &ssl)?.loss), eps)?;
    let c = grad_check_params(&model.store, |g, b| model.classification_loss(g, b, &batch), eps)?;
    Ok([a, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            sat: SatConfig { d_model: 4, d_header: 3, max_columns: 4, n_layers: 1, n_heads: 2, n_experts: 2, expert_hidden: 4 },
            image: ImageConfig { channels: 1, size: 4, patch: 2, stem: crate::fusion::ImageStem::Patch },
            fusion: FusionConfig { n_layers: 1, n_heads: 2, hidden: 4 },
            n_classes: 3,
            d_proj: 3,
            init_std: 0.5,
            prototype_std: 0.5,
        }
    }

    fn batch(n: usize, c: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainBatch {
            values: Tensor::randn(&[n, c], 1.0, &mut rng),
            headers: Tensor::randn(&[c, 3], 1.0, &mut rng),
            images: Tensor::randn(&[n, 16], 1.0, &mut rng),
            labels: Some((0..n).map(|i| i % 3).collect()),
            columns: (0..c).map(|j| format!("col{j}")).collect(),
        }
    }

    #[test]
    fn ssl_loss_is_finite_and_deterministic() {
        let m = CitabModel::new(&tiny_config(), 3).unwrap();
        let bt = batch(4, 3, 1);
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::new(&m.store, true);
            let out = m.ssl_loss(&mut g, &mut b, &bt, &SslConfig::default()).unwrap();
            g.value(out.loss).item()
        };
        let a = run();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), run().to_bits());
    }

    #[test]
    fn routing_records_drop_padding() {
        let m = CitabModel::new(&tiny_config(), 3).unwrap();
        let recs = m.routing_records(&batch(2, 3, 2)).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.weights.shape(), &[4, 2]);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = CitabModel::new(&tiny_config(), 3).unwrap();
        let p = m.predict_proba(&batch(3, 2, 5)).unwrap();
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_image_pairing_is_a_data_error() {
        let m = CitabModel::new(&tiny_config(), 3).unwrap();
        let mut bt = batch(3, 2, 5);
        bt.images = Tensor::zeros(&[2, 16]);
        assert!(matches!(m.predict_proba(&bt), Err(Error::Data(_))));
    }
}
