//! Cross-tabular pretraining, per-cohort fine-tuning and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::header::{load_header_embeddings, HeaderEmbedder};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{CitabModel, TrainBatch};
use crate::params::{Binder, ParamStore};
use crate::synth::{files, read_images, read_latents, SyntheticCohort};
use crate::table::{load_cohort, load_labels, Cohort, CohortSchema};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay applied after the moment update.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { cfg: cfg.clone(), m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                p[k] -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                p[k] -= c.lr * c.weight_decay * p[k];
            }
        }
        Ok(())
    }
}

/// One cohort ready for training: normalized table, paired images, frozen headers.
#[derive(Clone, Debug)]
pub struct CohortData {
    pub id: String,
    pub cohort: Cohort,
    /// `n × (C·S·S)`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub latents: Option<Tensor>,
    /// `C_t × D_h`.
    pub headers: Tensor,
    pub columns: Vec<String>,
}

impl CohortData {
    pub fn new(cohort: Cohort, images: Tensor, labels: Option<Vec<usize>>, embedder: &HeaderEmbedder) -> Result<Self> {
        if images.rows() != cohort.n_rows() {
            return Err(Error::Data(format!(
                "cohort `{}` has {} rows but {} images",
                cohort.schema().cohort_id,
                cohort.n_rows(),
                images.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != cohort.n_rows() {
                return Err(Error::Data(format!("{} labels for {} rows", l.len(), cohort.n_rows())));
            }
        }
        let cohort = if cohort.is_normalized() { cohort } else { cohort.normalize()? };
        let columns: Vec<String> = cohort.schema().column_names().iter().map(|s| s.to_string()).collect();
        Ok(Self {
            id: cohort.schema().cohort_id.clone(),
            headers: embedder.embed_all(&columns)?,
            cohort,
            images,
            labels,
            latents: None,
            columns,
        })
    }

    pub fn from_synthetic(s: &SyntheticCohort, embedder: &HeaderEmbedder) -> Result<Self> {
        let mut d = Self::new(s.cohort.clone().without_labels(), s.images.clone(), Some(s.labels.clone()), embedder)?;
        d.latents = s.latents.clone();
        Ok(d)
    }

    /// Loads a generated cohort directory. Labels and latents are optional.
    pub fn load(dir: &Path, embedder: &HeaderEmbedder) -> Result<Self> {
        let schema = CohortSchema::load(&dir.join(files::SCHEMA))?;
        let cohort = load_cohort(&dir.join(files::TABLE), &schema)?;
        let img_path = dir.join(files::IMAGES);
        if !img_path.exists() {
            return Err(Error::Data(format!("cohort `{}` has no paired images at {}", schema.cohort_id, img_path.display())));
        }
        let (images, _, _) = read_images(&img_path)?;
        let lpath = dir.join(files::LABELS);
        let labels = if lpath.exists() { Some(load_labels(&lpath)?) } else { None };
        let mut d = Self::new(cohort, images, labels, embedder)?;
        let zpath = dir.join(files::LATENTS);
        if zpath.exists() {
            d.latents = Some(read_latents(&zpath)?);
        }
        Ok(d)
    }

    pub fn n_rows(&self) -> usize {
        self.cohort.n_rows()
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Builds a batch from `rows`; labels are attached only when requested.
    pub fn batch(&self, rows: &[usize], with_labels: bool) -> Result<TrainBatch> {
        let c = self.cohort.n_columns();
        let mut values = Vec::with_capacity(rows.len() * c);
        let mut images = Vec::with_capacity(rows.len() * self.images.cols());
        for &r in rows {
            values.extend(self.cohort.encode_row(r)?.0);
            images.extend_from_slice(self.images.row(r));
        }
        let labels = if with_labels {
            let l = self.labels.as_ref().ok_or_else(|| Error::Data(format!("cohort `{}` has no labels", self.id)))?;
            Some(rows.iter().map(|&r| l[r]).collect())
        } else {
            None
        };
        Ok(TrainBatch {
            values: Tensor::matrix(rows.len(), c, values)?,
            headers: self.headers.clone(),
            images: Tensor::matrix(rows.len(), self.images.cols(), images)?,
            labels,
            columns: self.columns.clone(),
        })
    }
}

/// Header embedder described by the config: hashed, optionally backed by an imported table.
pub fn header_embedder(cfg: &TrainConfig) -> Result<HeaderEmbedder> {
    let dim = cfg.model.sat.d_header;
    match &cfg.data.header_embeddings {
        Some(p) => Ok(HeaderEmbedder::with_table(dim, cfg.data.header_seed, load_header_embeddings(p, dim)?)),
        None => Ok(HeaderEmbedder::hashed(dim, cfg.data.header_seed)),
    }
}

pub fn load_cohorts(cfg: &TrainConfig) -> Result<Vec<CohortData>> {
    if cfg.data.cohorts.is_empty() {
        return Err(Error::Config("config lists no cohorts".into()));
    }
    let embedder = header_embedder(cfg)?;
    cfg.data.cohorts.iter().map(|p| CohortData::load(p, &embedder)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" | "validation" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Input(format!("unknown split `{name}` (train, val, test)"))),
        }
    }
}

/// Deterministic shuffled split of `0..n` by `fractions` (train, val, test).
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Splits { train: idx, val, test }
}

/// Split of one cohort; the seed mixes the configured split seed with the cohort id.
pub fn cohort_splits(cfg: &TrainConfig, data: &CohortData) -> Splits {
    let mix = data.id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    split_indices(data.n_rows(), cfg.data.split, cfg.data.split_seed ^ mix)
}

/// The first `ceil(fraction · |train|)` rows of a seed-shuffled training split.
pub fn label_subset(train: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let mut rows = train.to_vec();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe));
    rows.truncate(((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len().max(1)));
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Shuffled per-cohort batches interleaved round-robin across cohorts.
/// Trailing batches smaller than 2 are dropped.
pub fn round_robin_batches(rows: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    let mut queues: Vec<std::vec::IntoIter<Vec<usize>>> = rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.shuffle(rng);
            r.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect::<Vec<_>>().into_iter()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for (c, q) in queues.iter_mut().enumerate() {
            if let Some(b) = q.next() {
                out.push((c, b));
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

/// Self-supervised pretraining over the given rows of every cohort. Labels are
/// never read.
pub fn pretrain(model: &mut CitabModel, data: &[CohortData], rows: &[Vec<usize>], cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.is_empty() || data.len() != rows.len() {
        return Err(Error::Config("pretraining needs at least one cohort and its rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&cfg.optim, &model.store);
    let mut epoch_losses = Vec::with_capacity(cfg.train.pretrain_epochs);
    for epoch in 0..cfg.train.pretrain_epochs {
        let batches = round_robin_batches(rows, cfg.train.batch_size, &mut rng);
        if batches.is_empty() {
            return Err(Error::BatchSize("no cohort provides a batch of at least 2 samples".into()));
        }
        let mut total = 0.0;
        for (c, b) in &batches {
            let batch = data[*c].batch(b, false)?;
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.store, true);
            let out = model.ssl_loss(&mut g, &mut binder, &batch, &cfg.ssl)?;
            total += g.value(out.loss).item();
            g.backward(out.loss)?;
            let grads = binder.gradients(&g);
            adam.step(&mut model.store, &grads)?;
        }
        let mean = total / batches.len() as f64;
        log::info!("pretrain epoch {} loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(PretrainReport { epoch_losses, steps: adam.steps() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// 1-based epoch whose weights were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub val_accuracy: Vec<f64>,
    pub val_metrics: MetricsReport,
    pub train_losses: Vec<f64>,
}

/// Supervised fine-tuning with cross-entropy on `train_rows`, keeping the
/// weights of the epoch with the best validation accuracy (ties: earlier).
pub fn finetune(
    model: &mut CitabModel,
    data: &CohortData,
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let labels = data.labels.as_ref().ok_or_else(|| Error::Data(format!("cohort `{}` has no labels", data.id)))?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.config.n_classes) {
        return Err(Error::Config(format!("label {bad} outside the model's {} classes", model.config.n_classes)));
    }
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Data("fine-tuning needs training and validation rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xf1e7_0e5e);
    let mut adam = Adam::new(&cfg.optim, &model.store);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut val_accuracy = Vec::new();
    let mut train_losses = Vec::new();
    for epoch in 1..=cfg.train.finetune_epochs {
        let mut order = train_rows.to_vec();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.train.batch_size).collect();
        for rows in &chunks {
            let batch = data.batch(rows, true)?;
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.store, true);
            let loss = model.classification_loss(&mut g, &mut binder, &batch)?;
            total += g.value(loss).item();
            g.backward(loss)?;
            let grads = binder.gradients(&g);
            adam.step(&mut model.store, &grads)?;
        }
        train_losses.push(total / chunks.len() as f64);
        let acc = evaluate(model, data, val_rows)?.1.accuracy;
        log::info!("finetune epoch {epoch} val accuracy {acc:.4}");
        val_accuracy.push(acc);
        if best.as_ref().map_or(true, |(_, a, _)| acc > *a) {
            best = Some((epoch, acc, model.store.clone()));
        }
    }
    let best_epoch = match best {
        Some((e, _, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    let val_metrics = evaluate(model, data, val_rows)?.1;
    Ok(FinetuneReport { best_epoch, val_accuracy, val_metrics, train_losses })
}

/// Class probabilities for `rows` and their metrics.
pub fn evaluate(model: &CitabModel, data: &CohortData, rows: &[usize]) -> Result<(Tensor, MetricsReport)> {
    let probs = predict(model, data, rows)?;
    let labels = data.labels.as_ref().ok_or_else(|| Error::Data(format!("cohort `{}` has no labels", data.id)))?;
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let report = compute_metrics(&probs, &y)?;
    Ok((probs, report))
}

pub fn predict(model: &CitabModel, data: &CohortData, rows: &[usize]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Input("no rows to predict".into()));
    }
    let mut out = Vec::with_capacity(rows.len() * model.config.n_classes);
    for chunk in rows.chunks(64) {
        out.extend(model.predict_proba(&data.batch(chunk, false)?)?.into_data());
    }
    Tensor::matrix(rows.len(), model.config.n_classes, out)
}
