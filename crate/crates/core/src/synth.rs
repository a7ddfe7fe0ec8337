//! Seeded multi-cohort image-tabular generator with a Bayes reference.
//!
//! Every subject draws a class, then latent concepts from class-conditional
//! Gaussians. Each table column is an affine, noisy, possibly missing reading
//! of one latent; cohorts differ in column count, order and header wording.
//! Images superimpose one cosine pattern per latent, scaled by that latent.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::table::{write_labels, Cohort, CohortSchema, ColumnKind, ColumnSpec};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"CITB";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub n_latents: usize,
    pub n_classes: usize,
    /// `K × n_latents` class-conditional means.
    pub means: Vec<Vec<f64>>,
    /// `K × n_latents` class-conditional standard deviations.
    pub stds: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LatentSpec {
    /// Class means drawn as `separation · N(0, 1)` with unit class stds.
    pub fn random(n_latents: usize, n_classes: usize, separation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..n_classes)
            .map(|_| (0..n_latents).map(|_| separation * normal(&mut rng)).collect())
            .collect();
        Self { n_latents, n_classes, means, stds: vec![vec![1.0; n_latents]; n_classes], seed }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes;
        if k < 2 || self.n_latents == 0 {
            return Err(Error::Config(format!("need K >= 2 and at least one latent, got K={k}")));
        }
        let shaped = |m: &Vec<Vec<f64>>| m.len() == k && m.iter().all(|r| r.len() == self.n_latents);
        if !shaped(&self.means) || !shaped(&self.stds) {
            return Err(Error::Config(format!("class means/stds must be {k} × {}", self.n_latents)));
        }
        if self.stds.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("class stds must be positive".into()));
        }
        for a in 0..k {
            for b in a + 1..k {
                if self.means[a] == self.means[b] {
                    return Err(Error::Config(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        Ok(())
    }

    /// Class-conditional Gaussian log density (up to a shared constant).
    pub fn log_density(&self, class: usize, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.means[class])
            .zip(&self.stds[class])
            .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln())
            .sum()
    }

    /// Most likely class under a uniform prior; ties go to the lowest index.
    pub fn bayes_predict(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_ll = f64::NEG_INFINITY;
        for k in 0..self.n_classes {
            let ll = self.log_density(k, z);
            if ll > best_ll {
                best = k;
                best_ll = ll;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnGen {
    pub latent: usize,
    pub header: String,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub missing_rate: f64,
    /// Continuous cells are `scale · z + offset + noise`.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    /// Non-empty for categorical columns: `z + noise` is binned at `thresholds`
    /// (ascending), giving `thresholds.len() + 1` categories.
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

fn default_noise() -> f64 {
    0.3
}

fn one() -> f64 {
    1.0
}

impl ColumnGen {
    pub fn continuous(latent: usize, header: &str, noise_std: f64, scale: f64, offset: f64) -> Self {
        Self {
            latent,
            header: header.into(),
            noise_std,
            missing_rate: 0.0,
            scale,
            offset,
            categories: Vec::new(),
            thresholds: Vec::new(),
        }
    }

    pub fn categorical(latent: usize, header: &str, noise_std: f64, categories: &[&str], thresholds: &[f64]) -> Self {
        Self {
            categories: categories.iter().map(|c| c.to_string()).collect(),
            thresholds: thresholds.to_vec(),
            ..Self::continuous(latent, header, noise_std, 1.0, 0.0)
        }
    }

    pub fn with_missing(mut self, rate: f64) -> Self {
        self.missing_rate = rate;
        self
    }

    pub fn kind(&self) -> ColumnKind {
        if self.categories.is_empty() {
            ColumnKind::Continuous
        } else {
            ColumnKind::Categorical
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_id: String,
    pub n_subjects: usize,
    pub columns: Vec<ColumnGen>,
    /// Shuffles the column order of the emitted table.
    pub order_seed: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGenSpec {
    pub channels: usize,
    pub size: usize,
    /// Pattern amplitude per unit of latent.
    pub amplitude: f64,
    pub pixel_noise: f64,
    /// Repeat length of every latent pattern, in pixels.
    pub period: usize,
    /// Subject-specific patterns unrelated to any latent (scanner or site
    /// effects), drawn with the patterns that follow the latent ones.
    #[serde(default)]
    pub nuisance_patterns: usize,
    #[serde(default)]
    pub nuisance_amplitude: f64,
}

impl Default for ImageGenSpec {
    fn default() -> Self {
        Self { channels: 1, size: 16, amplitude: 0.5, pixel_noise: 1.0, period: 4, nuisance_patterns: 0, nuisance_amplitude: 0.0 }
    }
}

/// A complete generator configuration (`citab gen --spec`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub latent: LatentSpec,
    #[serde(default)]
    pub image: ImageGenSpec,
    pub cohorts: Vec<CohortSpec>,
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("generator spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        let im = &self.image;
        if im.channels == 0 || im.period < 4 || im.size % im.period != 0 || !(im.pixel_noise >= 0.0) {
            return Err(Error::Config(format!(
                "image spec needs channels > 0, a period >= 4 dividing size {}, and nonnegative noise",
                im.size
            )));
        }
        if self.latent.n_latents + im.nuisance_patterns > MAX_LATENTS {
            return Err(Error::Config(format!(
                "at most {MAX_LATENTS} latent and nuisance patterns can be rendered distinctly"
            )));
        }
        if self.cohorts.is_empty() {
            return Err(Error::Config("generator spec lists no cohorts".into()));
        }
        for c in &self.cohorts {
            if c.columns.is_empty() || c.n_subjects == 0 {
                return Err(Error::Config(format!("cohort `{}` needs columns and subjects", c.cohort_id)));
            }
            for col in &c.columns {
                if col.latent >= self.latent.n_latents {
                    return Err(Error::Config(format!(
                        "column `{}` of `{}` references latent {} of {}",
                        col.header, c.cohort_id, col.latent, self.latent.n_latents
                    )));
                }
                if !(0.0..=1.0).contains(&col.missing_rate) || !(col.noise_std >= 0.0) {
                    return Err(Error::Config(format!("column `{}` has an invalid noise or missing rate", col.header)));
                }
                if !col.categories.is_empty() && col.categories.len() != col.thresholds.len() + 1 {
                    return Err(Error::Config(format!(
                        "column `{}` needs one more category than thresholds",
                        col.header
                    )));
                }
            }
        }
        Ok(())
    }

    /// The default three-cohort configuration: 600/400/500 subjects, K = 3,
    /// six latents, 10/8/12 columns, 1×16×16 images.
    pub fn default_config(seed: u64) -> Self {
        use ColumnGen as C;
        let a = vec![
            C::continuous(0, "memory_test_score", 0.4, 4.0, 25.0).with_missing(0.05),
            C::continuous(0, "delayed memory recall", 0.5, 2.0, 8.0),
            C::continuous(1, "hippocampal volume", 0.4, 300.0, 3500.0),
            C::continuous(2, "age", 0.3, 6.0, 72.0),
            C::continuous(3, "education years", 0.5, 2.5, 15.0).with_missing(0.1),
            C::continuous(4, "csf amyloid beta", 0.4, 150.0, 900.0).with_missing(0.2),
            C::continuous(5, "ventricle volume", 0.4, 8000.0, 40000.0),
            C::continuous(1, "entorhinal cortex thickness", 0.5, 0.3, 3.5),
            C::categorical(0, "memory impairment grade", 0.5, &["none", "mild", "severe"], &[-0.5, 0.5]),
            C::continuous(5, "whole brain volume", 0.6, -50000.0, 1000000.0).with_missing(0.05),
        ];
        let b = vec![
            C::continuous(0, "memory score (RAVL)", 0.4, 6.0, 40.0),
            C::continuous(1, "hippocampus vol", 0.4, 0.4, 3.0),
            C::continuous(2, "Age at visit", 0.3, 7.0, 74.0),
            C::continuous(3, "years of education", 0.5, 3.0, 14.0).with_missing(0.05),
            C::continuous(4, "amyloid PET SUVR", 0.4, 0.2, 1.3),
            C::continuous(5, "lateral ventricle volume", 0.5, 10.0, 45.0).with_missing(0.1),
            C::categorical(2, "age group", 0.3, &["younger", "older"], &[0.0]),
            C::continuous(0, "memory recall total", 0.5, 3.0, 10.0).with_missing(0.1),
        ];
        let c = vec![
            C::continuous(0, "Memory Test Total", 0.4, 5.0, 30.0),
            C::continuous(0, "memory delayed score", 0.5, 2.0, 7.0).with_missing(0.1),
            C::continuous(1, "hippocampal vol left", 0.4, 150.0, 1700.0),
            C::continuous(1, "hippocampal vol right", 0.4, 150.0, 1750.0),
            C::continuous(2, "subject age", 0.3, 5.0, 70.0),
            C::continuous(3, "education level", 0.6, 1.0, 4.0),
            C::continuous(4, "CSF amyloid", 0.4, 120.0, 800.0).with_missing(0.15),
            C::continuous(4, "amyloid beta 42", 0.5, 100.0, 700.0).with_missing(0.25),
            C::continuous(5, "ventricle vol", 0.4, 9000.0, 38000.0),
            C::continuous(5, "ventricular volume ratio", 0.6, 0.01, 0.03),
            C::categorical(3, "education category", 0.5, &["primary", "secondary", "tertiary"], &[-0.6, 0.6]),
            C::continuous(2, "age years", 0.4, 6.0, 71.0).with_missing(0.05),
        ];
        let cohort = |id: &str, n: usize, columns: Vec<ColumnGen>, k: u64| CohortSpec {
            cohort_id: id.into(),
            n_subjects: n,
            columns,
            order_seed: seed.wrapping_add(100 + k),
            seed: seed.wrapping_add(200 + k),
        };
        Self {
            latent: LatentSpec::random(6, 3, 1.0, seed),
            // Subject-specific image content that no table column explains.
            image: ImageGenSpec { nuisance_patterns: 4, nuisance_amplitude: 1.0, ..ImageGenSpec::default() },
            cohorts: vec![cohort("A", 600, a, 0), cohort("B", 400, b, 1), cohort("C", 500, c, 2)],
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One generated cohort. `cohort` holds raw (unnormalized) cells with labels attached.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    /// `n × (C·S·S)`, values representable in `f32`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `n × n_latents` ground-truth latents.
    pub latents: Option<Tensor>,
    pub channels: usize,
    pub size: usize,
}

/// Most latents the renderer can keep linearly independent.
pub const MAX_LATENTS: usize = 12;

/// Spatial pattern for latent `l`: a cosine (or sine) wave repeating every
/// `period` pixels in both directions, with its own frequency pair.
///
/// Every pattern repeats with the period, so a patch encoder whose patch size
/// equals the period sees the same content in every patch and mean pooling
/// keeps it. Lower frequencies would cancel out under pooling.
pub fn latent_pattern(l: usize, channels: usize, size: usize, period: usize) -> Vec<f64> {
    let freqs = [(1, 0), (0, 1), (1, 1), (1, 3), (2, 0), (0, 2), (2, 1), (1, 2)];
    let (fx, fy) = freqs[l % 8 % freqs.len()];
    let quarter = if l % MAX_LATENTS >= freqs.len() { std::f64::consts::FRAC_PI_2 } else { 0.0 };
    let t = period as f64;
    let mut out = Vec::with_capacity(channels * size * size);
    for ch in 0..channels {
        let phase = 0.7 * ch as f64 + quarter;
        for y in 0..size {
            for x in 0..size {
                let arg = 2.0 * std::f64::consts::PI * (fx as f64 * x as f64 + fy as f64 * y as f64) / t - phase;
                out.push(arg.cos());
            }
        }
    }
    out
}

/// Noise-free image for a latent vector.
pub fn render_image(z: &[f64], image: &ImageGenSpec) -> Vec<f64> {
    let mut grid = vec![0.0; image.channels * image.size * image.size];
    for (l, &zl) in z.iter().enumerate() {
        for (g, p) in grid.iter_mut().zip(latent_pattern(l, image.channels, image.size, image.period)) {
            *g += image.amplitude * zl * p;
        }
    }
    grid
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SyntheticCohort>> {
    spec.validate()?;
    spec.cohorts.iter().map(|c| generate_cohort(&spec.latent, &spec.image, c)).collect()
}

fn generate_cohort(latent: &LatentSpec, image: &ImageGenSpec, spec: &CohortSpec) -> Result<SyntheticCohort> {
    let mut order: Vec<usize> = (0..spec.columns.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.order_seed));
    let columns: Vec<&ColumnGen> = order.iter().map(|&i| &spec.columns[i]).collect();
    let schema = CohortSchema::new(
        spec.cohort_id.clone(),
        columns
            .iter()
            .map(|c| ColumnSpec {
                name: c.header.clone(),
                kind: c.kind(),
                categories: c.categories.clone(),
            })
            .collect(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, c, nl) = (spec.n_subjects, columns.len(), latent.n_latents);
    let mut labels = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n * nl);
    let mut values = Vec::with_capacity(n * c);
    let mut presence = Vec::with_capacity(n * c);
    let mut images = Vec::with_capacity(n * image.channels * image.size * image.size);
    for _ in 0..n {
        let y = rng.gen_range(0..latent.n_classes);
        let z: Vec<f64> = (0..nl).map(|l| latent.means[y][l] + latent.stds[y][l] * normal(&mut rng)).collect();
        for col in &columns {
            let noisy = z[col.latent] + col.noise_std * normal(&mut rng);
            let missing = rng.gen::<f64>() < col.missing_rate;
            let v = if col.categories.is_empty() {
                col.scale * noisy + col.offset
            } else {
                col.thresholds.iter().filter(|&&t| noisy > t).count() as f64
            };
            presence.push(!missing);
            values.push(if missing { 0.0 } else { v });
        }
        let mut clean = render_image(&z, image);
        for m in 0..image.nuisance_patterns {
            let u = image.nuisance_amplitude * normal(&mut rng);
            for (g, p) in clean.iter_mut().zip(latent_pattern(nl + m, image.channels, image.size, image.period)) {
                *g += u * p;
            }
        }
        images.extend(clean.iter().map(|p| ((p + image.pixel_noise * normal(&mut rng)) as f32) as f64));
        labels.push(y);
        latents.extend(z);
    }
    let cohort = Cohort::from_parts(schema, values, presence)?.with_labels(labels.clone(), latent.n_classes)?;
    Ok(SyntheticCohort {
        cohort,
        images: Tensor::matrix(n, image.channels * image.size * image.size, images)?,
        labels,
        latents: Some(Tensor::matrix(n, nl, latents)?),
        channels: image.channels,
        size: image.size,
    })
}

/// Accuracy of the Bayes classifier on the retained true latents.
pub fn bayes_reference(latent: &LatentSpec, data: &SyntheticCohort) -> Result<f64> {
    let z = data.latents.as_ref().ok_or_else(|| Error::State("latents were not retained".into()))?;
    bayes_accuracy(latent, z, &data.labels)
}

pub fn bayes_accuracy(latent: &LatentSpec, latents: &Tensor, labels: &[usize]) -> Result<f64> {
    if latents.rows() != labels.len() || latents.cols() != latent.n_latents || labels.is_empty() {
        return Err(Error::Shape(format!("{:?} latents for {} labels", latents.shape(), labels.len())));
    }
    let correct = (0..labels.len()).filter(|&i| latent.bayes_predict(latents.row(i)) == labels[i]).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn write_images(path: &Path, images: &Tensor, channels: usize, size: usize) -> Result<()> {
    let (n, px) = images.dims2()?;
    if px != channels * size * size {
        return Err(Error::Shape(format!("images {:?} are not {channels}×{size}×{size}", images.shape())));
    }
    let mut buf = Vec::with_capacity(16 + 4 * images.numel());
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [n, channels, size] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in images.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)
}

/// Reads an image blob; returns `(images n × C·S·S, C, S)`.
pub fn read_images(path: &Path) -> Result<(Tensor, usize, usize)> {
    let mut buf = Vec::new();
    std::fs::File::open(path).at(path)?.read_to_end(&mut buf).at(path)?;
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), line: 0, msg: msg.into() };
    if buf.len() < 16 || &buf[..4] != IMAGE_MAGIC {
        return Err(bad("missing CITB header"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, s) = (word(0), word(1), word(2));
    let px = c * s * s;
    if n == 0 || px == 0 || buf.len() != 16 + 4 * n * px {
        return Err(bad("blob length does not match its header"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::new(vec![n, px], data).map_err(|_| bad("non-finite pixel"))?, c, s))
}

pub fn write_latents(path: &Path, latents: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..latents.cols()).map(|l| format!("z{l}")))?;
    for i in 0..latents.rows() {
        w.write_record(latents.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().at(path)
}

pub fn read_latents(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    line: i + 2,
                    msg: format!("bad latent `{v}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// File names inside one generated cohort directory.
pub mod files {
    pub const SCHEMA: &str = "schema.toml";
    pub const TABLE: &str = "table.csv";
    pub const IMAGES: &str = "images.citb";
    pub const LABELS: &str = "labels.txt";
    pub const LATENTS: &str = "latents.csv";
}

/// Writes `dir/<cohort_id>/{schema.toml, table.csv, images.citb, labels.txt, latents.csv}`
/// plus `dir/generator.toml`.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, data: &[SyntheticCohort]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let gen_path = dir.join("generator.toml");
    std::fs::write(&gen_path, spec.to_toml_string()).at(&gen_path)?;
    for d in data {
        let cdir = dir.join(&d.cohort.schema().cohort_id);
        std::fs::create_dir_all(&cdir).at(&cdir)?;
        let p = cdir.join(files::SCHEMA);
        std::fs::write(&p, d.cohort.schema().to_toml_string()).at(&p)?;
        d.cohort.write_csv(&cdir.join(files::TABLE))?;
        write_images(&cdir.join(files::IMAGES), &d.images, d.channels, d.size)?;
        write_labels(&cdir.join(files::LABELS), &d.labels)?;
        if let Some(z) = &d.latents {
            write_latents(&cdir.join(files::LATENTS), z)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        let mut s = SynthSpec::default_config(seed);
        for c in &mut s.cohorts {
            c.n_subjects = 40;
        }
        s
    }

    #[test]
    fn default_shape() {
        let s = SynthSpec::default_config(0);
        s.validate().unwrap();
        let cols: Vec<usize> = s.cohorts.iter().map(|c| c.columns.len()).collect();
        assert_eq!(cols, vec![10, 8, 12]);
        let subj: Vec<usize> = s.cohorts.iter().map(|c| c.n_subjects).collect();
        assert_eq!(subj, vec![600, 400, 500]);
        assert_eq!((s.latent.n_latents, s.latent.n_classes), (6, 3));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn missing_rates() {
        let mut s = small(1);
        for c in &mut s.cohorts[0].columns {
            c.missing_rate = 0.0;
        }
        s.cohorts[1].columns[0].missing_rate = 1.0;
        let d = generate(&s).unwrap();
        assert!(d[0].cohort.presence().iter().all(|&p| p));
        let name = &s.cohorts[1].columns[0].header;
        let j = d[1].cohort.schema().columns.iter().position(|c| &c.name == name).unwrap();
        let norm = d[1].cohort.clone().normalize().unwrap();
        assert!((0..norm.n_rows()).all(|i| norm.value(i, j) == 0.0 && !norm.is_present(i, j)));
    }

    #[test]
    fn bad_latent_reference() {
        let mut s = small(1);
        s.cohorts[0].columns[0].latent = 9;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = SynthSpec::default_config(5);
        assert_eq!(SynthSpec::from_toml_str(&s.to_toml_string()).unwrap(), s);
    }

    #[test]
    fn separated_classes_are_bayes_separable() {
        let mut s = small(2);
        s.latent = LatentSpec {
            n_latents: 6,
            n_classes: 3,
            means: (0..3).map(|k| vec![7.0 * k as f64; 6]).collect(),
            stds: vec![vec![1.0; 6]; 3],
            seed: 0,
        };
        s.cohorts[0].n_subjects = 1000;
        let d = generate(&s).unwrap();
        assert!(bayes_reference(&s.latent, &d[0]).unwrap() >= 0.999);
    }

    #[test]
    fn identical_classes_are_chance() {
        let latent = LatentSpec {
            n_latents: 6,
            n_classes: 3,
            means: vec![vec![0.0; 6]; 3],
            stds: vec![vec![1.0; 6]; 3],
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[3000, 6], 1.0, &mut rng);
        let labels: Vec<usize> = (0..3000).map(|_| rng.gen_range(0..3)).collect();
        let acc = bayes_accuracy(&latent, &z, &labels).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.04, "{acc}");
    }

    #[test]
    fn missing_latents_is_state_error() {
        let mut d = generate(&small(1)).unwrap().remove(0);
        d.latents = None;
        assert!(matches!(bayes_reference(&small(1).latent, &d), Err(Error::State(_))));
    }

    #[test]
    fn image_blob_round_trip() {
        let d = generate(&small(1)).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.citb");
        write_images(&p, &d.images, 1, 16).unwrap();
        let (img, c, s) = read_images(&p).unwrap();
        assert_eq!((c, s), (1, 16));
        assert_eq!(img, d.images);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CITB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 40);
    }

    #[test]
    fn distinct_latents_render_distinct_images() {
        let img = ImageGenSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
            let mut b = a.clone();
            let l = rng.gen_range(0..6);
            b[l] += 0.5;
            let (ra, rb) = (render_image(&a, &img), render_image(&b, &img));
            let d: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d > 1.0, "{d}");
        }
    }
}
