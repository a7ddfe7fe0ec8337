//! Exports for inspecting a trained model: expert-activation histograms, raw
//! routing weights, tabular and multimodal embeddings, prototypes and header
//! similarities.
//!
//! Every number is written with `{:?}`, which prints the shortest decimal that
//! parses back to the same `f64`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::header::{load_header_embeddings, mean_pairwise_cosine, write_header_embeddings, HeaderEmbedder, HeaderEmbedding};
use crate::model::{CitabModel, Embeddings};
use crate::pmolin::{expert_activation_histogram, ExpertHistogram, RoutingRecord};
use crate::tensor::Tensor;
use crate::train::CohortData;

pub const HEADERS: &str = "headers.tsv";
pub const HEADER_SIMILARITY: &str = "header_similarity.csv";

pub fn experts_file(cohort: &str) -> String {
    format!("experts_{}.csv", file_stem(cohort))
}

pub fn routing_file(cohort: &str) -> String {
    format!("routing_{}.csv", file_stem(cohort))
}

pub fn tabular_file(cohort: &str) -> String {
    format!("tabular_{}.csv", file_stem(cohort))
}

pub fn multimodal_file(cohort: &str) -> String {
    format!("multimodal_{}.csv", file_stem(cohort))
}

pub fn prototypes_file(layer: usize) -> String {
    format!("prototypes_layer{layer}.csv")
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Routing records for the given rows, evaluated in chunks.
pub fn collect_routing(model: &CitabModel, data: &CohortData, rows: &[usize]) -> Result<Vec<RoutingRecord>> {
    let mut out = Vec::new();
    for chunk in rows.chunks(64) {
        out.extend(model.routing_records(&data.batch(chunk, false)?)?);
    }
    Ok(out)
}

pub fn cohort_histogram(model: &CitabModel, data: &CohortData, rows: &[usize]) -> Result<ExpertHistogram> {
    expert_activation_histogram(&collect_routing(model, data, rows)?)
}

/// Embeddings for the given rows, evaluated in chunks.
pub fn cohort_embeddings(model: &CitabModel, data: &CohortData, rows: &[usize]) -> Result<Embeddings> {
    if rows.is_empty() {
        return Err(Error::Input("no rows to embed".into()));
    }
    let (mut tab, mut mm, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in rows.chunks(64) {
        let e = model.embed(&data.batch(chunk, false)?)?;
        tab.extend(e.tabular.into_data());
        mm.extend(e.multimodal.into_data());
        probs.extend(e.probs.into_data());
    }
    let (n, d) = (rows.len(), model.config.sat.d_model);
    Ok(Embeddings {
        tabular: Tensor::matrix(n, d, tab)?,
        multimodal: Tensor::matrix(n, d, mm)?,
        probs: Tensor::matrix(n, model.config.n_classes, probs)?,
    })
}

/// A matrix with per-row metadata columns, as read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable {
    pub meta_headers: Vec<String>,
    pub meta: Vec<Vec<String>>,
    pub values: Tensor,
}

/// Writes `meta…, {prefix}0, {prefix}1, …` rows.
pub fn write_vectors_csv(path: &Path, meta_headers: &[&str], meta: &[Vec<String>], prefix: &str, values: &Tensor) -> Result<()> {
    let (n, d) = values.dims2()?;
    if meta.len() != n || meta.iter().any(|m| m.len() != meta_headers.len()) {
        return Err(Error::Shape(format!("{} metadata rows for {n} vectors", meta.len())));
    }
    let mut s = meta_headers.join(",");
    for j in 0..d {
        if !s.is_empty() {
            s.push(',');
        }
        let _ = write!(s, "{prefix}{j}");
    }
    s.push('\n');
    for (i, m) in meta.iter().enumerate() {
        let mut fields: Vec<String> = m.iter().map(|f| csv_field(f)).collect();
        fields.extend(values.row(i).iter().map(|v| format!("{v:?}")));
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).at(path)
}

/// Reads a file written by [`write_vectors_csv`] with `n_meta` leading columns.
pub fn read_vectors_csv(path: &Path, n_meta: usize) -> Result<VectorTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < n_meta {
        return Err(Error::Format { path: path.to_path_buf(), line: 1, msg: format!("expected {n_meta} metadata columns") });
    }
    let d = headers.len() - n_meta;
    let mut meta = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        meta.push(rec.iter().take(n_meta).map(str::to_string).collect());
        for f in rec.iter().skip(n_meta) {
            data.push(f.parse::<f64>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("`{f}` is not a number"),
            })?);
        }
    }
    let n = meta.len();
    Ok(VectorTable {
        meta_headers: headers.iter().take(n_meta).map(str::to_string).collect(),
        meta,
        values: Tensor::matrix(n, d, data)?,
    })
}

fn write_routing_csv(path: &Path, records: &[RoutingRecord], samples_per_record: usize) -> Result<()> {
    let e = records.first().map_or(0, |r| r.weights.cols());
    let mut s = String::from("sample,layer,token,column");
    for j in 0..e {
        let _ = write!(s, ",w{j}");
    }
    s.push('\n');
    for (k, rec) in records.iter().enumerate() {
        let sample = k / samples_per_record.max(1);
        for t in 0..rec.weights.rows() {
            let col = if t == 0 { "[class]".to_string() } else { csv_field(&rec.columns[t - 1]) };
            let _ = write!(s, "{sample},{},{t},{col}", rec.layer);
            for w in rec.weights.row(t) {
                let _ = write!(s, ",{w:?}");
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s).at(path)
}

/// Cosine similarity of every unordered pair of distinct header names.
pub fn header_pair_similarities(embeddings: &[HeaderEmbedding]) -> Vec<(String, String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let (a, b) = (&embeddings[i].vector, &embeddings[j].vector);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push((embeddings[i].column_name.clone(), embeddings[j].column_name.clone(), dot / (norm(a) * norm(b))));
        }
    }
    out
}

pub fn write_header_similarity(path: &Path, pairs: &[(String, String, f64)]) -> Result<()> {
    let mut s = String::from("column_a,column_b,cosine\n");
    for (a, b, c) in pairs {
        let _ = writeln!(s, "{},{},{c:?}", csv_field(a), csv_field(b));
    }
    std::fs::write(path, s).at(path)
}

pub fn read_header_similarity(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let c = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line: i + 2,
            msg: "bad cosine".into(),
        })?;
        out.push((rec[0].to_string(), rec[1].to_string(), c));
    }
    Ok(out)
}

/// Re-reads an exported header table and recomputes the pairwise cosines.
pub fn rescore_headers(path: &Path, names: &[String], dim: usize) -> Result<Vec<(String, String, f64)>> {
    let table = load_header_embeddings(path, dim)?;
    let embeddings = names
        .iter()
        .map(|n| {
            table
                .get(n)
                .map(|v| HeaderEmbedding { column_name: n.clone(), vector: v.clone() })
                .ok_or_else(|| Error::Input(format!("`{n}` missing from {}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(header_pair_similarities(&embeddings))
}

#[derive(Clone, Debug)]
pub struct DiagnosticsSummary {
    /// Per-cohort histograms over every row of the cohort.
    pub histograms: Vec<(String, ExpertHistogram)>,
    /// Mean cosine over all pairs of distinct header names.
    pub header_similarity: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Writes every diagnostic file for `cohorts` into `dir`.
pub fn export_diagnostics(
    model: &CitabModel,
    cohorts: &[CohortData],
    embedder: &HeaderEmbedder,
    dir: &Path,
) -> Result<DiagnosticsSummary> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut files = Vec::new();
    let mut histograms = Vec::new();
    for data in cohorts {
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        let records = collect_routing(model, data, &rows)?;
        let hist = expert_activation_histogram(&records)?;
        let path = dir.join(experts_file(&data.id));
        hist.write_csv(&path)?;
        files.push(path);
        let path = dir.join(routing_file(&data.id));
        write_routing_csv(&path, &records, model.sat.blocks.len())?;
        files.push(path);

        let emb = cohort_embeddings(model, data, &rows)?;
        let meta: Vec<Vec<String>> = rows
            .iter()
            .map(|&r| {
                let label = data.labels.as_ref().map_or(String::new(), |l| l[r].to_string());
                vec![r.to_string(), label]
            })
            .collect();
        for (name, m) in [(tabular_file(&data.id), &emb.tabular), (multimodal_file(&data.id), &emb.multimodal)] {
            let path = dir.join(name);
            write_vectors_csv(&path, &["row", "label"], &meta, "e", m)?;
            files.push(path);
        }
        histograms.push((data.id.clone(), hist));
    }
    for (l, block) in model.sat.blocks.iter().enumerate() {
        let p = model.store.get(block.moe.prototypes);
        let meta: Vec<Vec<String>> = (0..p.rows()).map(|e| vec![e.to_string()]).collect();
        let path = dir.join(prototypes_file(l));
        write_vectors_csv(&path, &["expert"], &meta, "p", p)?;
        files.push(path);
    }
    let names: BTreeSet<&str> = cohorts.iter().flat_map(|c| c.columns.iter().map(String::as_str)).collect();
    let embeddings = names.iter().map(|n| embedder.embed(n)).collect::<Result<Vec<_>>>()?;
    let path = dir.join(HEADERS);
    write_header_embeddings(&path, &embeddings)?;
    files.push(path);
    let pairs = header_pair_similarities(&embeddings);
    let path = dir.join(HEADER_SIMILARITY);
    write_header_similarity(&path, &pairs)?;
    files.push(path);
    let vectors: Vec<Vec<f64>> = embeddings.into_iter().map(|e| e.vector).collect();
    let header_similarity = if vectors.len() >= 2 { Some(mean_pairwise_cosine(&vectors)?) } else { None };
    Ok(DiagnosticsSummary { histograms, header_similarity, files })
}
