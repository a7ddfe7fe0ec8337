//! Frozen semantic embeddings of column headers.
//!
//! Header vectors come either from a deterministic hashed bag-of-tokens
//! embedder or from a file of externally precomputed vectors. They are
//! constants in every graph; only the [`HeaderAdapter`] that maps them to the
//! model width is trained.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, IoContext, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeaderEmbedding {
    pub column_name: String,
    pub vector: Vec<f64>,
}

/// Lowercases, collapses whitespace and splits on non-alphanumerics.
pub fn header_tokens(name: &str) -> Vec<String> {
    let folded = name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let tokens: Vec<String> = folded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        vec![folded]
    } else {
        tokens
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic pseudo-random unit vector for one token.
fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes(), seed));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Hashed bag-of-tokens header embedding with unit L2 norm.
pub fn embed_header_hashed(name: &str, dim: usize, seed: u64) -> Result<HeaderEmbedding> {
    if name.trim().is_empty() {
        return Err(Error::Input("header name is empty".into()));
    }
    if dim == 0 {
        return Err(Error::Config("header dimension must be positive".into()));
    }
    let tokens = header_tokens(name);
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, x) in acc.iter_mut().zip(token_vector(t, dim, seed)) {
            *a += x;
        }
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Input(format!("tokens of `{name}` cancel to a zero vector")));
    }
    Ok(HeaderEmbedding { column_name: name.to_string(), vector: acc.into_iter().map(|x| x / n).collect() })
}

/// Header embedding source: imported vectors with hashed fallback.
#[derive(Debug)]
pub struct HeaderEmbedder {
    dim: usize,
    seed: u64,
    table: HashMap<String, Vec<f64>>,
    fallbacks: AtomicUsize,
}

impl HeaderEmbedder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self { dim, seed, table: HashMap::new(), fallbacks: AtomicUsize::new(0) }
    }

    pub fn with_table(dim: usize, seed: u64, table: HashMap<String, Vec<f64>>) -> Self {
        Self { dim, seed, table, fallbacks: AtomicUsize::new(0) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table_len(&self) -> usize {
        self.table.len()
    }

    /// Number of lookups that fell back to the hashed embedder.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn embed(&self, name: &str) -> Result<HeaderEmbedding> {
        if let Some(v) = self.table.get(name) {
            return Ok(HeaderEmbedding { column_name: name.to_string(), vector: v.clone() });
        }
        if !self.table.is_empty() {
            log::info!("header `{name}` not in embedding table; using hashed fallback");
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        embed_header_hashed(name, self.dim, self.seed)
    }

    /// Stacks the embeddings of `names` into a `C_t × D_h` matrix.
    pub fn embed_all<S: AsRef<str>>(&self, names: &[S]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            data.extend(self.embed(n.as_ref())?.vector);
        }
        Tensor::matrix(names.len(), self.dim, data)
    }
}

/// Parses a tab-separated embedding file: `name<TAB>v1<TAB>…<TAB>vDh`.
/// Lines starting with `#` and blank lines are skipped.
pub fn load_header_embeddings(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_header_embeddings(&text, dim, path)
}

pub fn parse_header_embeddings(text: &str, dim: usize, path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Format { path: path.to_path_buf(), line: line_no, msg };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let name = fields.next().unwrap_or_default().to_string();
        if name.trim().is_empty() {
            return Err(err("empty header name".into()));
        }
        let vector = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vector.len() != dim {
            return Err(err(format!("expected {dim} values, found {}", vector.len())));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        if table.insert(name.clone(), vector).is_some() {
            return Err(err(format!("duplicate header `{name}`")));
        }
    }
    Ok(table)
}

/// Writes embeddings with 17 significant digits so they read back exactly.
pub fn write_header_embeddings(path: &Path, embeddings: &[HeaderEmbedding]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    for e in embeddings {
        write!(f, "{}", e.column_name).at(path)?;
        for v in &e.vector {
            write!(f, "\t{v:.16e}").at(path)?;
        }
        writeln!(f).at(path)?;
    }
    f.flush().at(path)
}

/// Linear map from header space `D_h` to model width `D`.
#[derive(Clone, Copy, Debug)]
pub struct HeaderAdapter {
    pub linear: Linear,
}

impl HeaderAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_header: usize, d_model: usize, std: f64, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "header_adapter", d_header, d_model, std, rng) }
    }

    /// `ĥ = h·W + b`; `h` is a frozen constant.
    pub fn adapt(&self, g: &mut Graph, b: &mut Binder, h: &Tensor) -> Result<Var> {
        let w = b.store().get(self.linear.weight);
        if h.cols() != w.rows() {
            return Err(Error::Shape(format!(
                "header embeddings {:?} do not match adapter {:?}",
                h.shape(),
                w.shape()
            )));
        }
        let h = g.constant(h.clone());
        self.linear.forward(g, b, h)
    }
}

/// Mean cosine similarity over all unordered pairs of distinct vectors.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Input("need at least two vectors".into()));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Input(format!("vector {i} is zero")));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            total += dot / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_is_deterministic_and_case_folded() {
        let a = embed_header_hashed("Age", 64, 7).unwrap();
        let b = embed_header_hashed("age", 64, 7).unwrap();
        let c = embed_header_hashed("  AGE ", 64, 7).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.vector, c.vector);
        assert_eq!(a.vector, embed_header_hashed("Age", 64, 7).unwrap().vector);
        assert_ne!(a.vector, embed_header_hashed("Age", 64, 8).unwrap().vector);
    }

    #[test]
    fn hashed_has_unit_norm() {
        for name in ["age", "memory score (RAVL)", "x", "---", "Years of Education"] {
            let v = embed_header_hashed(name, 32, 1).unwrap().vector;
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "{name}: {n}");
        }
    }

    #[test]
    fn empty_name_rejected() {
        assert!(matches!(embed_header_hashed("  ", 8, 0), Err(Error::Input(_))));
    }

    #[test]
    fn shared_tokens_pull_embeddings_together() {
        let a = embed_header_hashed("memory_test_score", 64, 3).unwrap().vector;
        let b = embed_header_hashed("memory score (RAVL)", 64, 3).unwrap().vector;
        let c = embed_header_hashed("hippocampal volume", 64, 3).unwrap().vector;
        let near = mean_pairwise_cosine(&[a.clone(), b]).unwrap();
        let far = mean_pairwise_cosine(&[a, c]).unwrap();
        assert!(near > 0.5 && far.abs() < 0.4, "{near} {far}");
    }

    #[test]
    fn table_lookup_and_fallback() {
        let table = parse_header_embeddings("# comment\nage\t0.1\t0.2\n", 2, Path::new("t")).unwrap();
        assert_eq!(table.len(), 1);
        let e = HeaderEmbedder::with_table(2, 0, table);
        assert_eq!(e.embed("age").unwrap().vector, vec![0.1, 0.2]);
        assert_eq!(e.fallback_count(), 0);
        let m = e.embed("mmse").unwrap();
        assert_eq!(m.vector, embed_header_hashed("mmse", 2, 0).unwrap().vector);
        assert_eq!(e.fallback_count(), 1);
    }

    #[test]
    fn file_format_errors_carry_line_numbers() {
        match parse_header_embeddings("a\t1\t2\nb\t1\n", 2, Path::new("t")) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_header_embeddings("a\t1\t2\n#x\na\t3\t4\n", 2, Path::new("t")) {
            Err(Error::Format { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        let v = vec![1.0, 2.0, 3.0];
        assert!((mean_pairwise_cosine(&[v.clone(), v.clone(), v]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        assert!(mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(mean_pairwise_cosine(&[vec![1.0]]).is_err());
    }
}
