//! Prototype-guided mixture-of-linear layer.
//!
//! `E` learnable prototypes score every token by raw dot product; a softmax
//! over the expert axis turns the scores into dense routing weights, and the
//! output is the routing-weighted sum of all `E` expert feed-forward networks.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, FeedForward, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PMoLin {
    /// `E × D` prototype matrix.
    pub prototypes: ParamId,
    pub experts: Vec<FeedForward>,
}

impl PMoLin {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        n_experts: usize,
        prototype_std: f64,
        weight_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("P-MoLin needs at least one expert".into()));
        }
        let prototypes = store.add(format!("{name}.prototypes"), Tensor::randn(&[n_experts, dim], prototype_std, rng));
        let experts = (0..n_experts)
            .map(|e| FeedForward::new(store, &format!("{name}.expert{e}"), dim, hidden, weight_std, rng))
            .collect();
        Ok(Self { prototypes, experts })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// `softmax_rows(x · Pᵀ)`, one row of `E` weights per token.
    pub fn routing_weights(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let p = b.var(g, self.prototypes);
        if g.value(x).cols() != g.value(p).cols() {
            return Err(Error::Shape(format!(
                "tokens {:?} vs prototypes {:?}",
                g.value(x).shape(),
                g.value(p).shape()
            )));
        }
        let pt = g.transpose(p)?;
        let scores = g.matmul(x, pt)?;
        g.softmax_rows(scores)
    }

    /// Returns the mixed output and the routing weights.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<(Var, Var)> {
        let weights = self.routing_weights(g, b, x)?;
        let tokens = g.value(x).rows();
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(g, b, x)?;
            let w = g.pick_per_row(weights, &vec![e; tokens])?;
            let term = g.scale_rows(y, w)?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok((out.expect("at least one expert"), weights))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_expert(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Routing weights of one tabular sequence at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    /// Names of the `C_t` column tokens that follow the class token.
    pub columns: Vec<String>,
    /// `(C_t + 1) × E`; row 0 belongs to the class token.
    pub weights: Tensor,
}

impl RoutingRecord {
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.weights.rows()).map(|i| argmax_expert(self.weights.row(i))).collect()
    }
}

/// Per-column fraction of tokens whose top routing weight selects each expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertHistogram {
    pub n_experts: usize,
    /// `(column, ratios)` in order of first appearance.
    pub columns: Vec<(String, Vec<f64>)>,
}

impl ExpertHistogram {
    pub fn ratios(&self, column: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(c, _)| c == column).map(|(_, r)| r.as_slice())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("column,expert_index,ratio\n");
        for (col, ratios) in &self.columns {
            for (e, r) in ratios.iter().enumerate() {
                s.push_str(&format!("{},{e},{r:?}\n", csv_field(col)));
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use crate::error::IoContext;
        std::fs::write(path, self.to_csv_string()).at(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
        let mut n_experts = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |msg: &str| Error::Format { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
            let col = rec.get(0).ok_or_else(|| bad("missing column"))?.to_string();
            let e: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad expert index"))?;
            let r: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad ratio"))?;
            n_experts = n_experts.max(e + 1);
            let idx = match columns.iter().position(|(c, _)| *c == col) {
                Some(i) => i,
                None => {
                    columns.push((col, Vec::new()));
                    columns.len() - 1
                }
            };
            let ratios = &mut columns[idx].1;
            if ratios.len() <= e {
                ratios.resize(e + 1, 0.0);
            }
            ratios[e] = r;
        }
        for (_, r) in columns.iter_mut() {
            r.resize(n_experts, 0.0);
        }
        Ok(Self { n_experts, columns })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aggregates argmax-expert counts per column name over all records.
pub fn expert_activation_histogram(records: &[RoutingRecord]) -> Result<ExpertHistogram> {
    let first = records.first().ok_or_else(|| Error::State("no routing records collected".into()))?;
    let n_experts = first.weights.cols();
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
    for rec in records {
        if rec.weights.cols() != n_experts || rec.weights.rows() != rec.columns.len() + 1 {
            return Err(Error::Shape(format!(
                "routing record {:?} for {} columns and {n_experts} experts",
                rec.weights.shape(),
                rec.columns.len()
            )));
        }
        for (col, expert) in rec.columns.iter().zip(rec.argmax().into_iter().skip(1)) {
            let entry = counts.entry(col.clone()).or_insert_with(|| {
                order.push(col.clone());
                vec![0; n_experts]
            });
            entry[expert] += 1;
        }
    }
    let columns = order
        .into_iter()
        .map(|col| {
            let c = &counts[&col];
            let total: usize = c.iter().sum();
            let ratios = c.iter().map(|&n| n as f64 / total as f64).collect();
            (col, ratios)
        })
        .collect();
    Ok(ExpertHistogram { n_experts, columns })
}

/// Total-variation distance between two discrete distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
