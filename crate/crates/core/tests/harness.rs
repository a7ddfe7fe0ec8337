//! Training harness, data round trips, checkpoints and diagnostics.

use std::collections::HashMap;

use citab_core::checkpoint::Checkpoint;
use citab_core::config::TrainConfig;
use citab_core::diagnostics::{self, export_diagnostics, read_header_similarity, read_vectors_csv, rescore_headers};
use citab_core::metrics::compute_metrics;
use citab_core::model::CitabModel;
use citab_core::pmolin::{argmax_expert, ExpertHistogram};
use citab_core::synth::{generate, write_dataset, SynthSpec};
use citab_core::train::*;
use citab_core::Tensor;

fn small_spec(n: usize) -> SynthSpec {
    let mut s = SynthSpec::default_config(0);
    for c in &mut s.cohorts {
        c.n_subjects = n;
    }
    s
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.sat.d_model = 8;
    cfg.model.sat.d_header = 8;
    cfg.model.sat.n_heads = 2;
    cfg.model.sat.n_layers = 1;
    cfg.model.sat.n_experts = 3;
    cfg.model.sat.max_columns = 12;
    cfg.model.fusion.n_layers = 1;
    cfg.model.fusion.n_heads = 2;
    cfg.optim.lr = 1e-3;
    cfg.train.pretrain_epochs = 2;
    cfg.train.finetune_epochs = 2;
    cfg
}

fn cohorts(spec: &SynthSpec, cfg: &TrainConfig) -> Vec<CohortData> {
    let emb = header_embedder(cfg).unwrap();
    generate(spec).unwrap().iter().map(|g| CohortData::from_synthetic(g, &emb).unwrap()).collect()
}

fn train_rows(cfg: &TrainConfig, data: &[CohortData]) -> Vec<Vec<usize>> {
    data.iter().map(|d| cohort_splits(cfg, d).train).collect()
}

#[test]
fn loaded_cohort_matches_reference_reader() {
    let spec = small_spec(50);
    let gen = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &spec, &gen).unwrap();
    let cfg = small_config();
    let emb = header_embedder(&cfg).unwrap();
    for (cspec, g) in spec.cohorts.iter().zip(&gen) {
        let cdir = dir.path().join(&cspec.cohort_id);
        let loaded = CohortData::load(&cdir, &emb).unwrap();
        assert_eq!(loaded.labels.as_deref(), Some(g.labels.as_slice()));

        // Independent two-pass reader: split lines, then z-score continuous columns.
        let text = std::fs::read_to_string(cdir.join("table.csv")).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let cells: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        for (j, name) in loaded.columns.iter().enumerate() {
            let file_col = header.iter().position(|h| h == name).unwrap();
            let gen_col = cspec.columns.iter().find(|c| &c.header == name).unwrap();
            let raw: Vec<Option<f64>> = cells
                .iter()
                .map(|r| {
                    let s = r[file_col];
                    if s.is_empty() {
                        None
                    } else if gen_col.categories.is_empty() {
                        Some(s.parse().unwrap())
                    } else {
                        Some(gen_col.categories.iter().position(|c| c == s).unwrap() as f64)
                    }
                })
                .collect();
            let observed: Vec<f64> = raw.iter().flatten().copied().collect();
            let mean = observed.iter().sum::<f64>() / observed.len() as f64;
            let std = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / observed.len() as f64).sqrt();
            for (i, v) in raw.iter().enumerate() {
                let expect = match v {
                    None => 0.0,
                    Some(v) if !gen_col.categories.is_empty() => *v,
                    Some(v) => (v - mean) / std,
                };
                let (values, presence) = loaded.cohort.encode_row(i).unwrap();
                assert_eq!(presence[j], v.is_some());
                assert!((values[j] - expect).abs() <= 1e-12, "{name} row {i}: {} vs {expect}", values[j]);
            }
        }
    }
}

#[test]
fn same_latent_columns_are_correlated() {
    let spec = SynthSpec::default_config(0);
    let cfg = small_config();
    let data = cohorts(&spec, &cfg);
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for (cspec, d) in spec.cohorts.iter().zip(&data) {
        let z = d.latents.as_ref().unwrap();
        for (j, name) in d.columns.iter().enumerate() {
            let gen_col = cspec.columns.iter().find(|c| &c.header == name).unwrap();
            if gen_col.noise_std > 0.5 || !gen_col.categories.is_empty() {
                continue;
            }
            // Observed cells only: missing cells carry no signal by design.
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for i in 0..d.n_rows() {
                if d.cohort.is_present(i, j) {
                    x.push(d.cohort.value(i, j));
                    y.push(z.get2(i, gen_col.latent));
                }
            }
            let r = corr(&x, &y);
            assert!(r.abs() >= 0.5, "{} `{name}`: corr {r}", cspec.cohort_id);
        }
    }
}

#[test]
fn pretraining_ignores_labels_and_is_deterministic() {
    let spec = small_spec(40);
    let cfg = small_config();
    let labeled = cohorts(&spec, &cfg);
    let unlabeled: Vec<CohortData> = labeled.iter().cloned().map(CohortData::without_labels).collect();
    let rows = train_rows(&cfg, &labeled);
    let run = |data: &[CohortData]| {
        let mut m = CitabModel::new(&cfg.model, 3).unwrap();
        let r = pretrain(&mut m, data, &rows, &cfg).unwrap();
        (r.epoch_losses, m.store)
    };
    let (trace_a, store_a) = run(&labeled);
    let (trace_b, store_b) = run(&unlabeled);
    let (trace_c, store_c) = run(&unlabeled);
    assert_eq!(trace_a, trace_b);
    assert_eq!(store_a, store_b);
    assert_eq!(trace_b, trace_c);
    assert_eq!(store_b, store_c);
}

#[test]
fn pretraining_loss_falls_on_the_default_data() {
    let spec = SynthSpec::default_config(0);
    let mut cfg = small_config();
    cfg.model.sat.d_model = 16;
    cfg.model.sat.d_header = 16;
    cfg.train.pretrain_epochs = 3;
    let data: Vec<CohortData> = cohorts(&spec, &cfg).into_iter().map(CohortData::without_labels).collect();
    let rows = train_rows(&cfg, &data);
    let mut m = CitabModel::new(&cfg.model, 0).unwrap();
    let r = pretrain(&mut m, &data, &rows, &cfg).unwrap();
    assert!(r.epoch_losses.last().unwrap() < r.epoch_losses.first().unwrap(), "{:?}", r.epoch_losses);
}

#[test]
fn zero_finetune_epochs_return_the_initial_model() {
    let spec = small_spec(40);
    let mut cfg = small_config();
    cfg.train.finetune_epochs = 0;
    let data = cohorts(&spec, &cfg);
    let s = cohort_splits(&cfg, &data[0]);
    let mut m = CitabModel::new(&cfg.model, 1).unwrap();
    let before = m.store.clone();
    let r = finetune(&mut m, &data[0], &s.train, &s.val, &cfg).unwrap();
    assert_eq!(r.best_epoch, 0);
    assert!(r.val_accuracy.is_empty());
    assert_eq!(m.store, before);
}

#[test]
fn validation_metrics_match_recomputation_from_exported_predictions() {
    let spec = small_spec(60);
    let cfg = small_config();
    let data = cohorts(&spec, &cfg);
    let s = cohort_splits(&cfg, &data[0]);
    let mut m = CitabModel::new(&cfg.model, 2).unwrap();
    let r = finetune(&mut m, &data[0], &s.train, &s.val, &cfg).unwrap();
    let probs = predict(&m, &data[0], &s.val).unwrap();
    let labels: Vec<usize> = s.val.iter().map(|&i| data[0].labels.as_ref().unwrap()[i]).collect();
    assert_eq!(compute_metrics(&probs, &labels).unwrap(), r.val_metrics);
    assert_eq!(r.val_accuracy[r.best_epoch - 1], r.val_metrics.accuracy);
    assert!(r.val_accuracy[..r.best_epoch - 1].iter().all(|&a| a < r.val_metrics.accuracy));
}

#[test]
fn checkpoint_round_trip_preserves_forward_outputs_bitwise() {
    let spec = small_spec(30);
    let cfg = small_config();
    let data = cohorts(&spec, &cfg);
    let mut m = CitabModel::new(&cfg.model, 4).unwrap();
    let rows = train_rows(&cfg, &data);
    let r = pretrain(&mut m, &data, &rows, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_store(&m.store, cfg.to_toml_string(), r.steps, r.epoch_losses.clone()).save(dir.path()).unwrap();
    let ck = Checkpoint::load(dir.path()).unwrap();
    let restored_cfg = TrainConfig::from_toml_str(&ck.config).unwrap();
    let mut restored = CitabModel::new(&restored_cfg.model, 99).unwrap();
    ck.apply(&mut restored.store).unwrap();
    let all: Vec<usize> = (0..data[1].n_rows()).collect();
    let a = m.embed(&data[1].batch(&all, false).unwrap()).unwrap();
    let b = restored.embed(&data[1].batch(&all, false).unwrap()).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.probs), bits(&b.probs));
    assert_eq!(bits(&a.multimodal), bits(&b.multimodal));
    assert_eq!(ck.loss_trace, r.epoch_losses);
}

#[test]
fn diagnostics_export_and_round_trip() {
    let spec = small_spec(30);
    let cfg = small_config();
    let data = cohorts(&spec, &cfg);
    let m = CitabModel::new(&cfg.model, 5).unwrap();
    let emb = header_embedder(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = export_diagnostics(&m, &data[..2], &emb, dir.path()).unwrap();
    let sim = summary.header_similarity.unwrap();
    assert!((-1.0..=1.0).contains(&sim));

    for d in &data[..2] {
        let hist = ExpertHistogram::read_csv(&dir.path().join(diagnostics::experts_file(&d.id))).unwrap();
        assert_eq!(hist.columns.len(), d.columns.len());
        for (_, r) in &hist.columns {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        // Recount argmax experts from the raw routing export.
        let raw = read_vectors_csv(&dir.path().join(diagnostics::routing_file(&d.id)), 4).unwrap();
        let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, meta) in raw.meta.iter().enumerate() {
            if meta[2] == "0" {
                continue;
            }
            counts.entry(meta[3].clone()).or_insert_with(|| vec![0; 3])[argmax_expert(raw.values.row(i))] += 1;
        }
        for (col, ratios) in &hist.columns {
            let c = &counts[col];
            let total: usize = c.iter().sum();
            assert_eq!(total, d.n_rows() * cfg.model.sat.n_layers);
            for e in 0..3 {
                assert_eq!(ratios[e], c[e] as f64 / total as f64);
            }
        }
        let tab = read_vectors_csv(&dir.path().join(diagnostics::tabular_file(&d.id)), 2).unwrap();
        assert_eq!(tab.values.shape(), &[d.n_rows(), cfg.model.sat.d_model]);
        let all: Vec<usize> = (0..d.n_rows()).collect();
        let direct = m.embed(&d.batch(&all, false).unwrap()).unwrap();
        assert_eq!(tab.values, direct.tabular);
    }
    let protos = read_vectors_csv(&dir.path().join(diagnostics::prototypes_file(0)), 1).unwrap();
    assert_eq!(protos.values.rows(), cfg.model.sat.n_experts);

    let exported = read_header_similarity(&dir.path().join(diagnostics::HEADER_SIMILARITY)).unwrap();
    let mut names: Vec<String> = data[..2].iter().flat_map(|d| d.columns.clone()).collect();
    names.sort();
    names.dedup();
    let rescored = rescore_headers(&dir.path().join(diagnostics::HEADERS), &names, cfg.model.sat.d_header).unwrap();
    assert_eq!(exported.len(), names.len() * (names.len() - 1) / 2);
    for ((a1, b1, c1), (a2, b2, c2)) in exported.iter().zip(&rescored) {
        assert_eq!((a1, b1), (a2, b2));
        assert!((c1 - c2).abs() <= 1e-10);
    }
}
