use criterion::{black_box, criterion_group, criterion_main, Criterion};

use citab_core::config::TrainConfig;
use citab_core::graph::AttentionMask;
use citab_core::model::CitabModel;
use citab_core::params::{Binder, ParamStore};
use citab_core::pmolin::PMoLin;
use citab_core::synth::{generate, SynthSpec};
use citab_core::train::{self, Adam, CohortData};
use citab_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[104, 32], 1.0, &mut rng);
    let w = Tensor::randn(&[32, 128], 1.0, &mut rng);
    c.bench_function("matmul 104x32 by 32x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(w.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (batch, seq, d) = (8, 13, 32);
    let q = Tensor::randn(&[batch * seq, d], 1.0, &mut rng);
    let valid: Vec<bool> = (0..batch * seq).map(|r| r % seq < 9).collect();
    let mask = AttentionMask::self_attention(batch, valid);
    c.bench_function("masked attention forward+backward, 8 x 13 tokens, 4 heads", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(q.clone(), true);
            let a = g.masked_attention(x, x, x, &mask, 4).unwrap();
            let s = g.sum(a).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(x).is_some());
        })
    });
}

fn pmolin(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let layer = PMoLin::new(&mut store, "bench", 32, 128, 3, 0.1, 1.0, &mut rng).unwrap();
    let x = Tensor::randn(&[104, 32], 1.0, &mut rng);
    c.bench_function("P-MoLin forward, 104 tokens, 3 experts", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let mut b = Binder::new(&store, false);
            let xv = g.constant(x.clone());
            black_box(layer.forward(&mut g, &mut b, xv).unwrap());
        })
    });
}

fn ssl_step(c: &mut Criterion) {
    let cfg = TrainConfig::from_toml_str(include_str!("../../../configs/pretrain.toml")).unwrap();
    let mut spec = SynthSpec::default_config(0);
    for cohort in &mut spec.cohorts {
        cohort.n_subjects = 32;
    }
    let embedder = train::header_embedder(&cfg).unwrap();
    let data = CohortData::from_synthetic(&generate(&spec).unwrap()[0], &embedder).unwrap();
    let batch = data.batch(&(0..cfg.train.batch_size).collect::<Vec<_>>(), false).unwrap();
    let mut model = CitabModel::new(&cfg.model, 0).unwrap();
    let mut adam = Adam::new(&cfg.optim, &model.store);
    c.bench_function("pretraining step, shipped config", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let mut b = Binder::new(&model.store, true);
            let out = model.ssl_loss(&mut g, &mut b, &batch, &cfg.ssl).unwrap();
            g.backward(out.loss).unwrap();
            let grads = b.gradients(&g);
            adam.step(&mut model.store, &grads).unwrap();
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = matmul, attention, pmolin, ssl_step
}
criterion_main!(kernels);
