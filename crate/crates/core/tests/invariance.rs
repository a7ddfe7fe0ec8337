//! Column-permutation and padding invariance of the tabular encoder and the fusion module.

use citab_core::fusion::{FusionConfig, ImageConfig, ImageStem};
use citab_core::model::{CitabModel, ModelConfig};
use citab_core::params::Binder;
use citab_core::sat::SatConfig;
use citab_core::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L_MAX: usize = 6;

fn config(max_columns: usize) -> ModelConfig {
    ModelConfig {
        sat: SatConfig { d_model: 8, d_header: 5, max_columns, n_layers: 2, n_heads: 2, n_experts: 3, expert_hidden: 0 },
        image: ImageConfig { channels: 1, size: 4, patch: 2, stem: ImageStem::Patch },
        fusion: FusionConfig { n_layers: 2, n_heads: 2, hidden: 0 },
        n_classes: 3,
        d_proj: 0,
        init_std: 0.4,
        prototype_std: 0.5,
    }
}

struct Outputs {
    /// `B·(L_max+1) × D` tabular tokens.
    table: Tensor,
    /// `B·(C_i+L_max+1) × D` fused tokens.
    fused: Tensor,
    table_valid: Vec<bool>,
    fused_valid: Vec<bool>,
}

/// Runs both encoders; `perturb` may overwrite rows of the padded tabular input.
fn run(model: &CitabModel, values: &Tensor, headers: &Tensor, images: &Tensor, perturb: Option<&Tensor>) -> Outputs {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store, false);
    let batch = values.rows();
    let h_hat = model.sat.adapter.adapt(&mut g, &mut b, headers).unwrap();
    let f_hat = model.sat.semantic_embed(&mut g, &mut b, values, h_hat).unwrap();
    let (tokens, validity) = model.sat.pad_and_mask(&mut g, &mut b, f_hat, batch).unwrap();
    let tokens = match perturb {
        None => tokens,
        Some(noise) => {
            let mut t = g.value(tokens).clone();
            let d = t.cols();
            for (r, ok) in validity.iter().enumerate() {
                if !ok {
                    t.data_mut()[r * d..(r + 1) * d].copy_from_slice(noise.row(r));
                }
            }
            g.constant(t)
        }
    };
    let enc = model.sat.encode_table(&mut g, &mut b, tokens, &validity, batch).unwrap();
    let f_i = model.image.encode(&mut g, &mut b, images).unwrap();
    let fused = model.fusion.fuse(&mut g, &mut b, f_i, enc.tokens, &validity).unwrap();
    let ci = model.image_tokens();
    let fused_valid = (0..batch)
        .flat_map(|s| std::iter::repeat(true).take(ci).chain(validity[s * (L_MAX + 1)..(s + 1) * (L_MAX + 1)].iter().copied()))
        .collect();
    Outputs { table: g.value(enc.tokens).clone(), fused: g.value(fused.tokens).clone(), table_valid: validity, fused_valid }
}

fn max_row_diff(a: &Tensor, ra: usize, b: &Tensor, rb: usize) -> f64 {
    a.row(ra).iter().zip(b.row(rb)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn inputs(rng: &mut ChaCha8Rng, batch: usize, c: usize) -> (Tensor, Tensor, Tensor) {
    (Tensor::randn(&[batch, c], 1.0, rng), Tensor::randn(&[c, 5], 1.0, rng), Tensor::randn(&[batch, 16], 1.0, rng))
}

#[test]
fn column_permutation_permutes_tokens_and_keeps_class_outputs() {
    let model = CitabModel::new(&config(L_MAX), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = L_MAX + 1;
    let ci = model.image_tokens();
    for _ in 0..20 {
        let (batch, c) = (rng.gen_range(1..4), rng.gen_range(1..=L_MAX));
        let (values, headers, images) = inputs(&mut rng, batch, c);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let pv = Tensor::matrix(batch, c, (0..batch).flat_map(|s| perm.iter().map(move |&j| (s, j))).map(|(s, j)| values.get2(s, j)).collect())
            .unwrap();
        let ph = Tensor::from_rows(&perm.iter().map(|&j| headers.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
        let base = run(&model, &values, &headers, &images, None);
        let moved = run(&model, &pv, &ph, &images, None);
        for s in 0..batch {
            assert!(max_row_diff(&base.table, s * seq, &moved.table, s * seq) <= 1e-9);
            for (new_pos, &old) in perm.iter().enumerate() {
                assert!(max_row_diff(&base.table, s * seq + 1 + old, &moved.table, s * seq + 1 + new_pos) <= 1e-9);
            }
            let cls = s * (ci + seq) + ci;
            assert!(max_row_diff(&base.fused, cls, &moved.fused, cls) <= 1e-9);
            for r in 0..ci {
                assert!(max_row_diff(&base.fused, s * (ci + seq) + r, &moved.fused, s * (ci + seq) + r) <= 1e-9);
            }
        }
    }
}

#[test]
fn padded_rows_never_reach_valid_outputs() {
    let model = CitabModel::new(&config(L_MAX), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in 1..L_MAX {
        for _ in 0..3 {
            let batch = rng.gen_range(1..4);
            let (values, headers, images) = inputs(&mut rng, batch, c);
            let noise = Tensor::randn(&[batch * (L_MAX + 1), 8], 50.0, &mut rng);
            let base = run(&model, &values, &headers, &images, None);
            let noisy = run(&model, &values, &headers, &images, Some(&noise));
            for (r, &ok) in base.table_valid.iter().enumerate() {
                if ok {
                    assert!(max_row_diff(&base.table, r, &noisy.table, r) <= 1e-9, "C_t {c} row {r}");
                }
            }
            for (r, &ok) in base.fused_valid.iter().enumerate() {
                if ok {
                    assert!(max_row_diff(&base.fused, r, &noisy.fused, r) <= 1e-9, "C_t {c} fused row {r}");
                }
            }
        }
    }
}

#[test]
fn swapping_the_mask_token_changes_only_padding() {
    let mut model = CitabModel::new(&config(L_MAX), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (values, headers, images) = inputs(&mut rng, 2, 3);
    let base = run(&model, &values, &headers, &images, None);
    let id = model.sat.mask_token;
    model.store.set(id, Tensor::randn(&[1, 8], 10.0, &mut rng)).unwrap();
    let after = run(&model, &values, &headers, &images, None);
    for (r, &ok) in base.table_valid.iter().enumerate() {
        let d = max_row_diff(&base.table, r, &after.table, r);
        if ok {
            assert!(d <= 1e-9);
        } else {
            assert!(d > 0.0);
        }
    }
}

#[test]
fn longer_padding_leaves_valid_rows_unchanged() {
    let short = CitabModel::new(&config(L_MAX), 7).unwrap();
    let long = CitabModel::new(&config(L_MAX + 3), 7).unwrap();
    assert_eq!(short.store, long.store);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (values, headers, images) = inputs(&mut rng, 2, 4);
    let mut outs = Vec::new();
    for m in [&short, &long] {
        let mut g = Graph::new();
        let mut b = Binder::new(&m.store, false);
        let enc = m.sat.encode(&mut g, &mut b, &values, &headers).unwrap();
        let f_i = m.image.encode(&mut g, &mut b, &images).unwrap();
        let fused = m.fusion.fuse(&mut g, &mut b, f_i, enc.tokens, &enc.validity).unwrap();
        let cls = m.fusion.class_tokens(&mut g, &fused).unwrap();
        outs.push((g.value(enc.tokens).clone(), g.value(cls).clone(), m.seq_len()));
    }
    let (a, b) = (&outs[0], &outs[1]);
    for s in 0..2 {
        for t in 0..=4 {
            assert!(max_row_diff(&a.0, s * a.2 + t, &b.0, s * b.2 + t) <= 1e-9);
        }
        assert!(max_row_diff(&a.1, s, &b.1, s) <= 1e-9);
    }
}
