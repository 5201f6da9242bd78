use ovis_core::autodiff::{softmax_rows, Graph};
use ovis_core::encoder::{encode, EncoderConfig, ModelParams};
use ovis_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        hidden: 16,
        heads: 4,
        ffn_dim: 32,
        vocab_size: 12,
        max_text_len: 8,
        feature_dim: 6,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
}

#[test]
fn visual_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..50 {
        let p = ModelParams::<f32>::init(config(2), &mut rng).unwrap();
        let n = rng.random_range(1..7);
        let feats = gaussian(&mut rng, n, 6);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = Tensor::from_fn(n, 6, |r, c| feats.get(perm[r], c));
        let base = encode(&p, &[], &feats).unwrap().visual_out;
        let out = encode(&p, &[], &permuted).unwrap().visual_out;
        for r in 0..n {
            for c in 0..16 {
                let d = (out.get(r, c) - base.get(perm[r], c)).abs();
                assert!(d <= 1e-5, "trial {trial}: row {r} col {c} differs by {d}");
            }
        }
    }
}

#[test]
fn outputs_finite_for_gaussian_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = ModelParams::<f32>::init(config(2), &mut rng).unwrap();
    for _ in 0..1000 {
        let m = rng.random_range(0..5);
        let n = rng.random_range(if m == 0 { 1 } else { 0 }..5);
        let ids: Vec<u32> = (0..m).map(|_| rng.random_range(0..12)).collect();
        let out = encode(&p, &ids, &gaussian(&mut rng, n, 6)).unwrap();
        assert_eq!(out.text_out.rows(), m);
        assert_eq!(out.visual_out.rows(), n);
        assert!(out.text_out.is_finite() && out.visual_out.is_finite());
    }
}

#[test]
fn encode_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = ModelParams::<f32>::init(config(2), &mut rng).unwrap();
    let feats = gaussian(&mut rng, 4, 6);
    let a = encode(&p, &[3, 4, 5], &feats).unwrap();
    let b = encode(&p, &[3, 4, 5], &feats).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_layers_is_the_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ModelParams::<f32>::init(config(0), &mut rng).unwrap();
    let feats = gaussian(&mut rng, 2, 6);
    let out = encode(&p, &[7], &feats).unwrap();
    for c in 0..16 {
        let want = p.token_embed.get(c, 7) + p.pos_embed.get(0, c) + p.segment_embed.get(0, c);
        assert!((out.text_out.get(0, c) - want).abs() < 1e-6);
    }
    let proj = feats.matmul(&p.visual_proj).unwrap();
    for r in 0..2 {
        for c in 0..16 {
            let want = proj.get(r, c) + p.visual_bias.get(0, c) + p.segment_embed.get(1, c);
            assert!((out.visual_out.get(r, c) - want).abs() < 1e-5);
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = gaussian(&mut rng, 3, 5);
    let w = gaussian(&mut rng, 5, 4);
    let run = || {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.leaf(w.clone());
        let l = g.matmul(xn, wn).unwrap();
        let p = g.softmax_rows(l).unwrap();
        let loss = g.nll(p, &[(0, 1), (1, 3), (2, 0)]).unwrap();
        let grads = g.backward(loss).unwrap();
        (grads.get(xn), grads.get(wn))
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f32..30.0, 1..40), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let p = softmax_rows(&x);
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
