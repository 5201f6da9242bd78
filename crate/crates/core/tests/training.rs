use ovis_core::encoder::{EncoderConfig, ModelParams};
use ovis_core::synth::{generate, SynthConfig};
use ovis_core::training::{
    example_gradients, ilp_loss, mtp_loss, train, AdamWConfig, MaskedCaption, MaskingPolicy, Objective, TrainConfig,
    TrainingExample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    params: ModelParams<f32>,
    examples: Vec<TrainingExample<f32>>,
    mask_id: u32,
}

fn setup(images: usize) -> Setup {
    let cfg = SynthConfig {
        concepts: 4,
        feature_dim: 8,
        train_images: images,
        heldout_images: 8,
        ..SynthConfig::desk()
    };
    let corpus = generate(&cfg).unwrap();
    let enc = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        ..EncoderConfig::desk(corpus.vocab.len(), 8)
    };
    Setup {
        params: ModelParams::init(enc, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
        examples: corpus.train.training_examples(&corpus.vocab).unwrap(),
        mask_id: corpus.vocab.mask_id(),
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn full_run_is_bit_reproducible() {
    let s = setup(40);
    let run = || {
        let mut p = s.params.clone();
        let mut steps = Vec::new();
        train(&mut p, &s.examples, &quick(3), s.mask_id, |r| steps.push(*r)).unwrap();
        (p, steps)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn loss_decreases_over_fifty_epochs() {
    let s = setup(64);
    let mut p = s.params.clone();
    let report = train(&mut p, &s.examples, &quick(50), s.mask_id, |_| {}).unwrap();
    assert_eq!(report.epoch_losses.len(), 50);
    assert!(
        report.epoch_losses[49] < report.epoch_losses[0],
        "{:?}",
        report.epoch_losses
    );
}

#[test]
fn zero_learning_rate_without_decay_leaves_params_unchanged() {
    let s = setup(16);
    let mut p = s.params.clone();
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..AdamWConfig::desk()
        },
        ..quick(2)
    };
    train(&mut p, &s.examples, &cfg, s.mask_id, |_| {}).unwrap();
    assert_eq!(p, s.params);
}

#[test]
fn overfits_a_single_example() {
    let s = setup(8);
    let ex = vec![s.examples[0].clone()];
    let mut p = s.params.clone();
    let cfg = TrainConfig {
        masking: MaskingPolicy {
            mask_prob: 1.0,
            ..MaskingPolicy::default()
        },
        ..quick(1)
    };
    let mut first = None;
    train(&mut p, &ex, &cfg, s.mask_id, |r| first = Some(r.total)).unwrap();
    train(&mut p, &ex, &TrainConfig { epochs: 49, ..cfg }, s.mask_id, |_| {}).unwrap();
    let mut last = None;
    train(&mut p, &ex, &cfg, s.mask_id, |r| last = Some(r.total)).unwrap();
    assert!(last.unwrap() < first.unwrap(), "{last:?} vs {first:?}");
}

#[test]
fn unlabelled_batches_report_ilp_inactive() {
    let s = setup(16);
    let examples: Vec<_> = s
        .examples
        .iter()
        .map(|e| TrainingExample {
            labels: Vec::new(),
            ..e.clone()
        })
        .collect();
    let mut p = s.params.clone();
    let mut records = Vec::new();
    train(&mut p, &examples, &quick(1), s.mask_id, |r| records.push(*r)).unwrap();
    assert!(records.iter().all(|r| !r.ilp_active && r.ilp == 0.0));
}

#[test]
fn losses_non_negative_and_additive() {
    let s = setup(30);
    let policy = MaskingPolicy::default();
    for ex in &s.examples {
        let masked = policy.mask_tokens(&ex.caption, s.mask_id);
        let (terms, _) = example_gradients(&s.params, &masked, &ex.features, &ex.labels, Objective::Both).unwrap();
        let mtp = mtp_loss(&s.params, &masked, &ex.features).unwrap() as f64;
        let ilp = ilp_loss(&s.params, &masked.ids, &ex.features, &ex.labels).unwrap();
        assert!(mtp >= 0.0 && ilp.value >= 0.0);
        assert_eq!(ilp.active, !ex.labels.is_empty());
        assert!((terms.total - (mtp + ilp.value as f64)).abs() <= 1e-6);
        let split = terms.mtp.unwrap_or(0.0) + terms.ilp.unwrap_or(0.0);
        assert!((terms.total - split).abs() <= 1e-6);
    }
}

#[test]
fn removing_labels_leaves_only_mtp_gradients() {
    let s = setup(20);
    let policy = MaskingPolicy::default();
    for ex in s.examples.iter().filter(|e| !e.labels.is_empty()) {
        let masked: MaskedCaption = policy.mask_tokens(&ex.caption, s.mask_id);
        let (_, a) = example_gradients(&s.params, &masked, &ex.features, &[], Objective::Both).unwrap();
        let (_, b) = example_gradients(&s.params, &masked, &ex.features, &ex.labels, Objective::MtpOnly).unwrap();
        assert_eq!(a, b);
    }
}
