//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ovis_core::encoder::{EncoderConfig, ModelParams};
use ovis_core::eval::{
    error_analysis, map_and_precision, BBox, Detection, EvalConfig, EvalReport, GroundTruthSet, GtRegion,
    ThresholdMetrics, LOW_IOU,
};
use ovis_core::formats;
use ovis_core::gradcheck::{central_difference_smooth_at, default_step, relative_error};
use ovis_core::index::{brute_force_search, run_queries, SearchIndex, SimilarityMeasure};
use ovis_core::synth::{generate, SynthConfig, SynthCorpus};
use ovis_core::training::{build_losses, train, MaskingPolicy, Objective, TrainConfig};
use ovis_core::{Graph, Tensor, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MEASURE: SimilarityMeasure = SimilarityMeasure::Cosine;
const MODEL_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: &str, title: &str, started: Instant, outcome: Outcome) -> bool {
    println!(
        "{id} {} {title}: {} [{:.1}s]",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn table_arithmetic() -> Outcome {
    let mean_of = |vals: [f64; 3]| {
        let per = [0.3, 0.5, 0.7]
            .iter()
            .zip(vals)
            .map(|(&threshold, map)| ThresholdMetrics {
                threshold,
                map,
                precision: 0.0,
            })
            .collect();
        EvalReport::from_thresholds(50, per).map_all
    };
    let a = mean_of([50.8, 35.0, 18.5]);
    let b = mean_of([8.6, 5.1, 2.4]);
    Outcome {
        pass: (a - 34.8).abs() <= 0.05 && (b - 5.4).abs() <= 0.05,
        detail: format!("mAP_all {a:.3} (want 34.8), {b:.3} (want 5.4)"),
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0..8) as f32,
        rng.random_range(0..8) as f32,
        rng.random_range(1..6) as f32,
        rng.random_range(1..6) as f32,
    )
}

fn decomposition_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut min_ord = f64::INFINITY;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt: Vec<GtRegion> = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let r = GtRegion {
                image_id: rng.random_range(0..4),
                bbox: random_box(&mut rng),
            };
            if !gt.contains(&r) {
                gt.push(r);
            }
        }
        let hits: Vec<Detection> = (0..rng.random_range(0..15))
            .map(|_| Detection {
                image_id: rng.random_range(0..7),
                bbox: random_box(&mut rng),
            })
            .collect();
        let k = rng.random_range(1..12);
        let t = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let b = error_analysis(&hits, &gt, t, k, LOW_IOU);
        worst = worst.max((b.ap + b.e_ord + b.e_iou + b.e_bg - 1.0).abs());
        min_ord = min_ord.min(b.e_ord);
    }
    Outcome {
        pass: worst <= 1e-9 && min_ord >= 0.0,
        detail: format!("max |sum - 1| = {worst:.2e}, min e_ord = {min_ord:.3}"),
    }
}

fn gradient_check() -> Outcome {
    let cfg = EncoderConfig::desk(64, 16);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p64 = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        // evaluate both precisions at the same (f32-representable) point
        let p32: ModelParams<f32> = p64.cast();
        let p64: ModelParams<f64> = p32.cast();
        let caption: Vec<u32> = (0..rng.random_range(2..=8)).map(|_| rng.random_range(3..64)).collect();
        let n = rng.random_range(1..=5);
        let feats = Tensor::<f64>::from_fn(n, 16, |_, _| rng.sample(StandardNormal));
        let mut labels: Vec<(usize, u32)> = Vec::new();
        for j in 0..n {
            if rng.random_bool(0.5) {
                labels.push((j, rng.random_range(3..64)));
            }
        }
        let masked = MaskingPolicy {
            rng_seed: seed,
            ..MaskingPolicy::default()
        }
        .mask_tokens(&caption, 2);

        let mut g = Graph::<f32>::new();
        let bound = p32.bind(&mut g);
        let nodes = build_losses(&mut g, &p32, &bound, &masked, &feats.cast(), &labels, Objective::Both)
            .unwrap()
            .unwrap();
        let grads = g.backward(nodes.total).unwrap();

        let shapes: Vec<(usize, usize)> = p64.tensors().iter().map(|t| t.shape()).collect();
        let flat: Vec<f64> = p64.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let offsets: Vec<usize> = shapes
            .iter()
            .scan(0, |acc, &(r, c)| {
                let o = *acc;
                *acc += r * c;
                Some(o)
            })
            .collect();
        let mut coords = Vec::new();
        for _ in 0..24 {
            let t = rng.random_range(0..shapes.len());
            let (r, c) = shapes[t];
            coords.push((t, rng.random_range(0..r * c)));
        }
        let flat_coords: Vec<usize> = coords.iter().map(|&(t, i)| offsets[t] + i).collect();
        let loss_at = |theta: &[f64]| {
            let mut p = p64.clone();
            let mut at = 0;
            for t in p.tensors_mut() {
                let len = t.len();
                t.data_mut().copy_from_slice(&theta[at..at + len]);
                at += len;
            }
            let mut g = Graph::<f64>::new();
            let b = p.bind(&mut g);
            let nodes = build_losses(&mut g, &p, &b, &masked, &feats, &labels, Objective::Both)
                .unwrap()
                .unwrap();
            (g.value(nodes.total).item().unwrap(), g.relu_pattern())
        };
        let fd = central_difference_smooth_at(loss_at, &flat, &flat_coords, default_step).unwrap();
        for (&(t, i), want) in coords.iter().zip(fd) {
            // probes on both sides of a relu kink say nothing about the derivative
            let Some(want) = want else {
                kinks += 1;
                continue;
            };
            let got = grads.get(bound.leaves[t]).data()[i] as f64;
            worst = worst.max(relative_error(got, want, 1e-3));
            checked += 1;
        }
    }
    // skipping must not hollow out the check
    let enough = checked * 5 >= (checked + kinks) * 4;
    Outcome {
        pass: worst <= 1e-2 && enough,
        detail: format!(
            "max relative error {worst:.2e} over {checked} sampled coordinates, 200 seeds ({kinks} straddling a relu kink skipped)"
        ),
    }
}

/// Trained model, its checkpoint bytes and the held-out index bytes.
struct PipelineRun {
    params: ModelParams<f32>,
    checkpoint: Vec<u8>,
    index: SearchIndex,
    index_bytes: Vec<u8>,
}

fn run_pipeline(corpus: &SynthCorpus, objective: Objective) -> PipelineRun {
    let examples = corpus.train.training_examples::<f32>(&corpus.vocab).unwrap();
    let cfg = EncoderConfig::desk(corpus.vocab.len(), corpus.config.feature_dim);
    let mut params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(MODEL_SEED)).unwrap();
    let tc = TrainConfig {
        objective,
        ..TrainConfig::desk()
    };
    train(&mut params, &examples, &tc, corpus.vocab.mask_id(), |_| {}).unwrap();
    let checkpoint = formats::encode_checkpoint(&params);
    let index = SearchIndex::build(&corpus.heldout, &params, MEASURE, formats::crc32(&checkpoint)).unwrap();
    let index_bytes = index.encode();
    PipelineRun {
        params,
        checkpoint,
        index,
        index_bytes,
    }
}

fn map5_at_50(index: &SearchIndex, vocab: &Vocabulary, gt: &GroundTruthSet) -> f64 {
    let queries: Vec<&str> = gt.queries().map(|(q, _)| q).collect();
    let results = run_queries(index, vocab, queries, 5).unwrap();
    map_and_precision(&results, gt, &EvalConfig::new(5))
        .unwrap()
        .map_at(0.5)
        .unwrap()
}

fn random_baseline(corpus: &SynthCorpus, shuffles: u64) -> f64 {
    let all: Vec<Detection> = corpus
        .heldout
        .images()
        .iter()
        .flat_map(|img| {
            img.instances.iter().map(|i| Detection {
                image_id: img.image_id,
                bbox: i.bbox,
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = 0.0;
    for _ in 0..shuffles {
        let mut results = BTreeMap::new();
        for (q, _) in corpus.ground_truth.queries() {
            let mut ranked = all.clone();
            ranked.shuffle(&mut rng);
            ranked.truncate(5);
            results.insert(q.to_string(), ranked);
        }
        let r = map_and_precision(&results, &corpus.ground_truth, &EvalConfig::new(5)).unwrap();
        total += r.map_at(0.5).unwrap();
    }
    total / shuffles as f64
}

fn synthetic_alignment(run: &PipelineRun, corpus: &SynthCorpus) -> Outcome {
    let map = map5_at_50(&run.index, &corpus.vocab, &corpus.ground_truth);
    let baseline = random_baseline(corpus, 100);
    Outcome {
        pass: map >= 0.80 && baseline <= 0.20,
        detail: format!(
            "held-out mAP@5 IoU 0.5 = {map:.3} (want >= 0.80), random baseline {baseline:.3} (want <= 0.20)"
        ),
    }
}

fn precompute_equivalence(run: &PipelineRun, corpus: &SynthCorpus) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut words: Vec<String> = corpus.concept_words.clone();
    words.extend(["unicorn", "cact", "zebras", "42"].map(String::from));
    let n = run.index.len();
    let (mut worst, mut order_mismatch) = (0.0f64, 0usize);
    for _ in 0..100 {
        let q: Vec<&str> = (0..rng.random_range(1..=3))
            .map(|_| words[rng.random_range(0..words.len())].as_str())
            .collect();
        let q = q.join(" ");
        let k = rng.random_range(1..=n + 5);
        let a = run.index.score_query(&corpus.vocab, &q, k).unwrap();
        let b = brute_force_search(&corpus.heldout, &run.params, &corpus.vocab, &q, MEASURE, k).unwrap();
        if a.hits.len() != b.hits.len() || a.hits.iter().zip(&b.hits).any(|(x, y)| x.instance_id != y.instance_id) {
            order_mismatch += 1;
        }
        for (x, y) in a.hits.iter().zip(&b.hits) {
            worst = worst.max((x.score - y.score).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-5 && order_mismatch == 0,
        detail: format!("max score diff {worst:.2e}, {order_mismatch} ordering mismatches over 100 queries"),
    }
}

fn ablation_direction() -> Outcome {
    // half the concepts never receive labels, so only captions describe them
    let cfg = SynthConfig {
        labelled_concepts: Some(4),
        ..SynthConfig::desk()
    };
    let corpus = generate(&cfg).unwrap();
    let mut unseen = GroundTruthSet::new();
    for (q, regions) in corpus.ground_truth.queries() {
        let id = corpus.concept_words.iter().position(|w| w == q).unwrap();
        if id >= 4 {
            unseen.add_query(q);
            for r in regions {
                unseen.add(q, *r).unwrap();
            }
        }
    }
    let ilp = run_pipeline(&corpus, Objective::IlpOnly);
    let ilp_unseen = map5_at_50(&ilp.index, &corpus.vocab, &unseen);
    let mtp = run_pipeline(&corpus, Objective::MtpOnly);
    let both = run_pipeline(&corpus, Objective::Both);
    let mtp_all = map5_at_50(&mtp.index, &corpus.vocab, &corpus.ground_truth);
    let both_all = map5_at_50(&both.index, &corpus.vocab, &corpus.ground_truth);
    Outcome {
        pass: ilp_unseen <= 0.05 && both_all >= mtp_all,
        detail: format!(
            "ILP-only unseen-concept mAP@5 = {ilp_unseen:.3} (want <= 0.05); MTP+ILP {both_all:.3} vs MTP-only {mtp_all:.3}"
        ),
    }
}

fn tokenizer_golden() -> Outcome {
    let v = Vocabulary::from_tokens(["[PAD]", "[UNK]", "[MASK]", "male", "mountain", "##eer"]).unwrap();
    let ids = v.tokenize("male mountaineer").unwrap().ids;
    let tokens: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
    Outcome {
        pass: tokens == ["male", "mountain", "##eer"],
        detail: format!("{tokens:?}"),
    }
}

fn determinism(first: &PipelineRun, corpus: &SynthCorpus) -> Outcome {
    let again_corpus = generate(&corpus.config).unwrap();
    let second = run_pipeline(&again_corpus, Objective::Both);
    let same_ckpt = first.checkpoint == second.checkpoint;
    let same_index = first.index_bytes == second.index_bytes;
    Outcome {
        pass: same_ckpt && same_index && again_corpus == *corpus,
        detail: format!(
            "index {} bytes identical: {same_index}; checkpoint identical: {same_ckpt}",
            first.index_bytes.len()
        ),
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // listing request needs an answer. Bare `AC-n` arguments select criteria.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let wanted: Vec<&str> = args
        .iter()
        .filter(|a| a.starts_with("AC-"))
        .map(String::as_str)
        .collect();
    let on = |id: &str| wanted.is_empty() || wanted.contains(&id);

    let mut ok = true;
    let mut check = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if on(id) {
            let t = Instant::now();
            let outcome = f();
            ok &= report(id, name, t, outcome);
        }
    };
    check("AC-1", "mAP_all arithmetic", &mut table_arithmetic);
    check("AC-2", "error decomposition identity", &mut decomposition_identity);
    check("AC-3", "gradient correctness", &mut gradient_check);

    let shared = if on("AC-4") || on("AC-5") || on("AC-8") {
        let t = Instant::now();
        let corpus = generate(&SynthConfig::desk()).unwrap();
        let run = run_pipeline(&corpus, Objective::Both);
        Some((corpus, run, t))
    } else {
        None
    };
    if let Some((corpus, run, t)) = &shared {
        // AC-4's clock includes training
        if on("AC-4") {
            ok &= report("AC-4", "synthetic alignment", *t, synthetic_alignment(run, corpus));
        }
    }
    let mut check = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if on(id) {
            let t = Instant::now();
            let outcome = f();
            ok &= report(id, name, t, outcome);
        }
    };
    if let Some((corpus, run, _)) = &shared {
        check("AC-5", "precompute equivalence", &mut || {
            precompute_equivalence(run, corpus)
        });
    }
    check("AC-6", "ablation direction", &mut ablation_direction);
    check("AC-7", "tokenizer golden case", &mut tokenizer_golden);
    if let Some((corpus, run, _)) = &shared {
        check("AC-8", "pipeline determinism", &mut || determinism(run, corpus));
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
