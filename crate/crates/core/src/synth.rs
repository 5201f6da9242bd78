//! Synthetic corpora with a known concept structure.
//!
//! Each concept has a fixed random prototype vector. An image holds 2-5
//! instances; a concept instance is its prototype plus Gaussian noise and
//! a clutter instance is a fresh random vector that no caption mentions.
//! The caption lists the concept words of the image in random order. A
//! fraction of training images also carries instance labels, restricted to
//! the label-eligible concepts. Held-out images come with ground truth
//! mapping each concept word to the boxes of its instances.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{BBox, EvalError, GroundTruthSet, GtRegion};
use crate::formats::FeatureMatrix;
use crate::store::{self, CorpusManifest, ImageRecord, InstanceRecord, InstanceStore, StoreError};
use crate::vocab::{Vocabulary, MASK, PAD, UNK};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

const WORDS: [&str; 24] = [
    "cactus", "mountain", "zebra", "bicycle", "lantern", "violin", "teapot", "anchor", "balloon", "candle", "dolphin",
    "feather", "giraffe", "hammer", "igloo", "jacket", "kettle", "lemon", "mirror", "necklace", "orchid", "pelican",
    "quilt", "rocket",
];

/// Pixel geometry: instances sit in a single row of non-overlapping cells.
pub const CELL: f32 = 100.0;
pub const MAX_INSTANCES: usize = 5;
const INSET: f32 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub concepts: usize,
    pub feature_dim: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    /// Standard deviation of per-instance feature noise.
    pub noise: f64,
    /// Fraction of training images that carry instance labels.
    pub label_fraction: f64,
    /// Only concepts `0..n` ever receive labels; `None` means all.
    pub labelled_concepts: Option<usize>,
    /// Probability that an instance is unmentioned clutter.
    pub clutter_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// 8 concepts, 400 training and 100 held-out images, sigma 0.1, 30% of
    /// images labelled, every concept label-eligible.
    pub fn desk() -> Self {
        Self {
            concepts: 8,
            feature_dim: 32,
            train_images: 400,
            heldout_images: 100,
            noise: 0.1,
            label_fraction: 0.3,
            labelled_concepts: None,
            clutter_fraction: 0.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.concepts < 2 {
            return bad("at least 2 concepts required");
        }
        if self.train_images < self.concepts {
            return bad("need at least as many training images as concepts");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad("label_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return bad("clutter_fraction must be in [0, 1)");
        }
        if self.labelled_concepts.is_some_and(|n| n > self.concepts) {
            return bad("labelled_concepts exceeds concepts");
        }
        Ok(())
    }
}

/// Word for concept `i`.
pub fn concept_word(i: usize) -> String {
    WORDS
        .get(i)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("concept{i}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub concept_words: Vec<String>,
    /// concepts x feature_dim
    pub prototypes: Vec<Vec<f32>>,
    pub train: InstanceStore,
    pub heldout: InstanceStore,
    /// Concept of every held-out instance by id; `None` for clutter.
    pub heldout_concepts: Vec<Option<usize>>,
    pub ground_truth: GroundTruthSet,
}

struct Generated {
    images: Vec<ImageRecord>,
    features: Vec<f32>,
    concepts: Vec<Option<usize>>,
}

fn generate_images(
    cfg: &SynthConfig,
    words: &[String],
    prototypes: &[Vec<f32>],
    count: usize,
    first_image_id: u32,
    labelled: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<Generated, SynthError> {
    let noise = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).map_err(|e| SynthError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut out = Generated {
        images: Vec::with_capacity(count),
        features: Vec::new(),
        concepts: Vec::new(),
    };
    let mut next_id = 0u32;
    for i in 0..count {
        let n = rng.random_range(2..=MAX_INSTANCES);
        let mut instances = Vec::with_capacity(n);
        let mut words_in_caption = Vec::new();
        let mut labels = Vec::new();
        for slot in 0..n {
            let concept = if rng.random_bool(cfg.clutter_fraction) {
                None
            } else {
                Some(rng.random_range(0..cfg.concepts))
            };
            match concept {
                Some(c) => {
                    for &p in &prototypes[c] {
                        let e: f64 = noise.map(|d| d.sample(rng)).unwrap_or(0.0);
                        out.features.push(p + e as f32);
                    }
                    words_in_caption.push(words[c].clone());
                    if labelled[i] && c < cfg.labelled_concepts.unwrap_or(cfg.concepts) {
                        labels.push((slot, words[c].clone()));
                    }
                }
                None => {
                    for _ in 0..cfg.feature_dim {
                        let v: f64 = StandardNormal.sample(rng);
                        out.features.push(v as f32);
                    }
                }
            }
            out.concepts.push(concept);
            instances.push(InstanceRecord {
                instance_id: next_id,
                bbox: BBox::new(
                    slot as f32 * CELL + INSET,
                    INSET,
                    CELL - 2.0 * INSET,
                    CELL - 2.0 * INSET,
                ),
            });
            next_id += 1;
        }
        words_in_caption.shuffle(rng);
        out.images.push(ImageRecord {
            image_id: first_image_id + i as u32,
            media: None,
            width: Some(MAX_INSTANCES as f32 * CELL),
            height: Some(CELL),
            caption: Some(words_in_caption.join(" ")),
            labels,
            instances,
        });
    }
    Ok(out)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.concepts).map(concept_word).collect();
    let vocab = Vocabulary::from_tokens(
        [PAD, UNK, MASK]
            .into_iter()
            .map(String::from)
            .chain(words.iter().cloned()),
    )
    .map_err(|e| SynthError::Config(e.to_string()))?;
    let prototypes: Vec<Vec<f32>> = (0..cfg.concepts)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect()
        })
        .collect();

    let n_labelled = (cfg.label_fraction * cfg.train_images as f64).round() as usize;
    let mut labelled = vec![false; cfg.train_images];
    let mut order: Vec<usize> = (0..cfg.train_images).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_labelled] {
        labelled[i] = true;
    }

    let train = generate_images(cfg, &words, &prototypes, cfg.train_images, 0, &labelled, &mut rng)?;
    let no_labels = vec![false; cfg.heldout_images];
    let mut heldout = generate_images(
        cfg,
        &words,
        &prototypes,
        cfg.heldout_images,
        cfg.train_images as u32,
        &no_labels,
        &mut rng,
    )?;

    let mut gt = GroundTruthSet::new();
    for w in &words {
        gt.add_query(w);
    }
    for img in &heldout.images {
        for inst in &img.instances {
            if let Some(c) = heldout.concepts[inst.instance_id as usize] {
                gt.add(
                    &words[c],
                    GtRegion {
                        image_id: img.image_id,
                        bbox: inst.bbox,
                    },
                )?;
            }
        }
    }
    // held-out captions would leak the answer to anything reading the store
    for img in &mut heldout.images {
        img.caption = None;
    }

    let store_of = |g: Generated| {
        let rows = g.concepts.len();
        InstanceStore::new(
            g.images,
            FeatureMatrix {
                rows,
                dim: cfg.feature_dim,
                data: g.features,
            },
        )
    };
    let heldout_concepts = heldout.concepts.clone();
    Ok(SynthCorpus {
        config: cfg.clone(),
        vocab,
        concept_words: words,
        prototypes,
        train: store_of(train)?,
        heldout: store_of(heldout)?,
        heldout_concepts,
        ground_truth: gt,
    })
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_META_FILE: &str = "train.jsonl";
pub const TRAIN_FEATURES_FILE: &str = "train.ftr";
pub const HELDOUT_META_FILE: &str = "heldout.jsonl";
pub const HELDOUT_FEATURES_FILE: &str = "heldout.ftr";
pub const GROUND_TRUTH_FILE: &str = "gt.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthCorpus {
    /// Writes every corpus file plus a manifest into `dir` and returns the
    /// manifest.
    pub fn write(&self, dir: &Path) -> Result<CorpusManifest, SynthError> {
        fs::create_dir_all(dir)?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        store::save_store(&self.train, dir.join(TRAIN_META_FILE), dir.join(TRAIN_FEATURES_FILE))?;
        store::save_store(
            &self.heldout,
            dir.join(HELDOUT_META_FILE),
            dir.join(HELDOUT_FEATURES_FILE),
        )?;
        let mut gt = Vec::new();
        self.ground_truth.write_jsonl(&mut gt)?;
        fs::write(dir.join(GROUND_TRUTH_FILE), gt)?;

        let mut m = CorpusManifest::default();
        m.record(dir, store::ROLE_VOCAB, VOCAB_FILE, self.vocab.len() as u64)?;
        m.record(
            dir,
            store::ROLE_TRAIN_META,
            TRAIN_META_FILE,
            self.train.num_images() as u64,
        )?;
        m.record(
            dir,
            store::ROLE_TRAIN_FEATURES,
            TRAIN_FEATURES_FILE,
            self.train.num_instances() as u64,
        )?;
        m.record(
            dir,
            store::ROLE_HELDOUT_META,
            HELDOUT_META_FILE,
            self.heldout.num_images() as u64,
        )?;
        m.record(
            dir,
            store::ROLE_HELDOUT_FEATURES,
            HELDOUT_FEATURES_FILE,
            self.heldout.num_instances() as u64,
        )?;
        let regions: usize = self.ground_truth.queries().map(|(_, r)| r.len()).sum();
        m.record(dir, store::ROLE_GROUND_TRUTH, GROUND_TRUTH_FILE, regions as u64)?;
        m.save(dir.join(MANIFEST_FILE))?;
        Ok(m)
    }
}
