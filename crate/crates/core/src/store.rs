//! Instance stores (image metadata joined with feature rows), corpus
//! manifests and cross-file validation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{BBox, GroundTruthSet};
use crate::formats::{self, FeatureMatrix, FormatError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::TrainingExample;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("metadata lists {meta} instances but the feature file has {rows} rows")]
    CountMismatch { meta: usize, rows: usize },
    #[error("instance ids must be dense in file order: expected {expected}, found {found}")]
    InstanceOrder { expected: u32, found: u32 },
    #[error("duplicate image id {0}")]
    DuplicateImage(u32),
    #[error("image {image_id}: instance {instance_id} box {bbox:?} is invalid or outside the image")]
    BadBox {
        image_id: u32,
        instance_id: u32,
        bbox: BBox,
    },
    #[error("label {word:?} on image {image_id}: {reason}")]
    Label {
        image_id: u32,
        word: String,
        reason: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One image: optional media path and extents, its instances, and for
/// training corpora the caption and instance labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u32,
    #[serde(default)]
    pub media: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// (instance index within the image, label word)
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<(usize, String)>,
    pub instances: Vec<InstanceRecord>,
}

/// Images and their instances; instance ids are dense `0..N` in file order
/// and index the rows of `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStore {
    images: Vec<ImageRecord>,
    features: FeatureMatrix,
    offsets: Vec<usize>,
}

impl InstanceStore {
    pub fn new(images: Vec<ImageRecord>, features: FeatureMatrix) -> Result<Self, StoreError> {
        let mut next = 0u32;
        let mut seen = HashMap::new();
        let mut offsets = Vec::with_capacity(images.len());
        for img in &images {
            if seen.insert(img.image_id, ()).is_some() {
                return Err(StoreError::DuplicateImage(img.image_id));
            }
            offsets.push(next as usize);
            for inst in &img.instances {
                if inst.instance_id != next {
                    return Err(StoreError::InstanceOrder {
                        expected: next,
                        found: inst.instance_id,
                    });
                }
                let b = inst.bbox;
                let inside = match (img.width, img.height) {
                    (Some(w), Some(h)) => b.within(w, h),
                    _ => true,
                };
                if !b.has_positive_extent() || !inside {
                    return Err(StoreError::BadBox {
                        image_id: img.image_id,
                        instance_id: inst.instance_id,
                        bbox: b,
                    });
                }
                next += 1;
            }
        }
        if next as usize != features.rows {
            return Err(StoreError::CountMismatch {
                meta: next as usize,
                rows: features.rows,
            });
        }
        if !features.data.iter().all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite("features").into());
        }
        Ok(Self {
            images,
            features,
            offsets,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            images: Vec::new(),
            features: FeatureMatrix {
                rows: 0,
                dim: feature_dim,
                data: Vec::new(),
            },
            offsets: Vec::new(),
        }
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim
    }

    pub fn num_instances(&self) -> usize {
        self.features.rows
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Id of the first instance of image `idx` (position in the store).
    pub fn first_instance(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    /// Feature rows of image `idx` as a tensor.
    pub fn image_features<T: Scalar>(&self, idx: usize) -> Tensor<T> {
        let start = self.offsets[idx];
        let n = self.images[idx].instances.len();
        let d = self.features.dim;
        let slice = &self.features.data[start * d..(start + n) * d];
        Tensor::from_fn(n, d, |r, c| T::of_f32(slice[r * d + c]))
    }

    pub fn find_image(&self, image_id: u32) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// (image record, instance record) for a global instance id.
    pub fn instance(&self, instance_id: u32) -> Option<(&ImageRecord, &InstanceRecord)> {
        let id = instance_id as usize;
        if id >= self.num_instances() {
            return None;
        }
        let idx = self.offsets.partition_point(|&o| o <= id) - 1;
        let img = &self.images[idx];
        Some((img, &img.instances[id - self.offsets[idx]]))
    }

    pub fn write_metadata(&self, mut out: impl Write) -> std::io::Result<()> {
        for img in &self.images {
            writeln!(out, "{}", serde_json::to_string(img).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }

    pub fn read_metadata(reader: impl BufRead) -> Result<Vec<ImageRecord>, StoreError> {
        let mut images = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| StoreError::Io {
                path: PathBuf::from("<metadata>"),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            images.push(serde_json::from_str(&line).map_err(|source| StoreError::Json { line: i + 1, source })?);
        }
        Ok(images)
    }

    /// Builds training examples: captions are tokenized, label words must be
    /// single vocabulary tokens.
    pub fn training_examples<T: Scalar>(&self, vocab: &Vocabulary) -> Result<Vec<TrainingExample<T>>, StoreError> {
        let mut out = Vec::with_capacity(self.images.len());
        for (idx, img) in self.images.iter().enumerate() {
            let caption = match img.caption.as_deref() {
                Some(c) if !c.trim().is_empty() => vocab.tokenize(c).map(|s| s.ids).unwrap_or_default(),
                _ => Vec::new(),
            };
            let mut labels = Vec::with_capacity(img.labels.len());
            for (index, word) in &img.labels {
                if *index >= img.instances.len() {
                    return Err(StoreError::Label {
                        image_id: img.image_id,
                        word: word.clone(),
                        reason: format!("instance index {index} out of range"),
                    });
                }
                labels.push((
                    *index,
                    label_token(vocab, word).map_err(|reason| StoreError::Label {
                        image_id: img.image_id,
                        word: word.clone(),
                        reason,
                    })?,
                ));
            }
            out.push(TrainingExample {
                caption,
                features: self.image_features(idx),
                labels,
            });
        }
        Ok(out)
    }
}

/// Resolves a label word to its single token id.
pub fn label_token(vocab: &Vocabulary, word: &str) -> Result<TokenId, String> {
    let lowered = word.to_lowercase();
    match vocab.id(&lowered) {
        Some(id) if !vocab.is_special(id) => Ok(id),
        _ => match vocab.tokenize(word) {
            Ok(seq) if seq.len() > 1 => Err("multi-token labels are not supported".into()),
            _ => Err("not in vocabulary".into()),
        },
    }
}

pub fn load_store(meta: impl AsRef<Path>, features: impl AsRef<Path>) -> Result<InstanceStore, StoreError> {
    let meta = meta.as_ref();
    let file = fs::File::open(meta).map_err(io_err(meta))?;
    let images = InstanceStore::read_metadata(BufReader::new(file))?;
    let fpath = features.as_ref();
    let bytes = fs::read(fpath).map_err(io_err(fpath))?;
    let features = formats::decode_features(&bytes)?;
    InstanceStore::new(images, features)
}

pub fn save_store(store: &InstanceStore, meta: impl AsRef<Path>, features: impl AsRef<Path>) -> Result<(), StoreError> {
    let meta = meta.as_ref();
    let mut buf = Vec::new();
    store.write_metadata(&mut buf).map_err(io_err(meta))?;
    fs::write(meta, buf).map_err(io_err(meta))?;
    let fpath = features.as_ref();
    fs::write(fpath, formats::encode_features(&store.features)).map_err(io_err(fpath))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub crc32: u32,
    /// Lines, tokens or rows, depending on the file kind.
    pub count: u64,
}

/// Paths, counts and CRC-32 checksums of every file in a corpus. Keys are
/// roles: `vocab`, `train_meta`, `train_features`, `heldout_meta`,
/// `heldout_features`, `ground_truth`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

pub const ROLE_VOCAB: &str = "vocab";
pub const ROLE_TRAIN_META: &str = "train_meta";
pub const ROLE_TRAIN_FEATURES: &str = "train_features";
pub const ROLE_HELDOUT_META: &str = "heldout_meta";
pub const ROLE_HELDOUT_FEATURES: &str = "heldout_features";
pub const ROLE_GROUND_TRUTH: &str = "ground_truth";

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| StoreError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Records `file` (already written under `dir`) with its checksum.
    pub fn record(&mut self, dir: &Path, role: &str, file: &str, count: u64) -> Result<(), StoreError> {
        let full = dir.join(file);
        let bytes = fs::read(&full).map_err(io_err(&full))?;
        self.files.insert(
            role.to_string(),
            ManifestEntry {
                path: file.to_string(),
                crc32: formats::crc32(&bytes),
                count,
            },
        );
        Ok(())
    }

    pub fn resolve(&self, dir: &Path, role: &str) -> Option<PathBuf> {
        self.files.get(role).map(|e| dir.join(&e.path))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Cross-file checks over a corpus. Only an unreadable manifest aborts;
/// everything else is collected into the report.
pub fn validate_corpus(manifest_path: impl AsRef<Path>) -> Result<ValidationReport, StoreError> {
    let manifest_path = manifest_path.as_ref();
    let manifest = CorpusManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut report = ValidationReport::default();

    for (role, entry) in &manifest.files {
        let path = dir.join(&entry.path);
        match fs::read(&path) {
            Ok(bytes) => {
                let crc = formats::crc32(&bytes);
                if crc != entry.crc32 {
                    report.errors.push(format!(
                        "{role}: checksum mismatch for {} (manifest {:08x}, file {crc:08x})",
                        entry.path, entry.crc32
                    ));
                }
            }
            Err(e) => report.errors.push(format!("{role}: cannot read {}: {e}", entry.path)),
        }
    }

    let vocab = match manifest.resolve(dir, ROLE_VOCAB) {
        Some(p) => match Vocabulary::load(&p) {
            Ok(v) => Some(v),
            Err(e) => {
                report.errors.push(format!("vocab: {e}"));
                None
            }
        },
        None => {
            report.errors.push("manifest has no vocab entry".into());
            None
        }
    };

    let load = |meta_role: &str, feat_role: &str, report: &mut ValidationReport| -> Option<InstanceStore> {
        let (Some(m), Some(f)) = (manifest.resolve(dir, meta_role), manifest.resolve(dir, feat_role)) else {
            return None;
        };
        match load_store(&m, &f) {
            Ok(s) => Some(s),
            Err(e) => {
                report.errors.push(format!("{meta_role}: {e}"));
                None
            }
        }
    };
    let train = load(ROLE_TRAIN_META, ROLE_TRAIN_FEATURES, &mut report);
    let heldout = load(ROLE_HELDOUT_META, ROLE_HELDOUT_FEATURES, &mut report);

    if let Some(vocab) = &vocab {
        for (name, store) in [("train", &train), ("heldout", &heldout)] {
            let Some(store) = store else { continue };
            for img in store.images() {
                for (index, word) in &img.labels {
                    if *index >= img.instances.len() {
                        report.errors.push(format!(
                            "{name}: image {}: label {word:?} refers to missing instance {index}",
                            img.image_id
                        ));
                    }
                    if let Err(reason) = label_token(vocab, word) {
                        report
                            .errors
                            .push(format!("{name}: image {}: label {word:?}: {reason}", img.image_id));
                    }
                }
                if let Some(c) = &img.caption {
                    if let Ok(seq) = vocab.tokenize(c) {
                        if seq.contains(vocab.unk_id()) {
                            report.warnings.push(format!(
                                "{name}: image {}: caption {c:?} contains unknown words",
                                img.image_id
                            ));
                        }
                    }
                }
            }
        }
    }

    if let Some(gt_path) = manifest.resolve(dir, ROLE_GROUND_TRUTH) {
        match fs::File::open(&gt_path)
            .map_err(crate::eval::EvalError::from)
            .and_then(|f| GroundTruthSet::read_jsonl(BufReader::new(f)))
        {
            Ok(gt) => {
                if let Some(store) = &heldout {
                    for (query, regions) in gt.queries() {
                        for r in regions {
                            match store.find_image(r.image_id) {
                                None => report.errors.push(format!(
                                    "ground truth {query:?}: image {} not in heldout store",
                                    r.image_id
                                )),
                                Some(img) => {
                                    if let (Some(w), Some(h)) = (img.width, img.height) {
                                        if !r.bbox.within(w, h) {
                                            report.warnings.push(format!(
                                                "ground truth {query:?}: box {:?} outside image {} extent {w}x{h}",
                                                r.bbox, r.image_id
                                            ));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Err(e) => report.errors.push(format!("ground_truth: {e}")),
        }
    }
    Ok(report)
}
