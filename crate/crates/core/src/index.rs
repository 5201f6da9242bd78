//! Precomputed instance x token similarity index.
//!
//! Every instance is encoded once, jointly with the other instances of its
//! image and no text. Its similarity to every column of the token-embedding
//! matrix is stored row-major in `S`. A query is then answered without the
//! encoder: score(j) is the mean of `S[j][t]` over the query's token ids.
//!
//! File layout (`OVIS.IDX`, after magic and version): `u8` measure tag,
//! `u32` model fingerprint, `u64` N, `u32` D, N x (`u32` instance id,
//! `u32` image id, 4 x `f32` box), N x D `f32` scores, CRC-32.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, EncoderError, ModelParams};
use crate::eval::{BBox, Detection};
use crate::formats::{self, ByteReader, ByteWriter, FormatError, INDEX_MAGIC};
use crate::scalar::Scalar;
use crate::store::InstanceStore;
use crate::tensor::{dot, norm, Tensor};
use crate::vocab::{TokenId, TokenizeError, Vocabulary};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("zero-norm operand under {0} similarity")]
    ZeroNorm(SimilarityMeasure),
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("instance store is empty")]
    EmptyStore,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("index was built for a vocabulary of {index} tokens, got {vocab}")]
    VocabSize { index: usize, vocab: usize },
    #[error("index fingerprint {found:08x} does not match checkpoint {expected:08x}")]
    Fingerprint { expected: u32, found: u32 },
    #[error("unknown similarity measure {0:?} (expected cosine, dp or ndp)")]
    UnknownMeasure(String),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// psi(a, b) between an instance representation `a` and a token column `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMeasure {
    /// a.b / (|a| |b|)
    Cosine,
    /// a.b
    Dp,
    /// a.b / |a|, only the instance side normalised
    Ndp,
}

impl SimilarityMeasure {
    pub const ALL: [SimilarityMeasure; 3] = [Self::Cosine, Self::Dp, Self::Ndp];

    pub fn tag(self) -> u8 {
        match self {
            Self::Cosine => 0,
            Self::Dp => 1,
            Self::Ndp => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Dp => "dp",
            Self::Ndp => "ndp",
        }
    }
}

impl fmt::Display for SimilarityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMeasure {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Self::Cosine),
            "dp" | "dot" => Ok(Self::Dp),
            "ndp" => Ok(Self::Ndp),
            _ => Err(IndexError::UnknownMeasure(s.to_string())),
        }
    }
}

pub fn psi<T: Scalar>(measure: SimilarityMeasure, a: &[T], b: &[T]) -> Result<T, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::Dim(a.len(), b.len()));
    }
    let ab = dot(a, b);
    match measure {
        SimilarityMeasure::Dp => Ok(ab),
        SimilarityMeasure::Ndp => {
            let na = norm(a);
            if na <= T::zero() {
                return Err(IndexError::ZeroNorm(measure));
            }
            Ok(ab / na)
        }
        SimilarityMeasure::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na <= T::zero() || nb <= T::zero() {
                return Err(IndexError::ZeroNorm(measure));
            }
            Ok(ab / (na * nb))
        }
    }
}

/// Location of one indexed instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub instance_id: u32,
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// 1-based.
    pub rank: usize,
    pub instance_id: u32,
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// Token surface forms used for scoring.
    pub tokens: Vec<String>,
    pub token_ids: Vec<TokenId>,
    /// Some query word fell back to the unknown token.
    pub unk_flag: bool,
    /// `k` exceeded the number of instances; all of them were returned.
    pub truncated: bool,
    pub hits: Vec<Hit>,
}

/// Contextualised representations of every instance in `store`, one image
/// at a time with no text tokens. Images without instances are skipped.
fn encode_image<T: Scalar>(
    params: &ModelParams<T>,
    store: &InstanceStore,
    idx: usize,
) -> Result<Tensor<T>, IndexError> {
    let feats = store.image_features::<T>(idx);
    Ok(encode(params, &[], &feats)?.visual_out)
}

fn check_dims<T: Scalar>(store: &InstanceStore, params: &ModelParams<T>) -> Result<(), IndexError> {
    if store.num_instances() == 0 {
        return Err(IndexError::EmptyStore);
    }
    if store.feature_dim() != params.config.feature_dim {
        return Err(IndexError::Dim(store.feature_dim(), params.config.feature_dim));
    }
    Ok(())
}

pub fn instance_refs(store: &InstanceStore) -> Vec<InstanceRef> {
    store
        .images()
        .iter()
        .flat_map(|img| {
            img.instances.iter().map(|inst| InstanceRef {
                instance_id: inst.instance_id,
                image_id: img.image_id,
                bbox: inst.bbox,
            })
        })
        .collect()
}

/// Immutable after construction; safe to share between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    measure: SimilarityMeasure,
    fingerprint: u32,
    vocab_size: usize,
    instances: Vec<InstanceRef>,
    scores: Vec<f32>,
}

impl SearchIndex {
    /// Encodes every image of `store` and fills `S`. `fingerprint` should
    /// identify the checkpoint `params` came from.
    pub fn build<T: Scalar>(
        store: &InstanceStore,
        params: &ModelParams<T>,
        measure: SimilarityMeasure,
        fingerprint: u32,
    ) -> Result<Self, IndexError> {
        check_dims(store, params)?;
        let d = params.config.hidden;
        let mut reps = Vec::with_capacity(store.num_instances() * d);
        for (idx, img) in store.images().iter().enumerate() {
            if img.instances.is_empty() {
                log::warn!("image {} has no instances; skipped", img.image_id);
                continue;
            }
            reps.extend_from_slice(encode_image(params, store, idx)?.data());
        }
        let reps = Tensor::new(store.num_instances(), d, reps).map_err(EncoderError::from)?;
        Self::from_representations(instance_refs(store), &reps, &params.token_embed, measure, fingerprint)
    }

    /// Fills `S` from already-encoded instance rows (`N x d`) and the token
    /// matrix `w` (`d x D`).
    pub fn from_representations<T: Scalar>(
        instances: Vec<InstanceRef>,
        reps: &Tensor<T>,
        w: &Tensor<T>,
        measure: SimilarityMeasure,
        fingerprint: u32,
    ) -> Result<Self, IndexError> {
        if reps.rows() != instances.len() {
            return Err(IndexError::Dim(reps.rows(), instances.len()));
        }
        if reps.cols() != w.rows() {
            return Err(IndexError::Dim(reps.cols(), w.rows()));
        }
        let cols = w.transpose();
        let vocab_size = cols.rows();
        let mut scores = Vec::with_capacity(instances.len() * vocab_size);
        for j in 0..reps.rows() {
            for t in 0..vocab_size {
                scores.push(psi(measure, reps.row(j), cols.row(t))?.to_f32_lossy());
            }
        }
        Ok(Self {
            measure,
            fingerprint,
            vocab_size,
            instances,
            scores,
        })
    }

    pub fn measure(&self) -> SimilarityMeasure {
        self.measure
    }

    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[InstanceRef] {
        &self.instances
    }

    pub fn instance(&self, instance_id: u32) -> Option<&InstanceRef> {
        // ids are dense in row order, but do not rely on it for lookups
        match self.instances.get(instance_id as usize) {
            Some(r) if r.instance_id == instance_id => Some(r),
            _ => self.instances.iter().find(|r| r.instance_id == instance_id),
        }
    }

    /// Row `j` of `S`.
    pub fn row(&self, j: usize) -> &[f32] {
        &self.scores[j * self.vocab_size..(j + 1) * self.vocab_size]
    }

    pub fn verify_fingerprint(&self, expected: u32) -> Result<(), IndexError> {
        if self.fingerprint != expected {
            return Err(IndexError::Fingerprint {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    /// Mean of the query tokens' columns, top `k` by score, ties by
    /// ascending instance id.
    pub fn score_query(&self, vocab: &Vocabulary, query: &str, k: usize) -> Result<QueryResult, IndexError> {
        if vocab.len() != self.vocab_size {
            return Err(IndexError::VocabSize {
                index: self.vocab_size,
                vocab: vocab.len(),
            });
        }
        let prepared = prepare_query(vocab, query, k)?;
        let ids = &prepared.ids;
        let scores = self.instances.iter().enumerate().map(|(j, r)| {
            let row = self.row(j);
            (r, mean_score(ids.iter().map(|&t| row[t as usize])))
        });
        let hits = top_k(scores, k);
        Ok(prepared.finish(query, hits, self.len()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(INDEX_MAGIC);
        w.u8(self.measure.tag());
        w.u32(self.fingerprint);
        w.u64(self.instances.len() as u64);
        w.u32(self.vocab_size as u32);
        for r in &self.instances {
            w.u32(r.instance_id);
            w.u32(r.image_id);
            w.f32s(&[r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h]);
        }
        w.f32s(&self.scores);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = ByteReader::open(bytes, INDEX_MAGIC)?;
        let tag = r.u8()?;
        let measure = SimilarityMeasure::from_tag(tag)
            .ok_or_else(|| FormatError::Invalid(format!("unknown measure tag {tag}")))?;
        let fingerprint = r.u32()?;
        let n = r.usize_from_u64()?;
        let vocab_size = r.u32()? as usize;
        let mut instances = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let instance_id = r.u32()?;
            let image_id = r.u32()?;
            let b = r.f32s(4)?;
            instances.push(InstanceRef {
                instance_id,
                image_id,
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
            });
        }
        let scores = r.f32s(n.checked_mul(vocab_size).ok_or(FormatError::Truncated)?)?;
        r.finish()?;
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite("index scores").into());
        }
        Ok(Self {
            measure,
            fingerprint,
            vocab_size,
            instances,
            scores,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        fs::write(path, self.encode()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::decode(&fs::read(path).map_err(FormatError::from)?)
    }
}

/// Answers a query without the index: every instance is re-encoded and
/// scored against the query's token columns directly.
pub fn brute_force_search<T: Scalar>(
    store: &InstanceStore,
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    query: &str,
    measure: SimilarityMeasure,
    k: usize,
) -> Result<QueryResult, IndexError> {
    check_dims(store, params)?;
    if vocab.len() != params.config.vocab_size {
        return Err(IndexError::VocabSize {
            index: params.config.vocab_size,
            vocab: vocab.len(),
        });
    }
    let prepared = prepare_query(vocab, query, k)?;
    let w = &params.token_embed;
    let columns: Vec<Vec<T>> = prepared.ids.iter().map(|&t| w.column(t as usize)).collect();
    let refs = instance_refs(store);
    let mut scored = Vec::with_capacity(refs.len());
    let mut next = 0;
    for (idx, img) in store.images().iter().enumerate() {
        if img.instances.is_empty() {
            continue;
        }
        let v = encode_image(params, store, idx)?;
        for j in 0..v.rows() {
            let mut sims = Vec::with_capacity(columns.len());
            for c in &columns {
                sims.push(psi(measure, v.row(j), c)?.to_f32_lossy());
            }
            scored.push((&refs[next], mean_score(sims.into_iter())));
            next += 1;
        }
    }
    let hits = top_k(scored.into_iter(), k);
    Ok(prepared.finish(query, hits, refs.len()))
}

struct PreparedQuery {
    ids: Vec<TokenId>,
    tokens: Vec<String>,
    unk_flag: bool,
    k: usize,
}

impl PreparedQuery {
    fn finish(self, query: &str, hits: Vec<Hit>, n: usize) -> QueryResult {
        QueryResult {
            query: query.to_string(),
            tokens: self.tokens,
            token_ids: self.ids,
            unk_flag: self.unk_flag,
            truncated: self.k > n,
            hits,
        }
    }
}

fn prepare_query(vocab: &Vocabulary, query: &str, k: usize) -> Result<PreparedQuery, IndexError> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    let seq = vocab.tokenize(query)?;
    Ok(PreparedQuery {
        unk_flag: seq.contains(vocab.unk_id()),
        tokens: seq
            .ids
            .iter()
            .map(|&t| vocab.token(t).unwrap_or_default().to_string())
            .collect(),
        ids: seq.ids,
        k,
    })
}

/// Mean in f64 of f32 similarities, summed in token order.
fn mean_score(values: impl Iterator<Item = f32>) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values {
        sum += v as f64;
        n += 1;
    }
    sum / n as f64
}

/// Ordering where "greater" means ranked earlier.
#[derive(Debug, Clone, Copy)]
struct Ranked<'a> {
    score: f64,
    r: &'a InstanceRef,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.r.instance_id.cmp(&self.r.instance_id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

fn top_k<'a>(scores: impl Iterator<Item = (&'a InstanceRef, f64)>, k: usize) -> Vec<Hit> {
    let mut heap: BinaryHeap<Reverse<Ranked<'a>>> = BinaryHeap::with_capacity(k + 1);
    for (r, score) in scores {
        let cand = Ranked { score, r };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if cand > *worst {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
    }
    let mut kept: Vec<Ranked<'a>> = heap.into_iter().map(|Reverse(c)| c).collect();
    kept.sort_by(|a, b| b.cmp(a));
    kept.into_iter()
        .enumerate()
        .map(|(i, c)| Hit {
            rank: i + 1,
            instance_id: c.r.instance_id,
            image_id: c.r.image_id,
            bbox: c.r.bbox,
            score: c.score,
        })
        .collect()
}

/// Runs every query at depth `k` and keeps the hits as detections, the
/// shape the evaluator consumes.
pub fn run_queries<'q>(
    index: &SearchIndex,
    vocab: &Vocabulary,
    queries: impl IntoIterator<Item = &'q str>,
    k: usize,
) -> Result<BTreeMap<String, Vec<Detection>>, IndexError> {
    let mut out = BTreeMap::new();
    for q in queries {
        let res = index.score_query(vocab, q, k)?;
        out.insert(q.to_string(), res.hits.iter().map(Hit::detection).collect());
    }
    Ok(out)
}

impl Hit {
    pub fn detection(&self) -> Detection {
        Detection {
            image_id: self.image_id,
            bbox: self.bbox,
        }
    }
}

/// Reads an index and checks it against the checkpoint fingerprint.
pub fn load_verified(path: impl AsRef<Path>, expected_fingerprint: u32) -> Result<SearchIndex, IndexError> {
    let index = SearchIndex::load(path)?;
    index.verify_fingerprint(expected_fingerprint)?;
    Ok(index)
}

/// Convenience for callers holding a checkpoint path.
pub fn checkpoint_fingerprint_of(path: impl AsRef<Path>) -> Result<u32, IndexError> {
    Ok(formats::crc32(&fs::read(path).map_err(FormatError::from)?))
}
