#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ovis_cli::service::{router, ServiceState};
use ovis_cli::{images_sidecar, vocab_sidecar};
use ovis_core::encoder::{EncoderConfig, ModelParams};
use ovis_core::store::InstanceStore;
use ovis_core::synth::{generate, SynthConfig};
use ovis_core::{formats, SearchIndex, SimilarityMeasure, Vocabulary};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

/// An untrained model over a small synthetic held-out split, with a
/// vocabulary extended by "male" and "##eer".
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub vocab: Vocabulary,
    pub store: InstanceStore,
    pub cosine: SearchIndex,
    pub dp: SearchIndex,
    pub checkpoint: PathBuf,
    pub index_path: PathBuf,
}

pub fn fixture() -> Fixture {
    let corpus = generate(&SynthConfig {
        concepts: 6,
        feature_dim: 8,
        train_images: 6,
        heldout_images: 10,
        ..SynthConfig::desk()
    })
    .unwrap();
    let mut tokens = corpus.vocab.tokens().to_vec();
    tokens.extend(["male".to_string(), "##eer".to_string()]);
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn_dim: 16,
        ..EncoderConfig::desk(vocab.len(), 8)
    };
    let params = ModelParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("model.ckpt");
    let fp = formats::save_checkpoint(&checkpoint, &params).unwrap();
    let store = corpus.heldout;
    let cosine = SearchIndex::build(&store, &params, SimilarityMeasure::Cosine, fp).unwrap();
    let dp = SearchIndex::build(&store, &params, SimilarityMeasure::Dp, fp).unwrap();
    let index_path = dir.path().join("index.idx");
    cosine.save(&index_path).unwrap();
    vocab.save(vocab_sidecar(&index_path)).unwrap();
    let mut meta = Vec::new();
    store.write_metadata(&mut meta).unwrap();
    std::fs::write(images_sidecar(&index_path), meta).unwrap();
    Fixture {
        dir,
        vocab,
        store,
        cosine,
        dp,
        checkpoint,
        index_path,
    }
}

impl Fixture {
    pub fn state(&self, media_root: Option<&Path>) -> ServiceState {
        ServiceState::new(
            vec![self.cosine.clone(), self.dp.clone()],
            self.vocab.clone(),
            self.store.images().to_vec(),
            media_root.map(Path::to_path_buf),
            10,
            None,
        )
        .unwrap()
    }

    pub fn app(&self) -> Router {
        router(Arc::new(self.state(None)), false)
    }
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let res = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, serde_json::Value) {
    let (s, body) = get(app, uri).await;
    (s, serde_json::from_slice(&body).unwrap())
}
