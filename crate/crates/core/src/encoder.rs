//! Visual-semantic encoder: a self-attention stack over caption-token
//! embeddings concatenated with projected visual features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("text sequence of {len} tokens exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("feature dimension {got} does not match config {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("encoder needs at least one text token or visual instance")]
    EmptyInput,
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub feature_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, hidden 64, 4 heads.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_text_len: 32,
            feature_dim,
        }
    }

    /// 12 layers, hidden 768, 12 heads.
    pub fn base(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size,
            max_text_len: 512,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let counts = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

/// All learned weights. `token_embed` is the `hidden x vocab` matrix whose
/// columns embed tokens; the same matrix produces prediction logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: EncoderConfig,
    pub token_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub segment_embed: Tensor<T>,
    pub visual_proj: Tensor<T>,
    pub visual_bias: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

pub const TEXT_SEGMENT: usize = 0;
pub const VISUAL_SEGMENT: usize = 1;

impl<T: Scalar> ModelParams<T> {
    /// Weights and embeddings uniform in `±1/sqrt(hidden)`, biases zero,
    /// layer-norm gains one.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uni =
            |rows: usize, cols: usize| Tensor::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)));
        let token_embed = uni(d, config.vocab_size);
        let pos_embed = uni(config.max_text_len, d);
        let segment_embed = uni(2, d);
        let visual_proj = uni(config.feature_dim, d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: uni(d, d),
                bq: Tensor::zeros(1, d),
                wk: uni(d, d),
                bk: Tensor::zeros(1, d),
                wv: uni(d, d),
                bv: Tensor::zeros(1, d),
                wo: uni(d, d),
                bo: Tensor::zeros(1, d),
                ln1_gamma: Tensor::filled(1, d, T::one()),
                ln1_beta: Tensor::zeros(1, d),
                w1: uni(d, config.ffn_dim),
                b1: Tensor::zeros(1, config.ffn_dim),
                w2: uni(config.ffn_dim, d),
                b2: Tensor::zeros(1, d),
                ln2_gamma: Tensor::filled(1, d, T::one()),
                ln2_beta: Tensor::zeros(1, d),
            });
        }
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            segment_embed,
            visual_proj,
            visual_bias: Tensor::zeros(1, d),
            layers,
        })
    }

    /// Canonical (name, tensor) listing; the order is the checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embed".into(), &self.token_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("segment_embed".into(), &self.segment_embed),
            ("visual_proj.weight".into(), &self.visual_proj),
            ("visual_proj.bias".into(), &self.visual_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in layer_fields(l) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.token_embed,
            &mut self.pos_embed,
            &mut self.segment_embed,
            &mut self.visual_proj,
            &mut self.visual_bias,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
            ]);
        }
        out
    }

    /// Expected shape of every tensor for `config`, in checkpoint order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        let d = config.hidden;
        let f = config.ffn_dim;
        let mut out = vec![
            ("token_embed".to_string(), (d, config.vocab_size)),
            ("pos_embed".to_string(), (config.max_text_len, d)),
            ("segment_embed".to_string(), (2, d)),
            ("visual_proj.weight".to_string(), (config.feature_dim, d)),
            ("visual_proj.bias".to_string(), (1, d)),
        ];
        let layer = [
            ("attn.q.weight", (d, d)),
            ("attn.q.bias", (1, d)),
            ("attn.k.weight", (d, d)),
            ("attn.k.bias", (1, d)),
            ("attn.v.weight", (d, d)),
            ("attn.v.bias", (1, d)),
            ("attn.out.weight", (d, d)),
            ("attn.out.bias", (1, d)),
            ("ln1.gamma", (1, d)),
            ("ln1.beta", (1, d)),
            ("ffn.in.weight", (d, f)),
            ("ffn.in.bias", (1, f)),
            ("ffn.out.weight", (f, d)),
            ("ffn.out.bias", (1, d)),
            ("ln2.gamma", (1, d)),
            ("ln2.beta", (1, d)),
        ];
        for i in 0..config.layers {
            for (n, s) in layer {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out
    }

    /// Rebuilds parameters from tensors listed in checkpoint order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(EncoderError::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((ename, eshape), (name, t)) in expected.iter().zip(&tensors) {
            if ename != name || *eshape != t.shape() {
                return Err(EncoderError::ParamShape {
                    name: name.clone(),
                    expected: *eshape,
                    got: t.shape(),
                });
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked above");
        let token_embed = next();
        let pos_embed = next();
        let segment_embed = next();
        let visual_proj = next();
        let visual_bias = next();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gamma: next(),
                ln1_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
            });
        }
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            segment_embed,
            visual_proj,
            visual_bias,
            layers,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        ModelParams::from_tensors(self.config, tensors).expect("shapes preserved by cast")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        let leaves: Vec<NodeId> = self.tensors().into_iter().map(|t| graph.leaf(t.clone())).collect();
        BoundParams::from_leaves(leaves, self.layers.len())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn layer_fields<T>(l: &LayerParams<T>) -> [(&'static str, &Tensor<T>); 16] {
    [
        ("attn.q.weight", &l.wq),
        ("attn.q.bias", &l.bq),
        ("attn.k.weight", &l.wk),
        ("attn.k.bias", &l.bk),
        ("attn.v.weight", &l.wv),
        ("attn.v.bias", &l.bv),
        ("attn.out.weight", &l.wo),
        ("attn.out.bias", &l.bo),
        ("ln1.gamma", &l.ln1_gamma),
        ("ln1.beta", &l.ln1_beta),
        ("ffn.in.weight", &l.w1),
        ("ffn.in.bias", &l.b1),
        ("ffn.out.weight", &l.w2),
        ("ffn.out.bias", &l.b2),
        ("ln2.gamma", &l.ln2_gamma),
        ("ln2.beta", &l.ln2_beta),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

/// Graph leaves for a [`ModelParams`], in the same order as
/// [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub leaves: Vec<NodeId>,
    pub token_embed: NodeId,
    pub pos_embed: NodeId,
    pub segment_embed: NodeId,
    pub visual_proj: NodeId,
    pub visual_bias: NodeId,
    pub layers: Vec<BoundLayer>,
}

impl BoundParams {
    fn from_leaves(leaves: Vec<NodeId>, n_layers: usize) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let b = &leaves[5 + 16 * i..5 + 16 * (i + 1)];
            layers.push(BoundLayer {
                wq: b[0],
                bq: b[1],
                wk: b[2],
                bk: b[3],
                wv: b[4],
                bv: b[5],
                wo: b[6],
                bo: b[7],
                ln1_gamma: b[8],
                ln1_beta: b[9],
                w1: b[10],
                b1: b[11],
                w2: b[12],
                b2: b[13],
                ln2_gamma: b[14],
                ln2_beta: b[15],
            });
        }
        Self {
            token_embed: leaves[0],
            pos_embed: leaves[1],
            segment_embed: leaves[2],
            visual_proj: leaves[3],
            visual_bias: leaves[4],
            layers,
            leaves,
        }
    }
}

/// Graph nodes for the contextualised text and visual rows.
#[derive(Debug, Clone, Copy)]
pub struct EncodedNodes {
    pub text: NodeId,
    pub visual: NodeId,
}

/// Contextualised representations as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence<T> {
    pub text_out: Tensor<T>,
    pub visual_out: Tensor<T>,
}

/// Row `i` is token `ids[i]`'s column of the embedding matrix plus the
/// position-`i` and text-segment embeddings.
pub fn embed_tokens<T: Scalar>(
    graph: &mut Graph<T>,
    config: &EncoderConfig,
    p: &BoundParams,
    ids: &[TokenId],
) -> Result<NodeId, EncoderError> {
    if ids.len() > config.max_text_len {
        return Err(EncoderError::TextTooLong {
            len: ids.len(),
            max: config.max_text_len,
        });
    }
    let mut cols = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(EncoderError::TokenOutOfRange {
                id,
                size: config.vocab_size,
            });
        }
        cols.push(id as usize);
    }
    let tok = graph.column_select(p.token_embed, &cols)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = graph.row_select(p.pos_embed, &positions)?;
    let seg = graph.row_select(p.segment_embed, &vec![TEXT_SEGMENT; ids.len()])?;
    let x = graph.add(tok, pos)?;
    Ok(graph.add(x, seg)?)
}

/// Affine projection of visual features plus the visual-segment embedding;
/// no positional term.
pub fn project_visual<T: Scalar>(
    graph: &mut Graph<T>,
    config: &EncoderConfig,
    p: &BoundParams,
    features: NodeId,
) -> Result<NodeId, EncoderError> {
    let (n, fd) = graph.shape(features);
    if fd != config.feature_dim {
        return Err(EncoderError::FeatureDim {
            got: fd,
            expected: config.feature_dim,
        });
    }
    let x = graph.matmul(features, p.visual_proj)?;
    let x = graph.add_row(x, p.visual_bias)?;
    let seg = graph.row_select(p.segment_embed, &vec![VISUAL_SEGMENT; n])?;
    Ok(graph.add(x, seg)?)
}

fn attention<T: Scalar>(
    graph: &mut Graph<T>,
    config: &EncoderConfig,
    l: &BoundLayer,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let q = graph.matmul(x, l.wq)?;
    let q = graph.add_row(q, l.bq)?;
    let k = graph.matmul(x, l.wk)?;
    let k = graph.add_row(k, l.bk)?;
    let v = graph.matmul(x, l.wv)?;
    let v = graph.add_row(v, l.bv)?;
    let hd = config.head_dim();
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = graph.slice_cols(q, h * hd, hd)?;
        let kh = graph.slice_cols(k, h * hd, hd)?;
        let vh = graph.slice_cols(v, h * hd, hd)?;
        let scores = graph.matmul_t(qh, kh)?;
        let scores = graph.scale(scores, scale)?;
        let weights = graph.softmax_rows(scores)?;
        heads.push(graph.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        graph.concat_cols(&heads)?
    };
    let out = graph.matmul(merged, l.wo)?;
    graph.add_row(out, l.bo)
}

fn encoder_layer<T: Scalar>(
    graph: &mut Graph<T>,
    config: &EncoderConfig,
    l: &BoundLayer,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let a = attention(graph, config, l, x)?;
    let h = graph.add(x, a)?;
    let h = graph.layer_norm(h, l.ln1_gamma, l.ln1_beta)?;
    let f = graph.matmul(h, l.w1)?;
    let f = graph.add_row(f, l.b1)?;
    let f = graph.relu(f)?;
    let f = graph.matmul(f, l.w2)?;
    let f = graph.add_row(f, l.b2)?;
    let out = graph.add(h, f)?;
    graph.layer_norm(out, l.ln2_gamma, l.ln2_beta)
}

/// Jointly encodes `ids` (possibly empty) and the visual feature rows with
/// full bidirectional attention.
pub fn encode_graph<T: Scalar>(
    graph: &mut Graph<T>,
    config: &EncoderConfig,
    p: &BoundParams,
    ids: &[TokenId],
    features: NodeId,
) -> Result<EncodedNodes, EncoderError> {
    let m = ids.len();
    let n = graph.shape(features).0;
    if m + n == 0 {
        return Err(EncoderError::EmptyInput);
    }
    let text = embed_tokens(graph, config, p, ids)?;
    let visual = project_visual(graph, config, p, features)?;
    let mut x = graph.concat_rows(&[text, visual])?;
    for l in &p.layers {
        x = encoder_layer(graph, config, l, x)?;
    }
    Ok(EncodedNodes {
        text: graph.slice_rows(x, 0, m)?,
        visual: graph.slice_rows(x, m, n)?,
    })
}

/// Convenience wrapper running [`encode_graph`] on a throwaway graph.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[TokenId],
    features: &Tensor<T>,
) -> Result<EncodedSequence<T>, EncoderError> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let f = graph.leaf(features.clone());
    let out = encode_graph(&mut graph, &params.config, &bound, ids, f)?;
    Ok(EncodedSequence {
        text_out: graph.value(out.text).clone(),
        visual_out: graph.value(out.visual).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(layers: usize) -> ModelParams<f32> {
        let cfg = EncoderConfig {
            layers,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 10,
            max_text_len: 6,
            feature_dim: 5,
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn embed_only(p: &ModelParams<f32>, ids: &[TokenId]) -> Tensor<f32> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let e = embed_tokens(&mut g, &p.config, &b, ids).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::desk(10, 4);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(EncoderError::Config(_))));
        c.heads = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::base(31069, 768).validate().is_ok());
    }

    #[test]
    fn embedding_is_column_of_w_without_pos_or_segment() {
        let mut p = small(1);
        p.pos_embed = Tensor::zeros(6, 8);
        p.segment_embed = Tensor::zeros(2, 8);
        let e = embed_only(&p, &[3]);
        assert_eq!(e.row(0), p.token_embed.column(3).as_slice());
        assert_eq!(embed_only(&p, &[]).shape(), (0, 8));
    }

    #[test]
    fn duplicate_ids_differ_by_position_embedding() {
        let p = small(1);
        let e = embed_only(&p, &[4, 7, 4]);
        for c in 0..8 {
            let diff = e.get(2, c) - e.get(0, c);
            let pos = p.pos_embed.get(2, c) - p.pos_embed.get(0, c);
            assert!((diff - pos).abs() < 1e-6);
        }
    }

    #[test]
    fn text_too_long_and_bad_ids_rejected() {
        let p = small(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        assert!(matches!(
            embed_tokens(&mut g, &p.config, &b, &[1; 7]),
            Err(EncoderError::TextTooLong { len: 7, max: 6 })
        ));
        assert!(matches!(
            embed_tokens(&mut g, &p.config, &b, &[10]),
            Err(EncoderError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn projection_edge_cases() {
        let cfg = EncoderConfig {
            layers: 0,
            hidden: 4,
            heads: 1,
            ffn_dim: 4,
            vocab_size: 5,
            max_text_len: 2,
            feature_dim: 4,
        };
        let mut p = ModelParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.visual_proj = Tensor::identity(4);
        p.segment_embed = Tensor::zeros(2, 4);
        let feats = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        let out = encode(&p, &[], &feats).unwrap();
        // zero layers: output is the projected input
        assert_eq!(out.visual_out, feats);
        let zero = encode(&p, &[], &Tensor::zeros(1, 4)).unwrap();
        assert!(zero.visual_out.data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let f = g.leaf(Tensor::zeros(2, 3));
        assert!(matches!(
            project_visual(&mut g, &p.config, &b, f),
            Err(EncoderError::FeatureDim { got: 3, expected: 4 })
        ));
    }

    #[test]
    fn inference_path_returns_one_row_per_instance() {
        let p = small(2);
        let feats = Tensor::from_fn(4, 5, |r, c| ((r + c) as f32 * 0.4).sin());
        let out = encode(&p, &[], &feats).unwrap();
        assert_eq!(out.text_out.shape(), (0, 8));
        assert_eq!(out.visual_out.shape(), (4, 8));
        let joint = encode(&p, &[1, 2], &feats).unwrap();
        assert_eq!(joint.text_out.shape(), (2, 8));
        assert!(matches!(
            encode(&p, &[], &Tensor::zeros(0, 5)),
            Err(EncoderError::EmptyInput)
        ));
    }

    #[test]
    fn encode_is_pure() {
        let p = small(2);
        let feats = Tensor::from_fn(3, 5, |r, c| ((r * 5 + c) as f32).cos());
        assert_eq!(
            encode(&p, &[2, 5], &feats).unwrap(),
            encode(&p, &[2, 5], &feats).unwrap()
        );
    }

    #[test]
    fn tensor_listing_round_trips() {
        let p = small(2);
        let named = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ModelParams::from_tensors(p.config, named).unwrap();
        assert_eq!(back, p);
        let shapes = ModelParams::<f32>::expected_shapes(&p.config);
        assert_eq!(shapes.len(), p.tensors().len());
    }
}
