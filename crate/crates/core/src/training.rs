//! Masked token prediction (MTP), instance label prediction (ILP), the
//! summed objective and an AdamW training loop.
//!
//! Both objectives score contextualised rows against the columns of the
//! token-embedding matrix: logits are `row * W`, followed by a softmax and
//! the negative log-likelihood of the target token.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{encode_graph, BoundParams, EncoderError, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("instance label index {index} out of range for {count} instances")]
    LabelIndex { index: usize, count: usize },
    #[error("label token {id} out of range for vocabulary of size {size}")]
    LabelToken { id: TokenId, size: usize },
    #[error("masked token prediction needs at least one masked position")]
    NothingMasked,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

/// One image-caption pair with optional instance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub caption: Vec<TokenId>,
    pub features: Tensor<T>,
    /// (instance index, label token id); empty when the image is unlabelled.
    pub labels: Vec<(usize, TokenId)>,
}

impl<T: Scalar> TrainingExample<T> {
    pub fn validate(&self, vocab_size: usize) -> Result<(), TrainError> {
        let n = self.features.rows();
        for &(index, id) in &self.labels {
            if index >= n {
                return Err(TrainError::LabelIndex { index, count: n });
            }
            if id as usize >= vocab_size {
                return Err(TrainError::LabelToken { id, size: vocab_size });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_prob: f64,
    pub min_masks: usize,
    pub rng_seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            min_masks: 1,
            rng_seed: 0,
        }
    }
}

/// A caption with some positions replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedCaption {
    pub ids: Vec<TokenId>,
    /// (position, original id), ascending by position.
    pub targets: Vec<(usize, TokenId)>,
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(TrainError::Config(format!(
                "mask_prob {} not in (0, 1]",
                self.mask_prob
            )));
        }
        Ok(())
    }

    /// Masks using a generator seeded from `rng_seed`.
    pub fn mask_tokens(&self, caption: &[TokenId], mask_id: TokenId) -> MaskedCaption {
        self.mask_with(caption, mask_id, &mut ChaCha8Rng::seed_from_u64(self.rng_seed))
    }

    /// Masks each position independently with `mask_prob`, redrawing the
    /// whole set until at least `min_masks` positions are masked. Captions
    /// shorter than `min_masks` are masked entirely.
    pub fn mask_with<R: Rng + ?Sized>(&self, caption: &[TokenId], mask_id: TokenId, rng: &mut R) -> MaskedCaption {
        let n = caption.len();
        let chosen: Vec<bool> = if n <= self.min_masks {
            vec![true; n]
        } else {
            loop {
                let draw: Vec<bool> = (0..n).map(|_| rng.random_bool(self.mask_prob)).collect();
                if draw.iter().filter(|&&b| b).count() >= self.min_masks {
                    break draw;
                }
            }
        };
        let mut ids = caption.to_vec();
        let mut targets = Vec::new();
        for (pos, &c) in chosen.iter().enumerate() {
            if c {
                targets.push((pos, caption[pos]));
                ids[pos] = mask_id;
            }
        }
        MaskedCaption { ids, targets }
    }
}

/// Which terms enter the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Both,
    MtpOnly,
    IlpOnly,
}

impl Objective {
    pub fn uses_mtp(self) -> bool {
        matches!(self, Self::Both | Self::MtpOnly)
    }

    pub fn uses_ilp(self) -> bool {
        matches!(self, Self::Both | Self::IlpOnly)
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" | "mtp+ilp" => Ok(Self::Both),
            "mtp" => Ok(Self::MtpOnly),
            "ilp" => Ok(Self::IlpOnly),
            _ => Err(format!("unknown objective {s:?} (expected both, mtp or ilp)")),
        }
    }
}

/// Graph node for the mean NLL of predicting `targets` from rows of `rows`
/// through the tied embedding matrix.
fn prediction_loss<T: Scalar>(
    graph: &mut Graph<T>,
    p: &BoundParams,
    rows: NodeId,
    targets: &[(usize, TokenId)],
) -> Result<NodeId, TensorError> {
    let positions: Vec<usize> = targets.iter().map(|&(i, _)| i).collect();
    let picked = graph.row_select(rows, &positions)?;
    let logits = graph.matmul(picked, p.token_embed)?;
    let probs = graph.softmax_rows(logits)?;
    let pairs: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &(_, t))| (r, t as usize)).collect();
    graph.nll(probs, &pairs)
}

/// Loss nodes for one example inside a caller-owned graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub mtp: Option<NodeId>,
    pub ilp: Option<NodeId>,
    pub total: NodeId,
    pub visual: NodeId,
    pub text: NodeId,
}

/// Builds the joint forward pass and the loss terms selected by `objective`.
/// Returns `None` when no term is active (nothing masked and no labels).
pub fn build_losses<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    masked: &MaskedCaption,
    features: &Tensor<T>,
    labels: &[(usize, TokenId)],
    objective: Objective,
) -> Result<Option<LossNodes>, TrainError> {
    let n = features.rows();
    for &(index, id) in labels {
        if index >= n {
            return Err(TrainError::LabelIndex { index, count: n });
        }
        if id as usize >= params.config.vocab_size {
            return Err(TrainError::LabelToken {
                id,
                size: params.config.vocab_size,
            });
        }
    }
    let f = graph.leaf(features.clone());
    let enc = encode_graph(graph, &params.config, bound, &masked.ids, f)?;
    let mtp = if objective.uses_mtp() && !masked.targets.is_empty() {
        Some(prediction_loss(graph, bound, enc.text, &masked.targets)?)
    } else {
        None
    };
    let ilp = if objective.uses_ilp() && !labels.is_empty() {
        Some(prediction_loss(graph, bound, enc.visual, labels)?)
    } else {
        None
    };
    let total = match (mtp, ilp) {
        (Some(a), Some(b)) => graph.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Ok(None),
    };
    Ok(Some(LossNodes {
        mtp,
        ilp,
        total,
        visual: enc.visual,
        text: enc.text,
    }))
}

/// Masked token prediction loss: mean NLL over masked positions.
pub fn mtp_loss<T: Scalar>(
    params: &ModelParams<T>,
    masked: &MaskedCaption,
    features: &Tensor<T>,
) -> Result<T, TrainError> {
    if masked.targets.is_empty() {
        return Err(TrainError::NothingMasked);
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let nodes =
        build_losses(&mut g, params, &b, masked, features, &[], Objective::MtpOnly)?.expect("targets non-empty");
    Ok(g.value(nodes.total).item()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlpLoss<T> {
    pub value: T,
    /// False when the image has no labelled instance; the value is then zero.
    pub active: bool,
}

/// Instance label prediction loss over labelled instances only, encoding
/// `caption` jointly with the features.
pub fn ilp_loss<T: Scalar>(
    params: &ModelParams<T>,
    caption: &[TokenId],
    features: &Tensor<T>,
    labels: &[(usize, TokenId)],
) -> Result<IlpLoss<T>, TrainError> {
    if labels.is_empty() {
        return Ok(IlpLoss {
            value: T::zero(),
            active: false,
        });
    }
    let masked = MaskedCaption {
        ids: caption.to_vec(),
        targets: Vec::new(),
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let nodes =
        build_losses(&mut g, params, &b, &masked, features, labels, Objective::IlpOnly)?.expect("labels non-empty");
    Ok(IlpLoss {
        value: g.value(nodes.total).item()?,
        active: true,
    })
}

/// Per-example loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub mtp: Option<f64>,
    pub ilp: Option<f64>,
    pub total: f64,
}

/// Loss terms and parameter gradients (in [`ModelParams::tensors`] order)
/// for a single example.
pub fn example_gradients<T: Scalar>(
    params: &ModelParams<T>,
    masked: &MaskedCaption,
    features: &Tensor<T>,
    labels: &[(usize, TokenId)],
    objective: Objective,
) -> Result<(LossTerms, Option<Vec<Tensor<T>>>), TrainError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let Some(nodes) = build_losses(&mut g, params, &bound, masked, features, labels, objective)? else {
        return Ok((LossTerms::default(), None));
    };
    let value = |id: NodeId| g.value(id).item().map(|v| v.to_f64().unwrap_or(f64::NAN));
    let terms = LossTerms {
        mtp: nodes.mtp.map(value).transpose()?,
        ilp: nodes.ilp.map(value).transpose()?,
        total: value(nodes.total)?,
    };
    let mut grads = g.backward(nodes.total)?;
    let out = bound.leaves.iter().map(|&id| grads.take(id)).collect();
    Ok((terms, Some(out)))
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            ..Self::at_scale()
        }
    }

    pub fn at_scale() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let decay = T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / corr1;
                let v_hat = vd[i] / corr2;
                pd[i] = pd[i] - decay * pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub masking: MaskingPolicy,
    pub objective: Objective,
    /// Seeds example shuffling and per-example masking.
    pub seed: u64,
}

impl TrainConfig {
    /// 200 epochs, batch 32, lr 1e-3.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            optimizer: AdamWConfig::desk(),
            masking: MaskingPolicy::default(),
            objective: Objective::Both,
            seed: 0,
        }
    }

    /// 50 epochs, batch 512, lr 1e-5.
    pub fn at_scale() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            optimizer: AdamWConfig::at_scale(),
            ..Self::desk()
        }
    }
}

/// Mean losses over one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mtp: f64,
    pub ilp: f64,
    /// False when no example in the batch had labels.
    pub ilp_active: bool,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean per-example total loss for each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `config.epochs` epochs of mini-batch AdamW over `examples`.
///
/// Gradients of a batch are summed in example order and divided by the
/// batch size, so a run is bit-reproducible for a fixed seed.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    examples: &[TrainingExample<T>],
    config: &TrainConfig,
    mask_id: TokenId,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport, TrainError> {
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    config.masking.validate()?;
    for ex in examples {
        ex.validate(params.config.vocab_size)?;
    }
    let mut opt = OptimizerState::new(config.optimizer, params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            let (mut mtp_sum, mut mtp_n, mut ilp_sum, mut ilp_n, mut total_sum) = (0.0, 0, 0.0, 0, 0.0);
            for &idx in batch {
                let ex = &examples[idx];
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    config.masking.rng_seed ^ config.seed,
                    epoch as u64,
                    idx as u64,
                ));
                let masked = if config.objective.uses_mtp() && !ex.caption.is_empty() {
                    config.masking.mask_with(&ex.caption, mask_id, &mut rng)
                } else {
                    MaskedCaption {
                        ids: ex.caption.clone(),
                        targets: Vec::new(),
                    }
                };
                let (terms, grads) = example_gradients(params, &masked, &ex.features, &ex.labels, config.objective)?;
                if let Some(v) = terms.mtp {
                    mtp_sum += v;
                    mtp_n += 1;
                }
                if let Some(v) = terms.ilp {
                    ilp_sum += v;
                    ilp_n += 1;
                }
                total_sum += terms.total;
                if let Some(grads) = grads {
                    match &mut acc {
                        Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                        None => acc = Some(grads),
                    }
                }
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            let grads = match acc {
                Some(a) => a.into_iter().map(|g| g.scale(inv)).collect(),
                None => params
                    .tensors()
                    .iter()
                    .map(|t| Tensor::zeros(t.rows(), t.cols()))
                    .collect::<Vec<_>>(),
            };
            opt.apply(params, &grads);
            epoch_total += total_sum;
            on_step(&StepRecord {
                step: opt.step,
                epoch,
                mtp: if mtp_n > 0 { mtp_sum / mtp_n as f64 } else { 0.0 },
                ilp: if ilp_n > 0 { ilp_sum / ilp_n as f64 } else { 0.0 },
                ilp_active: ilp_n > 0,
                total: total_sum / batch.len() as f64,
            });
        }
        let mean = if examples.is_empty() {
            0.0
        } else {
            epoch_total / examples.len() as f64
        };
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.step;
    Ok(report)
}

/// Writes `step,mtp,ilp,total` rows.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "step,mtp,ilp,total")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{},{:.6},{:.6},{:.6}", r.step, r.mtp, r.ilp, r.total)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    const MASK: TokenId = 2;

    fn tiny(vocab: usize) -> ModelParams<f64> {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            vocab_size: vocab,
            max_text_len: 8,
            feature_dim: 3,
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn full_masking() {
        let p = MaskingPolicy {
            mask_prob: 1.0,
            min_masks: 1,
            rng_seed: 0,
        };
        let m = p.mask_tokens(&[5, 6], MASK);
        assert_eq!(m.ids, vec![MASK, MASK]);
        assert_eq!(m.targets, vec![(0, 5), (1, 6)]);
    }

    #[test]
    fn single_token_caption_is_masked() {
        let p = MaskingPolicy {
            mask_prob: 0.15,
            min_masks: 1,
            rng_seed: 9,
        };
        assert_eq!(p.mask_tokens(&[7], MASK).targets, vec![(0, 7)]);
        let p = MaskingPolicy { min_masks: 3, ..p };
        assert_eq!(p.mask_tokens(&[7, 8], MASK).targets.len(), 2);
    }

    #[test]
    fn masking_is_seeded() {
        let p = MaskingPolicy {
            mask_prob: 0.15,
            min_masks: 1,
            rng_seed: 7,
        };
        let caption: Vec<TokenId> = (3..23).collect();
        let first = p.mask_tokens(&caption, MASK);
        assert!(!first.targets.is_empty());
        for _ in 0..5 {
            assert_eq!(p.mask_tokens(&caption, MASK), first);
        }
    }

    #[test]
    fn bad_mask_prob_rejected() {
        let p = MaskingPolicy {
            mask_prob: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut p = tiny(8);
        p.token_embed = Tensor::zeros(8, 8);
        let masked = MaskedCaption {
            ids: vec![MASK, 4],
            targets: vec![(0, 3)],
        };
        let l = mtp_loss(&p, &masked, &Tensor::zeros(1, 3)).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        // zero-layer encoder: the masked row is W[:, MASK] + pos + segment;
        // make that row point strongly at token 5's column
        let mut p = tiny(6);
        p.config.layers = 0;
        p.layers.clear();
        let d = 8;
        p.pos_embed = Tensor::zeros(8, d);
        p.segment_embed = Tensor::zeros(2, d);
        p.token_embed = Tensor::zeros(d, 6);
        p.token_embed.set(0, MASK as usize, 1.0);
        p.token_embed.set(0, 5, 60.0);
        let masked = MaskedCaption {
            ids: vec![MASK],
            targets: vec![(0, 5)],
        };
        let l = mtp_loss(&p, &masked, &Tensor::zeros(0, 3)).unwrap();
        assert!(l <= 1e-5, "{l}");

        // the same construction for ILP: instance row projects onto column 5
        p.visual_proj = Tensor::zeros(3, d);
        p.visual_proj.set(0, 0, 1.0);
        let feats = Tensor::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let ilp = ilp_loss(&p, &[], &feats, &[(0, 5)]).unwrap();
        assert!(ilp.active);
        assert!(ilp.value <= 1e-5);
    }

    #[test]
    fn ilp_without_labels_is_inactive() {
        let p = tiny(6);
        let r = ilp_loss(&p, &[3], &Tensor::zeros(2, 3), &[]).unwrap();
        assert_eq!(
            r,
            IlpLoss {
                value: 0.0,
                active: false
            }
        );
    }

    #[test]
    fn ilp_label_index_checked() {
        let p = tiny(6);
        assert!(matches!(
            ilp_loss(&p, &[], &Tensor::zeros(2, 3), &[(2, 4)]),
            Err(TrainError::LabelIndex { index: 2, count: 2 })
        ));
    }

    #[test]
    fn unlabelled_instances_get_no_ilp_gradient() {
        let p = tiny(6);
        let feats = Tensor::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin());
        let labels = [(1, 4), (3, 5)];
        let masked = MaskedCaption {
            ids: vec![3, MASK],
            targets: vec![(1, 4)],
        };
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let nodes = build_losses(&mut g, &p, &b, &masked, &feats, &labels, Objective::IlpOnly)
            .unwrap()
            .unwrap();
        let grads = g.backward(nodes.ilp.unwrap()).unwrap();
        let gv = grads.get(nodes.visual);
        for r in [0, 2, 4] {
            assert!(gv.row(r).iter().all(|&v| v == 0.0), "row {r}");
        }
        for r in [1, 3] {
            assert!(gv.row(r).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let p = tiny(6);
        let feats = Tensor::from_fn(3, 3, |r, c| (r as f64 - c as f64) * 0.4);
        let masked = MaskedCaption {
            ids: vec![MASK, 4],
            targets: vec![(0, 3)],
        };
        let (terms, _) = example_gradients(&p, &masked, &feats, &[(0, 4)], Objective::Both).unwrap();
        assert!((terms.total - terms.mtp.unwrap() - terms.ilp.unwrap()).abs() <= 1e-12);
        assert!(terms.mtp.unwrap() >= 0.0 && terms.ilp.unwrap() >= 0.0);
    }

    #[test]
    fn no_labels_matches_mtp_only_bitwise() {
        let p = tiny(6);
        let feats = Tensor::from_fn(3, 3, |r, c| (r as f64 + c as f64) * 0.2);
        let masked = MaskedCaption {
            ids: vec![MASK, 4],
            targets: vec![(0, 3)],
        };
        let (_, a) = example_gradients(&p, &masked, &feats, &[], Objective::Both).unwrap();
        let (_, b) = example_gradients(&p, &masked, &feats, &[], Objective::MtpOnly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_csv_format() {
        let mut log = MetricsLog::new(Vec::new()).unwrap();
        log.record(&StepRecord {
            step: 1,
            epoch: 0,
            mtp: 1.5,
            ilp: 0.25,
            ilp_active: true,
            total: 1.75,
        })
        .unwrap();
        let s = String::from_utf8(log.into_inner()).unwrap();
        assert_eq!(s, "step,mtp,ilp,total\n1,1.500000,0.250000,1.750000\n");
    }

    #[test]
    fn objective_parsing() {
        assert_eq!("mtp".parse::<Objective>().unwrap(), Objective::MtpOnly);
        assert_eq!("both".parse::<Objective>().unwrap(), Objective::Both);
        assert!("x".parse::<Objective>().is_err());
    }
}
