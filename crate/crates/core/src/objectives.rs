//! Training objectives: contrastive alignment with momentum soft targets,
//! image-text matching over hard negatives, and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderError, Model};
use crate::tensor_ad::{softmax_rows, Binding, ParamStore, Tape, Tensor, TensorError, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("similarity matrix must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("need at least two pairs to draw negatives, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    /// Weight of the momentum soft labels in the contrastive targets.
    pub soft_label_mix: f64,
    /// Draw negatives in proportion to similarity; otherwise uniformly.
    pub hard_negative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            soft_label_mix: 0.4,
            hard_negative: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "loss weights must be non-negative, got ({}, {})",
                self.w1, self.w2
            )));
        }
        if !(0.0..=1.0).contains(&self.soft_label_mix) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "soft label mix {} outside [0, 1]",
                self.soft_label_mix
            )));
        }
        Ok(())
    }
}

fn check_square(s: &Tensor) -> Result<usize, ObjectiveError> {
    let (rows, cols) = (s.rows(), s.cols());
    if s.rank() != 2 || rows != cols || rows == 0 {
        return Err(ObjectiveError::NotSquare { rows, cols });
    }
    Ok(rows)
}

/// `(1 − α)·I + α·softmax(S_m / τ)` row-wise.
pub fn soft_targets(s_m: &Tensor, tau: f64, alpha: f64) -> Tensor {
    let n = s_m.rows();
    let mut t = softmax_rows(&s_m.map(|v| v / tau), None);
    for (i, row) in t.data_mut().chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = alpha * *v + if i == j { 1.0 - alpha } else { 0.0 };
        }
    }
    t
}

/// Symmetric cross-entropy between `softmax(S/τ)` and the soft targets,
/// averaged over rows for image→text and over columns for text→image.
///
/// `s_m` and `target_tau` only shape the targets and receive no gradient.
pub fn contrastive_loss<'t>(
    s: Var<'t>,
    s_m: &Tensor,
    tau: Var<'t>,
    target_tau: f64,
    alpha: f64,
) -> Result<Var<'t>, ObjectiveError> {
    let n = check_square(&s.value())?;
    if s_m.shape() != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: vec![n, n],
            rhs: s_m.shape().to_vec(),
        }
        .into());
    }
    let tape = s.tape();
    let inv_tau = tau.log().scale(-1.0).exp();
    let logits = s.mul_scalar(inv_tau)?;
    let i2t_targets = tape.constant(soft_targets(s_m, target_tau, alpha));
    let t2i_targets = tape.constant(soft_targets(&s_m.transpose(), target_tau, alpha));
    let i2t = logits
        .log_softmax()
        .mul(i2t_targets)?
        .sum()
        .scale(-1.0 / n as f64);
    let t2i = logits
        .transpose()
        .log_softmax()
        .mul(t2i_targets)?
        .sum()
        .scale(-1.0 / n as f64);
    Ok(i2t.add(t2i)?.scale(0.5))
}

/// Plain-number form of [`contrastive_loss`].
pub fn contrastive_loss_value(
    s: &Tensor,
    s_m: &Tensor,
    tau: f64,
    alpha: f64,
) -> Result<f64, ObjectiveError> {
    let tape = Tape::new();
    let loss = contrastive_loss(
        tape.constant(s.clone()),
        s_m,
        tape.constant(Tensor::scalar(tau)),
        tau,
        alpha,
    )?;
    Ok(loss.item())
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding left `u` at the end: fall back to the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn negatives_by_row(s: &Tensor, hard: bool, rng: &mut impl Rng) -> Vec<usize> {
    let n = s.rows();
    (0..n)
        .map(|i| {
            let row = s.row(i);
            let max = (0..n)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..n)
                .map(|j| {
                    if j == i {
                        0.0
                    } else if hard {
                        (row[j] - max).exp()
                    } else {
                        1.0
                    }
                })
                .collect();
            draw(&weights, rng)
        })
        .collect()
}

/// For each image a negative text, and for each text a negative image, drawn
/// with probability `softmax` over the off-diagonal similarities.
pub fn sample_hard_negatives(
    s: &Tensor,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>), ObjectiveError> {
    sample_negatives(s, true, rng)
}

/// Like [`sample_hard_negatives`]; with `hard == false` every off-diagonal
/// candidate is equally likely.
pub fn sample_negatives(
    s: &Tensor,
    hard: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>), ObjectiveError> {
    let n = check_square(s)?;
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall(n));
    }
    let texts_for_images = negatives_by_row(s, hard, rng);
    let images_for_texts = negatives_by_row(&s.transpose(), hard, rng);
    Ok((texts_for_images, images_for_texts))
}

/// Mean binary cross-entropy: label 1 for `positive`, 0 for `negative`.
pub fn itm_loss(positive: &[f64], negative: &[f64]) -> f64 {
    let n = positive.len() + negative.len();
    if n == 0 {
        return 0.0;
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos: f64 = positive.iter().map(|&p| -clamp(p).ln()).sum();
    let neg: f64 = negative.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum();
    (pos + neg) / n as f64
}

/// Tape form of [`itm_loss`] over column vectors of probabilities.
pub fn itm_loss_var<'t>(positive: Var<'t>, negative: Var<'t>) -> Result<Var<'t>, ObjectiveError> {
    let n = positive.value().len() + negative.value().len();
    let tape = positive.tape();
    let pos = positive.clamp(PROB_EPS, 1.0 - PROB_EPS).log().sum();
    let ones = tape.constant(Tensor::full(&negative.shape(), 1.0));
    let neg = ones
        .sub(negative.clamp(PROB_EPS, 1.0 - PROB_EPS))?
        .log()
        .sum();
    Ok(pos.add(neg)?.scale(-1.0 / n as f64))
}

pub fn total_loss(l_con: f64, l_mat: f64, config: &LossConfig) -> f64 {
    config.w1 * l_con + config.w2 * l_mat
}

/// One image-text pair of a training batch.
#[derive(Clone, Copy, Debug)]
pub struct TrainPair<'a> {
    pub pixels: &'a Tensor,
    pub caption_ids: &'a [usize],
    pub knowledge_ids: &'a [usize],
}

pub struct BatchLoss<'t> {
    pub total: Var<'t>,
    pub contrastive: f64,
    pub matching: f64,
}

/// Unit image and text features for every pair, stacked as rows, plus the
/// image token sequences.
pub fn batch_features<'t>(
    model: &Model,
    p: &Binding<'_, 't>,
    pairs: &[TrainPair<'_>],
) -> Result<(Var<'t>, Var<'t>, Vec<Var<'t>>), ObjectiveError> {
    let mut img = Vec::with_capacity(pairs.len());
    let mut tokens = Vec::with_capacity(pairs.len());
    let mut txt = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let f = model.encode_image(p, pair.pixels)?;
        img.push(f.feature);
        tokens.push(f.tokens);
        txt.push(model.text_feature(p, pair.caption_ids, pair.knowledge_ids)?);
    }
    Ok((Var::concat_rows(&img)?, Var::concat_rows(&txt)?, tokens))
}

/// Image-text similarities of a frozen parameter set (the momentum copy).
pub fn frozen_similarities(
    model: &Model,
    params: &ParamStore,
    pairs: &[TrainPair<'_>],
) -> Result<Tensor, ObjectiveError> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let (img, txt, _) = batch_features(model, &p, pairs)?;
    Ok((*img.matmul_t(txt)?.value()).clone())
}

/// Weighted contrastive + matching loss of one batch.
///
/// Soft targets come from `momentum` (its own temperature included); without
/// a momentum copy the online similarities are used, detached. Negatives for
/// the matching loss are drawn from `rng`. A zero matching weight skips the
/// matching forward passes.
pub fn batch_loss<'t>(
    model: &Model,
    p: &Binding<'_, 't>,
    momentum: Option<&ParamStore>,
    pairs: &[TrainPair<'_>],
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<BatchLoss<'t>, ObjectiveError> {
    config.validate()?;
    let n = pairs.len();
    let (img, txt, image_tokens) = batch_features(model, p, pairs)?;
    let s = img.matmul_t(txt)?;
    let tau = model.temperature(p);

    let (s_m, target_tau) = match momentum {
        Some(store) => {
            let log_tau = store.get(model.layout.log_tau).data()[0];
            let (lo, hi) = crate::encoders::TAU_RANGE;
            (
                frozen_similarities(model, store, pairs)?,
                log_tau.exp().clamp(lo, hi),
            )
        }
        None => ((*s.value()).clone(), tau.item()),
    };
    let l_con = contrastive_loss(s, &s_m, tau, target_tau, config.soft_label_mix)?;

    let tape = p.tape();
    let l_mat = if config.w2 > 0.0 {
        let (neg_text, neg_image) = sample_negatives(&s.value(), config.hard_negative, rng)?;
        let mut pos = Vec::with_capacity(n);
        let mut neg = Vec::with_capacity(2 * n);
        for i in 0..n {
            let joint = |img: usize, txt: usize| -> Result<Var<'t>, ObjectiveError> {
                let f = model.encode_multimodal(
                    p,
                    pairs[txt].caption_ids,
                    pairs[txt].knowledge_ids,
                    image_tokens[img],
                )?;
                Ok(model.match_head(p, f)?)
            };
            pos.push(joint(i, i)?);
            neg.push(joint(i, neg_text[i])?);
            neg.push(joint(neg_image[i], i)?);
        }
        itm_loss_var(Var::concat_rows(&pos)?, Var::concat_rows(&neg)?)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let contrastive = l_con.item();
    let matching = l_mat.item();
    let total = l_con.scale(config.w1).add(l_mat.scale(config.w2))?;
    Ok(BatchLoss {
        total,
        contrastive,
        matching,
    })
}
