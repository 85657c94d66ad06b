//! Scoring, ranking and recall metrics for bidirectional retrieval.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderError, Model};
use crate::tensor_ad::{Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("query {0} has no correct candidate")]
    MissingGroundTruth(usize),
    #[error("expected six recall values, got {0}")]
    WrongArity(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Queries × candidates dot products of unit feature rows.
pub fn similarity_scores(text_feats: &Tensor, image_feats: &Tensor) -> Result<Tensor, EvalError> {
    if text_feats.cols() != image_feats.cols() {
        return Err(EvalError::ShapeMismatch(format!(
            "feature widths {} and {}",
            text_feats.cols(),
            image_feats.cols()
        )));
    }
    let mut s = Tensor::zeros(&[text_feats.rows(), image_feats.rows()]);
    for i in 0..text_feats.rows() {
        let q = text_feats.row(i);
        for (j, v) in s.row_mut(i).iter_mut().enumerate() {
            *v = q.iter().zip(image_feats.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    Ok(s)
}

/// Matching probabilities, possibly only for a shortlist of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchScores {
    rows: usize,
    cols: usize,
    values: Vec<Option<f64>>,
}

impl MatchScores {
    pub fn dense(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            values: t.data().iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.cols + j]
    }

    pub fn computed_in_row(&self, i: usize) -> usize {
        self.values[i * self.cols..(i + 1) * self.cols]
            .iter()
            .flatten()
            .count()
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![None; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Candidate order of one score row: descending, ties toward the lower index.
pub fn rank_row(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| compare_desc(row[a], row[b]).then(a.cmp(&b)));
    order
}

fn compare_desc(a: f64, b: f64) -> Ordering {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    key(b).total_cmp(&key(a))
}

/// Scores every (query, candidate) pair with `score`, or only each row's
/// `top_k` candidates under `sim` when set.
pub fn matching_scores<F>(sim: &Tensor, top_k: Option<usize>, score: F) -> MatchScores
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let (rows, cols) = (sim.rows(), sim.cols());
    let values: Vec<Option<f64>> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut row = vec![None; cols];
            let chosen: Vec<usize> = match top_k {
                Some(k) if k < cols => rank_row(sim.row(i)).into_iter().take(k).collect(),
                _ => (0..cols).collect(),
            };
            for j in chosen {
                row[j] = Some(score(i, j));
            }
            row
        })
        .collect();
    MatchScores { rows, cols, values }
}

/// `S_sim + S_mat`; pairs without a matching score rank last (−∞).
pub fn final_scores(sim: &Tensor, mat: &MatchScores) -> Result<Tensor, EvalError> {
    if sim.shape() != mat.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "similarities {:?} vs matching scores {:?}",
            sim.shape(),
            mat.shape()
        )));
    }
    let data = sim
        .data()
        .iter()
        .zip(&mat.values)
        .map(|(&s, m)| m.map_or(f64::NEG_INFINITY, |m| s + m))
        .collect();
    Ok(Tensor::matrix(mat.rows, mat.cols, data))
}

/// Percentage of queries with a correct candidate among the top `k`.
pub fn recall_at_k(
    scores: &Tensor,
    ground_truth: &[Vec<usize>],
    k: usize,
) -> Result<f64, EvalError> {
    let q = scores.rows();
    if ground_truth.len() != q {
        return Err(EvalError::ShapeMismatch(format!(
            "{} queries but {} ground-truth sets",
            q,
            ground_truth.len()
        )));
    }
    if q == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, truth) in ground_truth.iter().enumerate() {
        if truth.is_empty() {
            return Err(EvalError::MissingGroundTruth(i));
        }
        let row = scores.row(i);
        // Position of a candidate = how many others sort before it.
        let best = truth
            .iter()
            .map(|&c| {
                (0..row.len())
                    .filter(|&j| {
                        j != c && compare_desc(row[j], row[c]).then(j.cmp(&c)) == Ordering::Less
                    })
                    .count()
            })
            .min()
            .unwrap_or(usize::MAX);
        if best < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / q as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    #[serde(rename = "mR_t2i")]
    pub mr_t2i: f64,
    #[serde(rename = "mR_i2t")]
    pub mr_i2t: f64,
    #[serde(rename = "mR")]
    pub mr: f64,
}

/// Mean of the three text→image values, of the three image→text values,
/// and of all six, in that order. Input order: t2i R@1/5/10, i2t R@1/5/10.
pub fn mean_recall(values: &[f64]) -> Result<(f64, f64, f64), EvalError> {
    if values.len() != 6 {
        return Err(EvalError::WrongArity(values.len()));
    }
    let t2i = values[..3].iter().sum::<f64>() / 3.0;
    let i2t = values[3..].iter().sum::<f64>() / 3.0;
    let all = values.iter().sum::<f64>() / 6.0;
    Ok((t2i, i2t, all))
}

impl RetrievalMetrics {
    pub fn from_recalls(t2i: [f64; 3], i2t: [f64; 3]) -> Self {
        let six = [t2i[0], t2i[1], t2i[2], i2t[0], i2t[1], i2t[2]];
        let (mr_t2i, mr_i2t, mr) = mean_recall(&six).expect("six values");
        Self {
            r1_t2i: t2i[0],
            r5_t2i: t2i[1],
            r10_t2i: t2i[2],
            r1_i2t: i2t[0],
            r5_i2t: i2t[1],
            r10_i2t: i2t[2],
            mr_t2i,
            mr_i2t,
            mr,
        }
    }

    /// Recalls at 1, 5 and 10 in both directions.
    ///
    /// `t2i` is texts × images and `image_of_text[t]` the image captioned by
    /// text `t`; an image query counts as a hit when any of its captions is
    /// retrieved.
    pub fn compute(t2i: &Tensor, i2t: &Tensor, image_of_text: &[usize]) -> Result<Self, EvalError> {
        let n_images = t2i.cols();
        if i2t.shape() != [n_images, t2i.rows()] || image_of_text.len() != t2i.rows() {
            return Err(EvalError::ShapeMismatch("score matrices disagree".into()));
        }
        let text_truth: Vec<Vec<usize>> = image_of_text.iter().map(|&img| vec![img]).collect();
        let mut image_truth = vec![Vec::new(); n_images];
        for (t, &img) in image_of_text.iter().enumerate() {
            image_truth
                .get_mut(img)
                .ok_or_else(|| {
                    EvalError::ShapeMismatch(format!("text {t} points at missing image {img}"))
                })?
                .push(t);
        }
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for (slot, k) in [1, 5, 10].into_iter().enumerate() {
            a[slot] = recall_at_k(t2i, &text_truth, k)?;
            b[slot] = recall_at_k(i2t, &image_truth, k)?;
        }
        Ok(Self::from_recalls(a, b))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Header of column labels, then one labelled row per query, 4 decimals.
pub fn export_similarity_csv(
    scores: &Tensor,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<(), EvalError> {
    if row_labels.len() != scores.rows() || col_labels.len() != scores.cols() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} row / {} column labels for a {:?} matrix",
            row_labels.len(),
            col_labels.len(),
            scores.shape()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let header: Vec<String> = std::iter::once(String::new())
        .chain(col_labels.iter().map(|l| quote(l)))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, label) in row_labels.iter().enumerate() {
        let cells: Vec<String> = scores.row(i).iter().map(|v| format!("{v:.4}")).collect();
        writeln!(w, "{},{}", quote(label), cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a matrix written by [`export_similarity_csv`], labels dropped.
/// Labels must not contain commas.
pub fn read_similarity_csv(path: &Path) -> Result<Tensor, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let row: Result<Vec<f64>, _> = line.split(',').skip(1).map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| EvalError::ShapeMismatch(format!("bad cell: {e}")))?);
    }
    Tensor::from_rows(&rows).map_err(|e| EvalError::ShapeMismatch(e.to_string()))
}

/// Test-time features of a corpus: one row per image and per text, and the
/// image token sequences for the matching head.
pub struct EncodedCorpus {
    pub image_feats: Tensor,
    pub text_feats: Tensor,
    pub image_tokens: Vec<Arc<Tensor>>,
}

/// A caption and its knowledge sentence as token ids.
#[derive(Clone, Debug)]
pub struct TextItem {
    pub caption_ids: Vec<usize>,
    pub knowledge_ids: Vec<usize>,
}

fn stack(rows: Vec<Tensor>, width: usize) -> Tensor {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * width);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(n, width, data)
}

pub fn encode_corpus(
    model: &Model,
    images: &[Tensor],
    texts: &[TextItem],
) -> Result<EncodedCorpus, EvalError> {
    let image_out: Result<Vec<(Tensor, Arc<Tensor>)>, EncoderError> = images
        .par_iter()
        .map(|px| {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let f = model.encode_image(&p, px)?;
            Ok(((*f.feature.value()).clone(), f.tokens.value()))
        })
        .collect();
    let (feats, image_tokens): (Vec<_>, Vec<_>) = image_out?.into_iter().unzip();
    let text_feats: Result<Vec<Tensor>, EncoderError> = texts
        .par_iter()
        .map(|t| {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            Ok((*model
                .text_feature(&p, &t.caption_ids, &t.knowledge_ids)?
                .value())
            .clone())
        })
        .collect();
    let d = model.config.d_proj;
    Ok(EncodedCorpus {
        image_feats: stack(feats, d),
        text_feats: stack(text_feats?, d),
        image_tokens,
    })
}

/// Probability from the matching head for one text and one encoded image.
pub fn match_probability(
    model: &Model,
    text: &TextItem,
    image_tokens: &Arc<Tensor>,
) -> Result<f64, EncoderError> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let tokens = tape.constant_shared(Arc::clone(image_tokens));
    let f = model.encode_multimodal(&p, &text.caption_ids, &text.knowledge_ids, tokens)?;
    Ok(model.match_head(&p, f)?.item())
}

/// Both score matrices for a corpus: `(t2i, i2t)`, each already the sum of
/// similarity and matching probability.
pub fn score_corpus(
    model: &Model,
    corpus: &EncodedCorpus,
    texts: &[TextItem],
    top_k: Option<usize>,
) -> Result<(Tensor, Tensor), EvalError> {
    let sim_t2i = similarity_scores(&corpus.text_feats, &corpus.image_feats)?;
    let sim_i2t = sim_t2i.transpose();
    let prob = |t: usize, i: usize| {
        match_probability(model, &texts[t], &corpus.image_tokens[i]).unwrap_or(f64::NAN)
    };
    let (mat_t2i, mat_i2t) = match top_k {
        None => {
            let dense = matching_scores(&sim_t2i, None, prob);
            let back = dense.transpose();
            (dense, back)
        }
        Some(k) => (
            matching_scores(&sim_t2i, Some(k), prob),
            matching_scores(&sim_i2t, Some(k), |i, t| prob(t, i)),
        ),
    };
    if mat_t2i.values.iter().flatten().any(|v| v.is_nan()) {
        return Err(EvalError::ShapeMismatch(
            "matching head failed on a pair".into(),
        ));
    }
    Ok((
        final_scores(&sim_t2i, &mat_t2i)?,
        final_scores(&sim_i2t, &mat_i2t)?,
    ))
}
