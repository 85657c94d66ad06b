use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sentence::triplet_to_sentence;
use super::vocab::tokenize;
use super::TextError;
use crate::kg::Triplet;

/// How to pick `m` triplets when more are available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Seeded shuffle, then the first `m`.
    Random { seed: u64 },
    /// The `m` triplets least similar to the caption.
    RelevanceToCaption,
    /// A seeded random first pick, then the `m − 1` triplets least similar to it.
    DiversityAmongTriplets { seed: u64 },
}

impl SelectionStrategy {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Self::Random { .. } => Self::Random { seed },
            Self::DiversityAmongTriplets { .. } => Self::DiversityAmongTriplets { seed },
            Self::RelevanceToCaption => Self::RelevanceToCaption,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Self::Random { .. })
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random { .. } => "random",
            Self::RelevanceToCaption => "relevance",
            Self::DiversityAmongTriplets { .. } => "diversity",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    /// Parses `random`, `relevance` or `diversity`; seeds default to 0 and
    /// are set with [`SelectionStrategy::with_seed`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random { seed: 0 }),
            "relevance" | "relevance_to_caption" => Ok(Self::RelevanceToCaption),
            "diversity" | "diversity_among_triplets" => {
                Ok(Self::DiversityAmongTriplets { seed: 0 })
            }
            other => Err(format!("unknown selection strategy {other:?}")),
        }
    }
}

/// Jaccard overlap of two token sets.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = tokenize(a).into_iter().collect();
    let sb: HashSet<String> = tokenize(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of `candidates` sorted by ascending similarity, ties in input order.
fn least_similar(candidates: &[Triplet], reference: &str) -> Vec<usize> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|t| token_jaccard(&triplet_to_sentence(t), reference))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Picks at most `m` candidates.
///
/// With `m` or fewer candidates the input is returned unchanged. `stream`
/// separates the random draws of different captions (and epochs) under one
/// seed.
pub fn select_triplets(
    candidates: &[Triplet],
    m: usize,
    strategy: SelectionStrategy,
    caption: &str,
    stream: u64,
) -> Result<Vec<Triplet>, TextError> {
    if m == 0 {
        return Err(TextError::InvalidM);
    }
    if candidates.len() <= m {
        return Ok(candidates.to_vec());
    }
    let picked: Vec<usize> = match strategy {
        SelectionStrategy::Random { seed } => {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut rng_for(seed, stream));
            order.truncate(m);
            order
        }
        SelectionStrategy::RelevanceToCaption => {
            let mut order = least_similar(candidates, caption);
            order.truncate(m);
            order
        }
        SelectionStrategy::DiversityAmongTriplets { seed } => {
            let first = rng_for(seed, stream).random_range(0..candidates.len());
            let anchor = triplet_to_sentence(&candidates[first]);
            let rest: Vec<Triplet> = candidates
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != first)
                .map(|(_, t)| t.clone())
                .collect();
            let rest_index: Vec<usize> = (0..candidates.len()).filter(|&i| i != first).collect();
            let mut order = vec![first];
            order.extend(
                least_similar(&rest, &anchor)
                    .into_iter()
                    .take(m - 1)
                    .map(|i| rest_index[i]),
            );
            order
        }
    };
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}
