//! Helpers shared by the integration tests: finite-difference checks,
//! brute-force ranking oracles and small model configs.
#![allow(dead_code)]

use std::path::Path;

use kgret::data_synth::SynthConfig;
use kgret::encoders::{EncoderConfig, FusionMode, Pooling};
use kgret::pipeline::{self, RunConfig};
use kgret::tensor_ad::{Tape, Tensor, Var};
use rand::Rng;

/// Step of the fourth-order central difference. With the two-point formula
/// the softmax-over-cosine losses show h²-scaled truncation error well above
/// 1e-4 relative; the fourth-order stencil brings truncation below rounding
/// (≈ ε·|f|/h ≈ 1e-11).
pub const FD_STEP: f64 = 1e-4;

/// `f′(0)` from `f(±h)` and `f(±2h)`, error O(h⁴).
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Gradients smaller than this count as zero when forming a relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Fixed, shape-dependent weights so that `sum(w ⊙ y)` has a non-trivial
/// gradient even where `sum(y)` is constant (softmax, normalisation).
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (1.3 * i as f64 + 0.7).sin() + 0.25)
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any output to a scalar through [`probe_weights`].
pub fn probe<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let w = tape.constant(probe_weights(&y.shape()));
    y.mul(w).unwrap().sum()
}

/// Worst relative error between the tape gradient and central differences,
/// over every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    let grads = out.backward().unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.var(x.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            let numeric = central_difference(|dx| {
                xs[i].data_mut()[k] = orig + dx;
                eval(&xs)
            });
            xs[i].data_mut()[k] = orig;
            worst = worst.max(rel_err(analytic[i].data()[k], numeric));
        }
    }
    worst
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Candidate order by full sort: descending score, lower index first on ties.
pub fn oracle_rank(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps index order among equal scores.
    idx.sort_by(|&a, &b| {
        let (x, y) = (row[a], row[b]);
        y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Percentage of rows whose top-`k` contains any of their targets.
pub fn oracle_recall(scores: &Tensor, truth: &[Vec<usize>], k: usize) -> f64 {
    let hits = (0..scores.rows())
        .filter(|&i| {
            let top = oracle_rank(scores.row(i));
            top.iter().take(k).any(|c| truth[i].contains(c))
        })
        .count();
    100.0 * hits as f64 / scores.rows() as f64
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(vocab_size: usize, fusion_mode: FusionMode) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_proj: 4,
        image_size: 8,
        channels: 3,
        patch_size: 4,
        max_text_len: 12,
        vocab_size,
        ffn_mult: 2,
        fusion_mode,
        pooling: Pooling::Cls,
    }
}

/// Writes a synthetic corpus of `n` images.
pub fn write_corpus(dir: &Path, n: usize, seed: u64) {
    let synth = SynthConfig {
        n_images: n,
        seed,
        ..SynthConfig::default()
    };
    pipeline::cmd_gen_data(dir, &synth).unwrap();
}

/// Run settings for a quick smoke run on a small corpus.
pub fn quick_run(data: &Path, out: &Path) -> RunConfig {
    RunConfig {
        data_dir: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        epochs: 1,
        batch: 8,
        max_steps: Some(2),
        ..RunConfig::default()
    }
}
