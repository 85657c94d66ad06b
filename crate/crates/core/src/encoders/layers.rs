//! Parameter layouts and forward passes of the building blocks.

use rand::Rng;

use crate::tensor_ad::{Binding, ParamId, ParamStore, Tensor, TensorError, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Xavier-normal standard deviation.
fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in × out`, applied as `x · w + b`.
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(&[d_in, d_out], xavier(d_in, d_out), rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'_, 't>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(p.get(self.w))?.add_row(p.get(self.b))
    }

    pub(crate) fn count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'_, 't>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            n_heads,
        }
    }

    /// `queries` attend over `keys`; `key_mask[j] == false` hides key `j`.
    pub fn forward<'t>(
        &self,
        p: &Binding<'_, 't>,
        queries: Var<'t>,
        keys: Var<'t>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'t>, TensorError> {
        let q = self.q.forward(p, queries)?;
        let k = self.k.forward(p, keys)?;
        let v = self.v.forward(p, keys)?;
        let d = q.value().cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    q.slice_cols(h * dh, dh)?,
                    k.slice_cols(h * dh, dh)?,
                    v.slice_cols(h * dh, dh)?,
                )
            };
            let scores = qh.matmul_t(kh)?.scale(scale);
            let weights = match key_mask {
                Some(mask) => scores.softmax_masked(mask)?,
                None => scores.softmax(),
            };
            heads.push(weights.matmul(vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)?
        };
        self.out.forward(p, joined)
    }

    pub(crate) fn count(d: usize) -> usize {
        4 * Linear::count(d, d)
    }
}

/// Pre-norm transformer layer with an optional cross-attention sub-block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl Block {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        ffn: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), d);
        let self_attn = Attention::new(store, &format!("{name}.self_attn"), d, n_heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                Attention::new(store, &format!("{name}.cross_attn"), d, n_heads, rng),
            )
        });
        Self {
            ln_self,
            self_attn,
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn, d, rng),
        }
    }

    /// `context`, when given, is attended to by the cross-attention
    /// sub-block; without it that sub-block is skipped.
    pub fn forward<'t>(
        &self,
        p: &Binding<'_, 't>,
        x: Var<'t>,
        mask: Option<&[bool]>,
        context: Option<Var<'t>>,
    ) -> Result<Var<'t>, TensorError> {
        let h = self.ln_self.forward(p, x)?;
        let mut x = x.add(self.self_attn.forward(p, h, h, mask)?)?;
        if let (Some((ln, attn)), Some(ctx)) = (&self.cross, context) {
            let h = ln.forward(p, x)?;
            x = x.add(attn.forward(p, h, ctx, None)?)?;
        }
        let h = self.ln_ffn.forward(p, x)?;
        let h = self.ffn_out.forward(p, self.ffn_in.forward(p, h)?.gelu())?;
        x.add(h)
    }

    pub(crate) fn count(d: usize, ffn: usize, with_cross: bool) -> usize {
        let base = 2 * 2 * d + Attention::count(d) + Linear::count(d, ffn) + Linear::count(ffn, d);
        if with_cross {
            base + 2 * d + Attention::count(d)
        } else {
            base
        }
    }
}

/// Single-head attention between two feature sequences, each key row first
/// mapped through `value_map`:
/// `softmax((f1·query_map)(f2·value_map)ᵀ / √d) · (f2·value_map)`.
pub fn cross_attention<'t>(
    f1: Var<'t>,
    f2: Var<'t>,
    query_map: Var<'t>,
    value_map: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let q = f1.matmul(query_map)?;
    let kv = f2.matmul(value_map)?;
    let d = f1.value().cols();
    q.matmul_t(kv)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax()
        .matmul(kv)
}
