use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{cross_attention, Block, LayerNorm, Linear};
use super::{EncoderConfig, EncoderError, FusionMode, Pooling};
use crate::knowledge_text::{join_pair_ids, PAD};
use crate::tensor_ad::{checkpoint, Binding, ParamId, ParamStore, Tensor, Var};

/// Lower and upper bound on the learned temperature.
pub const TAU_RANGE: (f64, f64) = (0.001, 0.5);
pub const TAU_INIT: f64 = 0.07;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct ImageTower {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

/// One trunk for both text modes; cross-attention sub-blocks only run when
/// image tokens are supplied.
#[derive(Clone, Debug)]
pub struct TextTower {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub query_map: ParamId,
    pub value_map: ParamId,
    /// `2·d_model → d_model`, applied to the two concatenated output rows.
    pub reduce: Linear,
}

/// Where every parameter lives in the [`ParamStore`]. A momentum copy built
/// by cloning the store shares this layout.
#[derive(Clone, Debug)]
pub struct Layout {
    pub image: ImageTower,
    pub text: TextTower,
    pub fusion: Fusion,
    pub fc_img: Linear,
    pub fc_text: Linear,
    pub fc_multi: Linear,
    pub log_tau: ParamId,
}

/// Outputs of the image encoder.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures<'t> {
    /// `1 × d_proj`, unit norm.
    pub feature: Var<'t>,
    /// `(n_patches + 1) × d_model`, CLS first.
    pub tokens: Var<'t>,
}

/// Outputs of the text encoder.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures<'t> {
    /// `1 × d_model`.
    pub pooled: Var<'t>,
    /// One row per non-PAD input token.
    pub tokens: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub layout: Layout,
    pub params: ParamStore,
}

impl EncoderConfig {
    /// Number of scalars in a model built from this config.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim();
        let image = Linear::count(self.patch_dim(), d)
            + d
            + (self.n_patches() + 1) * d
            + self.n_layers * Block::count(d, f, false)
            + 2 * d;
        let text = self.vocab_size * d
            + self.max_text_len * d
            + self.n_layers * Block::count(d, f, true)
            + 2 * d;
        let fusion = 2 * d * d + Linear::count(2 * d, d);
        let heads = 2 * Linear::count(d, self.d_proj) + Linear::count(d, 1) + 1;
        image + text + fusion + heads
    }
}

/// Splits `[H, W, C]` pixels into row-major patches, each flattened in
/// `(row, col, channel)` order and centred around zero.
pub fn patchify(pixels: &Tensor, config: &EncoderConfig) -> Result<Tensor, EncoderError> {
    let (s, c, p) = (config.image_size, config.channels, config.patch_size);
    if pixels.shape() != [s, s, c] {
        return Err(EncoderError::ShapeMismatch {
            what: "image",
            expected: vec![s, s, c],
            got: pixels.shape().to_vec(),
        });
    }
    let side = s / p;
    let data = pixels.data();
    let mut out = Vec::with_capacity(s * s * c);
    for py in 0..side {
        for px in 0..side {
            for y in py * p..(py + 1) * p {
                let start = (y * s + px * p) * c;
                out.extend(data[start..start + p * c].iter().map(|v| v - 0.5));
            }
        }
    }
    Ok(Tensor::matrix(side * side, p * p * c, out))
}

/// Trailing PADs are dropped; PADs elsewhere are masked out of attention.
fn strip_padding(ids: &[usize]) -> (&[usize], Option<Vec<bool>>) {
    let len = ids.iter().rposition(|&i| i != PAD).map_or(0, |i| i + 1);
    let kept = &ids[..len.max(1)];
    if kept.iter().all(|&i| i != PAD) {
        (kept, None)
    } else {
        let mask: Vec<bool> = kept.iter().map(|&i| i != PAD).collect();
        if mask.iter().any(|&m| m) {
            (kept, Some(mask))
        } else {
            // All padding: let the single PAD row attend to itself.
            (kept, None)
        }
    }
}

fn mean_rows<'t>(x: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>, EncoderError> {
    let n = x.value().rows();
    let weights: Vec<f64> = match mask {
        Some(m) => {
            let k = m.iter().filter(|&&b| b).count().max(1) as f64;
            m.iter().map(|&b| if b { 1.0 / k } else { 0.0 }).collect()
        }
        None => vec![1.0 / n as f64; n],
    };
    Ok(x.tape().constant(Tensor::matrix(1, n, weights)).matmul(x)?)
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f, h) = (config.d_model, config.ffn_dim(), config.n_heads);
        let s = &mut store;

        let image = ImageTower {
            patch_embed: Linear::new(s, "image.patch_embed", config.patch_dim(), d, &mut rng),
            cls: s.add("image.cls", Tensor::randn(&[1, d], EMBED_STD, &mut rng)),
            positions: s.add(
                "image.positions",
                Tensor::randn(&[config.n_patches() + 1, d], EMBED_STD, &mut rng),
            ),
            blocks: (0..config.n_layers)
                .map(|l| Block::new(s, &format!("image.block{l}"), d, h, f, false, &mut rng))
                .collect(),
            ln_final: LayerNorm::new(s, "image.ln_final", d),
        };
        let text = TextTower {
            tokens: s.add(
                "text.tokens",
                Tensor::randn(&[config.vocab_size, d], EMBED_STD, &mut rng),
            ),
            positions: s.add(
                "text.positions",
                Tensor::randn(&[config.max_text_len, d], EMBED_STD, &mut rng),
            ),
            blocks: (0..config.n_layers)
                .map(|l| Block::new(s, &format!("text.block{l}"), d, h, f, true, &mut rng))
                .collect(),
            ln_final: LayerNorm::new(s, "text.ln_final", d),
        };
        let map_std = (1.0 / d as f64).sqrt();
        let fusion = Fusion {
            query_map: s.add(
                "fusion.query_map",
                Tensor::randn(&[d, d], map_std, &mut rng),
            ),
            value_map: s.add(
                "fusion.value_map",
                Tensor::randn(&[d, d], map_std, &mut rng),
            ),
            reduce: Linear::new(s, "fusion.reduce", 2 * d, d, &mut rng),
        };
        let layout = Layout {
            image,
            text,
            fusion,
            fc_img: Linear::new(s, "head.fc_img", d, config.d_proj, &mut rng),
            fc_text: Linear::new(s, "head.fc_text", d, config.d_proj, &mut rng),
            fc_multi: Linear::new(s, "head.fc_multi", d, 1, &mut rng),
            log_tau: s.add("head.log_tau", Tensor::scalar(TAU_INIT.ln())),
        };
        Ok(Self {
            config,
            layout,
            params: store,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.config.fusion_mode
    }

    /// Current temperature, clamped to [`TAU_RANGE`].
    pub fn tau(&self) -> f64 {
        self.params.get(self.layout.log_tau).data()[0]
            .exp()
            .clamp(TAU_RANGE.0, TAU_RANGE.1)
    }

    /// Temperature as a tape value (gradient flows into `log τ` inside the range).
    pub fn temperature<'t>(&self, p: &Binding<'_, 't>) -> Var<'t> {
        p.get(self.layout.log_tau)
            .clamp(TAU_RANGE.0.ln(), TAU_RANGE.1.ln())
            .exp()
    }

    pub fn encode_image<'t>(
        &self,
        p: &Binding<'_, 't>,
        pixels: &Tensor,
    ) -> Result<ImageFeatures<'t>, EncoderError> {
        let tower = &self.layout.image;
        let patches = p.tape().constant(patchify(pixels, &self.config)?);
        let embedded = tower.patch_embed.forward(p, patches)?;
        let mut x = Var::concat_rows(&[p.get(tower.cls), embedded])?.add(p.get(tower.positions))?;
        for block in &tower.blocks {
            x = block.forward(p, x, None, None)?;
        }
        let tokens = tower.ln_final.forward(p, x)?;
        let feature = self
            .layout
            .fc_img
            .forward(p, tokens.slice_rows(0, 1)?)?
            .l2_normalize_rows();
        Ok(ImageFeatures { feature, tokens })
    }

    fn run_text<'t>(
        &self,
        p: &Binding<'_, 't>,
        ids: &[usize],
        image_tokens: Option<Var<'t>>,
    ) -> Result<TextFeatures<'t>, EncoderError> {
        let tower = &self.layout.text;
        if ids.is_empty() || ids.len() > self.config.max_text_len {
            return Err(EncoderError::ShapeMismatch {
                what: "token ids",
                expected: vec![self.config.max_text_len],
                got: vec![ids.len()],
            });
        }
        let (ids, mask) = strip_padding(ids);
        let positions = p.get(tower.positions).slice_rows(0, ids.len())?;
        let mut x = p.get(tower.tokens).embedding(ids)?.add(positions)?;
        for block in &tower.blocks {
            x = block.forward(p, x, mask.as_deref(), image_tokens)?;
        }
        let tokens = tower.ln_final.forward(p, x)?;
        let pooled = match self.config.pooling {
            Pooling::Cls => tokens.slice_rows(0, 1)?,
            Pooling::Mean => mean_rows(tokens, mask.as_deref())?,
        };
        Ok(TextFeatures { pooled, tokens })
    }

    /// Text-only mode: no image context.
    pub fn encode_text<'t>(
        &self,
        p: &Binding<'_, 't>,
        ids: &[usize],
    ) -> Result<TextFeatures<'t>, EncoderError> {
        self.run_text(p, ids, None)
    }

    /// Combines pooled caption and knowledge features into a unit text
    /// feature. Only the cross-attention mode reads `f_kwl`; the other modes
    /// project `f_cap` directly (for concat-only, `f_cap` should already come
    /// from the joined token stream, see [`Model::text_feature`]).
    pub fn fuse_text_knowledge<'t>(
        &self,
        p: &Binding<'_, 't>,
        f_cap: Var<'t>,
        f_kwl: Var<'t>,
    ) -> Result<Var<'t>, EncoderError> {
        let reduced = match self.config.fusion_mode {
            FusionMode::CrossAttention => {
                let fusion = &self.layout.fusion;
                let f1 = Var::concat_rows(&[f_cap, f_kwl])?;
                let f2 = Var::concat_rows(&[f_kwl, f_cap])?;
                let attended =
                    cross_attention(f1, f2, p.get(fusion.query_map), p.get(fusion.value_map))?;
                let joined = attended.reshape(&[1, 2 * self.config.d_model])?;
                fusion.reduce.forward(p, joined)?
            }
            FusionMode::ConcatOnly | FusionMode::NoKnowledge => f_cap,
        };
        Ok(self.layout.fc_text.forward(p, reduced)?.l2_normalize_rows())
    }

    /// Unit text feature for a caption and its knowledge sentence, following
    /// the configured fusion mode.
    pub fn text_feature<'t>(
        &self,
        p: &Binding<'_, 't>,
        caption_ids: &[usize],
        knowledge_ids: &[usize],
    ) -> Result<Var<'t>, EncoderError> {
        match self.config.fusion_mode {
            FusionMode::CrossAttention => {
                let f_cap = self.encode_text(p, caption_ids)?.pooled;
                let f_kwl = self.encode_text(p, knowledge_ids)?.pooled;
                self.fuse_text_knowledge(p, f_cap, f_kwl)
            }
            FusionMode::ConcatOnly => {
                let joined = join_pair_ids(caption_ids, knowledge_ids, self.config.max_text_len);
                let f = self.encode_text(p, &joined)?.pooled;
                self.fuse_text_knowledge(p, f, f)
            }
            FusionMode::NoKnowledge => {
                let f_cap = self.encode_text(p, caption_ids)?.pooled;
                self.fuse_text_knowledge(p, f_cap, f_cap)
            }
        }
    }

    /// Joint feature (`1 × d_model`): the text trunk over
    /// `[CLS] caption [SEP] knowledge [SEP]` with every layer attending to the
    /// image tokens. Without knowledge (`NoKnowledge` mode) only the caption
    /// is fed.
    pub fn encode_multimodal<'t>(
        &self,
        p: &Binding<'_, 't>,
        caption_ids: &[usize],
        knowledge_ids: &[usize],
        image_tokens: Var<'t>,
    ) -> Result<Var<'t>, EncoderError> {
        let d = self.config.d_model;
        if image_tokens.value().cols() != d {
            return Err(EncoderError::ShapeMismatch {
                what: "image tokens",
                expected: vec![image_tokens.value().rows(), d],
                got: image_tokens.shape(),
            });
        }
        let out = if self.config.fusion_mode.uses_knowledge() {
            let joined = join_pair_ids(caption_ids, knowledge_ids, self.config.max_text_len);
            self.run_text(p, &joined, Some(image_tokens))?
        } else {
            self.run_text(p, caption_ids, Some(image_tokens))?
        };
        Ok(out.tokens.slice_rows(0, 1)?)
    }

    /// Probability that the image and text behind `f_multi` belong together.
    pub fn match_head<'t>(
        &self,
        p: &Binding<'_, 't>,
        f_multi: Var<'t>,
    ) -> Result<Var<'t>, EncoderError> {
        Ok(self.layout.fc_multi.forward(p, f_multi)?.sigmoid())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        checkpoint::save(path.as_ref(), self.params.iter())?;
        Ok(())
    }

    /// Replaces the parameters with those stored at `path`; every parameter
    /// must be present with a matching shape.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let named = checkpoint::load(path.as_ref())?;
        self.params
            .load_named(named.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }
}

/// `copy ← λ·copy + (1−λ)·online`, elementwise over every parameter.
pub fn momentum_update(
    online: &ParamStore,
    copy: &mut ParamStore,
    lambda: f64,
) -> Result<(), EncoderError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EncoderError::InvalidArgument(format!(
            "momentum coefficient {lambda} outside [0, 1]"
        )));
    }
    if online.len() != copy.len() {
        return Err(EncoderError::InvalidArgument(
            "momentum copy has a different layout".into(),
        ));
    }
    for id in online.ids() {
        let src = online.get(id);
        if src.shape() != copy.get(id).shape() {
            return Err(EncoderError::ShapeMismatch {
                what: "momentum parameter",
                expected: src.shape().to_vec(),
                got: copy.get(id).shape().to_vec(),
            });
        }
        if lambda == 1.0 {
            continue;
        }
        let dst = copy.get_mut(id);
        for (c, &o) in dst.data_mut().iter_mut().zip(src.data()) {
            *c = lambda * *c + (1.0 - lambda) * o;
        }
    }
    Ok(())
}
