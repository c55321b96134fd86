//! Vision-transformer feature extractor: patch embedding, classification and
//! positional embeddings, a stack of pre-norm transformer blocks, and access
//! to every block's token matrix.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Identity count of the recognition (ArcFace) head used in training.
    pub num_identities: usize,
    pub pad_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale config: 32×32 grayscale, 8-pixel patches, 6 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_identities: 160,
            pad_hidden_dim: 64,
        }
    }

    /// The small ViT variant at 224×224×3 with 16-pixel patches.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            num_identities: 1000,
            pad_hidden_dim: 384,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_identities", self.num_identities),
            ("pad_hidden_dim", self.pad_hidden_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be >= 1"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("image size {} not divisible by {}", self.image_size, self.patch_size),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Index (1-based) of the block whose PAD head is used at inference:
    /// the middle of the network, `⌈depth/2⌉`.
    pub fn default_pad_layer(&self) -> usize {
        self.depth.div_ceil(2).max(1)
    }
}

/// Learnable scalars in one transformer block.
pub fn block_param_count(c: &ModelConfig) -> usize {
    let d = c.embed_dim;
    let h = c.mlp_hidden();
    2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
}

/// Learnable scalars of the backbone and recognition path: patch embedding,
/// classification token, positional embeddings, all blocks and the final
/// layer norm. Task heads are counted separately.
pub fn param_count(c: &ModelConfig) -> usize {
    let d = c.embed_dim;
    let embed = c.patch_dim() * d + d + d + c.seq_len() * d;
    embed + c.depth * block_param_count(c) + 2 * d
}

/// Walks every tensor of a weight structure together with its name.
pub trait VisitWeights<W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a W));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut W));
}

macro_rules! weights_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $label:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<W> {
            $(pub $field: W,)*
        }

        impl<W> VisitWeights<W> for $name<W> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a W)) {
                $(f(format!("{prefix}{}", $label), &self.$field);)*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut W)) {
                $(f(format!("{prefix}{}", $label), &mut self.$field);)*
            }
        }

        impl<W> $name<W> {
            pub fn try_map<U>(&self, f: &mut impl FnMut(&W) -> Result<U>) -> Result<$name<U>> {
                Ok($name { $($field: f(&self.$field)?,)* })
            }
        }
    };
}

pub(crate) use weights_struct;

weights_struct!(
    /// One pre-norm transformer block.
    BlockWeights {
        ln1_gamma: "norm1.weight",
        ln1_beta: "norm1.bias",
        qkv_weight: "attn.qkv.weight",
        qkv_bias: "attn.qkv.bias",
        proj_weight: "attn.proj.weight",
        proj_bias: "attn.proj.bias",
        ln2_gamma: "norm2.weight",
        ln2_beta: "norm2.bias",
        fc1_weight: "mlp.fc1.weight",
        fc1_bias: "mlp.fc1.bias",
        fc2_weight: "mlp.fc2.weight",
        fc2_bias: "mlp.fc2.bias",
    }
);

weights_struct!(
    /// The non-block parameters of the backbone.
    EmbedWeights {
        patch_weight: "patch_embed.weight",
        patch_bias: "patch_embed.bias",
        cls_token: "cls_token",
        pos_embed: "pos_embed",
        norm_gamma: "norm.weight",
        norm_beta: "norm.bias",
    }
);

/// All backbone weights. Linear layers store `in × out` matrices so a row of
/// tokens multiplies on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<W> {
    pub embed: EmbedWeights<W>,
    pub blocks: Vec<BlockWeights<W>>,
}

pub type BackboneParams<T> = BackboneWeights<Tensor<T>>;

impl<W> VisitWeights<W> for BackboneWeights<W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a W)) {
        self.embed.visit(prefix, f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}."), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut W)) {
        self.embed.visit_mut(prefix, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}."), f);
        }
    }
}

impl<W> BackboneWeights<W> {
    pub fn try_map<U>(&self, f: &mut impl FnMut(&W) -> Result<U>) -> Result<BackboneWeights<U>> {
        Ok(BackboneWeights {
            embed: self.embed.try_map(f)?,
            blocks: self.blocks.iter().map(|b| b.try_map(f)).collect::<Result<_>>()?,
        })
    }
}

/// Uniform `±1/√fan_in` weights with zero bias.
pub(crate) fn linear_init<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new([fan_in, fan_out], data).expect("linear shape")
}

pub(crate) fn normal_init<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

impl<T: Real> BackboneParams<T> {
    /// Fresh weights: uniform linear layers, unit layer norms, and N(0, 0.02²)
    /// classification and positional embeddings.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        let embed = EmbedWeights {
            patch_weight: linear_init(rng, config.patch_dim(), d),
            patch_bias: Tensor::zeros([d]),
            cls_token: normal_init(rng, &[1, d], 0.02),
            pos_embed: normal_init(rng, &[config.seq_len(), d], 0.02),
            norm_gamma: Tensor::ones([d]),
            norm_beta: Tensor::zeros([d]),
        };
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1_gamma: Tensor::ones([d]),
                ln1_beta: Tensor::zeros([d]),
                qkv_weight: linear_init(rng, d, 3 * d),
                qkv_bias: Tensor::zeros([3 * d]),
                proj_weight: linear_init(rng, d, d),
                proj_bias: Tensor::zeros([d]),
                ln2_gamma: Tensor::ones([d]),
                ln2_beta: Tensor::zeros([d]),
                fc1_weight: linear_init(rng, d, h),
                fc1_bias: Tensor::zeros([h]),
                fc2_weight: linear_init(rng, h, d),
                fc2_bias: Tensor::zeros([d]),
            })
            .collect();
        Self { embed, blocks }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        self.try_map(&mut |t| Ok(t.cast())).expect("cast is infallible")
    }

    /// Puts every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BackboneWeights<Var> {
        self.try_map(&mut |t| Ok(if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }))
            .expect("binding is infallible")
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let mut want = Vec::new();
        backbone_shapes(config).visit("", &mut |n, s| want.push((n, s.clone())));
        let mut got = Vec::new();
        self.visit("", &mut |n, t| got.push((n, t.shape().to_vec())));
        if want != got {
            return Err(Error::shape(format!(
                "backbone weights do not match config (expected {} tensors, got {})",
                want.len(),
                got.len()
            )));
        }
        Ok(())
    }
}

/// Tensor shapes implied by a config.
pub fn backbone_shapes(config: &ModelConfig) -> BackboneWeights<Vec<usize>> {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    BackboneWeights {
        embed: EmbedWeights {
            patch_weight: vec![config.patch_dim(), d],
            patch_bias: vec![d],
            cls_token: vec![1, d],
            pos_embed: vec![config.seq_len(), d],
            norm_gamma: vec![d],
            norm_beta: vec![d],
        },
        blocks: (0..config.depth)
            .map(|_| BlockWeights {
                ln1_gamma: vec![d],
                ln1_beta: vec![d],
                qkv_weight: vec![d, 3 * d],
                qkv_bias: vec![3 * d],
                proj_weight: vec![d, d],
                proj_bias: vec![d],
                ln2_gamma: vec![d],
                ln2_beta: vec![d],
                fc1_weight: vec![d, h],
                fc1_bias: vec![h],
                fc2_weight: vec![h, d],
                fc2_bias: vec![d],
            })
            .collect(),
    }
}

/// Splits an image into non-overlapping `ps × ps` patches in raster order.
///
/// Each row holds one patch flattened channel-major, then row, then column.
pub fn patchify<T: Real>(image: &Image, patch_size: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (image.channels, image.height, image.width);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {h}×{w} is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let len = c * patch_size * patch_size;
    let mut out = Vec::with_capacity(gh * gw * len);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch_size {
                    let row = (ch * h + py * patch_size + y) * w + px * patch_size;
                    out.extend(image.pixels[row..row + patch_size].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
    }
    Tensor::new([gh * gw, len], out)
}

/// Patches for a batch of images, stacked as `(batch·P) × patch_dim`.
///
/// Single-channel images are replicated across channels when the config
/// expects more than one.
pub fn patchify_batch<T: Real>(config: &ModelConfig, images: &[&Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let mut data = Vec::new();
    for img in images {
        if img.height != config.image_size || img.width != config.image_size {
            return Err(Error::shape(format!(
                "image {}×{} does not match configured size {}",
                img.height, img.width, config.image_size
            )));
        }
        let owned;
        let img = if img.channels == config.channels {
            *img
        } else if img.channels == 1 {
            owned = img.replicate_channels(config.channels);
            &owned
        } else {
            return Err(Error::shape(format!(
                "image has {} channels, config expects {}",
                img.channels, config.channels
            )));
        };
        data.extend(patchify::<T>(img, config.patch_size)?.into_data());
    }
    Tensor::new([images.len() * config.num_patches(), config.patch_dim()], data)
}

/// Projects patches and assembles the `(batch·(1+P)) × d` token matrix.
pub fn embed_sequence<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    w: &EmbedWeights<Var>,
    batch: usize,
) -> Result<Var> {
    if g.shape(patches)[1] != g.shape(w.patch_weight)[0] {
        return Err(Error::shape(format!(
            "patch length {} does not match projection input {}",
            g.shape(patches)[1],
            g.shape(w.patch_weight)[0]
        )));
    }
    let proj = g.matmul(patches, w.patch_weight)?;
    let proj = g.add_bias(proj, w.patch_bias)?;
    g.tokens(proj, w.cls_token, w.pos_embed, batch)
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_bias(y, bias)
}

/// Output of a transformer block together with its attention node.
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Var,
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockWeights<Var>,
    seq_len: usize,
    heads: usize,
) -> Result<BlockOutput> {
    let eps = T::of(LAYER_NORM_EPS);
    let h = g.layer_norm(x, w.ln1_gamma, w.ln1_beta, eps)?;
    let qkv = linear(g, h, w.qkv_weight, w.qkv_bias)?;
    let attention = g.attention(qkv, seq_len, heads)?;
    let a = linear(g, attention, w.proj_weight, w.proj_bias)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, w.ln2_gamma, w.ln2_beta, eps)?;
    let h = linear(g, h, w.fc1_weight, w.fc1_bias)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, w.fc2_weight, w.fc2_bias)?;
    let tokens = g.add(x, h)?;
    Ok(BlockOutput { tokens, attention })
}

/// Graph nodes produced by [`forward_features`].
#[derive(Clone, Debug)]
pub struct FeatureVars {
    /// Token matrix after each block, `(batch·seq_len) × d`.
    pub layers: Vec<Var>,
    /// Final classification embeddings, `batch × d`.
    pub cls: Var,
    pub batch: usize,
    pub seq_len: usize,
}

/// Runs the backbone on a batch, recording the tokens after every block.
pub fn forward_features<T: Real>(
    g: &mut Graph<T>,
    w: &BackboneWeights<Var>,
    config: &ModelConfig,
    images: &[&Image],
) -> Result<FeatureVars> {
    let patches = patchify_batch::<T>(config, images)?;
    let patches = g.constant(patches);
    forward_patches(g, w, config, patches, images.len())
}

pub fn forward_patches<T: Real>(
    g: &mut Graph<T>,
    w: &BackboneWeights<Var>,
    config: &ModelConfig,
    patches: Var,
    batch: usize,
) -> Result<FeatureVars> {
    let seq_len = config.seq_len();
    let mut x = embed_sequence(g, patches, &w.embed, batch)?;
    let mut layers = Vec::with_capacity(w.blocks.len());
    for block in &w.blocks {
        x = transformer_block(g, x, block, seq_len, config.heads)?.tokens;
        layers.push(x);
    }
    let rows: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
    let cls = g.gather_rows(x, &rows)?;
    let cls = g.layer_norm(cls, w.embed.norm_gamma, w.embed.norm_beta, T::of(LAYER_NORM_EPS))?;
    Ok(FeatureVars { layers, cls, batch, seq_len })
}

/// Per-layer tokens and the final classification embedding of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub layers: Vec<Tensor<T>>,
    pub cls_embedding: Tensor<T>,
}

/// Convenience wrapper of [`forward_features`] for a single image.
pub fn extract_features<T: Real>(
    params: &BackboneParams<T>,
    config: &ModelConfig,
    image: &Image,
) -> Result<FeatureBundle<T>> {
    let mut g = Graph::new();
    let w = params.bind(&mut g, false);
    let f = forward_features(&mut g, &w, config, &[image])?;
    Ok(FeatureBundle {
        layers: f.layers.iter().map(|&v| g.value(v).clone()).collect(),
        cls_embedding: g.value(f.cls).clone().reshape([config.embed_dim])?,
    })
}
