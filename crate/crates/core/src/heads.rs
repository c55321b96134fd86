//! Task heads and losses: per-block PAD classifiers, the ArcFace recognition
//! head, distillation loss, and cosine match scoring.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{linear_init, normal_init, weights_struct, ModelConfig, VisitWeights};

/// Index of the bona fide logit in a PAD head output.
pub const BONA_FIDE: usize = 0;
/// Index of the attack logit in a PAD head output.
pub const ATTACK: usize = 1;

weights_struct!(
    /// Two affine layers `d → hidden → 2` with GELU in between.
    PadHeadWeights {
        fc1_weight: "fc1.weight",
        fc1_bias: "fc1.bias",
        fc2_weight: "fc2.weight",
        fc2_bias: "fc2.bias",
    }
);

/// One PAD head per transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct PadHeads<W> {
    pub heads: Vec<PadHeadWeights<W>>,
}

pub type PadHeadParams<T> = PadHeads<Tensor<T>>;

impl<W> VisitWeights<W> for PadHeads<W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a W)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut W)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}{i}."), f);
        }
    }
}

impl<W> PadHeads<W> {
    pub fn try_map<U>(&self, f: &mut impl FnMut(&W) -> Result<U>) -> Result<PadHeads<U>> {
        Ok(PadHeads { heads: self.heads.iter().map(|h| h.try_map(f)).collect::<Result<_>>()? })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head for 1-based block index `layer`.
    pub fn layer(&self, layer: usize) -> Result<&PadHeadWeights<W>> {
        if layer == 0 || layer > self.heads.len() {
            return Err(Error::invalid(format!(
                "PAD layer {layer} out of range 1..={}",
                self.heads.len()
            )));
        }
        Ok(&self.heads[layer - 1])
    }
}

/// Learnable scalars in one PAD head.
pub fn pad_head_param_count(c: &ModelConfig) -> usize {
    let (d, h) = (c.embed_dim, c.pad_hidden_dim);
    d * h + h + h * 2 + 2
}

impl<T: Real> PadHeadParams<T> {
    /// `depth` heads with a uniform first layer and a zero last layer, so an
    /// untrained head outputs logits `[0, 0]`.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (config.embed_dim, config.pad_hidden_dim);
        let heads = (0..config.depth)
            .map(|_| PadHeadWeights {
                fc1_weight: linear_init(rng, d, h),
                fc1_bias: Tensor::zeros([h]),
                fc2_weight: Tensor::zeros([h, 2]),
                fc2_bias: Tensor::zeros([2]),
            })
            .collect();
        Self { heads }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> PadHeads<Var> {
        self.try_map(&mut |t| Ok(if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }))
            .expect("binding is infallible")
    }

    pub fn cast<U: Real>(&self) -> PadHeadParams<U> {
        self.try_map(&mut |t| Ok(t.cast())).expect("cast is infallible")
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (d, h) = (config.embed_dim, config.pad_hidden_dim);
        let ok = self.heads.len() == config.depth
            && self.heads.iter().all(|w| {
                w.fc1_weight.shape() == [d, h]
                    && w.fc1_bias.shape() == [h]
                    && w.fc2_weight.shape() == [h, 2]
                    && w.fc2_bias.shape() == [2]
            });
        if !ok {
            return Err(Error::shape("PAD head weights do not match config"));
        }
        Ok(())
    }
}

/// Logits `[bona fide, attack]` of one head applied to a block's tokens.
///
/// `tokens` is `(batch·seq_len) × d`; the head sees the mean of the patch
/// rows of each sequence (the classification row is skipped). Output is
/// `batch × 2`.
pub fn pad_head_forward<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    head: &PadHeadWeights<Var>,
    seq_len: usize,
) -> Result<Var> {
    let pooled = g.pool_patches(tokens, seq_len)?;
    let h = g.matmul(pooled, head.fc1_weight)?;
    let h = g.add_bias(h, head.fc1_bias)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, head.fc2_weight)?;
    g.add_bias(out, head.fc2_bias)
}

/// Attack probability: the softmax of a 2-logit head output at [`ATTACK`].
pub fn pad_score<T: Real>(logits: &[T]) -> Result<f64> {
    if logits.len() != 2 {
        return Err(Error::shape(format!("PAD logits need 2 values, got {}", logits.len())));
    }
    let diff = logits[BONA_FIDE].as_f64() - logits[ATTACK].as_f64();
    Ok(1.0 / (1.0 + diff.exp()))
}

/// Recognition head: one weight row per training identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceParams<T> {
    /// `num_identities × d`, used row-normalized.
    pub weight: Tensor<T>,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

pub const ARCFACE_MARGIN: f64 = 0.5;
pub const ARCFACE_SCALE: f64 = 64.0;

impl<T: Real> ArcFaceParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            weight: normal_init(rng, &[config.num_identities, config.embed_dim], 0.02),
            margin: ARCFACE_MARGIN,
            scale: ARCFACE_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::invalid(format!("margin must lie in [0, π), got {}", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// `s·cos θ_j` for every class, with `cos(θ_t + m)` at each row's target.
///
/// `embeddings` is `batch × d`, `weight` is `classes × d`.
pub fn arcface_logits<T: Real>(
    g: &mut Graph<T>,
    embeddings: Var,
    weight: Var,
    targets: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let e = g.l2_normalize(embeddings)?;
    let w = g.l2_normalize(weight)?;
    let cos = g.matmul_nt(e, w)?;
    let cos = g.angular_margin(cos, targets, T::of(margin))?;
    g.scale(cos, T::of(scale))
}

/// Evaluates [`arcface_logits`] for a single embedding without training.
pub fn arcface_logits_eval<T: Real>(
    embedding: &[T],
    arc: &ArcFaceParams<T>,
    target: usize,
) -> Result<Vec<T>> {
    arc.validate()?;
    let mut g = Graph::new();
    let e = g.constant(Tensor::new([1, embedding.len()], embedding.to_vec())?);
    let w = g.constant(arc.weight.clone());
    let out = arcface_logits(&mut g, e, w, &[target], arc.margin, arc.scale)?;
    Ok(g.value(out).data().to_vec())
}

/// `-log softmax(logits)[label]` for one row.
pub fn cross_entropy_value<T: Real>(logits: &[T], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label].as_f64())
}

/// Mean squared difference between student embeddings and a detached
/// teacher target.
pub fn mse_distill<T: Real>(g: &mut Graph<T>, student: Var, teacher: &Tensor<T>) -> Result<Var> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::shape(format!(
            "student {:?} and teacher {:?} differ",
            g.shape(student),
            teacher.shape()
        )));
    }
    let t = g.constant(teacher.clone());
    g.mse(student, t)
}

/// Dot product of the L2-normalized vectors.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
