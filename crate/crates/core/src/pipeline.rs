//! Training procedures (recognition, PAD, unified), the sequential and
//! unified deployment topologies, the per-layer PAD ablation and the
//! parameter/latency benchmark.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads::{
    arcface_logits, cosine_similarity, mse_distill, pad_head_forward, pad_head_param_count, pad_score,
    ArcFaceParams, PadHeadParams, ARCFACE_MARGIN, ARCFACE_SCALE,
};
use crate::image::Image;
use crate::labels::{Liveness, PaiSpecies};
use crate::metrics::{evaluate, pad_rates, threshold_at_bpcer, EvalTargets, MetricReport, ScoreRecord};
use crate::optim::{adamw_step, poly_lr, AdamWConfig, OptimState, ScheduleConfig};
use crate::scores::quantize_score;
use crate::synth::{derive_seed, Sample};
use crate::tensor::Tensor;
use crate::vit::{forward_patches, param_count, patchify_batch, BackboneParams, ModelConfig, VisitWeights};

const STAGE_FRM: u64 = 1;
const STAGE_HEADED: u64 = 2;

/// Hyperparameters of the three training procedures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub frm_epochs: usize,
    pub pad_epochs: usize,
    pub unified_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_power: f64,
    pub optimizer: AdamWConfig,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
    /// Weight λ of the distillation term in unified training.
    pub distill_weight: f64,
    /// Weight of an extra identity loss on the unified student (off by
    /// default).
    pub identity_loss_weight: f64,
    /// Start the unified student from random weights instead of the
    /// teacher. Exploratory; the default finetunes the teacher.
    pub unified_from_scratch: bool,
    /// Taken from the run config.
    #[serde(skip)]
    pub seed: u64,
    /// Fail on non-finite values instead of continuing.
    #[serde(skip)]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            frm_epochs: 40,
            pad_epochs: 10,
            unified_epochs: 10,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-5,
            lr_power: 3.0,
            optimizer: AdamWConfig::default(),
            arcface_margin: ARCFACE_MARGIN,
            arcface_scale: ARCFACE_SCALE,
            distill_weight: 1.0,
            identity_loss_weight: 0.0,
            unified_from_scratch: false,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("frm_epochs", self.frm_epochs),
            ("pad_epochs", self.pad_epochs),
            ("unified_epochs", self.unified_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{key}"), "must be >= 1"));
            }
        }
        self.schedule(1).validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config { key: key.replace("optim.", "train."), message },
            other => other,
        })?;
        self.optimizer.validate()?;
        if !(self.distill_weight >= 0.0) || !(self.identity_loss_weight >= 0.0) {
            return Err(Error::config("train.distill_weight", "loss weights must be >= 0"));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.arcface_margin) {
            return Err(Error::config("train.arcface_margin", "must lie in [0, π)"));
        }
        if !(self.arcface_scale > 0.0) {
            return Err(Error::config("train.arcface_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: u64) -> ScheduleConfig {
        ScheduleConfig { base_lr: self.base_lr, min_lr: self.min_lr, power: self.lr_power, total_steps }
    }
}

/// Backbone plus ArcFace head of the recognition model.
#[derive(Clone, Debug, PartialEq)]
pub struct FrmModel {
    pub backbone: BackboneParams<f32>,
    pub arcface: ArcFaceParams<f32>,
}

/// Backbone plus one PAD head per block. Used for both the stand-alone PAD
/// model and the unified model.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadedModel {
    pub backbone: BackboneParams<f32>,
    pub heads: PadHeadParams<f32>,
}

/// A trained model and its mean loss per epoch.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub losses: Vec<f64>,
}

trait Trainable {
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>>;
}

impl Trainable for FrmModel {
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        self.backbone.visit_mut("", &mut |_, t| out.push(t));
        out.push(&mut self.arcface.weight);
        out
    }
}

impl Trainable for HeadedModel {
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        self.backbone.visit_mut("", &mut |_, t| out.push(t));
        self.heads.visit_mut("", &mut |_, t| out.push(t));
        out
    }
}

fn vars_of<W: VisitWeights<Var>>(w: &W, out: &mut Vec<Var>) {
    w.visit("", &mut |_, v| out.push(*v));
}

/// Flattened patches of every sample, computed once per training run.
struct PatchCache {
    rows: Vec<Vec<f32>>,
    per_sample: usize,
    width: usize,
}

impl PatchCache {
    fn new(config: &ModelConfig, images: &[&Image]) -> Result<Self> {
        let rows = images
            .iter()
            .map(|img| patchify_batch::<f32>(config, &[img]).map(|t| t.into_data()))
            .collect::<Result<_>>()?;
        Ok(Self { rows, per_sample: config.num_patches(), width: config.patch_dim() })
    }

    fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.per_sample * self.width);
        for &i in idx {
            data.extend_from_slice(&self.rows[i]);
        }
        Tensor::new([idx.len() * self.per_sample, self.width], data).expect("cached patch shape")
    }
}

fn stack_rows(rows: &[Vec<f32>], idx: &[usize]) -> Tensor<f32> {
    let d = rows[idx[0]].len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::new([idx.len(), d], data).expect("row shape")
}

/// Mini-batch AdamW over `n` samples with the polynomial schedule.
///
/// `build` adds the loss of one batch to a fresh graph and returns it with
/// the trainable leaves in the order of [`Trainable::params_mut`].
fn run_epochs<M: Trainable>(
    model: &mut M,
    n: usize,
    epochs: usize,
    cfg: &TrainConfig,
    stage: u64,
    build: impl Fn(&M, &mut Graph<f32>, &[usize]) -> Result<(Var, Vec<Var>)>,
) -> Result<Vec<f64>> {
    let batches = n.div_ceil(cfg.batch_size);
    let schedule = cfg.schedule((epochs * batches) as u64);
    let mut state = {
        let params = model.params_mut();
        let refs: Vec<&Tensor<f32>> = params.iter().map(|t| &**t).collect();
        OptimState::new(&refs)
    };
    state.check_finite = cfg.deterministic;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new().with_finite_check(cfg.deterministic);
            let (loss, vars) = build(model, &mut g, idx)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value}")));
            }
            total += value;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
                .collect();
            drop(g);
            let lr = poly_lr(state.step, &schedule);
            let mut params = model.params_mut();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adamw_step(&mut params, &grad_refs, &mut state, lr, &cfg.optimizer)?;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

fn identity_labels(samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let mut roster: Vec<usize> = samples.iter().map(|s| s.identity).collect();
    roster.sort_unstable();
    roster.dedup();
    let labels = samples.iter().map(|s| roster.binary_search(&s.identity).expect("in roster")).collect();
    (roster, labels)
}

fn check_config(config: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    config.validate()?;
    cfg.validate()
}

/// Recognition model trained with ArcFace over the identities of `data`
/// (bona fide and attack impressions alike).
pub fn train_frm(config: &ModelConfig, data: &[Sample], cfg: &TrainConfig) -> Result<Trained<FrmModel>> {
    check_config(config, cfg)?;
    let (roster, labels) = identity_labels(data);
    if roster.len() < 2 {
        return Err(Error::invalid("recognition training needs at least 2 identities"));
    }
    if roster.len() > config.num_identities {
        return Err(Error::config(
            "model.num_identities",
            format!("{} training identities exceed {}", roster.len(), config.num_identities),
        ));
    }
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let cache = PatchCache::new(config, &images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_FRM, 0));
    let backbone = BackboneParams::init(config, &mut rng);
    let mut arcface = ArcFaceParams::init(config, &mut rng);
    arcface.margin = cfg.arcface_margin;
    arcface.scale = cfg.arcface_scale;
    let mut model = FrmModel { backbone, arcface };
    let losses = run_epochs(&mut model, data.len(), cfg.frm_epochs, cfg, STAGE_FRM, |m, g, idx| {
        let wb = m.backbone.bind(g, true);
        let wa = g.leaf(m.arcface.weight.clone());
        let x = g.constant(cache.batch(idx));
        let f = forward_patches(g, &wb, config, x, idx.len())?;
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = arcface_logits(g, f.cls, wa, &targets, m.arcface.margin, m.arcface.scale)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let mut vars = Vec::new();
        vars_of(&wb, &mut vars);
        vars.push(wa);
        Ok((loss, vars))
    })?;
    Ok(Trained { model, losses })
}

fn liveness_labels(data: &[Sample]) -> Result<Vec<usize>> {
    let labels: Vec<usize> = data.iter().map(|s| usize::from(s.liveness == Liveness::Attack)).collect();
    if !labels.contains(&0) {
        return Err(Error::invalid("PAD training needs bona fide samples"));
    }
    if !labels.contains(&1) {
        return Err(Error::invalid("PAD training needs attack samples"));
    }
    Ok(labels)
}

/// Sum over blocks of the per-head liveness cross-entropy.
fn pad_loss(g: &mut Graph<f32>, layers: &[Var], heads: &crate::heads::PadHeads<Var>, seq_len: usize, labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (tokens, head) in layers.iter().zip(&heads.heads) {
        let logits = pad_head_forward(g, *tokens, head, seq_len)?;
        let ce = g.cross_entropy(logits, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::invalid("model has no PAD heads"))
}

fn train_headed(
    config: &ModelConfig,
    data: &[Sample],
    init: &FrmModel,
    cfg: &TrainConfig,
    epochs: usize,
    teacher_cls: Option<&[Vec<f32>]>,
) -> Result<Trained<HeadedModel>> {
    check_config(config, cfg)?;
    init.backbone.check_shapes(config)?;
    let labels = liveness_labels(data)?;
    let ids = if cfg.identity_loss_weight > 0.0 && teacher_cls.is_some() {
        Some(identity_labels(data).1)
    } else {
        None
    };
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let cache = PatchCache::new(config, &images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_HEADED, 0));
    let heads = PadHeadParams::init(config, &mut rng);
    let backbone = if cfg.unified_from_scratch && teacher_cls.is_some() {
        BackboneParams::init(config, &mut rng)
    } else {
        init.backbone.clone()
    };
    let mut model = HeadedModel { backbone, heads };
    let lambda = cfg.distill_weight as f32;
    let losses = run_epochs(&mut model, data.len(), epochs, cfg, STAGE_HEADED, |m, g, idx| {
        let wb = m.backbone.bind(g, true);
        let wh = m.heads.bind(g, true);
        let x = g.constant(cache.batch(idx));
        let f = forward_patches(g, &wb, config, x, idx.len())?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut loss = pad_loss(g, &f.layers, &wh, f.seq_len, &y)?;
        if let Some(teacher) = teacher_cls {
            let mse = mse_distill(g, f.cls, &stack_rows(teacher, idx))?;
            let mse = g.scale(mse, lambda)?;
            loss = g.add(loss, mse)?;
            if let Some(ids) = &ids {
                let w = g.constant(init.arcface.weight.clone());
                let t: Vec<usize> = idx.iter().map(|&i| ids[i]).collect();
                let logits = arcface_logits(g, f.cls, w, &t, init.arcface.margin, init.arcface.scale)?;
                let ce = g.cross_entropy(logits, &t)?;
                let ce = g.scale(ce, cfg.identity_loss_weight as f32)?;
                loss = g.add(loss, ce)?;
            }
        }
        let mut vars = Vec::new();
        vars_of(&wb, &mut vars);
        vars_of(&wh, &mut vars);
        Ok((loss, vars))
    })?;
    Ok(Trained { model, losses })
}

/// PAD model: backbone initialized from the recognition model, all heads
/// trained jointly on the summed cross-entropy.
pub fn train_pad(config: &ModelConfig, data: &[Sample], frm: &FrmModel, cfg: &TrainConfig) -> Result<Trained<HeadedModel>> {
    train_headed(config, data, frm, cfg, cfg.pad_epochs, None)
}

/// Unified model: student initialized from the frozen teacher, trained on
/// the summed PAD cross-entropy plus `λ·MSE` to the teacher's embeddings.
pub fn train_unified(
    config: &ModelConfig,
    data: &[Sample],
    teacher: Option<&FrmModel>,
    cfg: &TrainConfig,
) -> Result<Trained<HeadedModel>> {
    let teacher = teacher.ok_or_else(|| Error::invalid("unified training needs a teacher model"))?;
    check_config(config, cfg)?;
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let teacher_cls = embed_images(&teacher.backbone, config, &images)?;
    train_headed(config, data, teacher, cfg, cfg.unified_epochs, Some(&teacher_cls))
}

const EVAL_BATCH: usize = 64;

/// Final classification embeddings of `images`.
pub fn embed_images(backbone: &BackboneParams<f32>, config: &ModelConfig, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let wb = backbone.bind(&mut g, false);
        let x = g.constant(patchify_batch(config, chunk)?);
        let f = forward_patches(&mut g, &wb, config, x, chunk.len())?;
        let cls = g.value(f.cls);
        out.extend((0..chunk.len()).map(|i| cls.row(i).to_vec()));
    }
    Ok(out)
}

/// PAD scores from the given 1-based head layers plus the final
/// classification embeddings, from one backbone pass per batch.
pub fn headed_forward(
    model: &HeadedModel,
    config: &ModelConfig,
    images: &[&Image],
    layers: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f32>>)> {
    for &l in layers {
        model.heads.layer(l)?;
    }
    let mut scores = vec![Vec::with_capacity(images.len()); layers.len()];
    let mut cls_out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let wb = model.backbone.bind(&mut g, false);
        let x = g.constant(patchify_batch(config, chunk)?);
        let f = forward_patches(&mut g, &wb, config, x, chunk.len())?;
        for (k, &l) in layers.iter().enumerate() {
            let head = model.heads.layer(l)?.try_map(&mut |t| Ok(g.constant(t.clone())))?;
            let logits = pad_head_forward(&mut g, f.layers[l - 1], &head, f.seq_len)?;
            let v = g.value(logits);
            for i in 0..chunk.len() {
                scores[k].push(pad_score(v.row(i))?);
            }
        }
        let cls = g.value(f.cls);
        cls_out.extend((0..chunk.len()).map(|i| cls.row(i).to_vec()));
    }
    Ok((scores, cls_out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Sequential,
    Unified,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Topology::Sequential),
            "unified" => Ok(Topology::Unified),
            _ => Err(Error::invalid(format!("unknown topology {s:?} (expected sequential|unified)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub pad: f64,
    pub matching: f64,
}

/// Backbone passes performed by a system, per model.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    pub pad: AtomicUsize,
    pub frm: AtomicUsize,
    pub unified: AtomicUsize,
}

impl ForwardCounters {
    pub fn snapshot(&self) -> [usize; 3] {
        [self.pad.load(Ordering::Relaxed), self.frm.load(Ordering::Relaxed), self.unified.load(Ordering::Relaxed)]
    }
}

/// A deployable joint PAD and recognition system.
#[derive(Debug)]
pub struct TrainedSystem {
    pub config: ModelConfig,
    pub topology: Topology,
    pub frm: Option<FrmModel>,
    pub pad: Option<HeadedModel>,
    pub unified: Option<HeadedModel>,
    pub pad_layer: usize,
    /// Average every head's score instead of using `pad_layer` alone.
    pub pad_ensemble: bool,
    pub thresholds: Option<Thresholds>,
    pub counters: ForwardCounters,
}

impl TrainedSystem {
    pub fn sequential(config: ModelConfig, frm: FrmModel, pad: HeadedModel, pad_layer: usize) -> Result<Self> {
        let s = Self {
            config,
            topology: Topology::Sequential,
            frm: Some(frm),
            pad: Some(pad),
            unified: None,
            pad_layer,
            pad_ensemble: false,
            thresholds: None,
            counters: ForwardCounters::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn unified(config: ModelConfig, model: HeadedModel, pad_layer: usize) -> Result<Self> {
        let s = Self {
            config,
            topology: Topology::Unified,
            frm: None,
            pad: None,
            unified: Some(model),
            pad_layer,
            pad_ensemble: false,
            thresholds: None,
            counters: ForwardCounters::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.topology {
            Topology::Sequential => self.frm.is_some() && self.pad.is_some(),
            Topology::Unified => self.unified.is_some(),
        };
        if !ok {
            return Err(Error::invalid(format!("{:?} system is missing a model", self.topology)));
        }
        if self.pad_layer == 0 || self.pad_layer > self.config.depth {
            return Err(Error::invalid(format!(
                "PAD layer {} out of range 1..={}",
                self.pad_layer, self.config.depth
            )));
        }
        Ok(())
    }

    fn headed(&self) -> &HeadedModel {
        match self.topology {
            Topology::Sequential => self.pad.as_ref(),
            Topology::Unified => self.unified.as_ref(),
        }
        .expect("validated system")
    }

    fn pad_layers(&self) -> Vec<usize> {
        if self.pad_ensemble { (1..=self.config.depth).collect() } else { vec![self.pad_layer] }
    }

    /// PAD scores and final embeddings from one pass of the headed model.
    fn headed_scores(&self, images: &[&Image]) -> Result<(Vec<f64>, Vec<Vec<f32>>)> {
        let layers = self.pad_layers();
        let (scores, emb) = headed_forward(self.headed(), &self.config, images, &layers)?;
        let pad = (0..images.len())
            .map(|i| scores.iter().map(|s| s[i]).sum::<f64>() / layers.len() as f64)
            .collect();
        Ok((pad, emb))
    }

    /// Reference embeddings for enrollment images.
    pub fn enroll(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        match self.topology {
            Topology::Sequential => {
                self.counters.frm.fetch_add(images.len(), Ordering::Relaxed);
                embed_images(&self.frm.as_ref().expect("validated").backbone, &self.config, images)
            }
            Topology::Unified => {
                self.counters.unified.fetch_add(images.len(), Ordering::Relaxed);
                Ok(self.headed_scores(images)?.1)
            }
        }
    }

    /// PAD scores and match embeddings for probes, without any gating.
    pub fn probe_scores(&self, images: &[&Image]) -> Result<(Vec<f64>, Vec<Vec<f32>>)> {
        match self.topology {
            Topology::Sequential => {
                self.counters.pad.fetch_add(images.len(), Ordering::Relaxed);
                let (pad, _) = self.headed_scores(images)?;
                Ok((pad, self.enroll(images)?))
            }
            Topology::Unified => {
                self.counters.unified.fetch_add(images.len(), Ordering::Relaxed);
                self.headed_scores(images)
            }
        }
    }

    /// Parameters deployed at inference, by component.
    pub fn param_components(&self) -> Vec<(String, usize)> {
        let backbone = param_count(&self.config);
        let head = pad_head_param_count(&self.config);
        match self.topology {
            Topology::Sequential => vec![("frm".into(), backbone), ("pad".into(), backbone + head)],
            Topology::Unified => vec![("unified".into(), backbone + head)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accept,
    RejectSpoof,
    RejectNonMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub pad_score: f64,
    /// Absent when the PAD gate rejected the probe before matching.
    pub match_score: Option<f64>,
}

/// The decision rule shared by both topologies.
pub fn decide(pad_score: f64, match_score: f64, t: &Thresholds) -> Outcome {
    if pad_score >= t.pad {
        Outcome::RejectSpoof
    } else if match_score >= t.matching {
        Outcome::Accept
    } else {
        Outcome::RejectNonMatch
    }
}

fn single_pad(system: &TrainedSystem, probe: &Image) -> Result<(f64, Vec<f32>)> {
    let (s, mut e) = system.headed_scores(&[probe])?;
    Ok((s[0], e.remove(0)))
}

/// Cascade: PAD model first; only probes passing PAD reach the matcher.
pub fn sequential_decide(probe: &Image, reference: &[f32], system: &TrainedSystem, t: &Thresholds) -> Result<Decision> {
    if system.topology != Topology::Sequential {
        return Err(Error::invalid("sequential_decide needs a sequential system"));
    }
    system.counters.pad.fetch_add(1, Ordering::Relaxed);
    let (pad, _) = single_pad(system, probe)?;
    if pad >= t.pad {
        return Ok(Decision { outcome: Outcome::RejectSpoof, pad_score: pad, match_score: None });
    }
    system.counters.frm.fetch_add(1, Ordering::Relaxed);
    let frm = system.frm.as_ref().expect("validated");
    let emb = embed_images(&frm.backbone, &system.config, &[probe])?.remove(0);
    let m = cosine_similarity(&emb, reference)?;
    Ok(Decision { outcome: decide(pad, m, t), pad_score: pad, match_score: Some(m) })
}

/// One backbone pass yields both the PAD score and the match embedding.
pub fn unified_decide(probe: &Image, reference: &[f32], system: &TrainedSystem, t: &Thresholds) -> Result<Decision> {
    if system.topology != Topology::Unified {
        return Err(Error::invalid("unified_decide needs a unified system"));
    }
    system.counters.unified.fetch_add(1, Ordering::Relaxed);
    let (pad, emb) = single_pad(system, probe)?;
    let m = cosine_similarity(&emb, reference)?;
    Ok(Decision { outcome: decide(pad, m, t), pad_score: pad, match_score: Some(m) })
}

/// Enrollment sample index per identity: its first bona fide impression.
pub fn enrollment(samples: &[Sample]) -> Vec<usize> {
    let mut best: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.liveness == Liveness::BonaFide {
            let e = best.entry(s.identity).or_insert(i);
            if samples[*e].impression > s.impression {
                *e = i;
            }
        }
    }
    best.into_values().collect()
}

/// Scores every non-enrolled sample against every enrolled reference.
///
/// Scores are rounded to the precision of the score file, so metrics
/// computed here and from a written file agree exactly.
pub fn score_records(system: &TrainedSystem, samples: &[Sample]) -> Result<Vec<ScoreRecord>> {
    let refs = enrollment(samples);
    if refs.is_empty() {
        return Err(Error::invalid("no bona fide sample to enroll"));
    }
    let probes: Vec<usize> = (0..samples.len()).filter(|i| !refs.contains(i)).collect();
    let ref_images: Vec<&Image> = refs.iter().map(|&i| &samples[i].image).collect();
    let probe_images: Vec<&Image> = probes.iter().map(|&i| &samples[i].image).collect();
    let ref_emb = system.enroll(&ref_images)?;
    let (pad, emb) = system.probe_scores(&probe_images)?;
    let mut out = Vec::with_capacity(probes.len() * refs.len());
    for (k, &p) in probes.iter().enumerate() {
        let probe = &samples[p];
        for (j, &r) in refs.iter().enumerate() {
            out.push(ScoreRecord {
                probe_id: probe.stem(),
                reference_id: samples[r].stem(),
                is_genuine: probe.identity == samples[r].identity,
                probe_liveness: probe.liveness,
                pai_species: probe.species,
                match_score: quantize_score(cosine_similarity(&emb[k], &ref_emb[j])?),
                pad_score: quantize_score(pad[k]),
            });
        }
    }
    Ok(out)
}

/// Scores the test split and computes every metric.
pub fn evaluate_joint(system: &TrainedSystem, test: &[Sample], targets: &EvalTargets) -> Result<(MetricReport, Vec<ScoreRecord>)> {
    let records = score_records(system, test)?;
    let mut targets = targets.clone();
    if let (Some(t), None, None) = (system.thresholds, targets.pad_threshold, targets.match_threshold) {
        targets.pad_threshold = Some(t.pad);
        targets.match_threshold = Some(t.matching);
    }
    let report = evaluate(&records, &targets)?;
    Ok((report, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layer: usize,
    pub apcer: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub best_layer: usize,
    pub target_bpcer: f64,
}

/// APCER at the BPCER-calibrated threshold of every head.
pub fn ablate_layers(model: &HeadedModel, config: &ModelConfig, samples: &[Sample], target_bpcer: f64) -> Result<Ablation> {
    let layers: Vec<usize> = (1..=model.heads.len()).collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let (scores, _) = headed_forward(model, config, &images, &layers)?;
    let mut rows = Vec::with_capacity(layers.len());
    for (&layer, s) in layers.iter().zip(&scores) {
        let records: Vec<ScoreRecord> = samples
            .iter()
            .zip(s)
            .map(|(smp, &p)| ScoreRecord {
                probe_id: smp.stem(),
                reference_id: String::new(),
                is_genuine: false,
                probe_liveness: smp.liveness,
                pai_species: smp.species,
                match_score: 0.0,
                pad_score: p,
            })
            .collect();
        let threshold = threshold_at_bpcer(&records, target_bpcer)?;
        rows.push(AblationRow { layer, apcer: pad_rates(&records, threshold)?.apcer_avg, threshold });
    }
    let best_layer = rows
        .iter()
        .min_by(|a, b| a.apcer.total_cmp(&b.apcer).then(a.layer.cmp(&b.layer)))
        .map(|r| r.layer)
        .expect("at least one head");
    Ok(Ablation { rows, best_layer, target_bpcer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub topology: Topology,
    pub params_total: usize,
    pub params_components: Vec<(String, usize)>,
    pub median_latency_ms: f64,
    pub runs: usize,
    pub environment: String,
}

pub fn environment() -> String {
    format!(
        "{}-{} cpu, {} threads available, batch 1, single-threaded",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

/// Median single-probe decision latency over `runs` timed runs after a
/// short warm-up. PAD never rejects during timing, so the sequential
/// system always runs both models.
pub fn benchmark(system: &TrainedSystem, probe: &Image, runs: usize) -> Result<BenchReport> {
    let runs = runs.max(1);
    let reference = vec![1.0f32; system.config.embed_dim];
    let t = Thresholds { pad: f64::INFINITY, matching: 0.0 };
    let once = || match system.topology {
        Topology::Sequential => sequential_decide(probe, &reference, system, &t),
        Topology::Unified => unified_decide(probe, &reference, system, &t),
    };
    for _ in 0..3 {
        once()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        once()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 { times[runs / 2] } else { (times[runs / 2 - 1] + times[runs / 2]) / 2.0 };
    let params_components = system.param_components();
    Ok(BenchReport {
        topology: system.topology,
        params_total: params_components.iter().map(|(_, n)| n).sum(),
        params_components,
        median_latency_ms: median,
        runs,
        environment: environment(),
    })
}

/// Species present in a sample list, in order.
pub fn species_present(samples: &[Sample]) -> Vec<PaiSpecies> {
    let mut v: Vec<PaiSpecies> = samples.iter().map(|s| s.species).filter(|s| *s != PaiSpecies::None).collect();
    v.sort();
    v.dedup();
    v
}
