//! Versioned binary checkpoints of named `f32` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VITUCKPT" | u32 version | u64 header length | header JSON
//! | u64 payload length | payload (f32 LE) | SHA-256 of everything before it
//! ```
//!
//! The header echoes the model config and indexes each tensor by name,
//! shape and byte offset into the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{ArcFaceParams, PadHeadParams};
use crate::pipeline::{FrmModel, HeadedModel};
use crate::tensor::Tensor;
use crate::vit::{backbone_shapes, BackboneParams, ModelConfig, VisitWeights};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VITUCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `frm`, `pad` or `unified`.
    pub kind: String,
    pub model: ModelConfig,
    /// Free-form settings saved next to the weights.
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let index = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = IndexEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: index,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(offset as usize + header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 4 + 8 + 8 + DIGEST_LEN;
        if bytes.len() < min || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch: file is corrupt"));
        }
        let mut pos = 12;
        let take_u64 = |pos: &mut usize| -> Result<usize> {
            let raw = body.get(*pos..*pos + 8).ok_or_else(|| corrupt("truncated"))?;
            *pos += 8;
            usize::try_from(u64::from_le_bytes(raw.try_into().expect("8 bytes"))).map_err(|_| corrupt("length overflow"))
        };
        let header_len = take_u64(&mut pos)?;
        let header_bytes = body.get(pos..pos.saturating_add(header_len)).ok_or_else(|| corrupt("truncated header"))?;
        pos += header_len;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with file version"));
        }
        let payload_len = take_u64(&mut pos)?;
        let payload = &body[pos..];
        if payload.len() != payload_len {
            return Err(corrupt(format!("payload is {} bytes, header says {payload_len}", payload.len())));
        }
        let mut end = 0usize;
        let mut seen = std::collections::BTreeSet::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(corrupt(format!("duplicate tensor {}", e.name)));
            }
            let start = usize::try_from(e.offset).map_err(|_| corrupt("offset overflow"))?;
            let n = e.shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| corrupt("shape overflow"))?;
            let stop = n.checked_mul(4).and_then(|b| b.checked_add(start)).ok_or_else(|| corrupt("extent overflow"))?;
            if start < end || stop > payload.len() {
                return Err(corrupt(format!("tensor {} extent {start}..{stop} does not fit the payload", e.name)));
            }
            end = stop;
            let data = payload[start..stop]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { kind: header.kind, model: header.model, meta: header.meta, tensors })
    }

    fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if !kinds.contains(&self.kind.as_str()) {
            return Err(corrupt(format!("checkpoint holds a {} model, expected {}", self.kind, kinds.join(" or "))));
        }
        Ok(())
    }

    fn tensor_map(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::config::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn push_all<W: VisitWeights<Tensor<f32>>>(w: &W, prefix: &str, out: &mut Vec<(String, Tensor<f32>)>) {
    w.visit(prefix, &mut |n, t| out.push((n, t.clone())));
}

/// Moves tensors named `prefix…` out of `map` into `target`, checking shapes.
fn fill<W: VisitWeights<Tensor<f32>>>(target: &mut W, prefix: &str, map: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut err = None;
    target.visit_mut(prefix, &mut |name, slot| {
        if err.is_some() {
            return;
        }
        match map.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => err = Some(corrupt(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()))),
            None => err = Some(corrupt(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn finish(map: BTreeMap<String, Tensor<f32>>) -> Result<()> {
    match map.keys().next() {
        Some(extra) => Err(corrupt(format!("unexpected tensor {extra}"))),
        None => Ok(()),
    }
}

fn empty_backbone(config: &ModelConfig) -> BackboneParams<f32> {
    backbone_shapes(config).try_map(&mut |s| Ok(Tensor::zeros(s.clone()))).expect("zeros")
}

fn empty_heads(config: &ModelConfig) -> PadHeadParams<f32> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    PadHeadParams::init(config, &mut rng)
}

pub fn frm_checkpoint(config: &ModelConfig, model: &FrmModel) -> Checkpoint {
    let mut tensors = Vec::new();
    push_all(&model.backbone, "", &mut tensors);
    tensors.push(("arcface.weight".into(), model.arcface.weight.clone()));
    Checkpoint {
        kind: "frm".into(),
        model: config.clone(),
        meta: serde_json::json!({ "arcface_margin": model.arcface.margin, "arcface_scale": model.arcface.scale }),
        tensors,
    }
}

pub fn frm_from_checkpoint(ckpt: &Checkpoint) -> Result<FrmModel> {
    ckpt.expect_kind(&["frm"])?;
    ckpt.model.validate()?;
    let mut map = ckpt.tensor_map();
    let mut backbone = empty_backbone(&ckpt.model);
    fill(&mut backbone, "", &mut map)?;
    let weight = map.remove("arcface.weight").ok_or_else(|| corrupt("missing tensor arcface.weight"))?;
    finish(map)?;
    let number = |k: &str| ckpt.meta.get(k).and_then(|v| v.as_f64()).ok_or_else(|| corrupt(format!("missing meta {k}")));
    let arcface = ArcFaceParams { weight, margin: number("arcface_margin")?, scale: number("arcface_scale")? };
    arcface.validate()?;
    if arcface.weight.shape() != [ckpt.model.num_identities, ckpt.model.embed_dim] {
        return Err(corrupt("arcface.weight does not match the model config"));
    }
    Ok(FrmModel { backbone, arcface })
}

/// `kind` is `pad` or `unified`.
pub fn headed_checkpoint(config: &ModelConfig, kind: &str, model: &HeadedModel, meta: serde_json::Value) -> Checkpoint {
    let mut tensors = Vec::new();
    push_all(&model.backbone, "", &mut tensors);
    push_all(&model.heads, "pad_heads.", &mut tensors);
    Checkpoint { kind: kind.into(), model: config.clone(), meta, tensors }
}

pub fn headed_from_checkpoint(ckpt: &Checkpoint, kind: &str) -> Result<HeadedModel> {
    ckpt.expect_kind(&[kind])?;
    ckpt.model.validate()?;
    let mut map = ckpt.tensor_map();
    let mut backbone = empty_backbone(&ckpt.model);
    fill(&mut backbone, "", &mut map)?;
    let mut heads = empty_heads(&ckpt.model);
    fill(&mut heads, "pad_heads.", &mut map)?;
    finish(map)?;
    Ok(HeadedModel { backbone, heads })
}
