//! Run configuration and output-directory plumbing.

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalTargets;
use crate::pipeline::TrainConfig;
use crate::synth::DataConfig;
use crate::vit::ModelConfig;

pub const SEED_ENV: &str = "VITU_SEED";
pub const DEFAULT_SEED: u64 = 7;

/// Everything a run depends on. Serialized verbatim into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: EvalTargets,
    /// BPCER (%) at which the per-layer ablation calibrates each head.
    pub ablation_bpcer: f64,
    /// Block whose PAD head is deployed; defaults to the middle block.
    pub pad_layer: Option<usize>,
    /// Average the scores of every PAD head instead of using one.
    pub pad_ensemble: bool,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: EvalTargets::default(),
            ablation_bpcer: 0.2,
            pad_layer: None,
            pad_ensemble: false,
            output_dir: PathBuf::from("out"),
            seed: Some(DEFAULT_SEED),
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.generator.image_size != self.model.image_size {
            return Err(Error::config(
                "data.generator.image_size",
                format!("{} differs from model.image_size {}", self.data.generator.image_size, self.model.image_size),
            ));
        }
        if self.model.channels != 1 {
            return Err(Error::config("model.channels", "the synthetic data is grayscale; use 1"));
        }
        for (key, v) in [("metrics.bpcer", self.metrics.bpcer), ("metrics.fmr", self.metrics.fmr), ("ablation_bpcer", self.ablation_bpcer)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::config(key, "must be a percentage in [0, 100]"));
            }
        }
        if let Some(l) = self.pad_layer {
            if l == 0 || l > self.model.depth {
                return Err(Error::config("pad_layer", format!("must lie in 1..={}", self.model.depth)));
            }
        }
        if self.deterministic && self.seed.is_none() {
            return Err(Error::config("seed", "required when deterministic is set"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn pad_layer(&self) -> usize {
        self.pad_layer.unwrap_or_else(|| self.model.default_pad_layer())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    /// Train config with the run-wide seed and determinism flag applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed(), deterministic: self.deterministic, ..self.train.clone() }
    }

    /// Applies seed overrides with precedence flag > environment > file.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = Some(s);
        } else if let Some(raw) = env {
            let s = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {raw:?}")))?;
            self.seed = Some(s);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses, defaults and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        Error::config(config_key_hint(&msg), msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_key_hint(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<root>").to_string()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_json().as_bytes())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Resolves `name` inside `dir`, rejecting paths that would escape it.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let rel = Path::new(name);
    if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::invalid(format!("output name {name:?} must stay inside {}", dir.display())));
    }
    Ok(dir.join(rel))
}
