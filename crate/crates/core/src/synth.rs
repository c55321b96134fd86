//! Procedural fingerprint-like images with identity and liveness structure.
//!
//! An identity is a smooth orientation field plus a ridge frequency and a
//! core position. Impressions render a soft-thresholded sinusoid along that
//! field under a small rigid jitter with contrast, brightness and sensor
//! noise. Attack impressions keep the identity's field but alter the texture
//! in a species-specific way.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::labels::{check_consistent, Liveness, PaiSpecies};

/// Side of the coordinate frame identities are defined in. Images of any
/// size sample the same frame.
pub const CANVAS: f64 = 32.0;

pub const MIN_FREQUENCY: f64 = 0.08;
pub const MAX_FREQUENCY: f64 = 0.16;

/// Upper bound on the orientation-field gradient, in radians per canvas
/// unit.
pub const MAX_FIELD_SLOPE: f64 = 0.15;

const FIELD_TERMS: usize = 3;

/// A synthetic finger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: usize,
    /// Ridge frequency in cycles per canvas unit.
    pub frequency: f64,
    pub core: [f64; 2],
    /// Orientation field `θ0 + Σ a_k sin(2π(u_k x + v_k y)/32 + φ_k)`.
    pub theta0: f64,
    pub amplitudes: [f64; FIELD_TERMS],
    pub waves: [[f64; 2]; FIELD_TERMS],
    pub phases: [f64; FIELD_TERMS],
    /// Ridge phase offset.
    pub phase0: f64,
}

impl Identity {
    pub fn orientation(&self, x: f64, y: f64) -> f64 {
        let mut th = self.theta0;
        for k in 0..FIELD_TERMS {
            let [u, v] = self.waves[k];
            th += self.amplitudes[k] * (2.0 * PI * (u * x + v * y) / CANVAS + self.phases[k]).sin();
        }
        th
    }

    /// Ridge phase at a canvas point for a frequency multiplier.
    pub fn ridge_phase(&self, x: f64, y: f64, freq_scale: f64) -> f64 {
        let th = self.orientation(x, y);
        let (dx, dy) = (x - self.core[0], y - self.core[1]);
        2.0 * PI * self.frequency * freq_scale * (-dx * th.sin() + dy * th.cos()) + self.phase0
    }
}

/// Deterministic identity from a seed.
pub fn make_identity(id: usize, seed: u64) -> Identity {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let frequency = r.random_range(MIN_FREQUENCY..MAX_FREQUENCY);
    let core = [CANVAS / 2.0 + r.random_range(-6.0..6.0), CANVAS / 2.0 + r.random_range(-6.0..6.0)];
    let theta0 = r.random_range(0.0..PI);
    let mut amplitudes = [0.0f64; FIELD_TERMS];
    let mut waves = [[0.0f64; 2]; FIELD_TERMS];
    let mut phases = [0.0; FIELD_TERMS];
    for k in 0..FIELD_TERMS {
        amplitudes[k] = r.random_range(-0.45..0.45);
        waves[k] = [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6)];
        phases[k] = r.random_range(0.0..2.0 * PI);
    }
    let slope: f64 = (0..FIELD_TERMS)
        .map(|k| amplitudes[k].abs() * 2.0 * PI * waves[k][0].hypot(waves[k][1]) / CANVAS)
        .sum();
    if slope > MAX_FIELD_SLOPE {
        amplitudes.iter_mut().for_each(|a| *a *= MAX_FIELD_SLOPE / slope);
    }
    let phase0 = r.random_range(0.0..2.0 * PI);
    Identity { id, frequency, core, theta0, amplitudes, waves, phases, phase0 }
}

/// Rendering and attack parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Largest per-impression translation, canvas units.
    pub max_shift: f64,
    /// Largest per-impression rotation, degrees.
    pub max_rotation_deg: f64,
    pub noise_std: f64,
    /// Lower bound of the per-impression contrast factor; the upper bound is 1.
    pub min_contrast: f64,
    /// Largest per-impression brightness offset.
    pub max_brightness: f64,
    /// Ridge sharpness of the soft threshold.
    pub ridge_gain: f64,
    /// Gaussian blur range for species A.
    pub blur_sigma: [f64; 2],
    /// Additive speckle strength for species B.
    pub speckle_std: f64,
    /// Frequency multiplier for species C.
    pub c_frequency_scale: f64,
    /// Ridge-width offset for species C; positive values thin the ridges.
    pub c_duty_offset: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            max_shift: 0.5,
            max_rotation_deg: 2.0,
            noise_std: 0.03,
            min_contrast: 0.9,
            max_brightness: 0.02,
            ridge_gain: 3.0,
            blur_sigma: [1.0, 2.0],
            speckle_std: 0.6,
            c_frequency_scale: 1.15,
            c_duty_offset: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("data.generator.image_size", "must be >= 1"));
        }
        if !(0.0..=4.0).contains(&self.max_shift) {
            return Err(Error::config("data.generator.max_shift", "must lie in [0, 4]"));
        }
        if !(0.0..=10.0).contains(&self.max_rotation_deg) {
            return Err(Error::config("data.generator.max_rotation_deg", "must lie in [0, 10]"));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::config("data.generator.blur_sigma", "need 0 < low <= high"));
        }
        for (key, v) in [
            ("noise_std", self.noise_std),
            ("max_brightness", self.max_brightness),
            ("speckle_std", self.speckle_std),
            ("ridge_gain", self.ridge_gain),
            ("c_frequency_scale", self.c_frequency_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("data.generator.{key}"), "must be finite and >= 0"));
            }
        }
        if !(self.min_contrast > 0.0 && self.min_contrast <= 1.0) {
            return Err(Error::config("data.generator.min_contrast", "must lie in (0, 1]"));
        }
        if !(self.c_duty_offset.abs() < 1.0) {
            return Err(Error::config("data.generator.c_duty_offset", "must lie in (-1, 1)"));
        }
        Ok(())
    }
}

/// One rendered presentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity: usize,
    pub liveness: Liveness,
    pub species: PaiSpecies,
    pub impression: usize,
}

impl Sample {
    /// `{identity}_{impression}_{liveness}_{species}`.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}_{}", self.identity, self.impression, self.liveness, self.species)
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(pixels: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let n = size as isize;
    let mirror = |i: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * pixels[y * size + mirror(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[mirror(y as isize + k as isize - radius) * size + x])
                .sum();
        }
    }
    out
}

/// Renders one impression of `identity`.
pub fn render_impression(
    identity: &Identity,
    liveness: Liveness,
    species: PaiSpecies,
    impression: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    check_consistent(liveness, species)?;
    let size = cfg.image_size;
    let shift = [sym(rng, cfg.max_shift), sym(rng, cfg.max_shift)];
    let angle = sym(rng, cfg.max_rotation_deg).to_radians();
    let contrast = if cfg.min_contrast < 1.0 { rng.random_range(cfg.min_contrast..1.0) } else { 1.0 };
    let brightness = sym(rng, cfg.max_brightness);
    let (freq_scale, duty) = match species {
        PaiSpecies::C => (cfg.c_frequency_scale, cfg.c_duty_offset),
        _ => (1.0, 0.0),
    };
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let (ca, sa) = (angle.cos(), angle.sin());
    let c = CANVAS / 2.0;
    let scale = CANVAS / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let dx = (px as f64 + 0.5) * scale - c - shift[0];
            let dy = (py as f64 + 0.5) * scale - c - shift[1];
            let x = ca * dx - sa * dy + c;
            let y = sa * dx + ca * dy + c;
            let psi = identity.ridge_phase(x, y, freq_scale);
            let ridge = 0.5 + 0.5 * (cfg.ridge_gain * (psi.cos() - duty)).tanh();
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels.push(0.5 + contrast * (ridge - 0.5) + brightness + n);
        }
    }
    match species {
        PaiSpecies::A => {
            let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]) / scale;
            pixels = gaussian_blur(&pixels, size, sigma);
        }
        PaiSpecies::B if cfg.speckle_std > 0.0 => {
            let speckle = Normal::new(0.0, cfg.speckle_std).expect("valid std");
            pixels.iter_mut().for_each(|p| *p += speckle.sample(rng));
        }
        _ => {}
    }
    let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
    Ok(Sample { image: Image::gray(size, pixels)?, identity: identity.id, liveness, species, impression })
}

fn sym(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 }
}

/// Mixes a seed with indices into an independent seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dataset size and composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_identities: usize,
    pub impressions_per_id: usize,
    /// Share of each identity's impressions rendered as attacks.
    pub attack_fraction: f64,
    /// Share of identities held out for testing.
    pub test_fraction: f64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            impressions_per_id: 6,
            attack_fraction: 0.5,
            test_fraction: 0.2,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn attacks_per_id(&self) -> usize {
        (self.impressions_per_id as f64 * self.attack_fraction).round() as usize
    }

    pub fn bona_fide_per_id(&self) -> usize {
        self.impressions_per_id - self.attacks_per_id().min(self.impressions_per_id)
    }

    pub fn test_identities(&self) -> usize {
        (self.num_identities as f64 * self.test_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.num_identities < 2 {
            return Err(Error::config("data.num_identities", "need at least 2 identities"));
        }
        if !(0.0..=1.0).contains(&self.attack_fraction) {
            return Err(Error::config("data.attack_fraction", "must lie in [0, 1]"));
        }
        if self.bona_fide_per_id() < 2 {
            return Err(Error::config(
                "data.impressions_per_id",
                "every identity needs at least 2 bona fide impressions",
            ));
        }
        if self.attacks_per_id() < PaiSpecies::ATTACKS.len() {
            return Err(Error::config(
                "data.attack_fraction",
                format!("need at least {} attack impressions per identity", PaiSpecies::ATTACKS.len()),
            ));
        }
        let test = self.test_identities();
        if test == 0 || test >= self.num_identities {
            return Err(Error::config("data.test_fraction", "both splits need at least one identity"));
        }
        Ok(())
    }
}

/// Identity-disjoint train and test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
}

/// Identities of one dataset, in id order.
pub fn dataset_identities(cfg: &DataConfig, seed: u64) -> Vec<Identity> {
    (0..cfg.num_identities).map(|i| make_identity(i, derive_seed(seed, i as u64, u64::MAX))).collect()
}

/// Renders every impression of one identity: bona fide first, then attacks
/// cycling through the species.
pub fn render_identity(identity: &Identity, cfg: &DataConfig, seed: u64) -> Result<Vec<Sample>> {
    let bona = cfg.bona_fide_per_id();
    (0..cfg.impressions_per_id)
        .map(|k| {
            let species = if k < bona {
                PaiSpecies::None
            } else {
                PaiSpecies::ATTACKS[(k - bona) % PaiSpecies::ATTACKS.len()]
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, identity.id as u64, k as u64));
            render_impression(identity, species.liveness(), species, k, &cfg.generator, &mut rng)
        })
        .collect()
}

/// Builds the identity-disjoint split.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut ids: Vec<usize> = (0..cfg.num_identities).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 0)));
    let (test_ids, train_ids) = ids.split_at(cfg.test_identities());
    let mut test_identities = test_ids.to_vec();
    let mut train_identities = train_ids.to_vec();
    test_identities.sort_unstable();
    train_identities.sort_unstable();
    let identities = dataset_identities(cfg, seed);
    let render = |list: &[usize]| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for &i in list {
            out.extend(render_identity(&identities[i], cfg, seed)?);
        }
        Ok(out)
    };
    let split = DatasetSplit {
        train: render(&train_identities)?,
        test: render(&test_identities)?,
        train_identities,
        test_identities,
    };
    split.check_disjoint()?;
    Ok(split)
}

impl DatasetSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        if let Some(i) = self.train_identities.iter().find(|i| self.test_identities.contains(i)) {
            return Err(Error::invalid(format!("identity {i} appears in both splits")));
        }
        let bad = self.train.iter().any(|s| !self.train_identities.contains(&s.identity))
            || self.test.iter().any(|s| !self.test_identities.contains(&s.identity));
        if bad {
            return Err(Error::invalid("sample identity missing from its split roster"));
        }
        Ok(())
    }

    /// Writes `train/` and `test/` PNG directories, each with a
    /// `manifest.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        write_split(&dir.join("train"), &self.train)?;
        write_split(&dir.join("test"), &self.test)
    }

    /// Reads a directory written by [`export`](Self::export).
    pub fn import(dir: &Path) -> Result<Self> {
        let train = read_split(&dir.join("train"))?;
        let test = read_split(&dir.join("test"))?;
        let roster = |s: &[Sample]| {
            let mut v: Vec<usize> = s.iter().map(|s| s.identity).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let split = DatasetSplit {
            train_identities: roster(&train),
            test_identities: roster(&test),
            train,
            test,
        };
        split.check_disjoint()?;
        Ok(split)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    identity: usize,
    liveness: Liveness,
    species: PaiSpecies,
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for s in samples {
        let name = format!("{}.png", s.stem());
        s.image.save_png(&dir.join(&name))?;
        let row = ManifestRow { path: name, identity: s.identity, liveness: s.liveness, species: s.species };
        w.serialize(row).map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = dir.join("manifest.csv");
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::invalid(format!("{}: row {}: {e}", manifest.display(), line + 2)))?;
        check_consistent(row.liveness, row.species)?;
        let impression = row
            .path
            .split('_')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid(format!("{}: bad file name {}", manifest.display(), row.path)))?;
        let path: PathBuf = dir.join(&row.path);
        out.push(Sample {
            image: Image::load_png(&path)?,
            identity: row.identity,
            liveness: row.liveness,
            species: row.species,
            impression,
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
