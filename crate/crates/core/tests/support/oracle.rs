//! Brute-force re-implementations of the metric definitions, written
//! without sorting or binary search, plus a random score-record generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitu::labels::{Liveness, PaiSpecies};
use vitu::metrics::ScoreRecord;

const SPECIES: [PaiSpecies; 3] = [PaiSpecies::A, PaiSpecies::B, PaiSpecies::C];

fn pct(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

fn avg(map: &BTreeMap<PaiSpecies, f64>) -> f64 {
    map.values().sum::<f64>() / map.len() as f64
}

/// `n` records with coarse scores (many ties), a mix of genuine and impostor
/// comparisons, and attacks of every species.
pub fn random_records(n: usize, seed: u64) -> Vec<ScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = [0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
    (0..n)
        .map(|i| {
            let attack = rng.random_bool(0.4);
            let species = if attack { SPECIES[rng.random_range(0..3)] } else { PaiSpecies::None };
            let score = |rng: &mut ChaCha8Rng| {
                if rng.random_bool(0.3) { grid[rng.random_range(0..grid.len())] } else { rng.random_range(-1.0..1.0) }
            };
            ScoreRecord {
                probe_id: format!("p{}", i / 4),
                reference_id: format!("r{}", i % 4),
                is_genuine: rng.random_bool(0.3),
                probe_liveness: if attack { Liveness::Attack } else { Liveness::BonaFide },
                pai_species: species,
                match_score: score(&mut rng),
                pad_score: score(&mut rng),
            }
        })
        .collect()
}

pub struct PadOracle {
    pub apcer: BTreeMap<PaiSpecies, f64>,
    pub apcer_avg: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn pad_rates(records: &[ScoreRecord], t: f64) -> PadOracle {
    let mut apcer = BTreeMap::new();
    for sp in SPECIES {
        let of: Vec<_> = records.iter().filter(|r| r.pai_species == sp).collect();
        if !of.is_empty() {
            apcer.insert(sp, pct(of.iter().filter(|r| r.pad_score < t).count(), of.len()));
        }
    }
    let bona: Vec<_> = records.iter().filter(|r| r.pai_species == PaiSpecies::None).collect();
    let bpcer = pct(bona.iter().filter(|r| !(r.pad_score < t)).count(), bona.len());
    let apcer_avg = avg(&apcer);
    PadOracle { apcer, apcer_avg, bpcer, acer: (apcer_avg + bpcer) / 2.0 }
}

pub fn match_rates(records: &[ScoreRecord], t: f64) -> (f64, f64) {
    let bona = records.iter().filter(|r| r.pai_species == PaiSpecies::None);
    let gen: Vec<_> = bona.clone().filter(|r| r.is_genuine).collect();
    let imp: Vec<_> = bona.filter(|r| !r.is_genuine).collect();
    let fnmr = pct(gen.iter().filter(|r| !(r.match_score >= t)).count(), gen.len());
    let fmr = pct(imp.iter().filter(|r| r.match_score >= t).count(), imp.len());
    (fnmr, fmr)
}

/// Every observed value plus one value below all and one above all.
fn candidates(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut c: Vec<f64> = scores.to_vec();
    c.push(lo.next_down());
    c.push(hi.next_up());
    c
}

/// Smallest candidate whose BPCER is within the target.
pub fn threshold_at_bpcer(records: &[ScoreRecord], target: f64) -> Option<f64> {
    let all: Vec<f64> = records.iter().map(|r| r.pad_score).collect();
    candidates(&all)
        .into_iter()
        .filter(|&t| pad_rates(records, t).bpcer <= target)
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
}

/// Smallest candidate (from bona fide comparisons) whose FMR is within the
/// target, with the TAR there. `None` when the impostor count cannot
/// resolve a non-zero target.
pub fn threshold_at_fmr(records: &[ScoreRecord], target: f64) -> Option<(f64, f64)> {
    let bona: Vec<&ScoreRecord> = records.iter().filter(|r| r.pai_species == PaiSpecies::None).collect();
    let impostors = bona.iter().filter(|r| !r.is_genuine).count();
    if target > 0.0 && (impostors as f64) * target < 100.0 {
        return None;
    }
    let scores: Vec<f64> = bona.iter().map(|r| r.match_score).collect();
    let t = candidates(&scores)
        .into_iter()
        .filter(|&t| match_rates(records, t).1 <= target)
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))?;
    Some((t, 100.0 - match_rates(records, t).0))
}

/// Per-species and average IAPMR over attack comparisons with the given
/// genuineness; `pad` gates acceptance when present.
pub fn iapmr(records: &[ScoreRecord], t: f64, pad: Option<f64>, same_finger: bool) -> (BTreeMap<PaiSpecies, f64>, f64) {
    let mut per = BTreeMap::new();
    for sp in SPECIES {
        let of: Vec<_> = records.iter().filter(|r| r.pai_species == sp && r.is_genuine == same_finger).collect();
        if of.is_empty() {
            continue;
        }
        let accepted = of.iter().filter(|r| r.match_score >= t && pad.is_none_or(|p| r.pad_score < p)).count();
        per.insert(sp, pct(accepted, of.len()));
    }
    let a = avg(&per);
    (per, a)
}

/// Overlapping but separable score distributions, rounded to two decimals
/// so that ties occur at operating points.
pub fn separable_records(n: usize, seed: u64) -> Vec<ScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let round = |v: f64| (v * 100.0).round() / 100.0;
    (0..n)
        .map(|i| {
            let attack = rng.random_bool(0.4);
            let genuine = rng.random_bool(0.3);
            let pad_score = if attack { rng.random_range(0.3..1.0) } else { rng.random_range(0.0..0.6) };
            let match_score = if genuine { rng.random_range(0.3..1.0) } else { rng.random_range(-0.5..0.6) };
            ScoreRecord {
                probe_id: format!("p{}", i / 4),
                reference_id: format!("r{}", i % 4),
                is_genuine: genuine,
                probe_liveness: if attack { Liveness::Attack } else { Liveness::BonaFide },
                pai_species: if attack { SPECIES[rng.random_range(0..3)] } else { PaiSpecies::None },
                match_score: round(match_score),
                pad_score: round(pad_score),
            }
        })
        .collect()
}
