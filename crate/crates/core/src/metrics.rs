//! PAD, matching and joint-system error rates computed from score records.
//!
//! All rates are percentages in `[0, 100]` counted per record. An attack is
//! classified bona fide when its PAD score is below the PAD threshold; a
//! comparison is accepted when its match score is at least the match
//! threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{check_consistent, Liveness, PaiSpecies};

/// One probe-versus-reference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub probe_id: String,
    pub reference_id: String,
    /// Probe and reference come from the same finger.
    pub is_genuine: bool,
    pub probe_liveness: Liveness,
    pub pai_species: PaiSpecies,
    /// Cosine similarity of the two embeddings.
    pub match_score: f64,
    /// Attack probability of the probe.
    pub pad_score: f64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        check_consistent(self.probe_liveness, self.pai_species)?;
        if !self.match_score.is_finite() || !self.pad_score.is_finite() {
            return Err(Error::Metric(format!(
                "non-finite score in record {} vs {}",
                self.probe_id, self.reference_id
            )));
        }
        Ok(())
    }

    pub fn is_attack(&self) -> bool {
        self.probe_liveness == Liveness::Attack
    }
}

fn rate(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadRates {
    pub apcer_per_species: BTreeMap<PaiSpecies, f64>,
    pub apcer_avg: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// APCER per species (unweighted average across species), BPCER and ACER.
pub fn pad_rates(records: &[ScoreRecord], pad_threshold: f64) -> Result<PadRates> {
    let mut bona = (0, 0);
    let mut per: BTreeMap<PaiSpecies, (usize, usize)> = BTreeMap::new();
    for r in records {
        if r.is_attack() {
            let e = per.entry(r.pai_species).or_default();
            e.0 += usize::from(r.pad_score < pad_threshold);
            e.1 += 1;
        } else {
            bona.0 += usize::from(r.pad_score >= pad_threshold);
            bona.1 += 1;
        }
    }
    if bona.1 == 0 {
        return Err(Error::Metric("no bona fide records".into()));
    }
    if per.is_empty() {
        return Err(Error::Metric("no attack records".into()));
    }
    let apcer_per_species: BTreeMap<_, _> = per.into_iter().map(|(s, (h, n))| (s, rate(h, n))).collect();
    let apcer_avg = mean(apcer_per_species.values().copied());
    let bpcer = rate(bona.0, bona.1);
    Ok(PadRates { apcer_per_species, apcer_avg, bpcer, acer: (apcer_avg + bpcer) / 2.0 })
}

/// Candidate thresholds: every distinct score plus one sentinel below the
/// minimum and one above the maximum, ascending.
pub fn threshold_candidates(scores: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = scores.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if let (Some(&lo), Some(&hi)) = (v.first(), v.last()) {
        v.insert(0, lo.next_down());
        v.push(hi.next_up());
    }
    v
}

fn check_target(name: &str, target: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&target) {
        return Err(Error::invalid(format!("{name} target must lie in [0, 100]%, got {target}")));
    }
    Ok(())
}

/// Smallest candidate PAD threshold whose BPCER is at most `target_bpcer`.
pub fn threshold_at_bpcer(records: &[ScoreRecord], target_bpcer: f64) -> Result<f64> {
    check_target("BPCER", target_bpcer)?;
    let mut bona: Vec<f64> =
        records.iter().filter(|r| !r.is_attack()).map(|r| r.pad_score).collect();
    if bona.is_empty() {
        return Err(Error::Metric("no bona fide records".into()));
    }
    bona.sort_by(f64::total_cmp);
    let n = bona.len();
    threshold_candidates(records.iter().map(|r| r.pad_score))
        .into_iter()
        .find(|&t| rate(n - bona.partition_point(|&s| s < t), n) <= target_bpcer)
        .ok_or_else(|| Error::Metric(format!("no threshold reaches BPCER <= {target_bpcer}%")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRates {
    pub fnmr: f64,
    pub fmr: f64,
}

/// FNMR over genuine bona fide comparisons and FMR over zero-effort
/// (bona fide, different finger) comparisons. Attack probes are excluded.
pub fn match_rates(records: &[ScoreRecord], match_threshold: f64) -> Result<MatchRates> {
    let (mut gen, mut imp) = ((0, 0), (0, 0));
    for r in records.iter().filter(|r| !r.is_attack()) {
        let accept = r.match_score >= match_threshold;
        if r.is_genuine {
            gen.0 += usize::from(!accept);
            gen.1 += 1;
        } else {
            imp.0 += usize::from(accept);
            imp.1 += 1;
        }
    }
    if gen.1 == 0 {
        return Err(Error::Metric("no genuine bona fide comparisons".into()));
    }
    if imp.1 == 0 {
        return Err(Error::Metric("no zero-effort impostor comparisons".into()));
    }
    Ok(MatchRates { fnmr: rate(gen.0, gen.1), fmr: rate(imp.0, imp.1) })
}

/// Smallest candidate match threshold whose FMR is at most `target_fmr`,
/// with the TAR (`100 − FNMR`) reached there.
///
/// A non-zero target needs at least `100 / target` impostor comparisons to
/// be resolvable.
pub fn threshold_at_fmr(records: &[ScoreRecord], target_fmr: f64) -> Result<(f64, f64)> {
    check_target("FMR", target_fmr)?;
    let bona: Vec<&ScoreRecord> = records.iter().filter(|r| !r.is_attack()).collect();
    let mut imp: Vec<f64> = bona.iter().filter(|r| !r.is_genuine).map(|r| r.match_score).collect();
    if imp.is_empty() {
        return Err(Error::Metric("no zero-effort impostor comparisons".into()));
    }
    if target_fmr > 0.0 && (imp.len() as f64) * target_fmr < 100.0 {
        return Err(Error::Metric(format!(
            "{} impostor comparisons cannot resolve FMR {target_fmr}%; use a target of at least {:.4}%",
            imp.len(),
            100.0 / imp.len() as f64
        )));
    }
    imp.sort_by(f64::total_cmp);
    let n = imp.len();
    let threshold = threshold_candidates(bona.iter().map(|r| r.match_score))
        .into_iter()
        .find(|&t| rate(n - imp.partition_point(|&s| s < t), n) <= target_fmr)
        .ok_or_else(|| Error::Metric(format!("no threshold reaches FMR <= {target_fmr}%")))?;
    let rates = match_rates(records, threshold)?;
    Ok((threshold, 100.0 - rates.fnmr))
}

/// How the deployed system decides to accept an attack presentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PadPolicy {
    /// Matching alone decides.
    MatchOnly,
    /// The probe must also pass PAD (`pad_score < pad_threshold`).
    Joint { pad_threshold: f64 },
}

/// Which attack comparisons count towards IAPMR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    /// The attack probe against the reference of the finger it imitates.
    SameFinger,
    /// The attack probe against references of other fingers.
    CrossFinger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iapmr {
    pub per_species: BTreeMap<PaiSpecies, f64>,
    pub avg: f64,
}

/// Share of attack comparisons the system accepts, per species and as an
/// unweighted species average.
pub fn iapmr(
    records: &[ScoreRecord],
    match_threshold: f64,
    policy: PadPolicy,
    target: AttackTarget,
) -> Result<Iapmr> {
    let same = target == AttackTarget::SameFinger;
    let mut per: BTreeMap<PaiSpecies, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_attack() && r.is_genuine == same) {
        let pad_pass = match policy {
            PadPolicy::MatchOnly => true,
            PadPolicy::Joint { pad_threshold } => r.pad_score < pad_threshold,
        };
        let e = per.entry(r.pai_species).or_default();
        e.0 += usize::from(pad_pass && r.match_score >= match_threshold);
        e.1 += 1;
    }
    if per.is_empty() {
        return Err(Error::Metric("no presentation attack comparisons".into()));
    }
    let per_species: BTreeMap<_, _> = per.into_iter().map(|(s, (h, n))| (s, rate(h, n))).collect();
    let avg = mean(per_species.values().copied());
    Ok(Iapmr { per_species, avg })
}

/// `100 − (FNMR + FMR + IAPMR)/3`.
pub fn im_accuracy(fnmr: f64, fmr: f64, iapmr_avg: f64) -> Result<f64> {
    for (name, v) in [("FNMR", fnmr), ("FMR", fmr), ("IAPMR", iapmr_avg)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::invalid(format!("{name} must lie in [0, 100]%, got {v}")));
        }
    }
    Ok(100.0 - (fnmr + fmr + iapmr_avg) / 3.0)
}

/// Operating points used by [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalTargets {
    /// BPCER (%) at which the PAD threshold is calibrated.
    pub bpcer: f64,
    /// FMR (%) at which the match threshold is calibrated.
    pub fmr: f64,
    /// Fixed thresholds shared across systems; when absent each system
    /// is calibrated on its own scores.
    pub pad_threshold: Option<f64>,
    pub match_threshold: Option<f64>,
    /// Gate attack acceptance on PAD when computing IAPMR.
    pub joint: bool,
}

impl Default for EvalTargets {
    fn default() -> Self {
        Self { bpcer: 2.0, fmr: 1.0, pad_threshold: None, match_threshold: None, joint: true }
    }
}

/// Every metric at one pair of operating thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub apcer_per_species: BTreeMap<PaiSpecies, f64>,
    pub apcer_avg: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub fnmr: f64,
    pub fmr: f64,
    pub tar_at_far: f64,
    pub iapmr_per_species: BTreeMap<PaiSpecies, f64>,
    pub iapmr_avg: f64,
    pub iapmr_cross_finger_avg: Option<f64>,
    pub im_accuracy: f64,
    pub pad_threshold: f64,
    pub match_threshold: f64,
    pub target_bpcer: f64,
    pub target_fmr: f64,
    pub pad_policy: PadPolicy,
    pub threshold_mode: String,
}

pub fn evaluate(records: &[ScoreRecord], targets: &EvalTargets) -> Result<MetricReport> {
    for r in records {
        r.validate()?;
    }
    let pad_threshold = match targets.pad_threshold {
        Some(t) => t,
        None => threshold_at_bpcer(records, targets.bpcer)?,
    };
    let match_threshold = match targets.match_threshold {
        Some(t) => t,
        None => threshold_at_fmr(records, targets.fmr)?.0,
    };
    let pad = pad_rates(records, pad_threshold)?;
    let m = match_rates(records, match_threshold)?;
    let policy = if targets.joint { PadPolicy::Joint { pad_threshold } } else { PadPolicy::MatchOnly };
    let ia = iapmr(records, match_threshold, policy, AttackTarget::SameFinger)?;
    let cross = iapmr(records, match_threshold, policy, AttackTarget::CrossFinger).ok().map(|c| c.avg);
    let fixed = targets.pad_threshold.is_some() || targets.match_threshold.is_some();
    Ok(MetricReport {
        apcer_per_species: pad.apcer_per_species,
        apcer_avg: pad.apcer_avg,
        bpcer: pad.bpcer,
        acer: pad.acer,
        fnmr: m.fnmr,
        fmr: m.fmr,
        tar_at_far: 100.0 - m.fnmr,
        im_accuracy: im_accuracy(m.fnmr, m.fmr, ia.avg)?,
        iapmr_per_species: ia.per_species,
        iapmr_avg: ia.avg,
        iapmr_cross_finger_avg: cross,
        pad_threshold,
        match_threshold,
        target_bpcer: targets.bpcer,
        target_fmr: targets.fmr,
        pad_policy: policy,
        threshold_mode: if fixed { "global" } else { "per_system" }.into(),
    })
}
