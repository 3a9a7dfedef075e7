//! Verification metrics (EER, minDCF, DET curve), score fusion and the
//! trial-condition evaluation flows.
//!
//! A trial is accepted when `score >= threshold`. Sweeps run over every
//! distinct score plus `+∞` (reject everything).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::VectorTransform;
use crate::plda::PldaModel;
use crate::scalar::Scalar;
use crate::synth::{Corpus, TrialList, TrialMode};
use crate::vecspace::IVector;

/// Scores of a trial list with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrialSet {
    entries: Vec<(f64, bool)>,
    condition: String,
}

impl ScoredTrialSet {
    pub fn new(entries: Vec<(f64, bool)>, condition: impl Into<String>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|(s, _)| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of trial {i}")));
        }
        let targets = entries.iter().filter(|(_, t)| *t).count();
        if targets == 0 || targets == entries.len() {
            return Err(Error::Data(format!(
                "scored trials need at least one target and one nontarget ({targets} of {})",
                entries.len()
            )));
        }
        Ok(Self {
            entries,
            condition: condition.into(),
        })
    }

    pub fn entries(&self) -> &[(f64, bool)] {
        &self.entries
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn condition(&self) -> &str {
        &self.condition
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.entries.iter().filter(|(_, t)| *t).count()
    }

    pub fn nontarget_count(&self) -> usize {
        self.len() - self.target_count()
    }
}

/// Detection cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            c_miss: 10.0,
            c_fa: 1.0,
            p_target: 0.01,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.c_miss > 0.0
            && self.c_fa > 0.0
            && self.c_miss.is_finite()
            && self.c_fa.is_finite()
            && self.p_target > 0.0
            && self.p_target < 1.0;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "DCF parameters must be positive with p_target in (0,1): {self:?}"
            )));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Normalized detection cost at the given error rates.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)) / self.normalizer()
    }
}

/// Error counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub misses: usize,
    pub false_alarms: usize,
}

struct Totals {
    targets: usize,
    nontargets: usize,
}

impl Totals {
    fn of(set: &ScoredTrialSet) -> Self {
        Self {
            targets: set.target_count(),
            nontargets: set.nontarget_count(),
        }
    }

    fn rates(&self, p: &OperatingPoint) -> (f64, f64) {
        (
            p.misses as f64 / self.targets as f64,
            p.false_alarms as f64 / self.nontargets as f64,
        )
    }

    /// `|P_miss − P_fa|` scaled by `targets·nontargets`, exact in integers.
    fn imbalance(&self, p: &OperatingPoint) -> u128 {
        let a = p.misses as u128 * self.nontargets as u128;
        let b = p.false_alarms as u128 * self.targets as u128;
        a.abs_diff(b)
    }
}

/// One operating point per distinct score (ascending), then `+∞`.
pub fn operating_points(set: &ScoredTrialSet) -> Vec<OperatingPoint> {
    let mut sorted: Vec<(f64, bool)> = set.entries.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let mut misses = 0;
    let mut false_alarms = set.nontarget_count();
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(OperatingPoint {
            threshold,
            misses,
            false_alarms,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                misses += 1;
            } else {
                false_alarms -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        misses,
        false_alarms,
    });
    points
}

fn eer_from_points(totals: &Totals, points: impl IntoIterator<Item = OperatingPoint>) -> (f64, f64) {
    let mut best: Option<(u128, OperatingPoint)> = None;
    for p in points {
        let gap = totals.imbalance(&p);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, p));
        }
    }
    let (_, p) = best.expect("at least the +inf point");
    let (p_miss, p_fa) = totals.rates(&p);
    ((p_miss + p_fa) / 2.0, p.threshold)
}

fn min_dcf_from_points(totals: &Totals, params: &DcfParams, points: impl IntoIterator<Item = OperatingPoint>) -> f64 {
    points
        .into_iter()
        .map(|p| {
            let (p_miss, p_fa) = totals.rates(&p);
            params.normalized_cost(p_miss, p_fa)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Equal error rate: mean of `P_miss` and `P_fa` at the threshold where they
/// are closest (the lowest such threshold on ties).
pub fn compute_eer(set: &ScoredTrialSet) -> f64 {
    eer_with_threshold(set).0
}

/// EER together with the threshold it was read at.
pub fn eer_with_threshold(set: &ScoredTrialSet) -> (f64, f64) {
    eer_from_points(&Totals::of(set), operating_points(set))
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(set: &ScoredTrialSet, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(min_dcf_from_points(&Totals::of(set), params, operating_points(set)))
}

/// Normalized cost at a fixed threshold.
pub fn dcf_at_threshold(set: &ScoredTrialSet, params: &DcfParams, threshold: f64) -> Result<f64> {
    params.validate()?;
    let totals = Totals::of(set);
    let p = point_at(set, threshold);
    let (p_miss, p_fa) = totals.rates(&p);
    Ok(params.normalized_cost(p_miss, p_fa))
}

fn point_at(set: &ScoredTrialSet, threshold: f64) -> OperatingPoint {
    let misses = set.entries.iter().filter(|(s, t)| *t && *s < threshold).count();
    let false_alarms = set.entries.iter().filter(|(s, t)| !*t && *s >= threshold).count();
    OperatingPoint {
        threshold,
        misses,
        false_alarms,
    }
}

/// One point of a DET curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// DET curve ordered by decreasing `P_fa`, from `(1, 0)` to `(0, 1)`.
pub fn det_points(set: &ScoredTrialSet) -> Vec<DetPoint> {
    let totals = Totals::of(set);
    operating_points(set)
        .into_iter()
        .map(|p| {
            let (p_miss, p_fa) = totals.rates(&p);
            DetPoint {
                threshold: p.threshold,
                p_fa,
                p_miss,
            }
        })
        .collect()
}

/// Exhaustive reference sweeps over midpoints between consecutive distinct
/// scores plus `±∞`, recounting errors from scratch at every threshold.
pub mod reference {
    use super::*;

    fn thresholds(set: &ScoredTrialSet) -> Vec<f64> {
        let mut distinct: Vec<f64> = set.scores().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut out = vec![f64::NEG_INFINITY];
        // Adjacent floats can round the midpoint down onto the lower score.
        out.extend(distinct.windows(2).map(|w| {
            let mid = w[0] + (w[1] - w[0]) / 2.0;
            if mid > w[0] { mid } else { w[1] }
        }));
        out.push(f64::INFINITY);
        out
    }

    fn points(set: &ScoredTrialSet) -> Vec<OperatingPoint> {
        thresholds(set).into_iter().map(|t| point_at(set, t)).collect()
    }

    pub fn brute_force_eer(set: &ScoredTrialSet) -> f64 {
        eer_from_points(&Totals::of(set), points(set)).0
    }

    pub fn brute_force_min_dcf(set: &ScoredTrialSet, params: &DcfParams) -> f64 {
        min_dcf_from_points(&Totals::of(set), params, points(set))
    }
}

/// How each system's scores are scaled before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionNorm {
    /// Shift and scale each system to zero mean, unit variance.
    #[default]
    ZScore,
    Raw,
}

/// Fusion weights; only their ratio matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub base: f64,
    pub other: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { base: 7.0, other: 3.0 }
    }
}

impl FusionWeights {
    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<(f64, f64)> {
        let ok = self.base >= 0.0 && self.other >= 0.0 && self.base.is_finite() && self.other.is_finite();
        let total = self.base + self.other;
        if !ok || total <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "fusion weights must be non-negative and not both zero: {self:?}"
            )));
        }
        Ok((self.base / total, self.other / total))
    }
}

fn zscore(set: &ScoredTrialSet) -> Vec<f64> {
    let n = set.len() as f64;
    let mean = set.scores().sum::<f64>() / n;
    let var = set.scores().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    set.scores().map(|s| (s - mean) / std).collect()
}

/// Weighted sum of two aligned systems.
pub fn fuse_scores(
    base: &ScoredTrialSet,
    other: &ScoredTrialSet,
    weights: FusionWeights,
    norm: FusionNorm,
) -> Result<ScoredTrialSet> {
    if base.len() != other.len() {
        return Err(Error::Data(format!(
            "cannot fuse {} trials with {} trials",
            base.len(),
            other.len()
        )));
    }
    if let Some(i) = base.entries.iter().zip(&other.entries).position(|(a, b)| a.1 != b.1) {
        return Err(Error::Data(format!("trial {i} has different target flags in the two systems")));
    }
    let (wb, wo) = weights.normalized()?;
    let (sb, so): (Vec<f64>, Vec<f64>) = match norm {
        FusionNorm::ZScore => (zscore(base), zscore(other)),
        FusionNorm::Raw => (base.scores().collect(), other.scores().collect()),
    };
    let entries = sb
        .iter()
        .zip(&so)
        .zip(&base.entries)
        .map(|((b, o), e)| (wb * b + wo * o, e.1))
        .collect();
    ScoredTrialSet::new(entries, format!("{}+{}", base.condition, other.condition))
}

/// Which sides of a trial pass through the compensation transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Raw vectors on both sides.
    Baseline,
    /// Transform the test side only.
    LongShort,
    /// Transform both sides.
    ShortShort,
}

impl EvalMode {
    pub fn transformed(trials: TrialMode) -> Self {
        match trials {
            TrialMode::LongShort => EvalMode::LongShort,
            TrialMode::ShortShort => EvalMode::ShortShort,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Baseline => "baseline",
            EvalMode::LongShort => "long-short",
            EvalMode::ShortShort => "short-short",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(EvalMode::Baseline),
            "long-short" => Ok(EvalMode::LongShort),
            "short-short" => Ok(EvalMode::ShortShort),
            other => Err(Error::InvalidConfig(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Scores plus the two headline metrics of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMetrics {
    pub scores: ScoredTrialSet,
    pub eer: f64,
    pub min_dcf: f64,
}

impl ConditionMetrics {
    pub fn from_scores(scores: ScoredTrialSet, params: &DcfParams) -> Result<Self> {
        let eer = compute_eer(&scores);
        let min_dcf = compute_min_dcf(&scores, params)?;
        Ok(Self { scores, eer, min_dcf })
    }
}

/// Scores every trial with PLDA, transforming the sides `mode` asks for.
pub fn evaluate_condition<T: Scalar>(
    corpus: &Corpus<T>,
    trials: &TrialList,
    plda: &PldaModel<T>,
    transform: Option<&dyn VectorTransform<T>>,
    mode: EvalMode,
    params: &DcfParams,
) -> Result<ConditionMetrics> {
    let (enroll_side, test_side) = match mode {
        EvalMode::Baseline => (false, false),
        EvalMode::LongShort => (false, true),
        EvalMode::ShortShort => (true, true),
    };
    let transform = match (mode, transform) {
        (EvalMode::Baseline, _) => None,
        (_, None) => {
            return Err(Error::InvalidConfig(format!("mode {mode} needs a trained generator")));
        }
        (_, Some(t)) => {
            if EvalMode::transformed(trials.mode) != mode {
                return Err(Error::InvalidConfig(format!(
                    "mode {mode} does not match {} trials",
                    trials.mode
                )));
            }
            Some(t)
        }
    };
    let prepare = |v: &IVector<T>, apply: bool| -> Result<IVector<T>> {
        match transform {
            Some(t) if apply => t.transform(v),
            _ => Ok(v.clone()),
        }
    };
    let mut entries = Vec::with_capacity(trials.entries.len());
    for trial in &trials.entries {
        let (e, _) = corpus.resolve(trial.enroll)?;
        let (t, _) = corpus.resolve(trial.test)?;
        let e = prepare(e, enroll_side)?;
        let t = prepare(t, test_side)?;
        let score = crate::plda::plda_llr(plda, &e, &t)?.to_f64_lossy();
        entries.push((score, trial.is_target));
    }
    let tag = match mode {
        EvalMode::Baseline => format!("baseline/{}", trials.mode),
        _ => format!("transformed/{}", trials.mode),
    };
    ConditionMetrics::from_scores(ScoredTrialSet::new(entries, tag)?, params)
}

#[cfg(test)]
mod tests;
