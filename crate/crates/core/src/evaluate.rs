//! Quality tiers, recombination of per-artefact predictions and evaluation statistics.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::ArtefactGrades;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("reference labels contain a single class")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no items to evaluate")]
    Empty,
    #[error("grade {0} outside 0..=2")]
    InvalidGrade(u8),
    #[error("tier {0} outside 1..=3")]
    InvalidTier(u8),
    #[error("at least two raters are required")]
    TooFewRaters,
}

/// Overall quality tier: 1 good, 2 medium, 3 bad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Tier(u8);

impl Tier {
    pub const GOOD: Tier = Tier(1);
    pub const MEDIUM: Tier = Tier(2);
    pub const BAD: Tier = Tier(3);

    pub fn new(value: u8) -> Result<Self, StatsError> {
        if (1..=3).contains(&value) {
            Ok(Tier(value))
        } else {
            Err(StatsError::InvalidTier(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Tier {
    type Error = StatsError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Tier::new(v)
    }
}

impl From<Tier> for u8 {
    fn from(t: Tier) -> u8 {
        t.0
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Tier 3 if any grade is 2, tier 2 if any grade is 1, tier 1 otherwise.
pub fn grades_to_tier(g: &ArtefactGrades) -> Tier {
    let worst = g.motion.max(g.noise).max(g.contrast);
    match worst {
        0 => Tier::GOOD,
        1 => Tier::MEDIUM,
        _ => Tier::BAD,
    }
}

/// Outputs of the six artefact-specific binary classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SixWayPrediction {
    pub motion_severe: bool,
    pub motion_moderate: bool,
    pub contrast_severe: bool,
    pub contrast_moderate: bool,
    pub noise_0vs12: bool,
    pub noise_0vs1: bool,
}

impl SixWayPrediction {
    /// Flags in a fixed order; bit `i` of `bits` sets flag `i`.
    pub fn from_bits(bits: u8) -> Self {
        let b = |i: u8| bits & (1 << i) != 0;
        Self {
            motion_severe: b(0),
            motion_moderate: b(1),
            contrast_severe: b(2),
            contrast_moderate: b(3),
            noise_0vs12: b(4),
            noise_0vs1: b(5),
        }
    }
}

/// Per-artefact grades from the six flags.
///
/// Motion and contrast: severe flag wins, then moderate. Noise never reaches
/// grade 2 because its severe task does not separate moderate from severe.
pub fn recombine_grades(p: &SixWayPrediction) -> ArtefactGrades {
    let grade = |severe: bool, moderate: bool| {
        if severe {
            2
        } else if moderate {
            1
        } else {
            0
        }
    };
    ArtefactGrades {
        motion: grade(p.motion_severe, p.motion_moderate),
        noise: u8::from(p.noise_0vs12 || p.noise_0vs1),
        contrast: grade(p.contrast_severe, p.contrast_moderate),
    }
}

/// Tier from the six flags: the recombined grades' tier, escalated to tier 3
/// when both noise classifiers fire.
pub fn recombine_tier(p: &SixWayPrediction) -> Tier {
    if p.noise_0vs12 && p.noise_0vs1 {
        return Tier::BAD;
    }
    grades_to_tier(&recombine_grades(p))
}

/// The two binary tier evaluation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierTask {
    /// Reference tiers 1 and 2 only; tier 2 is positive.
    Tier1vs2,
    /// All items; tier 3 is positive.
    Tier12vs3,
}

impl TierTask {
    pub fn name(self) -> &'static str {
        match self {
            TierTask::Tier1vs2 => "tier1vs2",
            TierTask::Tier12vs3 => "tier12vs3",
        }
    }
}

/// Binary (prediction, reference) pairs for a tier task, dropping excluded references.
pub fn tier_task_labels(
    pred: &[Tier],
    reference: &[Tier],
    task: TierTask,
) -> Result<(Vec<bool>, Vec<bool>), StatsError> {
    check_lengths(pred.len(), reference.len())?;
    let mut p = Vec::new();
    let mut r = Vec::new();
    for (&pt, &rt) in pred.iter().zip(reference) {
        match task {
            TierTask::Tier1vs2 => {
                if rt == Tier::BAD {
                    continue;
                }
                p.push(pt.value() >= 2);
                r.push(rt == Tier::MEDIUM);
            }
            TierTask::Tier12vs3 => {
                p.push(pt == Tier::BAD);
                r.push(rt == Tier::BAD);
            }
        }
    }
    Ok((p, r))
}

fn check_lengths(a: usize, b: usize) -> Result<(), StatsError> {
    if a != b {
        return Err(StatsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(StatsError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[bool], reference: &[bool]) -> Result<Self, StatsError> {
        check_lengths(pred.len(), reference.len())?;
        let mut c = Confusion::default();
        for (&p, &r) in pred.iter().zip(reference) {
            match (p, r) {
                (true, true) => c.tp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
            }
        }
        Ok(c)
    }

    pub fn balanced_accuracy(&self) -> Result<f64, StatsError> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return Err(StatsError::SingleClass);
        }
        let sensitivity = self.tp as f64 / pos as f64;
        let specificity = self.tn as f64 / neg as f64;
        Ok((sensitivity + specificity) / 2.0)
    }
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(pred: &[bool], reference: &[bool]) -> Result<f64, StatsError> {
    Confusion::from_labels(pred, reference)?.balanced_accuracy()
}

/// Mean balanced accuracy of each rater against the consensus.
pub fn annotator_balanced_accuracy(
    raters: &[Vec<bool>],
    consensus: &[bool],
) -> Result<f64, StatsError> {
    if raters.len() < 2 {
        return Err(StatsError::TooFewRaters);
    }
    let mut total = 0.0;
    for r in raters {
        total += balanced_accuracy(r, consensus)?;
    }
    Ok(total / raters.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    #[default]
    Linear,
    Quadratic,
}

/// Weighted Cohen's kappa over three-level grades.
///
/// Zero expected disagreement (both raters constant on the same grade) is defined as 1.
pub fn weighted_cohen_kappa(
    r1: &[u8],
    r2: &[u8],
    weighting: KappaWeighting,
) -> Result<f64, StatsError> {
    check_lengths(r1.len(), r2.len())?;
    const K: usize = 3;
    let mut observed = [[0.0f64; K]; K];
    for (&a, &b) in r1.iter().zip(r2) {
        if a as usize >= K {
            return Err(StatsError::InvalidGrade(a));
        }
        if b as usize >= K {
            return Err(StatsError::InvalidGrade(b));
        }
        observed[a as usize][b as usize] += 1.0;
    }
    let n = r1.len() as f64;
    let rows: Vec<f64> = (0..K).map(|i| observed[i].iter().sum()).collect();
    let cols: Vec<f64> = (0..K)
        .map(|j| (0..K).map(|i| observed[i][j]).sum())
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..K {
        for j in 0..K {
            let d = (i as f64 - j as f64).abs() / (K - 1) as f64;
            let w = match weighting {
                KappaWeighting::Linear => d,
                KappaWeighting::Quadratic => d * d,
            };
            num += w * observed[i][j];
            den += w * rows[i] * cols[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    pub n_nonzero: usize,
    /// Exact null distribution used (otherwise normal approximation).
    pub exact: bool,
    /// Every paired difference was zero; `p_value` is 1 by convention.
    pub all_zero: bool,
}

/// Largest non-zero count for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Mid-ranks of absolute values (1-based).
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped and ties mid-ranked. Up to
/// [`WILCOXON_EXACT_MAX`] non-zero differences the exact permutation
/// distribution of the (mid-)rank sum is used; above that a normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    check_lengths(a.len(), b.len())?;
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n_nonzero: 0,
            exact: true,
            all_zero: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    if n <= WILCOXON_EXACT_MAX {
        // doubled mid-ranks are integers, so the subset-sum distribution is exact
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max_sum + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let t = (2.0 * statistic).round() as usize;
        let lower: f64 = counts[..=t].iter().sum::<f64>() / all;
        let p_value = (2.0 * lower).min(1.0);
        return Ok(WilcoxonResult {
            statistic,
            p_value,
            n_nonzero: n,
            exact: true,
            all_zero: false,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let z = if var > 0.0 {
        ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n_nonzero: n,
        exact: false,
        all_zero: false,
    })
}

/// Bonferroni-corrected p-values, capped at 1.
pub fn bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len() as f64;
    p_values.iter().map(|p| (p * m).min(1.0)).collect()
}

/// Balanced accuracy and confusion matrix of one binary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub n: usize,
    pub balanced_accuracy: Option<f64>,
    pub confusion: Confusion,
}

impl TaskReport {
    pub fn new(task: &str, pred: &[bool], reference: &[bool]) -> Result<Self, StatsError> {
        let confusion = Confusion::from_labels(pred, reference)?;
        Ok(Self {
            task: task.to_owned(),
            n: pred.len(),
            balanced_accuracy: confusion.balanced_accuracy().ok(),
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub wilcoxon: WilcoxonResult,
    pub p_corrected: f64,
}

/// Evaluation report serialized as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub tasks: Vec<TaskReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<Comparison>,
}

impl EvaluationReport {
    /// Runs the paired tests and fills Bonferroni-corrected p-values.
    pub fn add_comparisons(
        &mut self,
        named: &[(String, Vec<f64>, Vec<f64>)],
    ) -> Result<(), StatsError> {
        let mut results = Vec::with_capacity(named.len());
        for (_, a, b) in named {
            results.push(wilcoxon_signed_rank(a, b)?);
        }
        let corrected = bonferroni(&results.iter().map(|r| r.p_value).collect::<Vec<_>>());
        for ((name, _, _), (r, pc)) in named.iter().zip(results.into_iter().zip(corrected)) {
            self.comparisons.push(Comparison {
                name: name.clone(),
                wilcoxon: r,
                p_corrected: pc,
            });
        }
        Ok(())
    }
}
