//! Selection of noise and contrast parameter ranges: corrupt a clean corpus
//! with each candidate range, measure the matching metric, and keep the range
//! whose mean lands closest to a target value.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{nd_wgm, snr, MetricError, TissueMasks};
use crate::rng::derive_seed;
use crate::simulate::{
    Artefact, ArtefactParams, GammaConvention, GammaParams, NoiseParams, ParamRange, Severity,
};
use crate::volume::Volume3D;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration corpus is empty")]
    EmptyCorpus,
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("invalid candidate range {0}")]
    InvalidRange(ParamRange),
    #[error("{0} cannot be calibrated; only noise and contrast ranges are searched")]
    UnsupportedArtefact(Artefact),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error("metric failed on image {image_id}: {source}")]
    Metric {
        image_id: String,
        #[source]
        source: MetricError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMetric {
    Snr,
    NdWgm,
}

impl CalibrationMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMetric::Snr => "snr",
            CalibrationMetric::NdWgm => "nd_wgm",
        }
    }

    pub fn evaluate(self, vol: &Volume3D, masks: &TissueMasks) -> Result<f64, MetricError> {
        match self {
            CalibrationMetric::Snr => snr(vol, masks),
            CalibrationMetric::NdWgm => nd_wgm(vol, masks),
        }
    }

    /// The metric that tracks each calibratable artefact.
    pub fn for_artefact(artefact: Artefact) -> Option<Self> {
        match artefact {
            Artefact::Noise => Some(CalibrationMetric::Snr),
            Artefact::Contrast => Some(CalibrationMetric::NdWgm),
            Artefact::Motion => None,
        }
    }
}

/// Ordered candidate ranges for one artefact; earlier entries win ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub artefact: Artefact,
    pub ranges: Vec<ParamRange>,
    #[serde(default)]
    pub convention: GammaConvention,
}

impl CandidateSet {
    pub fn new(artefact: Artefact, ranges: Vec<ParamRange>) -> Result<Self, CalibrationError> {
        let set = Self {
            artefact,
            ranges,
            convention: GammaConvention::default(),
        };
        set.validate()?;
        Ok(set)
    }

    /// The published noise σ candidates.
    pub fn noise() -> Self {
        let ranges = [
            (0., 10.),
            (5., 15.),
            (10., 20.),
            (15., 25.),
            (20., 30.),
            (25., 35.),
        ];
        Self::new(
            Artefact::Noise,
            ranges.iter().map(|&(a, b)| ParamRange(a, b)).collect(),
        )
        .expect("valid list")
    }

    /// The published contrast β candidates, listed verbatim.
    pub fn contrast() -> Self {
        let ranges = [
            (-0.2, -0.05),
            (-0.25, -0.15),
            (-0.30, -0.15),
            (-0.35, -0.20),
            (-0.40, -0.25),
            (-0.45, -0.03),
            (-0.50, -0.35),
        ];
        Self::new(
            Artefact::Contrast,
            ranges.iter().map(|&(a, b)| ParamRange(a, b)).collect(),
        )
        .expect("valid list")
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if CalibrationMetric::for_artefact(self.artefact).is_none() {
            return Err(CalibrationError::UnsupportedArtefact(self.artefact));
        }
        if self.ranges.is_empty() {
            return Err(CalibrationError::EmptyCandidates);
        }
        if let Some(r) = self.ranges.iter().find(|r| !r.is_valid()) {
            return Err(CalibrationError::InvalidRange(*r));
        }
        Ok(())
    }

    fn params(&self, range: ParamRange, seed: u64) -> ArtefactParams {
        match self.artefact {
            Artefact::Noise => ArtefactParams::Noise(NoiseParams {
                sigma_range: range,
                seed,
            }),
            _ => ArtefactParams::Gamma(GammaParams {
                beta_range: range,
                seed,
                convention: self.convention,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub metric: CalibrationMetric,
    pub target_mean: f64,
    pub severity: Severity,
}

impl CalibrationTarget {
    /// Mean metric values measured on routine clinical images.
    pub fn clinical(metric: CalibrationMetric, severity: Severity) -> Self {
        let target_mean = match (metric, severity) {
            (CalibrationMetric::Snr, Severity::Moderate) => 44.0,
            (CalibrationMetric::Snr, _) => 25.0,
            (CalibrationMetric::NdWgm, Severity::Moderate) => 0.13,
            (CalibrationMetric::NdWgm, _) => 0.10,
        };
        Self {
            metric,
            target_mean,
            severity,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.target_mean.is_finite() {
            return Err(CalibrationError::InvalidTarget(
                "target mean must be finite".into(),
            ));
        }
        if self.metric == CalibrationMetric::Snr && self.target_mean <= 0.0 {
            return Err(CalibrationError::InvalidTarget(
                "SNR target must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One clean image with its tissue masks.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    pub volume: Volume3D,
    pub masks: TissueMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeScore {
    pub range: ParamRange,
    pub mean: f64,
    pub n: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub artefact: Artefact,
    pub target: CalibrationTarget,
    pub chosen: ParamRange,
    pub chosen_index: usize,
    pub table: Vec<RangeScore>,
}

impl CalibrationResult {
    pub const TSV_HEADER: &'static str =
        "artefact\tseverity\tmetric\tlo\thi\tmean\tn\tdistance\tchosen";

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::TSV_HEADER)?;
        for (i, row) in self.table.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.artefact,
                self.target.severity,
                self.target.metric.as_str(),
                row.range.lo(),
                row.range.hi(),
                row.mean,
                row.n,
                row.distance,
                i == self.chosen_index
            )?;
        }
        Ok(())
    }
}

/// Corrupts every corpus image once per range (and repetition), averages the
/// target metric per range and selects the range closest to the target mean.
///
/// Each (image, repetition) pair uses the same derived seed for every range, so
/// ranges are compared on common random draws.
pub fn calibrate_range(
    corpus: &[CorpusEntry],
    candidates: &CandidateSet,
    target: &CalibrationTarget,
    seed: u64,
    repetitions: usize,
) -> Result<CalibrationResult, CalibrationError> {
    candidates.validate()?;
    target.validate()?;
    if corpus.is_empty() {
        return Err(CalibrationError::EmptyCorpus);
    }
    if repetitions == 0 {
        return Err(CalibrationError::ZeroRepetitions);
    }
    let per_range = corpus.len() * repetitions;
    let jobs: Vec<(usize, usize, usize)> = (0..candidates.ranges.len())
        .flat_map(|r| (0..corpus.len()).flat_map(move |v| (0..repetitions).map(move |k| (r, v, k))))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(r, v, k)| {
            let entry = &corpus[v];
            let params = candidates.params(
                candidates.ranges[r],
                derive_seed(seed, &[v as u64, k as u64]),
            );
            let (corrupted, _) = params.apply(&entry.volume);
            target
                .metric
                .evaluate(&corrupted, &entry.masks)
                .map_err(|source| CalibrationError::Metric {
                    image_id: entry.id.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;

    let table: Vec<RangeScore> = candidates
        .ranges
        .iter()
        .zip(values.chunks(per_range))
        .map(|(&range, vals)| {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            RangeScore {
                range,
                mean,
                n: vals.len(),
                distance: (mean - target.target_mean).abs(),
            }
        })
        .collect();
    let chosen_index = table
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.distance.total_cmp(&b.1.distance).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("non-empty table");
    Ok(CalibrationResult {
        artefact: candidates.artefact,
        target: *target,
        chosen: table[chosen_index].range,
        chosen_index,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_phantom, PhantomSpec};

    fn corpus(n: usize) -> Vec<CorpusEntry> {
        let spec = PhantomSpec {
            dims: [24; 3],
            ..PhantomSpec::scanner_scale()
        };
        (0..n)
            .map(|i| {
                let (volume, masks) = generate_phantom(&spec, i);
                CorpusEntry {
                    id: format!("sub-{i:04}"),
                    volume,
                    masks,
                }
            })
            .collect()
    }

    fn target_at_sigma(c: &[CorpusEntry], sigma: f64, seed: u64) -> f64 {
        let fixed = CandidateSet::new(Artefact::Noise, vec![ParamRange::fixed(sigma)]).unwrap();
        let t = CalibrationTarget {
            metric: CalibrationMetric::Snr,
            target_mean: 1.0,
            severity: Severity::Severe,
        };
        calibrate_range(c, &fixed, &t, seed, 1).unwrap().table[0].mean
    }

    #[test]
    fn recovers_interior_noise_ranges() {
        let c = corpus(4);
        let cands = CandidateSet::noise();
        for (sigma, expected) in [(20.0, 3), (10.0, 1)] {
            let t = CalibrationTarget {
                metric: CalibrationMetric::Snr,
                target_mean: target_at_sigma(&c, sigma, 77),
                severity: Severity::Severe,
            };
            let r = calibrate_range(&c, &cands, &t, 3, 1).unwrap();
            assert_eq!(r.chosen_index, expected, "{sigma}: {:?}", r.table);
            assert!(cands.ranges.contains(&r.chosen));
        }
    }

    #[test]
    fn single_candidate_always_wins() {
        let c = corpus(2);
        let set = CandidateSet::new(Artefact::Noise, vec![ParamRange(5.0, 15.0)]).unwrap();
        let t = CalibrationTarget::clinical(CalibrationMetric::Snr, Severity::Moderate);
        assert_eq!(
            calibrate_range(&c, &set, &t, 0, 1).unwrap().chosen,
            ParamRange(5.0, 15.0)
        );
    }

    #[test]
    fn ties_go_to_the_earlier_range() {
        let c = corpus(2);
        let set = CandidateSet::new(
            Artefact::Noise,
            vec![ParamRange::fixed(8.0), ParamRange::fixed(8.0)],
        )
        .unwrap();
        let t = CalibrationTarget::clinical(CalibrationMetric::Snr, Severity::Moderate);
        let r = calibrate_range(&c, &set, &t, 0, 2).unwrap();
        assert_eq!(r.table[0].mean.to_bits(), r.table[1].mean.to_bits());
        assert_eq!(r.chosen_index, 0);
    }

    #[test]
    fn contrast_means_decrease_with_beta_and_repeat_exactly() {
        let c = corpus(3);
        let set = CandidateSet::new(
            Artefact::Contrast,
            vec![
                ParamRange::fixed(0.0),
                ParamRange(-0.2, -0.05),
                ParamRange(-0.45, -0.3),
            ],
        )
        .unwrap();
        let t = CalibrationTarget::clinical(CalibrationMetric::NdWgm, Severity::Severe);
        let a = calibrate_range(&c, &set, &t, 9, 1).unwrap();
        let b = calibrate_range(&c, &set, &t, 9, 1).unwrap();
        assert_eq!(a, b);
        assert!(
            a.table[0].mean > a.table[1].mean && a.table[1].mean > a.table[2].mean,
            "{:?}",
            a.table
        );
    }

    #[test]
    fn metric_failure_names_the_image() {
        let mut c = corpus(2);
        c[1].masks.air.iter_mut().for_each(|v| *v = false);
        let t = CalibrationTarget::clinical(CalibrationMetric::Snr, Severity::Moderate);
        match calibrate_range(&c, &CandidateSet::noise(), &t, 0, 1) {
            Err(CalibrationError::Metric { image_id, .. }) => assert_eq!(image_id, "sub-0001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            CandidateSet::new(Artefact::Motion, vec![ParamRange(0.0, 1.0)]),
            Err(CalibrationError::UnsupportedArtefact(_))
        ));
        assert!(matches!(
            CandidateSet::new(Artefact::Noise, vec![]),
            Err(CalibrationError::EmptyCandidates)
        ));
        assert!(matches!(
            CandidateSet::new(Artefact::Noise, vec![ParamRange(3.0, 1.0)]),
            Err(CalibrationError::InvalidRange(_))
        ));
        let bad = CalibrationTarget {
            metric: CalibrationMetric::Snr,
            target_mean: -1.0,
            severity: Severity::Moderate,
        };
        assert!(bad.validate().is_err());
        let t = CalibrationTarget::clinical(CalibrationMetric::Snr, Severity::Moderate);
        assert!(matches!(
            calibrate_range(&[], &CandidateSet::noise(), &t, 0, 1),
            Err(CalibrationError::EmptyCorpus)
        ));
    }

    #[test]
    fn tsv_marks_the_chosen_row() {
        let c = corpus(1);
        let t = CalibrationTarget::clinical(CalibrationMetric::Snr, Severity::Severe);
        let r = calibrate_range(&c, &CandidateSet::noise(), &t, 0, 1).unwrap();
        let mut buf = Vec::new();
        r.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(text.lines().filter(|l| l.ends_with("\ttrue")).count(), 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]

        #[test]
        fn chosen_range_is_a_candidate(target in 1.0f64..150.0, seed in 0u64..100) {
            let corpus = corpus(2);
            let set = CandidateSet::noise();
            let t = CalibrationTarget {
                metric: CalibrationMetric::Snr,
                target_mean: target,
                severity: Severity::Moderate,
            };
            let r = calibrate_range(&corpus, &set, &t, seed, 1).unwrap();
            proptest::prop_assert_eq!(set.ranges[r.chosen_index], r.chosen);
            let best = r.table.iter().map(|s| s.distance).fold(f64::INFINITY, f64::min);
            proptest::prop_assert_eq!(r.table[r.chosen_index].distance, best);
        }
    }
}
