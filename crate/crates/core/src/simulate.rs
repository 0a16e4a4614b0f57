//! Artefact simulation: rigid-motion ghosting in k-space, additive Gaussian
//! noise and gamma contrast degradation.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::volume::{
    fft3, ifft3_complex, normalize_minmax, resample_rigid, KSpace, RigidTransform, Volume3D,
};

/// Closed parameter interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange(pub f64, pub f64);

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self(lo, hi)
    }

    pub fn fixed(v: f64) -> Self {
        Self(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn is_valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.0..=self.1).contains(&v)
    }

    /// Uniform draw; a degenerate range returns its bound without consuming randomness.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            return self.0;
        }
        (self.0 + (self.1 - self.0) * rng.gen::<f64>()).clamp(self.0, self.1)
    }
}

impl fmt::Display for ParamRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub num_positions: usize,
    /// Per-axis rotation magnitude in degrees.
    pub rotation_range: ParamRange,
    /// Per-axis translation magnitude in millimetres.
    pub translation_range: ParamRange,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_range: ParamRange,
    pub seed: u64,
}

/// Exponent convention for the gamma operator on normalized intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaConvention {
    /// `I^(e^β)`: negative β flattens white/grey matter contrast.
    #[default]
    ExpBeta,
    /// `I^(1/e^β)`: the reciprocal-exponent form.
    ReciprocalExpBeta,
}

impl GammaConvention {
    pub fn exponent(self, beta: f64) -> f64 {
        match self {
            GammaConvention::ExpBeta => beta.exp(),
            GammaConvention::ReciprocalExpBeta => (-beta).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub beta_range: ParamRange,
    pub seed: u64,
    #[serde(default)]
    pub convention: GammaConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Artefact {
    Motion,
    Noise,
    Contrast,
}

impl Artefact {
    pub const ALL: [Artefact; 3] = [Artefact::Motion, Artefact::Noise, Artefact::Contrast];

    pub fn as_str(self) -> &'static str {
        match self {
            Artefact::Motion => "motion",
            Artefact::Noise => "noise",
            Artefact::Contrast => "contrast",
        }
    }
}

impl fmt::Display for Artefact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Artefact {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "motion" => Ok(Artefact::Motion),
            "noise" => Ok(Artefact::Noise),
            "contrast" | "gamma" => Ok(Artefact::Contrast),
            other => Err(format!(
                "unknown artefact '{other}' (expected motion, noise, contrast)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Moderate,
    Severe,
}

impl Severity {
    /// Artefact grade produced by this severity (moderate → 1, severe → 2).
    pub fn grade(self) -> u8 {
        match self {
            Severity::Moderate => 1,
            Severity::Severe => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            other => Err(format!(
                "unknown severity '{other}' (expected moderate, severe)"
            )),
        }
    }
}

/// Parameters of any one of the three simulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArtefactParams {
    Motion(MotionParams),
    Noise(NoiseParams),
    Gamma(GammaParams),
}

/// Values actually drawn by a simulator run, kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampled {
    Motion { transforms: Vec<RigidTransform> },
    Noise { sigma: f64 },
    Gamma { beta: f64 },
}

impl ArtefactParams {
    pub fn artefact(&self) -> Artefact {
        match self {
            ArtefactParams::Motion(_) => Artefact::Motion,
            ArtefactParams::Noise(_) => Artefact::Noise,
            ArtefactParams::Gamma(_) => Artefact::Contrast,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ArtefactParams::Motion(p) => p.seed = seed,
            ArtefactParams::Noise(p) => p.seed = seed,
            ArtefactParams::Gamma(p) => p.seed = seed,
        }
        self
    }

    /// The values a run with this seed will draw, without touching any image.
    pub fn draw(&self) -> Sampled {
        match self {
            ArtefactParams::Motion(p) => Sampled::Motion {
                transforms: sample_motion_transforms(p),
            },
            ArtefactParams::Noise(p) => Sampled::Noise {
                sigma: p.sigma_range.sample(&mut rng_from_seed(p.seed)),
            },
            ArtefactParams::Gamma(p) => Sampled::Gamma {
                beta: p.beta_range.sample(&mut rng_from_seed(p.seed)),
            },
        }
    }

    pub fn apply(&self, vol: &Volume3D) -> (Volume3D, Sampled) {
        match self {
            ArtefactParams::Motion(p) => {
                let (v, transforms) = simulate_motion(vol, p);
                (v, Sampled::Motion { transforms })
            }
            ArtefactParams::Noise(p) => {
                let (v, sigma) = simulate_noise(vol, p);
                (v, Sampled::Noise { sigma })
            }
            ArtefactParams::Gamma(p) => {
                let (v, beta) = simulate_gamma(vol, p);
                (v, Sampled::Gamma { beta })
            }
        }
    }
}

/// Number of rigid positions used by the motion presets.
pub const MOTION_POSITIONS: usize = 4;

/// A moderate or severe preset for one artefact, with the published ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeverityPreset {
    pub artefact: Artefact,
    pub severity: Severity,
}

impl SeverityPreset {
    pub fn new(artefact: Artefact, severity: Severity) -> Self {
        Self { artefact, severity }
    }

    /// All six presets, motion/noise/contrast × moderate/severe.
    pub fn all() -> [SeverityPreset; 6] {
        let mut out = [SeverityPreset::new(Artefact::Motion, Severity::Moderate); 6];
        let mut i = 0;
        for a in Artefact::ALL {
            for s in [Severity::Moderate, Severity::Severe] {
                out[i] = SeverityPreset::new(a, s);
                i += 1;
            }
        }
        out
    }

    pub fn params(&self, seed: u64) -> ArtefactParams {
        use Severity::*;
        match (self.artefact, self.severity) {
            (Artefact::Motion, Moderate) => ArtefactParams::Motion(MotionParams {
                num_positions: MOTION_POSITIONS,
                rotation_range: ParamRange(2.0, 4.0),
                translation_range: ParamRange(2.0, 4.0),
                seed,
            }),
            (Artefact::Motion, Severe) => ArtefactParams::Motion(MotionParams {
                num_positions: MOTION_POSITIONS,
                rotation_range: ParamRange(5.0, 8.0),
                translation_range: ParamRange(5.0, 8.0),
                seed,
            }),
            (Artefact::Contrast, Moderate) => ArtefactParams::Gamma(GammaParams {
                beta_range: ParamRange(-0.2, -0.05),
                seed,
                convention: GammaConvention::default(),
            }),
            (Artefact::Contrast, Severe) => ArtefactParams::Gamma(GammaParams {
                beta_range: ParamRange(-0.45, -0.3),
                seed,
                convention: GammaConvention::default(),
            }),
            (Artefact::Noise, Moderate) => ArtefactParams::Noise(NoiseParams {
                sigma_range: ParamRange(5.0, 15.0),
                seed,
            }),
            (Artefact::Noise, Severe) => ArtefactParams::Noise(NoiseParams {
                sigma_range: ParamRange(15.0, 25.0),
                seed,
            }),
        }
    }
}

impl fmt::Display for SeverityPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.artefact, self.severity)
    }
}

/// Gamma contrast degradation on min-max normalized intensities, rescaled to the input range.
pub fn simulate_gamma(vol: &Volume3D, p: &GammaParams) -> (Volume3D, f64) {
    let mut rng = rng_from_seed(p.seed);
    let beta = p.beta_range.sample(&mut rng);
    (apply_gamma(vol, beta, p.convention), beta)
}

/// Deterministic gamma operator for a fixed β.
pub fn apply_gamma(vol: &Volume3D, beta: f64, convention: GammaConvention) -> Volume3D {
    let exponent = convention.exponent(beta);
    let (norm, lo, hi) = normalize_minmax(vol);
    let range = hi - lo;
    let data = norm
        .data()
        .iter()
        .map(|&v| (v.powf(exponent) * range + lo).clamp(lo, hi))
        .collect();
    vol.with_data(data)
        .expect("gamma of finite data in [0, 1] is finite")
}

/// Additive zero-mean Gaussian noise in the image domain.
pub fn simulate_noise(vol: &Volume3D, p: &NoiseParams) -> (Volume3D, f64) {
    let mut rng = rng_from_seed(p.seed);
    let sigma = p.sigma_range.sample(&mut rng);
    if sigma == 0.0 {
        return (vol.clone(), sigma);
    }
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect();
    (vol.with_data(data).expect("finite noise"), sigma)
}

fn signed_draw<R: Rng>(range: &ParamRange, rng: &mut R) -> f64 {
    let magnitude = range.sample(rng);
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Draws `num_positions` rigid transforms with per-axis magnitudes in range and random signs.
pub fn sample_motion_transforms(p: &MotionParams) -> Vec<RigidTransform> {
    let mut rng = rng_from_seed(p.seed);
    (0..p.num_positions)
        .map(|_| {
            let rotation_deg = [0; 3].map(|_| signed_draw(&p.rotation_range, &mut rng));
            let translation_mm = [0; 3].map(|_| signed_draw(&p.translation_range, &mut rng));
            RigidTransform {
                rotation_deg,
                translation_mm,
            }
        })
        .collect()
}

/// Index along z into the centred (DC-in-the-middle) ordering.
fn centred_position(z: usize, nz: usize) -> usize {
    (z + nz / 2) % nz
}

/// Owner of each k-space z-plane when `n_blocks` positions share the slowest axis.
///
/// Planes are ordered from the most negative to the most positive frequency and
/// cut into contiguous blocks of (near) equal size.
pub fn kspace_block_owners(nz: usize, n_blocks: usize) -> Vec<usize> {
    (0..nz)
        .map(|z| centred_position(z, nz) * n_blocks / nz)
        .collect()
}

/// Assembles one spectrum from several, plane by plane along z.
pub fn compose_kspace(spectra: &[KSpace], owners: &[usize]) -> KSpace {
    let dims = spectra[0].dims;
    let plane = dims[0] * dims[1];
    let mut out = KSpace::zeros(dims);
    for (z, &owner) in owners.iter().enumerate() {
        let src = &spectra[owner].data[z * plane..(z + 1) * plane];
        out.data[z * plane..(z + 1) * plane].copy_from_slice(src);
    }
    out
}

/// Motion ghosting from an explicit list of positions, each owning an equal block of k-space.
pub fn motion_from_positions(vol: &Volume3D, positions: &[RigidTransform]) -> Volume3D {
    assert!(!positions.is_empty(), "at least one position is required");
    let spectra: Vec<KSpace> = positions
        .iter()
        .map(|t| fft3(&resample_rigid(vol, t)))
        .collect();
    let owners = kspace_block_owners(vol.dims()[2], positions.len());
    let composed = compose_kspace(&spectra, &owners);
    let (lo, hi) = vol.min_max();
    let data: Vec<f64> = ifft3_complex(&composed)
        .into_iter()
        .map(|c: Complex64| c.re.clamp(lo, hi))
        .collect();
    vol.with_data(data)
        .expect("inverse transform of finite spectra is finite")
}

/// Image-based rigid motion simulation.
///
/// The identity pose is prepended to `num_positions` sampled poses; their spectra
/// are interleaved along the slowest axis and transformed back.
pub fn simulate_motion(vol: &Volume3D, p: &MotionParams) -> (Volume3D, Vec<RigidTransform>) {
    assert!(p.num_positions >= 1, "num_positions must be at least 1");
    let sampled = sample_motion_transforms(p);
    let mut positions = Vec::with_capacity(sampled.len() + 1);
    positions.push(RigidTransform::identity());
    positions.extend(sampled.iter().copied());
    (motion_from_positions(vol, &positions), sampled)
}
