//! Corpus bookkeeping: manifests, phantom corpora, pre-training and tier
//! corpora, subject-level splits and rendering of corrupted images.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{grades_to_tier, Tier};
use crate::metrics::TissueMasks;
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulate::{Artefact, ArtefactParams, Sampled, Severity, SeverityPreset};
use crate::volume::{load_nifti, save_nifti, RigidTransform, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest is empty")]
    Empty,
    #[error("row {row} ({path}) is not artefact-free")]
    NotClean { row: usize, path: String },
    #[error("need at least {needed} clean images, got {got}")]
    InsufficientImages { needed: usize, got: usize },
    #[error("need at least {needed} distinct subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("grade {0} outside 0..=2")]
    InvalidGrade(u8),
    #[error("subject {0} appears in more than one split or fold")]
    Leak(String),
    #[error("row {0} has no provenance that can be rendered")]
    CannotRender(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-artefact grades on the three-level scale (0 none, 1 moderate, 2 severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ArtefactGrades {
    pub motion: u8,
    pub noise: u8,
    pub contrast: u8,
}

impl ArtefactGrades {
    pub fn new(motion: u8, noise: u8, contrast: u8) -> Result<Self, DatasetError> {
        for g in [motion, noise, contrast] {
            if g > 2 {
                return Err(DatasetError::InvalidGrade(g));
            }
        }
        Ok(Self {
            motion,
            noise,
            contrast,
        })
    }

    pub fn clean() -> Self {
        Self::default()
    }

    pub fn is_clean(&self) -> bool {
        *self == Self::clean()
    }

    pub fn get(&self, a: Artefact) -> u8 {
        match a {
            Artefact::Motion => self.motion,
            Artefact::Noise => self.noise,
            Artefact::Contrast => self.contrast,
        }
    }

    pub fn set(&mut self, a: Artefact, grade: u8) {
        match a {
            Artefact::Motion => self.motion = grade,
            Artefact::Noise => self.noise = grade,
            Artefact::Contrast => self.contrast = grade,
        }
    }

    /// All 27 valid grade triples.
    pub fn all() -> impl Iterator<Item = ArtefactGrades> {
        (0..27u8).map(|i| ArtefactGrades {
            motion: i / 9,
            noise: (i / 3) % 3,
            contrast: i % 3,
        })
    }
}

/// A binary classification task, labelled from grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Motion0vs1,
    Motion01vs2,
    Contrast0vs1,
    Contrast01vs2,
    Noise0vs1,
    Noise0vs12,
    Tier1vs2,
    Tier12vs3,
}

impl Task {
    pub const ARTEFACT_TASKS: [Task; 6] = [
        Task::Motion0vs1,
        Task::Motion01vs2,
        Task::Contrast0vs1,
        Task::Contrast01vs2,
        Task::Noise0vs1,
        Task::Noise0vs12,
    ];
    pub const TIER_TASKS: [Task; 2] = [Task::Tier1vs2, Task::Tier12vs3];

    pub fn name(self) -> &'static str {
        match self {
            Task::Motion0vs1 => "motion0vs1",
            Task::Motion01vs2 => "motion01vs2",
            Task::Contrast0vs1 => "contrast0vs1",
            Task::Contrast01vs2 => "contrast01vs2",
            Task::Noise0vs1 => "noise0vs1",
            Task::Noise0vs12 => "noise0vs12",
            Task::Tier1vs2 => "tier1vs2",
            Task::Tier12vs3 => "tier12vs3",
        }
    }

    /// Target artefact of an artefact task.
    pub fn artefact(self) -> Option<Artefact> {
        match self {
            Task::Motion0vs1 | Task::Motion01vs2 => Some(Artefact::Motion),
            Task::Contrast0vs1 | Task::Contrast01vs2 => Some(Artefact::Contrast),
            Task::Noise0vs1 | Task::Noise0vs12 => Some(Artefact::Noise),
            Task::Tier1vs2 | Task::Tier12vs3 => None,
        }
    }

    /// Whether the positive class is the severe one.
    pub fn is_severe(self) -> bool {
        matches!(
            self,
            Task::Motion01vs2 | Task::Contrast01vs2 | Task::Noise0vs12 | Task::Tier12vs3
        )
    }

    /// Binary label of an image with these grades, or `None` if the task excludes it.
    pub fn label(self, g: &ArtefactGrades) -> Option<bool> {
        let by_grade = |grade: u8| match self {
            Task::Motion0vs1 | Task::Contrast0vs1 | Task::Noise0vs1 => match grade {
                0 => Some(false),
                1 => Some(true),
                _ => None,
            },
            Task::Motion01vs2 | Task::Contrast01vs2 => Some(grade == 2),
            Task::Noise0vs12 => Some(grade > 0),
            Task::Tier1vs2 | Task::Tier12vs3 => unreachable!(),
        };
        match self.artefact() {
            Some(a) => by_grade(g.get(a)),
            None => {
                let tier = grades_to_tier(g).value();
                match self {
                    Task::Tier1vs2 => (tier < 3).then_some(tier == 2),
                    _ => Some(tier == 3),
                }
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ARTEFACT_TASKS
            .into_iter()
            .chain(Task::TIER_TASKS)
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Task::ARTEFACT_TASKS
                    .iter()
                    .chain(&Task::TIER_TASKS)
                    .map(|t| t.name())
                    .collect();
                format!("unknown task '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Synthetic two-tissue head phantom parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub wm_intensity: f64,
    pub gm_intensity: f64,
    pub background: f64,
    /// Per-axis rotation jitter bound in degrees.
    pub rotation_jitter_deg: f64,
    /// Per-axis translation jitter bound in millimetres.
    pub translation_jitter_mm: f64,
    /// Relative jitter of the ellipsoid semi-axes.
    pub radius_jitter: f64,
    /// Amplitude of the smooth multiplicative intensity field.
    pub field_amplitude: f64,
    /// Global factor applied to all tissue intensities.
    pub intensity_scale: f64,
    /// Standard deviation of the acquisition noise present in every clean phantom.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            spacing: [1.0; 3],
            wm_intensity: 0.8,
            gm_intensity: 0.6,
            background: 0.0,
            rotation_jitter_deg: 8.0,
            translation_jitter_mm: 1.5,
            radius_jitter: 0.08,
            field_amplitude: 0.03,
            intensity_scale: 1.0,
            background_noise: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Constant tissues, no jitter and no noise.
    pub fn exact(dims: [usize; 3]) -> Self {
        Self {
            dims,
            rotation_jitter_deg: 0.0,
            translation_jitter_mm: 0.0,
            radius_jitter: 0.0,
            field_amplitude: 0.0,
            ..Self::default()
        }
    }

    /// Intensities on a raw scanner-like scale with baseline acquisition noise,
    /// so the published noise ranges are meaningful.
    pub fn scanner_scale() -> Self {
        Self {
            intensity_scale: 500.0,
            background_noise: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let ok = self.wm_intensity > self.gm_intensity
            && self.gm_intensity > self.background
            && self.background >= 0.0
            && self.intensity_scale > 0.0
            && self.background_noise >= 0.0
            && self.dims.iter().all(|&d| d >= 1)
            && self.spacing.iter().all(|&s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DatasetError::Parse {
                line: 0,
                reason: "phantom spec requires WM > GM > background >= 0 and positive geometry"
                    .into(),
            })
        }
    }
}

/// One phantom of a corpus: nested ellipsoids (WM core inside a GM shell) in air.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> (Volume3D, TissueMasks) {
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[index as u64]));
    let mut jitter = |bound: f64| {
        if bound > 0.0 {
            rng.gen_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let extent = [0, 1, 2].map(|i| spec.dims[i] as f64 * spec.spacing[i]);
    let outer =
        [0, 1, 2].map(|i| [0.36, 0.42, 0.34][i] * extent[i] * (1.0 + jitter(spec.radius_jitter)));
    let inner = [0, 1, 2].map(|i| 0.62 * outer[i] * (1.0 + 0.5 * jitter(spec.radius_jitter)));
    let pose = RigidTransform::new(
        [0; 3].map(|_| jitter(spec.rotation_jitter_deg)),
        [0; 3].map(|_| jitter(spec.translation_jitter_mm)),
    );
    let phases = [0; 3].map(|_| jitter(std::f64::consts::PI));
    let inverse = pose.motion().inverse();
    let centre = [0, 1, 2].map(|i| (spec.dims[i] as f64 - 1.0) / 2.0 * spec.spacing[i]);
    let mut noise_rng = rng_from_seed(derive_seed(spec.seed, &[index as u64, 1]));

    let mut masks = TissueMasks::empty(spec.dims);
    let mut data = Vec::with_capacity(spec.dims.iter().product());
    let mut i = 0;
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let p = [x, y, z];
                let world = [0, 1, 2].map(|a| p[a] as f64 * spec.spacing[a] - centre[a]);
                let q = inverse.apply(world);
                let r_outer: f64 = (0..3).map(|a| (q[a] / outer[a]).powi(2)).sum();
                let r_inner: f64 = (0..3).map(|a| (q[a] / inner[a]).powi(2)).sum();
                let field = 1.0
                    + spec.field_amplitude
                        * (0..3)
                            .map(|a| {
                                (2.0 * std::f64::consts::PI * p[a] as f64 / spec.dims[a] as f64
                                    + phases[a])
                                    .sin()
                            })
                            .sum::<f64>()
                        / 3.0;
                let tissue = if r_inner <= 1.0 {
                    masks.wm[i] = true;
                    spec.wm_intensity * field
                } else if r_outer <= 1.0 {
                    masks.gm[i] = true;
                    spec.gm_intensity * field
                } else {
                    masks.air[i] = true;
                    spec.background
                };
                let mut v = spec.intensity_scale * tissue;
                if spec.background_noise > 0.0 {
                    let n: f64 = noise_rng.sample(StandardNormal);
                    v += spec.background_noise * n;
                }
                data.push(v);
                i += 1;
            }
        }
    }
    let vol =
        Volume3D::from_data(spec.dims, spec.spacing, data).expect("phantom voxels are finite");
    (vol, masks)
}

/// One step of a corruption chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStep {
    pub preset: Option<SeverityPreset>,
    pub params: ArtefactParams,
    pub sampled: Sampled,
}

impl CorruptionStep {
    pub fn from_preset(preset: SeverityPreset, seed: u64) -> Self {
        Self::from_params(Some(preset), preset.params(seed))
    }

    pub fn from_params(preset: Option<SeverityPreset>, params: ArtefactParams) -> Self {
        Self {
            preset,
            sampled: params.draw(),
            params,
        }
    }
}

/// How an image came to be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    /// An acquired image; nothing to regenerate.
    Real,
    /// Phantom number `index` of a corpus generated from `spec`.
    Phantom { spec: PhantomSpec, index: usize },
    /// `source` with `steps` applied in order (no steps: a copy).
    Corrupted {
        source: String,
        steps: Vec<CorruptionStep>,
    },
}

impl Provenance {
    fn to_field(&self) -> String {
        match self {
            Provenance::Real => "real".to_owned(),
            other => serde_json::to_string(other).expect("provenance serializes"),
        }
    }

    fn from_field(s: &str) -> Result<Self, String> {
        if s == "real" {
            Ok(Provenance::Real)
        } else {
            serde_json::from_str(s).map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub subject_id: String,
    pub grades: Option<ArtefactGrades>,
    pub tier: Option<Tier>,
    pub split: Option<Split>,
    pub fold: Option<usize>,
    pub provenance: Provenance,
}

impl ManifestRow {
    pub fn label(&self, task: Task) -> Option<bool> {
        self.grades.as_ref().and_then(|g| task.label(g))
    }
}

pub const MANIFEST_HEADER: [&str; 9] = [
    "image_path",
    "subject_id",
    "grade_motion",
    "grade_noise",
    "grade_contrast",
    "tier",
    "split",
    "fold",
    "provenance_json",
];

/// Tabular corpus description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".to_owned())
}

fn parse_opt<T: FromStr>(s: &str, line: usize, what: &str) -> Result<Option<T>, DatasetError> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| DatasetError::Parse {
        line,
        reason: format!("invalid {what} '{s}'"),
    })
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", MANIFEST_HEADER.join("\t"))?;
        for r in &self.rows {
            let (m, n, c) = match r.grades {
                Some(g) => (
                    g.motion.to_string(),
                    g.noise.to_string(),
                    g.contrast.to_string(),
                ),
                None => ("NA".into(), "NA".into(), "NA".into()),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.image_path,
                r.subject_id,
                m,
                n,
                c,
                opt(r.tier),
                opt(r.split.map(Split::as_str)),
                opt(r.fold),
                r.provenance.to_field()
            )?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|source| DatasetError::Io {
                path: "<manifest>".into(),
                source,
            })?;
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if i == 0 {
                if fields != MANIFEST_HEADER {
                    return Err(DatasetError::Parse {
                        line: 1,
                        reason: format!("expected header {}", MANIFEST_HEADER.join(",")),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if fields.len() != MANIFEST_HEADER.len() {
                return Err(DatasetError::Parse {
                    line: lineno,
                    reason: format!(
                        "expected {} fields, got {}",
                        MANIFEST_HEADER.len(),
                        fields.len()
                    ),
                });
            }
            if fields[1].is_empty() {
                return Err(DatasetError::Parse {
                    line: lineno,
                    reason: "empty subject_id".into(),
                });
            }
            let gm: Option<u8> = parse_opt(fields[2], lineno, "grade")?;
            let gn: Option<u8> = parse_opt(fields[3], lineno, "grade")?;
            let gc: Option<u8> = parse_opt(fields[4], lineno, "grade")?;
            let grades = match (gm, gn, gc) {
                (Some(m), Some(n), Some(c)) => Some(ArtefactGrades::new(m, n, c)?),
                (None, None, None) => None,
                _ => {
                    return Err(DatasetError::Parse {
                        line: lineno,
                        reason: "grades must be all present or all NA".into(),
                    })
                }
            };
            let tier: Option<u8> = parse_opt(fields[5], lineno, "tier")?;
            let tier = tier
                .map(Tier::new)
                .transpose()
                .map_err(|e| DatasetError::Parse {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            rows.push(ManifestRow {
                image_path: fields[0].to_owned(),
                subject_id: fields[1].to_owned(),
                grades,
                tier,
                split: parse_opt(fields[6], lineno, "split")?,
                fold: parse_opt(fields[7], lineno, "fold")?,
                provenance: Provenance::from_field(fields[8]).map_err(|reason| {
                    DatasetError::Parse {
                        line: lineno,
                        reason,
                    }
                })?,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_tsv(std::io::BufReader::new(f))
    }

    /// Fails if a subject has rows in different splits or different folds.
    pub fn check_no_leakage(&self) -> Result<(), DatasetError> {
        let mut seen: HashMap<&str, (Option<Split>, Option<usize>)> = HashMap::new();
        for r in &self.rows {
            let key = (r.split, r.fold);
            if let Some(prev) = seen.insert(&r.subject_id, key) {
                if prev != key {
                    return Err(DatasetError::Leak(r.subject_id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn filter(&self, keep: impl Fn(&ManifestRow) -> bool) -> Manifest {
        Manifest {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn subject_id(index: usize) -> String {
    format!("sub-{index:04}")
}

/// A phantom corpus with exact masks and a manifest of clean images.
pub fn generate_phantoms(
    spec: &PhantomSpec,
    n: usize,
) -> Result<(Vec<(Volume3D, TissueMasks)>, Manifest), DatasetError> {
    spec.validate()?;
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let images: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| generate_phantom(spec, i))
        .collect();
    let rows = (0..n)
        .map(|i| {
            let sub = subject_id(i);
            ManifestRow {
                image_path: format!("{sub}/{sub}_T1w.nii"),
                subject_id: sub,
                grades: Some(ArtefactGrades::clean()),
                tier: Some(Tier::GOOD),
                split: None,
                fold: None,
                provenance: Provenance::Phantom {
                    spec: *spec,
                    index: i,
                },
            }
        })
        .collect();
    Ok((images, Manifest { rows }))
}

/// Writes phantoms, their masks and `manifest.tsv` under `out_dir`.
pub fn write_phantom_tree(
    out_dir: &Path,
    images: &[(Volume3D, TissueMasks)],
    manifest: &Manifest,
) -> Result<(), DatasetError> {
    images.par_iter().zip(&manifest.rows).try_for_each(
        |((vol, masks), row)| -> Result<(), DatasetError> {
            let path = out_dir.join(&row.image_path);
            let dir = path.parent().expect("image path has a parent");
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            save_nifti(vol, &path)?;
            for (name, mask) in [("wm", &masks.wm), ("gm", &masks.gm), ("air", &masks.air)] {
                let mpath = dir.join(format!("{}_{name}.nii", row.subject_id));
                save_nifti(&TissueMasks::to_volume(mask, vol), &mpath)?;
            }
            Ok(())
        },
    )?;
    manifest.save(&out_dir.join("manifest.tsv"))
}

/// Mask paths written next to a phantom image by [`write_phantom_tree`].
pub fn mask_paths(image_path: &Path, subject_id: &str) -> [PathBuf; 3] {
    let dir = image_path.parent().unwrap_or(Path::new("."));
    ["wm", "gm", "air"].map(|n| dir.join(format!("{subject_id}_{n}.nii")))
}

fn check_clean(clean: &Manifest, needed: usize) -> Result<(), DatasetError> {
    if clean.is_empty() {
        return Err(DatasetError::Empty);
    }
    for (i, r) in clean.rows.iter().enumerate() {
        if !r.grades.map(|g| g.is_clean()).unwrap_or(false) {
            return Err(DatasetError::NotClean {
                row: i,
                path: r.image_path.clone(),
            });
        }
    }
    if clean.len() < needed {
        return Err(DatasetError::InsufficientImages {
            needed,
            got: clean.len(),
        });
    }
    Ok(())
}

/// The two non-target artefacts of a task, in round-robin order.
pub fn other_artefacts(target: Artefact) -> [Artefact; 2] {
    match target {
        Artefact::Motion => [Artefact::Contrast, Artefact::Noise],
        Artefact::Noise => [Artefact::Motion, Artefact::Contrast],
        Artefact::Contrast => [Artefact::Motion, Artefact::Noise],
    }
}

fn preset_code(p: SeverityPreset) -> u64 {
    SeverityPreset::all()
        .iter()
        .position(|q| *q == p)
        .expect("known preset") as u64
}

/// Corrupted copy of `source` with the given presets applied in order.
fn corrupted_row(
    source: &ManifestRow,
    dir: &str,
    presets: &[SeverityPreset],
    seed: u64,
    source_index: usize,
) -> ManifestRow {
    let mut grades = ArtefactGrades::clean();
    let mut tag = String::new();
    let steps: Vec<CorruptionStep> = presets
        .iter()
        .map(|&p| {
            grades.set(p.artefact, p.severity.grade());
            if !tag.is_empty() {
                tag.push('+');
            }
            tag.push_str(&format!("{}-{}", p.artefact, p.severity));
            CorruptionStep::from_preset(
                p,
                derive_seed(seed, &[source_index as u64, preset_code(p)]),
            )
        })
        .collect();
    if tag.is_empty() {
        tag.push_str("clean");
    }
    ManifestRow {
        image_path: format!("{dir}/{}_{tag}.nii", source.subject_id),
        subject_id: source.subject_id.clone(),
        grades: Some(grades),
        tier: Some(grades_to_tier(&grades)),
        split: None,
        fold: None,
        provenance: Provenance::Corrupted {
            source: source.image_path.clone(),
            steps,
        },
    }
}

/// Pre-training corpus of one artefact task.
///
/// Label 0 holds equal thirds of artefact-free images and images with moderate
/// corruption by each of the two other artefacts (remainders round-robin in
/// that order). Label 1 holds every clean image corrupted with the target
/// artefact at the task's severity. For the `01vs2` tasks label 0 also holds
/// every image at the target's moderate level; the noise severe task draws its
/// positives alternately from the moderate and severe presets.
pub fn build_pretrain_corpus(
    clean: &Manifest,
    task: Task,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    let target = task
        .artefact()
        .ok_or_else(|| DatasetError::CannotRender(format!("{task} is not an artefact task")))?;
    check_clean(clean, 3)?;
    let [b, c] = other_artefacts(target);
    let dir = task.name();
    let seed = derive_seed(seed, &[task as u64]);
    let moderate = |a| SeverityPreset::new(a, Severity::Moderate);
    let severe = |a| SeverityPreset::new(a, Severity::Severe);
    let mut rows = Vec::with_capacity(3 * clean.len());
    for (i, src) in clean.rows.iter().enumerate() {
        let cell: &[SeverityPreset] = match i % 3 {
            0 => &[],
            1 => &[moderate(b)],
            _ => &[moderate(c)],
        };
        rows.push(corrupted_row(src, dir, cell, seed, i));
    }
    for (i, src) in clean.rows.iter().enumerate() {
        match task {
            Task::Motion0vs1 | Task::Contrast0vs1 | Task::Noise0vs1 => {
                rows.push(corrupted_row(src, dir, &[moderate(target)], seed, i));
            }
            Task::Motion01vs2 | Task::Contrast01vs2 => {
                rows.push(corrupted_row(src, dir, &[moderate(target)], seed, i));
                rows.push(corrupted_row(src, dir, &[severe(target)], seed, i));
            }
            Task::Noise0vs12 => {
                let p = if i % 2 == 0 {
                    moderate(target)
                } else {
                    severe(target)
                };
                rows.push(corrupted_row(src, dir, &[p], seed, i));
            }
            Task::Tier1vs2 | Task::Tier12vs3 => unreachable!(),
        }
    }
    Ok(Manifest { rows })
}

/// Pre-training corpora for all six artefact tasks.
pub fn build_pretrain_corpora(
    clean: &Manifest,
    seed: u64,
) -> Result<Vec<(Task, Manifest)>, DatasetError> {
    Task::ARTEFACT_TASKS
        .iter()
        .map(|&t| build_pretrain_corpus(clean, t, seed).map(|m| (t, m)))
        .collect()
}

/// Tier-labelled corpus: every clean image yields one image per tier.
///
/// Tier 1 is the clean image, tier 2 a random non-empty set of moderate
/// artefacts, tier 3 one severe artefact plus a random subset of moderate ones.
/// Artefacts are applied in the order motion, contrast, noise.
pub fn build_tier_corpus(clean: &Manifest, seed: u64) -> Result<Manifest, DatasetError> {
    check_clean(clean, 1)?;
    const ORDER: [Artefact; 3] = [Artefact::Motion, Artefact::Contrast, Artefact::Noise];
    let mut rows = Vec::with_capacity(3 * clean.len());
    for (i, src) in clean.rows.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &[i as u64, u64::MAX]));
        rows.push(corrupted_row(src, "tiers", &[], seed, i));

        let subset = rng.gen_range(1..8u8);
        let tier2: Vec<SeverityPreset> = ORDER
            .iter()
            .enumerate()
            .filter(|(k, _)| subset & (1 << k) != 0)
            .map(|(_, &a)| SeverityPreset::new(a, Severity::Moderate))
            .collect();
        rows.push(corrupted_row(
            src,
            "tiers",
            &tier2,
            derive_seed(seed, &[2]),
            i,
        ));

        let severe_idx = rng.gen_range(0..3);
        let tier3: Vec<SeverityPreset> = ORDER
            .iter()
            .enumerate()
            .filter_map(|(k, &a)| {
                if k == severe_idx {
                    Some(SeverityPreset::new(a, Severity::Severe))
                } else if rng.gen_bool(0.5) {
                    Some(SeverityPreset::new(a, Severity::Moderate))
                } else {
                    None
                }
            })
            .collect();
        rows.push(corrupted_row(
            src,
            "tiers",
            &tier3,
            derive_seed(seed, &[3]),
            i,
        ));
    }
    Ok(Manifest { rows })
}

/// Subject-level split: test subjects first, then `folds` cross-validation folds.
///
/// Subject ids are sorted before the seeded shuffle so the assignment does not
/// depend on row order. Non-test rows get split `train` and a fold index.
pub fn split_by_subject(
    m: &Manifest,
    folds: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    let mut subjects = m.subjects();
    let n = subjects.len();
    let mut n_test = (test_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    if test_fraction > 0.0 && n_test == 0 {
        n_test = 1;
    }
    let folds = folds.max(1);
    if n < n_test + folds {
        return Err(DatasetError::TooFewSubjects {
            needed: n_test + folds,
            got: n,
        });
    }
    subjects.shuffle(&mut rng_from_seed(seed));
    let assignment: BTreeMap<String, (Split, Option<usize>)> = subjects
        .into_iter()
        .enumerate()
        .map(|(pos, s)| {
            if pos < n_test {
                (s, (Split::Test, None))
            } else {
                (s, (Split::Train, Some((pos - n_test) % folds)))
            }
        })
        .collect();
    let rows = m
        .rows
        .iter()
        .map(|r| {
            let (split, fold) = assignment[&r.subject_id];
            ManifestRow {
                split: Some(split),
                fold,
                ..r.clone()
            }
        })
        .collect();
    Ok(Manifest { rows })
}

/// Regenerates an image from its provenance; `load` resolves source paths.
pub fn render(
    row: &ManifestRow,
    load: &(dyn Fn(&str) -> Result<Volume3D, DatasetError> + Sync),
) -> Result<Volume3D, DatasetError> {
    match &row.provenance {
        Provenance::Real => Err(DatasetError::CannotRender(row.image_path.clone())),
        Provenance::Phantom { spec, index } => Ok(generate_phantom(spec, *index).0),
        Provenance::Corrupted { source, steps } => {
            let mut vol = load(source)?;
            for s in steps {
                vol = s.params.apply(&vol).0;
            }
            Ok(vol)
        }
    }
}

/// Renders every row in parallel, in manifest order.
pub fn render_all(
    m: &Manifest,
    load: &(dyn Fn(&str) -> Result<Volume3D, DatasetError> + Sync),
) -> Result<Vec<Volume3D>, DatasetError> {
    m.rows.par_iter().map(|r| render(r, load)).collect()
}

/// Loader over an in-memory map from image path to volume.
pub fn memory_loader(
    images: &HashMap<String, Volume3D>,
) -> impl Fn(&str) -> Result<Volume3D, DatasetError> + Sync + '_ {
    move |p: &str| {
        images
            .get(p)
            .cloned()
            .ok_or_else(|| DatasetError::CannotRender(p.to_owned()))
    }
}

/// Loader reading NIfTI files, resolving relative paths against `root`.
pub fn file_loader(root: PathBuf) -> impl Fn(&str) -> Result<Volume3D, DatasetError> + Sync {
    move |p: &str| Ok(load_nifti(root.join(p))?)
}

/// Renders every row to `out_dir/image_path` and writes `out_dir/manifest.tsv`.
pub fn materialize(
    m: &Manifest,
    out_dir: &Path,
    load: &(dyn Fn(&str) -> Result<Volume3D, DatasetError> + Sync),
) -> Result<(), DatasetError> {
    m.rows
        .par_iter()
        .try_for_each(|r| -> Result<(), DatasetError> {
            let vol = render(r, load)?;
            let path = out_dir.join(&r.image_path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            save_nifti(&vol, &path)?;
            Ok(())
        })?;
    m.save(&out_dir.join("manifest.tsv"))
}
