//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Pass a substring argument to run only the matching criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdwqc::calibrate::{
    calibrate_range, CalibrationMetric, CalibrationTarget, CandidateSet, CorpusEntry,
};
use cdwqc::cli;
use cdwqc::dataset::{
    build_tier_corpus, generate_phantom, generate_phantoms, split_by_subject, write_phantom_tree,
    ArtefactGrades, Manifest, PhantomSpec,
};
use cdwqc::evaluate::{
    balanced_accuracy, grades_to_tier, recombine_tier, weighted_cohen_kappa, wilcoxon_signed_rank,
    KappaWeighting, SixWayPrediction,
};
use cdwqc::metrics::{nd_wgm, snr, TissueMasks};
use cdwqc::model::{
    loss_and_gradients, Checkpoint, ModelConfig, Network, SectionKind, CONV_PARAM_TENSORS,
};
use cdwqc::rng::{derive_seed, rng_from_seed};
use cdwqc::simulate::{
    simulate_gamma, simulate_motion, simulate_noise, Artefact, GammaConvention, GammaParams,
    MotionParams, NoiseParams, ParamRange, Severity, SeverityPreset,
};
use cdwqc::volume::Volume3D;
use rand::Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Tier rules

/// Table of tiers written out independently of the library rule.
fn reference_tier(m: u8, n: u8, c: u8) -> u8 {
    if m == 2 || n == 2 || c == 2 {
        3
    } else if m == 1 || n == 1 || c == 1 {
        2
    } else {
        1
    }
}

/// Recombination precedence: both noise flags mean tier 3; otherwise severe
/// motion/contrast flags give tier 3, any remaining flag tier 2, none tier 1.
fn reference_recombined(p: &SixWayPrediction) -> u8 {
    if (p.noise_0vs12 && p.noise_0vs1) || p.motion_severe || p.contrast_severe {
        3
    } else if p.motion_moderate || p.contrast_moderate || p.noise_0vs12 || p.noise_0vs1 {
        2
    } else {
        1
    }
}

fn tier_rules() -> Check {
    let mut triples = 0;
    for m in 0..3 {
        for n in 0..3 {
            for c in 0..3 {
                let g = ArtefactGrades::new(m, n, c).map_err(fmt_err)?;
                let got = grades_to_tier(&g).value();
                ensure(got == reference_tier(m, n, c), || {
                    format!("grades ({m},{n},{c}) gave tier {got}")
                })?;
                triples += 1;
            }
        }
    }
    let mut combos = 0;
    for bits in 0..64u8 {
        let p = SixWayPrediction::from_bits(bits);
        let got = recombine_tier(&p).value();
        ensure(got == reference_recombined(&p), || {
            format!("flags {p:?} gave tier {got}")
        })?;
        combos += 1;
    }
    Ok(format!(
        "{triples} grade triples, {combos} flag combinations"
    ))
}

// ---------------------------------------------------------------------------
// Simulation identities

fn max_abs_diff(a: &Volume3D, b: &Volume3D) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn simulation_identity() -> Check {
    let (images, _) = generate_phantoms(&PhantomSpec::scanner_scale(), 3).map_err(fmt_err)?;
    let mut worst = [0.0f64; 2];
    for (i, (vol, _)) in images.iter().enumerate() {
        let seed = 100 + i as u64;
        let (g, beta) = simulate_gamma(
            vol,
            &GammaParams {
                beta_range: ParamRange::fixed(0.0),
                seed,
                convention: GammaConvention::default(),
            },
        );
        ensure(beta == 0.0, || format!("gamma drew {beta}"))?;
        worst[0] = worst[0].max(max_abs_diff(&g, vol));
        let (n, sigma) = simulate_noise(
            vol,
            &NoiseParams {
                sigma_range: ParamRange::fixed(0.0),
                seed,
            },
        );
        ensure(sigma == 0.0 && n.data() == vol.data(), || {
            format!("noise at σ 0 changed image {i}")
        })?;
        let (m, _) = simulate_motion(
            vol,
            &MotionParams {
                num_positions: 4,
                rotation_range: ParamRange::fixed(0.0),
                translation_range: ParamRange::fixed(0.0),
                seed,
            },
        );
        worst[1] = worst[1].max(max_abs_diff(&m, vol));
    }
    ensure(worst[0] <= 1e-6, || {
        format!("gamma identity error {:e}", worst[0])
    })?;
    ensure(worst[1] <= 1e-5, || {
        format!("motion identity error {:e}", worst[1])
    })?;
    Ok(format!(
        "gamma max error {:.1e}, noise exact, motion max error {:.1e}",
        worst[0], worst[1]
    ))
}

// ---------------------------------------------------------------------------
// Metric oracles

fn metric_oracles() -> Check {
    // WM 300, GM 200, air alternating 10/30 (mean 20, population std 10)
    let dims = [4, 4, 4];
    let mut data = vec![0.0; 64];
    let (mut wm, mut gm, mut air) = (vec![false; 64], vec![false; 64], vec![false; 64]);
    for (i, v) in data.iter_mut().enumerate() {
        match i % 4 {
            0 => {
                *v = 300.0;
                wm[i] = true;
            }
            1 => {
                *v = 200.0;
                gm[i] = true;
            }
            _ => {
                *v = if i % 8 < 4 { 10.0 } else { 30.0 };
                air[i] = true;
            }
        }
    }
    let vol = Volume3D::from_data(dims, [1.0; 3], data).map_err(fmt_err)?;
    let masks = TissueMasks::new(dims, wm, gm, air).map_err(fmt_err)?;
    let contrast = nd_wgm(&vol, &masks).map_err(fmt_err)?;
    let ratio = snr(&vol, &masks).map_err(fmt_err)?;
    ensure(contrast == 0.2, || {
        format!("ND-WGM {contrast}, expected 0.2")
    })?;
    ensure(ratio == 30.0, || format!("SNR {ratio}, expected 30"))?;

    let (v, m) = generate_phantom(&PhantomSpec::exact([32; 3]), 0);
    let phantom = nd_wgm(&v, &m).map_err(fmt_err)?;
    ensure((phantom - 0.2 / 1.4).abs() < 1e-12, || {
        format!("constant phantom ND-WGM {phantom}")
    })?;

    // Monte Carlo on a noiseless 64³ phantom.
    let spec = PhantomSpec {
        intensity_scale: 500.0,
        ..PhantomSpec::exact([64; 3])
    };
    let (v, m) = generate_phantom(&spec, 0);
    let wm_mean = spec.wm_intensity * spec.intensity_scale;
    let mut worst = 0.0f64;
    for (k, sigma) in [5.0, 10.0, 20.0, 30.0].into_iter().enumerate() {
        let (noisy, _) = simulate_noise(
            &v,
            &NoiseParams {
                sigma_range: ParamRange::fixed(sigma),
                seed: 7 + k as u64,
            },
        );
        let s = snr(&noisy, &m).map_err(fmt_err)?;
        let expected = wm_mean / sigma;
        let rel = (s / expected - 1.0).abs();
        ensure(rel <= 0.05, || {
            format!("σ {sigma}: SNR {s:.3} vs {expected:.3}")
        })?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "closed forms exact; noise SNR within {:.2}% of WM/σ",
        100.0 * worst
    ))
}

// ---------------------------------------------------------------------------
// Calibration recovery

fn scanner_corpus(n: usize, seed: u64) -> Result<Vec<CorpusEntry>, String> {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::scanner_scale()
    };
    let (images, manifest) = generate_phantoms(&spec, n).map_err(fmt_err)?;
    Ok(images
        .into_iter()
        .zip(&manifest.rows)
        .map(|((volume, masks), row)| CorpusEntry {
            id: row.image_path.clone(),
            volume,
            masks,
        })
        .collect())
}

fn calibration_recovery() -> Check {
    let corpus = scanner_corpus(20, 41)?;
    let mut lines = Vec::new();
    for (sigma, severity, expected) in [
        (20.0, Severity::Severe, ParamRange(15.0, 25.0)),
        (10.0, Severity::Moderate, ParamRange(5.0, 15.0)),
    ] {
        let mut total = 0.0;
        for (i, e) in corpus.iter().enumerate() {
            let (noisy, _) = simulate_noise(
                &e.volume,
                &NoiseParams {
                    sigma_range: ParamRange::fixed(sigma),
                    seed: derive_seed(1234, &[i as u64]),
                },
            );
            total += snr(&noisy, &e.masks).map_err(fmt_err)?;
        }
        let target = CalibrationTarget {
            metric: CalibrationMetric::Snr,
            target_mean: total / corpus.len() as f64,
            severity,
        };
        let result =
            calibrate_range(&corpus, &CandidateSet::noise(), &target, 5, 1).map_err(fmt_err)?;
        ensure(result.chosen == expected, || {
            format!(
                "σ {sigma}: chose {} instead of {expected} (target SNR {:.2})",
                result.chosen, target.target_mean
            )
        })?;
        lines.push(format!("σ {sigma} → {}", result.chosen));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------
// Severity ordering

fn severity_ordering() -> Check {
    let corpus = scanner_corpus(20, 43)?;
    let mean_over = |artefact: Artefact,
                     severity: Option<Severity>,
                     metric: CalibrationMetric|
     -> Result<f64, String> {
        let mut total = 0.0;
        for (i, e) in corpus.iter().enumerate() {
            let vol = match severity {
                Some(s) => {
                    SeverityPreset::new(artefact, s)
                        .params(derive_seed(77, &[i as u64]))
                        .apply(&e.volume)
                        .0
                }
                None => e.volume.clone(),
            };
            total += metric.evaluate(&vol, &e.masks).map_err(fmt_err)?;
        }
        Ok(total / corpus.len() as f64)
    };
    let mut parts = Vec::new();
    for (artefact, metric) in [
        (Artefact::Contrast, CalibrationMetric::NdWgm),
        (Artefact::Noise, CalibrationMetric::Snr),
    ] {
        let clean = mean_over(artefact, None, metric)?;
        let moderate = mean_over(artefact, Some(Severity::Moderate), metric)?;
        let severe = mean_over(artefact, Some(Severity::Severe), metric)?;
        ensure(clean > moderate && moderate > severe, || {
            format!(
                "{}: clean {clean:.4}, moderate {moderate:.4}, severe {severe:.4}",
                metric.as_str()
            )
        })?;
        parts.push(format!(
            "{} {clean:.3} > {moderate:.3} > {severe:.3}",
            metric.as_str()
        ));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------------------
// Gradient check

fn gradient_check() -> Check {
    let cfg = ModelConfig {
        input_dims: [8; 3],
        conv_channels: [1; 5],
        ..Default::default()
    };
    let mut net = Network::<f64>::new(cfg, 21).map_err(fmt_err)?;
    let mut rng = rng_from_seed(5);
    let x: Vec<f64> = (0..4 * 512).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels = [true, false, true, false];
    let weights = [0.9, 1.1];
    let (_, grads) = loss_and_gradients(&mut net, &x, &labels, weights, None).map_err(fmt_err)?;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[k]);
        let orig = net.params()[k][i];
        net.params_mut()[k][i] = orig + h;
        let up = loss_and_gradients(&mut net, &x, &labels, weights, None)
            .map_err(fmt_err)?
            .0;
        net.params_mut()[k][i] = orig - h;
        let down = loss_and_gradients(&mut net, &x, &labels, weights, None)
            .map_err(fmt_err)?
            .0;
        net.params_mut()[k][i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[k][i];
        let scale = numeric.abs().max(analytic.abs());
        let err = (numeric - analytic).abs();
        ensure(err <= 1e-3 * scale + 1e-7, || {
            format!(
                "{}[{i}]: analytic {analytic:e}, numeric {numeric:e}",
                net.param_names()[k]
            )
        })?;
        if scale > 1e-7 {
            worst = worst.max(err / scale);
        }
    }
    Ok(format!("100 coordinates, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Statistics oracles

/// Doubled mid-ranks of |d| (integers).
fn doubled_ranks(abs: &[f64]) -> Vec<i64> {
    abs.iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as i64;
            let equal = abs.iter().filter(|&&b| b == a).count() as i64;
            2 * below + equal + 1
        })
        .collect()
}

/// Two-sided p-value by enumerating every sign assignment.
fn enumerated_wilcoxon_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let ranks = doubled_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let total: i64 = ranks.iter().sum();
    let observed: i64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let dev = (2 * observed - total).abs();
    let n = d.len();
    let mut extreme = 0u64;
    for mask in 0..(1u64 << n) {
        let w: i64 = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| ranks[i])
            .sum();
        if (2 * w - total).abs() >= dev {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

fn direct_kappa(r1: &[u8], r2: &[u8], quadratic: bool) -> Option<f64> {
    let n = r1.len() as f64;
    let mut table = [[0.0; 3]; 3];
    for (&a, &b) in r1.iter().zip(r2) {
        table[a as usize][b as usize] += 1.0;
    }
    let agree = |i: usize, j: usize| {
        let d = (i as f64 - j as f64).abs() / 2.0;
        1.0 - if quadratic { d * d } else { d }
    };
    let (mut po, mut pe) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let row: f64 = table[i].iter().sum();
            let col: f64 = (0..3).map(|k| table[k][j]).sum();
            po += agree(i, j) * table[i][j] / n;
            pe += agree(i, j) * row * col / (n * n);
        }
    }
    (pe < 1.0 - 1e-12).then(|| (po - pe) / (1.0 - pe))
}

fn statistics_oracles() -> Check {
    let mut rng = rng_from_seed(2024);
    let mut wilcoxon_cases = 0;
    for n in 1..=10 {
        for _ in 0..40 {
            // small integer values force ties and zero differences
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let got = wilcoxon_signed_rank(&a, &b).map_err(fmt_err)?.p_value;
            let want = enumerated_wilcoxon_p(&a, &b);
            ensure((got - want).abs() < 1e-12, || {
                format!("Wilcoxon {a:?} vs {b:?}: {got} vs {want}")
            })?;
            wilcoxon_cases += 1;
        }
    }
    let mut kappa_cases = 0;
    for _ in 0..500 {
        let n = rng.gen_range(5..80);
        let r1: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let r2: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        for (quadratic, weighting) in [
            (false, KappaWeighting::Linear),
            (true, KappaWeighting::Quadratic),
        ] {
            if let Some(want) = direct_kappa(&r1, &r2, quadratic) {
                let got = weighted_cohen_kappa(&r1, &r2, weighting).map_err(fmt_err)?;
                ensure((got - want).abs() < 1e-10, || {
                    format!("kappa {weighting:?}: {got} vs {want}")
                })?;
                kappa_cases += 1;
            }
        }
    }
    let mut ba_cases = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let reference: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let count = |p: bool, r: bool| {
            pred.iter()
                .zip(&reference)
                .filter(|&(&a, &b)| a == p && b == r)
                .count() as f64
        };
        let (tp, fn_, tn, fp) = (
            count(true, true),
            count(false, true),
            count(false, false),
            count(true, false),
        );
        let got = balanced_accuracy(&pred, &reference);
        if tp + fn_ == 0.0 || tn + fp == 0.0 {
            ensure(got.is_err(), || {
                "single-class reference must be rejected".into()
            })?;
        } else {
            let want = 0.5 * (tp / (tp + fn_) + tn / (tn + fp));
            let got = got.map_err(fmt_err)?;
            ensure((got - want).abs() < 1e-12, || {
                format!("balanced accuracy {got} vs {want}")
            })?;
        }
        ba_cases += 1;
    }
    Ok(format!(
        "{wilcoxon_cases} Wilcoxon, {kappa_cases} kappa, {ba_cases} balanced-accuracy cases"
    ))
}

// ---------------------------------------------------------------------------
// Command-line pipelines

fn cdwqc(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["cdwqc", "--quiet"];
    argv.extend_from_slice(args);
    match cli::run(argv.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("`cdwqc {}` exited with {code}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("UTF-8 temp path")
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

const ARTEFACT_TASKS: [&str; 6] = [
    "motion0vs1",
    "motion01vs2",
    "contrast0vs1",
    "contrast01vs2",
    "noise0vs1",
    "noise0vs12",
];

/// Outputs of the desk-scale pipeline shared by several criteria.
struct Pipeline {
    root: PathBuf,
    pretrain_secs: f64,
}

impl Pipeline {
    fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
}

const DESK_CONFIG: &str = r#"
schema_version = 1
seed = 11

[phantom]
n = 200
dims = [32, 32, 32]
scale = "scanner"

[split]
folds = 5
test_fraction = 0.2

[train]
learning_rate = 1e-4
max_epochs = 10
patience = 0
folds_trained = 1
"#;

fn desk_pipeline(root: &Path) -> Result<Pipeline, String> {
    std::fs::create_dir_all(root).map_err(fmt_err)?;
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, DESK_CONFIG).map_err(fmt_err)?;
    let phantoms = root.join("phantoms");
    cdwqc(&["--config", s(&cfg), "phantom", "--out", s(&phantoms)])?;
    let started = Instant::now();
    let pretrain = root.join("pretrain");
    cdwqc(&[
        "--config",
        s(&cfg),
        "pretrain",
        "--input",
        s(&phantoms.join("manifest.tsv")),
        "--task",
        "all",
        "--out",
        s(&pretrain),
    ])?;
    Ok(Pipeline {
        root: root.to_path_buf(),
        pretrain_secs: started.elapsed().as_secs_f64(),
    })
}

fn test_accuracy(p: &Pipeline, task: &str) -> Result<f64, String> {
    let report = read_json(&p.pretrain().join(task).join("test_report.json"))?;
    report["balanced_accuracy"]
        .as_f64()
        .ok_or_else(|| format!("{task}: balanced accuracy undefined"))
}

fn pretraining_analogue(p: &Pipeline) -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for task in ARTEFACT_TASKS {
        let floor = if task.contains("01vs2") || task == "noise0vs12" {
            0.95
        } else {
            0.80
        };
        let ba = test_accuracy(p, task)?;
        parts.push(format!("{task} {ba:.3}"));
        if ba < floor {
            failures.push(format!("{task} {ba:.3} < {floor}"));
        }
    }
    let detail = format!(
        "{} (pre-training took {:.0} s)",
        parts.join(", "),
        p.pretrain_secs
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

fn tier_reports(json: &Value) -> BTreeMap<String, f64> {
    json["tasks"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|t| {
            Some((
                t["task"].as_str()?.to_owned(),
                t["balanced_accuracy"].as_f64()?,
            ))
        })
        .filter(|(name, _)| name.starts_with("tier"))
        .collect()
}

fn direct_indirect_parity(p: &Pipeline) -> Check {
    let pre = p.pretrain();
    let manifest = pre.join("tiers.tsv");
    let sources = p.root.join("phantoms");
    let mut direct = BTreeMap::new();
    for task in ["tier1vs2", "tier12vs3"] {
        let out = p.root.join(format!("direct_{task}.json"));
        let ckpt = pre.join(task).join("final.ckpt");
        cdwqc(&[
            "evaluate",
            "--mode",
            "direct",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&manifest),
            "--source-root",
            s(&sources),
            "--out",
            s(&out),
        ])?;
        let reports = tier_reports(&read_json(&out)?);
        let ba = *reports
            .get(task)
            .ok_or_else(|| format!("direct report lacks {task}"))?;
        direct.insert(task, ba);
    }
    let mut args = vec!["evaluate".to_owned(), "--mode".into(), "indirect".into()];
    for task in ARTEFACT_TASKS {
        args.extend([
            "--checkpoint".into(),
            s(&pre.join(task).join("final.ckpt")).to_owned(),
        ]);
    }
    let out = p.root.join("indirect.json");
    for (flag, value) in [
        ("--input", &manifest),
        ("--source-root", &sources),
        ("--out", &out),
    ] {
        args.extend([flag.to_owned(), s(value).to_owned()]);
    }
    for task in ["tier1vs2", "tier12vs3"] {
        args.extend([
            "--compare".into(),
            s(&p.root.join(format!("direct_{task}.json"))).to_owned(),
        ]);
    }
    cdwqc(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    let indirect_json = read_json(&out)?;
    let indirect = tier_reports(&indirect_json);
    ensure(
        indirect.contains_key("tier1vs2") && indirect.contains_key("tier12vs3"),
        || "indirect report lacks a tier task".into(),
    )?;
    let comparisons = indirect_json["comparisons"].as_array().map_or(0, Vec::len);
    ensure(comparisons == 2, || {
        format!("expected 2 paired comparisons, found {comparisons}")
    })?;
    let detail = format!(
        "direct tier1vs2 {:.3} / tier12vs3 {:.3}; indirect {:.3} / {:.3}; {comparisons} paired tests",
        direct["tier1vs2"], direct["tier12vs3"], indirect["tier1vs2"], indirect["tier12vs3"]
    );
    let low: Vec<String> = direct
        .iter()
        .filter(|(_, &b)| b < 0.85)
        .map(|(t, b)| format!("{t} {b:.3} < 0.85"))
        .collect();
    if low.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", low.join(", ")))
    }
}

/// Fine-tunes the pre-trained tier model on tiers built from an unseen phantom set.
fn transfer_contract(p: &Pipeline) -> Check {
    let spec = PhantomSpec {
        seed: 909,
        ..PhantomSpec::scanner_scale()
    };
    let (images, clean) = generate_phantoms(&spec, 40).map_err(fmt_err)?;
    let sources = p.root.join("clinical_like");
    std::fs::create_dir_all(&sources).map_err(fmt_err)?;
    write_phantom_tree(&sources, &images, &clean).map_err(fmt_err)?;
    let tiers: Manifest =
        split_by_subject(&build_tier_corpus(&clean, 17).map_err(fmt_err)?, 5, 0.2, 3)
            .map_err(fmt_err)?;
    let manifest = sources.join("finetune.tsv");
    tiers.save(&manifest).map_err(fmt_err)?;

    let pretrained_path = p.pretrain().join("tier12vs3").join("final.ckpt");
    let out = p.root.join("finetune");
    cdwqc(&[
        "finetune",
        "--checkpoint",
        s(&pretrained_path),
        "--input",
        s(&manifest),
        "--source-root",
        s(&sources),
        "--epochs",
        "5",
        "--lr",
        "1e-3",
        "--out",
        s(&out),
    ])?;
    let tuned_path = out.join("tier12vs3").join("final.ckpt");
    let pretrained = Checkpoint::load(&pretrained_path).map_err(fmt_err)?;
    let tuned = Checkpoint::load(&tuned_path).map_err(fmt_err)?;
    ensure(pretrained.sections.len() == tuned.sections.len(), || {
        "section counts differ".into()
    })?;

    let params = |c: &Checkpoint| {
        c.sections
            .iter()
            .filter(|s| s.kind == SectionKind::Param)
            .cloned()
            .collect::<Vec<_>>()
    };
    let (before, after) = (params(&pretrained), params(&tuned));
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut frozen = 0;
    for (a, b) in before.iter().zip(&after).take(CONV_PARAM_TENSORS) {
        ensure(bits(&a.data) == bits(&b.data), || {
            format!("convolutional tensor {} changed", a.name)
        })?;
        frozen += a.data.len();
    }
    let mut changed = 0;
    for (a, b) in before.iter().zip(&after).skip(CONV_PARAM_TENSORS) {
        ensure(bits(&a.data) != bits(&b.data), || {
            format!("fully connected tensor {} did not change", a.name)
        })?;
        changed += 1;
    }
    let bytes = std::fs::read(&tuned_path).map_err(fmt_err)?;
    ensure(tuned.to_bytes() == bytes, || {
        "re-serialised checkpoint differs from the file".into()
    })?;
    let rebuilt = Checkpoint::from_network(&tuned.network().map_err(fmt_err)?, tuned.meta.clone());
    ensure(rebuilt.to_bytes() == bytes, || {
        "network round trip is not bit-stable".into()
    })?;
    Ok(format!("{frozen} convolutional weights bit-identical, {changed} FC tensors updated, round trip bit-stable"))
}

const SMALL_CONFIG: &str = r#"
schema_version = 1
seed = 5

[phantom]
n = 16
dims = [16, 16, 16]

[model]
input_dims = [16, 16, 16]
conv_channels = [2, 4, 4, 8, 8]
fc_widths = [16, 8]

[split]
folds = 3
test_fraction = 0.25

[train]
max_epochs = 2
folds_trained = 2
"#;

/// Every command of the tool on a small corpus, writing under `root`.
fn small_pipeline(root: &Path, seed: &str) -> Result<(), String> {
    std::fs::create_dir_all(root).map_err(fmt_err)?;
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, SMALL_CONFIG).map_err(fmt_err)?;
    let c = |rest: &[&str]| {
        let mut args = vec!["--config", s(&cfg), "--seed", seed];
        args.extend_from_slice(rest);
        cdwqc(&args)
    };
    let ph = root.join("phantoms");
    let clean = ph.join("manifest.tsv");
    c(&["phantom", "--out", s(&ph)])?;
    c(&[
        "corrupt",
        "--input",
        s(&clean),
        "--out",
        s(&root.join("corrupted")),
        "--preset",
        "motion:severe",
        "--preset",
        "noise:moderate",
    ])?;
    c(&[
        "metrics",
        "--input",
        s(&root.join("corrupted/manifest.tsv")),
        "--masks",
        s(&ph),
        "--out",
        s(&root.join("metrics")),
    ])?;
    c(&[
        "calibrate",
        "--input",
        s(&clean),
        "--artefact",
        "contrast",
        "--severity",
        "moderate",
        "--out",
        s(&root.join("calibration")),
    ])?;
    let pre = root.join("pretrain");
    c(&[
        "pretrain",
        "--input",
        s(&clean),
        "--task",
        "all",
        "--materialize",
        "--out",
        s(&pre),
    ])?;
    let tiers = pre.join("tiers.tsv");
    c(&[
        "finetune",
        "--checkpoint",
        s(&pre.join("noise0vs12/final.ckpt")),
        "--input",
        s(&tiers),
        "--source-root",
        s(&ph),
        "--out",
        s(&root.join("finetune")),
    ])?;
    c(&[
        "predict",
        "--checkpoint",
        s(&root.join("finetune/noise0vs12/final.ckpt")),
        "--input",
        s(&tiers),
        "--source-root",
        s(&ph),
        "--out",
        s(&root.join("predictions.tsv")),
    ])?;
    c(&[
        "evaluate",
        "--mode",
        "direct",
        "--checkpoint",
        s(&pre.join("tier12vs3/final.ckpt")),
        "--input",
        s(&tiers),
        "--source-root",
        s(&ph),
        "--out",
        s(&root.join("direct.json")),
    ])?;
    let mut args: Vec<String> = ["evaluate", "--mode", "indirect"]
        .map(String::from)
        .to_vec();
    for task in ARTEFACT_TASKS {
        args.extend([
            "--checkpoint".into(),
            s(&pre.join(task).join("final.ckpt")).to_owned(),
        ]);
    }
    for (flag, value) in [
        ("--input", tiers),
        ("--source-root", ph),
        ("--compare", root.join("direct.json")),
        ("--out", root.join("indirect.json")),
    ] {
        args.extend([flag.to_owned(), s(&value).to_owned()]);
    }
    c(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Relative path → bytes for every file under `root`.
fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(fmt_err)? {
            let path = entry.map_err(fmt_err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(fmt_err)?;
                out.insert(
                    path.strip_prefix(root).expect("under root").to_path_buf(),
                    bytes,
                );
            }
        }
    }
    Ok(out)
}

fn determinism(root: &Path) -> Check {
    let (a, b, c) = (root.join("run_a"), root.join("run_b"), root.join("run_c"));
    small_pipeline(&a, "5")?;
    small_pipeline(&b, "5")?;
    small_pipeline(&c, "6")?;
    let (sa, sb, sc) = (snapshot(&a)?, snapshot(&b)?, snapshot(&c)?);
    ensure(sa.keys().eq(sb.keys()), || {
        "re-run produced a different set of files".into()
    })?;
    let differing: Vec<String> = sa
        .iter()
        .filter(|(k, v)| sb[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    ensure(differing.is_empty(), || {
        format!("{} files differ, e.g. {}", differing.len(), differing[0])
    })?;
    let ckpts = sa
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let images = sa
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "nii"))
        .count();
    let seeded = sa
        .iter()
        .filter(|(k, v)| sc.get(*k).is_some_and(|o| o != *v))
        .count();
    ensure(seeded > 0, || "changing the seed changed nothing".into())?;
    Ok(format!(
        "{} files byte-identical ({images} volumes, {ckpts} checkpoints); another seed changes {seeded}",
        sa.len()
    ))
}

// ---------------------------------------------------------------------------

struct Line {
    name: &'static str,
    budget_secs: f64,
}

fn report(line: &Line, filter: &[String], f: impl FnOnce() -> Check) -> Option<bool> {
    if !filter.is_empty() && !filter.iter().any(|p| line.name.contains(p.as_str())) {
        return None;
    }
    let started = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let over = if secs > line.budget_secs {
        format!(" [over {:.0} s budget]", line.budget_secs)
    } else {
        String::new()
    };
    println!(
        "{} {} ({secs:.1} s{over}): {detail}",
        if ok { "PASS" } else { "FAIL" },
        line.name
    );
    Some(ok)
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results = Vec::new();
    let line = |name, budget_secs| Line { name, budget_secs };

    results.push(report(
        &line("tier rule equivalence", 1.0),
        &filter,
        tier_rules,
    ));
    results.push(report(
        &line("simulation identities", 10.0),
        &filter,
        simulation_identity,
    ));
    results.push(report(
        &line("metric oracles", 30.0),
        &filter,
        metric_oracles,
    ));
    results.push(report(
        &line("calibration recovery", 300.0),
        &filter,
        calibration_recovery,
    ));
    results.push(report(
        &line("severity ordering", 120.0),
        &filter,
        severity_ordering,
    ));

    let desk = [
        "desk-scale pre-training",
        "direct vs indirect tiers",
        "transfer contract",
    ];
    let pipeline = if filter.is_empty()
        || desk
            .iter()
            .any(|n| filter.iter().any(|p| n.contains(p.as_str())))
    {
        eprintln!("running the 200-phantom pipeline (eight tasks, one fold each)...");
        Some(desk_pipeline(&tmp.path().join("desk")))
    } else {
        None
    };
    let with_pipeline = |f: fn(&Pipeline) -> Check| {
        let p = pipeline.as_ref();
        move || match p {
            Some(Ok(p)) => f(p),
            Some(Err(e)) => Err(format!("pipeline failed: {e}")),
            None => Err("pipeline not run".into()),
        }
    };
    results.push(report(
        &line("desk-scale pre-training", 1800.0),
        &filter,
        with_pipeline(pretraining_analogue),
    ));
    results.push(report(
        &line("direct vs indirect tiers", 600.0),
        &filter,
        with_pipeline(direct_indirect_parity),
    ));
    results.push(report(
        &line("transfer contract", 600.0),
        &filter,
        with_pipeline(transfer_contract),
    ));
    results.push(report(
        &line("gradient check", 60.0),
        &filter,
        gradient_check,
    ));
    results.push(report(
        &line("statistics oracles", 60.0),
        &filter,
        statistics_oracles,
    ));
    let det_root = tmp.path().join("determinism");
    results.push(report(&line("determinism", 600.0), &filter, || {
        determinism(&det_root)
    }));

    let ran: Vec<bool> = results.into_iter().flatten().collect();
    let passed = ran.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", ran.len());
    if passed != ran.len() {
        std::process::exit(1);
    }
}
