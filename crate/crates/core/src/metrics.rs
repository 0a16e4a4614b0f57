//! Artefact severity metrics.
//!
//! ND-WGM and SNR need tissue masks; average edge strength and Tenengrad are
//! reference-free sharpness measures computed on the image alone.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty {0} mask")]
    EmptyMask(&'static str),
    #[error("zero denominator: mean WM + mean GM intensity is 0")]
    ZeroDenominator,
    #[error("zero air standard deviation")]
    ZeroAirStd,
    #[error("constant volume has no edges")]
    NoEdges,
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch {
        mask: [usize; 3],
        volume: [usize; 3],
    },
    #[error("masks overlap at voxel {0}")]
    Overlap(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary white matter, grey matter and air masks aligned to a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMasks {
    pub dims: [usize; 3],
    pub wm: Vec<bool>,
    pub gm: Vec<bool>,
    pub air: Vec<bool>,
}

impl TissueMasks {
    pub fn empty(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            wm: vec![false; n],
            gm: vec![false; n],
            air: vec![false; n],
        }
    }

    pub fn new(
        dims: [usize; 3],
        wm: Vec<bool>,
        gm: Vec<bool>,
        air: Vec<bool>,
    ) -> Result<Self, MetricError> {
        let m = Self { dims, wm, gm, air };
        m.validate()?;
        Ok(m)
    }

    /// Builds masks from label volumes (voxels > 0.5 are inside).
    pub fn from_volumes(wm: &Volume3D, gm: &Volume3D, air: &Volume3D) -> Result<Self, MetricError> {
        let bin = |v: &Volume3D| v.data().iter().map(|&x| x > 0.5).collect::<Vec<_>>();
        wm.same_grid(gm)?;
        wm.same_grid(air)?;
        Self::new(wm.dims(), bin(wm), bin(gm), bin(air))
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let n: usize = self.dims.iter().product();
        for m in [&self.wm, &self.gm, &self.air] {
            if m.len() != n {
                return Err(MetricError::DimsMismatch {
                    mask: self.dims,
                    volume: self.dims,
                });
            }
        }
        for i in 0..n {
            let count = self.wm[i] as u8 + self.gm[i] as u8 + self.air[i] as u8;
            if count > 1 {
                return Err(MetricError::Overlap(i));
            }
        }
        Ok(())
    }

    fn check_against(&self, vol: &Volume3D) -> Result<(), MetricError> {
        if self.dims != vol.dims() {
            return Err(MetricError::DimsMismatch {
                mask: self.dims,
                volume: vol.dims(),
            });
        }
        Ok(())
    }

    pub fn to_volume(mask: &[bool], template: &Volume3D) -> Volume3D {
        template
            .with_data(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask volume matches template")
    }
}

fn masked_mean(vol: &Volume3D, mask: &[bool], name: &'static str) -> Result<f64, MetricError> {
    let (sum, count) = vol
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(MetricError::EmptyMask(name));
    }
    Ok(sum / count as f64)
}

fn masked_std(vol: &Volume3D, mask: &[bool], name: &'static str) -> Result<f64, MetricError> {
    let mean = masked_mean(vol, mask, name)?;
    let (ss, count) = vol
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (&v, _)| {
            (s + (v - mean).powi(2), c + 1)
        });
    Ok((ss / count as f64).sqrt())
}

/// Normalised difference of mean white and grey matter intensities.
pub fn nd_wgm(vol: &Volume3D, masks: &TissueMasks) -> Result<f64, MetricError> {
    masks.check_against(vol)?;
    let wm = masked_mean(vol, &masks.wm, "wm")?;
    let gm = masked_mean(vol, &masks.gm, "gm")?;
    let den = wm + gm;
    if den == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    Ok(((wm - gm) / den).abs())
}

/// Mean white matter intensity over the (population) standard deviation of air.
pub fn snr(vol: &Volume3D, masks: &TissueMasks) -> Result<f64, MetricError> {
    masks.check_against(vol)?;
    let wm = masked_mean(vol, &masks.wm, "wm")?;
    let sigma_air = masked_std(vol, &masks.air, "air")?;
    if sigma_air == 0.0 {
        return Err(MetricError::ZeroAirStd);
    }
    Ok(wm / sigma_air)
}

/// Central-difference gradient magnitude (one-sided on the grid border), per voxel.
fn gradient_magnitude(vol: &Volume3D) -> Vec<f64> {
    let [nx, ny, nz] = vol.dims();
    let d = vol.data();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let diff = |n: usize, i: usize, at: &dyn Fn(usize) -> f64| -> f64 {
        if n == 1 {
            0.0
        } else if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            (at(i + 1) - at(i - 1)) / 2.0
        }
    };
    let mut out = Vec::with_capacity(d.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gx = diff(nx, x, &|i| d[idx(i, y, z)]);
                let gy = diff(ny, y, &|i| d[idx(x, i, z)]);
                let gz = diff(nz, z, &|i| d[idx(x, y, i)]);
                out.push((gx * gx + gy * gy + gz * gz).sqrt());
            }
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram; returns the upper edge of the best lower class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let sum_all: f64 = (0..BINS).map(|b| hist[b] as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for b in 0..BINS - 1 {
        w0 += hist[b] as f64;
        sum0 += hist[b] as f64 * centre(b);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    lo + (best_bin as f64 + 1.0) * width
}

/// Average edge strength: mean gradient magnitude over Otsu-selected edge voxels.
pub fn average_edge_strength(vol: &Volume3D) -> Result<f64, MetricError> {
    let mag = gradient_magnitude(vol);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(MetricError::NoEdges);
    }
    let min = mag.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = if max > min {
        otsu_threshold(&mag)
    } else {
        f64::NEG_INFINITY
    };
    let (sum, count) = mag
        .iter()
        .filter(|&&m| m > threshold)
        .fold((0.0, 0usize), |(s, c), &m| (s + m, c + 1));
    if count == 0 {
        return Err(MetricError::NoEdges);
    }
    Ok(sum / count as f64)
}

/// Bounding box of voxels brighter than 10% of the intensity range, as inclusive index ranges.
fn bright_bounding_box(vol: &Volume3D) -> Option<[(usize, usize); 3]> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return None;
    }
    let threshold = lo + 0.1 * (hi - lo);
    let [nx, ny, nz] = vol.dims();
    let mut bb = [(usize::MAX, 0usize); 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if vol.get(x, y, z) > threshold {
                    for (axis, c) in [x, y, z].into_iter().enumerate() {
                        bb[axis].0 = bb[axis].0.min(c);
                        bb[axis].1 = bb[axis].1.max(c);
                    }
                }
            }
        }
    }
    Some(bb)
}

/// Tenengrad: mean squared 3D Sobel gradient magnitude over the bright bounding box.
///
/// The Sobel kernels are scaled (1/32) so that a linear ramp of slope `s`
/// yields exactly `s²`. Only voxels with a full 3×3×3 neighbourhood count.
pub fn tenengrad(vol: &Volume3D) -> f64 {
    let Some(bb) = bright_bounding_box(vol) else {
        return 0.0;
    };
    let [nx, ny, nz] = vol.dims();
    if nx < 3 || ny < 3 || nz < 3 {
        return 0.0;
    }
    let d = vol.data();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let smooth = [1.0, 2.0, 1.0];
    let lo = bb.map(|(a, _)| a.max(1));
    let hi = [
        bb[0].1.min(nx - 2),
        bb[1].1.min(ny - 2),
        bb[2].1.min(nz - 2),
    ];
    let (mut sum, mut count) = (0.0, 0usize);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let v = d[idx(x + dx - 1, y + dy - 1, z + dz - 1)];
                            gx += (dx as f64 - 1.0) * smooth[dy] * smooth[dz] * v;
                            gy += (dy as f64 - 1.0) * smooth[dx] * smooth[dz] * v;
                            gz += (dz as f64 - 1.0) * smooth[dx] * smooth[dy] * v;
                        }
                    }
                }
                let g2 = (gx * gx + gy * gy + gz * gz) / (32.0 * 32.0);
                sum += g2;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fallback air mask when no segmentation is available.
///
/// Air is every voxel at or below the 10th intensity percentile (and strictly
/// below the maximum) lying in one of the eight corner blocks of the grid, each
/// a quarter of the extent along every axis. WM and GM are left empty.
pub fn estimate_air_mask(vol: &Volume3D) -> TissueMasks {
    let mut sorted = vol.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.1 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let p10 = sorted[rank];
    let max = *sorted.last().unwrap();
    let dims = vol.dims();
    let block = dims.map(|n| (n / 4).max(1));
    let in_corner = |c: usize, axis: usize| c < block[axis] || c >= dims[axis] - block[axis];
    let mut masks = TissueMasks::empty(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if in_corner(x, 0) && in_corner(y, 1) && in_corner(z, 2) {
                    let v = vol.get(x, y, z);
                    if v <= p10 && v < max {
                        masks.air[vol.index(x, y, z)] = true;
                    }
                }
            }
        }
    }
    masks
}

/// One metric value for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

pub fn summarize(group: &str, metric: &str, values: &[f64]) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    Summary {
        group: group.to_owned(),
        metric: metric.to_owned(),
        n,
        mean,
        median: quantile_sorted(&sorted, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
    }
}

/// Per-image metric rows plus grouped distribution summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Image id → group label used for the summaries; ungrouped images fall in "all".
    #[serde(default)]
    pub groups: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn push(&mut self, image_id: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            image_id: image_id.to_owned(),
            metric: metric.to_owned(),
            value,
        });
    }

    pub fn summaries(&self) -> Vec<Summary> {
        let mut buckets: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            let group = self
                .groups
                .get(&row.image_id)
                .cloned()
                .unwrap_or_else(|| "all".into());
            buckets
                .entry((group, row.metric.clone()))
                .or_default()
                .push(row.value);
        }
        buckets
            .into_iter()
            .map(|((g, m), v)| summarize(&g, &m, &v))
            .collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "image_id\tmetric\tvalue")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{}", r.image_id, r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "summaries": self.summaries() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tissue(wm: f64, gm: f64) -> (Volume3D, TissueMasks) {
        let dims = [6, 6, 6];
        let mut masks = TissueMasks::empty(dims);
        let v = Volume3D::from_fn(dims, [1.0; 3], |x, _, _| match x {
            0 | 1 => 0.0,
            2 | 3 => gm,
            _ => wm,
        })
        .unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let i = v.index(x, y, z);
                    match x {
                        0 | 1 => masks.air[i] = true,
                        2 | 3 => masks.gm[i] = true,
                        _ => masks.wm[i] = true,
                    }
                }
            }
        }
        (v, masks)
    }

    #[test]
    fn nd_wgm_hand_values() {
        let (v, m) = two_tissue(300.0, 200.0);
        assert!((nd_wgm(&v, &m).unwrap() - 0.2).abs() < 1e-12);
        let (v, m) = two_tissue(5.0, 5.0);
        assert_eq!(nd_wgm(&v, &m).unwrap(), 0.0);
        let (v, m) = two_tissue(0.8, 0.6);
        assert!((nd_wgm(&v, &m).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nd_wgm_errors_are_distinct() {
        let (v, mut m) = two_tissue(0.0, 0.0);
        assert!(matches!(nd_wgm(&v, &m), Err(MetricError::ZeroDenominator)));
        m.wm.iter_mut().for_each(|b| *b = false);
        assert!(matches!(nd_wgm(&v, &m), Err(MetricError::EmptyMask("wm"))));
    }

    #[test]
    fn snr_hand_value_and_zero_air() {
        let (v, m) = two_tissue(74.0, 50.0);
        // air alternates -1 / +1 → population std 1
        let data: Vec<f64> = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if m.air[i] {
                    if i % 2 == 0 {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    x
                }
            })
            .collect();
        let noisy = v.with_data(data).unwrap();
        assert!((snr(&noisy, &m).unwrap() - 74.0).abs() < 1e-12);
        assert!(matches!(snr(&v, &m), Err(MetricError::ZeroAirStd)));
    }

    #[test]
    fn masks_must_be_disjoint() {
        let dims = [2, 1, 1];
        let r = TissueMasks::new(
            dims,
            vec![true, false],
            vec![true, false],
            vec![false, true],
        );
        assert!(matches!(r, Err(MetricError::Overlap(0))));
    }

    #[test]
    fn scale_invariance() {
        let (v, m) = two_tissue(300.0, 200.0);
        let scaled = v.map(|x| 3.5 * x).unwrap();
        assert!((nd_wgm(&v, &m).unwrap() - nd_wgm(&scaled, &m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tenengrad_constant_is_zero() {
        assert_eq!(
            tenengrad(&Volume3D::from_data([5, 5, 5], [1.0; 3], vec![3.0; 125]).unwrap()),
            0.0
        );
    }

    #[test]
    fn tenengrad_ramp_is_slope_squared() {
        let s = 0.7;
        let v = Volume3D::from_fn([12, 9, 8], [1.0; 3], |x, _, _| s * x as f64).unwrap();
        assert!((tenengrad(&v) - s * s).abs() < 1e-12);
    }

    #[test]
    fn aes_constant_errors() {
        let v = Volume3D::from_data([4, 4, 4], [1.0; 3], vec![1.0; 64]).unwrap();
        assert!(matches!(
            average_edge_strength(&v),
            Err(MetricError::NoEdges)
        ));
    }

    #[test]
    fn air_mask_stays_in_background_corners() {
        let n = 16;
        let v = Volume3D::from_fn([n; 3], [1.0; 3], |x, y, z| {
            let c = 7.5;
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            if r2 < 36.0 {
                100.0
            } else {
                0.0
            }
        })
        .unwrap();
        let m = estimate_air_mask(&v);
        let count = m.air.iter().filter(|&&b| b).count();
        assert_eq!(count, 8 * 4 * 4 * 4);
        for (i, &a) in m.air.iter().enumerate() {
            if a {
                assert_eq!(v.data()[i], 0.0);
            }
        }
        assert!(m.wm.iter().all(|&b| !b) && m.gm.iter().all(|&b| !b));
    }

    #[test]
    fn air_mask_on_constant_volume_is_empty() {
        let v = Volume3D::from_data([8, 8, 8], [1.0; 3], vec![500.0; 512]).unwrap();
        let m = estimate_air_mask(&v);
        assert!(m.air.iter().all(|&b| !b));
    }

    #[test]
    fn quantiles_and_summary() {
        let s = summarize("g", "snr", &[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
        assert_eq!(s.mean, 2.5);
    }

    proptest::proptest! {
        #[test]
        fn contrast_and_snr_are_scale_invariant(scale in 0.01f64..100.0, seed in 0u64..1000) {
            let (v, m) = crate::dataset::generate_phantom(
                &crate::dataset::PhantomSpec {
                    dims: [16; 3],
                    seed,
                    ..crate::dataset::PhantomSpec::scanner_scale()
                },
                0,
            );
            let scaled = v.map(|x| x * scale).unwrap();
            let (c0, c1) = (nd_wgm(&v, &m).unwrap(), nd_wgm(&scaled, &m).unwrap());
            let (s0, s1) = (snr(&v, &m).unwrap(), snr(&scaled, &m).unwrap());
            proptest::prop_assert!((c0 - c1).abs() <= 1e-12 * c0.abs().max(1.0));
            proptest::prop_assert!((s0 / s1 - 1.0).abs() <= 1e-9);
        }
    }
}
