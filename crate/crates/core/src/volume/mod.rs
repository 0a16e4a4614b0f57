//! 3D scalar volumes and the operations every other module builds on.
//!
//! Voxel data is stored with x varying fastest: `index = x + nx * (y + ny * z)`.
//! The z axis is therefore the slowest storage axis.

mod fft;
mod nifti_io;
mod transform;

use thiserror::Error;

pub use fft::{fft3, ifft3, ifft3_complex, KSpace};
pub use nifti_io::{load_nifti, save_nifti};
pub use transform::{resample_motion, resample_rigid, RigidMotion, RigidTransform};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("non-3D image: {path} has {ndim} dimensions {dims:?}")]
    NotThreeDimensional {
        path: String,
        ndim: usize,
        dims: Vec<u16>,
    },
    #[error("non-scalar datatype in {path}: {datatype}")]
    NonScalarDatatype { path: String, datatype: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),
    #[error("data length {got} does not match dims {dims:?}")]
    LengthMismatch { got: usize, dims: [usize; 3] },
    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),
    #[error("volume dims {a:?} and {b:?} differ")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
}

/// A 3D scalar image with voxel spacing and a voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
    data: Vec<f64>,
}

fn diagonal_affine(spacing: [f64; 3]) -> [[f64; 4]; 4] {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn det3(m: &[[f64; 4]; 4]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl Volume3D {
    /// Builds a volume, checking every invariant of the type.
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        affine: [[f64; 4]; 4],
        data: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) || det3(&affine).abs() < 1e-12 {
            return Err(VolumeError::InvalidGeometry(
                "affine is not invertible".into(),
            ));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::InvalidGeometry(
                "affine last row must be (0, 0, 0, 1)".into(),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                got: data.len(),
                dims,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            affine,
            data,
        })
    }

    /// Volume with a diagonal affine built from `spacing`.
    pub fn from_data(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, diagonal_affine(spacing), data)
    }

    /// Zero-filled volume with 1 mm isotropic spacing.
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self::from_data(dims, [1.0; 3], vec![0.0; n]).expect("zero volume with positive dims")
    }

    /// Volume filled by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_data(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &[[f64; 4]; 4] {
        &self.affine
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new data. Fails when `data` has the wrong length or is not finite.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::new(self.dims, self.spacing, self.affine, data)
    }

    /// Applies `f` voxelwise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, VolumeError> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn same_grid(&self, other: &Volume3D) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimsMismatch {
                a: self.dims,
                b: other.dims,
            });
        }
        Ok(())
    }
}

/// Min-max normalization to [0, 1].
///
/// Returns the normalized volume and the original `(min, max)`. A constant
/// volume maps to all zeros with `min == max` recorded.
pub fn normalize_minmax(vol: &Volume3D) -> (Volume3D, f64, f64) {
    let (lo, hi) = vol.min_max();
    let range = hi - lo;
    let data = if range > 0.0 {
        vol.data
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; vol.len()]
    };
    let out = Volume3D {
        data,
        ..vol.clone()
    };
    (out, lo, hi)
}

/// Inverse of [`normalize_minmax`] for non-constant inputs.
pub fn denormalize_minmax(vol: &Volume3D, lo: f64, hi: f64) -> Volume3D {
    let range = hi - lo;
    Volume3D {
        data: vol.data.iter().map(|&v| v * range + lo).collect(),
        ..vol.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume3D::from_data([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume3D::from_data([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume3D::from_data([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
        assert!(matches!(
            Volume3D::from_data([1, 1, 1], [1.0; 3], vec![f64::NAN]),
            Err(VolumeError::NonFinite(0))
        ));
        let mut singular = diagonal_affine([1.0; 3]);
        singular[2][2] = 0.0;
        assert!(Volume3D::new([1, 1, 1], [1.0; 3], singular, vec![0.0]).is_err());
    }

    #[test]
    fn normalize_three_values() {
        let v = Volume3D::from_data([3, 1, 1], [1.0; 3], vec![0.0, 5.0, 10.0]).unwrap();
        let (n, lo, hi) = normalize_minmax(&v);
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        assert_eq!((lo, hi), (0.0, 10.0));
    }

    #[test]
    fn normalize_constant_volume_is_zero() {
        let v = Volume3D::from_data([2, 2, 1], [1.0; 3], vec![3.5; 4]).unwrap();
        let (n, lo, hi) = normalize_minmax(&v);
        assert!(n.data().iter().all(|&x| x == 0.0));
        assert_eq!((lo, hi), (3.5, 3.5));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_range() {
        let v = Volume3D::from_data([4, 1, 1], [1.0; 3], vec![0.0, 0.25, 0.7, 1.0]).unwrap();
        let (n, _, _) = normalize_minmax(&v);
        assert_eq!(n.data(), v.data());
    }

    #[test]
    fn index_is_x_fastest() {
        let v = Volume3D::from_fn([2, 3, 4], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f64)
            .unwrap();
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[2], 10.0);
        assert_eq!(v.data()[6], 100.0);
        assert_eq!(v.get(1, 2, 3), 321.0);
    }

    proptest::proptest! {
        #[test]
        fn normalize_range_and_inverse(data in proptest::collection::vec(-1e3f64..1e3, 8)) {
            let v = Volume3D::from_data([2, 2, 2], [1.0; 3], data).unwrap();
            let (n, lo, hi) = normalize_minmax(&v);
            proptest::prop_assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            if hi > lo {
                let back = denormalize_minmax(&n, lo, hi);
                for (a, b) in back.data().iter().zip(v.data()) {
                    proptest::prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }
}
