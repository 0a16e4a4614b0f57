use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{
    IntoNdArray, NiftiError, NiftiHeader, NiftiObject, NiftiType, NiftiVolume, ReaderOptions,
};

use super::{Volume3D, VolumeError};

fn is_scalar(t: NiftiType) -> bool {
    matches!(
        t,
        NiftiType::Uint8
            | NiftiType::Int8
            | NiftiType::Int16
            | NiftiType::Uint16
            | NiftiType::Int32
            | NiftiType::Uint32
            | NiftiType::Int64
            | NiftiType::Uint64
            | NiftiType::Float32
            | NiftiType::Float64
    )
}

fn read_error(path: &str, e: NiftiError) -> VolumeError {
    match e {
        NiftiError::Io(io) => VolumeError::Io {
            path: path.to_owned(),
            reason: io.to_string(),
        },
        other => VolumeError::MalformedHeader {
            path: path.to_owned(),
            reason: other.to_string(),
        },
    }
}

/// Quaternion-based affine of a NIfTI-1 header (qform).
fn qform_affine(h: &NiftiHeader) -> [[f64; 4]; 4] {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let (dx, dy, dz) = (
        h.pixdim[1] as f64,
        h.pixdim[2] as f64,
        qfac * h.pixdim[3] as f64,
    );
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    [
        [r[0][0] * dx, r[0][1] * dy, r[0][2] * dz, h.quatern_x as f64],
        [r[1][0] * dx, r[1][1] * dy, r[1][2] * dz, h.quatern_y as f64],
        [r[2][0] * dx, r[2][1] * dy, r[2][2] * dz, h.quatern_z as f64],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn header_affine(h: &NiftiHeader, spacing: [f64; 3]) -> [[f64; 4]; 4] {
    if h.sform_code > 0 {
        let row = |r: [f32; 4]| r.map(|v| v as f64);
        [
            row(h.srow_x),
            row(h.srow_y),
            row(h.srow_z),
            [0.0, 0.0, 0.0, 1.0],
        ]
    } else if h.qform_code > 0 {
        qform_affine(h)
    } else {
        [
            [spacing[0], 0.0, 0.0, 0.0],
            [0.0, spacing[1], 0.0, 0.0],
            [0.0, 0.0, spacing[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Loads a 3D scalar NIfTI-1 image (`.nii` or `.nii.gz`).
///
/// Trailing singleton dimensions (e.g. a 4D file with one time point) are accepted.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume3D, VolumeError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.exists() {
        return Err(VolumeError::NotFound(shown));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| read_error(&shown, e))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::MalformedHeader {
            path: shown,
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let dims_raw: Vec<u16> = header.dim[1..=ndim].to_vec();
    if ndim < 3 || dims_raw[3..].iter().any(|&d| d != 1) {
        return Err(VolumeError::NotThreeDimensional {
            path: shown,
            ndim,
            dims: dims_raw,
        });
    }
    let datatype = header.data_type().map_err(|e| read_error(&shown, e))?;
    if !is_scalar(datatype) {
        return Err(VolumeError::NonScalarDatatype {
            path: shown,
            datatype: format!("{datatype:?}"),
        });
    }
    let dims = [
        dims_raw[0] as usize,
        dims_raw[1] as usize,
        dims_raw[2] as usize,
    ];
    let spacing = [1, 2, 3].map(|i| {
        let s = header.pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let volume = obj.into_volume();
    debug_assert_eq!(volume.dim()[..3], dims_raw[..3]);
    let array = volume
        .into_ndarray::<f64>()
        .map_err(|e| read_error(&shown, e))?;
    // into_ndarray yields a Fortran-ordered array indexed [x, y, z]
    let array =
        array
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| VolumeError::MalformedHeader {
                path: shown.clone(),
                reason: e.to_string(),
            })?;
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(array[[x, y, z]]);
            }
        }
    }
    Volume3D::new(dims, spacing, header_affine(&header, spacing), data)
}

/// Writes `vol` as float32 NIfTI-1; a `.gz` suffix selects gzip compression.
pub fn save_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let [nx, ny, nz] = vol.dims();
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0; 8];
    for i in 0..3 {
        header.pixdim[i + 1] = vol.spacing()[i] as f32;
    }
    header.xyzt_units = 2; // millimetres
    let a = vol.affine();
    header.sform_code = 1;
    header.qform_code = 0;
    header.srow_x = a[0].map(|v| v as f32);
    header.srow_y = a[1].map(|v| v as f32);
    header.srow_z = a[2].map(|v| v as f32);
    let data: Vec<f32> = vol.data().iter().map(|&v| v as f32).collect();
    let array = Array3::from_shape_vec((nx, ny, nz).f(), data).map_err(|e| VolumeError::Io {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&array)
        .map_err(|e| match e {
            NiftiError::Io(source) => VolumeError::Write {
                path: shown,
                source,
            },
            other => VolumeError::Write {
                path: shown,
                source: std::io::Error::other(other.to_string()),
            },
        })
}
