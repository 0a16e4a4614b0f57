use serde::{Deserialize, Serialize};

use super::Volume3D;

/// Six-degree-of-freedom rigid transform.
///
/// Rotations are in degrees about the x, y and z axes through the geometric
/// center of the voxel grid, composed intrinsically x then y then z
/// (`R = Rx * Ry * Rz`). Translations are in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
}

/// Rotation matrix plus translation acting on grid-centred millimetre coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn matvec3(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation_deg: [f64; 3], translation_mm: [f64; 3]) -> Self {
        Self {
            rotation_deg,
            translation_mm,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == [0.0; 3] && self.translation_mm == [0.0; 3]
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation_deg.map(f64::to_radians);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&matmul3(&rx, &ry), &rz)
    }

    pub fn motion(&self) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation_matrix(),
            translation: self.translation_mm,
        }
    }

    /// Maps a grid-centred point (mm) through the transform.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.motion().apply(p)
    }

    /// Inverse transform, re-expressed in the same Euler convention.
    ///
    /// Exact for rotations about y strictly inside (-90°, 90°).
    pub fn inverse(&self) -> Self {
        let inv = self.motion().inverse();
        let r = inv.rotation;
        let b = r[0][2].clamp(-1.0, 1.0).asin();
        let a = (-r[1][2]).atan2(r[2][2]);
        let c = (-r[0][1]).atan2(r[0][0]);
        Self {
            rotation_deg: [a.to_degrees(), b.to_degrees(), c.to_degrees()],
            translation_mm: inv.translation,
        }
    }
}

impl RigidMotion {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = matvec3(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose3(&self.rotation);
        let t = matvec3(&rt, self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn compose(&self, then: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: matmul3(&then.rotation, &self.rotation),
            translation: then.apply(self.translation),
        }
    }
}

/// Trilinear sample at continuous voxel coordinates; corners outside the grid read as zero.
#[inline]
fn trilinear(vol: &Volume3D, u: [f64; 3]) -> f64 {
    let [nx, ny, nz] = vol.dims;
    let (fx, fy, fz) = (u[0].floor(), u[1].floor(), u[2].floor());
    if fx < -1.0 || fy < -1.0 || fz < -1.0 || fx >= nx as f64 || fy >= ny as f64 || fz >= nz as f64
    {
        return 0.0;
    }
    let (tx, ty, tz) = (u[0] - fx, u[1] - fy, u[2] - fz);
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let data = &vol.data;
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            data[x as usize + nx * (y as usize + ny * z as usize)]
        }
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

fn grid_center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

/// Resamples `vol` moved by `motion` onto its own grid.
///
/// Output voxel `p` takes the value of the input at `motion⁻¹(p)`, with
/// trilinear interpolation and zero fill outside the field of view.
pub fn resample_motion(vol: &Volume3D, motion: &RigidMotion) -> Volume3D {
    let inv = motion.inverse();
    let [nx, ny, nz] = vol.dims;
    let c = grid_center(vol.dims);
    let s = vol.spacing;
    let mut out = Vec::with_capacity(vol.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 - c[0]) * s[0],
                    (y as f64 - c[1]) * s[1],
                    (z as f64 - c[2]) * s[2],
                ];
                let q = inv.apply(p);
                let u = [q[0] / s[0] + c[0], q[1] / s[1] + c[1], q[2] / s[2] + c[2]];
                out.push(trilinear(vol, u));
            }
        }
    }
    Volume3D {
        data: out,
        ..vol.clone()
    }
}

/// Rigid resampling on the input grid; the identity transform returns an exact copy.
pub fn resample_rigid(vol: &Volume3D, t: &RigidTransform) -> Volume3D {
    if t.is_identity() {
        return vol.clone();
    }
    resample_motion(vol, &t.motion())
}
