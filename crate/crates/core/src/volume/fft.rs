use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::Volume3D;

/// Complex spectrum of a volume, same storage order as [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace {
    pub dims: [usize; 3],
    pub data: Vec<Complex64>,
}

impl KSpace {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// In-place 1D transforms along every axis.
fn transform_axes(dims: [usize; 3], data: &mut [Complex64], direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let fft = planner.plan_fft(len, direction);
        let stride = strides[axis];
        if axis == 0 {
            fft.process(data);
            continue;
        }
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        // every line start: all indices whose coordinate along `axis` is zero
        let (outer, inner) = if axis == 1 { (nz, nx) } else { (ny, nx) };
        for o in 0..outer {
            for i in 0..inner {
                let start = if axis == 1 {
                    i + o * nx * ny
                } else {
                    i + o * nx
                };
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[start + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (k, v) in line.iter().enumerate() {
                    data[start + k * stride] = *v;
                }
            }
        }
    }
}

/// Forward 3D DFT, unnormalized.
pub fn fft3(vol: &Volume3D) -> KSpace {
    let mut data: Vec<Complex64> = vol.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_axes(vol.dims(), &mut data, FftDirection::Forward);
    KSpace {
        dims: vol.dims(),
        data,
    }
}

/// Inverse 3D DFT scaled by 1/N; returns the full complex result.
pub fn ifft3_complex(k: &KSpace) -> Vec<Complex64> {
    let mut data = k.data.clone();
    transform_axes(k.dims, &mut data, FftDirection::Inverse);
    let scale = 1.0 / data.len() as f64;
    for v in &mut data {
        *v *= scale;
    }
    data
}

/// Inverse 3D DFT; the real part is returned on a unit-spacing grid.
pub fn ifft3(k: &KSpace) -> Volume3D {
    let data = ifft3_complex(k).into_iter().map(|c| c.re).collect();
    Volume3D::from_data(k.dims, [1.0; 3], data)
        .expect("inverse transform of a finite spectrum is finite")
}
