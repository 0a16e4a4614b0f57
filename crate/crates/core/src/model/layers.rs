//! Layer kernels on channel-major batches: `[batch][channel][voxel]`, voxels
//! stored with x fastest like [`Volume3D`](crate::volume::Volume3D).

use std::fmt::Debug;

use num_traits::Float;
use rayon::prelude::*;

/// Floating-point element with a GEMM kernel.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` for row/column-strided `a` (m×k), `b` (k×n), `c` (m×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
        // SAFETY: the slices cover every strided index for the asserted shapes
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
        // SAFETY: the slices cover every strided index for the asserted shapes
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Spatial dims after a 2× max-pool that keeps a partial trailing window.
pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d.div_ceil(2))
}

/// 3×3×3 neighbourhood unrolled into `[channel * 27 + offset][voxel]`, zero padded.
fn im2col<T: Real>(input: &[T], channels: usize, dims: [usize; 3], col: &mut [T]) {
    let [nx, ny, nz] = dims;
    let p = voxels(dims);
    for c in 0..channels {
        let src = &input[c * p..(c + 1) * p];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = c * 27 + kz * 9 + ky * 3 + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for z in 0..nz {
                        let sz = z as isize + kz as isize - 1;
                        for y in 0..ny {
                            let sy = y as isize + ky as isize - 1;
                            let base = nx * (y + ny * z);
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                                dst[base..base + nx].fill(T::zero());
                                continue;
                            }
                            let sbase = nx * (sy as usize + ny * sz as usize);
                            for x in 0..nx {
                                let sx = x as isize + kx as isize - 1;
                                dst[base + x] = if sx < 0 || sx >= nx as isize {
                                    T::zero()
                                } else {
                                    src[sbase + sx as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the input gradient.
fn col2im<T: Real>(col: &[T], channels: usize, dims: [usize; 3], out: &mut [T]) {
    let [nx, ny, nz] = dims;
    let p = voxels(dims);
    for c in 0..channels {
        let dst = &mut out[c * p..(c + 1) * p];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = c * 27 + kz * 9 + ky * 3 + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for z in 0..nz {
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let base = nx * (y + ny * z);
                            let dbase = nx * (sy as usize + ny * sz as usize);
                            for x in 0..nx {
                                let sx = x as isize + kx as isize - 1;
                                if sx >= 0 && sx < nx as isize {
                                    dst[dbase + sx as usize] =
                                        dst[dbase + sx as usize] + src[base + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3×3 convolution, stride 1, same padding, with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in * 27]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![T::zero(); out_channels * in_channels * 27],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * 27
    }

    pub fn forward(&self, input: &[T], batch: usize, dims: [usize; 3]) -> Vec<T> {
        let p = voxels(dims);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.fan_in());
        let mut out = vec![T::zero(); batch * cout * p];
        out.par_chunks_mut(cout * p)
            .zip(input.par_chunks(cin * p))
            .for_each(|(o, x)| {
                let mut col = vec![T::zero(); k * p];
                im2col(x, cin, dims, &mut col);
                for (c, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.fill(self.bias[c]);
                }
                T::gemm(
                    cout,
                    k,
                    p,
                    T::one(),
                    &self.weight,
                    k as isize,
                    1,
                    &col,
                    p as isize,
                    1,
                    T::one(),
                    o,
                    p as isize,
                    1,
                );
            });
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`; `d_input` is skipped when not needed.
    pub fn backward(
        &self,
        input: &[T],
        grad_out: &[T],
        batch: usize,
        dims: [usize; 3],
        need_input_grad: bool,
    ) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let p = voxels(dims);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.fan_in());
        let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let x = &input[s * cin * p..(s + 1) * cin * p];
                let go = &grad_out[s * cout * p..(s + 1) * cout * p];
                let mut col = vec![T::zero(); k * p];
                im2col(x, cin, dims, &mut col);
                let mut dw = vec![T::zero(); cout * k];
                // dW = dOut · colᵀ
                T::gemm(
                    cout,
                    p,
                    k,
                    T::one(),
                    go,
                    p as isize,
                    1,
                    &col,
                    1,
                    p as isize,
                    T::zero(),
                    &mut dw,
                    k as isize,
                    1,
                );
                let dx = need_input_grad.then(|| {
                    // dCol = Wᵀ · dOut, reusing the column buffer
                    T::gemm(
                        k,
                        cout,
                        p,
                        T::one(),
                        &self.weight,
                        1,
                        k as isize,
                        go,
                        p as isize,
                        1,
                        T::zero(),
                        &mut col,
                        p as isize,
                        1,
                    );
                    let mut dx = vec![T::zero(); cin * p];
                    col2im(&col, cin, dims, &mut dx);
                    dx
                });
                (dw, dx)
            })
            .collect();
        let mut dw = vec![T::zero(); cout * k];
        let mut db = vec![T::zero(); cout];
        let mut dx = need_input_grad.then(|| Vec::with_capacity(batch * cin * p));
        for (s, (w, x)) in per_sample.into_iter().enumerate() {
            for (a, b) in dw.iter_mut().zip(w) {
                *a = *a + b;
            }
            for (c, d) in db.iter_mut().enumerate() {
                let go = &grad_out[(s * cout + c) * p..(s * cout + c + 1) * p];
                *d = go.iter().fold(*d, |acc, &g| acc + g);
            }
            if let (Some(all), Some(x)) = (dx.as_mut(), x) {
                all.extend(x);
            }
        }
        (dw, db, dx)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics and updates the running ones.
    pub fn forward_train(&mut self, x: &mut [T], batch: usize, p: usize) -> BnCache<T> {
        let c_n = self.channels();
        let n = (batch * p) as f64;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c_n];
        let momentum = T::from_f64(BN_MOMENTUM);
        for c in 0..c_n {
            let mut sum = 0.0;
            for s in 0..batch {
                sum += x[(s * c_n + c) * p..(s * c_n + c + 1) * p]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for s in 0..batch {
                ss += x[(s * c_n + c) * p..(s * c_n + c + 1) * p]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = ss / n;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = T::from_f64(istd);
            let unbiased = if n > 1.0 { ss / (n - 1.0) } else { var };
            self.running_mean[c] =
                (T::one() - momentum) * self.running_mean[c] + momentum * T::from_f64(mean);
            self.running_var[c] =
                (T::one() - momentum) * self.running_var[c] + momentum * T::from_f64(unbiased);
            let (g, b) = (self.gamma[c], self.beta[c]);
            let (m, is) = (T::from_f64(mean), T::from_f64(istd));
            for s in 0..batch {
                let range = (s * c_n + c) * p..(s * c_n + c + 1) * p;
                for (v, h) in x[range.clone()].iter_mut().zip(&mut xhat[range]) {
                    *h = (*v - m) * is;
                    *v = g * *h + b;
                }
            }
        }
        BnCache { xhat, inv_std }
    }

    pub fn forward_eval(&self, x: &mut [T], batch: usize, p: usize) {
        let c_n = self.channels();
        let eps = T::from_f64(BN_EPS);
        for c in 0..c_n {
            let scale = self.gamma[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for s in 0..batch {
                for v in &mut x[(s * c_n + c) * p..(s * c_n + c + 1) * p] {
                    *v = *v * scale + shift;
                }
            }
        }
    }

    /// Returns `(d_gamma, d_beta)` and overwrites `grad` with the input gradient.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad: &mut [T],
        batch: usize,
        p: usize,
    ) -> (Vec<T>, Vec<T>) {
        let c_n = self.channels();
        let n = (batch * p) as f64;
        let mut dgamma = vec![T::zero(); c_n];
        let mut dbeta = vec![T::zero(); c_n];
        for c in 0..c_n {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for s in 0..batch {
                let range = (s * c_n + c) * p..(s * c_n + c + 1) * p;
                for (g, h) in grad[range.clone()].iter().zip(&cache.xhat[range]) {
                    sum_dy += g.as_f64();
                    sum_dy_xhat += g.as_f64() * h.as_f64();
                }
            }
            dgamma[c] = T::from_f64(sum_dy_xhat);
            dbeta[c] = T::from_f64(sum_dy);
            let gamma = self.gamma[c].as_f64();
            let istd = cache.inv_std[c].as_f64();
            let k = gamma * istd / n;
            for s in 0..batch {
                let range = (s * c_n + c) * p..(s * c_n + c + 1) * p;
                for (g, h) in grad[range.clone()].iter_mut().zip(&cache.xhat[range]) {
                    let dx = k * (n * g.as_f64() - sum_dy - h.as_f64() * sum_dy_xhat);
                    *g = T::from_f64(dx);
                }
            }
        }
        (dgamma, dbeta)
    }
}

/// ReLU followed by 2×2×2 max-pooling; returns pooled values and argmax indices.
pub fn relu_pool<T: Real>(x: &[T], batch_channels: usize, dims: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let [nx, ny, nz] = dims;
    let od = pooled_dims(dims);
    let (p, op) = (voxels(dims), voxels(od));
    let mut out = vec![T::zero(); batch_channels * op];
    let mut arg = vec![0u32; batch_channels * op];
    for bc in 0..batch_channels {
        let src = &x[bc * p..(bc + 1) * p];
        let mut o = 0;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dz in 0..2 {
                        let sz = 2 * z + dz;
                        if sz >= nz {
                            continue;
                        }
                        for dy in 0..2 {
                            let sy = 2 * y + dy;
                            if sy >= ny {
                                continue;
                            }
                            for dx in 0..2 {
                                let sx = 2 * xx + dx;
                                if sx >= nx {
                                    continue;
                                }
                                let i = sx + nx * (sy + ny * sz);
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out[bc * op + o] = best.max(T::zero());
                    arg[bc * op + o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Backward of [`relu_pool`] given the pre-activation input.
pub fn relu_pool_backward<T: Real>(
    pre: &[T],
    arg: &[u32],
    grad_out: &[T],
    batch_channels: usize,
    dims: [usize; 3],
) -> Vec<T> {
    let (p, op) = (voxels(dims), voxels(pooled_dims(dims)));
    let mut grad = vec![T::zero(); batch_channels * p];
    for bc in 0..batch_channels {
        for o in 0..op {
            let i = bc * p + arg[bc * op + o] as usize;
            if pre[i] > T::zero() {
                grad[i] = grad[i] + grad_out[bc * op + o];
            }
        }
    }
    grad
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let (i, o) = (self.in_features, self.out_features);
        let mut y = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        T::gemm(
            batch,
            i,
            o,
            T::one(),
            x,
            i as isize,
            1,
            &self.weight,
            1,
            i as isize,
            T::one(),
            &mut y,
            o as isize,
            1,
        );
        y
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(&self, x: &[T], grad_out: &[T], batch: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (i, o) = (self.in_features, self.out_features);
        let mut dw = vec![T::zero(); o * i];
        T::gemm(
            o,
            batch,
            i,
            T::one(),
            grad_out,
            1,
            o as isize,
            x,
            i as isize,
            1,
            T::zero(),
            &mut dw,
            i as isize,
            1,
        );
        let mut db = vec![T::zero(); o];
        for s in 0..batch {
            for (d, g) in db.iter_mut().zip(&grad_out[s * o..(s + 1) * o]) {
                *d = *d + *g;
            }
        }
        let mut dx = vec![T::zero(); batch * i];
        T::gemm(
            batch,
            o,
            i,
            T::one(),
            grad_out,
            o as isize,
            1,
            &self.weight,
            i as isize,
            1,
            T::zero(),
            &mut dx,
            i as isize,
            1,
        );
        (dw, db, dx)
    }
}
