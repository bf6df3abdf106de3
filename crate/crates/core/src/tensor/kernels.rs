//! Slice-level forward/backward kernels shared by the layers.
//!
//! All buffers are row-major `n×c×h×w`. Convolutions go through im2col and a
//! single GEMM per batch item.

use super::Scalar;

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, where `a` and `b` are addressed by
/// `(row stride, column stride)` and `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(
        extent(m, k, a_strides) <= a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        extent(k, n, b_strides) <= b.len(),
        "gemm: rhs out of bounds"
    );
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: extents checked above; `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-d convolution over one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix (`c_in·k·k`).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out() * self.w_out()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    let k = g.kernel;
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                // output columns whose input column lies inside the image
                let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(wo);
                let hi = if g.w + g.pad > kj {
                    (g.w + g.pad - kj - 1) / g.stride + 1
                } else {
                    0
                }
                .clamp(lo, wo);
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xin[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ow, d) in out_row[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ow) * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    let k = g.kernel;
    dx.fill(T::zero());
    for ci in 0..g.c_in {
        let xin = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xin[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution over a batch. `weight` is `c_out×c_in×k×k`, `out` is `n×c_out×h_out×w_out`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    conv2d_forward_keep(g, batch, x, weight, bias, out, None);
}

/// [`conv2d_forward`] that can also hand back the im2col matrices of every
/// batch item (`batch × patch_len × plane`) for reuse in the backward pass.
pub fn conv2d_forward_keep<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    mut keep: Option<&mut Vec<T>>,
) {
    let plane = g.h_out() * g.w_out();
    let col_len = g.patch_len() * plane;
    let mut scratch = Vec::new();
    match keep.as_deref_mut() {
        Some(all) => all.resize(batch * col_len, T::zero()),
        None => scratch.resize(col_len, T::zero()),
    }
    for i in 0..batch {
        let col: &mut [T] = match keep.as_deref_mut() {
            Some(all) => &mut all[i * col_len..(i + 1) * col_len],
            None => &mut scratch,
        };
        im2col(g, &x[i * g.in_len()..(i + 1) * g.in_len()], col);
        let y = &mut out[i * g.out_len()..(i + 1) * g.out_len()];
        for (co, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            g.c_out,
            g.patch_len(),
            plane,
            T::one(),
            weight,
            (g.patch_len(), 1),
            col,
            (plane, 1),
            T::one(),
            y,
        );
    }
}

/// Gradients of a convolution. Weight and bias gradients are overwritten;
/// `dx` is skipped when `None` (first layer during training).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    conv2d_backward_cols(g, batch, ConvInput::Raw(x), weight, dy, dweight, dbias, dx);
}

/// Input of a convolution backward pass: the raw activations, or the im2col
/// matrices kept by [`conv2d_forward_keep`].
#[derive(Clone, Copy)]
pub enum ConvInput<'a, T> {
    Raw(&'a [T]),
    Cols(&'a [T]),
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_cols<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    input: ConvInput<'_, T>,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let plane = g.h_out() * g.w_out();
    let patch = g.patch_len();
    let col_len = patch * plane;
    let mut scratch = match input {
        ConvInput::Raw(_) => vec![T::zero(); col_len],
        ConvInput::Cols(_) => Vec::new(),
    };
    let mut dcol = vec![T::zero(); patch * plane];
    dweight.fill(T::zero());
    dbias.fill(T::zero());
    for i in 0..batch {
        let dyi = &dy[i * g.out_len()..(i + 1) * g.out_len()];
        for (co, chunk) in dyi.chunks(plane).enumerate() {
            dbias[co] = dbias[co] + chunk.iter().copied().sum::<T>();
        }
        let col: &[T] = match input {
            ConvInput::Raw(x) => {
                im2col(g, &x[i * g.in_len()..(i + 1) * g.in_len()], &mut scratch);
                &scratch
            }
            ConvInput::Cols(all) => &all[i * col_len..(i + 1) * col_len],
        };
        // dW += dY · colᵀ
        gemm(
            g.c_out,
            plane,
            patch,
            T::one(),
            dyi,
            (plane, 1),
            col,
            (1, plane),
            T::one(),
            dweight,
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dcol = Wᵀ · dY
            gemm(
                patch,
                g.c_out,
                plane,
                T::one(),
                weight,
                (1, patch),
                dyi,
                (plane, 1),
                T::zero(),
                &mut dcol,
            );
            col2im(g, &dcol, &mut dx[i * g.in_len()..(i + 1) * g.in_len()]);
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(activated: &[T], dy: &mut [T]) {
    for (d, a) in dy.iter_mut().zip(activated) {
        if *a <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Non-overlapping `size×size` max pooling with floor division of spatial dims.
/// Returns the pooled values and, per output, the flat input index of the max.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best_idx = base + oh * size * w + ow * size;
                let mut best = x[best_idx];
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (oh * size + di) * w + ow * size + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], argmax: &[u32], dx: &mut [T]) {
    dx.fill(T::zero());
    for (d, &idx) in dy.iter().zip(argmax) {
        dx[idx as usize] = dx[idx as usize] + *d;
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics retained for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Training-mode batch normalization over `n×c×(h·w)`; writes `gamma·x̂ + beta` into `out`.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) -> BatchNormCache<T> {
    let m = T::of((n * plane) as f64);
    let eps = T::of(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * plane;
            s = s + x[off..off + plane].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut sq = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for v in &x[off..off + plane] {
                let d = *v - mu;
                sq = sq + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let xh = (x[j] - mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                out[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BatchNormCache {
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub fn batchnorm_eval_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    out: &mut [T],
) {
    let eps = T::of(BN_EPS);
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                out[j] = x[j] * scale + shift;
            }
        }
    }
}

/// Backward of training-mode batch normalization. Overwrites `dgamma`, `dbeta`, `dx`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    dy: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let m = T::of((n * plane) as f64);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                sum_dy = sum_dy + dy[j];
                sum_dy_xhat = sum_dy_xhat + dy[j] * cache.xhat[j];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                dx[j] = k * (m * dy[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
            }
        }
    }
}

/// Row-wise numerically stable softmax of an `n×k` logit matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (*v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Batched affine map `y[n×out] = x[n×in]·Wᵀ + b` with `W` stored `out×in`.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); n * outputs];
    for row in y.chunks_mut(outputs) {
        row.copy_from_slice(bias);
    }
    gemm(
        n,
        inputs,
        outputs,
        T::one(),
        x,
        (inputs, 1),
        weight,
        (1, inputs),
        T::one(),
        &mut y,
    );
    y
}

/// Gradients of [`dense_forward`]; returns `dx` and overwrites `dweight`/`dbias`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    gemm(
        outputs,
        n,
        inputs,
        T::one(),
        dy,
        (1, outputs),
        x,
        (inputs, 1),
        T::zero(),
        dweight,
    );
    dbias.fill(T::zero());
    for row in dy.chunks(outputs) {
        for (b, d) in dbias.iter_mut().zip(row) {
            *b = *b + *d;
        }
    }
    let mut dx = vec![T::zero(); n * inputs];
    gemm(
        n,
        outputs,
        inputs,
        T::one(),
        dy,
        (outputs, 1),
        weight,
        (inputs, 1),
        T::zero(),
        &mut dx,
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_window_max() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_floors_odd_dims() {
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let (out, _) = maxpool_forward(&x, 1, 5, 5, 2);
        assert_eq!(out, vec![6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let p = softmax_rows(&[0.0f64; 10], 5);
        for v in p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_rows(&[1000.0f32, 0.0, -1000.0, 999.0, 1000.0], 5);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_kernel_conv_passes_gradient_through() {
        let g = ConvGeom {
            c_in: 1,
            h: 4,
            w: 5,
            c_out: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut weight = vec![0.0f64; 9];
        weight[4] = 1.0;
        let x: Vec<f64> = (0..20).map(|v| (v as f64 * 0.37).sin()).collect();
        let mut y = vec![0.0; 20];
        conv2d_forward(&g, 1, &x, &weight, &[0.0], &mut y);
        assert_eq!(y, x);
        // loss = sum of outputs, so dL/dy = 1 everywhere
        let dy = vec![1.0; 20];
        let mut dw = vec![0.0; 9];
        let mut db = vec![0.0; 1];
        let mut dx = vec![0.0; 20];
        conv2d_backward(&g, 1, &x, &weight, &dy, &mut dw, &mut db, Some(&mut dx));
        assert!(dx.iter().all(|v| *v == 1.0));
        assert_eq!(db[0], 20.0);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.in_len())
            .map(|v| ((v * 7 % 11) as f64) - 5.0)
            .collect();
        let w: Vec<f64> = (0..g.weight_len())
            .map(|v| ((v * 5 % 13) as f64) * 0.1 - 0.6)
            .collect();
        let b = [0.5, -0.25, 1.0];
        let mut y = vec![0.0; g.out_len()];
        conv2d_forward(&g, 1, &x, &w, &b, &mut y);
        for co in 0..3 {
            for oh in 0..5 {
                for ow in 0..4 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = oh as isize + ki as isize - 1;
                                let iw = ow as isize + kj as isize - 1;
                                if ih >= 0 && ih < 5 && iw >= 0 && iw < 4 {
                                    acc += w[((co * 2 + ci) * 3 + ki) * 3 + kj]
                                        * x[(ci * 5 + ih as usize) * 4 + iw as usize];
                                }
                            }
                        }
                    }
                    assert!((y[(co * 5 + oh) * 4 + ow] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_forward_is_affine() {
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2 outputs × 3 inputs
        let y = dense_forward(&[1.0, 0.0, -1.0], 1, 3, 2, &w, &[0.5, -0.5]);
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]);
    }
}
