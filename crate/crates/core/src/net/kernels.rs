//! Tensor kernels over channel-major activations laid out `[C][B][H][W]`.
//!
//! Keeping the channel outermost makes every batch-norm channel a contiguous
//! slice and lets a convolution over the whole batch be a single im2col
//! matrix product per chunk of samples.

use std::cell::RefCell;

use matrixmultiply::dgemm;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        ConvShape {
            cin,
            cout,
            kernel,
            stride,
            pad,
            h,
            w,
            ho,
            wo,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn chunk(&self, batch: usize) -> usize {
        (COL_BUDGET / (self.patch_len() * self.ho * self.wo)).clamp(1, batch)
    }
}

thread_local! {
    /// Reused im2col buffers; fresh multi-megabyte allocations per layer
    /// cost more in page faults than the copies themselves.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(
    col_len: usize,
    dcol_len: usize,
    f: impl FnOnce(&mut [f64], &mut [f64]) -> R,
) -> R {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (col, dcol) = &mut *guard;
        if col.len() < col_len {
            col.resize(col_len, 0.0);
        }
        if dcol.len() < dcol_len {
            dcol.resize(dcol_len, 0.0);
        }
        f(&mut col[..col_len], &mut dcol[..dcol_len])
    })
}

/// Output columns `lo..hi` whose stride-1 tap `kx` lands inside the row.
fn valid_range(s: &ConvShape, kx: usize) -> (usize, usize) {
    let lo = s.pad.saturating_sub(kx).min(s.wo);
    let hi = (s.w + s.pad).saturating_sub(kx).min(s.wo).max(lo);
    (lo, hi)
}

/// Unrolls samples `b0..b0+nb` into `col`, `[cin·k·k][nb·ho·wo]`.
fn im2col(x: &[f64], s: &ConvShape, batch: usize, b0: usize, nb: usize, col: &mut [f64]) {
    let plane = s.h * s.w;
    let n = nb * s.ho * s.wo;
    let k = s.kernel;
    for ci in 0..s.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                let mut idx = 0;
                for bi in 0..nb {
                    let src = &x[(ci * batch + b0 + bi) * plane..][..plane];
                    for oy in 0..s.ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            row[idx..idx + s.wo].fill(0.0);
                            idx += s.wo;
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..][..s.w];
                        let dst = &mut row[idx..idx + s.wo];
                        if s.stride == 1 {
                            let (lo, hi) = valid_range(s, kx);
                            dst[..lo].fill(0.0);
                            dst[lo..hi].copy_from_slice(&src_row[lo + kx - s.pad..hi + kx - s.pad]);
                            dst[hi..].fill(0.0);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                *d = if ix >= 0 && ix < s.w as isize {
                                    src_row[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                        idx += s.wo;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back and adds into `dx`.
fn col2im(col: &[f64], s: &ConvShape, batch: usize, b0: usize, nb: usize, dx: &mut [f64]) {
    let plane = s.h * s.w;
    let n = nb * s.ho * s.wo;
    let k = s.kernel;
    for ci in 0..s.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let mut idx = 0;
                for bi in 0..nb {
                    let dst = &mut dx[(ci * batch + b0 + bi) * plane..][..plane];
                    for oy in 0..s.ho {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            idx += s.wo;
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * s.w..][..s.w];
                        let src = &row[idx..idx + s.wo];
                        if s.stride == 1 {
                            let (lo, hi) = valid_range(s, kx);
                            let d = &mut dst_row[lo + kx - s.pad..hi + kx - s.pad];
                            d.iter_mut().zip(&src[lo..hi]).for_each(|(d, v)| *d += v);
                        } else {
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix >= 0 && ix < s.w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                        idx += s.wo;
                    }
                }
            }
        }
    }
}

/// `out = weight ⊛ x`; `weight` is `[cout][cin·k·k]`, `out` is overwritten.
pub(crate) fn conv_forward(
    x: &[f64],
    s: &ConvShape,
    batch: usize,
    weight: &[f64],
    out: &mut [f64],
) {
    let out_plane = s.ho * s.wo;
    assert_eq!(x.len(), s.cin * batch * s.h * s.w);
    assert_eq!(out.len(), s.cout * batch * out_plane);
    assert_eq!(weight.len(), s.weight_len());
    let chunk = s.chunk(batch);
    let kd = s.patch_len();
    with_scratch(kd * chunk * out_plane, 0, |col, _| {
        let mut b0 = 0;
        while b0 < batch {
            let nb = chunk.min(batch - b0);
            let n = nb * out_plane;
            im2col(x, s, batch, b0, nb, col);
            // SAFETY: the asserts above bound every row/column walked below.
            unsafe {
                dgemm(
                    s.cout,
                    kd,
                    n,
                    1.0,
                    weight.as_ptr(),
                    kd as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(b0 * out_plane),
                    (batch * out_plane) as isize,
                    1,
                );
            }
            b0 += nb;
        }
    });
}

/// Accumulates the weight gradient into `dweight` and, when requested, the
/// input gradient into `dx`.
pub(crate) fn conv_backward(
    x: &[f64],
    s: &ConvShape,
    batch: usize,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let out_plane = s.ho * s.wo;
    assert_eq!(x.len(), s.cin * batch * s.h * s.w);
    assert_eq!(dout.len(), s.cout * batch * out_plane);
    assert_eq!(dweight.len(), s.weight_len());
    if let Some(dx) = dx.as_deref() {
        assert_eq!(dx.len(), x.len());
    }
    let chunk = s.chunk(batch);
    let kd = s.patch_len();
    let col_len = kd * chunk * out_plane;
    with_scratch(
        col_len,
        if dx.is_some() { col_len } else { 0 },
        |col, dcol| {
            let mut b0 = 0;
            while b0 < batch {
                let nb = chunk.min(batch - b0);
                let n = nb * out_plane;
                im2col(x, s, batch, b0, nb, col);
                // SAFETY: shapes asserted above; `col`/`dcol` hold at least kd·n.
                unsafe {
                    let dout_ptr = dout.as_ptr().add(b0 * out_plane);
                    let dout_rs = (batch * out_plane) as isize;
                    dgemm(
                        s.cout,
                        n,
                        kd,
                        1.0,
                        dout_ptr,
                        dout_rs,
                        1,
                        col.as_ptr(),
                        1,
                        n as isize,
                        1.0,
                        dweight.as_mut_ptr(),
                        kd as isize,
                        1,
                    );
                    if dx.is_some() {
                        dgemm(
                            kd,
                            s.cout,
                            n,
                            1.0,
                            weight.as_ptr(),
                            1,
                            kd as isize,
                            dout_ptr,
                            dout_rs,
                            1,
                            0.0,
                            dcol.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    col2im(dcol, s, batch, b0, nb, dx);
                }
                b0 += nb;
            }
        },
    );
}

/// Batch statistics and normalized activations of one batch-norm layer.
#[derive(Clone, Debug)]
pub(crate) struct BnTrace {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train-mode batch norm followed by ReLU; statistics are per channel over
/// batch and space, variance biased.
pub(crate) fn bn_relu_train(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> BnTrace {
    let n = x.len() / channels;
    let mut trace = BnTrace {
        xhat: vec![0.0; x.len()],
        inv_std: vec![0.0; channels],
        mean: vec![0.0; channels],
        var: vec![0.0; channels],
    };
    for c in 0..channels {
        let xs = &x[c * n..][..n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let xh = &mut trace.xhat[c * n..][..n];
        let o = &mut out[c * n..][..n];
        for ((xh, o), v) in xh.iter_mut().zip(o.iter_mut()).zip(xs) {
            *xh = (v - mean) * inv;
            *o = (gamma[c] * *xh + beta[c]).max(0.0);
        }
        trace.inv_std[c] = inv;
        trace.mean[c] = mean;
        trace.var[c] = var;
    }
    trace
}

/// Eval-mode batch norm with running statistics, followed by ReLU.
pub(crate) fn bn_relu_eval(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    out: &mut [f64],
) {
    let n = x.len() / channels;
    for c in 0..channels {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        for (o, v) in out[c * n..][..n].iter_mut().zip(&x[c * n..][..n]) {
            *o = (gamma[c] * ((v - mean[c]) * inv) + beta[c]).max(0.0);
        }
    }
}

/// Rebuilds the ReLU output of a train-mode batch norm from its trace.
pub(crate) fn bn_relu_recompute(
    xhat: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let n = xhat.len() / channels;
    let mut out = vec![0.0; xhat.len()];
    for c in 0..channels {
        for (o, xh) in out[c * n..][..n].iter_mut().zip(&xhat[c * n..][..n]) {
            *o = (gamma[c] * xh + beta[c]).max(0.0);
        }
    }
    out
}

/// Backward through ReLU and train-mode batch norm. Accumulates into
/// `dgamma`, `dbeta` and `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_relu_backward(
    trace: &BnTrace,
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    dout: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = dout.len() / channels;
    let mut dy = vec![0.0; n];
    for c in 0..channels {
        let xh = &trace.xhat[c * n..][..n];
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for ((d, x), g) in dy.iter_mut().zip(xh).zip(&dout[c * n..][..n]) {
            *d = if gamma[c] * x + beta[c] > 0.0 {
                *g
            } else {
                0.0
            };
            sum_dy += *d;
            sum_dy_xh += *d * x;
        }
        dgamma[c] += sum_dy_xh;
        dbeta[c] += sum_dy;
        let scale = gamma[c] * trace.inv_std[c] / n as f64;
        for ((o, d), x) in dx[c * n..][..n].iter_mut().zip(&dy).zip(xh) {
            *o += scale * (n as f64 * d - sum_dy - x * sum_dy_xh);
        }
    }
}

/// `c = a · bᵀ` for row-major `a` (`m×k`) and `b` (`n×k`); `c` is `m×n`.
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    // SAFETY: lengths asserted above.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += aᵀ · b` for row-major `a` (`k×m`) and `b` (`k×n`); `c` is `m×n`.
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    // SAFETY: lengths asserted above.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b` for row-major `a` (`m×k`) and `b` (`k×n`).
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    // SAFETY: lengths asserted above.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
