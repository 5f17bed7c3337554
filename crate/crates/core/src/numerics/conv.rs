//! Same-padded multi-channel 2D convolution and its two adjoints.
//!
//! All three routines share one index convention (cross-correlation, zero
//! padding, kernel centered on the output pixel):
//!
//! ```text
//! y[p, o] = sum_{dy, dx, i} x[p + (dy - r, dx - r), i] * k[dy, dx, i, o]
//! ```
//!
//! `conv2d_transpose` is the adjoint in `x` and `kernel_gradient` the adjoint in
//! `k`, so the three satisfy `<conv2d(a, k), b> = <a, conv2d_transpose(b, k)>
//! = <k, kernel_gradient(a, b)>` exactly up to rounding.

use super::tensor::{ConvKernel, FeatureMap, KernelShape};
use crate::error::{ensure, Result};

/// Valid tap range for an output coordinate `p` in a dimension of size `n`.
#[inline]
fn tap_range(p: usize, r: usize, k: usize, n: usize) -> (usize, usize) {
    // tap t reads input index p + t - r; need 0 <= p + t - r < n
    let lo = r.saturating_sub(p);
    let hi = (n + r - p).min(k);
    (lo, hi)
}

pub fn conv2d(x: &FeatureMap, k: &ConvKernel) -> Result<FeatureMap> {
    let s = k.shape();
    ensure!(
        x.channels() == s.in_channels,
        Dimension,
        "conv2d input has {} channels, kernel expects {}",
        x.channels(),
        s.in_channels
    );
    let (h, w) = (x.height(), x.width());
    let r = s.k / 2;
    let cout = s.out_channels;
    let kd = k.data();
    let mut out = FeatureMap::zeros(h, w, cout);
    for y in 0..h {
        let (ky0, ky1) = tap_range(y, r, s.k, h);
        for xx in 0..w {
            let (kx0, kx1) = tap_range(xx, r, s.k, w);
            let acc = out.pixel_mut(y, xx);
            for ky in ky0..ky1 {
                let sy = y + ky - r;
                for kx in kx0..kx1 {
                    let sx = xx + kx - r;
                    let input = x.pixel(sy, sx);
                    let base = (ky * s.k + kx) * s.in_channels;
                    for (ci, &v) in input.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &kd[(base + ci) * cout..(base + ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(row) {
                            *a += v * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `out_channels` maps
/// back to `in_channels` maps.
pub fn conv2d_transpose(x: &FeatureMap, k: &ConvKernel) -> Result<FeatureMap> {
    let s = k.shape();
    ensure!(
        x.channels() == s.out_channels,
        Dimension,
        "conv2d_transpose input has {} channels, kernel produces {}",
        x.channels(),
        s.out_channels
    );
    let (h, w) = (x.height(), x.width());
    let r = s.k / 2;
    let cout = s.out_channels;
    let kd = k.data();
    let mut out = FeatureMap::zeros(h, w, s.in_channels);
    for y in 0..h {
        let (ky0, ky1) = tap_range(y, r, s.k, h);
        for xx in 0..w {
            let (kx0, kx1) = tap_range(xx, r, s.k, w);
            let upstream = x.pixel(y, xx);
            if upstream.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in ky0..ky1 {
                let sy = y + ky - r;
                for kx in kx0..kx1 {
                    let sx = xx + kx - r;
                    let base = (ky * s.k + kx) * s.in_channels;
                    let target = out.pixel_mut(sy, sx);
                    for (ci, t) in target.iter_mut().enumerate() {
                        let row = &kd[(base + ci) * cout..(base + ci + 1) * cout];
                        *t += row.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to the kernel.
///
/// With `residual = conv2d(x, k) - y` this is the gradient of
/// `0.5 * ||conv2d(x, k) - y||^2` in `k`.
pub fn kernel_gradient(
    x: &FeatureMap,
    residual: &FeatureMap,
    shape: KernelShape,
) -> Result<ConvKernel> {
    shape.validate()?;
    ensure!(
        x.channels() == shape.in_channels,
        Dimension,
        "kernel_gradient input has {} channels, kernel expects {}",
        x.channels(),
        shape.in_channels
    );
    ensure!(
        residual.channels() == shape.out_channels,
        Dimension,
        "kernel_gradient residual has {} channels, kernel produces {}",
        residual.channels(),
        shape.out_channels
    );
    ensure!(
        residual.height() == x.height() && residual.width() == x.width(),
        Dimension,
        "residual is {}x{}, input is {}x{}",
        residual.height(),
        residual.width(),
        x.height(),
        x.width()
    );
    let (h, w) = (x.height(), x.width());
    let r = shape.k / 2;
    let cout = shape.out_channels;
    let mut grad = ConvKernel::zeros(shape);
    let gd = grad.data_mut();
    for y in 0..h {
        let (ky0, ky1) = tap_range(y, r, shape.k, h);
        for xx in 0..w {
            let res = residual.pixel(y, xx);
            if res.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (kx0, kx1) = tap_range(xx, r, shape.k, w);
            for ky in ky0..ky1 {
                let sy = y + ky - r;
                for kx in kx0..kx1 {
                    let sx = xx + kx - r;
                    let input = x.pixel(sy, sx);
                    let base = (ky * shape.k + kx) * shape.in_channels;
                    for (ci, &v) in input.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &mut gd[(base + ci) * cout..(base + ci + 1) * cout];
                        for (g, &e) in row.iter_mut().zip(res) {
                            *g += v * e;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}
