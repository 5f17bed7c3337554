//! Slow, obviously-correct reference computations.
//!
//! Everything here works on raw slices in `(row, col, channel)` order and is
//! written independently of the optimized library so the two can be checked
//! against each other. Nothing in this crate is tuned for speed.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

/// Kernel layout `(ky, kx, c_in, c_out)`, same zero padding, cross-correlation.
pub fn conv2d_naive(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernel: &[f64],
    (k, cout): (usize, usize),
) -> Vec<f64> {
    assert_eq!(x.len(), h * w * cin);
    assert_eq!(kernel.len(), k * k * cin * cout);
    let r = (k / 2) as isize;
    let mut y = vec![0.0; h * w * cout];
    for row in 0..h as isize {
        for col in 0..w as isize {
            for o in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let sr = row + ky - r;
                        let sc = col + kx - r;
                        if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let xv = x[((sr as usize) * w + sc as usize) * cin + i];
                            let kv = kernel[((ky as usize * k + kx as usize) * cin + i) * cout + o];
                            acc += xv * kv;
                        }
                    }
                }
                y[((row as usize) * w + col as usize) * cout + o] = acc;
            }
        }
    }
    y
}

/// Dense matrix `A` with `vec(conv2d(x, k)) = A * vec(k)`, built column by
/// column from unit kernels.
pub fn conv_matrix(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    (k, cout): (usize, usize),
) -> DMatrix<f64> {
    let n = k * k * cin * cout;
    let mut a = DMatrix::zeros(h * w * cout, n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let col = conv2d_naive(x, (h, w, cin), &unit, (k, cout));
        a.set_column(j, &DVector::from_vec(col));
        unit[j] = 0.0;
    }
    a
}

/// One block of a weighted least-squares problem `||diag(w) (A k - b)||^2`.
pub struct WeightedBlock {
    pub a: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub target: Vec<f64>,
}

/// Minimizer of `scale * sum_i ||diag(w_i)(A_i k - b_i)||^2 + reg * ||k||^2`
/// via the normal equations.
pub fn weighted_ridge_solve(blocks: &[WeightedBlock], scale: f64, reg: f64) -> Vec<f64> {
    let n = blocks[0].a.ncols();
    let mut lhs = DMatrix::<f64>::identity(n, n) * reg;
    let mut rhs = DVector::<f64>::zeros(n);
    for b in blocks {
        let w2 = DVector::from_iterator(b.weights.len(), b.weights.iter().map(|w| w * w));
        let weighted = DMatrix::from_diagonal(&w2) * &b.a;
        lhs += b.a.transpose() * &weighted * scale;
        rhs += weighted.transpose() * DVector::from_column_slice(&b.target) * scale;
    }
    let chol = lhs.cholesky().expect("normal equations must be positive definite");
    chol.solve(&rhs).iter().copied().collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Evaluates `f` on `n` evenly spaced points of `[lo, hi]` and returns the
/// best `(t, f(t))`.
pub fn scan_argmin(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let mut best = (lo, f64::INFINITY);
    for i in 0..n {
        let t = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Depth-first flood fill with an explicit stack; components in order of
/// discovery by a row-major scan, pixels sorted.
pub fn flood_fill_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] || label[r * w + c] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            label[r * w + c] = id;
            while let Some((pr, pc)) = stack.pop() {
                comp.push((pr, pc));
                let neighbours = [
                    (pr as isize - 1, pc as isize),
                    (pr as isize + 1, pc as isize),
                    (pr as isize, pc as isize - 1),
                    (pr as isize, pc as isize + 1),
                ];
                for (nr, nc) in neighbours {
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push((nr as usize, nc as usize));
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
    }
    out
}

/// `(x_min, y_min, x_max, y_max)` of `(row, col)` pixels by plain folding.
pub fn bbox_reduce(pixels: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    let xs = pixels.iter().map(|p| p.1);
    let ys = pixels.iter().map(|p| p.0);
    (
        xs.clone().min().unwrap(),
        ys.clone().min().unwrap(),
        xs.max().unwrap(),
        ys.max().unwrap(),
    )
}

/// Median of the values within `half` positions of `i` (truncated at the ends).
pub fn windowed_median(seq: &[f64], i: usize, half: usize) -> f64 {
    let lo = i.saturating_sub(half);
    let hi = (i + half).min(seq.len() - 1);
    let mut v: Vec<f64> = seq[lo..=hi].to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Full 2D (non-separable) Gaussian blur truncated at `ceil(3 sigma)` and
/// renormalized over in-bounds taps.
pub fn gaussian_blur_direct(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (mut acc, mut norm) = (0.0, 0.0);
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (sr, sc) = (r + dr, c + dc);
                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                        continue;
                    }
                    let wt = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += wt * map[sr as usize * w + sc as usize];
                    norm += wt;
                }
            }
            out[r as usize * w + c as usize] = acc / norm;
        }
    }
    out
}

/// Foreground pixels with at least one 4-neighbour that is background or lies
/// outside the grid.
pub fn boundary_scan(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && r < h as isize && c < w as isize && mask[r as usize * w + c as usize]
    };
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1))
        })
        .collect()
}

/// Fraction of the axis-aligned square `[cr - s/2, cr + s/2] x [cc - s/2, cc + s/2]`
/// lying outside the frame `[-0.5, h - 0.5] x [-0.5, w - 0.5]`, estimated by
/// counting the centers of an `n x n` subdivision.
pub fn padded_fraction_sampled(center: (f64, f64), side: f64, h: usize, w: usize, n: usize) -> f64 {
    let mut outside = 0usize;
    for i in 0..n {
        let y = center.0 - side / 2.0 + (i as f64 + 0.5) * side / n as f64;
        let y_in = y >= -0.5 && y <= h as f64 - 0.5;
        for j in 0..n {
            let x = center.1 - side / 2.0 + (j as f64 + 0.5) * side / n as f64;
            let x_in = x >= -0.5 && x <= w as f64 - 0.5;
            if !(y_in && x_in) {
                outside += 1;
            }
        }
    }
    outside as f64 / (n * n) as f64
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            gauss(rng),
            gauss(rng),
            gauss(rng),
            gauss(rng),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller keeps this crate free of a distribution dependency
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Pinhole projection of a world point into a camera with camera-to-world
/// `(rotation, translation)`: returns `(u, v, depth)`.
pub fn project(
    point: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    intrinsics: &Matrix3<f64>,
) -> (f64, f64, f64) {
    let cam = rotation.transpose() * (point - translation);
    let pix = intrinsics * cam;
    (pix.x / pix.z, pix.y / pix.z, cam.z)
}
