//! Reference checks runnable from the command line.
//!
//! Every check pits an optimized routine against a slow oracle (naive loops,
//! dense normal equations, finite differences, dense scans, flood fills, hand
//! computations) on fixed-seed instances. Results are deterministic; only the
//! timings vary between runs.

use std::fmt::Display;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use vql_core::numerics::{self as nm, BBox, BinaryMask, ConvKernel, FeatureMap, KernelShape, ScoreMap};
use vql_core::pipeline::{finalize_3d, run_video, Pipeline, PipelineConfig, TrackOutput};
use vql_core::{amm, crop, fusion, geo3d, glm};
use vql_oracles::{
    bbox_reduce, boundary_scan, central_difference, conv2d_naive, conv_matrix, flood_fill_components,
    gaussian_blur_direct, padded_fraction_sampled, project, random_rotation, scan_argmin,
    weighted_ridge_solve, windowed_median, WeightedBlock,
};

use crate::metrics::{eval_2d, eval_3d, Thresholds3D};
use crate::scenario::{blob_center, generate, generate_with, Preset, Scenario, DRIFT_RATE};

/// `Ok` carries a one-line summary, `Err` the first violated expectation.
pub type Outcome = Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn e(err: impl Display) -> String {
    err.to_string()
}

pub const CHECKS: &[Check] = &[
    Check { name: "numerics.conv-naive", run: conv_naive },
    Check { name: "numerics.conv-adjoint", run: conv_adjoint },
    Check { name: "numerics.kernel-gradient-fd", run: kernel_gradient_fd },
    Check { name: "numerics.components-flood-fill", run: components_flood_fill },
    Check { name: "numerics.bbox-reduction", run: bbox_reduction },
    Check { name: "numerics.median-sort", run: median_sort },
    Check { name: "numerics.blur-direct", run: blur_direct },
    Check { name: "amm.encoder-boundary", run: encoder_boundary },
    Check { name: "amm.reweight-half-plane", run: reweight_half_plane },
    Check { name: "amm.loss-naive", run: amm_loss_naive },
    Check { name: "amm.gradient-fd", run: amm_gradient_fd },
    Check { name: "amm.step-line-scan", run: amm_step_line_scan },
    Check { name: "amm.step-special-cases", run: amm_step_special_cases },
    Check { name: "amm.descent-ridge-minimum", run: amm_descent_ridge_minimum },
    Check { name: "amm.descent-monotone", run: amm_descent_monotone },
    Check { name: "amm.crop-padding", run: amm_crop_padding },
    Check { name: "amm.fifo-replay", run: amm_fifo_replay },
    Check { name: "glm.loss-naive", run: glm_loss_naive },
    Check { name: "glm.gradient-fd", run: glm_gradient_fd },
    Check { name: "glm.gradient-wls", run: glm_gradient_wls },
    Check { name: "glm.beta-line-scan", run: glm_beta_line_scan },
    Check { name: "glm.beta-pure-ridge", run: glm_beta_pure_ridge },
    Check { name: "glm.converge-wls", run: glm_converge_wls },
    Check { name: "glm.monotone", run: glm_monotone },
    Check { name: "glm.crop-geometry", run: glm_crop_geometry },
    Check { name: "glm.update-source", run: glm_update_source_replay },
    Check { name: "fusion.fuse-elementwise", run: fuse_elementwise },
    Check { name: "fusion.decode-channel-mean", run: decode_channel_mean },
    Check { name: "fusion.extract-components", run: extract_components },
    Check { name: "fusion.localize-hand", run: localize_hand },
    Check { name: "fusion.localize-replay", run: localize_replay },
    Check { name: "geo3d.sim3-noiseless", run: sim3_noiseless },
    Check { name: "geo3d.sim3-noisy", run: sim3_noisy },
    Check { name: "geo3d.projection-round-trip", run: projection_round_trip },
    Check { name: "geo3d.semantic-hand", run: semantic_hand },
    Check { name: "geo3d.aggregate-scalar-loop", run: aggregate_scalar_loop },
    Check { name: "pipeline.init-bank-size", run: init_bank_size },
    Check { name: "pipeline.identity-frame", run: identity_frame },
    Check { name: "pipeline.null-frame", run: null_frame },
    Check { name: "pipeline.geo-aggregate", run: geo_aggregate },
    Check { name: "pipeline.corrupted-view", run: corrupted_view },
    Check { name: "harness.drift-cosine", run: drift_cosine },
    Check { name: "harness.half-overlap", run: half_overlap },
    Check { name: "harness.l2-perturbation", run: l2_perturbation },
    Check { name: "harness.identity-end-to-end", run: identity_end_to_end },
];

/// Runs every check whose name contains `filter`, in registry order.
pub fn run(filter: Option<&str>) -> Vec<CheckReport> {
    let selected: Vec<&Check> = CHECKS
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    selected
        .par_iter()
        .map(|c| {
            let t0 = Instant::now();
            // a panicking check is a failed check, not a crashed run
            let outcome = std::panic::catch_unwind(c.run)
                .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
            let seconds = t0.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckReport { name: c.name.to_string(), passed, detail, seconds }
        })
        .collect()
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

// ---- random instances ----

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn feature(r: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, uniform_vec(r, h * w * c)).expect("sizes match")
}

fn kernel(r: &mut impl Rng, k: usize, cin: usize, cout: usize) -> ConvKernel {
    let shape = KernelShape::new(k, cin, cout).expect("valid shape");
    ConvKernel::new(shape, uniform_vec(r, shape.len())).expect("sizes match")
}

fn unit_scores(r: &mut impl Rng, h: usize, w: usize) -> ScoreMap {
    ScoreMap::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).expect("sizes match")
}

fn mask(r: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(p)).collect()).expect("sizes match")
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / base
}

fn conv_dims(r: &mut impl Rng) -> (usize, usize, usize, usize, usize) {
    (
        r.random_range(1..=8),
        r.random_range(1..=8),
        r.random_range(1..=4),
        r.random_range(1..=4),
        [1, 3, 5][r.random_range(0..3)],
    )
}

// ---- numerics ----

fn conv_naive() -> Outcome {
    let mut r = rng(11);
    let x = feature(&mut r, 5, 5, 2);
    let k = kernel(&mut r, 3, 2, 3);
    let fast = nm::conv2d(&x, &k).map_err(e)?;
    let mut worst = rel_err(fast.data(), &conv2d_naive(x.data(), (5, 5, 2), k.data(), (3, 3)));
    ensure!(worst <= 1e-12, "5x5x2 instance: relative error {worst:e}");
    for _ in 0..30 {
        let (h, w, cin, cout, ks) = conv_dims(&mut r);
        let x = feature(&mut r, h, w, cin);
        let k = kernel(&mut r, ks, cin, cout);
        let fast = nm::conv2d(&x, &k).map_err(e)?;
        let err = rel_err(fast.data(), &conv2d_naive(x.data(), (h, w, cin), k.data(), (ks, cout)));
        ensure!(err <= 1e-12, "{h}x{w}x{cin} -> {cout}, k={ks}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("31 instances, worst relative error {worst:.1e} (limit 1e-12)"))
}

fn conv_adjoint() -> Outcome {
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (h, w, cin, cout, ks) = conv_dims(&mut r);
        let a = feature(&mut r, h, w, cin);
        let b = feature(&mut r, h, w, cout);
        let k = kernel(&mut r, ks, cin, cout);
        let lhs = nm::conv2d(&a, &k).map_err(e)?.dot(&b).map_err(e)?;
        let rhs = a.dot(&nm::conv2d_transpose(&b, &k).map_err(e)?).map_err(e)?;
        let via_kernel = k.dot(&nm::kernel_gradient(&a, &b, k.shape()).map_err(e)?);
        let scale = lhs.abs().max(1.0);
        let err = (lhs - rhs).abs().max((lhs - via_kernel).abs()) / scale;
        ensure!(err <= 1e-10, "adjoint identity off by {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances, worst relative gap {worst:.1e} (limit 1e-10)"))
}

fn kernel_gradient_fd() -> Outcome {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (h, w, cin, cout, ks) = conv_dims(&mut r);
        let x = feature(&mut r, h, w, cin);
        let y = feature(&mut r, h, w, cout);
        let k = kernel(&mut r, ks, cin, cout);
        let pred = nm::conv2d(&x, &k).map_err(e)?;
        let res = FeatureMap::new(h, w, cout, pred.data().iter().zip(y.data()).map(|(p, t)| p - t).collect())
            .map_err(e)?;
        let grad = nm::kernel_gradient(&x, &res, k.shape()).map_err(e)?;
        let half_sq = |kd: &[f64]| {
            let out = conv2d_naive(x.data(), (h, w, cin), kd, (ks, cout));
            0.5 * out.iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
        };
        let fd = central_difference(half_sq, k.data(), 1e-5);
        let err = rel_err(grad.data(), &fd);
        ensure!(err <= 1e-5, "{h}x{w}x{cin} -> {cout}, k={ks}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances, worst relative error {worst:.1e} (limit 1e-5)"))
}

fn components_flood_fill() -> Outcome {
    let mut r = rng(14);
    let mut total = 0;
    for i in 0..30 {
        let p = r.random_range(0.0..1.0);
        let m = mask(&mut r, 16, 16, p);
        let got = nm::connected_components(&m);
        ensure!(got == flood_fill_components(m.data(), 16, 16), "mask {i} (density {p:.2}) differs from flood fill");
        total += got.len();
    }
    Ok(format!("30 random 16x16 masks, {total} components matched"))
}

fn bbox_reduction() -> Outcome {
    let mut r = rng(15);
    for i in 0..50 {
        let n = r.random_range(1..40);
        let px: Vec<(usize, usize)> = (0..n).map(|_| (r.random_range(0..50), r.random_range(0..50))).collect();
        let b = nm::min_bounding_rect(&px).map_err(e)?;
        ensure!((b.x_min, b.y_min, b.x_max, b.y_max) == bbox_reduce(&px), "set {i}: {b:?} vs {:?}", bbox_reduce(&px));
    }
    Ok("50 random pixel sets matched min/max folding".into())
}

fn median_sort() -> Outcome {
    let mut r = rng(16);
    for i in 0..50 {
        let n = r.random_range(1..40);
        let seq: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let half = r.random_range(0..4);
        let out = nm::median_filter_1d(&seq, 2 * half + 1).map_err(e)?;
        for (j, v) in out.iter().enumerate() {
            ensure!(*v == windowed_median(&seq, j, half), "sequence {i}, position {j}");
        }
    }
    Ok("50 sequences matched the sort-based median exactly".into())
}

fn blur_direct() -> Outcome {
    let mut r = rng(17);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let sigma = r.random_range(0.3..2.5);
        let m = unit_scores(&mut r, 9, 7);
        let fast = nm::gaussian_blur(&m, sigma).map_err(e)?;
        for (a, b) in fast.data().iter().zip(gaussian_blur_direct(m.data(), 9, 7, sigma)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-12, "separable blur off by {worst:e}");
    Ok(format!("10 maps, worst deviation {worst:.1e} (limit 1e-12)"))
}

// ---- amm ----

fn amm_bank(seed: u64, n: usize, h: usize, c: usize) -> amm::AmmMemory {
    let mut r = rng(seed);
    let mut mem = amm::AmmMemory::new(50, h).expect("valid capacity");
    for _ in 0..n {
        let m = mask(&mut r, h, h, 0.4);
        let conf = r.random_range(0.0..1.0);
        mem.update(amm::AmmSample::new(feature(&mut r, h, h, c), m, conf).expect("valid sample"))
            .expect("matching resolution");
    }
    mem
}

/// Segmentation loss from the naive convolution, weights broadcast by hand.
fn amm_dense_loss(mem: &amm::AmmMemory, k: usize, c: usize, kd: &[f64], delta: f64) -> f64 {
    let enc = amm::PseudoLabelEncoder::default();
    let rw = amm::TargetReweighter::default();
    let mut total = 0.0;
    for s in mem.entries() {
        let h = s.mask.height();
        let y = conv2d_naive(s.feature.data(), (h, h, c), kd, (k, 3));
        let q = enc.encode(&s.mask);
        let w = amm::reweight(&s.mask, &rw).expect("default reweighter is valid");
        for (i, (a, b)) in y.iter().zip(q.data()).enumerate() {
            let d = w.data()[i / 3] * (a - b);
            total += d * d;
        }
    }
    0.5 * total + 0.5 * delta * kd.iter().map(|v| v * v).sum::<f64>()
}

fn amm_ridge_optimum(mem: &amm::AmmMemory, k: usize, c: usize, delta: f64) -> Vec<f64> {
    let enc = amm::PseudoLabelEncoder::default();
    let rw = amm::TargetReweighter::default();
    let blocks: Vec<_> = mem
        .entries()
        .map(|s| {
            let h = s.mask.height();
            let w = amm::reweight(&s.mask, &rw).expect("default reweighter is valid");
            WeightedBlock {
                a: conv_matrix(s.feature.data(), (h, h, c), (k, 3)),
                weights: (0..h * h * 3).map(|i| w.data()[i / 3]).collect(),
                target: enc.encode(&s.mask).data().to_vec(),
            }
        })
        .collect();
    weighted_ridge_solve(&blocks, 1.0, delta)
}

fn amm_instance(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..=5), [1, 3][r.random_range(0..2)], [1, 2, 4][r.random_range(0..3)])
}

fn encoder_boundary() -> Outcome {
    let square = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
    let ring = amm::PseudoLabelEncoder::default().encode(&square).channel(1);
    let on: Vec<_> = (0..25).filter(|&i| ring.data()[i] == 1.0).collect();
    ensure!(on.len() == 8 && ring.at(2, 2) == 0.0, "3x3 square boundary has {} pixels", on.len());
    let mut r = rng(18);
    for i in 0..30 {
        let p = r.random_range(0.05..0.95);
        let m = mask(&mut r, 9, 7, p);
        let enc = amm::PseudoLabelEncoder::default().encode(&m);
        let scan = boundary_scan(m.data(), 9, 7);
        for (j, &b) in scan.iter().enumerate() {
            ensure!(enc.channel(1).data()[j] == if b { 1.0 } else { 0.0 }, "mask {i}, pixel {j}");
        }
    }
    Ok("3x3 square gives an 8-pixel ring; 30 masks matched the neighbour scan".into())
}

fn reweight_half_plane() -> Outcome {
    let m = BinaryMask::from_fn(10, 10, |_, c| c < 5);
    let w = amm::reweight(&m, &amm::TargetReweighter::default()).map_err(e)?;
    let blurred = gaussian_blur_direct(m.to_scores().data(), 10, 10, 1.0);
    for (a, b) in w.data().iter().zip(&blurred) {
        ensure!((a - (0.25 + 0.75 * b)).abs() <= 1e-12, "weight {a} vs direct blur {b}");
    }
    for r in 0..10 {
        for c in 1..10 {
            ensure!(w.at(r, c) <= w.at(r, c - 1), "weights rise across the boundary at ({r}, {c})");
        }
    }
    Ok("half-plane weights match the direct Gaussian and fall monotonically".into())
}

fn amm_loss_naive() -> Outcome {
    let mut r = rng(19);
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (n, k, c) = amm_instance(&mut r);
        let mem = amm_bank(1000 + i, n, 5, c);
        let f = amm::SegFilter::new(kernel(&mut r, k, c, 3), 0.01).map_err(e)?;
        let fast = amm::seg_loss(&f, &mem, &Default::default(), &Default::default()).map_err(e)?;
        let slow = amm_dense_loss(&mem, k, c, f.kernel.data(), 0.01);
        let err = (fast - slow).abs() / slow;
        ensure!(err <= 1e-12, "instance {i}: {fast} vs {slow}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances, worst relative error {worst:.1e} (limit 1e-12)"))
}

fn amm_gradient_fd() -> Outcome {
    let mut r = rng(20);
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (n, k, c) = amm_instance(&mut r);
        let mem = amm_bank(2000 + i, n, 6, c);
        let f = amm::SegFilter::new(kernel(&mut r, k, c, 3), 0.01).map_err(e)?;
        let g = amm::seg_gradient(&f, &mem, &Default::default(), &Default::default()).map_err(e)?;
        let fd = central_difference(|kd| amm_dense_loss(&mem, k, c, kd, 0.01), f.kernel.data(), 1e-5);
        let err = rel_err(g.data(), &fd);
        ensure!(err <= 1e-5, "instance {i}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances, worst relative error {worst:.1e} (limit 1e-5)"))
}

fn amm_step_line_scan() -> Outcome {
    let mut r = rng(21);
    let enc = amm::PseudoLabelEncoder::default();
    let rw = amm::TargetReweighter::default();
    for i in 0..50 {
        let (n, k, c) = amm_instance(&mut r);
        let mem = amm_bank(3000 + i, n, 5, c);
        let f = amm::SegFilter::new(kernel(&mut r, k, c, 3), 0.01).map_err(e)?;
        let obj = amm::SegObjective::from_memory(&mem, &f, &enc, &rw).map_err(e)?;
        let g = obj.gradient(&f.kernel).map_err(e)?;
        let alpha = amm::steepest_step_size(&g, &mem, &rw, 0.01).map_err(e)?.ok_or("zero gradient")?;
        let at = |t: f64| obj.loss(&f.kernel.add_scaled(&g, -t)).expect("shapes match");
        let best = at(alpha);
        let (t, scanned) = scan_argmin(at, 0.0, 2.0 * alpha, 10_000);
        ensure!(best <= scanned, "instance {i}: scan point {t} beats alpha {alpha} ({scanned} < {best})");
    }
    Ok("alpha beat every point of a 10^4 scan on 50 instances".into())
}

fn amm_step_special_cases() -> Outcome {
    // one-hot pixels make a 1x1 convolution an isometry
    let c = 4;
    let mut mem = amm::AmmMemory::new(50, 2).map_err(e)?;
    let x = FeatureMap::from_fn(2, 2, c, |r, col, ch| if r * 2 + col == ch { 1.0 } else { 0.0 });
    mem.update(amm::AmmSample::new(x, BinaryMask::from_pixels(2, 2, &[(0, 0)]).map_err(e)?, 1.0).map_err(e)?)
        .map_err(e)?;
    let flat = amm::TargetReweighter::new(1.0, 1.0, 1.0).map_err(e)?;
    let g = kernel(&mut rng(22), 1, c, 3);
    let alpha = amm::steepest_step_size(&g, &mem, &flat, 0.0).map_err(e)?.ok_or("zero gradient")?;
    ensure!((alpha - 1.0).abs() <= 1e-12, "identity features: alpha = {alpha}");

    let mut mem = amm::AmmMemory::new(50, 4).map_err(e)?;
    mem.update(
        amm::AmmSample::new(FeatureMap::zeros(4, 4, 2), BinaryMask::from_pixels(4, 4, &[(1, 1)]).map_err(e)?, 1.0)
            .map_err(e)?,
    )
    .map_err(e)?;
    let g = kernel(&mut rng(23), 3, 2, 3);
    for delta in [0.01, 0.5, 3.0] {
        let alpha = amm::steepest_step_size(&g, &mem, &Default::default(), delta).map_err(e)?.ok_or("zero gradient")?;
        ensure!((alpha - 1.0 / delta).abs() <= 1e-12 / delta, "pure ridge delta {delta}: alpha = {alpha}");
    }
    Ok("alpha = 1 for isometric features, 1/delta for pure ridge".into())
}

fn amm_descent_ridge_minimum() -> Outcome {
    let enc = amm::PseudoLabelEncoder::default();
    let rw = amm::TargetReweighter::default();
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..10 {
        let (k, c) = if seed % 2 == 0 { (3, 2) } else { (1, 2) };
        let mem = amm_bank(100 + seed, 8, 4, c);
        let shape = KernelShape::new(k, c, 3).map_err(e)?;
        let opt = ConvKernel::new(shape, amm_ridge_optimum(&mem, k, c, 0.01)).map_err(e)?;
        let start = amm::SegFilter::zeros(shape, 0.01).map_err(e)?;
        let obj = amm::SegObjective::from_memory(&mem, &start, &enc, &rw).map_err(e)?;
        let best = obj.loss(&opt).map_err(e)?;
        let (_, trace) = amm::steepest_descent_trace(&start, &obj, 200).map_err(e)?;
        let gap = trace.last().expect("trace holds the start") - best;
        ensure!(gap <= 1e-6, "seed {seed}: gap {gap:e} after 200 iterations");
        ensure!(trace.windows(2).all(|p| p[1] <= p[0]), "seed {seed}: loss increased");
        worst = worst.max(gap);
    }
    Ok(format!("10 banks, worst gap to the normal-equations minimum {worst:.1e} (limit 1e-6)"))
}

fn amm_descent_monotone() -> Outcome {
    let enc = amm::PseudoLabelEncoder::default();
    let rw = amm::TargetReweighter::default();
    let mut r = rng(24);
    for i in 0..100 {
        let (n, k, c) = amm_instance(&mut r);
        let mem = amm_bank(4000 + i, n, 5, c);
        let start = amm::SegFilter::new(kernel(&mut r, k, c, 3), 0.01).map_err(e)?;
        let obj = amm::SegObjective::from_memory(&mem, &start, &enc, &rw).map_err(e)?;
        let (_, trace) = amm::steepest_descent_trace(&start, &obj, 15).map_err(e)?;
        ensure!(trace.windows(2).all(|p| p[1] <= p[0]), "instance {i}: loss increased");
    }
    Ok("100 runs of 15 iterations never increased the loss".into())
}

fn amm_crop_padding() -> Outcome {
    // L-shaped object hugging a corner: the 1.5x crop is mostly padding
    let mut px = Vec::new();
    for i in 0..20 {
        px.push((0, i));
        px.push((i, 0));
    }
    let m = BinaryMask::from_pixels(64, 64, &px).map_err(e)?;
    let (win, scale) = crop::mask_crop_window(&m).map_err(e)?;
    let centroid = m.centroid().ok_or("empty mask")?;
    let at_15 = padded_fraction_sampled(centroid, 30.0, 64, 64, 600);
    ensure!(at_15 > 0.5 && scale == 1.2, "corner object: 1.5x pads {at_15}, chose {scale}");
    ensure!(padded_fraction_sampled(win.center, win.side, 64, 64, 600) <= 0.5, "fallback still over-padded");

    let full = BinaryMask::from_fn(32, 32, |_, _| true);
    let (win, scale) = crop::mask_crop_window(&full).map_err(e)?;
    let expected = 1.0 - 1024.0 / (38.4f64 * 38.4);
    ensure!(scale == 1.2 && (win.padded_fraction(32, 32) - expected).abs() <= 1e-12, "whole-frame mask");

    let mut r = rng(25);
    for _ in 0..30 {
        let (r0, c0, hs, ws) = (r.random_range(0..30), r.random_range(0..30), r.random_range(1..20), r.random_range(1..20));
        let m = BinaryMask::from_fn(32, 32, |y, x| (r0..r0 + hs).contains(&y) && (c0..c0 + ws).contains(&x));
        let (win, _) = crop::mask_crop_window(&m).map_err(e)?;
        let exact = win.padded_fraction(32, 32);
        let sampled = padded_fraction_sampled(win.center, win.side, 32, 32, 400);
        ensure!((exact - sampled).abs() <= 0.01, "padding {exact} vs sampled {sampled}");
    }
    Ok(format!("corner falls back to 1.2x (1.5x pads {:.0}%), whole frame exact, 30 windows vs area sampling", 100.0 * at_15))
}

fn amm_fifo_replay() -> Outcome {
    let mut r = rng(26);
    let mut mem = amm::AmmMemory::new(50, 2).map_err(e)?;
    let mut admitted = Vec::new();
    for i in 0..200 {
        let prob = unit_scores(&mut r, 2, 2);
        let m = mask(&mut r, 2, 2, 0.5);
        let vals: Vec<f64> = m.pixels().map(|(y, x)| prob.at(y, x)).collect();
        let want = !vals.is_empty() && vals.iter().sum::<f64>() / vals.len() as f64 >= 0.6;
        let got = amm::amm_admit(&prob, &m, 0.6).map_err(e)?;
        ensure!(got == want, "frame {i}: admission {got}, mean rule says {want}");
        if got {
            let s = amm::AmmSample::new(FeatureMap::from_fn(2, 2, 1, |_, _, _| i as f64), m, 1.0).map_err(e)?;
            amm::amm_update(&mut mem, s).map_err(e)?;
            admitted.push(i as f64);
        }
        ensure!(mem.len() <= 50, "bank grew to {}", mem.len());
    }
    let tail = &admitted[admitted.len().saturating_sub(50)..];
    let held: Vec<f64> = mem.entries().map(|s| s.feature.at(0, 0, 0)).collect();
    ensure!(held == tail, "bank is not the admitted suffix");
    Ok(format!("{} of 200 frames admitted, bank equals the last {}", admitted.len(), held.len()))
}

// ---- glm ----

const LAMBDA: f64 = 0.1;

fn quadratic_bank(seed: u64, n: usize, c: usize) -> Vec<glm::GlmSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            glm::GlmSample::new(
                feature(&mut r, 4, 4, c),
                unit_scores(&mut r, 4, 4),
                ScoreMap::filled(4, 4, 1.0),
                glm::SampleKind::Dynamic,
            )
            .expect("valid sample")
        })
        .collect()
}

/// Random bank whose filter response stays `margin` away from the hinge.
fn hinge_instance(seed: u64, n: usize, k: usize, c: usize, margin: f64) -> (Vec<glm::GlmSample>, ConvKernel) {
    let mut r = rng(seed);
    loop {
        let filter = kernel(&mut r, k, c, 1);
        let (h, w) = (r.random_range(3..=8), r.random_range(3..=8));
        let bank: Vec<_> = (0..n)
            .map(|_| {
                glm::GlmSample::new(feature(&mut r, h, w, c), unit_scores(&mut r, h, w), unit_scores(&mut r, h, w), glm::SampleKind::Dynamic)
                    .expect("valid sample")
            })
            .collect();
        let clear = bank
            .iter()
            .all(|s| nm::conv2d(&s.feature, &filter).expect("shapes match").data().iter().all(|v| v.abs() >= margin));
        if clear {
            return (bank, filter);
        }
    }
}

fn glm_naive_loss(bank: &[glm::GlmSample], k: usize, c: usize, kd: &[f64], f: &glm::SpatialWeightFn) -> f64 {
    let mut data = 0.0;
    for s in bank {
        let (h, w) = s.label.dims();
        let hj = conv2d_naive(s.feature.data(), (h, w, c), kd, (k, 1));
        for i in 0..h * w {
            let g = s.label.data()[i];
            let sr = s.target_region.data()[i];
            let sw = f.w_bg + (f.w_fg - f.w_bg) * g;
            let res = sw * (sr * hj[i] + (1.0 - sr) * hj[i].max(0.0) - g);
            data += res * res;
        }
    }
    data / bank.len() as f64 + LAMBDA * LAMBDA * kd.iter().map(|v| v * v).sum::<f64>()
}

fn glm_memory(bank: &[glm::GlmSample]) -> glm::GlmMemory {
    let mut mem = glm::GlmMemory::new(bank[0].clone(), 50).expect("valid capacity");
    for s in &bank[1..] {
        mem.push_dynamic(s.clone()).expect("matching sizes");
    }
    mem
}

fn glm_instance(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..=4), [1, 3][r.random_range(0..2)], r.random_range(1..=4))
}

fn glm_loss_naive() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut r = rng(30);
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (n, k, c) = glm_instance(&mut r);
        let (bank, filter) = hinge_instance(5000 + i, n, k, c, 0.0);
        let tf = glm::TrackFilter::new(filter.clone(), LAMBDA).map_err(e)?;
        let fast = glm::track_loss(&tf, &glm_memory(&bank), &f).map_err(e)?;
        let slow = glm_naive_loss(&bank, k, c, filter.data(), &f);
        let err = (fast - slow).abs() / slow;
        ensure!(err <= 1e-12, "instance {i}: {fast} vs {slow}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances, worst relative error {worst:.1e} (limit 1e-12)"))
}

fn glm_gradient_fd() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (n, k, c) = glm_instance(&mut r);
        let (bank, filter) = hinge_instance(6000 + i, n, k, c, 0.01);
        let tf = glm::TrackFilter::new(filter.clone(), LAMBDA).map_err(e)?;
        let g = glm::track_gradient(&tf, &glm_memory(&bank), &f).map_err(e)?;
        let fd = central_difference(|kd| glm_naive_loss(&bank, k, c, kd, &f), filter.data(), 1e-5);
        let err = rel_err(g.data(), &fd);
        ensure!(err <= 1e-5, "instance {i}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("30 instances with |H_J| >= 0.01, worst relative error {worst:.1e} (limit 1e-5)"))
}

fn glm_gradient_wls() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    for seed in 0..10 {
        let bank = quadratic_bank(seed, 3, 2);
        let filter = kernel(&mut rng(seed + 99), 3, 2, 1);
        let tf = glm::TrackFilter::new(filter.clone(), LAMBDA).map_err(e)?;
        let g = glm::track_gradient(&tf, &glm_memory(&bank), &f).map_err(e)?;
        // 2/n sum A^T W^2 (A k - G) + 2 lambda^2 k
        let kv = DVector::from_column_slice(filter.data());
        let mut want = &kv * (2.0 * LAMBDA * LAMBDA);
        for s in &bank {
            let a = conv_matrix(s.feature.data(), (4, 4, 2), (3, 1));
            let w2 = DVector::from_iterator(16, glm::spatial_weight(&s.label, &f).data().iter().map(|w| w * w));
            let res = &a * &kv - DVector::from_column_slice(s.label.data());
            want += a.transpose() * res.component_mul(&w2) * (2.0 / 3.0);
        }
        let err = rel_err(g.data(), want.as_slice());
        ensure!(err <= 1e-12, "seed {seed}: relative error {err:e}");
    }
    Ok("10 full-region banks matched the dense weighted least-squares gradient".into())
}

fn glm_beta_line_scan() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut r = rng(32);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (n, k, c) = glm_instance(&mut r);
        let (bank, filter) = hinge_instance(7000 + i, n, k, c, 0.0);
        let tf = glm::TrackFilter::new(filter.clone(), LAMBDA).map_err(e)?;
        let (g, beta) = glm::gauss_newton_step(&tf, &glm_memory(&bank), &f).map_err(e)?.ok_or("zero gradient")?;
        // activation pattern frozen at the current filter
        let now: Vec<Vec<f64>> = bank
            .iter()
            .map(|s| {
                let (h, w) = s.label.dims();
                conv2d_naive(s.feature.data(), (h, w, c), filter.data(), (k, 1))
            })
            .collect();
        let frozen = |t: f64| {
            let kd: Vec<f64> = filter.data().iter().zip(g.data()).map(|(a, b)| a - t * b).collect();
            let mut data = 0.0;
            for (s, now) in bank.iter().zip(&now) {
                let (h, w) = s.label.dims();
                let moved = conv2d_naive(s.feature.data(), (h, w, c), &kd, (k, 1));
                for j in 0..h * w {
                    let gl = s.label.data()[j];
                    let sr = s.target_region.data()[j];
                    let sw = f.w_bg + (f.w_fg - f.w_bg) * gl;
                    let q = sw * (sr + (1.0 - sr) * if now[j] > 0.0 { 1.0 } else { 0.0 });
                    let res = q * moved[j] - sw * gl;
                    data += res * res;
                }
            }
            data / bank.len() as f64 + LAMBDA * LAMBDA * kd.iter().map(|v| v * v).sum::<f64>()
        };
        let (t_best, _) = scan_argmin(frozen, 0.0, 2.0 * beta, 20_001);
        let err = (t_best - beta).abs() / beta;
        ensure!(err <= 1e-4, "instance {i}: scan {t_best} vs beta {beta}");
        worst = worst.max(err);
    }
    Ok(format!("50 instances, worst relative gap to the scan {worst:.1e} (limit 1e-4)"))
}

fn glm_beta_pure_ridge() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut r = rng(33);
    let s = glm::GlmSample::new(FeatureMap::zeros(4, 4, 2), unit_scores(&mut r, 4, 4), ScoreMap::filled(4, 4, 1.0), glm::SampleKind::Static)
        .map_err(e)?;
    let mem = glm::GlmMemory::new(s, 50).map_err(e)?;
    for lambda in [0.1, 0.7, 2.0] {
        let tf = glm::TrackFilter::new(kernel(&mut r, 3, 2, 1), lambda).map_err(e)?;
        let (_, beta) = glm::gauss_newton_step(&tf, &mem, &f).map_err(e)?.ok_or("zero gradient")?;
        let want = 1.0 / (2.0 * lambda * lambda);
        ensure!((beta - want).abs() <= 1e-12 * want, "lambda {lambda}: beta {beta} vs {want}");
    }
    Ok("beta = 1/(2 lambda^2) for three regularizers".into())
}

fn glm_converge_wls() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..20 {
        let (k, c) = if seed % 4 == 3 { (1, 2) } else { (3, 2) };
        let bank = quadratic_bank(seed, 8, c);
        let shape = KernelShape::new(k, c, 1).map_err(e)?;
        let obj = glm::TrackObjective::new(bank.iter(), shape, LAMBDA, &f).map_err(e)?;
        let blocks: Vec<_> = bank
            .iter()
            .map(|s| WeightedBlock {
                a: conv_matrix(s.feature.data(), (4, 4, c), (k, 1)),
                weights: glm::spatial_weight(&s.label, &f).data().to_vec(),
                target: s.label.data().to_vec(),
            })
            .collect();
        let opt = ConvKernel::new(shape, weighted_ridge_solve(&blocks, 1.0 / bank.len() as f64, LAMBDA * LAMBDA)).map_err(e)?;
        let best = obj.loss(&opt).map_err(e)?;
        let start = glm::TrackFilter::zeros(k, c, LAMBDA).map_err(e)?;
        let (_, trace) = glm::optimize_filter_trace(&start, &obj, 50).map_err(e)?;
        let gap = trace.last().expect("trace holds the start") - best;
        ensure!(gap <= 1e-8, "seed {seed}: gap {gap:e} after 50 iterations");
        ensure!(trace.windows(2).all(|p| p[1] <= p[0]), "seed {seed}: loss increased");
        worst = worst.max(gap);
    }
    Ok(format!("20 banks, worst gap to the WLS-ridge minimum {worst:.1e} (limit 1e-8)"))
}

fn glm_monotone() -> Outcome {
    let f = glm::SpatialWeightFn::default();
    let mut r = rng(34);
    for i in 0..100 {
        let (n, k, c) = glm_instance(&mut r);
        let (bank, filter) = hinge_instance(8000 + i, n, k, c, 0.0);
        let tf = glm::TrackFilter::new(filter, LAMBDA).map_err(e)?;
        let mem = glm_memory(&bank);
        let before = glm::track_loss(&tf, &mem, &f).map_err(e)?;
        let out = glm::optimize_filter(&tf, &mem, 10, &f).map_err(e)?;
        let after = glm::track_loss(&out, &mem, &f).map_err(e)?;
        ensure!(after <= before, "instance {i}: {before} -> {after}");
    }
    Ok("100 safeguarded runs ended no worse than they started".into())
}

fn glm_crop_geometry() -> Outcome {
    let mut r = rng(35);
    for i in 0..30 {
        let (h, w) = (40, 40);
        let x = feature(&mut r, h, w, 2);
        let prob = unit_scores(&mut r, h, w);
        let (bw, bh) = (r.random_range(2..12), r.random_range(2..12));
        let (x0, y0) = (r.random_range(12..26), r.random_range(12..26));
        let bbox = BBox { x_min: x0, y_min: y0, x_max: x0 + bw - 1, y_max: y0 + bh - 1 };
        let (sample, win) = glm::glm_make_sample_with_window(&x, &bbox, &prob, 16, glm::SampleKind::Dynamic).map_err(e)?;
        // the same box as a mask goes through the segmentation crop rule
        let m = BinaryMask::from_fn(h, w, |y, c| (bbox.y_min..=bbox.y_max).contains(&y) && (bbox.x_min..=bbox.x_max).contains(&c));
        let (amm_sample, amm_win, scale) = amm::crop_sample_with_window(&x, &m, 1.0, 16).map_err(e)?;
        ensure!(scale == 1.5 && win == amm_win, "box {i}: windows {win:?} vs {amm_win:?}");
        ensure!(sample.feature == amm_sample.feature, "box {i}: resampled features differ");
        let sigma = win.side / 6.0 * 16.0 / win.side;
        let want = (-(2.0 * 7.5f64 * 7.5) / (2.0 * sigma * sigma)).exp();
        ensure!((sample.label.at(0, 0) - want).abs() < 1e-15, "box {i}: label corner {}", sample.label.at(0, 0));
    }
    Ok("30 boxes: tracking and segmentation crops share window and resampling".into())
}

fn glm_update_source_replay() -> Outcome {
    use glm::SampleKind::{Dynamic, Static};
    // constant peaks make every frame "high"; zeros are low
    let build = |high: usize| {
        let mut h = vec![1.0; high];
        h.extend(vec![0.0; 25 - high]);
        h
    };
    let at_15 = glm::glm_update_source(&build(15), 25).map_err(e)?;
    ensure!(at_15 == Static, "15 of 25 high (exactly 0.6) chose {at_15:?}");
    let at_16 = glm::glm_update_source(&build(16), 25).map_err(e)?;
    ensure!(at_16 == Dynamic, "16 of 25 high chose {at_16:?}");

    let mut r = rng(36);
    for i in 0..100 {
        let n: usize = r.random_range(1..80);
        let peaks: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let start = n.saturating_sub(25);
        let high = (start..n)
            .filter(|&j| {
                let m = peaks[..=j].iter().cloned().fold(0.0, f64::max);
                m > 0.0 && peaks[j] >= 0.5 * m
            })
            .count();
        let want = if high as f64 / (n - start) as f64 > 0.6 { Dynamic } else { Static };
        let got = glm::glm_update_source(&peaks, 25).map_err(e)?;
        ensure!(got == want, "history {i}: {got:?} vs {want:?}");
    }
    Ok("15/25 stays static, 16/25 goes dynamic, 100 histories replayed".into())
}

// ---- fusion ----

fn fuse_elementwise() -> Outcome {
    let mut r = rng(40);
    for _ in 0..20 {
        let (h, w, c) = (r.random_range(1..8), r.random_range(1..8), r.random_range(1..5));
        let a = feature(&mut r, h, w, c);
        let b = feature(&mut r, h, w, c);
        let ab = fusion::fuse(&a, &b).map_err(e)?;
        let ba = fusion::fuse(&b, &a).map_err(e)?;
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let want = a.at(row, col, ch) + b.at(row, col, ch);
                    ensure!(ab.at(row, col, ch).to_bits() == want.to_bits(), "sum differs at ({row}, {col}, {ch})");
                    ensure!(ba.at(row, col, ch).to_bits() == want.to_bits(), "fuse does not commute");
                }
            }
        }
    }
    Ok("20 maps: fuse is the bitwise elementwise sum in either order".into())
}

fn decode_channel_mean() -> Outcome {
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c = r.random_range(1..6);
        let scale = r.random_range(0.1..50.0);
        let f = FeatureMap::new(4, 5, c, uniform_vec(&mut r, 20 * c).iter().map(|v| v * scale).collect()).map_err(e)?;
        let p = fusion::decode(&f);
        for row in 0..4 {
            for col in 0..5 {
                let mean = (0..c).map(|ch| f.at(row, col, ch)).sum::<f64>() / c as f64;
                let want = 1.0 / (1.0 + (-mean).exp());
                let got = p.at(row, col);
                ensure!(got > 0.0 && got < 1.0, "probability {got} at an endpoint");
                worst = worst.max((got - want).abs());
            }
        }
    }
    ensure!(worst <= 1e-15, "decode off by {worst:e}");
    Ok(format!("20 maps, worst deviation from the logistic channel mean {worst:.1e}"))
}

fn extract_components() -> Outcome {
    // sizes 5 and 3: the larger wins
    let data: Vec<f64> = (0..48)
        .map(|i| match (i / 8, i % 8) {
            (0, 0) | (0, 1) | (0, 2) => 0.8,
            (3, 3) | (3, 4) | (3, 5) | (4, 5) | (5, 5) => 0.9,
            _ => 0.1,
        })
        .collect();
    let res = fusion::extract_result(ScoreMap::new(6, 8, data).map_err(e)?, 0);
    let b = res.bbox.ok_or("no box")?;
    ensure!((b.x_min, b.y_min, b.x_max, b.y_max) == (3, 3, 5, 5), "5-pixel component not chosen: {b:?}");
    // equal sizes: row-major first wins
    let data: Vec<f64> = (0..35)
        .map(|i| match (i / 7, i % 7) {
            (3, 0) | (3, 1) | (4, 0) | (0, 5) | (0, 6) | (1, 6) => 0.9,
            _ => 0.1,
        })
        .collect();
    let res = fusion::extract_result(ScoreMap::new(5, 7, data).map_err(e)?, 0);
    let b = res.bbox.ok_or("no box")?;
    ensure!((b.x_min, b.y_min, b.x_max, b.y_max) == (5, 0, 6, 1), "tie not broken row-major: {b:?}");

    let mut r = rng(42);
    for i in 0..30 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let prob = unit_scores(&mut r, h, w);
        let res = fusion::extract_result(prob.clone(), i);
        let comps = flood_fill_components(res.mask.data(), h, w);
        let best = comps.iter().fold(None::<&Vec<(usize, usize)>>, |b, c| match b {
            Some(b) if c.len() <= b.len() => Some(b),
            _ => Some(c),
        });
        match (best, res.bbox) {
            (None, None) => ensure!(res.s_conf == 0.0, "map {i}: empty mask with confidence"),
            (Some(comp), Some(b)) => {
                ensure!((b.x_min, b.y_min, b.x_max, b.y_max) == bbox_reduce(comp), "map {i}: wrong component");
                let vals: Vec<f64> = res.mask.pixels().map(|(y, x)| prob.at(y, x)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                ensure!((res.s_conf - mean).abs() <= 1e-12, "map {i}: s_conf {} vs {mean}", res.s_conf);
            }
            _ => return Err(format!("map {i}: box and mask disagree")),
        }
    }
    Ok("size and tie rules hold; 30 maps matched the flood-fill component oracle".into())
}

fn localize_pair(seq: &[f64], window: usize) -> Result<Option<(usize, usize)>, String> {
    Ok(fusion::temporal_localize(seq, window, 0.8)
        .map_err(e)?
        .map(|iv| (iv.start_frame, iv.end_frame)))
}

fn localize_hand() -> Outcome {
    let mut seq = vec![0.0; 60];
    seq[10..=20].fill(1.0);
    seq[40..=50].fill(1.0);
    ensure!(localize_pair(&seq, 5)? == Some((40, 50)), "two plateaus gave {:?}", localize_pair(&seq, 5)?);

    // frames 9..=11 each see all three nonzero values, 8 and 12 only two
    let mut seq = vec![0.0; 20];
    seq[9..=11].copy_from_slice(&[0.7, 0.9, 0.8]);
    ensure!(localize_pair(&seq, 5)? == Some((9, 11)), "plateau of three gave {:?}", localize_pair(&seq, 5)?);
    // medians 8..=12 become 0.7, 0.75, 0.8, 0.8, 0.8 against theta 0.64
    seq[8] = 0.75;
    seq[12] = 0.85;
    ensure!(localize_pair(&seq, 5)? == Some((8, 12)), "widened plateau gave {:?}", localize_pair(&seq, 5)?);

    let mut spike = vec![0.0; 15];
    spike[7] = 1.0;
    ensure!(localize_pair(&spike, 5)?.is_none(), "isolated spike survived the median");
    let inclusive = [0.0, 0.0, 0.8, 0.8, 1.0, 1.0, 1.0, 0.0, 0.0];
    ensure!(localize_pair(&inclusive, 1)? == Some((2, 6)), "threshold is not inclusive");
    Ok("last plateau (40, 50), median hand cases and inclusive threshold".into())
}

fn localize_replay() -> Outcome {
    let mut r = rng(43);
    for i in 0..100 {
        let n = r.random_range(1..120);
        let seq: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let filtered: Vec<f64> = (0..n).map(|j| windowed_median(&seq, j, 2)).collect();
        let max = filtered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = (max > 0.0)
            .then(|| {
                let end = (0..n).rev().find(|&j| filtered[j] >= 0.8 * max)?;
                let start = (0..=end).rev().take_while(|&j| filtered[j] >= 0.8 * max).last()?;
                Some((start, end))
            })
            .flatten();
        let got = localize_pair(&seq, 5)?;
        ensure!(got == want, "sequence {i}: {got:?} vs {want:?}");
        let k = r.random_range(1e-3..1e3);
        let scaled: Vec<f64> = seq.iter().map(|v| v * k).collect();
        ensure!(localize_pair(&scaled, 5)? == got, "sequence {i}: rescaling by {k} moved the interval");
    }
    Ok("100 sequences matched the replay and survived positive rescaling".into())
}

// ---- geo3d ----

fn random_sim3(r: &mut impl Rng) -> geo3d::Sim3Transform {
    let t = Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
    geo3d::Sim3Transform::new(r.random_range(0.2..5.0), random_rotation(r), t).expect("valid similarity")
}

fn random_points(r: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

fn sim3_noiseless() -> Outcome {
    let mut r = rng(50);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let truth = random_sim3(&mut r);
        let src = random_points(&mut r, 20);
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let got = geo3d::align_sim3(&src, &dst).map_err(e)?;
        let err = (got.scale() - truth.scale())
            .abs()
            .max((got.rotation() - truth.rotation()).amax())
            .max((got.translation() - truth.translation()).amax());
        ensure!(err < 1e-9, "transform {i}: parameter error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("100 transforms, worst parameter error {worst:.1e} (limit 1e-9)"))
}

fn sim3_noisy() -> Outcome {
    let noise = Normal::new(0.0, 0.01).expect("positive deviation");
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let truth = geo3d::Sim3Transform::new(r.random_range(0.5..2.0), random_rotation(&mut r), Vector3::new(1.0, -2.0, 0.5))
            .map_err(e)?;
        let src = random_points(&mut r, 100);
        let dst: Vec<_> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::new(noise.sample(&mut r), noise.sample(&mut r), noise.sample(&mut r)))
            .collect();
        let got = geo3d::align_sim3(&src, &dst).map_err(e)?;
        let scale_err = (got.scale() / truth.scale() - 1.0).abs();
        let rms = (src.iter().zip(&dst).map(|(s, d)| (got.apply(s) - d).norm_squared()).sum::<f64>() / 100.0).sqrt();
        ensure!(scale_err < 0.01 && rms <= 0.02, "seed {seed}: scale error {scale_err}, rms {rms}");
        worst = worst.max(scale_err);
    }
    Ok(format!("50 seeds, worst relative scale error {:.2}% (limit 1%)", 100.0 * worst))
}

fn projection_round_trip() -> Outcome {
    const H: usize = 120;
    const W: usize = 160;
    let mut r = rng(51);
    for i in 0..100 {
        let f = r.random_range(100.0..1000.0);
        let k = Matrix3::new(f, 0.0, r.random_range(60.0..100.0), 0.0, f * r.random_range(0.9..1.1), r.random_range(40.0..80.0), 0.0, 0.0, 1.0);
        let rot = random_rotation(&mut r);
        let trans = Vector3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let t_eta = random_sim3(&mut r);
        let (u, v, d) = (r.random_range(0.0..(W - 1) as f64), r.random_range(0.0..(H - 1) as f64), r.random_range(0.5..20.0));
        let ray = k.try_inverse().ok_or("singular intrinsics")? * Vector3::new(u, v, 1.0) * d;
        let world = rot * ray + trans;
        let (pu, pv, pd) = project(&world, &rot, &trans, &k);
        ensure!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pd - d).abs() < 1e-9, "camera {i}: forward projection");
        let (row, col) = ((pv + 0.5).floor() as usize, (pu + 0.5).floor() as usize);
        let depth = ScoreMap::from_fn(H, W, |rr, cc| if (rr, cc) == (row, col) { pd } else { 1.0 });
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
        let cam = geo3d::CameraFrame::new(pose, k, depth, ScoreMap::filled(H, W, 0.0)).map_err(e)?;
        let lifted = geo3d::backproject(&cam, pu, pv, &t_eta).map_err(e)?;
        ensure!((lifted - t_eta.apply(&world)).norm() < 1e-9 * (1.0 + lifted.norm()), "camera {i}: backprojection");
        let back = geo3d::relative_displacement(&cam, &lifted, &t_eta);
        ensure!((back - ray).norm() < 1e-9 * (1.0 + ray.norm()), "camera {i}: displacement {back} vs ray {ray}");
    }
    Ok("100 cameras: project, backproject and displacement agree to 1e-9".into())
}

fn semantic_hand() -> Outcome {
    let probs = ScoreMap::new(1, 3, vec![0.9, 0.3, 0.99]).map_err(e)?;
    let mask = BinaryMask::new(1, 3, vec![true, true, false]).map_err(e)?;
    let s = geo3d::semantic_confidence(&probs, &mask, 0.5, &geo3d::SemanticWeights::default()).map_err(e)?;
    // mean 0.6; only 0.9 is above the threshold; max 0.9 (0.99 is unmasked)
    let want = (0.6 + 0.9 + 0.9) / 3.0;
    ensure!((s - want).abs() < 1e-15, "{s} vs {want}");
    let g = geo3d::geometric_confidence(std::f64::consts::LN_2, 1.0).map_err(e)?;
    ensure!((g - 0.5).abs() < 1e-15, "exp(-ln 2) = {g}");
    Ok(format!("{{0.9, 0.3}} at threshold 0.5 gives {s:.15}"))
}

fn aggregate_scalar_loop() -> Outcome {
    let mut r = rng(52);
    for i in 0..50 {
        let n = r.random_range(1..12);
        let cs: Vec<_> = (0..n)
            .map(|j| {
                let p = Vector3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
                geo3d::ViewContribution::new(p, r.random_range(0.0..1.0), r.random_range(0.01..1.0), j)
            })
            .collect();
        let got = geo3d::aggregate(&cs).map_err(e)?;
        for axis in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for c in &cs {
                let wgt = c.s_conf * c.g_conf;
                num += wgt * c.world_point[axis];
                den += wgt;
            }
            let want = num / den;
            ensure!((got[axis] - want).abs() <= 1e-12 * (1.0 + want.abs()), "set {i}, axis {axis}: {} vs {want}", got[axis]);
        }
    }
    Ok("50 contribution sets matched the weighted scalar loop to 1e-12".into())
}

// ---- pipeline ----

fn identity_scenario() -> Result<Scenario, String> {
    generate(0, Preset::Identity).map_err(e)
}

fn init_bank_size() -> Outcome {
    let s = identity_scenario()?;
    let p = Pipeline::initialize(&s.query, &PipelineConfig::default()).map_err(e)?;
    let (amm_len, glm_len) = (p.state().amm.len(), p.state().glm.len());
    ensure!(amm_len == 4, "AMM bank holds {amm_len} samples after initialization");
    ensure!(glm_len == 1, "GLM bank holds {glm_len} samples after initialization");
    Ok("query crop plus three augmentations: AMM 4, GLM 1".into())
}

fn identity_frame() -> Outcome {
    let s = identity_scenario()?;
    let cfg = PipelineConfig::default();
    let p = Pipeline::initialize(&s.query, &cfg).map_err(e)?;
    let (res, _) = p.segment(&s.frames[0].feature, 0).map_err(e)?;
    let gt = s.frames[0].gt_bbox.ok_or("identity frame without a box")?;
    let iou = res.bbox.map_or(0.0, |b| b.iou(&gt));
    ensure!(res.s_conf > cfg.admit_threshold, "s_conf {} at or below {}", res.s_conf, cfg.admit_threshold);
    ensure!(iou == 1.0, "box IoU {iou}");
    Ok(format!("s_conf {:.3} > {}, box IoU 1", res.s_conf, cfg.admit_threshold))
}

fn null_frame() -> Outcome {
    let s = identity_scenario()?;
    // strip the query signature from every pixel, leaving pure background
    let (qr, qc) = blob_center(&s.params, 0);
    let sig = s.query.feature.pixel(qr, qc).to_vec();
    let norm2: f64 = sig.iter().map(|v| v * v).sum();
    let f = &s.frames[0].feature;
    let bg = FeatureMap::from_fn(f.height(), f.width(), f.channels(), |r, c, ch| {
        let px = f.pixel(r, c);
        let d: f64 = px.iter().zip(&sig).map(|(a, b)| a * b).sum();
        px[ch] - d / norm2 * sig[ch]
    });
    let mut p = Pipeline::initialize(&s.query, &PipelineConfig::default()).map_err(e)?;
    let res = p.step_frame(&bg, 0).map_err(e)?;
    ensure!(res.mask.is_empty(), "mask has {} pixels", res.mask.area());
    ensure!(res.s_conf == 0.0, "s_conf {}", res.s_conf);
    ensure!(p.state().amm.len() == 4, "AMM bank grew to {}", p.state().amm.len());
    Ok("orthogonal background: empty mask, s_conf 0, bank unchanged".into())
}

fn track_3d(s: &Scenario, cfg: &PipelineConfig) -> Result<TrackOutput, String> {
    let track = run_video(&s.query, s.features(), cfg).map_err(e)?;
    finalize_3d(&track, &s.cameras(), &s.alignment_pairs, cfg).map_err(e)
}

fn geo_aggregate() -> Outcome {
    let s = generate(0, Preset::Geo).map_err(e)?;
    let out = track_3d(&s, &PipelineConfig::default())?;
    let err = (out.world_point.ok_or("no world point")? - s.gt_point).norm();
    ensure!(err < 1e-6, "aggregate {err:e} from the truth");
    Ok(format!("5 noiseless views, aggregate within {err:.1e} of the truth (limit 1e-6)"))
}

fn corrupted_view() -> Outcome {
    let mut params = Preset::Geo.params();
    params.corrupted_views = vec![2];
    let s = generate_with(0, &params).map_err(e)?;
    let cfg = PipelineConfig::default();
    let track = run_video(&s.query, s.features(), &cfg).map_err(e)?;
    let all = finalize_3d(&track, &s.cameras(), &s.alignment_pairs, &cfg).map_err(e)?;
    let mut cams = s.cameras();
    cams[2] = None;
    let without = finalize_3d(&track, &cams, &s.alignment_pairs, &cfg).map_err(e)?;
    let shift = (all.world_point.ok_or("no world point")? - without.world_point.ok_or("no world point")?).norm();

    let rec = track.frame(2).ok_or("frame 2 missing")?;
    let (row, col) = rec.centroid.ok_or("frame 2 has no mask")?;
    let cam = s.frames[2].camera.as_ref().ok_or("frame 2 has no camera")?;
    let tau = cam.uncertainty_at(col, row).map_err(e)?;
    let weight = geo3d::semantic_confidence_from_probs(&rec.mask_probs, cfg.lambda_thr, &cfg.semantic_weights).map_err(e)?
        * geo3d::geometric_confidence(tau, cfg.zeta).map_err(e)?;
    ensure!(weight < 1e-8, "corrupted view weight {weight:e}");
    ensure!(shift < 1e-6, "aggregate moved {shift:e}");
    Ok(format!("tau {tau}: weight {weight:.1e}, aggregate moved {shift:.1e} vs excluding the view"))
}

// ---- harness ----

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn drift_cosine() -> Outcome {
    let s = generate(0, Preset::Drift).map_err(e)?;
    let (qr, qc) = blob_center(&s.params, 0);
    let q = s.query.feature.pixel(qr, qc);
    let mut last = f64::INFINITY;
    for (t, f) in s.frames.iter().enumerate() {
        let (r, c) = blob_center(&s.params, t);
        let got = cosine(q, f.feature.pixel(r, c));
        let want = (DRIFT_RATE * t as f64).cos();
        ensure!((got - want).abs() < 1e-12, "frame {t}: cosine {got} vs {want}");
        ensure!(got < last, "frame {t}: cosine did not decay");
        last = got;
    }
    Ok(format!("cosine decays as cos(rate t) down to {last:.3} at frame {}", s.frames.len() - 1))
}

/// A track reproducing the ground truth, restricted to `interval`.
fn perfect_track(s: &Scenario, interval: Option<fusion::TemporalInterval>) -> TrackOutput {
    TrackOutput {
        frames: s
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| vql_core::pipeline::FrameRecord {
                frame_index: i,
                bbox: f.gt_bbox,
                s_conf: 1.0,
                centroid: f.gt_bbox.map(|b| b.center()),
                mask_probs: Vec::new(),
            })
            .collect(),
        interval,
        peak_scores: vec![1.0; s.frames.len()],
        update_events: Vec::new(),
        halted_at: None,
        world_point: Some(s.gt_point),
        displacements: (0..s.frames.len())
            .filter_map(|i| {
                s.gt_displacement(i)
                    .map(|d| vql_core::pipeline::FrameDisplacement { frame_index: i, displacement: d })
            })
            .collect(),
    }
}

fn half_overlap() -> Outcome {
    let s = identity_scenario()?;
    let n = s.gt_interval.len();
    let first_half = fusion::TemporalInterval::new(0, n / 2 - 1).map_err(e)?;
    let r = eval_2d(&perfect_track(&s, Some(first_half)), &s);
    // |pred ∩ gt| = n/2 and |pred ∪ gt| = n
    ensure!((r.t_iou - 0.5).abs() < 1e-15, "tIoU {}", r.t_iou);
    ensure!(r.tap25 == 1.0, "tAP25 {}", r.tap25);
    ensure!((r.recovery_pct - 50.0).abs() < 1e-12, "recovery {}", r.recovery_pct);
    ensure!((r.st_iou - 0.5).abs() < 1e-15, "stIoU {}", r.st_iou);
    Ok(format!("first half of {n} frames: tIoU 0.5, tAP25 1, recovery 50%"))
}

fn l2_perturbation() -> Outcome {
    let s = generate(0, Preset::Geo).map_err(e)?;
    let mut r = rng(60);
    let mut track = perfect_track(&s, Some(s.gt_interval));
    let mut norms = Vec::new();
    for d in &mut track.displacements {
        let eps = Vector3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5));
        d.displacement += eps;
        norms.push(eps.norm());
    }
    let rep = eval_3d(&track, &s, &Thresholds3D::default());
    let want = norms.iter().sum::<f64>() / norms.len() as f64;
    let got = rep.l2.ok_or("no L2 reported")?;
    ensure!((got - want).abs() <= 1e-12, "L2 {got} vs mean |eps| {want}");
    Ok(format!("mean L2 {got:.6} equals the mean perturbation norm"))
}

fn identity_end_to_end() -> Outcome {
    let s = identity_scenario()?;
    let track = run_video(&s.query, s.features(), &PipelineConfig::default()).map_err(e)?;
    let r = eval_2d(&track, &s);
    ensure!(r.stap25 == 1.0, "stAP25 {}", r.stap25);
    ensure!(r.recovery_pct == 100.0, "recovery {}%", r.recovery_pct);
    Ok(format!("stAP25 1, recovery 100%, stIoU {:.3}", r.st_iou))
}
