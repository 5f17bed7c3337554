//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! output; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vql_core::amm::{self, AmmMemory, AmmSample, PseudoLabelEncoder, SegFilter, SegObjective, TargetReweighter};
use vql_core::fusion::temporal_localize;
use vql_core::geo3d::{self, CameraFrame, Sim3Transform};
use vql_core::glm::{self, GlmMemory, GlmSample, SampleKind, SpatialWeightFn, TrackFilter, TrackObjective};
use vql_core::numerics::{conv2d, BinaryMask, ConvKernel, FeatureMap, KernelShape, ScoreMap};
use vql_core::pipeline::{finalize_3d, run_video, Pipeline, PipelineConfig, TrackOutput};
use vql_harness::metrics::{eval_2d, eval_3d, Thresholds3D};
use vql_harness::scenario::{generate, generate_with, Preset, Scenario};
use vql_oracles::{
    central_difference, conv2d_naive, conv_matrix, project, random_rotation, scan_argmin,
    weighted_ridge_solve, windowed_median, WeightedBlock,
};

// ---- pinned tolerances ----
const GRAD_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const HINGE_MARGIN: f64 = 0.01;
const GRAD_INSTANCES: u64 = 100;
const GRAD_RUNTIME: Duration = Duration::from_secs(30);
const SCAN_POINTS: usize = 10_000;
const LINE_INSTANCES: u64 = 50;
const SPECIAL_CASE_TOL: f64 = 1e-12;
const CONVERGENCE_GAP: f64 = 1e-6;
const AMM_ITERS: usize = 200;
const GLM_ITERS: usize = 50;
const BETA_REL_TOL: f64 = 1e-4;
const BETA_SCAN_POINTS: usize = 20_001;
const SIM3_PARAM_TOL: f64 = 1e-9;
const SIM3_NOISE: f64 = 0.01;
const SIM3_SCALE_TOL: f64 = 0.01;
const ROUND_TRIP_TOL: f64 = 1e-9;
const CAPACITY: usize = 50;
const DRIFT_GAP: f64 = 0.2;
const E2E_RUNTIME: Duration = Duration::from_secs(120);
const GEO_POINT_TOL: f64 = 1e-6;
const SUPPRESSED_WEIGHT: f64 = 1e-8;
const GEO_L2_TOL: f64 = 1e-5;
const GEO_ANGLE_TOL: f64 = 1e-5;
const LAMBDA: f64 = 0.1;
const DELTA: f64 = 0.01;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("exact line search", exact_line_search),
        ("convergence to closed form", convergence),
        ("gauss-newton step size", gauss_newton_step_size),
        ("sim3 recovery", sim3_recovery),
        ("projection round trips", projection_round_trips),
        ("memory-policy conformance", memory_policy),
        ("end-to-end synthetic 2d", end_to_end_2d),
        ("end-to-end synthetic 3d", end_to_end_3d),
        ("temporal localization", temporal_localization),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:02}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:02}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- random instances ----

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn feature(r: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, uniform_vec(r, h * w * c)).unwrap()
}

fn kernel(r: &mut impl Rng, k: usize, cin: usize, cout: usize) -> ConvKernel {
    let shape = KernelShape::new(k, cin, cout).unwrap();
    ConvKernel::new(shape, uniform_vec(r, shape.len())).unwrap()
}

fn unit_scores(r: &mut impl Rng, h: usize, w: usize) -> ScoreMap {
    ScoreMap::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / base
}

/// Up to 4 samples of at most 8x8, K in {1, 3}, C <= 4.
fn small_shape(r: &mut impl Rng) -> (usize, usize, usize, usize) {
    (r.random_range(1..=4), r.random_range(3..=8), [1, 3][r.random_range(0..2)], r.random_range(1..=4))
}

fn amm_bank(r: &mut impl Rng, n: usize, h: usize, c: usize) -> AmmMemory {
    let mut mem = AmmMemory::new(CAPACITY, h).unwrap();
    for _ in 0..n {
        let m = BinaryMask::new(h, h, (0..h * h).map(|_| r.random_bool(0.4)).collect()).unwrap();
        let conf = r.random_range(0.0..1.0);
        mem.update(AmmSample::new(feature(r, h, h, c), m, conf).unwrap()).unwrap();
    }
    mem
}

/// `1/2 sum ||W (F * sigma - Q)||^2 + delta/2 ||sigma||^2` from naive loops.
fn amm_naive_loss(mem: &AmmMemory, k: usize, c: usize, kd: &[f64], delta: f64) -> f64 {
    let enc = PseudoLabelEncoder::default();
    let rw = TargetReweighter::default();
    let mut total = 0.0;
    for s in mem.entries() {
        let h = s.mask.height();
        let y = conv2d_naive(s.feature.data(), (h, h, c), kd, (k, 3));
        let q = enc.encode(&s.mask);
        let w = amm::reweight(&s.mask, &rw).unwrap();
        for (i, (a, b)) in y.iter().zip(q.data()).enumerate() {
            let d = w.data()[i / 3] * (a - b);
            total += d * d;
        }
    }
    0.5 * total + 0.5 * delta * kd.iter().map(|v| v * v).sum::<f64>()
}

fn glm_bank(r: &mut impl Rng, n: usize, h: usize, c: usize, full_region: bool) -> Vec<GlmSample> {
    (0..n)
        .map(|_| {
            let region = if full_region { ScoreMap::filled(h, h, 1.0) } else { unit_scores(r, h, h) };
            GlmSample::new(feature(r, h, h, c), unit_scores(r, h, h), region, SampleKind::Dynamic).unwrap()
        })
        .collect()
}

fn glm_memory(bank: &[GlmSample]) -> GlmMemory {
    let mut mem = GlmMemory::new(bank[0].clone(), CAPACITY).unwrap();
    for s in &bank[1..] {
        mem.push_dynamic(s.clone()).unwrap();
    }
    mem
}

/// `(1/n) sum ||sw (S HJ + (1-S) max(0, HJ) - G)||^2 + lambda^2 ||c||^2`.
fn glm_naive_loss(bank: &[GlmSample], k: usize, c: usize, kd: &[f64]) -> f64 {
    let f = SpatialWeightFn::default();
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

/// A filter and bank whose responses all sit at least `margin` from the hinge.
fn hinge_instance(r: &mut impl Rng, n: usize, h: usize, k: usize, c: usize, margin: f64) -> (Vec<GlmSample>, ConvKernel) {
    loop {
        let filter = kernel(r, k, c, 1);
        let bank = glm_bank(r, n, h, c, false);
        if bank.iter().all(|s| conv2d(&s.feature, &filter).unwrap().data().iter().all(|v| v.abs() >= margin)) {
            return (bank, filter);
        }
    }
}

// ---- criteria ----

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let enc = PseudoLabelEncoder::default();
    let rw = TargetReweighter::default();
    let mut worst_seg: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES {
        let mut r = rng(seed);
        let (n, h, k, c) = small_shape(&mut r);
        let mem = amm_bank(&mut r, n, h, c);
        let f = SegFilter::new(kernel(&mut r, k, c, 3), DELTA).unwrap();
        let g = amm::seg_gradient(&f, &mem, &enc, &rw).unwrap();
        let fd = central_difference(|kd| amm_naive_loss(&mem, k, c, kd, DELTA), f.kernel.data(), FD_STEP);
        let err = rel_err(g.data(), &fd);
        ensure!(err <= GRAD_REL_TOL, "seg_gradient instance {seed}: relative error {err:e}");
        worst_seg = worst_seg.max(err);
    }
    let mut worst_track: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES {
        let mut r = rng(10_000 + seed);
        let (n, h, k, c) = small_shape(&mut r);
        let (bank, filter) = hinge_instance(&mut r, n, h, k, c, HINGE_MARGIN);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let g = glm::track_gradient(&tf, &glm_memory(&bank), &SpatialWeightFn::default()).unwrap();
        let fd = central_difference(|kd| glm_naive_loss(&bank, k, c, kd), filter.data(), FD_STEP);
        let err = rel_err(g.data(), &fd);
        ensure!(err <= GRAD_REL_TOL, "track_gradient instance {seed}: relative error {err:e}");
        worst_track = worst_track.max(err);
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < GRAD_RUNTIME, "took {elapsed:?}, limit {GRAD_RUNTIME:?}");
    Ok(format!(
        "{GRAD_INSTANCES}+{GRAD_INSTANCES} instances, worst rel err seg {worst_seg:.1e} / track {worst_track:.1e} <= {GRAD_REL_TOL:e}, {:.1}s < {}s",
        elapsed.as_secs_f64(),
        GRAD_RUNTIME.as_secs()
    ))
}

fn exact_line_search() -> Outcome {
    let enc = PseudoLabelEncoder::default();
    let rw = TargetReweighter::default();
    for seed in 0..LINE_INSTANCES {
        let mut r = rng(20_000 + seed);
        let (n, h, k, c) = small_shape(&mut r);
        let mem = amm_bank(&mut r, n, h, c);
        let f = SegFilter::new(kernel(&mut r, k, c, 3), DELTA).unwrap();
        let obj = SegObjective::from_memory(&mem, &f, &enc, &rw).unwrap();
        let g = obj.gradient(&f.kernel).unwrap();
        let alpha = amm::steepest_step_size(&g, &mem, &rw, DELTA).unwrap().ok_or("zero gradient")?;
        let at = |t: f64| amm_naive_loss(&mem, k, c, f.kernel.add_scaled(&g, -t).data(), DELTA);
        let best = at(alpha);
        let (t, scanned) = scan_argmin(at, 0.0, 2.0 * alpha, SCAN_POINTS);
        ensure!(best <= scanned, "instance {seed}: scan point {t} beats alpha {alpha}");
    }

    // one-hot pixels make a 1x1 convolution an isometry: alpha = 1 at delta = 0
    let mut mem = AmmMemory::new(CAPACITY, 2).unwrap();
    let x = FeatureMap::from_fn(2, 2, 4, |r, col, ch| if r * 2 + col == ch { 1.0 } else { 0.0 });
    mem.update(AmmSample::new(x, BinaryMask::from_pixels(2, 2, &[(0, 1)]).unwrap(), 1.0).unwrap()).unwrap();
    let flat = TargetReweighter::new(1.0, 1.0, 1.0).unwrap();
    let g = kernel(&mut rng(1), 1, 4, 3);
    let alpha = amm::steepest_step_size(&g, &mem, &flat, 0.0).unwrap().ok_or("zero gradient")?;
    ensure!((alpha - 1.0).abs() <= SPECIAL_CASE_TOL, "identity features: alpha = {alpha}");

    // zero features leave only the ridge: alpha = 1/delta
    let mut mem = AmmMemory::new(CAPACITY, 4).unwrap();
    mem.update(AmmSample::new(FeatureMap::zeros(4, 4, 2), BinaryMask::from_pixels(4, 4, &[(2, 2)]).unwrap(), 1.0).unwrap())
        .unwrap();
    let g = kernel(&mut rng(2), 3, 2, 3);
    for delta in [0.01, 0.5, 3.0] {
        let alpha = amm::steepest_step_size(&g, &mem, &rw, delta).unwrap().ok_or("zero gradient")?;
        ensure!((alpha * delta - 1.0).abs() <= SPECIAL_CASE_TOL, "pure ridge delta {delta}: alpha = {alpha}");
    }
    Ok(format!(
        "alpha beat every point of a {SCAN_POINTS}-point scan on {LINE_INSTANCES} instances; alpha = 1 and 1/delta to {SPECIAL_CASE_TOL:e}"
    ))
}

fn convergence() -> Outcome {
    let enc = PseudoLabelEncoder::default();
    let rw = TargetReweighter::default();
    let mut worst_amm: f64 = f64::NEG_INFINITY;
    for seed in 0..20 {
        let mut r = rng(30_000 + seed);
        let (k, c) = ([1, 3][seed as usize % 2], r.random_range(1..=3));
        let mem = amm_bank(&mut r, 6, 4, c);
        let blocks: Vec<_> = mem
            .entries()
            .map(|s| {
                let w = amm::reweight(&s.mask, &rw).unwrap();
                WeightedBlock {
                    a: conv_matrix(s.feature.data(), (4, 4, c), (k, 3)),
                    weights: (0..48).map(|i| w.data()[i / 3]).collect(),
                    target: enc.encode(&s.mask).data().to_vec(),
                }
            })
            .collect();
        let opt = weighted_ridge_solve(&blocks, 1.0, DELTA);
        let best = amm_naive_loss(&mem, k, c, &opt, DELTA);
        let start = SegFilter::zeros(KernelShape::new(k, c, 3).unwrap(), DELTA).unwrap();
        let obj = SegObjective::from_memory(&mem, &start, &enc, &rw).unwrap();
        let (_, trace) = amm::steepest_descent_trace(&start, &obj, AMM_ITERS).unwrap();
        ensure!(trace.windows(2).all(|p| p[1] <= p[0]), "AMM seed {seed}: loss increased");
        let gap = trace.last().unwrap() - best;
        ensure!(gap <= CONVERGENCE_GAP, "AMM seed {seed}: gap {gap:e} after {AMM_ITERS} iterations");
        worst_amm = worst_amm.max(gap);
    }
    let f = SpatialWeightFn::default();
    let mut worst_glm: f64 = f64::NEG_INFINITY;
    for seed in 0..20 {
        let mut r = rng(31_000 + seed);
        let (k, c) = ([1, 3][seed as usize % 2], r.random_range(1..=3));
        let bank = glm_bank(&mut r, 6, 4, c, true);
        let blocks: Vec<_> = bank
            .iter()
            .map(|s| WeightedBlock {
                a: conv_matrix(s.feature.data(), (4, 4, c), (k, 1)),
                weights: glm::spatial_weight(&s.label, &f).data().to_vec(),
                target: s.label.data().to_vec(),
            })
            .collect();
        let opt = weighted_ridge_solve(&blocks, 1.0 / bank.len() as f64, LAMBDA * LAMBDA);
        let best = glm_naive_loss(&bank, k, c, &opt);
        let obj = TrackObjective::new(bank.iter(), KernelShape::new(k, c, 1).unwrap(), LAMBDA, &f).unwrap();
        let (_, trace) = glm::optimize_filter_trace(&TrackFilter::zeros(k, c, LAMBDA).unwrap(), &obj, GLM_ITERS).unwrap();
        ensure!(trace.windows(2).all(|p| p[1] <= p[0]), "GLM seed {seed}: loss increased");
        let gap = trace.last().unwrap() - best;
        ensure!(gap <= CONVERGENCE_GAP, "GLM seed {seed}: gap {gap:e} after {GLM_ITERS} iterations");
        worst_glm = worst_glm.max(gap);
    }
    Ok(format!(
        "20+20 4x4 banks, gap AMM {worst_amm:.1e} ({AMM_ITERS} it) / GLM {worst_glm:.1e} ({GLM_ITERS} it) <= {CONVERGENCE_GAP:e}, losses monotone"
    ))
}

fn gauss_newton_step_size() -> Outcome {
    let f = SpatialWeightFn::default();
    let mut worst: f64 = 0.0;
    for seed in 0..LINE_INSTANCES {
        let mut r = rng(40_000 + seed);
        let (n, h, k, c) = small_shape(&mut r);
        let (bank, filter) = hinge_instance(&mut r, n, h, k, c, 0.0);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let (g, beta) = glm::gauss_newton_step(&tf, &glm_memory(&bank), &f).unwrap().ok_or("zero gradient")?;
        let active: Vec<Vec<bool>> = bank
            .iter()
            .map(|s| conv2d_naive(s.feature.data(), (h, h, c), filter.data(), (k, 1)).iter().map(|v| *v > 0.0).collect())
            .collect();
        // the residual with its activation pattern frozen at the current filter
        let frozen = |t: f64| {
            let kd: Vec<f64> = filter.data().iter().zip(g.data()).map(|(a, b)| a - t * b).collect();
            let mut data = 0.0;
            for (s, act) in bank.iter().zip(&active) {
                let moved = conv2d_naive(s.feature.data(), (h, h, c), &kd, (k, 1));
                for j in 0..h * h {
                    let gl = s.label.data()[j];
                    let sr = s.target_region.data()[j];
                    let sw = f.w_bg + (f.w_fg - f.w_bg) * gl;
                    let q = sw * (sr + (1.0 - sr) * if act[j] { 1.0 } else { 0.0 });
                    data += (q * moved[j] - sw * gl).powi(2);
                }
            }
            data / bank.len() as f64 + LAMBDA * LAMBDA * kd.iter().map(|v| v * v).sum::<f64>()
        };
        let (t_best, _) = scan_argmin(frozen, 0.0, 2.0 * beta, BETA_SCAN_POINTS);
        let err = (t_best - beta).abs() / beta;
        ensure!(err <= BETA_REL_TOL, "instance {seed}: scan {t_best} vs beta {beta}");
        worst = worst.max(err);
    }
    let mut r = rng(3);
    let s = GlmSample::new(FeatureMap::zeros(4, 4, 2), unit_scores(&mut r, 4, 4), ScoreMap::filled(4, 4, 1.0), SampleKind::Static).unwrap();
    let mem = GlmMemory::new(s, CAPACITY).unwrap();
    for lambda in [0.1, 0.7, 2.0] {
        let tf = TrackFilter::new(kernel(&mut r, 3, 2, 1), lambda).unwrap();
        let (_, beta) = glm::gauss_newton_step(&tf, &mem, &f).unwrap().ok_or("zero gradient")?;
        let want = 1.0 / (2.0 * lambda * lambda);
        ensure!((beta - want).abs() <= SPECIAL_CASE_TOL * want, "ridge-only lambda {lambda}: beta {beta} vs {want}");
    }
    Ok(format!(
        "{LINE_INSTANCES} instances, worst rel gap to the frozen-quadratic scan {worst:.1e} <= {BETA_REL_TOL:e}; ridge-only beta = 1/(2 lambda^2)"
    ))
}

fn random_sim3(r: &mut impl Rng) -> Sim3Transform {
    let t = Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
    Sim3Transform::new(r.random_range(0.2..5.0), random_rotation(r), t).unwrap()
}

fn random_points(r: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

fn sim3_recovery() -> Outcome {
    let mut r = rng(50_000);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let truth = random_sim3(&mut r);
        let src = random_points(&mut r, 20);
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let got = geo3d::align_sim3(&src, &dst).unwrap();
        let err = (got.scale() - truth.scale())
            .abs()
            .max((got.rotation() - truth.rotation()).amax())
            .max((got.translation() - truth.translation()).amax());
        ensure!(err < SIM3_PARAM_TOL, "transform {i}: parameter error {err:e}");
        worst = worst.max(err);
    }
    let noise = Normal::new(0.0, SIM3_NOISE).unwrap();
    let mut worst_scale: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(51_000 + seed);
        let truth = random_sim3(&mut r);
        let src = random_points(&mut r, 100);
        let dst: Vec<_> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::new(noise.sample(&mut r), noise.sample(&mut r), noise.sample(&mut r)))
            .collect();
        let got = geo3d::align_sim3(&src, &dst).unwrap();
        let err = (got.scale() / truth.scale() - 1.0).abs();
        ensure!(err < SIM3_SCALE_TOL, "noisy seed {seed}: scale error {err}");
        worst_scale = worst_scale.max(err);
    }
    Ok(format!(
        "100 noiseless fits, worst parameter error {worst:.1e} < {SIM3_PARAM_TOL:e}; 50 noisy seeds, worst scale error {:.3}% < 1%",
        100.0 * worst_scale
    ))
}

fn projection_round_trips() -> Outcome {
    const H: usize = 96;
    const W: usize = 128;
    let mut r = rng(60_000);
    for i in 0..100 {
        let f = r.random_range(100.0..1000.0);
        let k = Matrix3::new(f, 0.0, r.random_range(50.0..80.0), 0.0, f * r.random_range(0.9..1.1), r.random_range(35.0..60.0), 0.0, 0.0, 1.0);
        let rot = random_rotation(&mut r);
        let trans = Vector3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let t_eta = random_sim3(&mut r);
        // keep the camera-frame point inside a 40-pixel cone so it lands on screen
        let z = r.random_range(1.0..20.0);
        let spread = 20.0 / f;
        let world = rot * Vector3::new(z * r.random_range(-spread..spread), z * r.random_range(-spread..spread), z) + trans;
        // forward-project a known point, then lift its pixel with its depth
        let (u, v, d) = project(&world, &rot, &trans, &k);
        let (row, col) = ((v + 0.5).floor(), (u + 0.5).floor());
        ensure!(row >= 0.0 && col >= 0.0 && (row as usize) < H && (col as usize) < W, "camera {i}: point off-screen");
        let depth = ScoreMap::from_fn(H, W, |rr, cc| if (rr, cc) == (row as usize, col as usize) { d } else { 1.0 });
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
        let cam = CameraFrame::new(pose, k, depth, ScoreMap::filled(H, W, 0.0)).unwrap();
        let raw = geo3d::backproject(&cam, u, v, &Sim3Transform::identity()).unwrap();
        ensure!((raw - world).norm() < ROUND_TRIP_TOL * (1.0 + world.norm()), "camera {i}: backproject error {:e}", (raw - world).norm());
        let bench = geo3d::backproject(&cam, u, v, &t_eta).unwrap();
        ensure!((bench - t_eta.apply(&world)).norm() < ROUND_TRIP_TOL * (1.0 + bench.norm()), "camera {i}: T_eta lift");
        let delta = geo3d::relative_displacement(&cam, &bench, &t_eta);
        let cam_point = rot.transpose() * (world - trans);
        ensure!((delta - cam_point).norm() < ROUND_TRIP_TOL * (1.0 + cam_point.norm()), "camera {i}: displacement {delta} vs {cam_point}");
    }
    Ok(format!("100 random cameras: project -> backproject -> displacement within {ROUND_TRIP_TOL:e}"))
}

fn memory_policy() -> Outcome {
    let cfg = PipelineConfig::default();
    // a long static video: every frame resembles the query
    let params = vql_harness::scenario::ScenarioParams { frames: 201, ..Preset::Identity.params() };
    let s = generate_with(7, &params).unwrap();
    let mut p = Pipeline::initialize(&s.query, &cfg).unwrap();
    let static_bits: Vec<u64> = p.state().glm.static_entry().feature.data().iter().map(|v| v.to_bits()).collect();
    let static_before = p.state().glm.static_entry().clone();
    let mut expected_bank: Vec<AmmSample> = p.state().amm.entries().cloned().collect();
    let mut events = Vec::new();
    for (feature, i) in s.features() {
        let before = p.update_events().len();
        let res = p.step_frame(feature, i).unwrap();
        // admission rule replayed from the mask probabilities
        let probs: Vec<f64> = res.mask.pixels().map(|(y, x)| res.prob.at(y, x)).collect();
        let admit = !probs.is_empty() && probs.iter().sum::<f64>() / probs.len() as f64 >= cfg.admit_threshold;
        let updated = p.update_events().len() > before;
        ensure!(updated == (admit && cfg.is_update_frame(i)), "frame {i}: updated {updated}, replay says {}", admit && cfg.is_update_frame(i));
        if updated {
            events.push(i);
            let (crop, _, _) = amm::crop_sample_with_window(feature, &res.mask, res.s_conf, cfg.resolution).unwrap();
            expected_bank.push(crop);
            if expected_bank.len() > CAPACITY {
                expected_bank.remove(0);
            }
        }
        let held: Vec<AmmSample> = p.state().amm.entries().cloned().collect();
        ensure!(held == expected_bank, "frame {i}: AMM bank is not the FIFO of admitted crops");
        ensure!(p.state().amm.len() <= CAPACITY && p.state().glm.len() <= CAPACITY, "frame {i}: capacity exceeded");
        ensure!(p.state().glm.static_entry() == &static_before, "frame {i}: static snapshot changed");
    }
    let bits: Vec<u64> = p.state().glm.static_entry().feature.data().iter().map(|v| v.to_bits()).collect();
    ensure!(bits == static_bits, "static snapshot bits changed");
    let mut cadence: Vec<usize> = (0..100).collect();
    cadence.extend([100, 125, 150, 175, 200]);
    ensure!(events == cadence, "update frames {events:?}");

    // absence: the trailing mean of s_conf falls below the halt threshold
    let s = generate(7, Preset::Absence).unwrap();
    let mut p = Pipeline::initialize(&s.query, &cfg).unwrap();
    let mut confs = Vec::new();
    let mut expected_halt = None;
    for (feature, i) in s.features() {
        let res = p.step_frame(feature, i).unwrap();
        confs.push(res.s_conf);
        if expected_halt.is_none() && confs.len() >= cfg.halt_window {
            let tail = &confs[confs.len() - cfg.halt_window..];
            if tail.iter().sum::<f64>() / (tail.len() as f64) < cfg.halt_threshold {
                expected_halt = Some(i);
            }
        }
        if let Some(h) = p.halted_at() {
            ensure!(p.state() == p.initial_state(), "frame {i}: banks differ from their initial contents after the halt at {h}");
        }
    }
    let halted = p.halted_at().ok_or("absence never halted updates")?;
    ensure!(Some(halted) == expected_halt, "halted at {halted}, trailing-mean replay says {expected_halt:?}");
    ensure!(p.update_events().iter().all(|e| e.frame_index < halted), "update after the halt");
    Ok(format!(
        "201-frame replay: FIFO at mean >= {}, static entry bit-identical, banks <= {CAPACITY}, events 0-99 + every 25; halt at {halted} restores initial banks",
        cfg.admit_threshold
    ))
}

fn end_to_end_2d() -> Outcome {
    let t0 = Instant::now();
    let full = PipelineConfig::default();
    let frozen = PipelineConfig { updates_enabled: false, ..Default::default() };

    let s = generate(0, Preset::Identity).unwrap();
    let r = eval_2d(&run_video(&s.query, s.features(), &full).unwrap(), &s);
    ensure!(r.stap25 == 1.0 && r.recovery_pct == 100.0, "identity: stAP25 {} recovery {}%", r.stap25, r.recovery_pct);

    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let s = generate(seed, Preset::Drift).unwrap();
        let a = run_video(&s.query, s.features(), &full).unwrap();
        let b = run_video(&s.query, s.features(), &frozen).unwrap();
        // calibration: the frozen query filter no longer admits frame 150
        let late = b.frame(150).ok_or("drift video shorter than 150 frames")?.s_conf;
        ensure!(late < full.admit_threshold, "seed {seed}: frozen filter still scores {late} at frame 150");
        with.push(eval_2d(&a, &s).t_iou);
        without.push(eval_2d(&b, &s).t_iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&with) - mean(&without);
    ensure!(gap >= DRIFT_GAP, "drift tIoU full {:.3} vs frozen {:.3}: gap {gap:.3} < {DRIFT_GAP}", mean(&with), mean(&without));
    let elapsed = t0.elapsed();
    ensure!(elapsed < E2E_RUNTIME, "took {elapsed:?}, limit {E2E_RUNTIME:?}");
    Ok(format!(
        "identity stAP25 1, recovery 100%; drift tIoU full {:.3} vs frozen {:.3} (gap {gap:.3} >= {DRIFT_GAP}); {:.1}s < {}s",
        mean(&with),
        mean(&without),
        elapsed.as_secs_f64(),
        E2E_RUNTIME.as_secs()
    ))
}

fn lift(s: &Scenario, cameras: &[Option<CameraFrame>], cfg: &PipelineConfig) -> (TrackOutput, TrackOutput) {
    let track = run_video(&s.query, s.features(), cfg).unwrap();
    let lifted = finalize_3d(&track, cameras, &s.alignment_pairs, cfg).unwrap();
    (track, lifted)
}

fn end_to_end_3d() -> Outcome {
    let cfg = PipelineConfig::default();
    let s = generate(0, Preset::Geo).unwrap();
    let (_, out) = lift(&s, &s.cameras(), &cfg);
    let err = (out.world_point.ok_or("no world point")? - s.gt_point).norm();
    ensure!(err < GEO_POINT_TOL, "world point off by {err:e}");
    let rep = eval_3d(&out, &s, &Thresholds3D::default());
    let (l2, angle) = (rep.l2.ok_or("no L2")?, rep.angle.ok_or("no angle")?);
    ensure!(l2 < GEO_L2_TOL && angle < GEO_ANGLE_TOL, "eval_3d L2 {l2:e}, angle {angle:e}");

    let params = vql_harness::scenario::ScenarioParams { corrupted_views: vec![2], ..Preset::Geo.params() };
    let bad = generate_with(0, &params).unwrap();
    let (track, with_bad) = lift(&bad, &bad.cameras(), &cfg);
    let mut cams = bad.cameras();
    cams[2] = None;
    let excluded = finalize_3d(&track, &cams, &bad.alignment_pairs, &cfg).unwrap();
    let shift = (with_bad.world_point.unwrap() - excluded.world_point.unwrap()).norm();
    ensure!(shift < GEO_POINT_TOL, "corrupted view moved the aggregate by {shift:e}");
    let rec = track.frame(2).ok_or("frame 2 missing")?;
    let (row, col) = rec.centroid.ok_or("frame 2 has no mask")?;
    let tau = bad.frames[2].camera.as_ref().unwrap().uncertainty_at(col, row).unwrap();
    let weight = geo3d::semantic_confidence_from_probs(&rec.mask_probs, cfg.lambda_thr, &cfg.semantic_weights).unwrap()
        * geo3d::geometric_confidence(tau, cfg.zeta).unwrap();
    ensure!(weight < SUPPRESSED_WEIGHT, "corrupted view weight {weight:e}");
    Ok(format!(
        "5 views: point error {err:.1e} < {GEO_POINT_TOL:e}, L2 {l2:.1e} < {GEO_L2_TOL:e}, angle {angle:.1e} < {GEO_ANGLE_TOL:e}; tau {tau} view weight {weight:.1e} < {SUPPRESSED_WEIGHT:e}, shift {shift:.1e}"
    ))
}

fn temporal_localization() -> Outcome {
    let pair = |seq: &[f64]| temporal_localize(seq, 5, 0.8).unwrap().map(|iv| (iv.start_frame, iv.end_frame));
    let mut seq = vec![0.0; 60];
    seq[10..=20].fill(1.0);
    seq[40..=50].fill(1.0);
    ensure!(pair(&seq) == Some((40, 50)), "two plateaus gave {:?}", pair(&seq));
    for k in [1e-3, 0.37, 2.0, 1e3] {
        let scaled: Vec<f64> = seq.iter().map(|v| v * k).collect();
        ensure!(pair(&scaled) == Some((40, 50)), "rescaling by {k} gave {:?}", pair(&scaled));
    }

    // hand computation: medians at 8..=12 are 0.7, 0.75, 0.8, 0.8, 0.8 and at
    // 7 and 13 they are 0 (three zeros in each window); max 0.8, theta 0.64
    let mut hand = vec![0.0; 20];
    hand[8..=12].copy_from_slice(&[0.75, 0.7, 0.9, 0.8, 0.85]);
    ensure!(pair(&hand) == Some((8, 12)), "hand case gave {:?}", pair(&hand));

    let mut r = rng(70_000);
    for i in 0..200 {
        let n = r.random_range(1..120);
        let seq: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let filtered: Vec<f64> = (0..n).map(|j| windowed_median(&seq, j, 2)).collect();
        let max = filtered.iter().cloned().fold(0.0, f64::max);
        let want = (max > 0.0).then(|| {
            let end = (0..n).rev().find(|&j| filtered[j] >= 0.8 * max).unwrap();
            let start = (0..=end).rev().take_while(|&j| filtered[j] >= 0.8 * max).last().unwrap();
            (start, end)
        });
        ensure!(pair(&seq) == want, "sequence {i}: {:?} vs replay {want:?}", pair(&seq));
        let k = r.random_range(1e-3..1e3);
        let scaled: Vec<f64> = seq.iter().map(|v| v * k).collect();
        ensure!(pair(&scaled) == want, "sequence {i}: rescaling by {k} moved the interval");
    }
    Ok("two plateaus -> (40, 50), scale invariant; hand case (8, 12); 200 sequences match the median/threshold replay".into())
}

fn vql(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vql"))
        .args(args)
        .env("EAGLE_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "vql {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let read = |name: &str| std::fs::read(Path::new(&path(name))).map_err(|e| e.to_string());
    let mut checked = 0;
    for preset in ["identity", "geo"] {
        let scenario = path(&format!("{preset}.json"));
        vql(&["gen", "--seed", "3", "--preset", preset, "--out", &scenario], "1")?;
        let mut first: Option<(Vec<u8>, Vec<u8>)> = None;
        for (run, threads) in [(0, "1"), (1, "1"), (2, "4")] {
            let t2 = format!("{preset}-{run}.2d.json");
            let t3 = format!("{preset}-{run}.3d.json");
            vql(&["run2d", "--scenario", &scenario, "--out", &path(&t2)], threads)?;
            vql(&["run3d", "--scenario", &scenario, "--track", &path(&t2), "--out", &path(&t3)], threads)?;
            let got = (read(&t2)?, read(&t3)?);
            match &first {
                None => first = Some(got),
                Some(want) => {
                    ensure!(want.0 == got.0, "{preset}: run2d output differs on run {run} (EAGLE_THREADS={threads})");
                    ensure!(want.1 == got.1, "{preset}: run3d output differs on run {run} (EAGLE_THREADS={threads})");
                    checked += 2;
                }
            }
        }
    }
    Ok(format!("{checked} repeated run2d/run3d outputs byte-identical across runs and EAGLE_THREADS=1/4"))
}
