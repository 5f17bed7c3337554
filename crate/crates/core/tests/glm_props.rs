mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vql_core::glm::*;
use vql_core::numerics::{conv2d, ConvKernel, FeatureMap, KernelShape, ScoreMap};
use vql_oracles::{central_difference, conv2d_naive, conv_matrix, scan_argmin, weighted_ridge_solve, WeightedBlock};

const LAMBDA: f64 = 0.1;

fn quadratic_bank(seed: u64, n: usize, c: usize) -> Vec<GlmSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            GlmSample::new(
                feature(&mut r, 4, 4, c),
                unit_scores(&mut r, 4, 4),
                ScoreMap::filled(4, 4, 1.0),
                SampleKind::Dynamic,
            )
            .unwrap()
        })
        .collect()
}

/// Random bank with fractional target regions and a filter whose response
/// stays at least `margin` away from the hinge kink everywhere.
fn hinge_instance(seed: u64, n: usize, k: usize, c: usize, margin: f64) -> (Vec<GlmSample>, ConvKernel) {
    let mut r = rng(seed);
    loop {
        let filter = kernel(&mut r, k, c, 1);
        let h = r.random_range(3..=8);
        let w = r.random_range(3..=8);
        let bank: Vec<_> = (0..n)
            .map(|_| {
                GlmSample::new(feature(&mut r, h, w, c), unit_scores(&mut r, h, w), unit_scores(&mut r, h, w), SampleKind::Dynamic).unwrap()
            })
            .collect();
        let clear = bank.iter().all(|s| {
            conv2d(&s.feature, &filter).unwrap().data().iter().all(|v| v.abs() >= margin)
        });
        if clear {
            return (bank, filter);
        }
    }
}

/// Loss from the naive convolution and the residual formula written out.
fn naive_loss(bank: &[GlmSample], k: usize, c: usize, kd: &[f64], f: &SpatialWeightFn) -> f64 {
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

fn wls_minimum(samples: &[GlmSample], k: usize, c: usize, f: &SpatialWeightFn) -> Vec<f64> {
    let blocks: Vec<_> = samples
        .iter()
        .map(|s| WeightedBlock {
            a: conv_matrix(s.feature.data(), (4, 4, c), (k, 1)),
            weights: spatial_weight(&s.label, f).data().to_vec(),
            target: s.label.data().to_vec(),
        })
        .collect();
    weighted_ridge_solve(&blocks, 1.0 / samples.len() as f64, LAMBDA * LAMBDA)
}

fn memory(bank: &[GlmSample]) -> GlmMemory {
    let mut mem = GlmMemory::new(bank[0].clone(), 50).unwrap();
    for s in &bank[1..] {
        mem.push_dynamic(s.clone()).unwrap();
    }
    mem
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=4, prop::sample::select(vec![1usize, 3]), 1usize..=4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_finite_differences((n, k, c, seed) in instance()) {
        let f = SpatialWeightFn::default();
        let (bank, filter) = hinge_instance(seed, n, k, c, 0.01);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let g = track_gradient(&tf, &memory(&bank), &f).unwrap();
        let fd = central_difference(|kd| naive_loss(&bank, k, c, kd, &f), filter.data(), 1e-5);
        prop_assert!(rel_err(g.data(), &fd) <= 1e-5, "rel err {}", rel_err(g.data(), &fd));
    }

    #[test]
    fn loss_matches_scalar_loop((n, k, c, seed) in instance()) {
        let f = SpatialWeightFn::default();
        let (bank, filter) = hinge_instance(seed, n, k, c, 0.0);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let fast = track_loss(&tf, &memory(&bank), &f).unwrap();
        let slow = naive_loss(&bank, k, c, filter.data(), &f);
        prop_assert!((fast - slow).abs() <= 1e-12 * slow);
    }

    #[test]
    fn beta_minimizes_frozen_quadratic((n, k, c, seed) in instance()) {
        let f = SpatialWeightFn::default();
        let (bank, filter) = hinge_instance(seed, n, k, c, 0.0);
        let mem = memory(&bank);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let (g, beta) = gauss_newton_step(&tf, &mem, &f).unwrap().unwrap();
        // activation pattern frozen at the current filter
        let frozen = |t: f64| {
            let kd: Vec<f64> = filter.data().iter().zip(g.data()).map(|(a, b)| a - t * b).collect();
            let mut data = 0.0;
            for s in &bank {
                let (h, w) = s.label.dims();
                let now = conv2d_naive(s.feature.data(), (h, w, c), filter.data(), (k, 1));
                let moved = conv2d_naive(s.feature.data(), (h, w, c), &kd, (k, 1));
                for i in 0..h * w {
                    let gl = s.label.data()[i];
                    let sr = s.target_region.data()[i];
                    let sw = f.w_bg + (f.w_fg - f.w_bg) * gl;
                    let q = sw * (sr + (1.0 - sr) * if now[i] > 0.0 { 1.0 } else { 0.0 });
                    let res = q * moved[i] - sw * gl;
                    data += res * res;
                }
            }
            data / bank.len() as f64 + LAMBDA * LAMBDA * kd.iter().map(|v| v * v).sum::<f64>()
        };
        let (t_best, _) = scan_argmin(frozen, 0.0, 2.0 * beta, 20_001);
        prop_assert!((t_best - beta).abs() <= 1e-4 * beta, "scan {t_best} vs beta {beta}");
    }

    #[test]
    fn safeguarded_optimizer_never_increases_loss((n, k, c, seed) in instance()) {
        let f = SpatialWeightFn::default();
        let (bank, filter) = hinge_instance(seed, n, k, c, 0.0);
        let tf = TrackFilter::new(filter, LAMBDA).unwrap();
        let obj = TrackObjective::new(bank.iter(), tf.kernel.shape(), LAMBDA, &f).unwrap();
        let (_, trace) = optimize_filter_trace(&tf, &obj, 20).unwrap();
        for pair in trace.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn residual_piecewise_identities(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = SpatialWeightFn::default();
        let hj = ScoreMap::new(5, 5, uniform_vec(&mut r, 25)).unwrap();
        let g = unit_scores(&mut r, 5, 5);
        let sw = spatial_weight(&g, &f);
        let inside = GlmSample::new(FeatureMap::zeros(5, 5, 1), g.clone(), ScoreMap::filled(5, 5, 1.0), SampleKind::Static).unwrap();
        let res = track_residual(&hj, &inside, &f).unwrap();
        for i in 0..25 {
            prop_assert_eq!(res.data()[i], sw.data()[i] * (hj.data()[i] - g.data()[i]));
        }
        let outside = GlmSample { target_region: ScoreMap::filled(5, 5, 0.0), ..inside };
        let res = track_residual(&hj, &outside, &f).unwrap();
        for i in 0..25 {
            if hj.data()[i] <= 0.0 {
                prop_assert_eq!(res.data()[i], -sw.data()[i] * g.data()[i]);
            }
        }
    }

    #[test]
    fn static_entry_is_immutable(pushes in 0usize..120, seed in any::<u64>()) {
        let bank = quadratic_bank(seed, 2, 2);
        let mut mem = GlmMemory::new(bank[0].clone(), 50).unwrap();
        let before = mem.static_entry().clone();
        for _ in 0..pushes {
            mem.push_dynamic(bank[1].clone()).unwrap();
            prop_assert!(mem.len() <= 50);
        }
        prop_assert_eq!(mem.static_entry(), &before);
    }

    #[test]
    fn update_source_replay(peaks in prop::collection::vec(0.0f64..1.0, 1..80)) {
        let got = glm_update_source(&peaks, 25).unwrap();
        // straightforward recomputation
        let start = peaks.len().saturating_sub(25);
        let mut high = 0;
        for i in start..peaks.len() {
            let m = peaks[..=i].iter().cloned().fold(0.0, f64::max);
            if m > 0.0 && peaks[i] >= 0.5 * m {
                high += 1;
            }
        }
        let want = if high as f64 / (peaks.len() - start) as f64 > 0.6 { SampleKind::Dynamic } else { SampleKind::Static };
        prop_assert_eq!(got, want);
    }
}

#[test]
fn wls_gradient_when_target_region_is_full() {
    let f = SpatialWeightFn::default();
    for seed in 0..10 {
        let bank = quadratic_bank(seed, 3, 2);
        let mut r = rng(seed + 99);
        let filter = kernel(&mut r, 3, 2, 1);
        let tf = TrackFilter::new(filter.clone(), LAMBDA).unwrap();
        let g = track_gradient(&tf, &memory(&bank), &f).unwrap();
        // dense weighted least squares: 2/n sum A^T W^2 (A k - G) + 2 lambda^2 k
        let kv = nalgebra::DVector::from_column_slice(filter.data());
        let mut want = &kv * (2.0 * LAMBDA * LAMBDA);
        for s in &bank {
            let a = conv_matrix(s.feature.data(), (4, 4, 2), (3, 1));
            let w2 = nalgebra::DVector::from_iterator(16, spatial_weight(&s.label, &f).data().iter().map(|w| w * w));
            let res = &a * &kv - nalgebra::DVector::from_column_slice(s.label.data());
            want += a.transpose() * res.component_mul(&w2) * (2.0 / 3.0);
        }
        assert!(rel_err(g.data(), want.as_slice()) <= 1e-12);
    }
}

#[test]
fn pure_ridge_beta() {
    let f = SpatialWeightFn::default();
    let mut r = rng(4);
    let s = GlmSample::new(FeatureMap::zeros(4, 4, 2), unit_scores(&mut r, 4, 4), ScoreMap::filled(4, 4, 1.0), SampleKind::Static).unwrap();
    let mem = GlmMemory::new(s, 50).unwrap();
    for lambda in [0.1, 0.7] {
        let tf = TrackFilter::new(kernel(&mut r, 3, 2, 1), lambda).unwrap();
        let (_, beta) = gauss_newton_step(&tf, &mem, &f).unwrap().unwrap();
        let want = 1.0 / (2.0 * lambda * lambda);
        assert!((beta - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn gauss_newton_product_matches_dense_normal_matrix() {
    let f = SpatialWeightFn::default();
    let bank = quadratic_bank(8, 3, 2);
    let mut r = rng(8);
    let c = kernel(&mut r, 3, 2, 1);
    let v = kernel(&mut r, 3, 2, 1);
    let obj = TrackObjective::new(bank.iter(), c.shape(), LAMBDA, &f).unwrap();
    let got = obj.gauss_newton_product(&c, &v).unwrap();
    let vv = nalgebra::DVector::from_column_slice(v.data());
    let mut want = &vv * (2.0 * LAMBDA * LAMBDA);
    for s in &bank {
        let a = conv_matrix(s.feature.data(), (4, 4, 2), (3, 1));
        let w2 = nalgebra::DVector::from_iterator(16, spatial_weight(&s.label, &f).data().iter().map(|w| w * w));
        want += a.transpose() * (&a * &vv).component_mul(&w2) * (2.0 / 3.0);
    }
    assert!(rel_err(got.data(), want.as_slice()) <= 1e-12);
}

#[test]
fn converges_to_wls_ridge_minimum() {
    let f = SpatialWeightFn::default();
    for seed in 0..40 {
        let (k, c) = if seed % 4 == 3 { (1, 2) } else { (3, 2) };
        let bank = quadratic_bank(seed, 8, c);
        let shape = KernelShape::new(k, c, 1).unwrap();
        let obj = TrackObjective::new(bank.iter(), shape, LAMBDA, &f).unwrap();
        let opt = ConvKernel::new(shape, wls_minimum(&bank, k, c, &f)).unwrap();
        let best = obj.loss(&opt).unwrap();
        let (_, trace) = optimize_filter_trace(&TrackFilter::zeros(k, c, LAMBDA).unwrap(), &obj, 50).unwrap();
        let gap = trace.last().unwrap() - best;
        assert!(gap <= 1e-8, "seed {seed}: gap {gap:e}");
        assert!(trace.windows(2).all(|p| p[1] <= p[0]));
    }
}

#[test]
fn zero_iterations_returns_start() {
    let bank = quadratic_bank(1, 2, 2);
    let mut r = rng(1);
    let tf = TrackFilter::new(kernel(&mut r, 3, 2, 1), LAMBDA).unwrap();
    assert_eq!(optimize_filter(&tf, &memory(&bank), 0, &SpatialWeightFn::default()).unwrap(), tf);
}

#[test]
fn dynamic_sample_geometry_matches_crop_rule() {
    let mut r = rng(3);
    let x = feature(&mut r, 40, 40, 2);
    let prob = unit_scores(&mut r, 40, 40);
    let bbox = vql_core::numerics::BBox { x_min: 10, y_min: 12, x_max: 19, y_max: 17 };
    let (s, win) = glm_make_sample_with_window(&x, &bbox, &prob, 32, SampleKind::Dynamic).unwrap();
    assert_eq!(win.side, 15.0);
    assert_eq!(win.center, (14.5, 14.5));
    // sigma of side/6 source pixels is 32/6 canonical pixels
    let sigma = 32.0 / 6.0;
    let mid = 15.5;
    let expect = (-(0.5f64 * 0.5 + 0.5 * 0.5) / (2.0 * sigma * sigma)).exp();
    assert!((s.label.at(15, 15) - expect).abs() < 1e-15);
    assert!((s.label.at(0, 0) - (-(2.0 * mid * mid) / (2.0 * sigma * sigma)).exp()).abs() < 1e-15);
    assert!(s.target_region.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let degenerate = glm_make_dynamic_sample(&x, &vql_core::numerics::BBox { x_min: 5, y_min: 5, x_max: 45, y_max: 5 }, &prob, 32);
    assert!(degenerate.is_err());
}
