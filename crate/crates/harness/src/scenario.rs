//! Synthetic videos with known answers.
//!
//! The target is a square blob whose pixels carry a fixed channel signature
//! (optionally rotating towards an orthogonal one over time) on a static
//! textured background with fresh per-frame noise. Every frame also carries a
//! camera that looks straight at a fixed 3D target point; its principal point
//! sits on the blob center, so the blob center always back-projects onto the
//! target. Cameras live in a "reconstruction" frame related to the benchmark
//! frame by a hidden similarity, and matched point pairs expose that
//! similarity to the aligner.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vql_core::fusion::TemporalInterval;
use vql_core::geo3d::{CameraFrame, Sim3Transform};
use vql_core::numerics::{BBox, BinaryMask, FeatureMap, ScoreMap};
use vql_core::pipeline::{AlignmentPair, QuerySpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Identity,
    Drift,
    Distractor,
    Absence,
    Geo,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Identity,
        Preset::Drift,
        Preset::Distractor,
        Preset::Absence,
        Preset::Geo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Identity => "identity",
            Preset::Drift => "drift",
            Preset::Distractor => "distractor",
            Preset::Absence => "absence",
            Preset::Geo => "geo",
        }
    }

    pub fn params(self) -> ScenarioParams {
        let base = ScenarioParams::default();
        match self {
            Preset::Identity => ScenarioParams {
                frames: 120,
                frame_noise: 0.0,
                ..base
            },
            Preset::Drift => ScenarioParams {
                frames: 160,
                drift_rate: DRIFT_RATE,
                trajectory: Trajectory {
                    amplitude: (3.0, 4.0),
                    period: 80.0,
                },
                ..base
            },
            Preset::Distractor => ScenarioParams {
                frames: 120,
                trajectory: Trajectory {
                    amplitude: (2.0, 3.0),
                    period: 60.0,
                },
                distractor: Some(Distractor {
                    half_size: 2,
                    similarity: 0.6,
                    center: (7.0, 25.0),
                }),
                ..base
            },
            Preset::Absence => ScenarioParams {
                frames: 160,
                absent: Some((50, 89)),
                trajectory: Trajectory {
                    amplitude: (2.0, 2.0),
                    period: 70.0,
                },
                ..base
            },
            Preset::Geo => ScenarioParams {
                frames: 5,
                frame_noise: 0.0,
                camera_distance: (2.5, 4.0),
                ..base
            },
        }
    }
}

/// Signature rotation per frame of the drift preset: 120 degrees by frame 150,
/// where the undrifted signature's response has turned negative.
pub const DRIFT_RATE: f64 = 2.0 * std::f64::consts::FRAC_PI_3 / 150.0;

/// Sinusoidal wander of the blob center around the canvas center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    /// Peak offset `(rows, cols)` in pixels.
    pub amplitude: (f64, f64),
    /// Frames per full cycle.
    pub period: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub half_size: usize,
    /// Cosine between the distractor and the target's initial signature.
    pub similarity: f64,
    /// Fixed `(row, col)` center.
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// The blob is a `(2 * half_size + 1)` pixel square.
    pub half_size: usize,
    pub amplitude: f64,
    pub texture: f64,
    pub frame_noise: f64,
    /// Signature rotation in radians per frame.
    pub drift_rate: f64,
    pub trajectory: Trajectory,
    pub distractor: Option<Distractor>,
    /// Inclusive frame range in which the target is hidden.
    pub absent: Option<(usize, usize)>,
    pub focal_length: f64,
    /// Camera-to-target distance range (benchmark units) across frames.
    pub camera_distance: (f64, f64),
    /// Frames whose depth is scaled by `corruption.0` and whose uncertainty
    /// is set to `corruption.1`.
    pub corrupted_views: Vec<usize>,
    pub corruption: (f64, f64),
    pub base_uncertainty: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            frames: 100,
            height: 32,
            width: 32,
            channels: 4,
            half_size: 4,
            amplitude: 1.0,
            texture: 0.1,
            frame_noise: 0.02,
            drift_rate: 0.0,
            trajectory: Trajectory {
                amplitude: (0.0, 0.0),
                period: 1.0,
            },
            distractor: None,
            absent: None,
            focal_length: 40.0,
            camera_distance: (3.0, 5.0),
            corrupted_views: Vec::new(),
            corruption: (1.3, 20.0),
            base_uncertainty: 0.01,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.frames == 0 {
            return fail("a scenario needs at least one frame".into());
        }
        if self.height < 8 || self.width < 8 {
            return fail(format!("canvas {}x{} is smaller than 8x8", self.height, self.width));
        }
        if self.channels < 2 {
            return fail("signature drift needs at least two channels".into());
        }
        let side = 2 * self.half_size + 1;
        let (ar, ac) = self.trajectory.amplitude;
        let reach_r = self.half_size as f64 + ar.abs() + 1.0;
        let reach_c = self.half_size as f64 + ac.abs() + 1.0;
        if side > self.height.min(self.width)
            || 2.0 * reach_r > self.height as f64
            || 2.0 * reach_c > self.width as f64
        {
            return fail("the target's trajectory leaves the canvas".into());
        }
        if self.trajectory.period <= 0.0 {
            return fail("trajectory period must be positive".into());
        }
        if !(self.amplitude > 0.0 && self.texture >= 0.0 && self.frame_noise >= 0.0) {
            return fail("amplitude must be positive and noise levels non-negative".into());
        }
        if let Some((a, b)) = self.absent {
            if a > b || b >= self.frames {
                return fail(format!("absence ({a}, {b}) is not inside the video"));
            }
            if b + 1 == self.frames {
                return fail("the target must reappear after its absence".into());
            }
        }
        if let Some(d) = &self.distractor {
            if !(0.0..1.0).contains(&d.similarity) {
                return fail("distractor similarity must lie in [0, 1)".into());
            }
            if self.channels < 3 {
                return fail("a distractor needs a third channel direction".into());
            }
            let (r, c) = (d.center.0.round(), d.center.1.round());
            let half = d.half_size as f64;
            if r - half < 0.0 || c - half < 0.0 || r + half >= self.height as f64 || c + half >= self.width as f64 {
                return fail("the distractor does not fit on the canvas".into());
            }
        }
        let (lo, hi) = self.camera_distance;
        if !(lo > 0.0 && hi >= lo && self.focal_length > 0.0) {
            return fail("camera distances and focal length must be positive".into());
        }
        if self.corrupted_views.iter().any(|&v| v >= self.frames) {
            return fail("corrupted view index beyond the last frame".into());
        }
        if !(self.corruption.0 > 0.0 && self.corruption.1 >= 0.0 && self.base_uncertainty >= 0.0) {
            return fail("corruption must keep depth positive and uncertainty non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameData {
    pub feature: FeatureMap,
    pub gt_mask: BinaryMask,
    pub gt_bbox: Option<BBox>,
    pub camera: Option<CameraFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub preset: Option<Preset>,
    pub params: ScenarioParams,
    pub query: QuerySpec,
    pub frames: Vec<FrameData>,
    pub gt_interval: TemporalInterval,
    /// Target location in the benchmark frame.
    pub gt_point: Vector3<f64>,
    /// Reconstruction-to-benchmark similarity the aligner should recover.
    pub gt_alignment: Sim3Transform,
    pub alignment_pairs: Vec<AlignmentPair>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let n = self.frames.len();
        if n != self.params.frames {
            return Err(Error::Validation(format!(
                "scenario declares {} frames but stores {n}",
                self.params.frames
            )));
        }
        if self.gt_interval.end_frame >= n {
            return Err(Error::Validation("ground-truth interval extends past the video".into()));
        }
        let dims = (self.params.height, self.params.width);
        for (i, f) in self.frames.iter().enumerate() {
            if (f.feature.height(), f.feature.width()) != dims
                || f.feature.channels() != self.params.channels
                || f.gt_mask.dims() != dims
            {
                return Err(Error::Validation(format!("frame {i} does not match the canvas")));
            }
        }
        if self.query.feature.channels() != self.params.channels {
            return Err(Error::Validation("query channels differ from the frames".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> impl Iterator<Item = (&FeatureMap, usize)> {
        self.frames.iter().enumerate().map(|(i, f)| (&f.feature, i))
    }

    pub fn cameras(&self) -> Vec<Option<CameraFrame>> {
        self.frames.iter().map(|f| f.camera.clone()).collect()
    }

    /// `(T_eta T_i)^-1` applied to the ground-truth point: the displacement a
    /// perfect system would report for frame `i`.
    pub fn gt_displacement(&self, frame: usize) -> Option<Vector3<f64>> {
        let cam = self.frames.get(frame)?.camera.as_ref()?;
        Some(vql_core::geo3d::relative_displacement(cam, &self.gt_point, &self.gt_alignment))
    }
}

/// Target signature at frame `t`: `cos(rt) s0 + sin(rt) s1`.
pub fn target_signature(basis: &[Vec<f64>], rate: f64, t: usize) -> Vec<f64> {
    let a = rate * t as f64;
    basis[0]
        .iter()
        .zip(&basis[1])
        .map(|(x, y)| a.cos() * x + a.sin() * y)
        .collect()
}

/// Orthonormal signature directions drawn from the seed.
pub fn signature_basis(rng: &mut impl Rng, channels: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < count {
        let mut v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn quantize(v: f64) -> f64 {
    // three decimals keep the background short on disk
    (v * 1000.0).round() / 1000.0
}

/// Blob center `(row, col)` in integer pixels at frame `t`.
pub fn blob_center(p: &ScenarioParams, t: usize) -> (usize, usize) {
    let phase = 2.0 * std::f64::consts::PI * t as f64 / p.trajectory.period;
    let r = (p.height as f64 - 1.0) / 2.0 + p.trajectory.amplitude.0 * phase.sin();
    let c = (p.width as f64 - 1.0) / 2.0 + p.trajectory.amplitude.1 * phase.cos();
    (r.round() as usize, c.round() as usize)
}

fn square(center: (usize, usize), half: usize) -> BBox {
    BBox {
        x_min: center.1 - half,
        y_min: center.0 - half,
        x_max: center.1 + half,
        y_max: center.0 + half,
    }
}

fn paint(feature: &mut [f64], width: usize, channels: usize, bbox: &BBox, sig: &[f64], amp: f64) {
    for r in bbox.y_min..=bbox.y_max {
        for c in bbox.x_min..=bbox.x_max {
            let px = &mut feature[(r * width + c) * channels..(r * width + c + 1) * channels];
            for (v, s) in px.iter_mut().zip(sig) {
                *v = amp * s;
            }
        }
    }
}

fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let up = if z.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

pub fn generate(seed: u64, preset: Preset) -> Result<Scenario> {
    let mut s = generate_with(seed, &preset.params())?;
    s.preset = Some(preset);
    Ok(s)
}

pub fn generate_with(seed: u64, p: &ScenarioParams) -> Result<Scenario> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, ch) = (p.height, p.width, p.channels);
    let basis = signature_basis(&mut rng, ch, if p.distractor.is_some() { 3 } else { 2 });
    let texture: Vec<f64> = (0..h * w * ch)
        .map(|_| quantize(rng.random_range(-p.texture..=p.texture)))
        .collect();

    // geometry: benchmark-frame target and a hidden reconstruction frame
    let gt_point = Vector3::new(
        quantize(rng.random_range(-2.0..2.0)),
        quantize(rng.random_range(-2.0..2.0)),
        quantize(rng.random_range(0.5..1.5)),
    );
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let eta_rot = nalgebra::Rotation3::new(axis.normalize() * rng.random_range(0.2..1.0)).into_inner();
    // a power-of-two scale keeps depths exact when converted between frames
    let eta = Sim3Transform::new(
        2.0,
        eta_rot,
        Vector3::new(quantize(rng.random_range(-1.0..1.0)), quantize(rng.random_range(-1.0..1.0)), quantize(rng.random_range(-1.0..1.0))),
    )?;
    let to_recon = eta.inverse();
    let arc_start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.random_range(0.2..0.6);

    let mut frames = Vec::with_capacity(p.frames);
    for t in 0..p.frames {
        let mut feature = texture.clone();
        if p.frame_noise > 0.0 {
            for v in feature.iter_mut() {
                *v = quantize(*v + rng.random_range(-p.frame_noise..=p.frame_noise));
            }
        }
        if let Some(d) = &p.distractor {
            let sig: Vec<f64> = basis[0]
                .iter()
                .zip(&basis[2])
                .map(|(a, b)| d.similarity * a + (1.0 - d.similarity * d.similarity).sqrt() * b)
                .collect();
            let c = (d.center.0.round() as usize, d.center.1.round() as usize);
            paint(&mut feature, w, ch, &square(c, d.half_size), &sig, p.amplitude);
        }
        let center = blob_center(p, t);
        let visible = p.absent.is_none_or(|(a, b)| !(a..=b).contains(&t));
        let gt_bbox = visible.then(|| square(center, p.half_size));
        if let Some(b) = &gt_bbox {
            let sig = target_signature(&basis, p.drift_rate, t);
            paint(&mut feature, w, ch, b, &sig, p.amplitude);
        }
        let gt_mask = match &gt_bbox {
            Some(b) => BinaryMask::from_fn(h, w, |r, c| {
                (b.y_min..=b.y_max).contains(&r) && (b.x_min..=b.x_max).contains(&c)
            }),
            None => BinaryMask::empty(h, w),
        };

        // camera on an arc around the target, looking at it
        let frac = if p.frames > 1 { t as f64 / (p.frames - 1) as f64 } else { 0.0 };
        let dist = quantize(p.camera_distance.0 + (p.camera_distance.1 - p.camera_distance.0) * frac);
        let yaw = arc_start + 1.2 * frac;
        let dir = Vector3::new(yaw.cos() * elevation.cos(), elevation.sin(), yaw.sin() * elevation.cos());
        let cam_center = gt_point + dir * dist;
        let rot_bench = look_at(&cam_center, &gt_point);
        let rot = eta_rot.transpose() * rot_bench;
        let pos = to_recon.apply(&cam_center);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&pos);
        let (cy, cx) = (center.0 as f64, center.1 as f64);
        let k = Matrix3::new(p.focal_length, 0.0, cx, 0.0, p.focal_length, cy, 0.0, 0.0, 1.0);
        let corrupted = p.corrupted_views.contains(&t);
        // reconstruction depth is the benchmark depth over the similarity scale
        let mut depth = dist / eta.scale();
        let mut tau = p.base_uncertainty;
        if corrupted {
            depth *= p.corruption.0;
            tau = p.corruption.1;
        }
        let camera = CameraFrame::new(pose, k, ScoreMap::filled(h, w, depth), ScoreMap::filled(h, w, tau))?;

        frames.push(FrameData {
            feature: FeatureMap::new(h, w, ch, feature)?,
            gt_mask,
            gt_bbox,
            camera: Some(camera),
        });
    }

    // the query shows the undrifted target on the clean background
    let mut qfeat = texture.clone();
    let qcenter = blob_center(p, 0);
    paint(&mut qfeat, w, ch, &square(qcenter, p.half_size), &basis[0], p.amplitude);
    let qbox = square(qcenter, p.half_size);
    let query = QuerySpec {
        feature: FeatureMap::new(h, w, ch, qfeat)?,
        mask: BinaryMask::from_fn(h, w, |r, c| {
            (qbox.y_min..=qbox.y_max).contains(&r) && (qbox.x_min..=qbox.x_max).contains(&c)
        }),
        frame_index: 0,
    };

    let gt_interval = match p.absent {
        Some((_, b)) => TemporalInterval::new(b + 1, p.frames - 1)?,
        None => TemporalInterval::new(0, p.frames - 1)?,
    };
    let alignment_pairs = (0..8)
        .map(|_| {
            let q = Vector3::new(
                quantize(rng.random_range(-3.0..3.0)),
                quantize(rng.random_range(-3.0..3.0)),
                quantize(rng.random_range(-3.0..3.0)),
            );
            (q, eta.apply(&q))
        })
        .collect();

    let scenario = Scenario {
        seed,
        preset: None,
        params: p.clone(),
        query,
        frames,
        gt_interval,
        gt_point,
        gt_alignment: eta,
        alignment_pairs,
    };
    scenario.validate()?;
    Ok(scenario)
}
