//! Localization memory: a permanent static snapshot plus a FIFO of dynamic
//! snapshots, and the correlation filter `c` fitted to them.
//!
//! Each sample contributes the residual
//!
//! ```text
//! H = sw(G) . (S . HJ + (1 - S) . max(0, HJ) - G),   HJ = F * c
//! ```
//!
//! which is least squares inside the target region (`S = 1`) and a hinge
//! outside it. The loss is `mean_i ||H_i||^2 + lambda^2 ||c||^2`, with gradient
//!
//! ```text
//! grad = 2/n sum_i F_i *^T (Q_i . H_i) + 2 lambda^2 c,
//! Q = sw . (S + (1 - S) . [HJ > 0])
//! ```
//!
//! Steps go along `-grad` with the Gauss-Newton length
//! `|grad|^2 / (2/n sum_i ||Q_i . (F_i * grad)||^2 + 2 lambda^2 |grad|^2)`.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crop::{bbox_crop_window, CropWindow};
use crate::error::{ensure, Result};
use crate::numerics::{
    conv2d, gaussian_label, kernel_gradient, BBox, ConvKernel, FeatureMap, KernelShape, ScoreMap,
};

/// Below this gradient norm the optimizer treats the filter as converged.
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

/// Halvings tried when a Gauss-Newton step would increase the true loss.
pub const MAX_HALVINGS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmSample {
    pub feature: FeatureMap,
    pub label: ScoreMap,
    pub target_region: ScoreMap,
    pub kind: SampleKind,
}

impl GlmSample {
    pub fn new(
        feature: FeatureMap,
        label: ScoreMap,
        target_region: ScoreMap,
        kind: SampleKind,
    ) -> Result<Self> {
        let dims = (feature.height(), feature.width());
        ensure!(
            label.dims() == dims && target_region.dims() == dims,
            Dimension,
            "tracking sample maps disagree: feature {:?}, label {:?}, region {:?}",
            dims,
            label.dims(),
            target_region.dims()
        );
        ensure!(
            target_region.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Parameter,
            "target region values must lie in [0, 1]"
        );
        Ok(Self {
            feature,
            label,
            target_region,
            kind,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmMemory {
    static_entry: GlmSample,
    dynamic_entries: VecDeque<GlmSample>,
    capacity: usize,
}

impl GlmMemory {
    /// `capacity` counts the static slot, so at most `capacity - 1` dynamic
    /// snapshots are kept.
    pub fn new(mut static_entry: GlmSample, capacity: usize) -> Result<Self> {
        ensure!(capacity >= 1, Parameter, "tracking memory capacity must be positive");
        static_entry.kind = SampleKind::Static;
        Ok(Self {
            static_entry,
            dynamic_entries: VecDeque::with_capacity(capacity - 1),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn static_entry(&self) -> &GlmSample {
        &self.static_entry
    }

    pub fn dynamic_entries(&self) -> impl ExactSizeIterator<Item = &GlmSample> {
        self.dynamic_entries.iter()
    }

    pub fn len(&self) -> usize {
        1 + self.dynamic_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Static entry first, then dynamic entries oldest first.
    pub fn samples(&self) -> impl Iterator<Item = &GlmSample> {
        std::iter::once(&self.static_entry).chain(self.dynamic_entries.iter())
    }

    /// Appends a dynamic snapshot, evicting the oldest dynamic one if full.
    pub fn push_dynamic(&mut self, mut sample: GlmSample) -> Result<Option<GlmSample>> {
        let s = &self.static_entry;
        ensure!(
            sample.label.dims() == s.label.dims()
                && sample.feature.channels() == s.feature.channels(),
            Dimension,
            "dynamic snapshot {}x{}x{} does not match static {}x{}x{}",
            sample.feature.height(),
            sample.feature.width(),
            sample.feature.channels(),
            s.feature.height(),
            s.feature.width(),
            s.feature.channels()
        );
        sample.kind = SampleKind::Dynamic;
        if self.capacity == 1 {
            return Ok(Some(sample));
        }
        self.dynamic_entries.push_back(sample);
        Ok(if self.dynamic_entries.len() > self.capacity - 1 {
            self.dynamic_entries.pop_front()
        } else {
            None
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFilter {
    pub kernel: ConvKernel,
    pub regularizer: f64,
}

impl TrackFilter {
    pub fn new(kernel: ConvKernel, regularizer: f64) -> Result<Self> {
        ensure!(
            kernel.shape().out_channels == 1,
            Dimension,
            "tracking filter must have one output channel, got {}",
            kernel.shape().out_channels
        );
        ensure!(
            regularizer > 0.0 && regularizer.is_finite(),
            Parameter,
            "tracking regularizer must be positive, got {regularizer}"
        );
        Ok(Self {
            kernel,
            regularizer,
        })
    }

    pub fn zeros(k: usize, in_channels: usize, regularizer: f64) -> Result<Self> {
        Self::new(
            ConvKernel::zeros(KernelShape::new(k, in_channels, 1)?),
            regularizer,
        )
    }

    /// Score map `HJ = F * c`.
    pub fn apply(&self, feature: &FeatureMap) -> Result<ScoreMap> {
        Ok(conv2d(feature, &self.kernel)?.channel(0))
    }
}

/// `sw(G) = w_bg + (w_fg - w_bg) G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialWeightFn {
    pub w_fg: f64,
    pub w_bg: f64,
}

impl Default for SpatialWeightFn {
    fn default() -> Self {
        Self {
            w_fg: 1.0,
            w_bg: 0.25,
        }
    }
}

impl SpatialWeightFn {
    pub fn new(w_fg: f64, w_bg: f64) -> Result<Self> {
        let f = Self { w_fg, w_bg };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.w_bg > 0.0 && self.w_fg >= self.w_bg,
            Parameter,
            "spatial weights need w_fg >= w_bg > 0, got {} and {}",
            self.w_fg,
            self.w_bg
        );
        Ok(())
    }
}

pub fn spatial_weight(g: &ScoreMap, f: &SpatialWeightFn) -> ScoreMap {
    g.map(|v| f.w_bg + (f.w_fg - f.w_bg) * v)
}

fn residual_with(hj: &ScoreMap, sample: &GlmSample, sw: &ScoreMap) -> ScoreMap {
    let s = sample.target_region.data();
    let g = sample.label.data();
    let w = sw.data();
    let (h, wd) = hj.dims();
    let mut i = 0;
    ScoreMap::from_fn(h, wd, |_, _| {
        let v = hj.data()[i];
        let out = w[i] * (s[i] * v + (1.0 - s[i]) * v.max(0.0) - g[i]);
        i += 1;
        out
    })
}

pub fn track_residual(hj: &ScoreMap, sample: &GlmSample, f: &SpatialWeightFn) -> Result<ScoreMap> {
    ensure!(
        hj.dims() == sample.label.dims(),
        Dimension,
        "score map is {:?}, sample is {:?}",
        hj.dims(),
        sample.label.dims()
    );
    Ok(residual_with(hj, sample, &spatial_weight(&sample.label, f)))
}

struct Prepared<'a> {
    sample: &'a GlmSample,
    sw: ScoreMap,
}

struct Evaluated {
    norm_sq: f64,
    /// `Q . H`, the back-propagated residual
    weighted: ScoreMap,
    /// `Q` itself, frozen for the curvature product
    q: ScoreMap,
}

/// The tracking objective over a fixed list of snapshots.
pub struct TrackObjective<'a> {
    samples: Vec<Prepared<'a>>,
    shape: KernelShape,
    regularizer: f64,
}

impl<'a> TrackObjective<'a> {
    pub fn new(
        samples: impl IntoIterator<Item = &'a GlmSample>,
        shape: KernelShape,
        regularizer: f64,
        f: &SpatialWeightFn,
    ) -> Result<Self> {
        f.validate()?;
        shape.validate()?;
        ensure!(shape.out_channels == 1, Dimension, "tracking filter has one output channel");
        let samples = samples
            .into_iter()
            .map(|s| {
                ensure!(
                    s.feature.channels() == shape.in_channels,
                    Dimension,
                    "snapshot has {} channels, filter expects {}",
                    s.feature.channels(),
                    shape.in_channels
                );
                Ok(Prepared {
                    sample: s,
                    sw: spatial_weight(&s.label, f),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ensure!(!samples.is_empty(), EmptyInput, "tracking objective without samples");
        Ok(Self {
            samples,
            shape,
            regularizer,
        })
    }

    pub fn from_memory(mem: &'a GlmMemory, filter: &TrackFilter, f: &SpatialWeightFn) -> Result<Self> {
        Self::new(mem.samples(), filter.kernel.shape(), filter.regularizer, f)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check(&self, c: &ConvKernel) -> Result<()> {
        ensure!(
            c.shape() == self.shape,
            Dimension,
            "filter shape {:?} does not match objective {:?}",
            c.shape(),
            self.shape
        );
        Ok(())
    }

    fn evaluate(&self, c: &ConvKernel) -> Result<Vec<Evaluated>> {
        self.samples
            .par_iter()
            .map(|p| {
                let hj = conv2d(&p.sample.feature, c)?.channel(0);
                let res = residual_with(&hj, p.sample, &p.sw);
                let s = p.sample.target_region.data();
                let q = ScoreMap::new(
                    hj.height(),
                    hj.width(),
                    hj.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let active = if v > 0.0 { 1.0 } else { 0.0 };
                            p.sw.data()[i] * (s[i] + (1.0 - s[i]) * active)
                        })
                        .collect(),
                )?;
                let weighted = ScoreMap::new(
                    hj.height(),
                    hj.width(),
                    res.data().iter().zip(q.data()).map(|(a, b)| a * b).collect(),
                )?;
                Ok(Evaluated {
                    norm_sq: res.data().iter().map(|v| v * v).sum(),
                    weighted,
                    q,
                })
            })
            .collect()
    }

    fn loss_from(&self, parts: &[Evaluated], c: &ConvKernel) -> f64 {
        let data: f64 = parts.iter().map(|e| e.norm_sq).sum();
        let lambda2 = self.regularizer * self.regularizer;
        data / self.samples.len() as f64 + lambda2 * c.norm_sq()
    }

    pub fn loss(&self, c: &ConvKernel) -> Result<f64> {
        self.check(c)?;
        Ok(self.loss_from(&self.evaluate(c)?, c))
    }

    fn gradient_from(&self, parts: &[Evaluated], c: &ConvKernel) -> Result<ConvKernel> {
        let n = self.samples.len() as f64;
        let lambda2 = self.regularizer * self.regularizer;
        let grads: Vec<ConvKernel> = parts
            .par_iter()
            .zip(&self.samples)
            .map(|(e, p)| {
                let back = scores_as_map(&e.weighted);
                kernel_gradient(&p.sample.feature, &back, self.shape)
            })
            .collect::<Result<_>>()?;
        let mut grad = c.scaled(2.0 * lambda2);
        for g in &grads {
            grad.accumulate(g, 2.0 / n);
        }
        Ok(grad)
    }

    pub fn gradient(&self, c: &ConvKernel) -> Result<ConvKernel> {
        self.check(c)?;
        let parts = self.evaluate(c)?;
        self.gradient_from(&parts, c)
    }

    /// `g^T (J^T J) g` with the activation pattern frozen at the current
    /// filter; this is the curvature of the Gauss-Newton model along `g`.
    fn curvature_from(&self, parts: &[Evaluated], g: &ConvKernel) -> Result<f64> {
        let n = self.samples.len() as f64;
        let lambda2 = self.regularizer * self.regularizer;
        let terms: Vec<f64> = parts
            .par_iter()
            .zip(&self.samples)
            .map(|(e, p)| {
                let r = conv2d(&p.sample.feature, g)?;
                Ok(r.data()
                    .iter()
                    .zip(e.q.data())
                    .map(|(v, q)| (q * v) * (q * v))
                    .sum())
            })
            .collect::<Result<_>>()?;
        Ok(2.0 / n * terms.iter().sum::<f64>() + 2.0 * lambda2 * g.norm_sq())
    }

    /// Matrix-free Gauss-Newton product `(J^T J) v` (including the ridge
    /// term) at filter `c`.
    pub fn gauss_newton_product(&self, c: &ConvKernel, v: &ConvKernel) -> Result<ConvKernel> {
        self.check(c)?;
        self.check(v)?;
        let n = self.samples.len() as f64;
        let lambda2 = self.regularizer * self.regularizer;
        let parts = self.evaluate(c)?;
        let grads: Vec<ConvKernel> = parts
            .par_iter()
            .zip(&self.samples)
            .map(|(e, p)| {
                let r = conv2d(&p.sample.feature, v)?;
                let qqr = FeatureMap::new(
                    r.height(),
                    r.width(),
                    1,
                    r.data().iter().zip(e.q.data()).map(|(x, q)| q * q * x).collect(),
                )?;
                kernel_gradient(&p.sample.feature, &qqr, self.shape)
            })
            .collect::<Result<_>>()?;
        let mut out = v.scaled(2.0 * lambda2);
        for g in &grads {
            out.accumulate(g, 2.0 / n);
        }
        Ok(out)
    }

    /// Search direction (the gradient) and Gauss-Newton step length, or `None`
    /// once the gradient vanishes.
    pub fn gauss_newton_step(&self, c: &ConvKernel) -> Result<Option<(ConvKernel, f64)>> {
        self.check(c)?;
        let parts = self.evaluate(c)?;
        Ok(self.step_from(&parts, c)?.map(|(g, beta, _)| (g, beta)))
    }

    fn step_from(&self, parts: &[Evaluated], c: &ConvKernel) -> Result<Option<(ConvKernel, f64, f64)>> {
        let grad = self.gradient_from(parts, c)?;
        let g2 = grad.norm_sq();
        if g2.sqrt() < GRADIENT_TOLERANCE {
            return Ok(None);
        }
        let denom = self.curvature_from(parts, &grad)?;
        ensure!(
            denom > 0.0,
            Parameter,
            "Gauss-Newton model has zero curvature along the gradient"
        );
        Ok(Some((grad, g2 / denom, self.loss_from(parts, c))))
    }
}

fn scores_as_map(s: &ScoreMap) -> FeatureMap {
    FeatureMap::from_fn(s.height(), s.width(), 1, |r, c, _| s.at(r, c))
}

pub fn track_loss(c: &TrackFilter, mem: &GlmMemory, f: &SpatialWeightFn) -> Result<f64> {
    TrackObjective::from_memory(mem, c, f)?.loss(&c.kernel)
}

pub fn track_gradient(c: &TrackFilter, mem: &GlmMemory, f: &SpatialWeightFn) -> Result<ConvKernel> {
    TrackObjective::from_memory(mem, c, f)?.gradient(&c.kernel)
}

pub fn gauss_newton_step(
    c: &TrackFilter,
    mem: &GlmMemory,
    f: &SpatialWeightFn,
) -> Result<Option<(ConvKernel, f64)>> {
    TrackObjective::from_memory(mem, c, f)?.gauss_newton_step(&c.kernel)
}

/// Safeguarded Gauss-Newton iterations. A step that raises the loss is halved
/// up to [`MAX_HALVINGS`] times; if none of those helps the run stops. The
/// trace holds the starting loss and the loss after each accepted step.
pub fn optimize_filter_trace(
    c0: &TrackFilter,
    objective: &TrackObjective<'_>,
    n_iter: usize,
) -> Result<(TrackFilter, Vec<f64>)> {
    let mut c = c0.clone();
    let mut trace = Vec::with_capacity(n_iter + 1);
    if n_iter == 0 {
        return Ok((c, trace));
    }
    objective.check(&c.kernel)?;
    let mut parts = objective.evaluate(&c.kernel)?;
    trace.push(objective.loss_from(&parts, &c.kernel));
    for _ in 0..n_iter {
        let Some((grad, mut beta, loss)) = objective.step_from(&parts, &c.kernel)? else {
            break;
        };
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = c.kernel.add_scaled(&grad, -beta);
            let cand_parts = objective.evaluate(&candidate)?;
            let cand_loss = objective.loss_from(&cand_parts, &candidate);
            if cand_loss <= loss {
                accepted = Some((candidate, cand_parts, cand_loss));
                break;
            }
            beta *= 0.5;
        }
        let Some((kernel, next_parts, next_loss)) = accepted else {
            break;
        };
        c.kernel = kernel;
        parts = next_parts;
        trace.push(next_loss);
    }
    Ok((c, trace))
}

pub fn optimize_filter(
    c0: &TrackFilter,
    mem: &GlmMemory,
    n_iter: usize,
    f: &SpatialWeightFn,
) -> Result<TrackFilter> {
    let objective = TrackObjective::from_memory(mem, c0, f)?;
    Ok(optimize_filter_trace(c0, &objective, n_iter)?.0)
}

/// Label width for a crop of `side` source pixels.
pub fn glm_label_sigma(side: f64) -> f64 {
    side / 6.0
}

/// A tracking snapshot cut `1.5x` around `bbox`, with a Gaussian label at the
/// crop center and the cropped probabilities as target region.
pub fn glm_make_sample_with_window(
    frame_feature: &FeatureMap,
    bbox: &BBox,
    region: &ScoreMap,
    resolution: usize,
    kind: SampleKind,
) -> Result<(GlmSample, CropWindow)> {
    ensure!(
        (frame_feature.height(), frame_feature.width()) == region.dims(),
        Dimension,
        "frame is {}x{}, probability map is {:?}",
        frame_feature.height(),
        frame_feature.width(),
        region.dims()
    );
    ensure!(
        bbox.x_max < region.width() && bbox.y_max < region.height(),
        Dimension,
        "bounding box {bbox:?} outside the frame"
    );
    let window = bbox_crop_window(bbox)?;
    let feature = window.resample_features(frame_feature, resolution);
    // sigma in canonical pixels
    let sigma = glm_label_sigma(window.side) * resolution as f64 / window.side;
    let mid = (resolution as f64 - 1.0) / 2.0;
    let label = gaussian_label((mid, mid), sigma, (resolution, resolution))?;
    let target = window
        .resample_scores(region, resolution)
        .map(|v| v.clamp(0.0, 1.0));
    Ok((GlmSample::new(feature, label, target, kind)?, window))
}

pub fn glm_make_dynamic_sample(
    frame_feature: &FeatureMap,
    bbox: &BBox,
    prob_mask: &ScoreMap,
    resolution: usize,
) -> Result<GlmSample> {
    Ok(glm_make_sample_with_window(frame_feature, bbox, prob_mask, resolution, SampleKind::Dynamic)?.0)
}

/// Picks the snapshot source from per-frame peak responses: dynamic when more
/// than 60% of the last `window` frames reached half the running maximum.
pub fn glm_update_source(history: &[f64], window: usize) -> Result<SampleKind> {
    ensure!(!history.is_empty(), EmptyInput, "no response history");
    ensure!(window > 0, Parameter, "window must be positive");
    let start = history.len().saturating_sub(window);
    let mut running_max = f64::NEG_INFINITY;
    let mut high = 0usize;
    for (i, &peak) in history.iter().enumerate() {
        running_max = running_max.max(peak);
        if i >= start && running_max > 0.0 && peak >= 0.5 * running_max {
            high += 1;
        }
    }
    let fraction = high as f64 / (history.len() - start) as f64;
    Ok(if fraction > 0.6 {
        SampleKind::Dynamic
    } else {
        SampleKind::Static
    })
}
