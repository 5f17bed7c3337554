//! Appearance memory: stored (feature, mask) samples and the segmentation
//! filter fitted to them.
//!
//! The filter `sigma` minimizes
//!
//! ```text
//! L(sigma) = 1/2 sum_i || W_i . (F_i * sigma - QM_i) ||^2 + delta/2 ||sigma||^2
//! ```
//!
//! where `QM_i` is a fixed multi-channel encoding of mask `M_i` and `W_i` a
//! per-pixel weight derived from the same mask. The objective is a strictly
//! convex quadratic, so steepest descent with the exact line-search step
//!
//! ```text
//! alpha = ||g||^2 / (sum_i ||W_i . (F_i * g)||^2 + delta ||g||^2)
//! ```
//!
//! never increases it.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crop::{mask_crop_window, CropWindow};
use crate::error::{ensure, Result};
use crate::numerics::{
    conv2d, gaussian_blur, kernel_gradient, running_mean, BinaryMask, ConvKernel, FeatureMap,
    KernelShape, ScoreMap,
};

/// Below this gradient norm the optimizer treats the filter as converged.
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

/// Fixed mask-to-label transform. Channels: the mask itself, its 4-connected
/// boundary, and a centroid-distance bump restricted to the foreground.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelEncoder {
    out_channels: usize,
}

impl Default for PseudoLabelEncoder {
    fn default() -> Self {
        Self { out_channels: 3 }
    }
}

impl PseudoLabelEncoder {
    pub fn new(out_channels: usize) -> Result<Self> {
        ensure!(
            out_channels == 3,
            Parameter,
            "pseudo-label encoder produces exactly 3 channels, asked for {out_channels}"
        );
        Ok(Self { out_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn encode(&self, mask: &BinaryMask) -> FeatureMap {
        let (h, w) = mask.dims();
        let mut out = FeatureMap::zeros(h, w, 3);
        let Some((cr, cc)) = mask.centroid() else {
            return out;
        };
        let radius = ((mask.area() as f64).sqrt() / 2.0).max(1.0);
        let fg = |r: isize, c: isize| {
            r >= 0 && c >= 0 && r < h as isize && c < w as isize && mask.get(r as usize, c as usize)
        };
        for (r, c) in mask.pixels() {
            let (ri, ci) = (r as isize, c as isize);
            // pixels past the frame edge count as background
            let interior = fg(ri - 1, ci) && fg(ri + 1, ci) && fg(ri, ci - 1) && fg(ri, ci + 1);
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let px = out.pixel_mut(r, c);
            px[0] = 1.0;
            px[1] = if interior { 0.0 } else { 1.0 };
            px[2] = (-d2 / (2.0 * radius * radius)).exp();
        }
        out
    }
}

pub fn encode_pseudo_label(mask: &BinaryMask, out_channels: usize) -> Result<FeatureMap> {
    Ok(PseudoLabelEncoder::new(out_channels)?.encode(mask))
}

/// Per-pixel loss weight: background level plus a blurred foreground bump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReweighter {
    pub foreground_weight: f64,
    pub background_weight: f64,
    pub blur_sigma: f64,
}

impl Default for TargetReweighter {
    fn default() -> Self {
        Self {
            foreground_weight: 1.0,
            background_weight: 0.25,
            blur_sigma: 1.0,
        }
    }
}

impl TargetReweighter {
    pub fn new(foreground_weight: f64, background_weight: f64, blur_sigma: f64) -> Result<Self> {
        let rw = Self {
            foreground_weight,
            background_weight,
            blur_sigma,
        };
        rw.validate()?;
        Ok(rw)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.background_weight > 0.0 && self.foreground_weight >= self.background_weight,
            Parameter,
            "reweighter needs foreground >= background > 0, got {} and {}",
            self.foreground_weight,
            self.background_weight
        );
        ensure!(
            self.blur_sigma >= 0.0 && self.blur_sigma.is_finite(),
            Parameter,
            "reweighter blur sigma must be non-negative"
        );
        Ok(())
    }
}

pub fn reweight(mask: &BinaryMask, rw: &TargetReweighter) -> Result<ScoreMap> {
    rw.validate()?;
    let blurred = gaussian_blur(&mask.to_scores(), rw.blur_sigma)?;
    let (fg, bg) = (rw.foreground_weight, rw.background_weight);
    // blur is a convex combination, so clamping only removes rounding
    Ok(blurred.map(|b| (bg + (fg - bg) * b).clamp(bg, fg)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmmSample {
    pub feature: FeatureMap,
    pub mask: BinaryMask,
    pub confidence: f64,
}

impl AmmSample {
    pub fn new(feature: FeatureMap, mask: BinaryMask, confidence: f64) -> Result<Self> {
        ensure!(
            (feature.height(), feature.width()) == mask.dims(),
            Dimension,
            "sample feature is {}x{}, mask is {}x{}",
            feature.height(),
            feature.width(),
            mask.height(),
            mask.width()
        );
        ensure!(
            (0.0..=1.0).contains(&confidence),
            Parameter,
            "sample confidence {confidence} outside [0, 1]"
        );
        Ok(Self {
            feature,
            mask,
            confidence,
        })
    }
}

/// Bounded FIFO of segmentation samples at a fixed square resolution. The
/// first (query) sample gets no special treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmmMemory {
    capacity: usize,
    resolution: usize,
    entries: VecDeque<AmmSample>,
}

impl AmmMemory {
    pub fn new(capacity: usize, resolution: usize) -> Result<Self> {
        ensure!(capacity > 0, Parameter, "memory capacity must be positive");
        ensure!(resolution > 0, Parameter, "memory resolution must be positive");
        Ok(Self {
            capacity,
            resolution,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &AmmSample> {
        self.entries.iter()
    }

    /// Appends `sample`, returning the evicted oldest entry if the bank was full.
    pub fn update(&mut self, sample: AmmSample) -> Result<Option<AmmSample>> {
        ensure!(
            sample.mask.dims() == (self.resolution, self.resolution),
            Dimension,
            "sample is {}x{}, memory stores {}x{}",
            sample.mask.height(),
            sample.mask.width(),
            self.resolution,
            self.resolution
        );
        if let Some(first) = self.entries.front() {
            ensure!(
                first.feature.channels() == sample.feature.channels(),
                Dimension,
                "sample has {} channels, memory holds {}",
                sample.feature.channels(),
                first.feature.channels()
            );
        }
        self.entries.push_back(sample);
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }
}

pub fn amm_update(mem: &mut AmmMemory, sample: AmmSample) -> Result<Option<AmmSample>> {
    mem.update(sample)
}

/// The segmentation filter `sigma` and its ridge weight `delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegFilter {
    pub kernel: ConvKernel,
    pub regularizer: f64,
}

impl SegFilter {
    pub fn new(kernel: ConvKernel, regularizer: f64) -> Result<Self> {
        ensure!(
            regularizer > 0.0 && regularizer.is_finite(),
            Parameter,
            "segmentation regularizer must be positive, got {regularizer}"
        );
        Ok(Self {
            kernel,
            regularizer,
        })
    }

    pub fn zeros(shape: KernelShape, regularizer: f64) -> Result<Self> {
        shape.validate()?;
        Self::new(ConvKernel::zeros(shape), regularizer)
    }

    pub fn apply(&self, feature: &FeatureMap) -> Result<FeatureMap> {
        conv2d(feature, &self.kernel)
    }
}

struct Prepared<'a> {
    feature: &'a FeatureMap,
    weight: ScoreMap,
    label: FeatureMap,
}

/// The quadratic objective over a fixed set of samples, with weights and
/// labels computed once.
pub struct SegObjective<'a> {
    samples: Vec<Prepared<'a>>,
    shape: KernelShape,
    regularizer: f64,
}

impl<'a> SegObjective<'a> {
    pub fn new(
        samples: impl IntoIterator<Item = &'a AmmSample>,
        shape: KernelShape,
        regularizer: f64,
        enc: &PseudoLabelEncoder,
        rw: &TargetReweighter,
    ) -> Result<Self> {
        shape.validate()?;
        ensure!(
            shape.out_channels == enc.out_channels(),
            Dimension,
            "filter produces {} channels, labels have {}",
            shape.out_channels,
            enc.out_channels()
        );
        let samples = samples
            .into_iter()
            .map(|s| {
                ensure!(
                    s.feature.channels() == shape.in_channels,
                    Dimension,
                    "sample has {} channels, filter expects {}",
                    s.feature.channels(),
                    shape.in_channels
                );
                Ok(Prepared {
                    feature: &s.feature,
                    weight: reweight(&s.mask, rw)?,
                    label: enc.encode(&s.mask),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            shape,
            regularizer,
        })
    }

    pub fn from_memory(
        mem: &'a AmmMemory,
        filter: &SegFilter,
        enc: &PseudoLabelEncoder,
        rw: &TargetReweighter,
    ) -> Result<Self> {
        Self::new(
            mem.entries(),
            filter.kernel.shape(),
            filter.regularizer,
            enc,
            rw,
        )
    }

    fn check(&self, sigma: &ConvKernel) -> Result<()> {
        ensure!(
            sigma.shape() == self.shape,
            Dimension,
            "filter shape {:?} does not match objective {:?}",
            sigma.shape(),
            self.shape
        );
        Ok(())
    }

    /// Per-sample weighted residual `W . (F * sigma - QM)`.
    fn residuals(&self, sigma: &ConvKernel) -> Result<Vec<FeatureMap>> {
        self.samples
            .par_iter()
            .map(|s| {
                let mut r = conv2d(s.feature, sigma)?;
                let d = self.shape.out_channels;
                let data: Vec<f64> = r
                    .data()
                    .iter()
                    .zip(s.label.data())
                    .enumerate()
                    .map(|(i, (y, q))| s.weight.data()[i / d] * (y - q))
                    .collect();
                r = FeatureMap::new(r.height(), r.width(), d, data)?;
                Ok(r)
            })
            .collect()
    }

    pub fn loss(&self, sigma: &ConvKernel) -> Result<f64> {
        self.check(sigma)?;
        let data: f64 = self.residuals(sigma)?.iter().map(FeatureMap::norm_sq).sum();
        Ok(0.5 * data + 0.5 * self.regularizer * sigma.norm_sq())
    }

    /// Loss and gradient in one pass.
    pub fn loss_and_gradient(&self, sigma: &ConvKernel) -> Result<(f64, ConvKernel)> {
        self.check(sigma)?;
        let d = self.shape.out_channels;
        let parts: Vec<(f64, ConvKernel)> = self
            .residuals(sigma)?
            .into_par_iter()
            .zip(&self.samples)
            .map(|(r, s)| {
                let norm = r.norm_sq();
                // second factor of W turns W.(..) into W^2.(..)
                let data = r
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| s.weight.data()[i / d] * v)
                    .collect();
                let back = FeatureMap::new(r.height(), r.width(), d, data)?;
                Ok((norm, kernel_gradient(s.feature, &back, self.shape)?))
            })
            .collect::<Result<_>>()?;
        let mut grad = sigma.scaled(self.regularizer);
        let mut data = 0.0;
        for (norm, g) in &parts {
            data += norm;
            grad.accumulate(g, 1.0);
        }
        Ok((0.5 * data + 0.5 * self.regularizer * sigma.norm_sq(), grad))
    }

    pub fn gradient(&self, sigma: &ConvKernel) -> Result<ConvKernel> {
        Ok(self.loss_and_gradient(sigma)?.1)
    }

    /// Exact minimizer of `t -> L(sigma - t g)`, or `None` for a vanishing
    /// gradient.
    pub fn step_size(&self, g: &ConvKernel) -> Result<Option<f64>> {
        self.check(g)?;
        exact_step(
            g,
            self.samples.iter().map(|s| (s.feature, &s.weight)),
            self.regularizer,
        )
    }
}

fn exact_step<'b>(
    g: &ConvKernel,
    samples: impl Iterator<Item = (&'b FeatureMap, &'b ScoreMap)>,
    regularizer: f64,
) -> Result<Option<f64>> {
    let g2 = g.norm_sq();
    if g2.sqrt() < GRADIENT_TOLERANCE {
        return Ok(None);
    }
    let d = g.shape().out_channels;
    let samples: Vec<_> = samples.collect();
    let curvature: Vec<f64> = samples
        .par_iter()
        .map(|(f, w)| {
            let y = conv2d(f, g)?;
            Ok(y.data()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let wv = w.data()[i / d] * v;
                    wv * wv
                })
                .sum())
        })
        .collect::<Result<_>>()?;
    let denom = curvature.iter().sum::<f64>() + regularizer * g2;
    ensure!(
        denom > 0.0,
        Parameter,
        "line search has zero curvature along the gradient"
    );
    Ok(Some(g2 / denom))
}

pub fn seg_loss(
    filter: &SegFilter,
    mem: &AmmMemory,
    enc: &PseudoLabelEncoder,
    rw: &TargetReweighter,
) -> Result<f64> {
    SegObjective::from_memory(mem, filter, enc, rw)?.loss(&filter.kernel)
}

pub fn seg_gradient(
    filter: &SegFilter,
    mem: &AmmMemory,
    enc: &PseudoLabelEncoder,
    rw: &TargetReweighter,
) -> Result<ConvKernel> {
    SegObjective::from_memory(mem, filter, enc, rw)?.gradient(&filter.kernel)
}

/// Exact line-search step along `-g`. `delta` may be zero here; `None` means
/// the gradient vanished.
pub fn steepest_step_size(
    g: &ConvKernel,
    mem: &AmmMemory,
    rw: &TargetReweighter,
    delta: f64,
) -> Result<Option<f64>> {
    ensure!(delta >= 0.0, Parameter, "negative regularizer {delta}");
    let weights = mem
        .entries()
        .map(|s| {
            ensure!(
                s.feature.channels() == g.shape().in_channels,
                Dimension,
                "sample has {} channels, gradient expects {}",
                s.feature.channels(),
                g.shape().in_channels
            );
            reweight(&s.mask, rw)
        })
        .collect::<Result<Vec<_>>>()?;
    exact_step(
        g,
        mem.entries().map(|s| &s.feature).zip(weights.iter()),
        delta,
    )
}

/// Runs up to `n_iter` exact-line-search steps. Also returns the loss before
/// the first step and after every accepted step.
///
/// In exact arithmetic every step decreases the loss; once the iterate sits at
/// the minimum to rounding precision a step can come out a few ulps worse, and
/// the run stops there instead of accepting it.
pub fn steepest_descent_trace(
    sigma0: &SegFilter,
    objective: &SegObjective<'_>,
    n_iter: usize,
) -> Result<(SegFilter, Vec<f64>)> {
    let mut sigma = sigma0.clone();
    let mut trace = Vec::with_capacity(n_iter + 1);
    if n_iter == 0 {
        return Ok((sigma, trace));
    }
    let (mut loss, mut grad) = objective.loss_and_gradient(&sigma.kernel)?;
    trace.push(loss);
    for _ in 0..n_iter {
        let Some(alpha) = objective.step_size(&grad)? else {
            break;
        };
        let candidate = sigma.kernel.add_scaled(&grad, -alpha);
        let (next_loss, next_grad) = objective.loss_and_gradient(&candidate)?;
        if next_loss > loss {
            break;
        }
        sigma.kernel = candidate;
        (loss, grad) = (next_loss, next_grad);
        trace.push(loss);
    }
    Ok((sigma, trace))
}

pub fn steepest_descent(
    sigma0: &SegFilter,
    mem: &AmmMemory,
    n_iter: usize,
    enc: &PseudoLabelEncoder,
    rw: &TargetReweighter,
) -> Result<SegFilter> {
    let objective = SegObjective::from_memory(mem, sigma0, enc, rw)?;
    Ok(steepest_descent_trace(sigma0, &objective, n_iter)?.0)
}

/// Whether a frame's segmentation is trusted enough to be stored: the mask is
/// non-empty and its mean probability reaches `threshold`.
pub fn amm_admit(prob: &ScoreMap, mask: &BinaryMask, threshold: f64) -> Result<bool> {
    ensure!(
        prob.dims() == mask.dims(),
        Dimension,
        "probability map is {}x{}, mask is {}x{}",
        prob.height(),
        prob.width(),
        mask.height(),
        mask.width()
    );
    Ok(running_mean(mask.pixels().map(|(r, c)| prob.at(r, c))).is_some_and(|m| m >= threshold))
}

/// A memory sample cut around `mask` together with the window it came from.
pub fn crop_sample_with_window(
    feature: &FeatureMap,
    mask: &BinaryMask,
    confidence: f64,
    resolution: usize,
) -> Result<(AmmSample, CropWindow, f64)> {
    ensure!(
        (feature.height(), feature.width()) == mask.dims(),
        Dimension,
        "frame is {}x{}, mask is {}x{}",
        feature.height(),
        feature.width(),
        mask.height(),
        mask.width()
    );
    let (window, scale) = mask_crop_window(mask)?;
    let sample = AmmSample::new(
        window.resample_features(feature, resolution),
        window.resample_mask(mask, resolution),
        confidence,
    )?;
    Ok((sample, window, scale))
}

pub fn crop_sample(
    feature: &FeatureMap,
    mask: &BinaryMask,
    confidence: f64,
    resolution: usize,
) -> Result<AmmSample> {
    Ok(crop_sample_with_window(feature, mask, confidence, resolution)?.0)
}
