//! One query, end to end: seed both memories from the query, walk the video
//! frame by frame, and turn the per-frame results into a temporal interval
//! and, given cameras, a 3D displacement.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::amm::{
    amm_admit, crop_sample_with_window, steepest_descent_trace, AmmMemory, AmmSample,
    PseudoLabelEncoder, SegFilter, SegObjective, TargetReweighter,
};
use crate::error::{ensure, Error, Result};
use crate::fusion::{
    encode_score, extract_result, fuse, temporal_localize, Decoder, ScoreEncoder,
    SegmentationResult, TemporalInterval,
};
use crate::geo3d::{
    aggregate, align_sim3, backproject, geometric_confidence, relative_displacement,
    semantic_confidence_from_probs, CameraFrame, SemanticWeights, ViewContribution,
};
use crate::glm::{
    glm_make_dynamic_sample, glm_make_sample_with_window, glm_update_source,
    optimize_filter_trace, GlmMemory, SampleKind, SpatialWeightFn, TrackFilter, TrackObjective,
};
use crate::numerics::{box_blur3, min_bounding_rect, BBox, BinaryMask, FeatureMap, KernelShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clip_length: usize,
    /// Every frame before this index is an update frame.
    pub dense_update_horizon: usize,
    /// After the horizon, only multiples of this are update frames.
    pub update_stride: usize,
    pub amm_iters_init: usize,
    pub amm_iters_update: usize,
    pub glm_iters_init: usize,
    pub glm_iters_update: usize,
    pub admit_threshold: f64,
    pub halt_threshold: f64,
    pub halt_window: usize,
    pub temporal_ratio: f64,
    pub median_window: usize,
    pub capacity: usize,
    pub zeta: f64,
    pub lambda_thr: f64,
    pub semantic_weights: SemanticWeights,
    /// Side of the square memory samples.
    pub resolution: usize,
    pub seg_kernel_size: usize,
    pub seg_regularizer: f64,
    pub track_kernel_size: usize,
    pub track_regularizer: f64,
    pub reweighter: TargetReweighter,
    pub spatial_weight: SpatialWeightFn,
    pub score_encoder: ScoreEncoder,
    pub decoder: Decoder,
    pub glm_source_window: usize,
    /// Ablation switch: when false both memories stay at their initial state.
    pub updates_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clip_length: 32,
            dense_update_horizon: 100,
            update_stride: 25,
            amm_iters_init: 10,
            amm_iters_update: 3,
            glm_iters_init: 10,
            glm_iters_update: 3,
            admit_threshold: 0.6,
            halt_threshold: 0.4,
            halt_window: 25,
            temporal_ratio: 0.8,
            median_window: 5,
            capacity: 50,
            zeta: 1.0,
            lambda_thr: 0.5,
            semantic_weights: SemanticWeights::default(),
            resolution: 16,
            seg_kernel_size: 3,
            seg_regularizer: 0.01,
            track_kernel_size: 3,
            track_regularizer: 0.1,
            reweighter: TargetReweighter::default(),
            spatial_weight: SpatialWeightFn::default(),
            score_encoder: ScoreEncoder::default(),
            // logistic(0) sits exactly on the mask threshold, so background
            // needs a negative margin
            decoder: Decoder {
                gain: 10.0,
                offset: 0.6,
            },
            glm_source_window: 25,
            updates_enabled: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("admit_threshold", self.admit_threshold),
            ("halt_threshold", self.halt_threshold),
            ("temporal_ratio", self.temporal_ratio),
            ("lambda_thr", self.lambda_thr),
        ] {
            ensure!((0.0..=1.0).contains(&v), Parameter, "{name} = {v} outside [0, 1]");
        }
        for (name, v) in [
            ("clip_length", self.clip_length),
            ("update_stride", self.update_stride),
            ("halt_window", self.halt_window),
            ("capacity", self.capacity),
            ("resolution", self.resolution),
            ("glm_source_window", self.glm_source_window),
        ] {
            ensure!(v > 0, Parameter, "{name} must be positive");
        }
        ensure!(
            self.median_window % 2 == 1,
            Parameter,
            "median_window must be odd, got {}",
            self.median_window
        );
        ensure!(self.zeta > 0.0, Parameter, "zeta must be positive");
        ensure!(
            self.score_encoder.out_channels == 3,
            Parameter,
            "score encoder must match the 3 pseudo-label channels"
        );
        ensure!(
            self.seg_regularizer > 0.0 && self.track_regularizer > 0.0,
            Parameter,
            "regularizers must be positive"
        );
        self.semantic_weights.validate()?;
        self.reweighter.validate()?;
        self.spatial_weight.validate()?;
        KernelShape::new(self.seg_kernel_size, 1, 1)?;
        KernelShape::new(self.track_kernel_size, 1, 1)?;
        Ok(())
    }

    pub fn is_update_frame(&self, frame_index: usize) -> bool {
        frame_index < self.dense_update_horizon || frame_index % self.update_stride == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub feature: FeatureMap,
    pub mask: BinaryMask,
    pub frame_index: usize,
}

/// Memory and filter state; snapshotted after initialization so a halt can
/// restore it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub amm: AmmMemory,
    pub glm: GlmMemory,
    pub seg: SegFilter,
    pub track: TrackFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub frame_index: usize,
    pub glm_source: SampleKind,
    /// Loss before and after each accepted iteration.
    pub seg_losses: Vec<f64>,
    pub track_losses: Vec<f64>,
}

/// Compact per-frame result kept in the track file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub bbox: Option<BBox>,
    pub s_conf: f64,
    /// Mask centroid as `(row, col)`.
    pub centroid: Option<(f64, f64)>,
    /// Probabilities of the mask pixels in row-major order.
    pub mask_probs: Vec<f64>,
}

impl FrameRecord {
    pub fn from_result(r: &SegmentationResult) -> Self {
        Self {
            frame_index: r.frame_index,
            bbox: r.bbox,
            s_conf: r.s_conf,
            centroid: r.mask.centroid(),
            mask_probs: r.mask.pixels().map(|(y, x)| r.prob.at(y, x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDisplacement {
    pub frame_index: usize,
    pub displacement: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frames: Vec<FrameRecord>,
    pub interval: Option<TemporalInterval>,
    pub peak_scores: Vec<f64>,
    pub update_events: Vec<UpdateEvent>,
    pub halted_at: Option<usize>,
    pub world_point: Option<Vector3<f64>>,
    pub displacements: Vec<FrameDisplacement>,
}

impl TrackOutput {
    pub fn update_frames(&self) -> Vec<usize> {
        self.update_events.iter().map(|e| e.frame_index).collect()
    }

    pub fn frame(&self, index: usize) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_index == index)
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    encoder: PseudoLabelEncoder,
    channels: usize,
    state: ModelState,
    initial: ModelState,
    halted_at: Option<usize>,
    frames: Vec<FrameRecord>,
    peaks: Vec<f64>,
    events: Vec<UpdateEvent>,
}

fn hflip(s: &AmmSample) -> Result<AmmSample> {
    let (h, w, ch) = (s.feature.height(), s.feature.width(), s.feature.channels());
    AmmSample::new(
        FeatureMap::from_fn(h, w, ch, |r, c, k| s.feature.at(r, w - 1 - c, k)),
        BinaryMask::from_fn(h, w, |r, c| s.mask.get(r, w - 1 - c)),
        s.confidence,
    )
}

fn translate(s: &AmmSample, dr: usize, dc: usize) -> Result<AmmSample> {
    let (h, w, ch) = (s.feature.height(), s.feature.width(), s.feature.channels());
    AmmSample::new(
        FeatureMap::from_fn(h, w, ch, |r, c, k| {
            if r >= dr && c >= dc {
                s.feature.at(r - dr, c - dc, k)
            } else {
                0.0
            }
        }),
        BinaryMask::from_fn(h, w, |r, c| r >= dr && c >= dc && s.mask.get(r - dr, c - dc)),
        s.confidence,
    )
}

fn blurred(s: &AmmSample) -> Result<AmmSample> {
    AmmSample::new(box_blur3(&s.feature), s.mask.clone(), s.confidence)
}

impl Pipeline {
    pub fn initialize(query: &QuerySpec, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        ensure!(!query.mask.is_empty(), EmptyInput, "query mask is empty");
        ensure!(
            (query.feature.height(), query.feature.width()) == query.mask.dims(),
            Dimension,
            "query feature and mask sizes differ"
        );
        let encoder = PseudoLabelEncoder::default();
        let channels = query.feature.channels();
        let (base, _, _) = crop_sample_with_window(&query.feature, &query.mask, 1.0, cfg.resolution)?;
        let augmented = [hflip(&base)?, translate(&base, 2, 2)?, blurred(&base)?];
        let mut amm = AmmMemory::new(cfg.capacity, cfg.resolution)?;
        // query first so FIFO evicts it first
        amm.update(base)?;
        for s in augmented {
            amm.update(s)?;
        }

        let pixels: Vec<_> = query.mask.pixels().collect();
        let bbox = min_bounding_rect(&pixels)?;
        let (static_entry, _) = glm_make_sample_with_window(
            &query.feature,
            &bbox,
            &query.mask.to_scores(),
            cfg.resolution,
            SampleKind::Static,
        )?;
        let glm = GlmMemory::new(static_entry, cfg.capacity)?;

        let seg0 = SegFilter::zeros(
            KernelShape::new(cfg.seg_kernel_size, channels, encoder.out_channels())?,
            cfg.seg_regularizer,
        )?;
        let objective = SegObjective::from_memory(&amm, &seg0, &encoder, &cfg.reweighter)?;
        let (seg, _) = steepest_descent_trace(&seg0, &objective, cfg.amm_iters_init)?;

        let track0 = TrackFilter::zeros(cfg.track_kernel_size, channels, cfg.track_regularizer)?;
        let objective = TrackObjective::from_memory(&glm, &track0, &cfg.spatial_weight)?;
        let (track, _) = optimize_filter_trace(&track0, &objective, cfg.glm_iters_init)?;

        let state = ModelState {
            amm,
            glm,
            seg,
            track,
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            channels,
            initial: state.clone(),
            state,
            halted_at: None,
            frames: Vec::new(),
            peaks: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn initial_state(&self) -> &ModelState {
        &self.initial
    }

    pub fn halted_at(&self) -> Option<usize> {
        self.halted_at
    }

    pub fn update_events(&self) -> &[UpdateEvent] {
        &self.events
    }

    /// Runs both branches on one frame without touching any state.
    pub fn segment(&self, feature: &FeatureMap, frame_index: usize) -> Result<(SegmentationResult, f64)> {
        ensure!(
            feature.channels() == self.channels,
            Dimension,
            "frame has {} channels, query had {}",
            feature.channels(),
            self.channels
        );
        let hj = self.state.track.apply(feature)?;
        let fa = self.state.seg.apply(feature)?;
        let fj = encode_score(&hj, &self.cfg.score_encoder)?;
        let prob = self.cfg.decoder.decode(&fuse(&fa, &fj)?);
        Ok((extract_result(prob, frame_index), hj.max()))
    }

    pub fn step_frame(&mut self, feature: &FeatureMap, frame_index: usize) -> Result<SegmentationResult> {
        let (result, peak) = self.segment(feature, frame_index)?;
        self.frames.push(FrameRecord::from_result(&result));
        self.peaks.push(peak);

        if self.halted_at.is_none() && self.frames.len() >= self.cfg.halt_window {
            let recent = &self.frames[self.frames.len() - self.cfg.halt_window..];
            let mean = crate::numerics::running_mean(recent.iter().map(|f| f.s_conf))
                .expect("window is non-empty");
            if mean < self.cfg.halt_threshold {
                self.halted_at = Some(frame_index);
                self.state = self.initial.clone();
            }
        }

        if self.halted_at.is_none()
            && self.cfg.updates_enabled
            && self.cfg.is_update_frame(frame_index)
            && amm_admit(&result.prob, &result.mask, self.cfg.admit_threshold)?
        {
            self.update(feature, &result)?;
        }
        Ok(result)
    }

    fn update(&mut self, feature: &FeatureMap, result: &SegmentationResult) -> Result<()> {
        let cfg = &self.cfg;
        let (sample, _, _) =
            crop_sample_with_window(feature, &result.mask, result.s_conf, cfg.resolution)?;
        self.state.amm.update(sample)?;
        let objective = SegObjective::from_memory(
            &self.state.amm,
            &self.state.seg,
            &self.encoder,
            &cfg.reweighter,
        )?;
        let (seg, seg_losses) =
            steepest_descent_trace(&self.state.seg, &objective, cfg.amm_iters_update)?;
        self.state.seg = seg;

        let source = glm_update_source(&self.peaks, cfg.glm_source_window)?;
        let bbox = result.bbox.expect("admitted results have a mask");
        let track_losses = match source {
            SampleKind::Dynamic => {
                let snapshot =
                    glm_make_dynamic_sample(feature, &bbox, &result.prob, cfg.resolution)?;
                self.state.glm.push_dynamic(snapshot)?;
                let objective = TrackObjective::from_memory(
                    &self.state.glm,
                    &self.state.track,
                    &cfg.spatial_weight,
                )?;
                let (track, losses) =
                    optimize_filter_trace(&self.state.track, &objective, cfg.glm_iters_update)?;
                self.state.track = track;
                losses
            }
            SampleKind::Static => {
                let objective = TrackObjective::new(
                    [self.state.glm.static_entry()],
                    self.state.track.kernel.shape(),
                    self.state.track.regularizer,
                    &cfg.spatial_weight,
                )?;
                let (track, losses) =
                    optimize_filter_trace(&self.state.track, &objective, cfg.glm_iters_update)?;
                self.state.track = track;
                losses
            }
        };
        self.events.push(UpdateEvent {
            frame_index: result.frame_index,
            glm_source: source,
            seg_losses,
            track_losses,
        });
        Ok(())
    }

    pub fn finalize_2d(&self) -> Result<TrackOutput> {
        ensure!(!self.frames.is_empty(), EmptyInput, "no frames were processed");
        let s_conf: Vec<f64> = self.frames.iter().map(|f| f.s_conf).collect();
        let local = temporal_localize(&s_conf, self.cfg.median_window, self.cfg.temporal_ratio)?;
        // localization works on positions; map them back to frame indices
        let interval = local
            .map(|iv| {
                TemporalInterval::new(
                    self.frames[iv.start_frame].frame_index,
                    self.frames[iv.end_frame].frame_index,
                )
            })
            .transpose()?;
        Ok(TrackOutput {
            frames: self.frames.clone(),
            interval,
            peak_scores: self.peaks.clone(),
            update_events: self.events.clone(),
            halted_at: self.halted_at,
            world_point: None,
            displacements: Vec::new(),
        })
    }
}

/// Processes `frames` (feature, frame index) in clips of `cfg.clip_length`;
/// memory carries over between clips.
pub fn run_video<'a>(
    query: &QuerySpec,
    frames: impl IntoIterator<Item = (&'a FeatureMap, usize)>,
    cfg: &PipelineConfig,
) -> Result<TrackOutput> {
    let mut pipeline = Pipeline::initialize(query, cfg)?;
    let frames: Vec<_> = frames.into_iter().collect();
    for clip in frames.chunks(cfg.clip_length) {
        for &(feature, index) in clip {
            pipeline.step_frame(feature, index)?;
        }
    }
    pipeline.finalize_2d()
}

/// Matched points: `reconstruction` frame first, `benchmark` frame second.
pub type AlignmentPair = (Vector3<f64>, Vector3<f64>);

/// Lifts the 2D track into 3D. `cameras[i]` belongs to frame index `i`;
/// `None` marks a frame without a usable pose.
pub fn finalize_3d(
    track: &TrackOutput,
    cameras: &[Option<CameraFrame>],
    pairs: &[AlignmentPair],
    cfg: &PipelineConfig,
) -> Result<TrackOutput> {
    let interval = track
        .interval
        .ok_or_else(|| Error::NoDetection("the 2D track has no temporal interval".into()))?;
    let (src, dst): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
    let t_eta = align_sim3(&src, &dst)?;

    let mut contributions = Vec::new();
    let mut usable = Vec::new();
    for frame in track.frames.iter().filter(|f| interval.contains(f.frame_index)) {
        let (Some((row, col)), Some(Some(camera))) = (frame.centroid, cameras.get(frame.frame_index))
        else {
            continue;
        };
        let point = match backproject(camera, col, row, &t_eta) {
            Ok(p) => p,
            Err(Error::InvalidSample(_)) => continue,
            Err(e) => return Err(e),
        };
        let s_conf =
            semantic_confidence_from_probs(&frame.mask_probs, cfg.lambda_thr, &cfg.semantic_weights)?;
        let g_conf = geometric_confidence(camera.uncertainty_at(col, row)?, cfg.zeta)?;
        contributions.push(ViewContribution::new(point, s_conf, g_conf, frame.frame_index));
        usable.push((frame.frame_index, camera));
    }
    ensure!(
        !contributions.is_empty(),
        NoDetection,
        "no interval frame has a valid camera and depth at its mask centroid"
    );
    let world = aggregate(&contributions)?;
    let displacements = usable
        .into_iter()
        .map(|(frame_index, camera)| FrameDisplacement {
            frame_index,
            displacement: relative_displacement(camera, &world, &t_eta),
        })
        .collect();
    Ok(TrackOutput {
        world_point: Some(world),
        displacements,
        ..track.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
        let bad = PipelineConfig {
            median_window: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn update_cadence() {
        let cfg = PipelineConfig::default();
        let frames: Vec<usize> = (0..=200).filter(|&i| cfg.is_update_frame(i)).collect();
        let mut expected: Vec<usize> = (0..100).collect();
        expected.extend([100, 125, 150, 175, 200]);
        assert_eq!(frames, expected);
    }

    #[test]
    fn empty_query_rejected() {
        let q = QuerySpec {
            feature: FeatureMap::zeros(8, 8, 2),
            mask: BinaryMask::empty(8, 8),
            frame_index: 0,
        };
        assert!(matches!(
            Pipeline::initialize(&q, &PipelineConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn augmentations() {
        let s = AmmSample::new(
            FeatureMap::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64),
            BinaryMask::from_pixels(4, 4, &[(0, 0)]).unwrap(),
            1.0,
        )
        .unwrap();
        let f = hflip(&s).unwrap();
        assert!(f.mask.get(0, 3));
        assert_eq!(f.feature.at(0, 3, 0), 0.0);
        let t = translate(&s, 2, 2).unwrap();
        assert!(t.mask.get(2, 2));
        assert_eq!(t.feature.at(0, 0, 0), 0.0);
        assert_eq!(t.feature.at(3, 3, 0), 5.0);
        assert_eq!(blurred(&s).unwrap().mask, s.mask);
    }
}
