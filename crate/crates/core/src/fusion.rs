//! Merging the two branches into a mask, a box and a temporal interval.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{
    connected_components, median_filter_1d, min_bounding_rect, running_mean, BBox, BinaryMask,
    FeatureMap, ScoreMap,
};

/// Probability at or above which a pixel belongs to the mask.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Lifts the tracking score map to `out_channels` identical rectified
/// channels: `max(0, gain * HJ + bias)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEncoder {
    pub out_channels: usize,
    pub gain: f64,
    pub bias: f64,
}

impl Default for ScoreEncoder {
    fn default() -> Self {
        Self {
            out_channels: 3,
            gain: 1.0,
            bias: 0.0,
        }
    }
}

pub fn encode_score(hj: &ScoreMap, enc: &ScoreEncoder) -> Result<FeatureMap> {
    ensure!(enc.out_channels > 0, Parameter, "score encoder needs at least one channel");
    Ok(FeatureMap::from_fn(
        hj.height(),
        hj.width(),
        enc.out_channels,
        |r, c, _| (enc.gain * hj.at(r, c) + enc.bias).max(0.0),
    ))
}

pub fn fuse(a: &FeatureMap, j: &FeatureMap) -> Result<FeatureMap> {
    ensure!(
        a.same_shape(j),
        Dimension,
        "cannot fuse {}x{}x{} with {}x{}x{}",
        a.height(),
        a.width(),
        a.channels(),
        j.height(),
        j.width(),
        j.channels()
    );
    FeatureMap::new(
        a.height(),
        a.width(),
        a.channels(),
        a.data().iter().zip(j.data()).map(|(x, y)| x + y).collect(),
    )
}

/// `logistic(gain * (mean_c F - offset))`. With the defaults `(1, 0)` this is
/// the plain logistic of the channel mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub gain: f64,
    pub offset: f64,
}

impl Default for Decoder {
    fn default() -> Self {
        Self {
            gain: 1.0,
            offset: 0.0,
        }
    }
}

impl Decoder {
    pub fn decode(&self, fused: &FeatureMap) -> ScoreMap {
        let ch = fused.channels() as f64;
        ScoreMap::from_fn(fused.height(), fused.width(), |r, c| {
            let mean = fused.pixel(r, c).iter().sum::<f64>() / ch;
            logistic(self.gain * (mean - self.offset))
        })
    }
}

pub fn decode(fused: &FeatureMap) -> ScoreMap {
    Decoder::default().decode(fused)
}

/// Logistic function kept strictly inside `(0, 1)` even where `f64` would
/// round to an endpoint.
fn logistic(x: f64) -> f64 {
    // split by sign so neither branch overflows
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub prob: ScoreMap,
    pub mask: BinaryMask,
    pub bbox: Option<BBox>,
    pub s_conf: f64,
    pub frame_index: usize,
}

pub fn extract_result(prob: ScoreMap, frame_index: usize) -> SegmentationResult {
    let (h, w) = prob.dims();
    let mask = BinaryMask::from_fn(h, w, |r, c| prob.at(r, c) >= MASK_THRESHOLD);
    // components come ordered by first pixel, so keeping the first of equal
    // sizes breaks ties towards the row-major first one
    let mut largest: Option<Vec<_>> = None;
    for comp in connected_components(&mask) {
        if largest.as_ref().is_none_or(|best| comp.len() > best.len()) {
            largest = Some(comp);
        }
    }
    let bbox = largest.map(|c| min_bounding_rect(&c).expect("components are non-empty"));
    let s_conf = running_mean(mask.pixels().map(|(r, c)| prob.at(r, c))).unwrap_or(0.0);
    SegmentationResult {
        prob,
        mask,
        bbox,
        s_conf,
        frame_index,
    }
}

/// Inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalInterval {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl TemporalInterval {
    pub fn new(start_frame: usize, end_frame: usize) -> Result<Self> {
        ensure!(
            start_frame <= end_frame,
            Parameter,
            "interval start {start_frame} after end {end_frame}"
        );
        Ok(Self {
            start_frame,
            end_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    /// Temporal IoU of two inclusive ranges.
    pub fn iou(&self, other: &TemporalInterval) -> f64 {
        let lo = self.start_frame.max(other.start_frame);
        let hi = self.end_frame.min(other.end_frame);
        if lo > hi {
            return 0.0;
        }
        let inter = (hi - lo + 1) as f64;
        inter / ((self.len() + other.len()) as f64 - inter)
    }
}

/// The last run of frames whose median-filtered score reaches
/// `ratio * max`; `None` when every filtered score is zero.
pub fn temporal_localize(
    s_conf: &[f64],
    window: usize,
    ratio: f64,
) -> Result<Option<TemporalInterval>> {
    ensure!(
        ratio > 0.0 && ratio <= 1.0,
        Parameter,
        "threshold ratio must be in (0, 1], got {ratio}"
    );
    let filtered = median_filter_1d(s_conf, window)?;
    let peak = filtered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return Ok(None);
    }
    let theta = ratio * peak;
    let end = filtered
        .iter()
        .rposition(|&v| v >= theta)
        .expect("the peak itself clears the threshold");
    let start = filtered[..end]
        .iter()
        .rposition(|&v| v < theta)
        .map_or(0, |i| i + 1);
    Ok(Some(TemporalInterval::new(start, end)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_examples() {
        let neg = ScoreMap::filled(2, 2, -0.3);
        assert_eq!(encode_score(&neg, &ScoreEncoder::default()).unwrap().norm_sq(), 0.0);
        let pos = ScoreMap::new(1, 2, vec![0.3, 1.5]).unwrap();
        let e = encode_score(&pos, &ScoreEncoder::default()).unwrap();
        assert_eq!(e.pixel(0, 1), &[1.5, 1.5, 1.5]);
        let gained = ScoreEncoder {
            gain: 2.0,
            ..Default::default()
        };
        assert_eq!(encode_score(&pos, &gained).unwrap().at(0, 0, 2), 0.6);
    }

    #[test]
    fn fuse_identity_and_mismatch() {
        let a = FeatureMap::from_fn(2, 3, 2, |r, c, k| (r + c * k) as f64);
        assert_eq!(fuse(&a, &FeatureMap::zeros(2, 3, 2)).unwrap(), a);
        assert!(fuse(&a, &FeatureMap::zeros(2, 3, 1)).is_err());
    }

    #[test]
    fn decode_limits() {
        let z = decode(&FeatureMap::zeros(2, 2, 3));
        assert!(z.data().iter().all(|&v| v == 0.5));
        let big = decode(&FeatureMap::from_fn(1, 1, 2, |_, _, _| 800.0));
        assert!(big.at(0, 0) < 1.0 && big.at(0, 0) > 1.0 - 1e-15);
        let small = decode(&FeatureMap::from_fn(1, 1, 2, |_, _, _| -800.0));
        assert!(small.at(0, 0) > 0.0 && small.at(0, 0) < 1e-300);
    }

    #[test]
    fn below_threshold_gives_empty_result() {
        let r = extract_result(ScoreMap::filled(4, 4, 0.4), 3);
        assert!(r.mask.is_empty());
        assert_eq!(r.bbox, None);
        assert_eq!(r.s_conf, 0.0);
        assert_eq!(r.frame_index, 3);
    }

    #[test]
    fn block_result() {
        let p = ScoreMap::from_fn(5, 5, |r, c| if (1..3).contains(&r) && (2..4).contains(&c) { 0.9 } else { 0.1 });
        let r = extract_result(p, 0);
        assert_eq!(
            r.bbox,
            Some(BBox {
                x_min: 2,
                y_min: 1,
                x_max: 3,
                y_max: 2
            })
        );
        assert!((r.s_conf - 0.9).abs() < 1e-15);
    }

    #[test]
    fn equal_components_pick_first() {
        let p = ScoreMap::from_fn(3, 5, |r, c| if r == 1 && (c == 0 || c == 4) { 1.0 } else { 0.0 });
        let r = extract_result(p, 0);
        assert_eq!(r.bbox.unwrap().x_min, 0);
    }

    #[test]
    fn localize_basic() {
        assert_eq!(temporal_localize(&[0.0; 10], 5, 0.8).unwrap(), None);
        let mut s = vec![0.0; 60];
        for v in &mut s[10..=20] {
            *v = 1.0;
        }
        for v in &mut s[40..=50] {
            *v = 1.0;
        }
        assert_eq!(
            temporal_localize(&s, 5, 0.8).unwrap(),
            Some(TemporalInterval::new(40, 50).unwrap())
        );
    }

    #[test]
    fn interval_iou() {
        let a = TemporalInterval::new(0, 9).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&TemporalInterval::new(0, 4).unwrap()), 0.5);
        assert_eq!(a.iou(&TemporalInterval::new(20, 30).unwrap()), 0.0);
        assert!(TemporalInterval::new(3, 2).is_err());
    }
}
