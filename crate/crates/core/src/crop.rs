//! Square crops around a target, resampled to a fixed memory resolution.
//!
//! Coordinates are in pixel-center units: pixel `(r, c)` covers
//! `[r - 0.5, r + 0.5] x [c - 0.5, c + 0.5]`, so an `H x W` frame spans
//! `[-0.5, H - 0.5] x [-0.5, W - 0.5]`. Anything sampled outside the frame is
//! zero.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{min_bounding_rect, BBox, BinaryMask, FeatureMap, ScoreMap};

/// Side multipliers tried in order until the padded fraction is at most 0.5
/// (areas 2.25, 1.44, 1.0).
pub const CROP_LADDER: [f64; 3] = [1.5, 1.2, 1.0];

/// Largest tolerated share of a crop falling outside the frame.
pub const MAX_PADDED_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    /// `(row, col)` of the square's center.
    pub center: (f64, f64),
    pub side: f64,
}

impl CropWindow {
    pub fn new(center: (f64, f64), side: f64) -> Result<Self> {
        ensure!(
            side > 0.0 && side.is_finite(),
            Parameter,
            "crop side must be positive, got {side}"
        );
        Ok(Self { center, side })
    }

    /// Share of the window's area outside an `h x w` frame.
    pub fn padded_fraction(&self, h: usize, w: usize) -> f64 {
        let overlap = |c: f64, n: usize| {
            let lo = (c - self.side / 2.0).max(-0.5);
            let hi = (c + self.side / 2.0).min(n as f64 - 0.5);
            (hi - lo).max(0.0)
        };
        let inside = overlap(self.center.0, h) * overlap(self.center.1, w);
        (1.0 - inside / (self.side * self.side)).max(0.0)
    }

    /// Source coordinate sampled by output index `i` along an axis centered
    /// at `c`.
    #[inline]
    pub fn source_coord(&self, c: f64, i: usize, resolution: usize) -> f64 {
        c - self.side / 2.0 + (i as f64 + 0.5) * self.side / resolution as f64
    }

    pub fn resample_features(&self, x: &FeatureMap, resolution: usize) -> FeatureMap {
        let (h, w, ch) = (x.height(), x.width(), x.channels());
        let mut out = FeatureMap::zeros(resolution, resolution, ch);
        for i in 0..resolution {
            let Some((r0, r1, fr)) = bilinear_axis(self.source_coord(self.center.0, i, resolution), h)
            else {
                continue;
            };
            for j in 0..resolution {
                let Some((c0, c1, fc)) =
                    bilinear_axis(self.source_coord(self.center.1, j, resolution), w)
                else {
                    continue;
                };
                let dst = out.pixel_mut(i, j);
                let corners = [
                    (r0, c0, (1.0 - fr) * (1.0 - fc)),
                    (r0, c1, (1.0 - fr) * fc),
                    (r1, c0, fr * (1.0 - fc)),
                    (r1, c1, fr * fc),
                ];
                for (r, c, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    for (d, &s) in dst.iter_mut().zip(x.pixel(r, c)) {
                        *d += wt * s;
                    }
                }
            }
        }
        out
    }

    pub fn resample_scores(&self, x: &ScoreMap, resolution: usize) -> ScoreMap {
        let (h, w) = x.dims();
        ScoreMap::from_fn(resolution, resolution, |i, j| {
            let rows = bilinear_axis(self.source_coord(self.center.0, i, resolution), h);
            let cols = bilinear_axis(self.source_coord(self.center.1, j, resolution), w);
            match (rows, cols) {
                (Some((r0, r1, fr)), Some((c0, c1, fc))) => {
                    (1.0 - fr) * ((1.0 - fc) * x.at(r0, c0) + fc * x.at(r0, c1))
                        + fr * ((1.0 - fc) * x.at(r1, c0) + fc * x.at(r1, c1))
                }
                _ => 0.0,
            }
        })
    }

    /// Nearest-neighbour resampling.
    pub fn resample_mask(&self, m: &BinaryMask, resolution: usize) -> BinaryMask {
        let (h, w) = m.dims();
        BinaryMask::from_fn(resolution, resolution, |i, j| {
            let r = nearest_axis(self.source_coord(self.center.0, i, resolution), h);
            let c = nearest_axis(self.source_coord(self.center.1, j, resolution), w);
            matches!((r, c), (Some(r), Some(c)) if m.get(r, c))
        })
    }
}

/// Bracketing pixel indices and the interpolation weight of the upper one,
/// or `None` outside the frame.
fn bilinear_axis(t: f64, n: usize) -> Option<(usize, usize, f64)> {
    if !(-0.5..=n as f64 - 0.5).contains(&t) {
        return None;
    }
    let t = t.clamp(0.0, (n - 1) as f64);
    let lo = t.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some((lo, hi, t - lo as f64))
}

fn nearest_axis(t: f64, n: usize) -> Option<usize> {
    if !(-0.5..n as f64 - 0.5).contains(&t) {
        return None;
    }
    Some(((t + 0.5).floor() as usize).min(n - 1))
}

/// Crop window for a segmentation sample: centered on the mask centroid, side
/// `scale * max(bbox side)`, stepping down [`CROP_LADDER`] while too much of
/// the window is padding. Returns the window and the multiplier used.
pub fn mask_crop_window(mask: &BinaryMask) -> Result<(CropWindow, f64)> {
    let centroid = mask
        .centroid()
        .ok_or_else(|| crate::Error::EmptyInput("cannot crop around an empty mask".into()))?;
    let pixels: Vec<_> = mask.pixels().collect();
    let bbox = min_bounding_rect(&pixels)?;
    let extent = bbox.width().max(bbox.height()) as f64;
    let (h, w) = mask.dims();
    let mut chosen = None;
    for &scale in &CROP_LADDER {
        let window = CropWindow::new(centroid, scale * extent)?;
        chosen = Some((window, scale));
        if window.padded_fraction(h, w) <= MAX_PADDED_FRACTION {
            break;
        }
    }
    Ok(chosen.expect("ladder is non-empty"))
}

/// Crop window for a tracking sample: `1.5 x` the larger bbox side around the
/// bbox center, no ladder.
pub fn bbox_crop_window(bbox: &BBox) -> Result<CropWindow> {
    ensure!(
        bbox.x_max >= bbox.x_min && bbox.y_max >= bbox.y_min,
        EmptyInput,
        "degenerate bounding box {bbox:?}"
    );
    CropWindow::new(bbox.center(), 1.5 * bbox.width().max(bbox.height()) as f64)
}
