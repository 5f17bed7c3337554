use super::tensor::{FeatureMap, ScoreMap};
use crate::error::{ensure, Result};

/// Isotropic Gaussian bump `exp(-|p - center|^2 / (2 sigma^2))` sampled at
/// integer pixel centers. `center` is `(row, col)` and may be fractional.
pub fn gaussian_label(center: (f64, f64), sigma: f64, shape: (usize, usize)) -> Result<ScoreMap> {
    ensure!(
        sigma > 0.0 && sigma.is_finite(),
        Parameter,
        "gaussian label sigma must be positive, got {sigma}"
    );
    ensure!(
        center.0.is_finite() && center.1.is_finite(),
        Parameter,
        "gaussian label center must be finite"
    );
    let denom = 2.0 * sigma * sigma;
    Ok(ScoreMap::from_fn(shape.0, shape.1, |r, c| {
        let dr = r as f64 - center.0;
        let dc = c as f64 - center.1;
        (-(dr * dr + dc * dc) / denom).exp()
    }))
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / denom).exp()
        })
        .collect()
}

/// Separable Gaussian blur truncated at `3 sigma`, renormalized over the taps
/// that fall inside the map so constant maps stay constant up to the border.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        Parameter,
        "blur sigma must be non-negative, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let taps = gaussian_taps(sigma);
    let radius = taps.len() / 2;
    let (h, w) = map.dims();
    let pass = |get: &dyn Fn(usize, usize) -> f64, n_outer: usize, n_inner: usize| {
        let mut out = vec![0.0; n_outer * n_inner];
        for o in 0..n_outer {
            for i in 0..n_inner {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &wt) in taps.iter().enumerate() {
                    let j = i as isize + t as isize - radius as isize;
                    if j < 0 || j >= n_inner as isize {
                        continue;
                    }
                    acc += wt * get(o, j as usize);
                    norm += wt;
                }
                out[o * n_inner + i] = acc / norm;
            }
        }
        out
    };
    // rows first, then columns
    let horiz = pass(&|r, c| map.at(r, c), h, w);
    let vert = pass(&|c, r| horiz[r * w + c], w, h);
    ScoreMap::new(h, w, (0..h * w).map(|i| vert[(i % w) * h + i / w]).collect())
}

/// 3x3 mean filter over each channel, averaging only the in-bounds taps.
pub fn box_blur3(x: &FeatureMap) -> FeatureMap {
    let (h, w, ch) = (x.height(), x.width(), x.channels());
    FeatureMap::from_fn(h, w, ch, |r, c, k| {
        let (mut acc, mut n) = (0.0, 0usize);
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                acc += x.at(rr, cc, k);
                n += 1;
            }
        }
        acc / n as f64
    })
}
