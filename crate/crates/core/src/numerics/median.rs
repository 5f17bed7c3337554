use crate::error::{ensure, Result};

/// Sliding median with an odd `window`. Near the ends the window shrinks to
/// the neighbours that exist; an even-sized truncated window takes the mean of
/// its two middle values.
pub fn median_filter_1d(seq: &[f64], window: usize) -> Result<Vec<f64>> {
    ensure!(
        window % 2 == 1,
        Parameter,
        "median window must be odd and positive, got {window}"
    );
    ensure!(!seq.is_empty(), EmptyInput, "median filter of an empty sequence");
    let half = window / 2;
    let mut buf = Vec::with_capacity(window);
    Ok((0..seq.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(seq.len());
            buf.clear();
            buf.extend_from_slice(&seq[lo..hi]);
            buf.sort_by(f64::total_cmp);
            let n = buf.len();
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            }
        })
        .collect())
}
