use std::collections::VecDeque;

use super::tensor::{BBox, BinaryMask, Pixel};
use crate::error::{ensure, Result};

/// 4-connected components of the foreground.
///
/// Components are ordered by their first pixel in row-major order and each
/// component's pixels are sorted row-major.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<Pixel>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            component.push((r, c));
            let mut visit = |j: usize| {
                if !seen[j] && mask.data()[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

/// Tightest inclusive rectangle around `component`.
pub fn min_bounding_rect(component: &[Pixel]) -> Result<BBox> {
    ensure!(
        !component.is_empty(),
        EmptyInput,
        "bounding rectangle of an empty pixel set"
    );
    let mut b = BBox {
        x_min: usize::MAX,
        y_min: usize::MAX,
        x_max: 0,
        y_max: 0,
    };
    for &(r, c) in component {
        b.x_min = b.x_min.min(c);
        b.x_max = b.x_max.max(c);
        b.y_min = b.y_min.min(r);
        b.y_max = b.y_max.max(r);
    }
    Ok(b)
}
