//! 8-connected component labeling of binary masks.

use std::collections::VecDeque;

use crate::preprocess::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub area: usize,
    pub bbox: BBox,
    /// Mean pixel coordinate as `[x, y]`.
    pub centroid: [f64; 2],
}

/// Components of `mask` in raster order of their first pixel.
pub fn components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    assert_eq!(mask.len(), width * height, "labeling: mask does not match {width}x{height}");
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut area, mut sx, mut sy) = (0usize, 0u64, 0u64);
        let (x0, y0) = (start % width, start / width);
        let mut bbox = BBox { x0, y0, x1: x0, y1: y0 };
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            area += 1;
            sx += x as u64;
            sy += y as u64;
            bbox.x0 = bbox.x0.min(x);
            bbox.x1 = bbox.x1.max(x);
            bbox.y0 = bbox.y0.min(y);
            bbox.y1 = bbox.y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let j = ny * width + nx;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(Component {
            area,
            bbox,
            centroid: [sx as f64 / area as f64, sy as f64 / area as f64],
        });
    }
    out
}

/// The component with the most pixels; ties keep the earliest in raster order.
pub fn largest(mask: &[bool], width: usize, height: usize) -> Option<Component> {
    components(mask, width, height).into_iter().reduce(|best, c| if c.area > best.area { c } else { best })
}
