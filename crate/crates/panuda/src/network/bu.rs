//! Bottom-up instance decoding: a center heatmap regressed against per-
//! instance Gaussians plus per-pixel offset vectors pointing at the instance
//! center of mass.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::core::{ClassTable, PanopticLabel};
use crate::real::Real;

pub const CENTER_SIGMA: f64 = 8.0;
pub const HEATMAP_WEIGHT: f64 = 10.0;
pub const OFFSET_WEIGHT: f64 = 0.1;

/// Regression targets for the bottom-up head.
#[derive(Clone, Debug)]
pub struct BuTargets {
    /// max-of-Gaussians center heatmap, one mode per instance
    pub heatmap: Array2<f64>,
    /// (dy, dx) from each thing pixel to its instance center
    pub offsets: Array3<f64>,
    /// pixels where the offset loss applies
    pub thing_mask: Array2<bool>,
}

pub fn bu_targets(label: &PanopticLabel, table: &ClassTable) -> BuTargets {
    let (h, w) = label.semantic.dim();
    // instance centers of mass
    let mut acc: BTreeMap<u16, (f64, f64, f64)> = BTreeMap::new();
    for ((y, x), &i) in label.instance.indexed_iter() {
        if i > 0 && table.is_thing(label.semantic[[y, x]]) {
            let e = acc.entry(i).or_insert((0.0, 0.0, 0.0));
            e.0 += y as f64;
            e.1 += x as f64;
            e.2 += 1.0;
        }
    }
    let centers: BTreeMap<u16, (f64, f64)> = acc
        .into_iter()
        .map(|(i, (sy, sx, n))| (i, (sy / n, sx / n)))
        .collect();
    let mut heatmap = Array2::<f64>::zeros((h, w));
    let mut offsets = Array3::<f64>::zeros((2, h, w));
    let mut thing_mask = Array2::<bool>::from_elem((h, w), false);
    let two_sigma2 = 2.0 * CENTER_SIGMA * CENTER_SIGMA;
    for y in 0..h {
        for x in 0..w {
            for &(cy, cx) in centers.values() {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / two_sigma2).exp();
                if v > heatmap[[y, x]] {
                    heatmap[[y, x]] = v;
                }
            }
            let i = label.instance[[y, x]];
            if i > 0 && table.is_thing(label.semantic[[y, x]]) {
                let (cy, cx) = centers[&i];
                offsets[[0, y, x]] = cy - y as f64;
                offsets[[1, y, x]] = cx - x as f64;
                thing_mask[[y, x]] = true;
            }
        }
    }
    BuTargets { heatmap, offsets, thing_mask }
}

/// Split a `[3,H,W]` bottom-up decoder output into host-side heatmap and
/// offset maps for fusion.
pub fn split_bu_output<T: Real>(out: &ndarray::ArrayD<T>) -> (Array2<f64>, Array3<f64>) {
    let s = out.shape();
    let (h, w) = (s[1], s[2]);
    let mut heatmap = Array2::<f64>::zeros((h, w));
    let mut offsets = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            heatmap[[y, x]] = out[[0, y, x]].to_f64().clamp(0.0, 1.0);
            offsets[[0, y, x]] = out[[1, y, x]].to_f64();
            offsets[[1, y, x]] = out[[2, y, x]].to_f64();
        }
    }
    (heatmap, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::toy_class_table;
    use ndarray::arr2;

    #[test]
    fn targets_peak_at_center_and_point_to_it() {
        let mut sem = Array2::from_elem((17, 17), 3u8);
        let mut inst = Array2::zeros((17, 17));
        for y in 6..11 {
            for x in 6..11 {
                sem[[y, x]] = 5;
                inst[[y, x]] = 1;
            }
        }
        let label = PanopticLabel { semantic: sem, instance: inst };
        let t = bu_targets(&label, &toy_class_table());
        assert!((t.heatmap[[8, 8]] - 1.0).abs() < 1e-12);
        assert!(t.heatmap[[0, 0]] < t.heatmap[[8, 8]]);
        // offset from (6,6) points at the center (8,8)
        assert!((t.offsets[[0, 6, 6]] - 2.0).abs() < 1e-12);
        assert!((t.offsets[[1, 6, 6]] - 2.0).abs() < 1e-12);
        assert!(t.thing_mask[[6, 6]]);
        assert!(!t.thing_mask[[0, 0]]);
        // stuff-only label -> all-zero targets
        let empty = PanopticLabel {
            semantic: arr2(&[[3u8, 3], [3, 3]]),
            instance: arr2(&[[0u16, 0], [0, 0]]),
        };
        let t = bu_targets(&empty, &toy_class_table());
        assert!(t.heatmap.iter().all(|&v| v == 0.0));
        assert!(!t.thing_mask.iter().any(|&m| m));
    }
}
