//! Panoptic fusion: combine a semantic class map with either top-down
//! instance masks or bottom-up center/offset maps into a coherent
//! [`PanopticLabel`].

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::core::{ClassTable, InstancePrediction, PanopticLabel, VOID_CLASS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// minimum detection score for an instance to participate
    pub score_threshold: f64,
    /// keep at most this many instances per image
    pub max_instances: usize,
    /// minimum heatmap value for a center candidate
    pub center_threshold: f64,
    /// square max-pool window for center non-maximum suppression
    pub nms_kernel: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            score_threshold: 0.95,
            max_instances: 200,
            center_threshold: 0.1,
            nms_kernel: 7,
        }
    }
}

/// Filter by score threshold, order by descending score (input order breaks
/// ties, so the result is deterministic), and cap at `max_instances`.
pub fn select_instances(
    preds: Vec<InstancePrediction>,
    cfg: &FusionConfig,
) -> Vec<InstancePrediction> {
    let mut kept: Vec<(usize, InstancePrediction)> = preds
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.score >= cfg.score_threshold)
        .collect();
    kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    kept.truncate(cfg.max_instances);
    kept.into_iter().map(|(_, p)| p).collect()
}

/// Fuse a semantic argmax map with top-down instance masks.
///
/// Instances claim pixels in score order; each pixel belongs to at most one
/// instance. An instance's class is the majority thing class of the semantic
/// map under its claimed pixels (ties to the lowest class id), falling back
/// to the detection class when no thing pixels are covered. Thing pixels
/// claimed by no instance become void.
pub fn fuse_topdown(
    semantic: &Array2<u8>,
    instances: &[InstancePrediction],
    table: &ClassTable,
    cfg: &FusionConfig,
) -> PanopticLabel {
    let (h, w) = semantic.dim();
    let selected = select_instances(instances.to_vec(), cfg);
    let mut out_sem = Array2::<u8>::from_elem((h, w), VOID_CLASS);
    let mut out_inst = Array2::<u16>::zeros((h, w));
    let mut claimed = Array2::<bool>::from_elem((h, w), false);
    let mut next_id: u16 = 1;
    for p in &selected {
        assert_eq!(p.mask.dim(), (h, w), "fuse_topdown: mask shape mismatch");
        let pixels: Vec<(usize, usize)> = p
            .mask
            .indexed_iter()
            .filter(|(pos, &m)| m && !claimed[*pos])
            .map(|(pos, _)| pos)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let mut votes = vec![0usize; table.len()];
        for &(y, x) in &pixels {
            let c = semantic[[y, x]];
            if table.is_thing(c) {
                votes[c as usize] += 1;
            }
        }
        let class_id = votes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c as u8)
            .unwrap_or(p.class_id);
        for &(y, x) in &pixels {
            claimed[[y, x]] = true;
            out_sem[[y, x]] = class_id;
            out_inst[[y, x]] = next_id;
        }
        next_id += 1;
    }
    for ((y, x), &c) in semantic.indexed_iter() {
        if claimed[[y, x]] {
            continue;
        }
        if table.is_stuff(c) {
            out_sem[[y, x]] = c;
        }
        // unclaimed thing pixels stay void
    }
    PanopticLabel {
        semantic: out_sem,
        instance: out_inst,
    }
}

/// Center candidates: heatmap value at or above the threshold and equal to
/// the max over the NMS window, keeping the `max_instances` strongest.
/// Returned in (value desc, row-major) order.
pub fn find_centers(heatmap: &Array2<f64>, cfg: &FusionConfig) -> Vec<(usize, usize, f64)> {
    let (h, w) = heatmap.dim();
    let r = cfg.nms_kernel / 2;
    let mut centers = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heatmap[[y, x]];
            if v < cfg.center_threshold {
                continue;
            }
            let mut local_max = f64::NEG_INFINITY;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    local_max = local_max.max(heatmap[[yy, xx]]);
                }
            }
            if v == local_max {
                centers.push((y, x, v));
            }
        }
    }
    centers.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    centers.truncate(cfg.max_instances);
    centers
}

/// Bottom-up fusion: every thing pixel votes for the center closest (in
/// Euclidean distance, ties to the lowest center index) to its offset-shifted
/// position. Instance ids follow center order. With no centers, thing pixels
/// become void.
pub fn group_centers(
    semantic: &Array2<u8>,
    heatmap: &Array2<f64>,
    offsets: &Array3<f64>,
    table: &ClassTable,
    cfg: &FusionConfig,
) -> PanopticLabel {
    let (h, w) = semantic.dim();
    assert_eq!(heatmap.dim(), (h, w), "group_centers: heatmap shape mismatch");
    assert_eq!(offsets.dim(), (2, h, w), "group_centers: offsets shape mismatch");
    let centers = find_centers(heatmap, cfg);
    let mut out_sem = semantic.clone();
    let mut out_inst = Array2::<u16>::zeros((h, w));
    for ((y, x), &c) in semantic.indexed_iter() {
        if !table.is_thing(c) {
            continue;
        }
        if centers.is_empty() {
            out_sem[[y, x]] = VOID_CLASS;
            continue;
        }
        let py = y as f64 + offsets[[0, y, x]];
        let px = x as f64 + offsets[[1, y, x]];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &(cy, cx, _)) in centers.iter().enumerate() {
            let d = (py - cy as f64).powi(2) + (px - cx as f64).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        out_inst[[y, x]] = (best + 1) as u16;
    }
    // a grouped instance must sit on one semantic class; resolve by majority
    // vote per instance id (ties to the lowest class id)
    let mut votes: Vec<Vec<usize>> = vec![vec![0; table.len()]; centers.len() + 1];
    for ((y, x), &i) in out_inst.indexed_iter() {
        if i > 0 {
            votes[i as usize][out_sem[[y, x]] as usize] += 1;
        }
    }
    let winner: Vec<u8> = votes
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c as u8)
                .unwrap_or(0)
        })
        .collect();
    for ((y, x), &i) in out_inst.indexed_iter() {
        if i > 0 {
            out_sem[[y, x]] = winner[i as usize];
        }
    }
    // compress instance ids so they are contiguous from 1
    let mut seen: Vec<u16> = out_inst.iter().copied().filter(|&i| i > 0).collect();
    seen.sort_unstable();
    seen.dedup();
    let remap: std::collections::BTreeMap<u16, u16> = seen
        .iter()
        .enumerate()
        .map(|(n, &old)| (old, (n + 1) as u16))
        .collect();
    out_inst.mapv_inplace(|i| if i == 0 { 0 } else { remap[&i] });
    PanopticLabel {
        semantic: out_sem,
        instance: out_inst,
    }
}
