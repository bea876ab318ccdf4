//! Panoptic quality (PQ/SQ/RQ), semantic mIoU, and instance mask AP, with
//! dataset-wide accumulation and a serializable report.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::core::{
    extract_segments, ClassKind, ClassTable, InstancePrediction, PanopticLabel, Segment,
    VOID_CLASS,
};

/// One accepted match between a ground-truth and a predicted segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMatch {
    pub gt_idx: usize,
    pub pred_idx: usize,
    pub iou: f64,
}

fn pixel_set(seg: &Segment) -> HashSet<(usize, usize)> {
    seg.pixels.iter().copied().collect()
}

/// IoU between a prediction and a ground-truth segment, after removing void
/// ground-truth pixels from the prediction.
fn seg_iou(gt: &HashSet<(usize, usize)>, pred: &[(usize, usize)], void: &HashSet<(usize, usize)>) -> f64 {
    let mut inter = 0usize;
    let mut pred_valid = 0usize;
    for p in pred {
        if void.contains(p) {
            continue;
        }
        pred_valid += 1;
        if gt.contains(p) {
            inter += 1;
        }
    }
    let union = gt.len() + pred_valid - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Match predicted segments to ground-truth segments of the same class with
/// IoU > 0.5. Because segments within one label partition the pixels, any
/// IoU > 0.5 pair is automatically unique on both sides; uniqueness is still
/// enforced defensively. `void_pixels` are removed from predictions before
/// the IoU is computed.
pub fn match_segments(
    gt: &[Segment],
    pred: &[Segment],
    void_pixels: &HashSet<(usize, usize)>,
) -> Vec<SegmentMatch> {
    let gt_sets: Vec<HashSet<(usize, usize)>> = gt.iter().map(pixel_set).collect();
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if gt_used[gi] || g.class_id != p.class_id {
                continue;
            }
            let iou = seg_iou(&gt_sets[gi], &p.pixels, void_pixels);
            if iou > 0.5 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            gt_used[gi] = true;
            matches.push(SegmentMatch { gt_idx: gi, pred_idx: pi, iou });
        }
    }
    matches
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassPQ {
    pub class_id: u8,
    pub name: String,
    pub kind: ClassKind,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub iou_sum: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PQReport {
    pub per_class: Vec<ClassPQ>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
}

/// Accumulates PQ statistics over many images before finalizing a report.
#[derive(Clone, Debug)]
pub struct PQAccumulator {
    table: ClassTable,
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_count: Vec<usize>,
    iou_sum: Vec<f64>,
}

impl PQAccumulator {
    pub fn new(table: &ClassTable) -> Self {
        let c = table.len();
        PQAccumulator {
            table: table.clone(),
            tp: vec![0; c],
            fp: vec![0; c],
            fn_count: vec![0; c],
            iou_sum: vec![0.0; c],
        }
    }

    pub fn add_image(&mut self, gt: &PanopticLabel, pred: &PanopticLabel) {
        let gt_segs = extract_segments(gt);
        let pred_segs = extract_segments(pred);
        let void: HashSet<(usize, usize)> = gt
            .semantic
            .indexed_iter()
            .filter(|(_, &c)| c == VOID_CLASS)
            .map(|(p, _)| p)
            .collect();
        let matches = match_segments(&gt_segs, &pred_segs, &void);
        let mut gt_matched = vec![false; gt_segs.len()];
        let mut pred_matched = vec![false; pred_segs.len()];
        for m in &matches {
            gt_matched[m.gt_idx] = true;
            pred_matched[m.pred_idx] = true;
            let c = gt_segs[m.gt_idx].class_id as usize;
            self.tp[c] += 1;
            self.iou_sum[c] += m.iou;
        }
        for (gi, g) in gt_segs.iter().enumerate() {
            if !gt_matched[gi] {
                self.fn_count[g.class_id as usize] += 1;
            }
        }
        for (pi, p) in pred_segs.iter().enumerate() {
            if pred_matched[pi] {
                continue;
            }
            // unmatched predictions mostly covering void ground truth are
            // not penalized
            let void_overlap = p.pixels.iter().filter(|px| void.contains(px)).count();
            if void_overlap * 2 > p.pixels.len() {
                continue;
            }
            self.fp[p.class_id as usize] += 1;
        }
    }

    pub fn finalize(&self) -> PQReport {
        let mut per_class = Vec::new();
        for e in self.table.entries() {
            let c = e.id as usize;
            let denom = self.tp[c] as f64 + 0.5 * self.fp[c] as f64 + 0.5 * self.fn_count[c] as f64;
            let (pq, sq, rq) = if denom == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                let rq = self.tp[c] as f64 / denom;
                let sq = if self.tp[c] == 0 {
                    0.0
                } else {
                    self.iou_sum[c] / self.tp[c] as f64
                };
                (self.iou_sum[c] / denom, sq, rq)
            };
            per_class.push(ClassPQ {
                class_id: e.id,
                name: e.name.clone(),
                kind: e.kind,
                pq,
                sq,
                rq,
                tp: self.tp[c],
                fp: self.fp[c],
                fn_count: self.fn_count[c],
                iou_sum: self.iou_sum[c],
            });
        }
        // classes never seen in either ground truth or prediction are
        // excluded from the means
        let active: Vec<&ClassPQ> = per_class
            .iter()
            .filter(|c| c.tp + c.fp + c.fn_count > 0)
            .collect();
        let mean = |f: &dyn Fn(&ClassPQ) -> f64, set: &[&ClassPQ]| {
            if set.is_empty() {
                0.0
            } else {
                set.iter().map(|c| f(c)).sum::<f64>() / set.len() as f64
            }
        };
        let things: Vec<&ClassPQ> = active
            .iter()
            .copied()
            .filter(|c| c.kind == ClassKind::Thing)
            .collect();
        let stuff: Vec<&ClassPQ> = active
            .iter()
            .copied()
            .filter(|c| c.kind == ClassKind::Stuff)
            .collect();
        PQReport {
            pq: mean(&|c| c.pq, &active),
            sq: mean(&|c| c.sq, &active),
            rq: mean(&|c| c.rq, &active),
            pq_things: mean(&|c| c.pq, &things),
            pq_stuff: mean(&|c| c.pq, &stuff),
            per_class,
        }
    }
}

/// Dataset PQ over paired (ground truth, prediction) labels.
pub fn panoptic_quality(
    pairs: &[(&PanopticLabel, &PanopticLabel)],
    table: &ClassTable,
) -> PQReport {
    let mut acc = PQAccumulator::new(table);
    for (gt, pred) in pairs {
        acc.add_image(gt, pred);
    }
    acc.finalize()
}

/// Semantic mIoU over paired semantic maps. Void ground-truth pixels are
/// ignored; predicted void counts only against recall. The mean runs over
/// classes with a nonzero union.
pub fn mean_iou(pairs: &[(&Array2<u8>, &Array2<u8>)], num_classes: usize) -> f64 {
    let mut inter = vec![0u64; num_classes];
    let mut gt_count = vec![0u64; num_classes];
    let mut pred_count = vec![0u64; num_classes];
    for (gt, pred) in pairs {
        assert_eq!(gt.dim(), pred.dim(), "mean_iou: shape mismatch");
        for ((y, x), &g) in gt.indexed_iter() {
            if g == VOID_CLASS {
                continue;
            }
            let p = pred[[y, x]];
            gt_count[g as usize] += 1;
            if (p as usize) < num_classes {
                pred_count[p as usize] += 1;
                if p == g {
                    inter[g as usize] += 1;
                }
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..num_classes {
        let union = gt_count[c] + pred_count[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Instance mask AP averaged over IoU thresholds 0.50:0.05:0.95 and over
/// thing classes with at least one ground-truth instance. Precision uses the
/// monotone (all-point) envelope.
pub fn mask_ap(
    gts: &[Vec<(u8, Array2<bool>)>],
    preds: &[Vec<InstancePrediction>],
    table: &ClassTable,
) -> f64 {
    assert_eq!(gts.len(), preds.len(), "mask_ap: image count mismatch");
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut class_aps = Vec::new();
    for class_id in table.thing_ids() {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|(c, _)| *c == class_id).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        // (score, image index, mask) for all predictions of this class,
        // score descending with (image, order) tiebreak for determinism
        let mut dets: Vec<(f64, usize, &InstancePrediction)> = Vec::new();
        for (img, ps) in preds.iter().enumerate() {
            for p in ps {
                if p.class_id == class_id {
                    dets.push((p.score, img, p));
                }
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut ap_sum = 0.0;
        for &t in &thresholds {
            let mut used: Vec<Vec<bool>> = gts
                .iter()
                .map(|g| vec![false; g.len()])
                .collect();
            let mut tp = Vec::with_capacity(dets.len());
            for &(_, img, p) in &dets {
                let mut best: Option<(usize, f64)> = None;
                for (gi, (gc, gmask)) in gts[img].iter().enumerate() {
                    if *gc != class_id || used[img][gi] {
                        continue;
                    }
                    let iou = mask_iou(&p.mask, gmask);
                    if iou >= t && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, _)) = best {
                    used[img][gi] = true;
                    tp.push(true);
                } else {
                    tp.push(false);
                }
            }
            // precision-recall with monotone envelope
            let mut cum_tp = 0usize;
            let mut prec = Vec::with_capacity(tp.len());
            let mut rec = Vec::with_capacity(tp.len());
            for (i, &hit) in tp.iter().enumerate() {
                if hit {
                    cum_tp += 1;
                }
                prec.push(cum_tp as f64 / (i + 1) as f64);
                rec.push(cum_tp as f64 / n_gt as f64);
            }
            for i in (0..prec.len().saturating_sub(1)).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_rec = 0.0;
            for i in 0..prec.len() {
                ap += (rec[i] - prev_rec) * prec[i];
                prev_rec = rec[i];
            }
            ap_sum += ap;
        }
        class_aps.push(ap_sum / thresholds.len() as f64);
    }
    if class_aps.is_empty() {
        0.0
    } else {
        class_aps.iter().sum::<f64>() / class_aps.len() as f64
    }
}

/// Adaptation quality as a percentage of a fully supervised oracle trained on
/// labeled target data.
pub fn relative_uda(uda_score: f64, oracle_score: f64) -> f64 {
    if oracle_score == 0.0 {
        0.0
    } else {
        // reported as a percentage truncated to one decimal, the convention
        // used for published adaptation-recovery tables
        (1000.0 * uda_score / oracle_score).trunc() / 10.0
    }
}

/// Full evaluation output written as `report.json` / `report.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub pq: PQReport,
    pub miou: f64,
    pub map: f64,
    pub num_images: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,kind,pq,sq,rq,tp,fp,fn\n");
        for c in &self.pq.per_class {
            out.push_str(&format!(
                "{},{:?},{:.6},{:.6},{:.6},{},{},{}\n",
                c.name, c.kind, c.pq, c.sq, c.rq, c.tp, c.fp, c.fn_count
            ));
        }
        out.push_str(&format!(
            "ALL,,{:.6},{:.6},{:.6},,,\n",
            self.pq.pq, self.pq.sq, self.pq.rq
        ));
        out.push_str(&format!("THINGS,,{:.6},,,,,\n", self.pq.pq_things));
        out.push_str(&format!("STUFF,,{:.6},,,,,\n", self.pq.pq_stuff));
        out.push_str(&format!("MIOU,,{:.6},,,,,\n", self.miou));
        out.push_str(&format!("MAP,,{:.6},,,,,\n", self.map));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::PanopticLabel;
    use ndarray::arr2;

    fn table() -> ClassTable {
        crate::toydata::toy_class_table()
    }

    #[test]
    fn identical_labels_give_perfect_pq() {
        let sem = arr2(&[
            [0u8, 0, 0, 0],
            [1, 1, 5, 5],
            [1, 1, 5, 5],
            [1, 1, 1, 1],
        ]);
        let inst = arr2(&[
            [0u16, 0, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
            [0, 0, 0, 0],
        ]);
        let label = PanopticLabel::new(sem, inst).unwrap();
        let r = panoptic_quality(&[(&label, &label)], &table());
        assert!((r.pq - 1.0).abs() < 1e-12);
        assert!((r.sq - 1.0).abs() < 1e-12);
        assert!((r.rq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pq_equals_sq_times_rq_per_class() {
        // perturbed prediction: shift the instance by one pixel
        let gt_sem = arr2(&[
            [0u8, 0, 0, 0, 0, 0],
            [1, 5, 5, 5, 1, 1],
            [1, 5, 5, 5, 1, 1],
            [1, 5, 5, 5, 1, 1],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
        ]);
        let gt_inst = arr2(&[
            [0u16, 0, 0, 0, 0, 0],
            [0, 1, 1, 1, 0, 0],
            [0, 1, 1, 1, 0, 0],
            [0, 1, 1, 1, 0, 0],
            [0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0],
        ]);
        let mut pr_sem = gt_sem.clone();
        let mut pr_inst = gt_inst.clone();
        // move the bottom row of the instance out
        for x in 1..4 {
            pr_sem[[3, x]] = 1;
            pr_inst[[3, x]] = 0;
        }
        let gt = PanopticLabel::new(gt_sem, gt_inst).unwrap();
        let pr = PanopticLabel::new(pr_sem, pr_inst).unwrap();
        let r = panoptic_quality(&[(&gt, &pr)], &table());
        for c in &r.per_class {
            assert!(
                (c.pq - c.sq * c.rq).abs() < 1e-12,
                "class {}: pq {} != sq*rq {}",
                c.name,
                c.pq,
                c.sq * c.rq
            );
        }
        let disk = &r.per_class[5];
        assert_eq!(disk.tp, 1);
        // IoU = 6/9
        assert!((disk.iou_sum - 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn low_iou_counts_fp_and_fn() {
        let gt_sem = arr2(&[[5u8, 5, 1, 1], [1, 1, 1, 1]]);
        let gt_inst = arr2(&[[1u16, 1, 0, 0], [0, 0, 0, 0]]);
        let pr_sem = arr2(&[[1u8, 1, 5, 5], [1, 1, 1, 1]]);
        let pr_inst = arr2(&[[0u16, 0, 1, 1], [0, 0, 0, 0]]);
        let gt = PanopticLabel::new(gt_sem, gt_inst).unwrap();
        let pr = PanopticLabel::new(pr_sem, pr_inst).unwrap();
        let r = panoptic_quality(&[(&gt, &pr)], &table());
        let disk = &r.per_class[5];
        assert_eq!((disk.tp, disk.fp, disk.fn_count), (0, 1, 1));
        assert_eq!(disk.pq, 0.0);
    }

    #[test]
    fn mostly_void_prediction_is_not_fp() {
        let gt_sem = arr2(&[[255u8, 255, 255, 1], [1, 1, 1, 1]]);
        let gt_inst = arr2(&[[0u16, 0, 0, 0], [0, 0, 0, 0]]);
        let pr_sem = arr2(&[[5u8, 5, 5, 1], [1, 1, 1, 1]]);
        let pr_inst = arr2(&[[1u16, 1, 1, 0], [0, 0, 0, 0]]);
        let gt = PanopticLabel::new(gt_sem, gt_inst).unwrap();
        let pr = PanopticLabel::new(pr_sem, pr_inst).unwrap();
        let r = panoptic_quality(&[(&gt, &pr)], &table());
        let disk = &r.per_class[5];
        assert_eq!(disk.fp, 0, "prediction over void should not be penalized");
    }

    #[test]
    fn match_segments_agrees_with_brute_force() {
        // randomized labels, checked against an all-pairs search
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut gt_sem = Array2::<u8>::zeros((12, 12));
            let mut gt_inst = Array2::<u16>::zeros((12, 12));
            let mut pr_sem = Array2::<u8>::zeros((12, 12));
            let mut pr_inst = Array2::<u16>::zeros((12, 12));
            for _ in 0..3 {
                let cy = rng.gen_range(2..10);
                let cx = rng.gen_range(2..10);
                let inst = rng.gen_range(1..4u16);
                for y in cy - 2..cy + 2 {
                    for x in cx - 2..cx + 2 {
                        gt_sem[[y, x]] = 5;
                        gt_inst[[y, x]] = inst;
                    }
                }
                let jy = (cy as i64 + rng.gen_range(-1..=1)).clamp(2, 9) as usize;
                let jx = (cx as i64 + rng.gen_range(-1..=1)).clamp(2, 9) as usize;
                for y in jy - 2..jy + 2 {
                    for x in jx - 2..jx + 2 {
                        pr_sem[[y, x]] = 5;
                        pr_inst[[y, x]] = inst;
                    }
                }
            }
            let gt = extract_segments(&PanopticLabel::new(gt_sem, gt_inst).unwrap());
            let pr = extract_segments(&PanopticLabel::new(pr_sem, pr_inst).unwrap());
            let void = HashSet::new();
            let matches = match_segments(&gt, &pr, &void);
            // brute force: all same-class pairs with IoU > 0.5
            let mut brute = Vec::new();
            for (gi, g) in gt.iter().enumerate() {
                let gset = pixel_set(g);
                for (pi, p) in pr.iter().enumerate() {
                    if g.class_id == p.class_id {
                        let iou = seg_iou(&gset, &p.pixels, &void);
                        if iou > 0.5 {
                            brute.push((gi, pi));
                        }
                    }
                }
            }
            // IoU > 0.5 pairs are unique per side; the sets must be equal
            let got: HashSet<(usize, usize)> =
                matches.iter().map(|m| (m.gt_idx, m.pred_idx)).collect();
            let want: HashSet<(usize, usize)> = brute.into_iter().collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn miou_hand_case() {
        let gt = arr2(&[[0u8, 0, 1, 1], [255, 0, 1, 1]]);
        let pr = arr2(&[[0u8, 1, 1, 1], [0, 0, 1, 0]]);
        // void pixel (1,0) ignored entirely
        // class 0: gt 3, pred {(0,0),(1,1),(1,3)} = 3, inter 2 -> union 4
        // class 1: gt 4, pred {(0,1),(0,2),(0,3),(1,2)} = 4, inter 3 -> union 5
        let miou = mean_iou(&[(&gt, &pr)], 8);
        assert!((miou - (2.0 / 4.0 + 3.0 / 5.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_ap_perfect_and_ranked() {
        let t = table();
        let mut gt_mask = Array2::from_elem((8, 8), false);
        for y in 1..4 {
            for x in 1..4 {
                gt_mask[[y, x]] = true;
            }
        }
        let gts = vec![vec![(5u8, gt_mask.clone())]];
        let perfect = vec![vec![InstancePrediction {
            mask: gt_mask.clone(),
            class_id: 5,
            score: 0.9,
        }]];
        assert!((mask_ap(&gts, &perfect, &t) - 1.0).abs() < 1e-12);
        // a high-scoring miss ahead of the hit halves precision at recall 1
        let mut miss = Array2::from_elem((8, 8), false);
        miss[[6, 6]] = true;
        let ranked = vec![vec![
            InstancePrediction { mask: miss, class_id: 5, score: 0.95 },
            InstancePrediction { mask: gt_mask, class_id: 5, score: 0.9 },
        ]];
        assert!((mask_ap(&gts, &ranked, &t) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mask_ap_threshold_sweep() {
        // IoU 0.75 against gt: counts at thresholds 0.50..0.75 (6 of 10)
        let mut gt_mask = Array2::from_elem((8, 8), false);
        for y in 0..4 {
            for x in 0..4 {
                gt_mask[[y, x]] = true;
            }
        }
        let mut pr_mask = Array2::from_elem((8, 8), false);
        for y in 0..3 {
            for x in 0..4 {
                pr_mask[[y, x]] = true;
            }
        }
        // IoU = 12/16 = 0.75
        let gts = vec![vec![(5u8, gt_mask)]];
        let preds = vec![vec![InstancePrediction { mask: pr_mask, class_id: 5, score: 0.8 }]];
        let ap = mask_ap(&gts, &preds, &table());
        assert!((ap - 0.6).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn relative_uda_reference_point() {
        let rel = relative_uda(41.2, 56.6);
        assert!((rel - 72.7).abs() < 1e-12, "{rel}");
    }

    #[test]
    fn report_round_trips_json_and_csv_has_all_rows() {
        let label = PanopticLabel::new(
            arr2(&[[0u8, 5], [1, 1]]),
            arr2(&[[0u16, 1], [0, 0]]),
        )
        .unwrap();
        let pq = panoptic_quality(&[(&label, &label)], &table());
        let report = EvalReport { pq, miou: 1.0, map: 1.0, num_images: 1 };
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.pq.per_class.len(), report.pq.per_class.len());
        let csv = report.to_csv();
        assert!(csv.lines().count() == 8 + 5 + 1); // 8 classes + 5 summary + header
        assert!(csv.contains("MIOU"));
    }
}
