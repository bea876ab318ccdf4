//! The metric family on hand-built labels: segment matching, PQ/SQ/RQ,
//! mIoU, mask AP, and the relative-adaptation score.
//!
//!     cargo run --release --example metrics_tour

use ndarray::Array2;
use panuda::core::{InstancePrediction, PanopticLabel};
use panuda::metrics::{mask_ap, mean_iou, panoptic_quality, relative_uda};
use panuda::toydata::toy_class_table;

fn main() {
    let table = toy_class_table();

    // ground truth: stuff class 0 everywhere, one 4x4 disk instance
    let mut sem = Array2::<u8>::zeros((16, 16));
    let mut inst = Array2::<u16>::zeros((16, 16));
    for y in 4..8 {
        for x in 4..8 {
            sem[[y, x]] = 5; // disk (thing)
            inst[[y, x]] = 1;
        }
    }
    let gt = PanopticLabel { semantic: sem.clone(), instance: inst.clone() };

    // prediction: the instance shifted right by one column (IoU 12/20 = 0.6)
    let mut psem = Array2::<u8>::zeros((16, 16));
    let mut pinst = Array2::<u16>::zeros((16, 16));
    for y in 4..8 {
        for x in 5..9 {
            psem[[y, x]] = 5;
            pinst[[y, x]] = 1;
        }
    }
    let pred = PanopticLabel { semantic: psem.clone(), instance: pinst };

    let pq = panoptic_quality(&[(&gt, &pred)], &table);
    println!("PQ {:.4}  SQ {:.4}  RQ {:.4}", pq.pq, pq.sq, pq.rq);
    for c in &pq.per_class {
        if c.tp + c.fp + c.fn_count > 0 {
            println!("  {:<12} pq {:.4} (tp {} fp {} fn {})", c.name, c.pq, c.tp, c.fp, c.fn_count);
        }
    }

    println!("mIoU {:.4}", mean_iou(&[(&sem, &psem)], table.entries().len()));

    let gt_masks = vec![vec![(5u8, sem.mapv(|c| c == 5))]];
    let preds = vec![vec![InstancePrediction { mask: psem.mapv(|c| c == 5), class_id: 5, score: 0.9 }]];
    println!("mask mAP {:.4}", mask_ap(&gt_masks, &preds, &table));

    // how much of the oracle's score an adapted model recovers
    println!("relative adaptation 41.2/56.6 = {:.1}%", relative_uda(41.2, 56.6));
}
