//! Top-down instance decoding: a small feature pyramid, a region proposal
//! network, and RoI-aligned box/mask heads. Boxes are `[y0, x0, y1, x1]` in
//! image pixel coordinates.

use std::rc::Rc;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::core::{ClassTable, InstancePrediction, PanopticLabel};
use crate::real::Real;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, Tv};

use super::layers::{Conv, Linear};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const ANCHOR_SIZES: [f64; 4] = [8.0, 16.0, 32.0, 64.0];
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const FPN_WIDTH: usize = 64;
const RPN_POS_IOU: f64 = 0.7;
const RPN_NEG_IOU: f64 = 0.3;
const RPN_SAMPLES: usize = 64;
const MASK_RES: usize = 28;

pub type BoxF = [f64; 4];

pub fn box_iou(a: &BoxF, b: &BoxF) -> f64 {
    let iy = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ix = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iy * ix;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn box_center(b: &BoxF) -> (f64, f64, f64, f64) {
    let h = b[2] - b[0];
    let w = b[3] - b[1];
    (b[0] + 0.5 * h, b[1] + 0.5 * w, h, w)
}

/// (dy, dx, dh, dw) regression target taking `anchor` to `gt`.
pub fn encode_delta(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (acy, acx, ah, aw) = box_center(anchor);
    let (gcy, gcx, gh, gw) = box_center(gt);
    [
        (gcy - acy) / ah,
        (gcx - acx) / aw,
        (gh / ah).ln(),
        (gw / aw).ln(),
    ]
}

pub fn decode_delta(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    let (acy, acx, ah, aw) = box_center(anchor);
    let cy = acy + d[0].clamp(-4.0, 4.0) * ah;
    let cx = acx + d[1].clamp(-4.0, 4.0) * aw;
    let h = ah * d[2].clamp(-4.0, 4.0).exp();
    let w = aw * d[3].clamp(-4.0, 4.0).exp();
    [cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w]
}

pub fn clip_box(b: &BoxF, h: usize, w: usize) -> BoxF {
    [
        b[0].clamp(0.0, h as f64),
        b[1].clamp(0.0, w as f64),
        b[2].clamp(0.0, h as f64),
        b[3].clamp(0.0, w as f64),
    ]
}

/// Greedy non-maximum suppression over (box, score) pairs sorted by score
/// descending. Returns kept indices.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = Vec::new();
    for &i in &order {
        if keep.iter().all(|&k: &usize| box_iou(&boxes[i], &boxes[k]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn anchor_box(level: usize, y: usize, x: usize, a: usize) -> BoxF {
    let stride = STRIDES[level] as f64;
    let size = ANCHOR_SIZES[level];
    let r = ANCHOR_RATIOS[a];
    let h = size * r.sqrt();
    let w = size / r.sqrt();
    let cy = (y as f64 + 0.5) * stride;
    let cx = (x as f64 + 0.5) * stride;
    [cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w]
}

/// Per-instance ground truth for the detection heads.
#[derive(Clone, Debug)]
pub struct GtInstance {
    /// 1-based thing index; 0 is reserved for background in the classifier
    pub cls: usize,
    pub bbox: BoxF,
    pub mask: Array2<bool>,
}

pub fn gt_instances(label: &PanopticLabel, table: &ClassTable) -> Vec<GtInstance> {
    let (h, w) = label.semantic.dim();
    let thing_ids = table.thing_ids();
    let mut out: std::collections::BTreeMap<u16, (usize, usize, usize, usize, u8)> =
        std::collections::BTreeMap::new();
    for ((y, x), &i) in label.instance.indexed_iter() {
        let c = label.semantic[[y, x]];
        if i == 0 || !table.is_thing(c) {
            continue;
        }
        let e = out.entry(i).or_insert((y, x, y, x, c));
        e.0 = e.0.min(y);
        e.1 = e.1.min(x);
        e.2 = e.2.max(y);
        e.3 = e.3.max(x);
        e.4 = c;
    }
    out.into_iter()
        .map(|(i, (y0, x0, y1, x1, c))| {
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                label.instance[[y, x]] == i && label.semantic[[y, x]] == c
            });
            let cls = thing_ids.iter().position(|&t| t == c).unwrap() + 1;
            GtInstance {
                cls,
                bbox: [y0 as f64, x0 as f64, (y1 + 1) as f64, (x1 + 1) as f64],
                mask,
            }
        })
        .collect()
}

/// FPN level for a box, by its scale relative to the smallest anchor.
fn assign_level(b: &BoxF) -> usize {
    let s = ((b[2] - b[0]) * (b[3] - b[1])).max(1.0).sqrt();
    ((s / ANCHOR_SIZES[0]).log2().round() as i64).clamp(0, 3) as usize
}

/// The five top-down training losses; combined with unit weights unless an
/// ablation disables some of them.
#[derive(Clone, Copy, Debug)]
pub struct TdLosses {
    pub rpn_obj: Tv,
    pub rpn_box: Tv,
    pub cls: Tv,
    pub box_reg: Tv,
    pub mask: Tv,
}

#[derive(Clone, Debug)]
pub struct TopDownHead {
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    rpn_conv: Conv,
    rpn_obj: Conv,
    rpn_box: Conv,
    box_fc: Linear,
    box_cls: Linear,
    box_reg: Linear,
    mask_conv1: Conv,
    mask_conv2: Conv,
    mask_out: Conv,
    pub num_things: usize,
}

impl TopDownHead {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        widths: &[usize; 4],
        num_things: usize,
    ) -> Self {
        let s1 = Conv2dSpec { stride: 1, pad: 0, dilation: 1, groups: 1 };
        let s3 = Conv2dSpec { stride: 1, pad: 1, dilation: 1, groups: 1 };
        let n_a = ANCHOR_RATIOS.len();
        TopDownHead {
            lateral: (0..4)
                .map(|i| Conv::new(ps, rng, &format!("{name}.lat{i}"), widths[i], FPN_WIDTH, 1, s1))
                .collect(),
            smooth: (0..4)
                .map(|i| Conv::new(ps, rng, &format!("{name}.smooth{i}"), FPN_WIDTH, FPN_WIDTH, 3, s3))
                .collect(),
            rpn_conv: Conv::new(ps, rng, &format!("{name}.rpnc"), FPN_WIDTH, FPN_WIDTH, 3, s3),
            rpn_obj: Conv::new(ps, rng, &format!("{name}.rpno"), FPN_WIDTH, n_a, 1, s1),
            rpn_box: Conv::new(ps, rng, &format!("{name}.rpnb"), FPN_WIDTH, 4 * n_a, 1, s1),
            box_fc: Linear::new(ps, rng, &format!("{name}.boxfc"), FPN_WIDTH * 49, 128),
            box_cls: Linear::new(ps, rng, &format!("{name}.boxcls"), 128, num_things + 1),
            box_reg: Linear::new(ps, rng, &format!("{name}.boxreg"), 128, 4),
            mask_conv1: Conv::new(ps, rng, &format!("{name}.mask1"), FPN_WIDTH, FPN_WIDTH, 3, s3),
            mask_conv2: Conv::new(ps, rng, &format!("{name}.mask2"), FPN_WIDTH, FPN_WIDTH, 3, s3),
            mask_out: Conv::new(ps, rng, &format!("{name}.maskout"), FPN_WIDTH, 1, 1, s1),
            num_things,
        }
    }

    /// Top-down pathway: lateral 1x1 projections, coarse-to-fine upsample-add,
    /// then a 3x3 smoothing conv per level.
    pub fn fpn<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, feats: &[Tv]) -> Vec<Tv> {
        let mut lat: Vec<Tv> = (0..4).map(|i| self.lateral[i].fwd(g, bind, feats[i])).collect();
        for i in (0..3).rev() {
            let s = g.shape(lat[i]);
            let up = g.upsample_bilinear(lat[i + 1], s[1], s[2]);
            lat[i] = g.add(lat[i], up);
        }
        (0..4).map(|i| self.smooth[i].fwd(g, bind, lat[i])).collect()
    }

    fn rpn_fwd<T: Real>(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        pyramid: &[Tv],
    ) -> Vec<(Tv, Tv)> {
        pyramid
            .iter()
            .map(|&p| {
                let t = g.relu(self.rpn_conv.fwd(g, bind, p));
                (self.rpn_obj.fwd(g, bind, t), self.rpn_box.fwd(g, bind, t))
            })
            .collect()
    }

    fn box_head<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, roi: Tv) -> (Tv, Tv) {
        let flat = g.reshape(roi, &[1, FPN_WIDTH * 49]);
        let f = g.relu(self.box_fc.fwd(g, bind, flat));
        (self.box_cls.fwd(g, bind, f), self.box_reg.fwd(g, bind, f))
    }

    fn mask_head<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, roi14: Tv) -> Tv {
        let x = g.reshape(roi14, &[FPN_WIDTH, 14, 14]);
        let x = g.relu(self.mask_conv1.fwd(g, bind, x));
        let x = g.relu(self.mask_conv2.fwd(g, bind, x));
        let x = g.upsample_bilinear(x, MASK_RES, MASK_RES);
        self.mask_out.fwd(g, bind, x) // [1, 28, 28] logits
    }

    fn roi<T: Real>(
        &self,
        g: &Graph<T>,
        pyramid: &[Tv],
        b: &BoxF,
        res: usize,
    ) -> Tv {
        let level = assign_level(b);
        let s = STRIDES[level] as f64;
        let fb = [b[0] / s, b[1] / s, b[2] / s, b[3] / s];
        g.roi_align(pyramid[level], Rc::new(vec![fb]), res, res)
    }

    /// Training losses for one image. `rng` drives anchor and proposal
    /// sampling; all randomness flows through it.
    pub fn losses<T: Real>(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        feats: &[Tv],
        label: &PanopticLabel,
        table: &ClassTable,
        rng: &mut ChaCha8Rng,
    ) -> TdLosses {
        let (img_h, img_w) = label.semantic.dim();
        let pyramid = self.fpn(g, bind, feats);
        let rpn = self.rpn_fwd(g, bind, &pyramid);
        let gts = gt_instances(label, table);
        let n_a = ANCHOR_RATIOS.len();

        // enumerate anchors in flat order: level, ratio, y, x
        let mut anchors: Vec<BoxF> = Vec::new();
        let mut level_dims = Vec::new();
        for (l, &(obj, _)) in rpn.iter().enumerate() {
            let s = g.shape(obj);
            let (h, w) = (s[1], s[2]);
            level_dims.push((h, w));
            for a in 0..n_a {
                for y in 0..h {
                    for x in 0..w {
                        anchors.push(anchor_box(l, y, x, a));
                    }
                }
            }
        }
        let total = anchors.len();
        // IoU of every anchor against every ground-truth box
        let mut best_iou = vec![0.0f64; total];
        let mut best_gt = vec![usize::MAX; total];
        for (ai, a) in anchors.iter().enumerate() {
            for (gi, gt) in gts.iter().enumerate() {
                let iou = box_iou(a, &gt.bbox);
                if iou > best_iou[ai] {
                    best_iou[ai] = iou;
                    best_gt[ai] = gi;
                }
            }
        }
        let mut pos: Vec<usize> = Vec::new();
        for (ai, &iou) in best_iou.iter().enumerate() {
            if iou >= RPN_POS_IOU {
                pos.push(ai);
            }
        }
        // every ground truth gets its best anchor even below the threshold
        for (gi, gt) in gts.iter().enumerate() {
            let best = (0..total)
                .max_by(|&a, &b| {
                    box_iou(&anchors[a], &gt.bbox)
                        .partial_cmp(&box_iou(&anchors[b], &gt.bbox))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            if !pos.contains(&best) {
                pos.push(best);
                best_gt[best] = gi;
                best_iou[best] = box_iou(&anchors[best], &gt.bbox);
            }
        }
        pos.sort_unstable();
        if pos.len() > RPN_SAMPLES / 2 {
            pos = pos
                .choose_multiple(rng, RPN_SAMPLES / 2)
                .copied()
                .collect();
            pos.sort_unstable();
        }
        let negs: Vec<usize> = (0..total).filter(|&a| best_iou[a] <= RPN_NEG_IOU).collect();
        let n_neg = (RPN_SAMPLES - pos.len()).min(negs.len());
        let mut neg: Vec<usize> = negs.choose_multiple(rng, n_neg).copied().collect();
        neg.sort_unstable();

        // objectness: one flat BCE over all levels, nonzero weight only on
        // sampled anchors (scaled so the loss is the mean over the sample)
        let n_sampled = pos.len() + neg.len();
        let mut obj_target = ArrayD::<T>::zeros(ndarray::IxDyn(&[total]));
        let mut obj_weight = ArrayD::<T>::zeros(ndarray::IxDyn(&[total]));
        let wv = T::from_f64(total as f64 / n_sampled.max(1) as f64);
        for &ai in &pos {
            obj_target[[ai]] = T::one();
            obj_weight[[ai]] = wv;
        }
        for &ai in &neg {
            obj_weight[[ai]] = wv;
        }
        let obj_flat = {
            let parts: Vec<Tv> = rpn
                .iter()
                .enumerate()
                .map(|(l, &(obj, _))| {
                    let (h, w) = level_dims[l];
                    g.reshape(obj, &[n_a * h * w])
                })
                .collect();
            g.concat(0, &parts)
        };
        let rpn_obj = g.bce_with_logits(obj_flat, Rc::new(obj_target), Rc::new(obj_weight));

        // anchor regression on positives only
        let reg_flat = {
            let parts: Vec<Tv> = rpn
                .iter()
                .enumerate()
                .map(|(l, &(_, reg))| {
                    let (h, w) = level_dims[l];
                    g.reshape(reg, &[4 * n_a * h * w])
                })
                .collect();
            g.concat(0, &parts)
        };
        let mut reg_target = ArrayD::<T>::zeros(ndarray::IxDyn(&[4 * total]));
        let mut reg_weight = ArrayD::<T>::zeros(ndarray::IxDyn(&[4 * total]));
        // flat reg layout per level: channel (a*4+i), then y, x
        let mut level_base = vec![0usize; 4];
        let mut anchor_base = vec![0usize; 4];
        let mut acc_reg = 0usize;
        let mut acc_anchor = 0usize;
        for l in 0..4 {
            level_base[l] = acc_reg;
            anchor_base[l] = acc_anchor;
            let (h, w) = level_dims[l];
            acc_reg += 4 * n_a * h * w;
            acc_anchor += n_a * h * w;
        }
        let mut any_pos = false;
        for &ai in &pos {
            let gi = best_gt[ai];
            if gi == usize::MAX {
                continue;
            }
            any_pos = true;
            let l = (0..4).rev().find(|&l| ai >= anchor_base[l]).unwrap();
            let (h, w) = level_dims[l];
            let within = ai - anchor_base[l];
            let a = within / (h * w);
            let yx = within % (h * w);
            let d = encode_delta(&anchors[ai], &gts[gi].bbox);
            for i in 0..4 {
                let idx = level_base[l] + (a * 4 + i) * h * w + yx;
                reg_target[[idx]] = T::from_f64(d[i]);
                reg_weight[[idx]] = T::one();
            }
        }
        let rpn_box = if any_pos {
            g.l1_loss(reg_flat, Rc::new(reg_target), Rc::new(reg_weight))
        } else {
            g.scalar(T::zero())
        };

        // RoI proposals: ground-truth boxes plus jittered copies as
        // positives, random low-IoU boxes as background
        let mut proposals: Vec<(BoxF, usize, Option<usize>)> = Vec::new(); // (box, cls, gt idx)
        for (gi, gt) in gts.iter().enumerate() {
            proposals.push((gt.bbox, gt.cls, Some(gi)));
            for _ in 0..2 {
                let h = gt.bbox[2] - gt.bbox[0];
                let w = gt.bbox[3] - gt.bbox[1];
                let jit = [
                    gt.bbox[0] + (rng.gen::<f64>() - 0.5) * 0.2 * h,
                    gt.bbox[1] + (rng.gen::<f64>() - 0.5) * 0.2 * w,
                    gt.bbox[2] + (rng.gen::<f64>() - 0.5) * 0.2 * h,
                    gt.bbox[3] + (rng.gen::<f64>() - 0.5) * 0.2 * w,
                ];
                let jit = clip_box(&jit, img_h, img_w);
                if jit[2] - jit[0] >= 2.0 && jit[3] - jit[1] >= 2.0 && box_iou(&jit, &gt.bbox) > 0.5 {
                    proposals.push((jit, gt.cls, Some(gi)));
                }
            }
        }
        let n_bg = proposals.len().max(4).min(8);
        let mut tries = 0;
        let mut bg = 0;
        while bg < n_bg && tries < 50 {
            tries += 1;
            let size = 8.0 + rng.gen::<f64>() * 32.0;
            let y0 = rng.gen::<f64>() * (img_h as f64 - size);
            let x0 = rng.gen::<f64>() * (img_w as f64 - size);
            let b = [y0, x0, y0 + size, x0 + size];
            if gts.iter().all(|gt| box_iou(&b, &gt.bbox) < 0.3) {
                proposals.push((b, 0, None));
                bg += 1;
            }
        }

        let (cls, box_reg, mask) = if proposals.is_empty() {
            (g.scalar(T::zero()), g.scalar(T::zero()), g.scalar(T::zero()))
        } else {
            let mut cls_rows = Vec::new();
            let mut reg_rows = Vec::new();
            let mut reg_t = Vec::new();
            let mut targets = Vec::new();
            let mut mask_losses = Vec::new();
            for &(ref b, cls_t, gi) in &proposals {
                let roi7 = self.roi(g, &pyramid, b, 7);
                let (c, r) = self.box_head(g, bind, roi7);
                cls_rows.push(c);
                targets.push(cls_t);
                if let Some(gi) = gi {
                    reg_rows.push(r);
                    reg_t.push(encode_delta(b, &gts[gi].bbox));
                    // mask target: ground-truth mask resampled to the
                    // proposal window (nearest)
                    let gt = &gts[gi];
                    let mut mt = ArrayD::<T>::zeros(ndarray::IxDyn(&[1, MASK_RES, MASK_RES]));
                    for my in 0..MASK_RES {
                        for mx in 0..MASK_RES {
                            let sy = b[0] + (my as f64 + 0.5) / MASK_RES as f64 * (b[2] - b[0]);
                            let sx = b[1] + (mx as f64 + 0.5) / MASK_RES as f64 * (b[3] - b[1]);
                            let (iy, ix) = (sy.floor() as i64, sx.floor() as i64);
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < img_h
                                && (ix as usize) < img_w
                                && gt.mask[[iy as usize, ix as usize]]
                            {
                                mt[[0, my, mx]] = T::one();
                            }
                        }
                    }
                    let roi14 = self.roi(g, &pyramid, b, 14);
                    let mlogits = self.mask_head(g, bind, roi14);
                    let ones = ArrayD::<T>::ones(ndarray::IxDyn(&[1, MASK_RES, MASK_RES]));
                    mask_losses.push(g.bce_with_logits(mlogits, Rc::new(mt), Rc::new(ones)));
                }
            }
            let logits = g.concat(0, &cls_rows);
            let weights = Rc::new(vec![T::one(); targets.len()]);
            let cls = g.cross_entropy(logits, Rc::new(targets), weights);
            let box_reg = if reg_rows.is_empty() {
                g.scalar(T::zero())
            } else {
                let regs = g.concat(0, &reg_rows);
                let n = reg_t.len();
                let mut t = ArrayD::<T>::zeros(ndarray::IxDyn(&[n, 4]));
                for (i, d) in reg_t.iter().enumerate() {
                    for j in 0..4 {
                        t[[i, j]] = T::from_f64(d[j]);
                    }
                }
                let w = ArrayD::<T>::ones(ndarray::IxDyn(&[n, 4]));
                g.l1_loss(regs, Rc::new(t), Rc::new(w))
            };
            let mask = if mask_losses.is_empty() {
                g.scalar(T::zero())
            } else {
                let k = T::from_f64(1.0 / mask_losses.len() as f64);
                let mut acc = g.scalar(T::zero());
                for m in mask_losses {
                    acc = g.add(acc, m);
                }
                g.scale(acc, k)
            };
            (cls, box_reg, mask)
        };

        TdLosses { rpn_obj, rpn_box, cls, box_reg, mask }
    }

    /// Inference: RPN proposals, box refinement, per-class NMS, mask paste.
    pub fn detect<T: Real>(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        feats: &[Tv],
        table: &ClassTable,
        img_h: usize,
        img_w: usize,
    ) -> Vec<InstancePrediction> {
        let pyramid = self.fpn(g, bind, feats);
        let rpn = self.rpn_fwd(g, bind, &pyramid);
        let n_a = ANCHOR_RATIOS.len();
        // score every anchor
        let mut cands: Vec<(f64, BoxF)> = Vec::new();
        for (l, &(obj, reg)) in rpn.iter().enumerate() {
            let ov = g.value(obj);
            let rv = g.value(reg);
            let s = ov.shape();
            let (h, w) = (s[1], s[2]);
            for a in 0..n_a {
                for y in 0..h {
                    for x in 0..w {
                        let score = ov[[a, y, x]].to_f64();
                        let anchor = anchor_box(l, y, x, a);
                        let d = [
                            rv[[a * 4, y, x]].to_f64(),
                            rv[[a * 4 + 1, y, x]].to_f64(),
                            rv[[a * 4 + 2, y, x]].to_f64(),
                            rv[[a * 4 + 3, y, x]].to_f64(),
                        ];
                        let b = clip_box(&decode_delta(&anchor, &d), img_h, img_w);
                        if b[2] - b[0] >= 2.0 && b[3] - b[1] >= 2.0 {
                            cands.push((score, b));
                        }
                    }
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        cands.truncate(64);
        let boxes: Vec<BoxF> = cands.iter().map(|c| c.1).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.0).collect();
        let keep = nms(&boxes, &scores, 0.7);
        let proposals: Vec<BoxF> = keep.iter().take(16).map(|&i| boxes[i]).collect();

        // box refinement + classification
        struct Det {
            b: BoxF,
            cls_idx: usize,
            score: f64,
        }
        let mut dets = Vec::new();
        for b in &proposals {
            let roi7 = self.roi(g, &pyramid, b, 7);
            let (c, r) = self.box_head(g, bind, roi7);
            let probs = g.value(g.softmax_lastdim(c));
            let rv = g.value(r);
            // rank by the best thing class even when background wins the
            // argmax: the ranked list feeds AP, and the fusion stage applies
            // its own score threshold before anything reaches the panoptic map
            let mut best = 1usize;
            for k in 2..=self.num_things {
                if probs[[0, k]].to_f64() > probs[[0, best]].to_f64() {
                    best = k;
                }
            }
            if probs[[0, best]].to_f64() < 0.05 {
                continue;
            }
            let d = [
                rv[[0, 0]].to_f64(),
                rv[[0, 1]].to_f64(),
                rv[[0, 2]].to_f64(),
                rv[[0, 3]].to_f64(),
            ];
            let refined = clip_box(&decode_delta(b, &d), img_h, img_w);
            if refined[2] - refined[0] < 2.0 || refined[3] - refined[1] < 2.0 {
                continue;
            }
            dets.push(Det { b: refined, cls_idx: best, score: probs[[0, best]].to_f64() });
        }
        // per-class NMS
        let thing_ids = table.thing_ids();
        let mut out = Vec::new();
        for k in 1..=self.num_things {
            let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].cls_idx == k).collect();
            let bs: Vec<BoxF> = idx.iter().map(|&i| dets[i].b).collect();
            let ss: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
            for &ki in nms(&bs, &ss, 0.5).iter() {
                let det = &dets[idx[ki]];
                let roi14 = self.roi(g, &pyramid, &det.b, 14);
                let mlogits = g.value(self.mask_head(g, bind, roi14));
                let mut mask = Array2::<bool>::from_elem((img_h, img_w), false);
                let y0 = det.b[0].floor().max(0.0) as usize;
                let y1 = (det.b[2].ceil() as usize).min(img_h);
                let x0 = det.b[1].floor().max(0.0) as usize;
                let x1 = (det.b[3].ceil() as usize).min(img_w);
                let bh = det.b[2] - det.b[0];
                let bw = det.b[3] - det.b[1];
                let mut any = false;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let my = ((y as f64 + 0.5 - det.b[0]) / bh * MASK_RES as f64)
                            .floor()
                            .clamp(0.0, (MASK_RES - 1) as f64) as usize;
                        let mx = ((x as f64 + 0.5 - det.b[1]) / bw * MASK_RES as f64)
                            .floor()
                            .clamp(0.0, (MASK_RES - 1) as f64) as usize;
                        let p = 1.0 / (1.0 + (-mlogits[[0, my, mx]].to_f64()).exp());
                        if p >= 0.5 {
                            mask[[y, x]] = true;
                            any = true;
                        }
                    }
                }
                if any {
                    out.push(InstancePrediction {
                        mask,
                        class_id: thing_ids[det.cls_idx - 1],
                        score: det.score,
                    });
                }
            }
        }
        out
    }
}
