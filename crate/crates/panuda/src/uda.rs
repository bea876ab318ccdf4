//! The adaptation engine: pseudo-labels with image-level confidence, a
//! mean-teacher parameter average, cross-domain ClassMix, rare-class source
//! sampling, feature-distance regularization against a frozen reference
//! encoder, and the composed training step.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{ClassTable, Dataset, InstancePrediction, PanopticLabel, Sample, VOID_CLASS};
use crate::fusion::FusionConfig;
use crate::network::encoder::{Encoder, EncoderConfig};
use crate::network::layers::Linear;
use crate::network::{image_tensor, semantic_ce, LossWeights, Model};
use crate::real::Real;
use crate::tensor::conv::majority_pool_mask;
use crate::tensor::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::tensor::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, Tv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaConfig {
    /// teacher EMA momentum
    pub alpha: f64,
    /// pseudo-label confidence threshold
    pub tau: f64,
    /// score threshold for teacher instance predictions in the mix
    pub tau_inst: f64,
    /// rare-class sampling temperature
    pub rcs_temperature: f64,
    pub lambda_fd: f64,
    pub self_training: bool,
    pub mean_teacher: bool,
    pub fd: bool,
    pub rcs: bool,
    /// student color-jitter strength on the mixed image
    pub jitter: f64,
    /// student Gaussian-blur probability on the mixed image
    pub blur_prob: f64,
}

impl Default for UdaConfig {
    fn default() -> Self {
        UdaConfig {
            alpha: 0.999,
            tau: 0.968,
            tau_inst: 0.95,
            rcs_temperature: 0.01,
            lambda_fd: 0.005,
            self_training: true,
            mean_teacher: true,
            fd: true,
            rcs: true,
            jitter: 0.2,
            blur_prob: 0.5,
        }
    }
}

// ---- rare-class sampling ----

/// Softmax of `(1 - f_c) / T`, stabilized by subtracting the max exponent.
pub fn rcs_probabilities(f: &[f64], t: f64) -> Vec<f64> {
    let exps: Vec<f64> = f.iter().map(|&fc| (1.0 - fc) / t).collect();
    let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = exps.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| x / z).collect()
}

/// Samples source images with probability biased toward rare classes:
/// first a class by [`rcs_probabilities`], then uniformly an image that
/// contains at least one pixel of that class.
#[derive(Clone, Debug)]
pub struct RcSampler {
    /// (class id, probability) over classes that occur in the dataset
    pub probs: Vec<(u8, f64)>,
}

impl RcSampler {
    pub fn new(ds: &Dataset, temperature: f64) -> Result<Self, crate::core::CoreError> {
        let f = crate::toydata::compute_class_frequencies(ds)?;
        let all = rcs_probabilities(&f, temperature);
        // classes with no labeled sample cannot be drawn; renormalize the rest
        let mut probs: Vec<(u8, f64)> = all
            .iter()
            .enumerate()
            .filter(|&(c, _)| !ds.per_class_index[&(c as u8)].is_empty())
            .map(|(c, &p)| (c as u8, p))
            .collect();
        let z: f64 = probs.iter().map(|&(_, p)| p).sum();
        for p in &mut probs {
            p.1 /= z;
        }
        Ok(RcSampler { probs })
    }

    pub fn draw_class(&self, rng: &mut ChaCha8Rng) -> u8 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(c, p) in &self.probs {
            acc += p;
            if u < acc {
                return c;
            }
        }
        self.probs.last().unwrap().0
    }

    /// Index of the drawn source sample.
    pub fn draw(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> usize {
        let c = self.draw_class(rng);
        let pool = &ds.per_class_index[&c];
        pool[rng.gen_range(0..pool.len())]
    }
}

// ---- pseudo-labels ----

/// Teacher output for one target image.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    /// argmax class map (ties resolved to the lowest class id)
    pub p: Array2<u8>,
    /// image-level confidence: fraction of all pixels whose max probability
    /// reaches `tau`
    pub q: f64,
    /// teacher instance predictions above `tau_inst`
    pub instances: Vec<InstancePrediction>,
}

/// Argmax over the class axis of a `[C,H,W]` probability map; exact ties go
/// to the lowest class id.
pub fn pseudo_label(probs: &Array3<f64>) -> Array2<u8> {
    let (c, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        for k in 1..c {
            if probs[[k, y, x]] > probs[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Fraction of pixels (over the full `H*W`) whose maximum class probability
/// is at least `tau`.
pub fn confidence(probs: &Array3<f64>, tau: f64) -> f64 {
    let (c, h, w) = probs.dim();
    let mut hits = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut m = probs[[0, y, x]];
            for k in 1..c {
                m = m.max(probs[[k, y, x]]);
            }
            if m >= tau {
                hits += 1;
            }
        }
    }
    hits as f64 / (h * w) as f64
}

/// In-place EMA: `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, alpha: f64) {
    assert!(teacher.same_shape(student), "ema_update: parameter mismatch");
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.value(id).clone();
        let t = teacher.value_mut(id);
        t.zip_mut_with(&s, |tv, &sv| *tv = a * *tv + b * sv);
    }
}

// ---- ClassMix ----

/// A cross-domain mixed training example with exact pixel provenance.
#[derive(Clone, Debug)]
pub struct MixResult {
    pub image: Array3<f32>,
    /// semantic target: source ground truth on source pixels, pseudo-label
    /// elsewhere
    pub semantic: Array2<u8>,
    /// true where the pixel was pasted from the source image
    pub source_mask: Array2<bool>,
    /// source instances clipped to the pasted region (for instance losses
    /// with weight 1)
    pub source_part: PanopticLabel,
    /// teacher instances clipped to the non-pasted region (weighted by `q`)
    pub teacher_part: PanopticLabel,
    pub q: f64,
    /// the source classes whose pixels were pasted
    pub selected: Vec<u8>,
}

/// Paste the pixels of `ceil(N/2)` randomly selected source classes into the
/// target image, mixing labels accordingly.
pub fn classmix(
    source: &Sample,
    target_image: &Array3<f32>,
    pl: &PseudoLabel,
    table: &ClassTable,
    rng: &mut ChaCha8Rng,
) -> MixResult {
    let label = source.label.as_ref().expect("classmix: source must be labeled");
    let (h, w) = label.semantic.dim();
    assert_eq!(target_image.dim(), source.image.dim(), "classmix: shape mismatch");
    let present = label.present_classes();
    let n_sel = (present.len() + 1) / 2;
    let mut selected: Vec<u8> = present
        .choose_multiple(rng, n_sel)
        .copied()
        .collect();
    selected.sort_unstable();
    let source_mask = Array2::from_shape_fn((h, w), |(y, x)| {
        selected.contains(&label.semantic[[y, x]])
    });
    let mut image = target_image.clone();
    let mut semantic = pl.p.clone();
    let mut src_sem = Array2::<u8>::from_elem((h, w), VOID_CLASS);
    let mut src_inst = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if source_mask[[y, x]] {
                for c in 0..3 {
                    image[[y, x, c]] = source.image[[y, x, c]];
                }
                semantic[[y, x]] = label.semantic[[y, x]];
                src_sem[[y, x]] = label.semantic[[y, x]];
                src_inst[[y, x]] = label.instance[[y, x]];
            }
        }
    }
    // teacher instances on the non-pasted side, re-indexed from 1
    let mut t_sem = Array2::<u8>::from_elem((h, w), VOID_CLASS);
    let mut t_inst = Array2::<u16>::zeros((h, w));
    let mut next = 1u16;
    for inst in &pl.instances {
        let mut any = false;
        for ((y, x), &m) in inst.mask.indexed_iter() {
            if m && !source_mask[[y, x]] && table.is_thing(inst.class_id) {
                t_sem[[y, x]] = inst.class_id;
                t_inst[[y, x]] = next;
                any = true;
            }
        }
        if any {
            next += 1;
        }
    }
    MixResult {
        image,
        semantic,
        source_mask,
        source_part: PanopticLabel { semantic: src_sem, instance: src_inst },
        teacher_part: PanopticLabel { semantic: t_sem, instance: t_inst },
        q: pl.q,
        selected,
    }
}

/// Student-side augmentation: per-channel color jitter and, with probability
/// `blur_prob`, a separable 3x3 Gaussian blur. All draws come from `rng` as
/// f64 so the result is precision-independent.
pub fn student_augment(
    image: &Array3<f32>,
    jitter: f64,
    blur_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    for c in 0..3 {
        let scale = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * jitter;
        let shift = (rng.gen::<f64>() * 2.0 - 1.0) * jitter * 0.5;
        for y in 0..h {
            for x in 0..w {
                out[[y, x, c]] = ((out[[y, x, c]] as f64) * scale + shift).clamp(0.0, 1.0) as f32;
            }
        }
    }
    if rng.gen::<f64>() < blur_prob {
        let k = [0.25f64, 0.5, 0.25];
        let mut tmp = out.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let xx = (x + i).saturating_sub(1).min(w - 1);
                        v += kv * out[[y, xx, c]] as f64;
                    }
                    tmp[[y, x, c]] = v as f32;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let yy = (y + i).saturating_sub(1).min(h - 1);
                        v += kv * tmp[[yy, x, c]] as f64;
                    }
                    out[[y, x, c]] = v as f32;
                }
            }
        }
    }
    out
}

// ---- feature distance ----

/// Mean per-location feature distance between the student's stride-32 map
/// and the frozen reference, restricted to locations whose stride-32 cell is
/// majority thing pixels.
pub fn feature_distance_loss<T: Real>(
    g: &Graph<T>,
    student_s32: Tv,
    frozen_s32: Rc<ArrayD<T>>,
    label: &PanopticLabel,
    table: &ClassTable,
) -> Tv {
    let thing = Array2::from_shape_fn(label.semantic.dim(), |(y, x)| {
        table.is_thing(label.semantic[[y, x]])
    });
    let mask = majority_pool_mask(&thing, 32);
    g.feature_distance(student_s32, frozen_s32, Rc::new(mask))
}

// ---- frozen reference encoder (pretraining surrogate) ----

/// Train (or load from `cache_dir`) a small classification network and return
/// its encoder parameters as the frozen reference for the feature-distance
/// loss. The task: predict the dominant semantic class of a generated source
/// scene from its image.
pub fn surrogate_encoder<T: Real>(
    enc_cfg: &EncoderConfig,
    num_classes: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> ParamStore<T> {
    let key = format!(
        "surrogate-{}-{}-{}-{}.bin",
        seed,
        enc_cfg.widths.map(|w| w.to_string()).join("x"),
        enc_cfg.depths.map(|d| d.to_string()).join("x"),
        num_classes
    );
    if let Some(dir) = cache_dir {
        let path = dir.join(&key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(ps) = bincode::deserialize::<ParamStore<f32>>(&bytes) {
                return ps.cast::<T>();
            }
        }
    }
    let mut ps = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A11);
    let enc = Encoder::new(&mut ps, &mut rng, "enc", enc_cfg);
    let head = Linear::new(&mut ps, &mut rng, "clshead", enc_cfg.widths[3], num_classes);
    let mut opt = AdamW::new(
        AdamWConfig { lr: 1e-3, ..Default::default() },
        &ps,
    );
    for it in 0..150u64 {
        let spec = crate::toydata::SceneSpec::toy(seed * 1000 + it, crate::core::Domain::Source, 64);
        let sample = crate::toydata::generate_scene(&spec);
        let label = sample.label.as_ref().unwrap();
        // dominant class of the scene
        let mut counts = vec![0usize; num_classes];
        for &c in label.semantic.iter() {
            if c != VOID_CLASS {
                counts[c as usize] += 1;
            }
        }
        let target = counts.iter().enumerate().max_by_key(|&(_, &n)| n).unwrap().0;
        let g = Graph::new();
        let bind = ParamBinding::new(&ps, true);
        let img = image_tensor(&g, &sample.image);
        let feats = enc.fwd(&g, &bind, img);
        let pooled = g.reshape(g.gap(feats[3]), &[1, enc_cfg.widths[3]]);
        let logits = head.fwd(&g, &bind, pooled);
        let loss = g.cross_entropy(logits, Rc::new(vec![target]), Rc::new(vec![1.0f32]));
        let grads = g.backward(loss);
        let mut grad_vec: Vec<Option<ArrayD<f32>>> = vec![None; ps.len()];
        for (id, tv) in bind.bound() {
            grad_vec[id.0] = grads.get(tv).cloned();
        }
        opt.step(&mut ps, &grad_vec, 1e-3);
    }
    if let Some(dir) = cache_dir {
        let _ = std::fs::create_dir_all(dir);
        if let Ok(bytes) = bincode::serialize(&ps) {
            let _ = std::fs::write(dir.join(&key), bytes);
        }
    }
    ps.cast::<T>()
}

// ---- the composed step ----

/// Everything `uda_train_step` mutates, plus the frozen reference.
pub struct TrainState<T: Real> {
    pub student: Model<T>,
    pub teacher: ParamStore<T>,
    /// frozen reference encoder parameters (same architecture as the
    /// student's semantic encoder) plus a skeleton whose ids index into them
    pub frozen: Option<(ParamStore<T>, Encoder)>,
    pub opt: AdamW<T>,
    pub sched: LrSchedule,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(student: Model<T>, sched: LrSchedule, frozen: Option<ParamStore<T>>, seed: u64) -> Self {
        let teacher = student.params.clone();
        let opt = AdamW::new(AdamWConfig::default(), &student.params);
        let frozen = frozen.map(|store| {
            // the surrogate registers "enc" first, so a skeleton built into a
            // fresh store yields ids that index the frozen store correctly
            let mut scratch = ParamStore::<T>::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let enc = Encoder::new(&mut scratch, &mut r, "enc", &student.cfg.encoder);
            for id in scratch.ids() {
                assert_eq!(scratch.name(id), store.name(id), "frozen encoder layout mismatch");
            }
            (store, enc)
        });
        TrainState {
            student,
            teacher,
            frozen,
            opt,
            sched,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A model view with the teacher's parameters. The teacher shares the
    /// student's architecture.
    pub fn teacher_model(&self) -> Model<T> {
        let mut m = Model::new(self.student.cfg.clone());
        m.load_params(self.teacher.clone()).unwrap();
        m
    }
}

/// Per-step scalar losses for the JSON-lines training log.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub source_semantic: f64,
    pub source_instance: f64,
    pub mixed_semantic: f64,
    pub mixed_instance: f64,
    pub fd: f64,
    pub q: f64,
    pub lr: f64,
}

fn scalar<T: Real>(g: &Graph<T>, t: Tv) -> f64 {
    g.value(t)[[]].to_f64()
}

fn combine_instance<T: Real>(
    g: &Graph<T>,
    td: &Option<crate::network::td::TdLosses>,
    bu: &Option<(Tv, Tv)>,
    w: &LossWeights,
) -> Tv {
    let mut total = g.scalar(T::zero());
    if let Some(td) = td {
        for (t, wt) in [
            (td.rpn_obj, w.rpn_obj),
            (td.rpn_box, w.rpn_box),
            (td.cls, w.cls),
            (td.box_reg, w.box_reg),
            (td.mask, w.mask),
        ] {
            if wt != 0.0 {
                total = g.add(total, g.scale(t, T::from_f64(wt)));
            }
        }
    }
    if let Some((heat, off)) = bu {
        if w.heatmap != 0.0 {
            total = g.add(total, g.scale(*heat, T::from_f64(w.heatmap)));
        }
        if w.offset != 0.0 {
            total = g.add(total, g.scale(*off, T::from_f64(w.offset)));
        }
    }
    total
}

/// One adaptation step over paired source/target batches: teacher pseudo-
/// labels, ClassMix, student forward on source and mixed images, an AdamW
/// update of the student, and an EMA update of the teacher.
pub fn uda_train_step<T: Real>(
    state: &mut TrainState<T>,
    source: &[&Sample],
    target: &[&Sample],
    table: &ClassTable,
    cfg: &UdaConfig,
    weights: &LossWeights,
    fusion: &FusionConfig,
) -> LossBreakdown {
    assert!(!source.is_empty());
    let lr = state.sched.lr_at(state.iter);
    let mut log = LossBreakdown { lr, ..Default::default() };

    if !cfg.mean_teacher {
        state.teacher = state.student.params.clone();
    }
    // teacher predictions on clean target images (no gradients)
    let pseudo: Vec<PseudoLabel> = if cfg.self_training {
        let teacher = state.teacher_model();
        target
            .iter()
            .map(|t| {
                let pred = teacher.predict(&t.image, table, fusion);
                let q = confidence(&pred.probs, cfg.tau);
                let instances = pred
                    .instances
                    .into_iter()
                    .filter(|i| i.score > cfg.tau_inst)
                    .collect();
                PseudoLabel { p: pseudo_label(&pred.probs), q, instances }
            })
            .collect()
    } else {
        Vec::new()
    };

    let g = Graph::new();
    let bind = ParamBinding::new(&state.student.params, true);
    let mut total = g.scalar(T::zero());
    let batch = source.len();
    let bscale = T::from_f64(1.0 / batch as f64);

    for (bi, src) in source.iter().enumerate() {
        let label = src.label.as_ref().expect("source samples must be labeled");
        let (h, w, _) = src.image.dim();
        // supervised source losses (+ FD on the source encoder features)
        let (sup, feats) =
            state
                .student
                .sup_losses_feats(&g, &bind, &src.image, label, table, &mut state.rng);
        log.source_semantic += scalar(&g, sup.semantic) / batch as f64;
        let src_inst = combine_instance(&g, &sup.td, &sup.bu, weights);
        log.source_instance += scalar(&g, src_inst) / batch as f64;
        let mut per_image = g.add(g.scale(sup.semantic, T::from_f64(weights.semantic)), src_inst);
        if cfg.fd {
            if let Some(frozen_s32) = frozen_feature(state, &src.image) {
                let fd = feature_distance_loss(&g, feats[3], frozen_s32, label, table);
                log.fd += scalar(&g, fd) / batch as f64;
                per_image = g.add(per_image, g.scale(fd, T::from_f64(cfg.lambda_fd)));
            }
        }

        // target part: ClassMix + weighted losses on the mixed image
        if cfg.self_training && bi < target.len() {
            let pl = &pseudo[bi];
            let mix = classmix(src, &target[bi].image, pl, table, &mut state.rng);
            let aug = student_augment(&mix.image, cfg.jitter, cfg.blur_prob, &mut state.rng);
            let img = image_tensor(&g, &aug);
            let mfeats = state.student.encoder_feats(&g, &bind, img);
            let logits = state.student.semantic_logits_from(&g, &bind, &mfeats, h, w);
            // per-pixel-origin weighting: 1 on pasted source pixels, q on
            // target pixels, normalized over all valid pixels together
            let not_src = mix.source_mask.mapv(|m| !m);
            let (ce_s, n_s) =
                semantic_ce(&g, logits, &mix.semantic, state.student.cfg.num_classes, Some(&mix.source_mask));
            let (ce_t, n_t) =
                semantic_ce(&g, logits, &mix.semantic, state.student.cfg.num_classes, Some(&not_src));
            let n = (n_s + n_t).max(1) as f64;
            let mixed_sem = g.add(
                g.scale(ce_s, T::from_f64(n_s as f64 / n)),
                g.scale(ce_t, T::from_f64(mix.q * n_t as f64 / n)),
            );
            log.mixed_semantic += scalar(&g, mixed_sem) / batch as f64;
            let mut mixed = g.scale(mixed_sem, T::from_f64(weights.semantic));
            // instance losses: source-part instances at weight 1, teacher-
            // part instances scaled by q
            let inst_feats = state.student.instance_feats(&g, &bind, img, &mfeats);
            let td_s = state
                .student
                .td_losses(&g, &bind, &inst_feats, &mix.source_part, table, &mut state.rng);
            let bu_s = state
                .student
                .bu_losses(&g, &bind, &mfeats, &mix.source_part, table, h, w);
            let inst_s = combine_instance(&g, &td_s, &bu_s, weights);
            let mut mixed_inst = inst_s;
            if mix.teacher_part.instance.iter().any(|&i| i > 0) {
                let td_t = state
                    .student
                    .td_losses(&g, &bind, &inst_feats, &mix.teacher_part, table, &mut state.rng);
                let bu_t = state
                    .student
                    .bu_losses(&g, &bind, &mfeats, &mix.teacher_part, table, h, w);
                let inst_t = combine_instance(&g, &td_t, &bu_t, weights);
                mixed_inst = g.add(mixed_inst, g.scale(inst_t, T::from_f64(mix.q)));
            }
            log.mixed_instance += scalar(&g, mixed_inst) / batch as f64;
            log.q += mix.q / batch as f64;
            mixed = g.add(mixed, mixed_inst);
            per_image = g.add(per_image, mixed);
        }
        total = g.add(total, g.scale(per_image, bscale));
    }

    log.total = scalar(&g, total);
    let grads = g.backward(total);
    let mut grad_vec: Vec<Option<ArrayD<T>>> = vec![None; state.student.params.len()];
    for (id, tv) in bind.bound() {
        grad_vec[id.0] = grads.get(tv).cloned();
    }
    drop(bind);
    state.opt.step(&mut state.student.params, &grad_vec, lr);
    if cfg.mean_teacher {
        ema_update(&mut state.teacher, &state.student.params, cfg.alpha);
    } else {
        state.teacher = state.student.params.clone();
    }
    state.iter += 1;
    log
}

/// Frozen-encoder stride-32 feature for an image, as a graph constant.
fn frozen_feature<T: Real>(state: &TrainState<T>, image: &Array3<f32>) -> Option<Rc<ArrayD<T>>> {
    let (store, enc) = state.frozen.as_ref()?;
    let g = Graph::new();
    let bind = ParamBinding::new(store, false);
    let img = image_tensor(&g, image);
    let feats = enc.fwd(&g, &bind, img);
    Some(g.value(feats[3]))
}
