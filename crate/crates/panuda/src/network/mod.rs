//! Network topologies over a shared transformer encoder: semantic-only
//! (`SNet`), two fully separate networks (`MNet`), and shared-encoder
//! variants with a bottom-up (`MDecBU`) or top-down (`MDecTD`) instance
//! decoder.

pub mod bu;
pub mod encoder;
pub mod layers;
pub mod semantic;
pub mod td;

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{ClassTable, InstancePrediction, PanopticLabel, VOID_CLASS};
use crate::fusion::{fuse_topdown, group_centers, FusionConfig};
use crate::real::Real;
use crate::tensor::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, Tv};

use bu::{bu_targets, split_bu_output};
use encoder::{Encoder, EncoderConfig};
use semantic::SemanticDecoder;
use td::{TdLosses, TopDownHead};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// semantic decoder only; instances from connected components
    SNet,
    /// two independent networks: semantic, and top-down instance
    MNet,
    /// shared encoder, semantic + bottom-up instance decoders
    MDecBU,
    /// shared encoder, semantic + top-down instance decoders
    MDecTD,
}

impl std::str::FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "s-net" => Ok(Topology::SNet),
            "m-net" => Ok(Topology::MNet),
            "m-dec-bu" => Ok(Topology::MDecBU),
            "m-dec-td" => Ok(Topology::MDecTD),
            other => Err(format!("unknown topology: {other}")),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Topology::SNet => "s-net",
            Topology::MNet => "m-net",
            Topology::MDecBU => "m-dec-bu",
            Topology::MDecTD => "m-dec-td",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topology: Topology,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub num_things: usize,
    /// parameter initialization seed
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(topology: Topology, table: &ClassTable, seed: u64) -> Self {
        ModelConfig {
            topology,
            encoder: EncoderConfig::default(),
            num_classes: table.len(),
            num_things: table.thing_ids().len(),
            seed,
        }
    }
}

struct Arch {
    enc: Encoder,
    sem: SemanticDecoder,
    /// second encoder for the instance branch (MNet only)
    inst_enc: Option<Encoder>,
    bu: Option<SemanticDecoder>,
    td: Option<TopDownHead>,
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

/// Per-image supervised losses; tensor handles live in the caller's graph.
pub struct SupLosses {
    pub semantic: Tv,
    pub td: Option<TdLosses>,
    /// (heatmap MSE, offset L1), unweighted
    pub bu: Option<(Tv, Tv)>,
}

/// Loss weights; setting a weight to zero disables the term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub semantic: f64,
    pub rpn_obj: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub box_reg: f64,
    pub mask: f64,
    pub heatmap: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            semantic: 1.0,
            rpn_obj: 1.0,
            rpn_box: 1.0,
            cls: 1.0,
            box_reg: 1.0,
            mask: 1.0,
            heatmap: bu::HEATMAP_WEIGHT,
            offset: bu::OFFSET_WEIGHT,
        }
    }
}

/// Cross entropy over a `[C,H,W]` logit map against a `u8` target map.
/// Void pixels and pixels outside `select` are ignored; the loss is the mean
/// over the remaining pixels. Returns the loss and the pixel count.
pub fn semantic_ce<T: Real>(
    g: &Graph<T>,
    logits: Tv,
    target: &Array2<u8>,
    num_classes: usize,
    select: Option<&Array2<bool>>,
) -> (Tv, usize) {
    let s = g.shape(logits);
    let (c, h, w) = (s[0], s[1], s[2]);
    assert_eq!((h, w), target.dim(), "semantic_ce: shape mismatch");
    assert_eq!(c, num_classes);
    let tokens = g.reshape(g.permute(logits, &[1, 2, 0]), &[h * w, c]);
    let mut t = Vec::with_capacity(h * w);
    let mut count = 0usize;
    for ((y, x), &cls) in target.indexed_iter() {
        let keep = cls != VOID_CLASS && select.map_or(true, |m| m[[y, x]]);
        if keep {
            t.push(cls as usize);
            count += 1;
        } else {
            t.push(usize::MAX);
        }
    }
    let loss = g.cross_entropy(tokens, Rc::new(t), Rc::new(vec![T::one(); h * w]));
    (loss, count)
}

/// Host-side `[H,W,3]` image to a `[3,H,W]` constant tensor.
pub fn image_tensor<T: Real>(g: &Graph<T>, image: &Array3<f32>) -> Tv {
    let (h, w, _) = image.dim();
    let mut arr = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                arr[[ch, y, x]] = T::from_f64(image[[y, x, ch]] as f64);
            }
        }
    }
    g.constant(arr)
}

/// Full inference output for one image.
pub struct Prediction {
    pub semantic: Array2<u8>,
    /// per-class softmax probabilities `[C,H,W]`
    pub probs: ndarray::Array3<f64>,
    pub instances: Vec<InstancePrediction>,
    pub panoptic: PanopticLabel,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc = Encoder::new(&mut ps, &mut rng, "enc", &cfg.encoder);
        let sem = SemanticDecoder::new(&mut ps, &mut rng, "sem", &cfg.encoder.widths, cfg.num_classes);
        let mut inst_enc = None;
        let mut bu = None;
        let mut td = None;
        match cfg.topology {
            Topology::SNet => {}
            Topology::MNet => {
                inst_enc = Some(Encoder::new(&mut ps, &mut rng, "enc2", &cfg.encoder));
                td = Some(TopDownHead::new(&mut ps, &mut rng, "td", &cfg.encoder.widths, cfg.num_things));
            }
            Topology::MDecBU => {
                bu = Some(SemanticDecoder::new(&mut ps, &mut rng, "bu", &cfg.encoder.widths, 3));
            }
            Topology::MDecTD => {
                td = Some(TopDownHead::new(&mut ps, &mut rng, "td", &cfg.encoder.widths, cfg.num_things));
            }
        }
        Model {
            cfg,
            params: ps,
            arch: Arch { enc, sem, inst_enc, bu, td },
        }
    }

    /// Replace parameter values (e.g. from a checkpoint); shapes must match
    /// the architecture built from `cfg`.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<(), String> {
        if !self.params.same_shape(&params) {
            return Err("checkpoint parameters do not match the model architecture".into());
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Encoder parameters shared between the semantic and instance branches:
    /// zero when the instance branch has its own encoder or no parameters,
    /// otherwise the size of the common encoder.
    pub fn shared_encoder_params(&self) -> usize {
        if self.arch.inst_enc.is_some() || (self.arch.td.is_none() && self.arch.bu.is_none()) {
            return 0;
        }
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with("enc."))
            .map(|id| self.params.value(id).len())
            .sum()
    }

    /// Pyramid features of the semantic branch encoder.
    pub fn encoder_feats(&self, g: &Graph<T>, bind: &ParamBinding<T>, image: Tv) -> Vec<Tv> {
        self.arch.enc.fwd(g, bind, image)
    }

    pub fn semantic_logits_from(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        feats: &[Tv],
        h: usize,
        w: usize,
    ) -> Tv {
        self.arch.sem.fwd(g, bind, feats, h, w)
    }

    /// Supervised losses for one labeled image. `rng` drives proposal and
    /// anchor sampling in the top-down branch.
    pub fn sup_losses(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        image: &Array3<f32>,
        label: &PanopticLabel,
        table: &ClassTable,
        rng: &mut ChaCha8Rng,
    ) -> SupLosses {
        self.sup_losses_feats(g, bind, image, label, table, rng).0
    }

    /// Like [`Model::sup_losses`] but also returns the semantic-branch
    /// encoder pyramid (for feature-level regularizers).
    pub fn sup_losses_feats(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        image: &Array3<f32>,
        label: &PanopticLabel,
        table: &ClassTable,
        rng: &mut ChaCha8Rng,
    ) -> (SupLosses, Vec<Tv>) {
        let (h, w, _) = image.dim();
        let img = image_tensor(g, image);
        let feats = self.encoder_feats(g, bind, img);
        let logits = self.semantic_logits_from(g, bind, &feats, h, w);
        let (semantic, _) = semantic_ce(g, logits, &label.semantic, self.cfg.num_classes, None);
        let inst_feats = self.instance_feats(g, bind, img, &feats);
        let td = self.td_losses(g, bind, &inst_feats, label, table, rng);
        let bu = self.bu_losses(g, bind, &feats, label, table, h, w);
        (SupLosses { semantic, td, bu }, feats)
    }

    /// Features feeding the instance branch: the second encoder's pyramid
    /// when the topology has one, otherwise the shared pyramid.
    pub fn instance_feats(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        img: Tv,
        sem_feats: &[Tv],
    ) -> Vec<Tv> {
        match &self.arch.inst_enc {
            Some(enc2) => enc2.fwd(g, bind, img),
            None => sem_feats.to_vec(),
        }
    }

    pub fn has_td(&self) -> bool {
        self.arch.td.is_some()
    }

    pub fn has_bu(&self) -> bool {
        self.arch.bu.is_some()
    }

    /// Top-down losses against an arbitrary (possibly pseudo) label.
    pub fn td_losses(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        inst_feats: &[Tv],
        label: &PanopticLabel,
        table: &ClassTable,
        rng: &mut ChaCha8Rng,
    ) -> Option<TdLosses> {
        self.arch
            .td
            .as_ref()
            .map(|head| head.losses(g, bind, inst_feats, label, table, rng))
    }

    /// Bottom-up (heatmap MSE, offset L1) against an arbitrary label.
    pub fn bu_losses(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        feats: &[Tv],
        label: &PanopticLabel,
        table: &ClassTable,
        h: usize,
        w: usize,
    ) -> Option<(Tv, Tv)> {
        self.arch.bu.as_ref().map(|dec| {
            let out = dec.fwd(g, bind, &feats, h, w);
            let t = bu_targets(label, table);
            let mut target = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, h, w]));
            let mut heat_w = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, h, w]));
            let mut off_w = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, h, w]));
            for y in 0..h {
                for x in 0..w {
                    target[[0, y, x]] = T::from_f64(t.heatmap[[y, x]]);
                    target[[1, y, x]] = T::from_f64(t.offsets[[0, y, x]]);
                    target[[2, y, x]] = T::from_f64(t.offsets[[1, y, x]]);
                    heat_w[[0, y, x]] = T::one();
                    if t.thing_mask[[y, x]] {
                        off_w[[1, y, x]] = T::one();
                        off_w[[2, y, x]] = T::one();
                    }
                }
            }
            let target = Rc::new(target);
            // mse normalizes by the full element count (3HW); rescale to a
            // mean over the heatmap channel
            let heat = g.scale(
                g.mse_loss(out, target.clone(), Rc::new(heat_w)),
                T::from_f64(3.0),
            );
            let off = g.l1_loss(out, target, Rc::new(off_w));
            (heat, off)
        })
    }

    /// Combine a [`SupLosses`] into a single scalar with the given weights.
    pub fn combine(&self, g: &Graph<T>, l: &SupLosses, w: &LossWeights) -> Tv {
        let mut total = g.scale(l.semantic, T::from_f64(w.semantic));
        if let Some(td) = &l.td {
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
        if let Some((heat, off)) = &l.bu {
            if w.heatmap != 0.0 {
                total = g.add(total, g.scale(*heat, T::from_f64(w.heatmap)));
            }
            if w.offset != 0.0 {
                total = g.add(total, g.scale(*off, T::from_f64(w.offset)));
            }
        }
        total
    }

    /// Full panoptic inference for one image.
    pub fn predict(
        &self,
        image: &Array3<f32>,
        table: &ClassTable,
        fusion: &FusionConfig,
    ) -> Prediction {
        let (h, w, _) = image.dim();
        let g = Graph::new();
        let bind = ParamBinding::new(&self.params, false);
        let img = image_tensor(&g, image);
        let feats = self.encoder_feats(&g, &bind, img);
        let logits = self.semantic_logits_from(&g, &bind, &feats, h, w);
        let lv = g.value(logits);
        let c = self.cfg.num_classes;
        let mut probs = ndarray::Array3::<f64>::zeros((c, h, w));
        let mut semantic = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut maxv = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for k in 0..c {
                    let v = lv[[k, y, x]].to_f64();
                    if v > maxv {
                        maxv = v;
                        arg = k;
                    }
                }
                let mut z = 0.0;
                for k in 0..c {
                    let e = (lv[[k, y, x]].to_f64() - maxv).exp();
                    probs[[k, y, x]] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[[k, y, x]] /= z;
                }
                semantic[[y, x]] = arg as u8;
            }
        }

        let (instances, panoptic) = match self.cfg.topology {
            Topology::SNet => {
                let (instances, panoptic) = components_panoptic(&semantic, &probs, table);
                (instances, panoptic)
            }
            Topology::MDecBU => {
                let dec = self.arch.bu.as_ref().unwrap();
                let out = dec.fwd(&g, &bind, &feats, h, w);
                let (heat, off) = split_bu_output(g.value(out).as_ref());
                let panoptic = group_centers(&semantic, &heat, &off, table, fusion);
                let instances = instances_from_panoptic(&panoptic, &heat, table);
                (instances, panoptic)
            }
            Topology::MNet | Topology::MDecTD => {
                let head = self.arch.td.as_ref().unwrap();
                let inst_feats = match &self.arch.inst_enc {
                    Some(enc2) => enc2.fwd(&g, &bind, img),
                    None => feats,
                };
                let dets = head.detect(&g, &bind, &inst_feats, table, h, w);
                let panoptic = fuse_topdown(&semantic, &dets, table, fusion);
                (dets, panoptic)
            }
        };
        Prediction { semantic, probs, instances, panoptic }
    }
}

/// Instance masks recovered from a fused panoptic label, scored by the peak
/// heatmap value under each instance.
fn instances_from_panoptic(
    panoptic: &PanopticLabel,
    heatmap: &Array2<f64>,
    table: &ClassTable,
) -> Vec<InstancePrediction> {
    let mut by_id: std::collections::BTreeMap<u16, (u8, Vec<(usize, usize)>)> =
        std::collections::BTreeMap::new();
    for ((y, x), &i) in panoptic.instance.indexed_iter() {
        if i > 0 && table.is_thing(panoptic.semantic[[y, x]]) {
            by_id
                .entry(i)
                .or_insert((panoptic.semantic[[y, x]], Vec::new()))
                .1
                .push((y, x));
        }
    }
    let (h, w) = panoptic.semantic.dim();
    by_id
        .into_values()
        .map(|(class_id, pixels)| {
            let mut mask = Array2::from_elem((h, w), false);
            let mut score: f64 = 0.0;
            for &(y, x) in &pixels {
                mask[[y, x]] = true;
                score = score.max(heatmap[[y, x]]);
            }
            InstancePrediction { mask, class_id, score }
        })
        .collect()
}

/// Semantic-only instance recovery: 4-connected components of each thing
/// class, scored by the mean class probability. Components smaller than 4
/// pixels are discarded as noise.
pub fn components_panoptic(
    semantic: &Array2<u8>,
    probs: &ndarray::Array3<f64>,
    table: &ClassTable,
) -> (Vec<InstancePrediction>, PanopticLabel) {
    let (h, w) = semantic.dim();
    let mut instance = Array2::<u16>::zeros((h, w));
    let mut out_sem = semantic.clone();
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut instances = Vec::new();
    let mut next_id: u16 = 1;
    for y in 0..h {
        for x in 0..w {
            let c = semantic[[y, x]];
            if visited[[y, x]] || !table.is_thing(c) {
                continue;
            }
            let mut comp = vec![(y, x)];
            visited[[y, x]] = true;
            let mut stack = vec![(y, x)];
            while let Some((cy, cx)) = stack.pop() {
                for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let ny = cy as i64 + dy;
                    let nx = cx as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !visited[[ny, nx]] && semantic[[ny, nx]] == c {
                        visited[[ny, nx]] = true;
                        comp.push((ny, nx));
                        stack.push((ny, nx));
                    }
                }
            }
            if comp.len() < 4 {
                for &(py, px) in &comp {
                    out_sem[[py, px]] = VOID_CLASS;
                }
                continue;
            }
            let mut mask = Array2::from_elem((h, w), false);
            let mut score = 0.0;
            for &(py, px) in &comp {
                mask[[py, px]] = true;
                instance[[py, px]] = next_id;
                score += probs[[c as usize, py, px]];
            }
            score /= comp.len() as f64;
            instances.push(InstancePrediction { mask, class_id: c, score });
            next_id += 1;
        }
    }
    (
        instances,
        PanopticLabel { semantic: out_sem, instance },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::validate_panoptic;
    use crate::toydata::{generate_scene, toy_class_table, SceneSpec};
    use crate::core::Domain;

    fn small_cfg(topology: Topology) -> ModelConfig {
        ModelConfig {
            topology,
            encoder: EncoderConfig {
                widths: [8, 16, 24, 32],
                depths: [1, 1, 1, 1],
                heads: [1, 2, 4, 4],
                sr_ratios: [8, 4, 2, 1],
                ffn_expand: 2,
            },
            num_classes: 8,
            num_things: 3,
            seed: 0,
        }
    }

    #[test]
    fn parameter_counts_order_by_topology() {
        let s: Model<f32> = Model::new(small_cfg(Topology::SNet));
        let bu: Model<f32> = Model::new(small_cfg(Topology::MDecBU));
        let tdm: Model<f32> = Model::new(small_cfg(Topology::MDecTD));
        let m: Model<f32> = Model::new(small_cfg(Topology::MNet));
        assert!(s.num_params() < bu.num_params());
        assert!(s.num_params() < tdm.num_params());
        // the two-network variant pays for a second encoder
        assert!(tdm.num_params() < m.num_params());
        assert!(bu.num_params() < m.num_params());
    }

    #[test]
    fn shared_encoder_has_single_parameter_set() {
        let tdm: Model<f32> = Model::new(small_cfg(Topology::MDecTD));
        let enc2: Vec<_> = tdm
            .params
            .ids()
            .filter(|&id| tdm.params.name(id).starts_with("enc2."))
            .collect();
        assert!(enc2.is_empty(), "shared-encoder model must not own a second encoder");
        let m: Model<f32> = Model::new(small_cfg(Topology::MNet));
        let enc2 = m
            .params
            .ids()
            .filter(|id| m.params.name(*id).starts_with("enc2."))
            .count();
        let enc1 = m
            .params
            .ids()
            .filter(|id| m.params.name(*id).starts_with("enc."))
            .count();
        assert!(enc2 > 0);
        assert_eq!(enc1, enc2, "both encoders share one architecture");
    }

    #[test]
    fn forward_shapes_and_losses_finite() {
        let table = toy_class_table();
        let sample = generate_scene(&SceneSpec::toy(1, Domain::Source, 64));
        let label = sample.label.clone().unwrap();
        for topo in [Topology::SNet, Topology::MNet, Topology::MDecBU, Topology::MDecTD] {
            let model: Model<f32> = Model::new(small_cfg(topo));
            let g = Graph::new();
            let bind = ParamBinding::new(&model.params, true);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let losses = model.sup_losses(&g, &bind, &sample.image, &label, &table, &mut rng);
            let total = model.combine(&g, &losses, &LossWeights::default());
            let v = g.value(total)[[]].to_f64();
            assert!(v.is_finite(), "{topo}: loss not finite");
            assert!(v > 0.0, "{topo}: loss should be positive at init");
            let grads = g.backward(total);
            let got: usize = bind
                .bound()
                .iter()
                .filter(|(_, tv)| grads.get(*tv).is_some())
                .count();
            assert!(got > 0, "{topo}: no gradients");
        }
    }

    #[test]
    fn predict_outputs_valid_panoptic_for_all_topologies() {
        let table = toy_class_table();
        let sample = generate_scene(&SceneSpec::toy(2, Domain::Source, 64));
        let fusion = FusionConfig { score_threshold: 0.1, ..Default::default() };
        for topo in [Topology::SNet, Topology::MNet, Topology::MDecBU, Topology::MDecTD] {
            let model: Model<f32> = Model::new(small_cfg(topo));
            let p = model.predict(&sample.image, &table, &fusion);
            assert_eq!(p.semantic.dim(), (64, 64));
            let v = validate_panoptic(&p.panoptic, &table);
            assert!(v.is_empty(), "{topo}: {v:?}");
            // probabilities are a distribution
            let mut s = 0.0;
            for k in 0..8 {
                s += p.probs[[k, 10, 10]];
            }
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_initialization_and_forward() {
        let table = toy_class_table();
        let sample = generate_scene(&SceneSpec::toy(3, Domain::Source, 64));
        let a: Model<f32> = Model::new(small_cfg(Topology::MDecTD));
        let b: Model<f32> = Model::new(small_cfg(Topology::MDecTD));
        let fusion = FusionConfig::default();
        let pa = a.predict(&sample.image, &table, &fusion);
        let pb = b.predict(&sample.image, &table, &fusion);
        assert_eq!(pa.semantic, pb.semantic);
        assert_eq!(pa.panoptic, pb.panoptic);
    }

    #[test]
    fn components_extraction_splits_disjoint_regions() {
        let table = toy_class_table();
        let mut semantic = Array2::from_elem((10, 10), 3u8);
        for y in 1..4 {
            for x in 1..4 {
                semantic[[y, x]] = 5;
            }
        }
        for y in 6..9 {
            for x in 6..9 {
                semantic[[y, x]] = 5;
            }
        }
        let probs = ndarray::Array3::from_elem((8, 10, 10), 0.125);
        let (instances, pan) = components_panoptic(&semantic, &probs, &table);
        assert_eq!(instances.len(), 2);
        assert!(validate_panoptic(&pan, &table).is_empty());
        assert_ne!(pan.instance[[2, 2]], pan.instance[[7, 7]]);
    }
}
