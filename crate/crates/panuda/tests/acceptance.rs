//! Release gate: one test per acceptance criterion, each printing a single
//! verdict line. Run with `cargo test --test acceptance -- --nocapture` to
//! see the lines for passing criteria too.

use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panuda::core::{extract_segments, validate_panoptic, Domain, PanopticLabel, Segment, VOID_CLASS};
use panuda::fusion::{find_centers, fuse_topdown, group_centers, FusionConfig};
use panuda::harness::{
    cmd_evaluate, cmd_generate_data, cmd_study, cmd_train, load_checkpoint, train_eval_summary,
    DataSpec, ExperimentConfig, Profile,
};
use panuda::metrics::{match_segments, panoptic_quality, relative_uda};
use panuda::network::encoder::EncoderConfig;
use panuda::network::{image_tensor, semantic_ce, LossWeights, Model, ModelConfig, Topology};
use panuda::tensor::params::{ParamBinding, ParamStore};
use panuda::tensor::Graph;
use panuda::toydata::{generate_scene, toy_class_table, SceneSpec};
use panuda::uda::{
    classmix, confidence, ema_update, feature_distance_loss, pseudo_label, rcs_probabilities,
    PseudoLabel, RcSampler,
};

fn verdict(n: usize, what: &str, pass: bool) {
    // the single pass/fail line each criterion must emit
    println!("criterion {n} ({what}): {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({what}) failed");
}

fn random_label(rng: &mut ChaCha8Rng, num_classes: u8, max_things: u16) -> PanopticLabel {
    let h = rng.gen_range(8..=32);
    let w = rng.gen_range(8..=32);
    let mut sem = Array2::<u8>::zeros((h, w));
    let mut inst = Array2::<u16>::zeros((h, w));
    // random rectangles over a stuff background, things get instance ids
    let table = toy_class_table();
    for _ in 0..rng.gen_range(0..10u32) {
        let c = rng.gen_range(0..num_classes);
        let y0 = rng.gen_range(0..h);
        let x0 = rng.gen_range(0..w);
        let hh = rng.gen_range(1..=h - y0);
        let ww = rng.gen_range(1..=w - x0);
        let id = if table.is_thing(c) { rng.gen_range(1..=max_things) } else { 0 };
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                sem[[y, x]] = c;
                inst[[y, x]] = id;
            }
        }
    }
    if rng.gen_bool(0.2) {
        let y = rng.gen_range(0..h);
        for x in 0..w {
            sem[[y, x]] = VOID_CLASS;
            inst[[y, x]] = 0;
        }
    }
    PanopticLabel { semantic: sem, instance: inst }
}

/// All-pairs greedy oracle: since IoU > 0.5 matches are unique, collecting
/// every pair above 0.5 must equal the library's matcher.
fn brute_force_matches(
    gt: &[Segment],
    pred: &[Segment],
    void_pixels: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let gs: HashSet<(usize, usize)> = g.pixels.iter().copied().collect();
            let ps: HashSet<(usize, usize)> =
                p.pixels.iter().filter(|px| !void_pixels.contains(px)).copied().collect();
            if g.class_id != p.class_id {
                continue;
            }
            let inter = gs.intersection(&ps).count() as f64;
            let union = (gs.len() + ps.len()) as f64 - inter;
            if union > 0.0 && inter / union > 0.5 {
                out.push((gi, pi, inter / union));
            }
        }
    }
    out
}

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let table = toy_class_table();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut pass = true;
    for _ in 0..1000 {
        let gt = random_label(&mut rng, 8, 4);
        let mut pred = random_label(&mut rng, 8, 4);
        // force matching dims
        if pred.semantic.dim() != gt.semantic.dim() {
            let (h, w) = gt.semantic.dim();
            pred = PanopticLabel {
                semantic: Array2::from_shape_fn((h, w), |(y, x)| {
                    let (ph, pw) = pred.semantic.dim();
                    pred.semantic[[y % ph, x % pw]]
                }),
                instance: Array2::from_shape_fn((h, w), |(y, x)| {
                    let (ph, pw) = pred.instance.dim();
                    pred.instance[[y % ph, x % pw]]
                }),
            };
        }
        let void: HashSet<(usize, usize)> = gt
            .semantic
            .indexed_iter()
            .filter(|&(_, &c)| c == VOID_CLASS)
            .map(|(p, _)| p)
            .collect();
        let gt_segs = extract_segments(&gt);
        let pred_segs = extract_segments(&pred);
        let lib = match_segments(&gt_segs, &pred_segs, &void);
        let oracle = brute_force_matches(&gt_segs, &pred_segs, &void);
        let lib_set: HashSet<(usize, usize)> =
            lib.iter().map(|m| (m.gt_idx, m.pred_idx)).collect();
        let oracle_set: HashSet<(usize, usize)> =
            oracle.iter().map(|&(g, p, _)| (g, p)).collect();
        if lib_set != oracle_set {
            pass = false;
            break;
        }
        let report = panoptic_quality(&[(&gt, &pred)], &table);
        for c in &report.per_class {
            if (c.pq - c.sq * c.rq).abs() > 1e-12 {
                pass = false;
            }
        }
    }
    verdict(1, "metric oracle equivalence", pass);
}

#[test]
fn criterion_2_formula_unit_suite() {
    let mut pass = true;

    // pseudo-label argmax with tie to the lowest id
    let mut probs = Array3::<f64>::zeros((3, 1, 2));
    probs[[1, 0, 0]] = 0.4;
    probs[[2, 0, 0]] = 0.4;
    probs[[0, 0, 1]] = 1.0;
    let p = pseudo_label(&probs);
    pass &= p[[0, 0]] == 1 && p[[0, 1]] == 0;

    // confidence over the full pixel count
    let mut probs = Array3::<f64>::zeros((2, 2, 2));
    probs[[0, 0, 0]] = 0.98;
    probs[[0, 0, 1]] = 0.97;
    probs[[0, 1, 0]] = 0.5;
    probs[[0, 1, 1]] = 0.5;
    pass &= (confidence(&probs, 0.968) - 0.5).abs() < 1e-9;

    // EMA closed form: after n steps against a fixed student,
    // teacher = a^n t0 + (1 - a^n) s
    let mut t = ParamStore::<f64>::new();
    t.add("w", ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0));
    let mut s = ParamStore::<f64>::new();
    s.add("w", ArrayD::from_elem(ndarray::IxDyn(&[1]), -3.0));
    let a: f64 = 0.999;
    for _ in 0..500 {
        ema_update(&mut t, &s, a);
    }
    let expect = a.powi(500) * 2.0 + (1.0 - a.powi(500)) * (-3.0);
    pass &= (t.value(t.find("w").unwrap())[[0]] - expect).abs() < 1e-9;

    // sampling probabilities: derived vector and shift invariance
    let pr = rcs_probabilities(&[0.7, 0.2, 0.1], 1.0);
    pass &= (pr[0] - 0.2237).abs() < 5e-5
        && (pr[1] - 0.3688).abs() < 5e-5
        && (pr[2] - 0.4076).abs() < 5e-5;
    let shifted: Vec<f64> = [0.7, 0.2, 0.1].iter().map(|f| f + 0.3).collect();
    let pr2 = rcs_probabilities(&shifted, 1.0);
    // adding a constant to every frequency shifts all exponents equally
    for (x, y) in pr.iter().zip(&pr2) {
        pass &= (x - y).abs() < 1e-12;
    }

    // mixed semantic loss: hand-computed two-pixel case. Pixel A (source,
    // weight 1), pixel B (target, weight q); loss = (ceA + q ceB) / 2.
    let g = Graph::<f64>::new();
    let logits = g.leaf(
        ArrayD::from_shape_vec(ndarray::IxDyn(&[2, 1, 2]), vec![1.0, 0.5, -1.0, 0.25]).unwrap(),
        true,
    );
    let target = Array2::from_shape_vec((1, 2), vec![0u8, 1u8]).unwrap();
    let src_mask = Array2::from_shape_vec((1, 2), vec![true, false]).unwrap();
    let tgt_mask = src_mask.mapv(|m| !m);
    let (ce_s, n_s) = semantic_ce(&g, logits, &target, 2, Some(&src_mask));
    let (ce_t, n_t) = semantic_ce(&g, logits, &target, 2, Some(&tgt_mask));
    let q = 0.6;
    let combined = g.add(
        g.scale(ce_s, n_s as f64 / 2.0),
        g.scale(ce_t, q * n_t as f64 / 2.0),
    );
    let ce = |z0: f64, z1: f64, t: usize| {
        let m = z0.max(z1);
        let lse = ((z0 - m).exp() + (z1 - m).exp()).ln() + m;
        lse - if t == 0 { z0 } else { z1 }
    };
    let expect = (ce(1.0, -1.0, 0) + q * ce(0.5, 0.25, 1)) / 2.0;
    pass &= (g.value(combined)[[]] - expect).abs() < 1e-9;

    // feature distance is exactly zero against an identical frozen encoder
    let table = toy_class_table();
    let sample = generate_scene(&SceneSpec::toy(5, Domain::Source, 64));
    let cfg = EncoderConfig {
        widths: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 4, 4],
        sr_ratios: [8, 4, 2, 1],
        ffn_expand: 2,
    };
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = panuda::network::encoder::Encoder::new(&mut ps, &mut rng, "enc", &cfg);
    let g = Graph::new();
    let bind = ParamBinding::new(&ps, true);
    let feats = enc.fwd(&g, &bind, image_tensor(&g, &sample.image));
    let frozen = g.value(feats[3]);
    let fd = feature_distance_loss(&g, feats[3], frozen, sample.label.as_ref().unwrap(), &table);
    pass &= g.value(fd)[[]].abs() < 1e-12;

    verdict(2, "formula unit suite", pass);
}

#[test]
fn criterion_3_rcs_monte_carlo() {
    let probs = rcs_probabilities(&[0.7, 0.2, 0.1], 1.0);
    let sampler = RcSampler {
        probs: probs.iter().enumerate().map(|(c, &p)| (c as u8, p)).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sampler.draw_class(&mut rng) as usize] += 1;
    }
    let mut pass = true;
    for c in 0..3 {
        pass &= (counts[c] as f64 / n as f64 - probs[c]).abs() < 0.01;
    }
    // empty-subset exclusion: classes with no labeled image are never drawn
    // and the rest renormalize to one
    let ds = panuda::toydata::generate_dataset(
        4,
        Domain::Source,
        0,
        &panuda::toydata::ToyConfig { size: 32, ..Default::default() },
    );
    let sampler = RcSampler::new(&ds, 0.01).unwrap();
    for &(c, p) in &sampler.probs {
        pass &= !ds.per_class_index[&c].is_empty() && p > 0.0;
    }
    pass &= (sampler.probs.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12;
    let absent: Vec<u8> = (0..8u8)
        .filter(|c| ds.per_class_index[c].is_empty())
        .collect();
    for c in absent {
        pass &= !sampler.probs.iter().any(|&(sc, _)| sc == c);
    }
    verdict(3, "rare-class sampling Monte-Carlo", pass);
}

#[test]
fn criterion_4_classmix_provenance() {
    let table = toy_class_table();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut pass = true;
    'outer: for seed in 0..1000u64 {
        let src = generate_scene(&SceneSpec::toy(seed, Domain::Source, 32));
        let tgt = generate_scene(&SceneSpec::toy(seed + 5000, Domain::Target, 32));
        let probs = Array3::from_elem((8, 32, 32), 0.125);
        let pl = PseudoLabel { p: pseudo_label(&probs), q: 0.4, instances: vec![] };
        let mix = classmix(&src, &tgt.image, &pl, &table, &mut rng);
        let present = src.label.as_ref().unwrap().present_classes();
        if mix.selected.len() != (present.len() + 1) / 2 {
            pass = false;
            break;
        }
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let want = if mix.source_mask[[y, x]] {
                        src.image[[y, x, c]]
                    } else {
                        tgt.image[[y, x, c]]
                    };
                    if mix.image[[y, x, c]].to_bits() != want.to_bits() {
                        pass = false;
                        break 'outer;
                    }
                }
            }
        }
    }
    verdict(4, "ClassMix pixel provenance", pass);
}

#[test]
fn criterion_5_gradient_checks() {
    let table = toy_class_table();
    let sample = generate_scene(&SceneSpec::toy(11, Domain::Source, 32));
    let label = sample.label.as_ref().unwrap().clone();
    let enc = EncoderConfig {
        widths: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 4, 4],
        sr_ratios: [8, 4, 2, 1],
        ffn_expand: 2,
    };
    let mut pass = true;

    // every loss term as a scalar function of the parameter store
    let terms: Vec<(&str, Topology, Box<dyn Fn(&Model<f64>, &Graph<f64>, &ParamBinding<f64>) -> panuda::tensor::Tv>)> = vec![
        ("semantic-ce", Topology::SNet, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).semantic
        })),
        ("rpn-objectness", Topology::MDecTD, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).td.unwrap().rpn_obj
        })),
        ("rpn-box", Topology::MDecTD, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).td.unwrap().rpn_box
        })),
        ("roi-cls", Topology::MDecTD, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).td.unwrap().cls
        })),
        ("roi-box", Topology::MDecTD, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).td.unwrap().box_reg
        })),
        ("roi-mask", Topology::MDecTD, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).td.unwrap().mask
        })),
        ("center-heatmap", Topology::MDecBU, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).bu.unwrap().0
        })),
        ("center-offset", Topology::MDecBU, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| m.sup_losses(g, b, &s.image, &l, &t, &mut ChaCha8Rng::seed_from_u64(42)).bu.unwrap().1
        })),
        ("mixed-semantic", Topology::SNet, Box::new({
            let (s, l, _) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| {
                // weighted two-part CE over a synthetic source mask
                let img = image_tensor(g, &s.image);
                let feats = m.encoder_feats(g, b, img);
                let logits = m.semantic_logits_from(g, b, &feats, 32, 32);
                let mask = Array2::from_shape_fn((32, 32), |(y, _)| y < 16);
                let inv = mask.mapv(|v| !v);
                let (a, na) = semantic_ce(g, logits, &l.semantic, 8, Some(&mask));
                let (c, nc) = semantic_ce(g, logits, &l.semantic, 8, Some(&inv));
                let n = (na + nc) as f64;
                g.add(g.scale(a, na as f64 / n), g.scale(c, 0.7 * nc as f64 / n))
            }
        })),
        ("feature-distance", Topology::SNet, Box::new({
            let (s, l, t) = (sample.clone(), label.clone(), table.clone());
            move |m, g, b| {
                let img = image_tensor(g, &s.image);
                let feats = m.encoder_feats(g, b, img);
                let shape = g.value(feats[3]).raw_dim();
                let frozen = Rc::new(ArrayD::from_elem(shape, 0.05));
                feature_distance_loss(g, feats[3], frozen, &l, &t)
            }
        })),
    ];

    for (name, topo, f) in &terms {
        let model = Model::<f64>::new(ModelConfig {
            topology: *topo,
            encoder: enc.clone(),
            num_classes: 8,
            num_things: 3,
            seed: 1,
        });
        let loss_at = |ps: &ParamStore<f64>| -> f64 {
            let g = Graph::new();
            let bind = ParamBinding::new(ps, true);
            let t = f(&model, &g, &bind);
            g.value(t)[[]]
        };
        // analytic gradients
        let g = Graph::new();
        let bind = ParamBinding::new(&model.params, true);
        let loss = f(&model, &g, &bind);
        let grads = g.backward(loss);
        // probe the three largest-|grad| parameter entries (flat indices)
        let mut probes: Vec<(usize, usize, f64)> = Vec::new();
        for (pid, tv) in bind.bound() {
            if let Some(gr) = grads.get(tv) {
                for (flat, &v) in gr.iter().enumerate() {
                    probes.push((pid.0, flat, v));
                    probes.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap());
                    probes.truncate(3);
                }
            }
        }
        drop(bind);
        if probes.is_empty() {
            println!("  note: {name} produced no gradient — treated as failure");
            pass = false;
            continue;
        }
        for (pid, flat, analytic) in probes {
            let h = 1e-5 * (1.0 + analytic.abs()).min(10.0);
            let id = panuda::tensor::params::ParamId(pid);
            let mut plus = model.params.clone();
            plus.value_mut(id).as_slice_mut().unwrap()[flat] += h;
            let mut minus = model.params.clone();
            minus.value_mut(id).as_slice_mut().unwrap()[flat] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
            if rel > 1e-3 {
                println!("  {name}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})");
                pass = false;
            }
        }
    }
    verdict(5, "finite-difference gradient checks", pass);
}

#[test]
fn criterion_6_fusion_oracles() {
    let table = toy_class_table();
    let cfg = FusionConfig { center_threshold: 0.1, nms_kernel: 3, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pass = true;
    for _ in 0..200 {
        let h = rng.gen_range(6..20);
        let w = rng.gen_range(6..20);
        let sem = Array2::from_shape_fn((h, w), |_| if rng.gen_bool(0.5) { 5u8 } else { 0u8 });
        let heat = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let off = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-3.0..3.0f64));
        let out = group_centers(&sem, &heat, &off, &table, &cfg);
        if !validate_panoptic(&out, &table).is_empty() {
            pass = false;
            break;
        }
        // oracle: every thing pixel belongs to the nearest center after
        // applying its offset
        let centers = find_centers(&heat, &cfg);
        if centers.is_empty() {
            continue;
        }
        let mut groups: std::collections::HashMap<usize, Vec<(usize, usize)>> = Default::default();
        for y in 0..h {
            for x in 0..w {
                if !table.is_thing(sem[[y, x]]) {
                    continue;
                }
                let py = y as f64 + off[[0, y, x]];
                let px = x as f64 + off[[1, y, x]];
                let best = centers
                    .iter()
                    .enumerate()
                    .map(|(i, &(cy, cx, _))| {
                        let d = (py - cy as f64).powi(2) + (px - cx as f64).powi(2);
                        (i, d)
                    })
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                    .unwrap()
                    .0;
                groups.entry(best).or_default().push((y, x));
            }
        }
        // the output instance partition must refine exactly to these groups
        let mut seen: std::collections::HashMap<u16, usize> = Default::default();
        for (gi, pixels) in &groups {
            for &(y, x) in pixels {
                let id = out.instance[[y, x]];
                if id == 0 {
                    continue; // voided (semantic majority flip) pixels allowed
                }
                if let Some(&prev) = seen.get(&id) {
                    if prev != *gi {
                        pass = false;
                    }
                } else {
                    seen.insert(id, *gi);
                }
            }
        }
    }

    // top-down: score order decides overlaps; majority vote fixes the class
    let mut sem = Array2::<u8>::zeros((4, 6));
    for y in 0..4 {
        for x in 0..4 {
            sem[[y, x]] = 5;
        }
        for x in 4..6 {
            sem[[y, x]] = 6;
        }
    }
    let m1 = Array2::from_shape_fn((4, 6), |(_, x)| x < 4);
    let m2 = Array2::from_shape_fn((4, 6), |(_, x)| x >= 2);
    let preds = vec![
        panuda::core::InstancePrediction { mask: m1, class_id: 6, score: 0.99 },
        panuda::core::InstancePrediction { mask: m2, class_id: 5, score: 0.98 },
    ];
    let cfg2 = FusionConfig { score_threshold: 0.5, ..Default::default() };
    let fused = fuse_topdown(&sem, &preds, &table, &cfg2);
    pass &= validate_panoptic(&fused, &table).is_empty();
    // first mask covers semantic-majority class 5, so the vote overrides the
    // detector's class 6
    pass &= fused.semantic[[0, 0]] == 5;
    // second mask keeps only unclaimed columns and votes class 6
    pass &= fused.semantic[[0, 5]] == 6;
    pass &= fused.instance[[0, 0]] != fused.instance[[0, 5]];

    verdict(6, "fusion oracles", pass);
}

fn desk_test_config(root: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::profiled(Profile::Desk);
    cfg.data.root = root.join("data");
    cfg
}

#[test]
#[ignore = "long-running directional check; run with --ignored (also covered by scripts/acceptance_long.sh)"]
fn criterion_7_toy_adaptation_efficacy() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var("PANUDA_CACHE", tmp.path().join("cache"));
    let base = desk_test_config(tmp.path());
    cmd_generate_data(&base).unwrap();
    let seeds = [0u64, 1, 2];
    let mut uda = Vec::new();
    let mut src = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out = tmp.path().join(format!("uda-{seed}"));
        uda.push(train_eval_summary(&cfg).unwrap().mpq);
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.uda.self_training = false;
        cfg.uda.mean_teacher = false;
        cfg.uda.fd = false;
        cfg.uda.rcs = false;
        cfg.out = tmp.path().join(format!("src-{seed}"));
        src.push(train_eval_summary(&cfg).unwrap().mpq);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = (mean(&uda) - mean(&src)) * 100.0;
    println!("  full-UDA mPQ {:.3} vs source-only {:.3} (gap {gap:.1} points)", mean(&uda), mean(&src));
    verdict(7, "toy adaptation efficacy (gap >= 5 mPQ)", gap >= 5.0);
}

#[test]
#[ignore = "long-running directional check; run with --ignored (also covered by scripts/acceptance_long.sh)"]
fn criterion_8_toy_topology_trend() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var("PANUDA_CACHE", tmp.path().join("cache"));
    let mut cfg = desk_test_config(tmp.path());
    cfg.out = tmp.path().join("study");
    cmd_generate_data(&cfg).unwrap();
    let rows = cmd_study(&cfg).unwrap();
    let map_of = |t: Topology| rows.iter().find(|r| r.topology == t).unwrap().map.mean;
    let td = map_of(Topology::MDecTD);
    let snet = map_of(Topology::SNet);
    println!("  study mAP: m-dec-td {td:.3} vs s-net {snet:.3}");
    let mnet = rows.iter().find(|r| r.topology == Topology::MNet).unwrap();
    verdict(8, "toy topology trend (mAP m-dec-td > s-net)", td > snet && mnet.shared_params == 0);
}

#[test]
fn criterion_9_relative_uda_reference() {
    let v = relative_uda(41.2, 56.6);
    verdict(9, "relative adaptation score 41.2/56.6 = 72.7", (v - 72.7).abs() <= 0.05);
}

#[test]
fn criterion_10_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_test_config(tmp.path());
    cfg.encoder = EncoderConfig {
        widths: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 4, 4],
        sr_ratios: [8, 4, 2, 1],
        ffn_expand: 2,
    };
    cfg.data = DataSpec {
        root: tmp.path().join("data"),
        size: 32,
        n_source: 4,
        n_target: 4,
        n_eval: 2,
        seed: 3,
    };
    cfg.topology = Topology::SNet;
    cfg.train.iterations = 6;
    cfg.train.eval_every = 3;
    cfg.uda.fd = false;
    cmd_generate_data(&cfg).unwrap();
    let mut pass = true;

    // resumed (3+3) training bit-matches an unbroken 6-iteration run
    let mut unbroken = cfg.clone();
    unbroken.out = tmp.path().join("unbroken");
    cmd_train(&unbroken, false, None).unwrap();
    let mut resumed = cfg.clone();
    resumed.out = tmp.path().join("resumed");
    cmd_train(&resumed, false, Some(3)).unwrap();
    cmd_train(&resumed, true, None).unwrap();
    let a = load_checkpoint(&unbroken.out.join("checkpoints/final.ckpt")).unwrap();
    let b = load_checkpoint(&resumed.out.join("checkpoints/final.ckpt")).unwrap();
    pass &= bincode::serialize(&a.student).unwrap() == bincode::serialize(&b.student).unwrap();
    pass &= bincode::serialize(&a.teacher).unwrap() == bincode::serialize(&b.teacher).unwrap();

    // repeated evaluation is byte-identical
    let ckpt = unbroken.out.join("checkpoints/final.ckpt");
    let eval = cfg.data.root.join("target_eval");
    cmd_evaluate(&ckpt, &eval, &cfg.fusion, &tmp.path().join("e1"), false).unwrap();
    cmd_evaluate(&ckpt, &eval, &cfg.fusion, &tmp.path().join("e2"), false).unwrap();
    for f in ["report.json", "report.csv"] {
        pass &= std::fs::read(tmp.path().join("e1").join(f)).unwrap()
            == std::fs::read(tmp.path().join("e2").join(f)).unwrap();
    }
    verdict(10, "reproducibility (bit-exact resume, byte-identical eval)", pass);
}
