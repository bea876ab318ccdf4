//! The self-training machinery piece by piece: pseudo-labels, image-level
//! confidence, ClassMix with exact pixel provenance, and rare-class
//! sampling probabilities.
//!
//!     cargo run --release --example pseudo_labels

use panuda::core::Domain;
use panuda::toydata::{compute_class_frequencies, generate_dataset, generate_scene, toy_class_table, SceneSpec, ToyConfig};
use panuda::uda::{classmix, confidence, pseudo_label, rcs_probabilities, PseudoLabel, RcSampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let table = toy_class_table();
    let source = generate_scene(&SceneSpec::toy(3, Domain::Source, 64));
    let target = generate_scene(&SceneSpec::toy(9, Domain::Target, 64));

    // stand-in teacher output: uniform-ish probabilities with a bump on the
    // true class, as an untrained-but-not-random teacher would produce
    let gt = target.label.as_ref().unwrap();
    let c = table.entries().len();
    let mut probs = ndarray::Array3::<f64>::from_elem((c, 64, 64), 0.08);
    for ((y, x), &cls) in gt.semantic.indexed_iter() {
        if cls != panuda::VOID_CLASS {
            probs[[cls as usize, y, x]] = 0.97;
        }
    }
    let p = pseudo_label(&probs);
    let q = confidence(&probs, 0.968);
    println!("pseudo-label confidence q = {q:.3}");

    let pl = PseudoLabel { p, q, instances: vec![] };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mix = classmix(&source, &target.image, &pl, &table, &mut rng);
    let pasted: usize = mix.source_mask.iter().filter(|&&m| m).count();
    println!(
        "ClassMix pasted classes {:?} ({} of {} pixels)",
        mix.selected,
        pasted,
        64 * 64
    );

    // rare-class sampling: rare source classes are drawn far more often
    let ds = generate_dataset(16, Domain::Source, 0, &ToyConfig { size: 64, ..Default::default() });
    let f = compute_class_frequencies(&ds)?;
    let probs01 = rcs_probabilities(&f, 0.01);
    println!("\n{:<12} {:>9} {:>9}", "class", "freq", "P(draw)");
    for (e, (fc, pc)) in table.entries().iter().zip(f.iter().zip(&probs01)) {
        println!("{:<12} {:>9.4} {:>9.4}", e.name, fc, pc);
    }

    let sampler = RcSampler::new(&ds, 0.01)?;
    let mut counts = vec![0usize; c];
    for _ in 0..1000 {
        counts[sampler.draw_class(&mut rng) as usize] += 1;
    }
    println!("\n1000 draws: {counts:?}");
    Ok(())
}
