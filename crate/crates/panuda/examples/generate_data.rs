//! Generate a small source/target dataset pair and poke around in it.
//!
//!     cargo run --release --example generate_data

use panuda::core::Domain;
use panuda::toydata::{compute_class_frequencies, generate_dataset, read_dataset, write_dataset, ToyConfig};

fn main() -> anyhow::Result<()> {
    let cfg = ToyConfig { size: 64, ..Default::default() };
    let source = generate_dataset(8, Domain::Source, 0, &cfg);
    let target = generate_dataset(8, Domain::Target, 1_000_000, &cfg);

    let table = &source.class_table;
    println!("classes:");
    for e in table.entries() {
        println!("  {:>2} {:<12} {:?}", e.id, e.name, e.kind);
    }

    let freq = compute_class_frequencies(&source)?;
    println!("\nsource pixel frequencies:");
    for (e, f) in table.entries().iter().zip(&freq) {
        println!("  {:<12} {:.4}", e.name, f);
    }

    let dir = std::env::temp_dir().join("panuda-example-data");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    write_dataset(&source, &dir.join("source"))?;
    write_dataset(&target, &dir.join("target"))?;
    let back = read_dataset(&dir.join("source"))?;
    assert_eq!(back.len(), source.len());
    assert_eq!(back.samples[0].label, source.samples[0].label);
    println!("\nround-tripped {} samples through {}", back.len(), dir.display());
    Ok(())
}
