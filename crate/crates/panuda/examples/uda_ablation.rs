//! Miniature adaptation-strategy ablation: the five cumulative rows
//! (source-only → +self-training → +mean-teacher → +feature-distance →
//! +rare-class-sampling). The full-size version is `panuda ablate`.
//!
//!     cargo run --release --example uda_ablation

use panuda::harness::{
    cmd_ablate, cmd_generate_data, AblateMode, DataSpec, ExperimentConfig, Profile,
};
use panuda::network::encoder::EncoderConfig;
use panuda::network::Topology;

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("panuda-example-ablate");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }

    let mut cfg = ExperimentConfig::profiled(Profile::Desk);
    cfg.topology = Topology::SNet;
    cfg.encoder = EncoderConfig {
        widths: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 4, 4],
        sr_ratios: [8, 4, 2, 1],
        ffn_expand: 2,
    };
    cfg.data = DataSpec {
        root: root.join("data"),
        size: 32,
        n_source: 6,
        n_target: 6,
        n_eval: 3,
        seed: 0,
    };
    cfg.train.iterations = 10;
    cfg.train.eval_every = 10;
    cfg.seeds = vec![0];
    cfg.out = root.join("ablate");
    std::env::set_var("PANUDA_CACHE", root.join("cache"));

    cmd_generate_data(&cfg)?;
    let rows = cmd_ablate(&cfg, AblateMode::Uda)?;
    println!("{:<22} {:>7} {:>7}", "row", "mPQ", "mIoU");
    for r in &rows {
        println!("{:<22} {:>7.3} {:>7.3}", r.label, r.mpq.mean, r.miou.mean);
    }
    println!("\nfull table: {}", cfg.out.join("report.csv").display());
    Ok(())
}
