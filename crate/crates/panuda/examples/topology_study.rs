//! Miniature topology study: trains all four network layouts with identical
//! adaptation settings and tabulates mAP/mIoU/mSQ/mRQ/mPQ. The full-size
//! version is `panuda study`.
//!
//!     cargo run --release --example topology_study

use panuda::harness::{cmd_generate_data, cmd_study, DataSpec, ExperimentConfig, Profile};
use panuda::network::encoder::EncoderConfig;

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("panuda-example-study");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }

    let mut cfg = ExperimentConfig::profiled(Profile::Desk);
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
    cfg.train.iterations = 15;
    cfg.train.eval_every = 15;
    cfg.uda.fd = false;
    cfg.seeds = vec![0]; // one seed keeps the demo quick; the CLI default is 3
    cfg.out = root.join("study");

    cmd_generate_data(&cfg)?;
    let rows = cmd_study(&cfg)?;
    println!("{:<10} {:>8} {:>10} {:>7} {:>7}", "topology", "shared", "total", "mAP", "mPQ");
    for r in &rows {
        println!(
            "{:<10} {:>8} {:>10} {:>7.3} {:>7.3}",
            r.topology.to_string(),
            r.shared_params,
            r.total_params,
            r.map.mean,
            r.mpq.mean
        );
    }
    println!("\nfull table: {}", cfg.out.join("report.csv").display());
    Ok(())
}
