//! A complete miniature experiment through the harness: generate data,
//! train briefly, checkpoint, evaluate, and render figures. The same flow as
//! the `panuda` binary, but driven as a library.
//!
//!     cargo run --release --example train_and_evaluate

use panuda::harness::{
    cmd_evaluate, cmd_generate_data, cmd_plot, cmd_train, read_log, DataSpec, ExperimentConfig,
    LogRecord, Profile,
};
use panuda::network::encoder::EncoderConfig;
use panuda::network::Topology;

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("panuda-example-run");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }

    let mut cfg = ExperimentConfig::profiled(Profile::Desk);
    cfg.topology = Topology::SNet; // fastest topology for a demo
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
    cfg.train.iterations = 20;
    cfg.train.eval_every = 10;
    cfg.uda.fd = false; // skip the frozen-reference warm-up for the demo
    cfg.out = root.join("run");

    cmd_generate_data(&cfg)?;
    cmd_train(&cfg, false, None)?;

    for rec in read_log(&cfg.out.join("log.jsonl"))? {
        match rec {
            LogRecord::Meta { meta } => println!("run kind: {}", meta.kind),
            LogRecord::Step { iter, losses } if iter % 5 == 0 => {
                println!("iter {iter:>3}  total {:.3}", losses.total)
            }
            LogRecord::Eval { iter, eval } => {
                println!("iter {iter:>3}  eval mPQ {:.3} mIoU {:.3}", eval.mpq, eval.miou)
            }
            _ => {}
        }
    }

    let report = cmd_evaluate(
        &cfg.out.join("checkpoints/final.ckpt"),
        &cfg.data.root.join("target_eval"),
        &cfg.fusion,
        &root.join("eval"),
        false,
    )?;
    println!(
        "final: mPQ {:.3}  mSQ {:.3}  mRQ {:.3}  mIoU {:.3}  mAP {:.3}",
        report.pq.pq, report.pq.sq, report.pq.rq, report.miou, report.map
    );

    for p in cmd_plot(&cfg.out)? {
        println!("figure: {}", p.display());
    }
    Ok(())
}
