//! Times one adaptation step at a few model sizes. Useful for picking an
//! iteration budget on a new machine.

use std::time::Instant;

use panuda::core::Domain;
use panuda::fusion::FusionConfig;
use panuda::network::encoder::EncoderConfig;
use panuda::network::{LossWeights, Model, ModelConfig, Topology};
use panuda::tensor::optim::LrSchedule;
use panuda::toydata::{generate_scene, toy_class_table, SceneSpec};
use panuda::uda::{uda_train_step, TrainState, UdaConfig};

fn main() {
    let table = toy_class_table();
    for (name, size, widths, depths) in [
        ("tiny-32", 32usize, [8usize, 16, 24, 32], [1usize, 1, 1, 1]),
        ("tiny-64", 64, [8, 16, 24, 32], [1, 1, 1, 1]),
        ("small-64", 64, [16, 32, 48, 64], [1, 1, 2, 1]),
        ("desk-128", 128, [32, 64, 128, 256], [2, 2, 2, 2]),
    ] {
        let src = generate_scene(&SceneSpec::toy(1, Domain::Source, size));
        let mut tgt = generate_scene(&SceneSpec::toy(2, Domain::Target, size));
        tgt.label = None;
        let cfg = ModelConfig {
            topology: Topology::MDecTD,
            encoder: EncoderConfig {
                widths,
                depths,
                heads: [1, 2, 4, 8],
                sr_ratios: [8, 4, 2, 1],
                ffn_expand: 2,
            },
            num_classes: 8,
            num_things: 3,
            seed: 0,
        };
        let sched = LrSchedule { base_lr: 6e-5, warmup_iters: 10, total_iters: 100, poly_power: 1.0 };
        let mut state = TrainState::new(Model::<f32>::new(cfg), sched, None, 7);
        let ucfg = UdaConfig { fd: false, ..Default::default() };
        let t0 = Instant::now();
        let n = 3;
        for _ in 0..n {
            uda_train_step(
                &mut state,
                &[&src],
                &[&tgt],
                &table,
                &ucfg,
                &LossWeights::default(),
                &FusionConfig::default(),
            );
        }
        println!("{name}: {:.2} s/step", t0.elapsed().as_secs_f64() / n as f64);
    }
}
