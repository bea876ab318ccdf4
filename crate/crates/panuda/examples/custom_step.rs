//! Drive the adaptation engine directly, without the experiment harness:
//! build a model, take a few training steps, and watch the loss breakdown.
//!
//!     cargo run --release --example custom_step

use panuda::core::Domain;
use panuda::fusion::FusionConfig;
use panuda::network::encoder::EncoderConfig;
use panuda::network::{LossWeights, Model, ModelConfig, Topology};
use panuda::tensor::optim::LrSchedule;
use panuda::toydata::{generate_scene, toy_class_table, SceneSpec};
use panuda::uda::{uda_train_step, TrainState, UdaConfig};

fn main() {
    let table = toy_class_table();
    let source = generate_scene(&SceneSpec::toy(1, Domain::Source, 64));
    let mut target = generate_scene(&SceneSpec::toy(2, Domain::Target, 64));
    target.label = None; // the target domain is unlabeled

    let model = Model::<f32>::new(ModelConfig {
        topology: Topology::MDecTD,
        encoder: EncoderConfig {
            widths: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            ffn_expand: 2,
        },
        num_classes: table.entries().len(),
        num_things: table.thing_ids().len(),
        seed: 0,
    });
    println!("{} parameters", model.num_params());

    let sched = LrSchedule { base_lr: 3e-4, warmup_iters: 2, total_iters: 20, poly_power: 1.0 };
    let mut state = TrainState::new(model, sched, None, 7);
    let uda = UdaConfig { fd: false, ..Default::default() };
    let fusion = FusionConfig { score_threshold: 0.5, ..Default::default() };

    for _ in 0..5 {
        let log = uda_train_step(
            &mut state,
            &[&source],
            &[&target],
            &table,
            &uda,
            &LossWeights::default(),
            &fusion,
        );
        println!(
            "iter {:>2}  total {:.3}  src-sem {:.3}  src-inst {:.3}  mix-sem {:.3}  mix-inst {:.3}  q {:.2}",
            state.iter, log.total, log.source_semantic, log.source_instance,
            log.mixed_semantic, log.mixed_instance, log.q
        );
    }

    // the teacher is an EMA of the student and drives pseudo-labeling
    let teacher = state.teacher_model();
    let pred = teacher.predict(&target.image, &table, &fusion);
    println!("teacher predicts {} instances on the target image", pred.instances.len());
}
