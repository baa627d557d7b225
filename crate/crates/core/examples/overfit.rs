//! Diagnostic: overfit one fixed synthetic sample. Loss should collapse
//! toward zero if gradient flow through the whole pipeline is healthy.

use selective_stereo::config::RunConfig;
use selective_stereo::data::{gen_stereogram, SceneMode};
use selective_stereo::model::Model;
use selective_stereo::tensor::Tape;
use selective_stereo::training::{
    clip_gradients, one_cycle_lr, sequence_loss, LossConfig, OptimState,
};

fn main() {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        cfg.apply_text(&arg).unwrap();
    }
    cfg.validate().unwrap();
    let sample = gen_stereogram(cfg.width, cfg.height, cfg.max_disp, SceneMode::Planes, 42)
        .unwrap();
    let mut model = Model::new(cfg.model_config(), cfg.seed).unwrap();
    let mut optim = OptimState::new(&model.store, cfg.weight_decay, cfg.clip);
    let loss_cfg = LossConfig {
        gamma: cfg.gamma,
        max_disp_valid: cfg.max_disp_valid(),
    };
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let out = model
            .run(&mut tape, &sample.left, &sample.right, cfg.iters_train)
            .unwrap();
        let loss = sequence_loss(
            &mut tape,
            &out.predictions,
            &sample.gt_disparity,
            Some(&sample.valid_mask),
            &loss_cfg,
        )
        .unwrap();
        let lv = tape.data(loss)[0];
        tape.backward(loss).unwrap();
        tape.export_param_grads(&mut model.store);
        clip_gradients(&mut model.store, cfg.clip);
        let lr = one_cycle_lr(step, cfg.steps, cfg.lr_peak);
        optim.step(&mut model.store, lr);
        if step % 10 == 0 || step + 1 == cfg.steps {
            println!("step {step:4}  loss {lv:9.5}  lr {lr:.3e}");
        }
    }
    let pred = selective_stereo::training::predict(&model, &sample.left, &sample.right, cfg.iters_train).unwrap();
    let stat = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, sd)
    };
    let e = selective_stereo::metrics::epe(&pred, &sample.gt_disparity, &sample.valid_mask).unwrap();
    println!("pred mean/sd {:?}  gt mean/sd {:?}  EPE {e:.4}", stat(&pred.data), stat(&sample.gt_disparity.data));
}
