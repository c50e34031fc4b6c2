//! Manual timing probe for the desk-scale training step (ignored by default;
//! run with `cargo test --test bench_step -- --ignored --nocapture`).

use dmsm::backbone::{BackboneModel, ModelConfig};
use dmsm::data::synthesize_sample;
use dmsm::inference::{multipath_reconstruct, SamplerOptions};
use dmsm::schedule::{build_schedule, ScheduleKind};
use dmsm::trainer::{train_step, Adam, TrainConfig};

#[test]
#[ignore]
fn time_desk_training_step() {
    let sample = synthesize_sample(64, 64, 5, 4.0, 8, 1).unwrap();
    let cfg = TrainConfig { lr: 1e-3, seed: 3, ..TrainConfig::default() };
    let sched = build_schedule(50, 2e-3, 0.35, ScheduleKind::Linear).unwrap();
    let mut model = BackboneModel::init(&ModelConfig::default(), 1).unwrap();
    let mut adam = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, &model);

    // Warm up, then time.
    for step in 0..2u64 {
        train_step(&mut model, &mut adam, &[(&sample, 0)], &sched, &cfg, step).unwrap();
    }
    let n = 10;
    let t0 = std::time::Instant::now();
    for step in 2..2 + n {
        train_step(&mut model, &mut adam, &[(&sample, 0)], &sched, &cfg, step).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / n as f64;
    println!("train_step: {per_step:.3}s/step -> 2000 steps ~ {:.1} min", per_step * 2000.0 / 60.0);

    let t1 = std::time::Instant::now();
    let res = multipath_reconstruct(&model, &sample.y_u, &sample.coils, &sched, 5, 1, &SamplerOptions::default()).unwrap();
    let path_time = t1.elapsed().as_secs_f64();
    println!("multipath N=5 (T=50): {path_time:.2}s; std max {:.3}", res.std_map.iter().cloned().fold(0.0, f64::max));
}
