//! Manual desk-scale probe (run with `-- --ignored --nocapture`): short
//! training runs to watch the validation PSNR against the zero-filled
//! baseline while tuning the desk recipe.

use dmsm::backbone::{BackboneModel, ModelConfig};
use dmsm::data::synthesize_sample;
use dmsm::inference::{multipath_reconstruct, SamplerOptions};
use dmsm::kspace::zero_fill_recon;
use dmsm::metrics;
use dmsm::schedule::{build_schedule, ScheduleKind};
use dmsm::trainer::{train_step, Adam, TrainConfig, TrainMode, TrainSample};

fn zf_psnr(samples: &[TrainSample]) -> f64 {
    let vals: Vec<f64> = samples
        .iter()
        .map(|s| {
            let zf = zero_fill_recon(&s.y_u, &s.coils).unwrap();
            let p = metrics::psnr(&zf, &s.ground_truth, None).unwrap().db();
            println!("  zf {}: {p:.2} dB", s.id);
            p
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
#[ignore]
fn desk_probe() {
    let n_train: u64 =
        std::env::var("PROBE_TRAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
    let steps: u64 = std::env::var("PROBE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let acs: usize =
        std::env::var("PROBE_ACS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let train: Vec<TrainSample> =
        (0..n_train).map(|i| synthesize_sample(64, 64, 5, 4.0, acs, 100 + i).unwrap()).collect();
    let n_val: u64 =
        std::env::var("PROBE_VAL").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    let n_paths: usize =
        std::env::var("PROBE_PATHS").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let val: Vec<TrainSample> =
        (0..n_val).map(|i| synthesize_sample(64, 64, 5, 4.0, acs, 9000 + i).unwrap()).collect();

    let zf = zf_psnr(&val);
    println!("zero-filled val PSNR: {zf:.2} dB");

    let beta_end: f64 =
        std::env::var("PROBE_BETA_END").ok().and_then(|v| v.parse().ok()).unwrap_or(0.02);
    let beta_start: f64 =
        std::env::var("PROBE_BETA_START").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
    let mode = if std::env::var("PROBE_SUPERVISED").is_ok() {
        TrainMode::Supervised
    } else {
        TrainMode::SelfSupervised
    };
    let rho: f64 =
        std::env::var("PROBE_RHO").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let cfg = TrainConfig { lr, seed: 42, mode, partition_rho: rho, ..TrainConfig::default() };
    println!("rho: {rho}");
    println!("mode: {mode:?}");
    let sched = build_schedule(50, beta_start, beta_end, ScheduleKind::Linear).unwrap();
    println!("schedule: T=50 beta {beta_start}..{beta_end}, alpha_bar(T) = {:.4e}", sched.alpha_bar(50));
    let mut model = BackboneModel::init(&ModelConfig::default(), 7).unwrap();
    let mut adam = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, &model);

    let eval = |model: &BackboneModel, tag: &str| {
        let opts = if std::env::var("PROBE_CLEAN").is_ok() {
            SamplerOptions { clean_measurements: true }
        } else {
            SamplerOptions::default()
        };
        let psnrs: Vec<f64> = val
            .iter()
            .map(|s| {
                let res =
                    multipath_reconstruct(model, &s.y_u, &s.coils, &sched, n_paths, 777, &opts).unwrap();
                let maxmag = res.mean.magnitude().iter().cloned().fold(0.0, f64::max);
                let p = metrics::psnr(&res.mean, &s.ground_truth, None).unwrap().db();
                println!("  slice {}: psnr {p:.2} max|mean| {maxmag:.3e}", s.id);
                p
            })
            .collect();
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        println!("{tag}: val PSNR {mean:.2} dB (paths {psnrs:.2?})");
    };

    let t0 = std::time::Instant::now();
    let mut recent = Vec::new();
    for step in 0..steps {
        let s = &train[(step % n_train) as usize];
        let rep = train_step(&mut model, &mut adam, &[(s, 0)], &sched, &cfg, step).unwrap();
        recent.push(rep.breakdown.total);
        if (step + 1) % 100 == 0 {
            let mean_loss: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            println!(
                "step {:4}: loss {mean_loss:.4} (dm {:.4} ic {:.4} kc {:.4}) [{:.1}s]",
                step + 1,
                rep.breakdown.dm,
                rep.breakdown.ic,
                rep.breakdown.kc,
                t0.elapsed().as_secs_f64()
            );
        }
        if (step + 1) % 500 == 0 {
            eval(&model, &format!("step {}", step + 1));
        }
    }
    eval(&model, "final");
    if let Ok(path) = std::env::var("PROBE_SAVE") {
        dmsm::trainer::save_checkpoint(
            std::path::Path::new(&path),
            &model,
            &adam,
            steps,
            &dmsm::schedule::ScheduleConfig {
                t_steps: 50,
                beta_start,
                beta_end,
                kind: ScheduleKind::Linear,
            },
        )
        .unwrap();
        println!("checkpoint saved to {path}");
    }
}

#[test]
#[ignore]
fn eval_checkpoint() {
    // Evaluate a saved checkpoint with both sampler variants.
    let path = std::env::var("PROBE_SAVE").expect("PROBE_SAVE=path to checkpoint");
    let n_paths: usize =
        std::env::var("PROBE_PATHS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let loaded = dmsm::trainer::load_checkpoint(std::path::Path::new(&path)).unwrap();
    let sched = loaded.schedule.build().unwrap();
    let acs: usize = std::env::var("PROBE_ACS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let val: Vec<TrainSample> =
        (0..5).map(|i| synthesize_sample(64, 64, 5, 4.0, acs, 9000 + i).unwrap()).collect();
    println!("zero-filled: {:.2} dB", zf_psnr(&val));
    for clean in [false, true] {
        let opts = SamplerOptions { clean_measurements: clean };
        let psnrs: Vec<f64> = val
            .iter()
            .map(|s| {
                let res = multipath_reconstruct(
                    &loaded.model, &s.y_u, &s.coils, &sched, n_paths, 777, &opts,
                )
                .unwrap();
                metrics::psnr(&res.mean, &s.ground_truth, None).unwrap().db()
            })
            .collect();
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        println!("clean={clean}: val PSNR {mean:.2} dB (slices {psnrs:.2?})");
    }

    // One-shot repair diagnostic: noise the zero-fill to level t, apply the
    // operator once, score the result.
    use dmsm::rng::{NormalSource, StreamKind};
    use num_complex::Complex64;
    for t in [1usize, 3, 5, 10, 25, 50] {
        let psnrs: Vec<f64> = val
            .iter()
            .map(|s| {
                let x_u = zero_fill_recon(&s.y_u, &s.coils).unwrap();
                let mut src = NormalSource::from_stream(5, StreamKind::Data, t as u64);
                let mut eps = dmsm::kspace::ComplexImage::zeros(1, 64, 64);
                for v in eps.as_mut_slice().iter_mut() {
                    *v = Complex64::new(src.next(), src.next());
                }
                let x_t = sched.forward_noise(&x_u, t, &eps).unwrap();
                let rec = dmsm::backbone::backbone_reconstruct(
                    &loaded.model, &x_t, &s.y_u, &s.coils, t, &sched, false,
                )
                .unwrap();
                metrics::psnr(&rec.x_hat, &s.ground_truth, None).unwrap().db()
            })
            .collect();
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        println!("one-shot t={t}: {mean:.2} dB (slices {psnrs:.2?})");
    }
}
