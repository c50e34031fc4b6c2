//! Dual-domain self-supervised training: three weight-shared branches (full
//! measurements plus the two partitions) denoise the same draw, the losses
//! couple them in image and k-space domains, and a single Adam step follows.
//!
//! Every stochastic choice is re-derived from `(seed, purpose, step)`, so a
//! run resumed from a checkpoint continues bit-for-bit where it left off and
//! logged losses can be replayed from any checkpoint.

mod adam;
mod checkpoint;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, content_hash, load_checkpoint, save_checkpoint,
    LoadedCheckpoint,
};

use crate::backbone::{
    backbone_reconstruct, complex_to_channels, lhan_backward, reconstruct_backward_to_eps,
    BackboneModel, ModelConfig, Tensor,
};
use crate::error::{DmsmError, Result};
use crate::inference::{multipath_reconstruct, SamplerOptions};
use crate::kspace::{
    apply_coils, fft2c, partition_kspace, CoilSensitivities, ComplexImage, KSpaceData,
};
use crate::losses::{
    kc_grad, l1_grad_accum, loss_dm, loss_ic, loss_kc_raw, mse_grad, total_loss, BranchOutput,
    BranchOutputs, LossBreakdown, LossWeights,
};
use crate::metrics;
use crate::rng::{self, stream, NormalSource, StreamKind};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SelfSupervised,
    Supervised,
}

/// Training hyperparameters. Defaults follow the published recipe (Adam at
/// 1e-5 with betas 0.9/0.999, batch size 1); the step count defaults to the
/// desk-scale 2000 rather than the full 500k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub partition_rho: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Steps between validation passes.
    pub val_interval: usize,
    /// Paths per validation reconstruction.
    pub val_paths: usize,
    /// Validation slices used during periodic validation.
    pub val_slices: usize,
    /// Redraw the partition mask every step (paper is silent; fixed-per-
    /// sample is available for ablation).
    pub resample_partition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            partition_rho: 0.5,
            seed: 0,
            mode: TrainMode::SelfSupervised,
            grad_clip: 1.0,
            val_interval: 250,
            val_paths: 5,
            val_slices: 2,
            resample_partition: true,
        }
    }
}

/// One training example: measurements plus the synthesis ground truth (used
/// by the supervised variant and for validation metrics only).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub ground_truth: ComplexImage,
    pub coils: CoilSensitivities,
    pub y_u: KSpaceData,
}

/// Fixed randomness of one step, shared by all three branches.
pub struct StepDraw {
    pub t: usize,
    pub eps: ComplexImage,
    pub y_p1: KSpaceData,
    pub y_p2: KSpaceData,
}

/// Derive the step's `(t, eps)` and partition split from the seeded streams.
pub fn draw_step(
    sample: &TrainSample,
    sample_ordinal: u64,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepDraw> {
    let mut src = NormalSource::from_stream(cfg.seed, StreamKind::TrainStep, step);
    let t = 1 + rng::uniform_index(src.rng(), sched.t_steps());
    let (h, w) = (sample.y_u.mask().height(), sample.y_u.mask().width());
    let mut eps = ComplexImage::zeros(1, h, w);
    for v in eps.as_mut_slice().iter_mut() {
        *v = Complex64::new(src.next(), src.next());
    }
    let partition_seed = if cfg.resample_partition {
        cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step)
    } else {
        cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(0x5A5A_0000).wrapping_add(sample_ordinal)
    };
    let (y_p1, y_p2, _m) = partition_kspace(&sample.y_u, cfg.partition_rho, partition_seed)?;
    Ok(StepDraw { t, eps, y_p1, y_p2 })
}

struct BranchWork {
    output: BranchOutput,
    y_hat_full: ComplexImage,
    cache: Option<crate::backbone::LhanCache>,
}

/// Forward all three branches, compute the dual-domain loss, and (optionally)
/// the parameter gradients.
pub fn three_branch_pass(
    model: &BackboneModel,
    sample: &TrainSample,
    draw: &StepDraw,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    want_grads: bool,
) -> Result<(LossBreakdown, BranchOutputs, Option<Box<BackboneModel>>)> {
    let coils = &sample.coils;
    let branches: [&KSpaceData; 3] = [&sample.y_u, &draw.y_p1, &draw.y_p2];

    let mut works: Vec<BranchWork> = branches
        .par_iter()
        .map(|y_b| -> Result<BranchWork> {
            let x_u = crate::kspace::zero_fill_recon(y_b, coils)?;
            let x_t = sched.forward_noise(&x_u, draw.t, &draw.eps)?;
            let rec = backbone_reconstruct(model, &x_t, y_b, coils, draw.t, sched, want_grads)?;
            let y_hat_full = fft2c(&apply_coils(&rec.x_hat, coils)?)?;
            let y_hat = crate::kspace::undersample(
                &KSpaceData::fully_sampled(y_hat_full.clone()),
                sample.y_u.mask(),
            )?;
            Ok(BranchWork {
                output: BranchOutput { eps_hat: rec.eps_hat, x_hat: rec.x_hat, y_hat },
                y_hat_full,
                cache: rec.cache,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dm = loss_dm(
        &draw.eps,
        [&works[0].output.eps_hat, &works[1].output.eps_hat, &works[2].output.eps_hat],
    )?;
    let (ic, kc) = match cfg.mode {
        TrainMode::SelfSupervised => {
            let ic = loss_ic(&works[0].output.x_hat, &works[1].output.x_hat, &works[2].output.x_hat)?;
            let kc = loss_kc_raw(
                [&works[0].y_hat_full, &works[1].y_hat_full, &works[2].y_hat_full],
                &sample.y_u,
            )?;
            (ic, kc)
        }
        TrainMode::Supervised => {
            // Ground-truth targets replace the self-supervised ones: images
            // against the reference, k-space against the fully sampled grid.
            let gt = &sample.ground_truth;
            let y_gt = fft2c(&apply_coils(gt, coils)?)?;
            let l1 = |a: &ComplexImage, b: &ComplexImage| -> f64 {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y).norm())
                    .sum::<f64>()
                    / a.as_slice().len() as f64
            };
            let ic = works.iter().map(|wk| l1(&wk.output.x_hat, gt)).sum();
            let kc = works.iter().map(|wk| l1(&wk.y_hat_full, &y_gt)).sum();
            (ic, kc)
        }
    };
    let breakdown = total_loss(dm, ic, kc, &cfg.weights);

    if !want_grads {
        let mut it = works.drain(..);
        let outputs = BranchOutputs {
            full: it.next().unwrap().output,
            p1: it.next().unwrap().output,
            p2: it.next().unwrap().output,
        };
        return Ok((breakdown, outputs, None));
    }

    // Gradients on x_hat per branch (image-domain terms).
    let (h, w) = (sample.y_u.mask().height(), sample.y_u.mask().width());
    let mut g_x: Vec<ComplexImage> = (0..3).map(|_| ComplexImage::zeros(1, h, w)).collect();
    match cfg.mode {
        TrainMode::SelfSupervised => {
            let (xr, xp1, xp2) =
                (&works[0].output.x_hat, &works[1].output.x_hat, &works[2].output.x_hat);
            let lam = cfg.weights.lambda_ic;
            let (g0, rest) = g_x.split_at_mut(1);
            let (g1, g2) = rest.split_at_mut(1);
            l1_grad_accum(xr, xp1, lam, &mut g0[0], Some(&mut g1[0]));
            l1_grad_accum(xr, xp2, lam, &mut g0[0], Some(&mut g2[0]));
            l1_grad_accum(xp1, xp2, lam, &mut g1[0], Some(&mut g2[0]));
        }
        TrainMode::Supervised => {
            for (b, wk) in works.iter().enumerate() {
                l1_grad_accum(&wk.output.x_hat, &sample.ground_truth, cfg.weights.lambda_ic, &mut g_x[b], None);
            }
        }
    }

    // K-space consistency gradients pulled back to the image.
    let y_gt_sup = match cfg.mode {
        TrainMode::Supervised => Some(fft2c(&apply_coils(&sample.ground_truth, coils)?)?),
        TrainMode::SelfSupervised => None,
    };
    for (b, wk) in works.iter().enumerate() {
        let g_y = match cfg.mode {
            TrainMode::SelfSupervised => kc_grad(&wk.y_hat_full, &sample.y_u, cfg.weights.lambda_kc),
            TrainMode::Supervised => {
                let y_gt = y_gt_sup.as_ref().unwrap();
                let nall = wk.y_hat_full.as_slice().len() as f64;
                let mut g = ComplexImage::zeros(y_gt.shape().0, h, w);
                for (gi, (a, bb)) in g
                    .as_mut_slice()
                    .iter_mut()
                    .zip(wk.y_hat_full.as_slice().iter().zip(y_gt.as_slice()))
                {
                    let d = a - bb;
                    let m = d.norm();
                    if m > 0.0 {
                        *gi = d * (cfg.weights.lambda_kc / (nall * m));
                    }
                }
                g
            }
        };
        // Adjoint of x -> fft(apply(x)).
        let back = crate::kspace::combine_coils(&crate::kspace::ifft2c(&g_y)?, coils)?;
        g_x[b] = g_x[b].axpy(1.0, &back);
    }

    // Per-branch backward through DC + marginal inversion + network.
    let use_dc = model.config().use_dc;
    let grads: Vec<BackboneModel> = works
        .par_iter()
        .enumerate()
        .map(|(b, wk)| -> Result<BackboneModel> {
            let mut grads_b = BackboneModel::zeros(model.config());
            let y_b = branches[b];
            let g_eps_img = reconstruct_backward_to_eps(&g_x[b], y_b.mask(), coils, draw.t, sched, use_dc)?;
            let g_eps_dm = mse_grad(&wk.output.eps_hat, &draw.eps, cfg.weights.dm_multiplier / 3.0);
            let g_eps = g_eps_dm.axpy(1.0, &g_eps_img);
            let g_eps_t: Tensor = complex_to_channels(&g_eps);
            lhan_backward(model, wk.cache.as_ref().expect("cache kept for training"), &g_eps_t, &mut grads_b);
            Ok(grads_b)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut merged = BackboneModel::zeros(model.config());
    for g in &grads {
        merged.accumulate(g);
    }

    let mut it = works.drain(..);
    let outputs = BranchOutputs {
        full: it.next().unwrap().output,
        p1: it.next().unwrap().output,
        p2: it.next().unwrap().output,
    };
    Ok((breakdown, outputs, Some(Box::new(merged))))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    /// False when a non-finite loss or gradient aborted the update.
    pub applied: bool,
    pub grad_norm: f64,
}

/// Run one training step: draw, forward, loss, clip, Adam. A non-finite loss
/// or gradient leaves the model untouched and reports `applied = false`.
pub fn train_step(
    model: &mut BackboneModel,
    adam: &mut Adam,
    samples: &[(&TrainSample, u64)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let aborted = || StepReport {
        breakdown: LossBreakdown { dm: f64::NAN, ic: f64::NAN, kc: f64::NAN, total: f64::NAN },
        applied: false,
        grad_norm: f64::NAN,
    };
    let mut grads = BackboneModel::zeros(model.config());
    let mut acc = LossBreakdown { dm: 0.0, ic: 0.0, kc: 0.0, total: 0.0 };
    for (i, (sample, ordinal)) in samples.iter().enumerate() {
        let draw = draw_step(sample, *ordinal, sched, cfg, step.wrapping_mul(cfg.batch_size as u64).wrapping_add(i as u64))?;
        // A non-finite forward pass (exploded parameters) aborts the step
        // without touching the model; other errors are real failures.
        let (breakdown, _outputs, g) =
            match three_branch_pass(model, sample, &draw, cfg, sched, true) {
                Ok(out) => out,
                Err(DmsmError::NonFinite(_)) => return Ok(aborted()),
                Err(e) => return Err(e),
            };
        grads.accumulate(&g.expect("gradients requested"));
        acc.dm += breakdown.dm;
        acc.ic += breakdown.ic;
        acc.kc += breakdown.kc;
        acc.total += breakdown.total;
    }
    let n = samples.len() as f64;
    acc.dm /= n;
    acc.ic /= n;
    acc.kc /= n;
    acc.total /= n;
    if n > 1.0 {
        grads.visit_params_mut(|_, t| {
            for v in t.data.iter_mut() {
                *v /= n;
            }
        });
    }

    if !acc.total.is_finite() || !grads.all_finite() {
        return Ok(StepReport { breakdown: acc, applied: false, grad_norm: f64::NAN });
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    adam.step(model, &grads);
    Ok(StepReport { breakdown: acc, applied: true, grad_norm })
}

/// Loss-log record, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
pub struct LossLogRecord {
    pub step: u64,
    pub l_dm: f64,
    pub l_ic: f64,
    pub l_kc: f64,
    pub total: f64,
}

/// Validation PSNR: multi-path mean reconstruction against ground truth,
/// averaged over the given slices.
pub fn validation_psnr(
    model: &BackboneModel,
    val_set: &[TrainSample],
    sched: &NoiseSchedule,
    n_paths: usize,
    seed_tag: u64,
) -> Result<f64> {
    if val_set.is_empty() {
        return Err(DmsmError::InvalidArgument("empty validation set".into()));
    }
    let opts = SamplerOptions::default();
    let psnrs: Result<Vec<f64>> = val_set
        .iter()
        .enumerate()
        .map(|(i, s)| -> Result<f64> {
            let base = seed_tag
                .wrapping_mul(0x1000_0000_1b3)
                .wrapping_add((i as u64) << 32);
            let res = multipath_reconstruct(model, &s.y_u, &s.coils, sched, n_paths, base, &opts)?;
            Ok(metrics::psnr(&res.mean, &s.ground_truth, None)?.db())
        })
        .collect();
    let psnrs = psnrs?;
    Ok(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
}

/// Artifacts produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub val_log_path: PathBuf,
    pub completed_steps: u64,
    pub best_val_psnr: Option<f64>,
}

/// Full training loop with periodic validation, best/last checkpointing and
/// resume support.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    sched_cfg: &ScheduleConfig,
    out_dir: &Path,
    resume: bool,
    mut progress: Option<&mut dyn FnMut(u64, &LossBreakdown)>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(DmsmError::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DmsmError::InvalidArgument("batch_size must be positive".into()));
    }
    let sched = sched_cfg.build()?;
    std::fs::create_dir_all(out_dir)?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("train_log.jsonl");
    let val_log_path = out_dir.join("val_log.jsonl");

    let (mut model, mut adam, start_step) = if resume && last_path.exists() {
        let loaded = load_checkpoint(&last_path)?;
        loaded.ensure_matches(model_cfg)?;
        if loaded.schedule != *sched_cfg {
            return Err(DmsmError::Checkpoint(format!(
                "schedule mismatch: checkpoint {:?} vs run {:?}",
                loaded.schedule, sched_cfg
            )));
        }
        let mut adam = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, &loaded.model);
        adam.restore(loaded.adam_t, loaded.adam_m, loaded.adam_v);
        (loaded.model, adam, loaded.step)
    } else {
        let model = BackboneModel::init(model_cfg, cfg.seed ^ 0x11b7)?;
        let adam = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, &model);
        (model, adam, 0)
    };

    if start_step >= cfg.steps as u64 {
        // Nothing left to do (resume from a finished run).
        return Ok(TrainOutcome {
            last_checkpoint: last_path,
            best_checkpoint: best_path,
            log_path,
            val_log_path,
            completed_steps: start_step,
            best_val_psnr: None,
        });
    }

    // Fresh runs truncate stale logs; resumed runs append to keep the log
    // replayable across the whole history.
    let resuming = start_step > 0;
    let open_log = |p: &Path| -> Result<std::fs::File> {
        let mut opts = std::fs::OpenOptions::new();
        opts.create(true).write(true);
        if resuming {
            opts.append(true);
        } else {
            opts.truncate(true);
        }
        Ok(opts.open(p)?)
    };
    let mut log = open_log(&log_path)?;
    let mut val_log = open_log(&val_log_path)?;

    let mut best_val: Option<f64> = None;
    let mut consecutive_bad = 0usize;
    let n_train = train_set.len();

    let mut epoch_cache: (u64, Vec<usize>) = (u64::MAX, Vec::new());
    for step in start_step..cfg.steps as u64 {
        // Shuffled slice order, re-derived per epoch.
        let mut picks: Vec<(&TrainSample, u64)> = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size as u64 {
            let pos = step * cfg.batch_size as u64 + b;
            let epoch = pos / n_train as u64;
            if epoch_cache.0 != epoch {
                let mut r = stream(cfg.seed, StreamKind::Shuffle, epoch);
                epoch_cache = (epoch, rng::permutation(&mut r, n_train));
            }
            let idx = epoch_cache.1[(pos % n_train as u64) as usize];
            picks.push((&train_set[idx], idx as u64));
        }

        let report = train_step(&mut model, &mut adam, &picks, &sched, cfg, step)?;
        let record = LossLogRecord {
            step,
            l_dm: report.breakdown.dm,
            l_ic: report.breakdown.ic,
            l_kc: report.breakdown.kc,
            total: report.breakdown.total,
        };
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;

        if let Some(cb) = progress.as_deref_mut() {
            cb(step, &report.breakdown);
        }

        if !report.applied {
            consecutive_bad += 1;
            if consecutive_bad >= 50 {
                return Err(DmsmError::Diverged(format!(
                    "non-finite loss for {consecutive_bad} consecutive steps (last at step {step})"
                )));
            }
        } else {
            consecutive_bad = 0;
        }

        let done = step + 1 == cfg.steps as u64;
        if (cfg.val_interval > 0 && (step + 1) % cfg.val_interval as u64 == 0) || done {
            if !val_set.is_empty() {
                let subset = &val_set[..val_set.len().min(cfg.val_slices.max(1))];
                let psnr = validation_psnr(&model, subset, &sched, cfg.val_paths, cfg.seed ^ (step + 1))?;
                let rec = serde_json::json!({"step": step + 1, "val_psnr_db": psnr});
                val_log.write_all(rec.to_string().as_bytes())?;
                val_log.write_all(b"\n")?;
                if best_val.map_or(true, |b| psnr > b) {
                    best_val = Some(psnr);
                    save_checkpoint(&best_path, &model, &adam, step + 1, sched_cfg)?;
                }
            }
            save_checkpoint(&last_path, &model, &adam, step + 1, sched_cfg)?;
        }
    }

    // Cover the zero-step edge so both checkpoint names always exist.
    if !last_path.exists() {
        save_checkpoint(&last_path, &model, &adam, cfg.steps as u64, sched_cfg)?;
    }
    if !best_path.exists() {
        save_checkpoint(&best_path, &model, &adam, cfg.steps as u64, sched_cfg)?;
    }

    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log_path,
        val_log_path,
        completed_steps: cfg.steps as u64,
        best_val_psnr: best_val,
    })
}
