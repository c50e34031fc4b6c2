//! Subcommand implementations.

use crate::render::write_png_scaled;
use crate::ConfigArgs;
use dmsm::config::RunConfig;
use dmsm::data;
use dmsm::error::DmsmError;
use dmsm::inference::{multipath_reconstruct, SamplerOptions};
use dmsm::kspace::zero_fill_recon;
use dmsm::metrics::{self, PsnrValue};
use dmsm::trainer::{self, content_hash};
use std::path::PathBuf;

pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<DmsmError> for CliError {
    fn from(e: DmsmError) -> Self {
        match e {
            DmsmError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(format!("{e:#}"))
    }
}

type CliResult<T> = Result<T, CliError>;

enum SeedTarget {
    Dataset,
    Train,
    Inference,
}

fn load_config(args: &ConfigArgs, target: SeedTarget) -> CliResult<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        let key = match target {
            SeedTarget::Dataset => "dataset.seed",
            SeedTarget::Train => "train.seed",
            SeedTarget::Inference => "inference.base_seed",
        };
        overrides.push(format!("{key}={seed}"));
    }
    RunConfig::load_with_overrides(args.config.as_deref(), &overrides).map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(args: ConfigArgs, force: bool) -> CliResult<()> {
    let cfg = load_config(&args, SeedTarget::Dataset)?;
    let dir = PathBuf::from(&cfg.dataset_dir);
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CliError::Usage(format!(
                "dataset directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let manifest = data::build_dataset(&cfg.dataset, &dir)?;
    println!(
        "dataset: {} slices ({} train / {} val / {} test), {}x{}, {} coils",
        manifest.entries.len(),
        manifest.ids(data::Split::Train).len(),
        manifest.ids(data::Split::Val).len(),
        manifest.ids(data::Split::Test).len(),
        manifest.height,
        manifest.width,
        manifest.n_coils,
    );
    for m in &manifest.masks {
        println!(
            "masks: R={} (acs {} lines) under {}",
            m.acceleration, m.acs_lines, m.dir
        );
    }
    println!("written to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(args: ConfigArgs, resume: bool, mode: Option<String>) -> CliResult<()> {
    let mut args = args;
    if let Some(mode) = mode {
        args.set.push(format!("train.mode={mode}"));
    }
    let cfg = load_config(&args, SeedTarget::Train)?;
    let dataset_dir = PathBuf::from(&cfg.dataset_dir);
    let manifest = data::load_manifest(&dataset_dir)?;
    let train_set = data::load_split(&dataset_dir, &manifest, data::Split::Train, cfg.train.acceleration)?;
    let val_set = data::load_split(&dataset_dir, &manifest, data::Split::Val, cfg.train.acceleration)?;
    println!(
        "training on {} slices (R={}), validating on {}, mode {:?}",
        train_set.len(),
        cfg.train.acceleration,
        val_set.len(),
        cfg.train.config.mode,
    );

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(
        out_dir.join("config.json"),
        cfg.to_pretty_json().map_err(CliError::from)?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut print_progress = |step: u64, b: &dmsm::losses::LossBreakdown| {
        if (step + 1) % 100 == 0 {
            println!(
                "step {:>6}: total {:.4} (dm {:.4} ic {:.4} kc {:.4})",
                step + 1,
                b.total,
                b.dm,
                b.ic,
                b.kc
            );
        }
    };
    let outcome = trainer::train(
        &train_set,
        &val_set,
        &cfg.train.config,
        &cfg.model,
        &cfg.schedule,
        &out_dir,
        resume,
        Some(&mut print_progress),
    )?;
    println!(
        "done after {} steps; best validation PSNR {}",
        outcome.completed_steps,
        outcome
            .best_val_psnr
            .map(|v| format!("{v:.2} dB"))
            .unwrap_or_else(|| "n/a".into()),
    );
    println!("checkpoints: {} / {}", outcome.best_checkpoint.display(), outcome.last_checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn resolve_checkpoint(cfg: &RunConfig) -> CliResult<PathBuf> {
    if !cfg.inference.checkpoint.is_empty() {
        return Ok(PathBuf::from(&cfg.inference.checkpoint));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    for name in ["best.ckpt", "last.ckpt"] {
        let p = out_dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::Runtime(format!(
        "no checkpoint found under {}; train first or set inference.checkpoint",
        out_dir.display()
    )))
}

pub fn reconstruct(args: ConfigArgs, paths: Option<usize>) -> CliResult<()> {
    let mut args = args;
    if let Some(n) = paths {
        args.set.push(format!("inference.paths={n}"));
    }
    let cfg = load_config(&args, SeedTarget::Inference)?;
    let ckpt_path = resolve_checkpoint(&cfg)?;
    let ckpt_bytes = std::fs::read(&ckpt_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let ckpt_hash = content_hash(&ckpt_bytes);
    let loaded = dmsm::trainer::checkpoint_from_bytes(&ckpt_bytes)?;
    loaded.ensure_matches(&cfg.model)?;
    if loaded.schedule != cfg.schedule {
        return Err(CliError::Usage(format!(
            "schedule mismatch: checkpoint {:?} vs config {:?}",
            loaded.schedule, cfg.schedule
        )));
    }
    let sched = cfg.schedule.build()?;

    let dataset_dir = PathBuf::from(&cfg.dataset_dir);
    let manifest = data::load_manifest(&dataset_dir)?;
    let ids: Vec<String> = if cfg.inference.slices.is_empty() {
        manifest.ids(data::Split::Test).iter().map(|s| s.to_string()).collect()
    } else {
        cfg.inference.slices.clone()
    };
    if ids.is_empty() {
        return Err(CliError::Usage("no slices to reconstruct".into()));
    }

    let out_root = PathBuf::from(&cfg.out_dir).join("recon");
    let opts = SamplerOptions { clean_measurements: cfg.inference.clean_measurements };
    let r = cfg.inference.acceleration;
    println!(
        "reconstructing {} slices with N={} paths from {}",
        ids.len(),
        cfg.inference.paths,
        ckpt_path.display()
    );

    for (idx, id) in ids.iter().enumerate() {
        let (gt, coils) = data::load_slice(&dataset_dir, &manifest, id)?;
        let mask = data::load_mask(&dataset_dir, &manifest, id, r)?;
        let sample = data::sample_from_parts(id, gt, coils, &mask)?;
        let base_seed = cfg.inference.base_seed + (idx as u64) * 1_000_003;
        let res = multipath_reconstruct(
            &loaded.model,
            &sample.y_u,
            &sample.coils,
            &sched,
            cfg.inference.paths,
            base_seed,
            &opts,
        )?;

        let slice_dir = out_root.join(id);
        std::fs::create_dir_all(&slice_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        let (h, w) = (res.mean.height(), res.mean.width());
        data::write_complex_raw(&slice_dir.join("mean.img.raw"), &res.mean)?;
        data::write_float_raw(&slice_dir.join("uncertainty.raw"), &[h, w], &res.std_map)?;
        if cfg.inference.save_paths {
            for (i, p) in res.paths.iter().enumerate() {
                data::write_complex_raw(&slice_dir.join(format!("path_{i:02}.img.raw")), p)?;
            }
        }

        // Rendered outputs: reconstruction on its own scale; error and
        // uncertainty share one intensity legend.
        let mean_mag = res.mean.magnitude();
        let recon_hi = mean_mag.iter().cloned().fold(0.0, f64::max);
        write_png_scaled(&slice_dir.join("recon.png"), h, w, &mean_mag, 0.0, recon_hi)?;

        let gt_mag = sample.ground_truth.magnitude();
        let error: Vec<f64> =
            mean_mag.iter().zip(&gt_mag).map(|(a, b)| (a - b).abs()).collect();
        let shared_hi = error
            .iter()
            .chain(res.std_map.iter())
            .cloned()
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        data::write_float_raw(&slice_dir.join("error.raw"), &[h, w], &error)?;
        write_png_scaled(&slice_dir.join("error.png"), h, w, &error, 0.0, shared_hi)?;
        write_png_scaled(&slice_dir.join("uncertainty.png"), h, w, &res.std_map, 0.0, shared_hi)?;

        let manifest_json = serde_json::json!({
            "slice": id,
            "n_paths": res.paths.len(),
            "seeds": res.seeds,
            "base_seed": base_seed,
            "checkpoint": ckpt_path.display().to_string(),
            "checkpoint_hash": ckpt_hash,
            "checkpoint_step": loaded.step,
            "acceleration": r,
            "acs_lines": mask.acs_region().row1 - mask.acs_region().row0,
            "achieved_acceleration": mask.achieved_acceleration(),
            "clean_measurements": cfg.inference.clean_measurements,
            "intensity_legend_max": shared_hi,
        });
        std::fs::write(
            slice_dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest_json).map_err(DmsmError::from)?,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("slice {id}: N={} done -> {}", res.paths.len(), slice_dir.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct MethodMetrics {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    mae: Vec<f64>,
    pcc: Vec<f64>,
}

impl MethodMetrics {
    fn new() -> Self {
        Self { psnr: vec![], ssim: vec![], mae: vec![], pcc: vec![] }
    }
}

pub fn evaluate(args: ConfigArgs) -> CliResult<()> {
    let cfg = load_config(&args, SeedTarget::Inference)?;
    let dataset_dir = PathBuf::from(&cfg.dataset_dir);
    let manifest = data::load_manifest(&dataset_dir)?;
    let recon_root = PathBuf::from(&cfg.out_dir).join("recon");
    if !recon_root.exists() {
        return Err(CliError::Runtime(format!(
            "no reconstructions under {}; run `dmsm reconstruct` first",
            recon_root.display()
        )));
    }
    let mut ids: Vec<String> = std::fs::read_dir(&recon_root)
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Runtime("reconstruction directory is empty".into()));
    }

    let mut dmsm_rows = MethodMetrics::new();
    let mut zf_rows = MethodMetrics::new();
    let mut per_slice = Vec::new();
    let mut warned = false;
    println!(
        "{:<8} {:>10} {:>8} {:>10} {:>8} | {:>10} {:>8} {:>10}",
        "slice", "psnr", "ssim", "mae", "pcc", "zf psnr", "zf ssim", "zf mae"
    );
    for id in &ids {
        let slice_dir = recon_root.join(id);
        let mean = data::read_complex_raw(&slice_dir.join("mean.img.raw"))?;
        let (uncertainty, _) = data::read_float_raw(&slice_dir.join("uncertainty.raw"))?;

        let gt = match data::load_slice(&dataset_dir, &manifest, id) {
            Ok((gt, coils)) => Some((gt, coils)),
            Err(e) => {
                if !warned {
                    eprintln!("warning: ground truth unavailable for {id}: {e}; reporting reconstruction-only statistics");
                    warned = true;
                }
                None
            }
        };
        let Some((gt, coils)) = gt else {
            per_slice.push(serde_json::json!({ "id": id, "dmsm": null, "zero_filled": null }));
            continue;
        };

        let mask = data::load_mask(&dataset_dir, &manifest, id, cfg.inference.acceleration)?;
        let sample = data::sample_from_parts(id, gt, coils, &mask)?;
        let zf = zero_fill_recon(&sample.y_u, &sample.coils)?;

        let psnr = metrics::psnr(&mean, &sample.ground_truth, None)?;
        let ssim = metrics::ssim(&mean, &sample.ground_truth, &metrics::SsimParams::default())?;
        let mae = metrics::mae(&mean, &sample.ground_truth)?;
        let gt_mag = sample.ground_truth.magnitude();
        let err_map: Vec<f64> = mean
            .magnitude()
            .iter()
            .zip(&gt_mag)
            .map(|(a, b)| (a - b).abs())
            .collect();
        let pcc = if cfg.eval.use_foreground_mask {
            let fg = metrics::foreground_mask(&sample.ground_truth, cfg.eval.foreground_threshold);
            metrics::pcc_masked(&uncertainty, &err_map, &fg)
        } else {
            metrics::pcc(&uncertainty, &err_map)
        };

        let zf_psnr = metrics::psnr(&zf, &sample.ground_truth, None)?;
        let zf_ssim = metrics::ssim(&zf, &sample.ground_truth, &metrics::SsimParams::default())?;
        let zf_mae = metrics::mae(&zf, &sample.ground_truth)?;

        dmsm_rows.psnr.push(psnr.db());
        dmsm_rows.ssim.push(ssim);
        dmsm_rows.mae.push(mae);
        if let Ok(p) = pcc {
            dmsm_rows.pcc.push(p);
        }
        zf_rows.psnr.push(zf_psnr.db());
        zf_rows.ssim.push(zf_ssim);
        zf_rows.mae.push(zf_mae);

        println!(
            "{id:<8} {:>10} {ssim:>8.4} {mae:>10.5} {:>8} | {:>10} {zf_ssim:>8.4} {zf_mae:>10.5}",
            format!("{psnr}"),
            pcc.as_ref().map(|p| format!("{p:.3}")).unwrap_or_else(|_| "n/a".into()),
            format!("{zf_psnr}"),
        );
        per_slice.push(serde_json::json!({
            "id": id,
            "dmsm": {
                "psnr_db": finite_or_null(psnr),
                "ssim": ssim,
                "mae": mae,
                "pcc": pcc.ok(),
            },
            "zero_filled": {
                "psnr_db": finite_or_null(zf_psnr),
                "ssim": zf_ssim,
                "mae": zf_mae,
            },
        }));
    }

    let agg = |rows: &MethodMetrics| {
        serde_json::json!({
            "psnr_db": agg_json(&rows.psnr),
            "ssim": agg_json(&rows.ssim),
            "mae": agg_json(&rows.mae),
            "pcc": if rows.pcc.is_empty() { serde_json::Value::Null } else { agg_json(&rows.pcc) },
        })
    };
    if !dmsm_rows.psnr.is_empty() {
        let a = metrics::aggregate(&dmsm_rows.psnr);
        let z = metrics::aggregate(&zf_rows.psnr);
        println!(
            "aggregate: dmsm {:.2} +/- {:.2} dB | zero-filled {:.2} +/- {:.2} dB ({} slices)",
            a.mean,
            a.std,
            z.mean,
            z.std,
            dmsm_rows.psnr.len()
        );
    }

    let report = serde_json::json!({
        "acceleration": cfg.inference.acceleration,
        "per_slice": per_slice,
        "aggregate": { "dmsm": agg(&dmsm_rows), "zero_filled": agg(&zf_rows) },
    });
    let report_path = PathBuf::from(&cfg.out_dir).join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report).map_err(DmsmError::from)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv = String::from("id,method,psnr_db,ssim,mae,pcc\n");
    for (i, id) in ids.iter().enumerate() {
        if i < dmsm_rows.psnr.len() {
            csv.push_str(&format!(
                "{id},dmsm,{},{},{},{}\n",
                dmsm_rows.psnr[i],
                dmsm_rows.ssim[i],
                dmsm_rows.mae[i],
                dmsm_rows.pcc.get(i).map(|v| v.to_string()).unwrap_or_default()
            ));
            csv.push_str(&format!(
                "{id},zero_filled,{},{},{},\n",
                zf_rows.psnr[i], zf_rows.ssim[i], zf_rows.mae[i]
            ));
        }
    }
    let csv_path = PathBuf::from(&cfg.out_dir).join("report.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("report: {} and {}", report_path.display(), csv_path.display());
    Ok(())
}

fn finite_or_null(v: PsnrValue) -> serde_json::Value {
    match v {
        PsnrValue::Db(x) => serde_json::json!(x),
        PsnrValue::Perfect(_) => serde_json::json!("perfect"),
    }
}

fn agg_json(values: &[f64]) -> serde_json::Value {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return serde_json::Value::Null;
    }
    let a = metrics::aggregate(&finite);
    serde_json::json!({ "mean": a.mean, "std": a.std })
}
