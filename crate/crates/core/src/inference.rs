//! Reverse-diffusion sampling and multi-path aggregation.
//!
//! Each path starts from its own Gaussian draw and runs the full reverse
//! chain; the per-pixel mean of the paths is the reconstruction and the
//! per-pixel standard deviation of their magnitudes is the uncertainty map.
//! Paths are embarrassingly parallel; the reduction iterates them in
//! ascending seed order with compensated summation, so the aggregate is
//! bitwise independent of both completion order and seed-list permutation.

use crate::backbone::{backbone_reconstruct_conditioned, BackboneModel};
use crate::error::{DmsmError, Result};
use crate::kspace::{
    apply_coils, fft2c, undersample, zero_fill_recon, CoilSensitivities, ComplexImage, KSpaceData,
};
use crate::rng::{NormalSource, StreamKind};
use crate::schedule::NoiseSchedule;
use num_complex::Complex64;
use rayon::prelude::*;

/// Variance of the low-amplitude measurement perturbation injected into the
/// reverse-step reference k-space.
pub const EPS_LOW_VARIANCE: f64 = 0.1;

/// Inference-time switches.
#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    /// Use the measurements as-is instead of re-noising them each step
    /// (ablation switch; the default follows the training-matched scheme).
    pub clean_measurements: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { clean_measurements: false }
    }
}

fn draw_complex(src: &mut NormalSource, h: usize, w: usize, std: f64) -> ComplexImage {
    let mut img = ComplexImage::zeros(1, h, w);
    for v in img.as_mut_slice().iter_mut() {
        *v = Complex64::new(std * src.next(), std * src.next());
    }
    img
}

/// One reverse step `x_{t-1} = R(x_t, y_t_eps, t) + sigma_t z`.
///
/// The network is conditioned on the re-noised measurements
/// `y_t_eps = F(sqrt(ab) x_u + sqrt(1-ab) eps_low)` restricted to the
/// acquisition mask, while the data-consistency projection inside the
/// operator always pins the clean acquired data (the DC layer is defined on
/// the measured k-space itself). At `t = 1` the posterior noise scale is
/// zero, so the output is exactly the backbone output.
pub fn reverse_step(
    model: &BackboneModel,
    x_t: &ComplexImage,
    t: usize,
    y_u: &KSpaceData,
    coils: &CoilSensitivities,
    sched: &NoiseSchedule,
    noise: &mut NormalSource,
    opts: &SamplerOptions,
) -> Result<ComplexImage> {
    if t < 1 || t > sched.t_steps() {
        return Err(DmsmError::InvalidArgument(format!(
            "reverse_step: t {t} outside 1..={}",
            sched.t_steps()
        )));
    }
    let (h, w) = (x_t.height(), x_t.width());
    let step = sched.posterior_step(t)?;

    let y_cond = if opts.clean_measurements {
        y_u.clone()
    } else {
        let x_u = zero_fill_recon(y_u, coils)?;
        let eps_low = draw_complex(noise, h, w, EPS_LOW_VARIANCE.sqrt());
        let noised = x_u
            .scaled(step.sqrt_alpha_bar)
            .axpy(step.sqrt_one_minus_alpha_bar, &eps_low);
        let k = fft2c(&apply_coils(&noised, coils)?)?;
        undersample(&KSpaceData::fully_sampled(k), y_u.mask())?
    };

    let rec = backbone_reconstruct_conditioned(model, x_t, y_u, &y_cond, coils, t, sched, false)?;
    let z = draw_complex(noise, h, w, 1.0);
    Ok(rec.x_hat.axpy(step.sigma, &z))
}

/// Run one full reverse chain from pure noise.
pub fn sample_path(
    model: &BackboneModel,
    y_u: &KSpaceData,
    coils: &CoilSensitivities,
    sched: &NoiseSchedule,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<ComplexImage> {
    let (h, w) = (y_u.mask().height(), y_u.mask().width());
    let mut noise = NormalSource::from_stream(seed, StreamKind::SamplePath, 0);
    let mut x = draw_complex(&mut noise, h, w, 1.0);
    for t in (1..=sched.t_steps()).rev() {
        x = reverse_step(model, &x, t, y_u, coils, sched, &mut noise, opts)?;
    }
    Ok(x)
}

/// N reconstructions, their mean and the per-pixel magnitude standard
/// deviation.
#[derive(Debug, Clone)]
pub struct MultiPathResult {
    pub paths: Vec<ComplexImage>,
    pub seeds: Vec<u64>,
    pub mean: ComplexImage,
    /// Population standard deviation of the path magnitudes, per pixel.
    pub std_map: Vec<f64>,
}

fn neumaier_add(sum: &mut f64, comp: &mut f64, value: f64) {
    let t = *sum + value;
    if sum.abs() >= value.abs() {
        *comp += (*sum - t) + value;
    } else {
        *comp += (value - t) + *sum;
    }
    *sum = t;
}

/// Aggregate paths into mean and magnitude-std maps. The reduction visits
/// paths in ascending seed order regardless of the order given, which makes
/// the result exactly permutation invariant.
pub fn aggregate_paths(paths: &[ComplexImage], seeds: &[u64]) -> Result<(ComplexImage, Vec<f64>)> {
    if paths.is_empty() || paths.len() != seeds.len() {
        return Err(DmsmError::InvalidArgument(
            "aggregate_paths needs a nonempty path list with matching seeds".into(),
        ));
    }
    let (h, w) = (paths[0].height(), paths[0].width());
    for p in paths {
        if !p.same_shape(&paths[0]) {
            return Err(DmsmError::ShapeMismatch("paths must share a shape".into()));
        }
    }
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by_key(|&i| seeds[i]);
    let n = paths.len() as f64;

    // Sums are anchored at the first path (in canonical order): shifted
    // accumulation cancels exactly when all paths agree, so identical inputs
    // give a bitwise-zero uncertainty map.
    let mut mean = ComplexImage::zeros(1, h, w);
    let mut std_map = vec![0.0; h * w];
    let anchor = &paths[order[0]];
    for i in 0..h * w {
        let z0 = anchor.coil(0)[i];
        let m0 = z0.norm();
        let (mut sr, mut cr, mut si, mut ci) = (0.0, 0.0, 0.0, 0.0);
        let (mut sm, mut cm) = (0.0, 0.0);
        for &p in &order {
            let z = paths[p].coil(0)[i];
            neumaier_add(&mut sr, &mut cr, z.re - z0.re);
            neumaier_add(&mut si, &mut ci, z.im - z0.im);
            neumaier_add(&mut sm, &mut cm, z.norm() - m0);
        }
        mean.coil_mut(0)[i] = Complex64::new(z0.re + (sr + cr) / n, z0.im + (si + ci) / n);
        let shifted_mean = (sm + cm) / n;
        let (mut sv, mut cv) = (0.0, 0.0);
        for &p in &order {
            let d = (paths[p].coil(0)[i].norm() - m0) - shifted_mean;
            neumaier_add(&mut sv, &mut cv, d * d);
        }
        std_map[i] = ((sv + cv) / n).sqrt();
    }
    Ok((mean, std_map))
}

/// Run `n` independent reverse chains with seeds `base_seed..base_seed+n`.
pub fn multipath_reconstruct(
    model: &BackboneModel,
    y_u: &KSpaceData,
    coils: &CoilSensitivities,
    sched: &NoiseSchedule,
    n: usize,
    base_seed: u64,
    opts: &SamplerOptions,
) -> Result<MultiPathResult> {
    if n < 1 {
        return Err(DmsmError::InvalidArgument("path count must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
    let paths: Result<Vec<ComplexImage>> = seeds
        .par_iter()
        .map(|&seed| sample_path(model, y_u, coils, sched, seed, opts))
        .collect();
    let paths = paths?;
    let (mean, std_map) = aggregate_paths(&paths, &seeds)?;
    Ok(MultiPathResult { paths, seeds, mean, std_map })
}
