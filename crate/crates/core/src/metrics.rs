//! Reconstruction quality metrics: PSNR, SSIM, MAE against the fully sampled
//! reference, and the Pearson correlation between uncertainty maps and
//! absolute error maps. All image metrics operate on magnitude images
//! normalized by the reference maximum.

use crate::error::{DmsmError, Result};
use crate::kspace::ComplexImage;
use crate::rng::{stream, uniform_index, StreamKind};
use serde::Serialize;

/// PSNR value; identical inputs yield the `Perfect` sentinel rather than an
/// infinity that would poison JSON output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum PsnrValue {
    Db(f64),
    Perfect(&'static str),
}

pub const PSNR_PERFECT: PsnrValue = PsnrValue::Perfect("perfect");

impl PsnrValue {
    /// Finite dB value, `+inf` for the sentinel.
    pub fn db(&self) -> f64 {
        match self {
            PsnrValue::Db(v) => *v,
            PsnrValue::Perfect(_) => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for PsnrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsnrValue::Db(v) => write!(f, "{v:.3}"),
            PsnrValue::Perfect(_) => write!(f, "perfect"),
        }
    }
}

fn check_same_shape(x: &ComplexImage, reference: &ComplexImage) -> Result<()> {
    if x.same_shape(reference) {
        Ok(())
    } else {
        Err(DmsmError::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )))
    }
}

/// Normalize both magnitude images by the reference maximum; `data_range`
/// overrides the default (max of the reference magnitude).
fn normalized_mags(
    x: &ComplexImage,
    reference: &ComplexImage,
    data_range: Option<f64>,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_same_shape(x, reference)?;
    let xm = x.magnitude();
    let rm = reference.magnitude();
    let range = match data_range {
        Some(r) if r > 0.0 => r,
        Some(r) => {
            return Err(DmsmError::InvalidArgument(format!("data_range must be positive, got {r}")))
        }
        None => rm.iter().cloned().fold(0.0, f64::max),
    };
    if range <= 0.0 {
        return Err(DmsmError::InvalidArgument("reference image is identically zero".into()));
    }
    Ok((
        xm.iter().map(|v| v / range).collect(),
        rm.iter().map(|v| v / range).collect(),
        range,
    ))
}

/// `10 log10(1 / mse)` on normalized magnitudes (equivalently
/// `10 log10(range^2 / mse_raw)`).
pub fn psnr(x: &ComplexImage, reference: &ComplexImage, data_range: Option<f64>) -> Result<PsnrValue> {
    let (xm, rm, _) = normalized_mags(x, reference, data_range)?;
    let mse: f64 =
        xm.iter().zip(&rm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xm.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_PERFECT);
    }
    Ok(PsnrValue::Db(10.0 * (1.0 / mse).log10()))
}

#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

/// Windowed SSIM with a Gaussian window, mean over valid window positions.
pub fn ssim(x: &ComplexImage, reference: &ComplexImage, params: &SsimParams) -> Result<f64> {
    let (h, w) = (x.height(), x.width());
    let win = params.window;
    if h < win || w < win {
        return Err(DmsmError::InvalidArgument(format!(
            "image {h}x{w} smaller than the {win}x{win} SSIM window"
        )));
    }
    let (xm, rm, _) = normalized_mags(x, reference, None)?;

    // Normalized Gaussian window weights.
    let half = (win / 2) as isize;
    let mut weights = vec![0.0; win * win];
    let mut wsum = 0.0;
    for dy in 0..win {
        for dx in 0..win {
            let fy = dy as isize - half;
            let fx = dx as isize - half;
            let g = (-((fy * fy + fx * fx) as f64) / (2.0 * params.sigma * params.sigma)).exp();
            weights[dy * win + dx] = g;
            wsum += g;
        }
    }
    for v in weights.iter_mut() {
        *v /= wsum;
    }

    let c1 = (params.k1 * 1.0).powi(2);
    let c2 = (params.k2 * 1.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            let (mut mx, mut my) = (0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = weights[dy * win + dx];
                    let idx = (y0 + dy) * w + (x0 + dx);
                    mx += wgt * xm[idx];
                    my += wgt * rm[idx];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = weights[dy * win + dx];
                    let idx = (y0 + dy) * w + (x0 + dx);
                    let ax = xm[idx] - mx;
                    let ay = rm[idx] - my;
                    vx += wgt * ax * ax;
                    vy += wgt * ay * ay;
                    cov += wgt * ax * ay;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean absolute error between magnitudes (no normalization).
pub fn mae(x: &ComplexImage, reference: &ComplexImage) -> Result<f64> {
    check_same_shape(x, reference)?;
    let xm = x.magnitude();
    let rm = reference.magnitude();
    Ok(xm.iter().zip(&rm).map(|(a, b)| (a - b).abs()).sum::<f64>() / xm.len() as f64)
}

/// Pearson correlation over pixels; rejects zero-variance inputs.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(DmsmError::ShapeMismatch(format!(
            "pcc inputs of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DmsmError::InvalidArgument(
            "pcc undefined: an input has zero variance".into(),
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Foreground selector: reference magnitude above `threshold_frac` of its max.
pub fn foreground_mask(reference: &ComplexImage, threshold_frac: f64) -> Vec<bool> {
    let rm = reference.magnitude();
    let max = rm.iter().cloned().fold(0.0, f64::max);
    rm.iter().map(|&v| v > threshold_frac * max).collect()
}

/// PCC restricted to selected pixels.
pub fn pcc_masked(a: &[f64], b: &[f64], select: &[bool]) -> Result<f64> {
    let fa: Vec<f64> = a.iter().zip(select).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    let fb: Vec<f64> = b.iter().zip(select).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    pcc(&fa, &fb)
}

/// Percentile bootstrap confidence interval for the mean of `values`.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(DmsmError::InvalidArgument("bootstrap over an empty sample".into()));
    }
    let mut rng = stream(seed, StreamKind::Validation, 0xB007);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..values.len() {
                acc += values[uniform_index(&mut rng, values.len())];
            }
            acc / values.len() as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo_idx = ((alpha / 2.0) * resamples as f64) as usize;
    let hi_idx = (((1.0 - alpha / 2.0) * resamples as f64) as usize).min(resamples - 1);
    Ok((means[lo_idx], means[hi_idx]))
}

/// Metrics of one slice.
#[derive(Debug, Clone, Serialize)]
pub struct SliceMetrics {
    pub id: String,
    pub psnr_db: PsnrValue,
    pub ssim: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcc: Option<f64>,
}

/// Mean and population standard deviation over slices.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}
