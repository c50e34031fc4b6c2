//! Dual-domain self-supervised objective: the diffusion noise loss, image
//! domain consistency across the three branches, k-space consistency against
//! the acquired measurements, and the weighted total.
//!
//! Norm conventions: the noise loss is the mean over pixels of the squared
//! complex residual magnitude; the consistency losses are mean-reduced
//! complex l1 (sum of moduli), with the k-space loss reduced over sampled
//! locations only.

use crate::error::{DmsmError, Result};
use crate::kspace::{ComplexImage, KSpaceData};
use serde::Serialize;

/// Weights of the total objective. The diffusion term enters once per branch,
/// which is the same as a branch mean scaled by three.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ic: f64,
    pub lambda_kc: f64,
    pub dm_multiplier: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ic: 1.0, lambda_kc: 5.0, dm_multiplier: 3.0 }
    }
}

/// Outputs of one reconstruction branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Noise prediction of the network.
    pub eps_hat: ComplexImage,
    /// DC-projected image estimate.
    pub x_hat: ComplexImage,
    /// Reconstructed k-space restricted to the acquisition mask.
    pub y_hat: KSpaceData,
}

/// The three branches of a training step: full input plus the two partitions.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub full: BranchOutput,
    pub p1: BranchOutput,
    pub p2: BranchOutput,
}

impl BranchOutputs {
    pub fn iter(&self) -> [&BranchOutput; 3] {
        [&self.full, &self.p1, &self.p2]
    }
}

/// Per-term loss breakdown, logged every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub dm: f64,
    pub ic: f64,
    pub kc: f64,
    pub total: f64,
}

fn check_same_shape(a: &ComplexImage, b: &ComplexImage, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(DmsmError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Mean over pixels of the squared complex residual `|a - b|^2`.
pub fn mse_complex(a: &ComplexImage, b: &ComplexImage) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        / n)
}

/// Mean over pixels of the complex residual modulus `|a - b|`.
fn l1_complex(a: &ComplexImage, b: &ComplexImage) -> f64 {
    let n = a.as_slice().len() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).norm())
        .sum::<f64>()
        / n
}

/// Diffusion loss: MSE between the injected and predicted noise, averaged
/// over the branches.
pub fn loss_dm(eps_true: &ComplexImage, eps_hat: [&ComplexImage; 3]) -> Result<f64> {
    let mut acc = 0.0;
    for e in eps_hat {
        acc += mse_complex(e, eps_true)?;
    }
    Ok(acc / 3.0)
}

/// Image-domain consistency: pairwise mean-l1 between the three branch
/// reconstructions.
pub fn loss_ic(x_r: &ComplexImage, x_p1: &ComplexImage, x_p2: &ComplexImage) -> Result<f64> {
    check_same_shape(x_r, x_p1, "loss_ic")?;
    check_same_shape(x_r, x_p2, "loss_ic")?;
    Ok(l1_complex(x_r, x_p1) + l1_complex(x_r, x_p2) + l1_complex(x_p1, x_p2))
}

/// K-space consistency on unrestricted branch k-space grids: the reduction
/// only ever reads sampled locations of `y_u`, so values outside the mask
/// cannot influence it.
pub fn loss_kc_raw(branches: [&ComplexImage; 3], y_u: &KSpaceData) -> Result<f64> {
    for y in branches {
        check_same_shape(y, y_u.data(), "loss_kc")?;
    }
    let grid = y_u.mask().grid();
    let (coils, h, w) = y_u.data().shape();
    let sampled = y_u.mask().count_ones() * coils;
    if sampled == 0 {
        return Err(DmsmError::InvalidArgument("loss_kc: empty acquisition mask".into()));
    }
    let mut acc = 0.0;
    for y in branches {
        let mut term = 0.0;
        for c in 0..coils {
            let a = y.coil(c);
            let b = y_u.data().coil(c);
            for i in 0..h * w {
                if grid[i] == 1 {
                    term += (a[i] - b[i]).norm();
                }
            }
        }
        acc += term / sampled as f64;
    }
    Ok(acc)
}

/// K-space consistency: each branch's reconstructed k-space against the
/// acquired measurements, mean complex l1 over sampled locations only.
/// Branches must be restricted to the acquisition mask of `y_u`.
pub fn loss_kc(
    y_r: &KSpaceData,
    y_p1: &KSpaceData,
    y_p2: &KSpaceData,
    y_u: &KSpaceData,
) -> Result<f64> {
    for (name, y) in [("y_r", y_r), ("y_p1", y_p1), ("y_p2", y_p2)] {
        if y.mask() != y_u.mask() {
            return Err(DmsmError::ShapeMismatch(format!(
                "loss_kc: {name} is not restricted to the acquisition mask"
            )));
        }
    }
    loss_kc_raw([y_r.data(), y_p1.data(), y_p2.data()], y_u)
}

/// Weighted total with the per-term breakdown for logging.
pub fn total_loss(dm: f64, ic: f64, kc: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        dm,
        ic,
        kc,
        total: weights.lambda_ic * ic + weights.lambda_kc * kc + weights.dm_multiplier * dm,
    }
}

// ---------------------------------------------------------------------------
// Gradients (used by the trainer; subgradient 0 at the l1 kink)
// ---------------------------------------------------------------------------

/// d/da of `coeff * mean|a - b|^2`: `coeff * 2 (a - b) / n`.
pub fn mse_grad(a: &ComplexImage, b: &ComplexImage, coeff: f64) -> ComplexImage {
    let n = a.as_slice().len() as f64;
    let mut g = ComplexImage::zeros(a.shape().0, a.height(), a.width());
    for (gi, (x, y)) in g.as_mut_slice().iter_mut().zip(a.as_slice().iter().zip(b.as_slice())) {
        *gi = (x - y) * (2.0 * coeff / n);
    }
    g
}

/// Accumulate d/da of `coeff * mean|a - b|` into `acc` (and the negation
/// into `acc_b` when provided).
pub fn l1_grad_accum(
    a: &ComplexImage,
    b: &ComplexImage,
    coeff: f64,
    acc: &mut ComplexImage,
    mut acc_b: Option<&mut ComplexImage>,
) {
    let n = a.as_slice().len() as f64;
    for (i, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        let d = x - y;
        let m = d.norm();
        if m > 0.0 {
            let g = d * (coeff / (n * m));
            acc.as_mut_slice()[i] += g;
            if let Some(gb) = acc_b.as_deref_mut() {
                gb.as_mut_slice()[i] -= g;
            }
        }
    }
}

/// Gradient of the k-space consistency term for one branch, supported only
/// on the sampled locations: `coeff * sign(y_hat - y_u) / n_sampled`.
pub fn kc_grad(y_hat: &ComplexImage, y_u: &KSpaceData, coeff: f64) -> ComplexImage {
    let (coils, h, w) = y_u.data().shape();
    let grid = y_u.mask().grid();
    let sampled = (y_u.mask().count_ones() * coils) as f64;
    let mut g = ComplexImage::zeros(coils, h, w);
    for c in 0..coils {
        let a = y_hat.coil(c);
        let b = y_u.data().coil(c);
        let dst = g.coil_mut(c);
        for i in 0..h * w {
            if grid[i] == 1 {
                let d = a[i] - b[i];
                let m = d.norm();
                if m > 0.0 {
                    dst[i] = d * (coeff / (sampled * m));
                }
            }
        }
    }
    g
}
