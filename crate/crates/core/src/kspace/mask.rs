//! Variable-density mask generation, retrospective undersampling and the
//! partition split used for self-supervision.

use crate::error::{DmsmError, Result};
use crate::kspace::{AcsRegion, ComplexImage, KSpaceData, SamplingMask};
use crate::rng::{stream, uniform_open, StreamKind};
use num_complex::Complex64;
use rand_core::Rng as _;

/// Tolerance on achieved vs nominal acceleration.
const ACCEL_TOLERANCE: f64 = 0.15;

/// Generate a center-weighted variable-density mask.
///
/// Per-pixel sampling probability follows an isotropic 2D Gaussian centered
/// at the k-space center; its width is tuned by bisection so the expected
/// sample count equals `H*W/R`. The ACS rectangle (center `acs_lines` rows,
/// full width) is always fully sampled. Deterministic for a given seed.
pub fn generate_vd_mask(
    h: usize,
    w: usize,
    r: f64,
    acs_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if !(r >= 1.0) {
        return Err(DmsmError::InvalidArgument(format!(
            "acceleration must be >= 1, got {r}"
        )));
    }
    if acs_lines > h {
        return Err(DmsmError::InvalidArgument(format!(
            "acs_lines {acs_lines} exceeds height {h}"
        )));
    }
    let acs = AcsRegion::center_lines(h, w, acs_lines);
    let total = (h * w) as f64;
    let budget = total / r;
    let acs_count = (acs.row1 - acs.row0) * (acs.col1 - acs.col0);
    if acs_count as f64 > budget + 1e-9 {
        return Err(DmsmError::InfeasibleMask(format!(
            "ACS region alone holds {acs_count} samples, exceeding the budget {budget:.1} for R={r}"
        )));
    }

    if r <= 1.0 + 1e-12 {
        let mut mask = SamplingMask::ones(h, w);
        mask.acs = acs;
        return Ok(mask);
    }

    // Squared distance from the k-space center for every non-ACS pixel.
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut d2 = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            d2[y * w + x] = dy * dy + dx * dx;
        }
    }
    let non_acs: Vec<usize> = (0..h * w)
        .filter(|&i| !acs.contains(i / w, i % w))
        .collect();
    let target = budget - acs_count as f64;

    let expected = |sigma: f64| -> f64 {
        non_acs.iter().map(|&i| (-d2[i] / (2.0 * sigma * sigma)).exp()).sum()
    };

    // Bisection on the Gaussian width; expected count is monotone in sigma.
    let mut lo = 1e-3;
    let mut hi = 10.0 * h.max(w) as f64;
    let probs: Vec<f64>;
    if expected(hi) < target {
        // Nearly full sampling, outside the Gaussian family's reach: fall
        // back to a flat probability that meets the budget exactly.
        let p = (target / non_acs.len() as f64).min(1.0);
        probs = non_acs.iter().map(|_| p).collect();
    } else {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        probs = non_acs.iter().map(|&i| (-d2[i] / (2.0 * sigma * sigma)).exp()).collect();
    }

    let mut rng = stream(seed, StreamKind::Mask, (h as u64) << 32 | w as u64);
    let mut grid = vec![0u8; h * w];
    for (slot, &i) in non_acs.iter().enumerate() {
        if uniform_open(&mut rng) <= probs[slot] {
            grid[i] = 1;
        }
    }
    for y in acs.row0..acs.row1 {
        for x in acs.col0..acs.col1 {
            grid[y * w + x] = 1;
        }
    }

    // The Bernoulli count fluctuates; on small grids the tail can leave the
    // +/-15% acceleration band the mask type guarantees. Nudge outliers back
    // to the budget with profile-weighted flips from the same seed stream
    // (deterministic, and a no-op for typical draws).
    let target_ones = budget.round().max(acs_count as f64) as usize;
    let count_ones = |g: &[u8]| g.iter().map(|&v| v as usize).sum::<usize>();
    let mut ones = count_ones(&grid);
    if (ones as f64 - target_ones as f64).abs() > 0.10 * target_ones as f64 {
        let mut guard = 0usize;
        while ones != target_ones && guard < 100_000 {
            guard += 1;
            let slot = (rng.next_u64() % non_acs.len() as u64) as usize;
            let i = non_acs[slot];
            if ones < target_ones && grid[i] == 0 {
                // Accept with the Gaussian profile probability.
                if uniform_open(&mut rng) <= probs[slot] {
                    grid[i] = 1;
                    ones += 1;
                }
            } else if ones > target_ones && grid[i] == 1 {
                if uniform_open(&mut rng) <= 1.0 - probs[slot] {
                    grid[i] = 0;
                    ones -= 1;
                }
            }
        }
        // Profile-weighted flips stall when the profile saturates; finish
        // with unweighted flips.
        let mut slot = 0usize;
        while ones != target_ones && slot < non_acs.len() {
            let i = non_acs[slot];
            if ones < target_ones && grid[i] == 0 {
                grid[i] = 1;
                ones += 1;
            } else if ones > target_ones && grid[i] == 1 {
                grid[i] = 0;
                ones -= 1;
            }
            slot += 1;
        }
    }

    let mask = SamplingMask::new(h, w, grid, acs, r)?;
    let achieved = mask.achieved_acceleration();
    if (achieved - r).abs() > ACCEL_TOLERANCE * r {
        return Err(DmsmError::InfeasibleMask(format!(
            "achieved acceleration {achieved:.2} outside +/-15% of nominal {r} (seed {seed})"
        )));
    }
    Ok(mask)
}

/// Retrospective undersampling: zero out everything outside `mask` and store
/// the mask alongside the data.
pub fn undersample(y_full: &KSpaceData, mask: &SamplingMask) -> Result<KSpaceData> {
    let (coils, h, w) = y_full.data().shape();
    if h != mask.height() || w != mask.width() {
        return Err(DmsmError::ShapeMismatch(format!(
            "undersample: data {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = y_full.data().clone();
    for c in 0..coils {
        let plane = out.coil_mut(c);
        for (i, v) in plane.iter_mut().enumerate() {
            if mask.grid()[i] == 0 {
                *v = Complex64::ZERO;
            }
        }
    }
    KSpaceData::new(out, mask.clone())
}

/// Split acquired k-space into two partitions.
///
/// The partition mask selects each sampled non-ACS location independently
/// with probability `rho` and is forced to one on the ACS region, so both
/// partitions retain the calibration data. Outside the ACS the partitions
/// are complementary: their supports are disjoint and their union is the
/// acquisition support.
pub fn partition_kspace(
    y_u: &KSpaceData,
    rho: f64,
    seed: u64,
) -> Result<(KSpaceData, KSpaceData, SamplingMask)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DmsmError::InvalidArgument(format!(
            "partition probability must lie in (0, 1), got {rho}"
        )));
    }
    let acq = y_u.mask();
    let (h, w) = (acq.height(), acq.width());
    let acs = acq.acs_region();

    let mut rng = stream(seed, StreamKind::Partition, 0);
    let mut m_grid = vec![0u8; h * w];
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if acs.contains(y, x) {
            m_grid[i] = 1;
        } else if acq.grid()[i] == 1 && uniform_open(&mut rng) <= rho {
            m_grid[i] = 1;
        }
    }

    let p2_grid: Vec<u8> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if acs.contains(y, x) {
                1
            } else {
                acq.grid()[i] & (1 - m_grid[i])
            }
        })
        .collect();

    let (coils, _, _) = y_u.data().shape();
    let mut d1 = ComplexImage::zeros(coils, h, w);
    let mut d2 = ComplexImage::zeros(coils, h, w);
    for c in 0..coils {
        let src = y_u.data().coil(c);
        let (p1, p2) = (d1.coil_mut(c), d2.coil_mut(c));
        for i in 0..h * w {
            if m_grid[i] == 1 {
                p1[i] = src[i];
            }
            if p2_grid[i] == 1 {
                p2[i] = src[i];
            }
        }
    }

    let count = |g: &[u8]| g.iter().map(|&v| v as usize).sum::<usize>().max(1);
    let m = SamplingMask::new(h, w, m_grid.clone(), acs, (h * w) as f64 / count(&m_grid) as f64)?;
    let mask2 =
        SamplingMask::new(h, w, p2_grid.clone(), acs, (h * w) as f64 / count(&p2_grid) as f64)?;
    let y_p1 = KSpaceData::new(d1, m.clone())?;
    let y_p2 = KSpaceData::new(d2, mask2)?;
    Ok((y_p1, y_p2, m))
}
