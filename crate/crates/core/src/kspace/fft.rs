//! Centered orthonormal 2D Fourier transform.
//!
//! `fft2c` and `ifft2c` sandwich the DFT between half-grid circular shifts so
//! the zero frequency sits at `(H/2, W/2)`, and scale by `1/sqrt(H*W)` in both
//! directions. The pair is exactly unitary: round trips are identity to
//! machine precision and Parseval holds, which the data-consistency algebra
//! relies on.

use crate::error::{DmsmError, Result};
use crate::kspace::ComplexImage;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Direction {
    Forward,
    Inverse,
}

static PLANS: OnceLock<Mutex<HashMap<(usize, Direction), Arc<dyn Fft<f64>>>>> = OnceLock::new();

fn plan(len: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry((len, dir))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            match dir {
                Direction::Forward => planner.plan_fft_forward(len),
                Direction::Inverse => planner.plan_fft_inverse(len),
            }
        })
        .clone()
}

/// Swap quadrants in place; for even side lengths fftshift and ifftshift
/// coincide, and the image invariant guarantees even sides.
fn shift2(buf: &mut [Complex64], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    for y in 0..hh {
        for x in 0..w {
            let src = y * w + x;
            let dst = ((y + hh) % h) * w + (x + hw) % w;
            buf.swap(src, dst);
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize) {
    for y in 0..h {
        for x in 0..w {
            dst[x * h + y] = src[y * w + x];
        }
    }
}

fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, dir: Direction) {
    let row_plan = plan(w, dir);
    let col_plan = plan(h, dir);
    let mut scratch = vec![Complex64::ZERO; row_plan.get_inplace_scratch_len().max(col_plan.get_inplace_scratch_len())];

    shift2(plane, h, w);
    for row in plane.chunks_exact_mut(w) {
        row_plan.process_with_scratch(row, &mut scratch);
    }
    let mut t = vec![Complex64::ZERO; h * w];
    transpose(plane, &mut t, h, w);
    for col in t.chunks_exact_mut(h) {
        col_plan.process_with_scratch(col, &mut scratch);
    }
    transpose(&t, plane, w, h);
    shift2(plane, h, w);

    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in plane.iter_mut() {
        *v *= scale;
    }
}

fn fft2c_dir(image: &ComplexImage, dir: Direction) -> Result<ComplexImage> {
    image.check_finite().map_err(|_| {
        DmsmError::NonFinite("fft input contains NaN or Inf".into())
    })?;
    let (_, h, w) = image.shape();
    let mut out = image.clone();
    let planes: Vec<&mut [Complex64]> = out.as_mut_slice().chunks_exact_mut(h * w).collect();
    use rayon::prelude::*;
    planes.into_par_iter().for_each(|plane| fft2_plane(plane, h, w, dir));
    Ok(out)
}

/// Centered orthonormal 2D DFT, applied per coil.
pub fn fft2c(image: &ComplexImage) -> Result<ComplexImage> {
    fft2c_dir(image, Direction::Forward)
}

/// Inverse of [`fft2c`].
pub fn ifft2c(kspace: &ComplexImage) -> Result<ComplexImage> {
    fft2c_dir(kspace, Direction::Inverse)
}
