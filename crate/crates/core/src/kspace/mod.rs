//! Complex image / k-space algebra.
//!
//! Conventions used throughout: images and k-space grids are row-major
//! `[coil][row][col]` with even side lengths of at least 8, the Fourier pair
//! is the centered orthonormal transform in [`fft`], and every
//! [`KSpaceData`] is exactly zero outside its sampling mask.

mod fft;
mod mask;

pub use fft::{fft2c, ifft2c};
pub use mask::{generate_vd_mask, partition_kspace, undersample};

use crate::error::{DmsmError, Result};
use num_complex::Complex64;

/// Complex-valued 2D grid with an optional coil axis (`coils == 1` for
/// single-coil images).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    coils: usize,
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
        return Err(DmsmError::InvalidArgument(format!(
            "grid must be even-sized and at least 8x8, got {h}x{w}"
        )));
    }
    Ok(())
}

impl ComplexImage {
    pub fn new(coils: usize, h: usize, w: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(h, w)?;
        if coils == 0 || data.len() != coils * h * w {
            return Err(DmsmError::ShapeMismatch(format!(
                "expected {coils}x{h}x{w} = {} values, got {}",
                coils * h * w,
                data.len()
            )));
        }
        let img = Self { coils, h, w, data };
        img.check_finite()?;
        Ok(img)
    }

    pub fn zeros(coils: usize, h: usize, w: usize) -> Self {
        check_dims(h, w).expect("invalid grid dimensions");
        Self { coils, h, w, data: vec![Complex64::ZERO; coils * h * w] }
    }

    /// Single-coil image from row-major values.
    pub fn single(h: usize, w: usize, data: Vec<Complex64>) -> Result<Self> {
        Self::new(1, h, w, data)
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.coils, self.h, self.w)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> Complex64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: Complex64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            Ok(())
        } else {
            Err(DmsmError::NonFinite("complex grid contains NaN or Inf".into()))
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Per-pixel magnitudes of a single-coil image.
    pub fn magnitude(&self) -> Vec<f64> {
        assert_eq!(self.coils, 1, "magnitude is defined on single-coil images");
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let data = self.data.iter().map(|z| z * s).collect();
        Self { coils: self.coils, h: self.h, w: self.w, data }
    }

    /// `self + s * other`, elementwise.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        assert!(self.same_shape(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Self { coils: self.coils, h: self.h, w: self.w, data }
    }
}

/// Rectangular fully-sampled calibration region (half-open ranges).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AcsRegion {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl AcsRegion {
    pub fn empty() -> Self {
        Self { row0: 0, row1: 0, col0: 0, col1: 0 }
    }

    /// Center `lines` rows spanning the full width.
    pub fn center_lines(h: usize, w: usize, lines: usize) -> Self {
        if lines == 0 {
            return Self::empty();
        }
        let row0 = (h - lines.min(h)) / 2;
        Self { row0, row1: row0 + lines.min(h), col0: 0, col1: w }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row0 && y < self.row1 && x >= self.col0 && x < self.col1
    }

    pub fn is_empty(&self) -> bool {
        self.row0 == self.row1 || self.col0 == self.col1
    }
}

/// Binary k-space sampling pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    grid: Vec<u8>,
    h: usize,
    w: usize,
    acs: AcsRegion,
    acceleration: f64,
}

impl SamplingMask {
    pub fn new(h: usize, w: usize, grid: Vec<u8>, acs: AcsRegion, acceleration: f64) -> Result<Self> {
        check_dims(h, w)?;
        if grid.len() != h * w {
            return Err(DmsmError::ShapeMismatch(format!(
                "mask grid expected {} entries, got {}",
                h * w,
                grid.len()
            )));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(DmsmError::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let mask = Self { grid, h, w, acs, acceleration };
        for y in mask.acs.row0..mask.acs.row1 {
            for x in mask.acs.col0..mask.acs.col1 {
                if !mask.is_sampled(y, x) {
                    return Err(DmsmError::InvalidArgument(
                        "ACS region must be fully sampled".into(),
                    ));
                }
            }
        }
        Ok(mask)
    }

    pub fn ones(h: usize, w: usize) -> Self {
        check_dims(h, w).expect("invalid grid dimensions");
        Self {
            grid: vec![1; h * w],
            h,
            w,
            acs: AcsRegion::empty(),
            acceleration: 1.0,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn acs_region(&self) -> AcsRegion {
        self.acs
    }

    pub fn nominal_acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn is_sampled(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn achieved_acceleration(&self) -> f64 {
        let ones = self.count_ones();
        if ones == 0 {
            f64::INFINITY
        } else {
            (self.h * self.w) as f64 / ones as f64
        }
    }
}

/// Multi-coil k-space measurements together with the mask they were acquired
/// under. Unsampled entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    data: ComplexImage,
    mask: SamplingMask,
}

impl KSpaceData {
    pub fn new(data: ComplexImage, mask: SamplingMask) -> Result<Self> {
        if data.height() != mask.height() || data.width() != mask.width() {
            return Err(DmsmError::ShapeMismatch(format!(
                "k-space {}x{} vs mask {}x{}",
                data.height(),
                data.width(),
                mask.height(),
                mask.width()
            )));
        }
        let ks = Self { data, mask };
        ks.check_zero_outside_mask()?;
        Ok(ks)
    }

    /// Fully sampled measurements (all-ones mask).
    pub fn fully_sampled(data: ComplexImage) -> Self {
        let mask = SamplingMask::ones(data.height(), data.width());
        Self { data, mask }
    }

    pub fn data(&self) -> &ComplexImage {
        &self.data
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn check_zero_outside_mask(&self) -> Result<()> {
        let (coils, h, w) = self.data.shape();
        for c in 0..coils {
            let plane = self.data.coil(c);
            for y in 0..h {
                for x in 0..w {
                    if !self.mask.is_sampled(y, x) && plane[y * w + x] != Complex64::ZERO {
                        return Err(DmsmError::InvalidArgument(format!(
                            "k-space nonzero outside mask at coil {c}, ({y}, {x})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Complex coil sensitivity maps, normalized so that the sum of squared
/// magnitudes is one inside the object support.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    maps: ComplexImage,
}

impl CoilSensitivities {
    pub fn new(maps: ComplexImage) -> Self {
        Self { maps }
    }

    pub fn maps(&self) -> &ComplexImage {
        &self.maps
    }

    pub fn n_coils(&self) -> usize {
        self.maps.coils()
    }

    /// Uniform single unit coil (identity apply/combine).
    pub fn identity(h: usize, w: usize) -> Self {
        let mut maps = ComplexImage::zeros(1, h, w);
        maps.as_mut_slice().fill(Complex64::new(1.0, 0.0));
        Self { maps }
    }

    /// Largest deviation of `sum_c |C_c|^2` from one over the grid.
    pub fn normalization_residual(&self) -> f64 {
        let (coils, h, w) = self.maps.shape();
        let mut worst = 0.0f64;
        for idx in 0..h * w {
            let s: f64 = (0..coils).map(|c| self.maps.coil(c)[idx].norm_sqr()).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

/// Per-coil product `C_c * x` lifting a single-coil image to coil space.
pub fn apply_coils(x: &ComplexImage, coils: &CoilSensitivities) -> Result<ComplexImage> {
    let maps = coils.maps();
    if x.coils() != 1 || x.height() != maps.height() || x.width() != maps.width() {
        return Err(DmsmError::ShapeMismatch(format!(
            "apply_coils: image {:?} vs maps {:?}",
            x.shape(),
            maps.shape()
        )));
    }
    let (n_coils, h, w) = maps.shape();
    let mut out = ComplexImage::zeros(n_coils, h, w);
    let src = x.coil(0);
    for c in 0..n_coils {
        let cmap = maps.coil(c);
        let dst = out.coil_mut(c);
        for i in 0..h * w {
            dst[i] = cmap[i] * src[i];
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_coils`]: `sum_c conj(C_c) * y_c`.
pub fn combine_coils(y: &ComplexImage, coils: &CoilSensitivities) -> Result<ComplexImage> {
    let maps = coils.maps();
    if y.shape() != maps.shape() {
        return Err(DmsmError::ShapeMismatch(format!(
            "combine_coils: data {:?} vs maps {:?}",
            y.shape(),
            maps.shape()
        )));
    }
    let (n_coils, h, w) = maps.shape();
    let mut out = ComplexImage::zeros(1, h, w);
    let dst = out.coil_mut(0);
    for c in 0..n_coils {
        let cmap = maps.coil(c);
        let src = y.coil(c);
        for i in 0..h * w {
            dst[i] += cmap[i].conj() * src[i];
        }
    }
    Ok(out)
}

/// Zero-filled reconstruction: inverse FFT of the (zero-padded) measurements
/// followed by the coil combine.
pub fn zero_fill_recon(y: &KSpaceData, coils: &CoilSensitivities) -> Result<ComplexImage> {
    let img = ifft2c(y.data())?;
    combine_coils(&img, coils)
}
