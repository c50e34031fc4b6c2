//! Synthetic ground truth: randomized Shepp-Logan ellipse composites with a
//! smooth random phase, plus analytic coil sensitivity profiles.

use crate::error::{DmsmError, Result};
use crate::kspace::{CoilSensitivities, ComplexImage};
use crate::rng::{stream, uniform_open, StreamKind};
use num_complex::Complex64;

/// (intensity, semi-axis a, semi-axis b, x0, y0, angle degrees)
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    cos_phi: f64,
    sin_phi: f64,
}

fn render(ellipses: &[Ellipse], h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    for e in ellipses {
        let (a2, b2) = (e.a * e.a, e.b * e.b);
        for iy in 0..h {
            // Normalized coordinates in [-1, 1]; y grows upward.
            let y = 1.0 - 2.0 * (iy as f64 + 0.5) / h as f64;
            for ix in 0..w {
                let x = 2.0 * (ix as f64 + 0.5) / w as f64 - 1.0;
                let (dx, dy) = (x - e.x0, y - e.y0);
                let u = dx * e.cos_phi + dy * e.sin_phi;
                let v = -dx * e.sin_phi + dy * e.cos_phi;
                if u * u / a2 + v * v / b2 <= 1.0 {
                    img[iy * w + ix] += e.intensity;
                }
            }
        }
    }
    img
}

/// Randomized ellipse-composite phantom with a smooth random phase.
/// Magnitudes land in [0, 1]; deterministic per seed.
pub fn make_phantom(h: usize, w: usize, seed: u64) -> Result<ComplexImage> {
    if h < 16 || w < 16 {
        return Err(DmsmError::InvalidArgument(format!(
            "phantom needs at least 16x16, got {h}x{w}"
        )));
    }
    let mut rng = stream(seed, StreamKind::Data, 0xE111);
    fn jitter(rng: &mut rand_chacha::ChaCha8Rng, scale: f64) -> f64 {
        (2.0 * uniform_open(rng) - 1.0) * scale
    }

    let mut ellipses: Vec<Ellipse> = Vec::new();
    for &(intensity, a, b, x0, y0, phi_deg) in &SHEPP_LOGAN {
        let phi = (phi_deg + jitter(&mut rng, 8.0)).to_radians();
        ellipses.push(Ellipse {
            intensity: intensity * (1.0 + jitter(&mut rng, 0.1)),
            a: a * (1.0 + jitter(&mut rng, 0.08)),
            b: b * (1.0 + jitter(&mut rng, 0.08)),
            x0: x0 + jitter(&mut rng, 0.04),
            y0: y0 + jitter(&mut rng, 0.04),
            cos_phi: phi.cos(),
            sin_phi: phi.sin(),
        });
    }
    // One or two extra small lesions for per-slice variety.
    let extra = 1 + (uniform_open(&mut rng) * 2.0) as usize;
    for _ in 0..extra {
        let phi = jitter(&mut rng, std::f64::consts::PI);
        ellipses.push(Ellipse {
            intensity: 0.08 + 0.12 * uniform_open(&mut rng),
            a: 0.03 + 0.09 * uniform_open(&mut rng),
            b: 0.03 + 0.09 * uniform_open(&mut rng),
            x0: jitter(&mut rng, 0.45),
            y0: jitter(&mut rng, 0.45),
            cos_phi: phi.cos(),
            sin_phi: phi.sin(),
        });
    }

    let mut mag = render(&ellipses, h, w);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    for v in mag.iter_mut() {
        *v = (*v).max(0.0);
        if max > 1.0 {
            *v /= max;
        }
    }

    // Smooth low-order polynomial phase.
    let coeff: Vec<f64> = (0..6).map(|_| jitter(&mut rng, 0.8)).collect();
    let mut data = vec![Complex64::ZERO; h * w];
    for iy in 0..h {
        let y = 1.0 - 2.0 * (iy as f64 + 0.5) / h as f64;
        for ix in 0..w {
            let x = 2.0 * (ix as f64 + 0.5) / w as f64 - 1.0;
            let phase = coeff[0]
                + coeff[1] * x
                + coeff[2] * y
                + coeff[3] * x * y
                + coeff[4] * x * x
                + coeff[5] * y * y;
            let m = mag[iy * w + ix];
            data[iy * w + ix] = Complex64::from_polar(m, phase);
        }
    }
    ComplexImage::single(h, w, data)
}

/// Smooth analytic coil profiles: Gaussian bumps arranged on a ring with a
/// gentle per-coil phase ramp, normalized so the sum of squared magnitudes
/// is one at every pixel. A single coil degenerates to the uniform unit map.
pub fn make_coil_maps(h: usize, w: usize, n_coils: usize) -> Result<CoilSensitivities> {
    if n_coils == 0 {
        return Err(DmsmError::InvalidArgument("need at least one coil".into()));
    }
    if n_coils == 1 {
        return Ok(CoilSensitivities::identity(h, w));
    }
    let mut maps = ComplexImage::zeros(n_coils, h, w);
    let width2 = 2.0 * 0.85f64.powi(2);
    for c in 0..n_coils {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let (cx, cy) = (0.62 * theta.cos(), 0.62 * theta.sin());
        let plane = maps.coil_mut(c);
        for iy in 0..h {
            let y = 1.0 - 2.0 * (iy as f64 + 0.5) / h as f64;
            for ix in 0..w {
                let x = 2.0 * (ix as f64 + 0.5) / w as f64 - 1.0;
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                let amp = (-d2 / width2).exp();
                let phase = theta + 0.4 * (theta.cos() * x + theta.sin() * y);
                plane[iy * w + ix] = Complex64::from_polar(amp, phase);
            }
        }
    }
    // Pixelwise normalization; the bump sum is strictly positive everywhere.
    let (n, _, _) = maps.shape();
    for i in 0..h * w {
        let s: f64 = (0..n).map(|c| maps.coil(c)[i].norm_sqr()).sum();
        let inv = 1.0 / s.sqrt();
        for c in 0..n {
            let v = maps.coil(c)[i] * inv;
            maps.coil_mut(c)[i] = v;
        }
    }
    Ok(CoilSensitivities::new(maps))
}
