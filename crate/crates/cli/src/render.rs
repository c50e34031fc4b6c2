//! Grayscale PNG emission with an explicit intensity scale recorded in a
//! JSON sidecar, so error and uncertainty maps can share one legend.

use anyhow::{Context, Result};
use std::path::Path;

/// Write `values` (row-major h x w) as an 8-bit grayscale PNG mapping
/// `[lo, hi]` to `[0, 255]`, and record the scale in `<file>.meta.json`.
pub fn write_png_scaled(
    path: &Path,
    h: usize,
    w: usize,
    values: &[f64],
    lo: f64,
    hi: f64,
) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();

    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;

    let sidecar = serde_json::json!({ "min": lo, "max": hi });
    let mut meta = path.file_name().unwrap_or_default().to_os_string();
    meta.push(".meta.json");
    std::fs::write(path.with_file_name(meta), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}
