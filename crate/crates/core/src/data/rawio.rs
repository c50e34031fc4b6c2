//! Raw array files with JSON sidecars.
//!
//! Arrays are little-endian `complex64` (f32 real/imaginary pairs) or `uint8`
//! grids, row-major, each accompanied by a `<file>.meta.json` sidecar that
//! declares shape, dtype, byte order and format version. The format is
//! deliberately dependency-free and bit-exact so any language can parse it.

use crate::error::{DmsmError, Result};
use crate::kspace::{AcsRegion, ComplexImage, SamplingMask};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const META_FORMAT_VERSION: u32 = 1;

/// Sidecar metadata for one raw array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayMeta {
    pub format_version: u32,
    pub shape: Vec<usize>,
    /// `complex64` (little-endian f32 pairs) or `uint8`.
    pub dtype: String,
    pub byte_order: String,
    /// Present on sampling-mask files only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acs_region: Option<AcsRegion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_acceleration: Option<f64>,
}

impl ArrayMeta {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let meta: ArrayMeta = serde_json::from_slice(bytes)?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != META_FORMAT_VERSION {
            return Err(DmsmError::Dataset(format!(
                "unsupported sidecar format version {}",
                self.format_version
            )));
        }
        if self.byte_order != "little" {
            return Err(DmsmError::Dataset(format!(
                "unsupported byte order {:?}",
                self.byte_order
            )));
        }
        if self.dtype != "complex64" && self.dtype != "uint8" && self.dtype != "float32" {
            return Err(DmsmError::Dataset(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.shape.is_empty() || self.shape.len() > 3 {
            return Err(DmsmError::Dataset(format!(
                "shape must have 1..=3 dims, got {:?}",
                self.shape
            )));
        }
        // Reject absurd sizes before any allocation.
        let mut numel: u64 = 1;
        for &d in &self.shape {
            if d == 0 {
                return Err(DmsmError::Dataset("zero-sized dimension".into()));
            }
            numel = numel
                .checked_mul(d as u64)
                .ok_or_else(|| DmsmError::Dataset("shape overflow".into()))?;
        }
        if numel > 1 << 28 {
            return Err(DmsmError::Dataset(format!("array too large: {numel} elements")));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Decode a `complex64` payload against its sidecar.
pub fn decode_complex_payload(meta: &ArrayMeta, payload: &[u8]) -> Result<ComplexImage> {
    meta.validate()?;
    if meta.dtype != "complex64" {
        return Err(DmsmError::Dataset(format!(
            "expected complex64 payload, sidecar says {:?}",
            meta.dtype
        )));
    }
    let numel = meta.numel();
    if payload.len() != numel * 8 {
        return Err(DmsmError::Dataset(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            meta.shape,
            numel * 8
        )));
    }
    let (coils, h, w) = match meta.shape.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(DmsmError::Dataset("complex arrays must be 2D or 3D".into())),
    };
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
        data.push(Complex64::new(re, im));
    }
    ComplexImage::new(coils, h, w, data)
}

/// Decode a `uint8` sampling-mask payload against its sidecar.
pub fn decode_mask_payload(meta: &ArrayMeta, payload: &[u8]) -> Result<SamplingMask> {
    meta.validate()?;
    if meta.dtype != "uint8" {
        return Err(DmsmError::Dataset(format!(
            "expected uint8 payload, sidecar says {:?}",
            meta.dtype
        )));
    }
    let [h, w] = match meta.shape.as_slice() {
        [h, w] => [*h, *w],
        _ => return Err(DmsmError::Dataset("masks must be 2D".into())),
    };
    if payload.len() != h * w {
        return Err(DmsmError::Dataset(format!(
            "mask payload holds {} bytes, shape needs {}",
            payload.len(),
            h * w
        )));
    }
    let acs = meta
        .acs_region
        .ok_or_else(|| DmsmError::Dataset("mask sidecar missing acs_region".into()))?;
    if acs.row0 > acs.row1 || acs.col0 > acs.col1 || acs.row1 > h || acs.col1 > w {
        return Err(DmsmError::Dataset(format!("acs region {acs:?} outside {h}x{w} grid")));
    }
    let r = meta
        .nominal_acceleration
        .ok_or_else(|| DmsmError::Dataset("mask sidecar missing nominal_acceleration".into()))?;
    if !(r.is_finite() && r >= 1.0) {
        return Err(DmsmError::Dataset(format!("bad nominal acceleration {r}")));
    }
    SamplingMask::new(h, w, payload.to_vec(), acs, r)
}

pub fn write_complex_raw(path: &Path, img: &ComplexImage) -> Result<()> {
    let (coils, h, w) = img.shape();
    let shape = if coils == 1 { vec![h, w] } else { vec![coils, h, w] };
    let meta = ArrayMeta {
        format_version: META_FORMAT_VERSION,
        shape,
        dtype: "complex64".into(),
        byte_order: "little".into(),
        acs_region: None,
        nominal_acceleration: None,
    };
    let mut payload = Vec::with_capacity(img.as_slice().len() * 8);
    for z in img.as_slice() {
        payload.extend_from_slice(&(z.re as f32).to_le_bytes());
        payload.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    std::fs::write(path, payload)?;
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_complex_raw(path: &Path) -> Result<ComplexImage> {
    let meta = ArrayMeta::from_json_bytes(&std::fs::read(meta_path(path))?)?;
    decode_complex_payload(&meta, &std::fs::read(path)?)
}

/// Decode a `float32` payload (real-valued maps) against its sidecar.
pub fn decode_float_payload(meta: &ArrayMeta, payload: &[u8]) -> Result<Vec<f64>> {
    meta.validate()?;
    if meta.dtype != "float32" {
        return Err(DmsmError::Dataset(format!(
            "expected float32 payload, sidecar says {:?}",
            meta.dtype
        )));
    }
    let numel = meta.numel();
    if payload.len() != numel * 4 {
        return Err(DmsmError::Dataset(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            meta.shape,
            numel * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn write_float_raw(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), values.len());
    let meta = ArrayMeta {
        format_version: META_FORMAT_VERSION,
        shape: shape.to_vec(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        acs_region: None,
        nominal_acceleration: None,
    };
    let mut payload = Vec::with_capacity(values.len() * 4);
    for v in values {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, payload)?;
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_float_raw(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let meta = ArrayMeta::from_json_bytes(&std::fs::read(meta_path(path))?)?;
    Ok((decode_float_payload(&meta, &std::fs::read(path)?)?, meta.shape))
}

pub fn write_mask_raw(path: &Path, mask: &SamplingMask) -> Result<()> {
    let meta = ArrayMeta {
        format_version: META_FORMAT_VERSION,
        shape: vec![mask.height(), mask.width()],
        dtype: "uint8".into(),
        byte_order: "little".into(),
        acs_region: Some(mask.acs_region()),
        nominal_acceleration: Some(mask.nominal_acceleration()),
    };
    std::fs::write(path, mask.grid())?;
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_mask_raw(path: &Path) -> Result<SamplingMask> {
    let meta = ArrayMeta::from_json_bytes(&std::fs::read(meta_path(path))?)?;
    decode_mask_payload(&meta, &std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::generate_vd_mask;

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("dmsm-rawio-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn complex_round_trip_bitwise() {
        let dir = tmpdir("complex");
        let path = dir.join("x.img.raw");
        // Values representable in f32 so the round trip is bitwise.
        let data: Vec<Complex64> = (0..64)
            .map(|i| Complex64::new((i as f32 * 0.25) as f64, (-(i as f32) * 0.5) as f64))
            .collect();
        let img = ComplexImage::single(8, 8, data).unwrap();
        write_complex_raw(&path, &img).unwrap();
        let back = read_complex_raw(&path).unwrap();
        assert_eq!(back, img);
        // Re-writing produces identical bytes.
        let bytes_a = std::fs::read(&path).unwrap();
        write_complex_raw(&path, &back).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mask_round_trip() {
        let dir = tmpdir("mask");
        let path = dir.join("m.mask.raw");
        let mask = generate_vd_mask(16, 16, 2.0, 2, 9).unwrap();
        write_mask_raw(&path, &mask).unwrap();
        let back = read_mask_raw(&path).unwrap();
        assert_eq!(back, mask);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_sidecars_rejected() {
        let good = ArrayMeta {
            format_version: 1,
            shape: vec![8, 8],
            dtype: "complex64".into(),
            byte_order: "little".into(),
            acs_region: None,
            nominal_acceleration: None,
        };
        let mut bad = good.clone();
        bad.byte_order = "big".into();
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.dtype = "float128".into();
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.shape = vec![0, 4];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.shape = vec![1 << 20, 1 << 20];
        assert!(bad.validate().is_err());
        // Unknown sidecar keys are rejected.
        assert!(ArrayMeta::from_json_bytes(
            br#"{"format_version":1,"shape":[8,8],"dtype":"uint8","byte_order":"little","extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn payload_length_mismatch_rejected() {
        let meta = ArrayMeta {
            format_version: 1,
            shape: vec![8, 8],
            dtype: "complex64".into(),
            byte_order: "little".into(),
            acs_region: None,
            nominal_acceleration: None,
        };
        assert!(decode_complex_payload(&meta, &[0u8; 100]).is_err());
        assert!(decode_complex_payload(&meta, &[0u8; 64 * 8]).is_ok());
    }
}
