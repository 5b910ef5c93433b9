//! Min-max affine u8 quantization.
//!
//! `q = round((x - min) / scale)` clamped to `[0, 255]`, `scale = (max - min) / 255`
//! (or 1 for a constant chunk), and `x' = min + q * scale`. Arithmetic is done
//! in f64 and rounded once, so every peer reconstructs the same f32 values.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("value range {min}..{max} is too wide to quantize")]
    RangeOverflow { min: f32, max: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub min: f32,
    pub scale: f32,
}

impl QuantParams {
    #[inline]
    pub fn dequantize_one(&self, q: u8) -> f32 {
        (self.min as f64 + q as f64 * self.scale as f64) as f32
    }
}

pub fn check_finite(values: &[f32]) -> Result<(), QuantError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QuantError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub fn params_for(values: &[f32]) -> Result<QuantParams, QuantError> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite { index, value: v });
        }
        min = min.min(v);
        max = max.max(v);
    }
    if values.is_empty() {
        return Ok(QuantParams { min: 0.0, scale: 1.0 });
    }
    if max == min {
        return Ok(QuantParams { min, scale: 1.0 });
    }
    let scale = ((max as f64 - min as f64) / 255.0) as f32;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(QuantError::RangeOverflow { min, max });
    }
    Ok(QuantParams { min, scale })
}

/// Quantizes `values` into `out` (same length).
pub fn quantize(values: &[f32], out: &mut [u8]) -> Result<QuantParams, QuantError> {
    assert_eq!(values.len(), out.len());
    let p = params_for(values)?;
    let (min, scale) = (p.min as f64, p.scale as f64);
    for (o, &v) in out.iter_mut().zip(values) {
        *o = ((v as f64 - min) / scale).round().clamp(0.0, 255.0) as u8;
    }
    Ok(p)
}

pub fn dequantize(p: QuantParams, q: &[u8], out: &mut [f32]) {
    assert_eq!(q.len(), out.len());
    for (o, &b) in out.iter_mut().zip(q) {
        *o = p.dequantize_one(b);
    }
}

/// Replaces `values` with `D(Q(values))`, using `scratch` for the bytes.
pub fn round_trip_in_place(values: &mut [f32], scratch: &mut [u8]) -> Result<QuantParams, QuantError> {
    let p = quantize(values, scratch)?;
    dequantize(p, scratch, values);
    Ok(p)
}
