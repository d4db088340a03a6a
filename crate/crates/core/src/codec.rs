//! One-byte log-magnitude companding of projected gradients.
//!
//! A gradient `g` maps to `sign(g) · round(127 · ln(|g|/g_min) / ln(g_max/g_min))`,
//! clipped to `[-127, 127]`; magnitudes at or below `g_min` map to zero. The
//! byte `0x80` (−128) is never produced and is rejected on decode.

use thiserror::Error;

pub const MAX_CODE: i8 = 127;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("gradient {0} is not finite")]
    NonFinite(f64),
    #[error("invalid companding range [{g_min}, {g_max}]")]
    InvalidRange { g_min: f64, g_max: f64 },
    #[error("gradient code {0} is outside [-127, 127]")]
    CodeOutOfRange(i16),
}

/// Dynamic range of the log companding. Shared by every peer through the run
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompandRange {
    g_min: f64,
    g_max: f64,
    ln_min: f64,
    ln_span: f64,
}

impl CompandRange {
    pub const DEFAULT_G_MIN: f64 = 1e-8;
    pub const DEFAULT_G_MAX: f64 = 1e3;

    pub fn new(g_min: f64, g_max: f64) -> Result<Self, CodecError> {
        if !(g_min.is_finite() && g_max.is_finite() && g_min > 0.0 && g_min < g_max) {
            return Err(CodecError::InvalidRange { g_min, g_max });
        }
        Ok(Self {
            g_min,
            g_max,
            ln_min: g_min.ln(),
            ln_span: g_max.ln() - g_min.ln(),
        })
    }

    pub fn g_min(&self) -> f64 {
        self.g_min
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    /// Log-domain width of one code step.
    pub fn step(&self) -> f64 {
        self.ln_span / MAX_CODE as f64
    }

    /// Worst-case relative error of a round trip for `|g|` in
    /// `[g_min·e^{step/2}, g_max]`.
    pub fn max_relative_error(&self) -> f64 {
        (self.step() / 2.0).exp() - 1.0
    }
}

impl Default for CompandRange {
    fn default() -> Self {
        Self::new(Self::DEFAULT_G_MIN, Self::DEFAULT_G_MAX).expect("default range is valid")
    }
}

/// A single signed byte in `[-127, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GradByte(i8);

impl GradByte {
    pub const ZERO: GradByte = GradByte(0);

    pub fn new(code: i16) -> Result<Self, CodecError> {
        if (-(MAX_CODE as i16)..=MAX_CODE as i16).contains(&code) {
            Ok(Self(code as i8))
        } else {
            Err(CodecError::CodeOutOfRange(code))
        }
    }

    pub fn code(self) -> i8 {
        self.0
    }

    pub fn to_wire(self) -> u8 {
        self.0 as u8
    }

    pub fn from_wire(byte: u8) -> Result<Self, CodecError> {
        Self::new(byte as i8 as i16)
    }
}

pub fn encode(g: f64, range: &CompandRange) -> Result<GradByte, CodecError> {
    if !g.is_finite() {
        return Err(CodecError::NonFinite(g));
    }
    let mag = g.abs();
    if mag <= range.g_min {
        return Ok(GradByte::ZERO);
    }
    let level = ((mag.ln() - range.ln_min) / range.ln_span * MAX_CODE as f64).round();
    let level = level.min(MAX_CODE as f64) as i8;
    Ok(GradByte(if g < 0.0 { -level } else { level }))
}

pub fn decode(code: GradByte, range: &CompandRange) -> f64 {
    let c = code.0;
    if c == 0 {
        return 0.0;
    }
    let mag = (range.ln_min + (c.unsigned_abs() as f64 / MAX_CODE as f64) * range.ln_span).exp();
    if c < 0 {
        -mag
    } else {
        mag
    }
}

/// The value every replica applies for a locally computed gradient:
/// the `f32` rounding of `g` in float mode, or of its decoded byte.
pub fn wire_value(g: f64, quantized: Option<&CompandRange>) -> Result<f32, CodecError> {
    match quantized {
        Some(range) => Ok(decode(encode(g, range)?, range) as f32),
        None if g.is_finite() => Ok(g as f32),
        None => Err(CodecError::NonFinite(g)),
    }
}
