use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

/// Flat replicated model state in single precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterVector(Vec<f32>);

impl ParameterVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`, compares NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Little-endian IEEE-754 serialization, the layout used for weight transfer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() * 4);
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn digest(&self, iteration: u64) -> Digest32 {
        checksum(iteration, &self.0)
    }
}

impl Deref for ParameterVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

impl From<Vec<f32>> for ParameterVector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

pub type Digest32 = [u8; 32];

/// SHA-256 over `iteration` (u64 big-endian) followed by `theta` as
/// little-endian `f32`s.
pub fn checksum(iteration: u64, theta: &[f32]) -> Digest32 {
    let mut hasher = Sha256::new();
    hasher.update(iteration.to_be_bytes());
    let mut buf = [0u8; 4096];
    for chunk in theta.chunks(buf.len() / 4) {
        for (dst, v) in buf.chunks_exact_mut(4).zip(chunk) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
        hasher.update(&buf[..chunk.len() * 4]);
    }
    hasher.finalize().into()
}

pub fn digest_hex(d: &Digest32) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}
