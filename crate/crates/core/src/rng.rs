//! Portable seeded noise.
//!
//! Every peer must regenerate the exact perturbation another peer used, so the
//! generator is pinned at the algorithm level instead of borrowing a framework
//! RNG: SplitMix64 for both seed mixing and the uniform stream, Box–Muller for
//! normals, and the pure-Rust `libm` port for `log`/`sin`/`cos` so the result
//! does not depend on the host C library.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Weyl increment of the SplitMix64 stream.
pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Odd multipliers applied to the seed triple before the finalizer.
pub const SEED_MUL_TIME: u64 = 0x9E37_79B9_7F4A_7C15;
pub const SEED_MUL_ITERATION: u64 = 0xC2B2_AE3D_27D4_EB4F;
pub const SEED_MUL_SAMPLE: u64 = 0x1656_67B1_9E37_79F9;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// The SplitMix64 output finalizer (a bijection on `u64`).
#[inline]
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes three words into one 64-bit seed.
#[inline]
pub fn mix_triple(a: u64, b: u64, c: u64) -> u64 {
    splitmix64_mix(
        a.wrapping_mul(SEED_MUL_TIME)
            ^ b.wrapping_mul(SEED_MUL_ITERATION)
            ^ c.wrapping_mul(SEED_MUL_SAMPLE),
    )
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        splitmix64_mix(self.state)
    }

    /// Uniform in `(0, 1)`: top 53 bits scaled by 2^-53, with zero lifted to 2^-53.
    #[inline]
    pub fn next_open_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        if u == 0.0 {
            TWO_POW_NEG_53
        } else {
            u
        }
    }
}

/// Identifies one perturbation: which machine drew it, in which iteration,
/// and at which position of that machine's gradient list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PerturbationSeed {
    pub machine_time: u64,
    pub iteration: u64,
    pub sample_index: u64,
    pub mixed: u64,
}

/// Builds the seed for `(machine_time, iteration, sample_index)`.
pub fn derive_seed(machine_time: u64, iteration: u64, sample_index: u64) -> PerturbationSeed {
    PerturbationSeed {
        machine_time,
        iteration,
        sample_index,
        mixed: mix_triple(machine_time, iteration, sample_index),
    }
}

impl PerturbationSeed {
    pub fn stream(&self) -> GaussianStream {
        GaussianStream::new(self.mixed)
    }
}

/// Standard normal variates from a SplitMix64 stream via Box–Muller.
///
/// Each pair of uniforms yields two normals; the cosine branch is emitted
/// first and the sine branch is held for the next call.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    seed: u64,
    uniform: SplitMix64,
    spare: Option<f64>,
    position: u64,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            uniform: SplitMix64::new(seed),
            spare: None,
            position: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of normals emitted so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.position += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform.next_open_unit();
        let u2 = self.uniform.next_open_unit();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Discards the next `n` normals.
    pub fn discard(&mut self, n: u64) {
        for _ in 0..n {
            self.next_normal();
        }
    }

    /// The next normal rounded to single precision, as used on parameters.
    #[inline]
    pub fn next_normal_f32(&mut self) -> f32 {
        self.next_normal() as f32
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("parameter {index} is not finite ({value})")]
    NonFiniteParameter { index: usize, value: f32 },
    #[error("perturbation scale {0} is not finite")]
    NonFiniteScale(f32),
}

/// `theta[i] += epsilon * z[i]` in one pass, with `z` drawn from `seed`'s stream.
///
/// Arithmetic is single precision with round-to-nearest-even: `z` is rounded
/// to `f32`, multiplied by `epsilon`, then added. On a non-finite entry the
/// pass stops and `theta` is left partially updated; callers restore from
/// their snapshot.
pub fn perturb_parameters(
    theta: &mut [f32],
    epsilon: f32,
    seed: &PerturbationSeed,
) -> Result<(), PerturbError> {
    perturb_parameters_at(theta, 0, epsilon, seed)
}

/// [`perturb_parameters`] restricted to the slice of the full vector that
/// starts at element `offset`. Produces the same bits as perturbing the full
/// vector and taking the slice.
pub fn perturb_parameters_at(
    theta: &mut [f32],
    offset: usize,
    epsilon: f32,
    seed: &PerturbationSeed,
) -> Result<(), PerturbError> {
    if !epsilon.is_finite() {
        return Err(PerturbError::NonFiniteScale(epsilon));
    }
    let mut stream = seed.stream();
    stream.discard(offset as u64);
    for (i, value) in theta.iter_mut().enumerate() {
        let index = offset + i;
        let z = stream.next_normal_f32();
        if !value.is_finite() {
            return Err(PerturbError::NonFiniteParameter {
                index,
                value: *value,
            });
        }
        *value += epsilon * z;
    }
    Ok(())
}

/// One line of the conformance file: the `index`-th normal of the stream
/// seeded with `seed` has IEEE-754 bit pattern `bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoldenEntry {
    pub seed: u64,
    pub index: u64,
    pub bits: u64,
}

impl fmt::Display for GoldenEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x} {} {:#018x}", self.seed, self.index, self.bits)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("golden line {line}: {reason}")]
pub struct GoldenParseError {
    pub line: usize,
    pub reason: String,
}

impl FromStr for GoldenEntry {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let mut field = |name: &str| parts.next().ok_or_else(|| format!("missing {name}"));
        let seed = parse_hex(field("seed")?)?;
        let index = field("index")?
            .parse::<u64>()
            .map_err(|e| format!("bad index: {e}"))?;
        let bits = parse_hex(field("bits")?)?;
        if parts.next().is_some() {
            return Err("trailing fields".into());
        }
        Ok(Self { seed, index, bits })
    }
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex {s:?}: {e}"))
}

/// Parses a conformance file; `#` starts a comment line.
pub fn parse_golden(text: &str) -> Result<Vec<GoldenEntry>, GoldenParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| {
            l.parse().map_err(|reason| GoldenParseError {
                line: i + 1,
                reason,
            })
        })
        .collect()
}

/// Seeds used for the published conformance vectors: `derive_seed(m, i, k)`
/// for a small grid of triples, then `draws` normals from each.
pub fn golden_entries(draws: u64) -> Vec<GoldenEntry> {
    const TRIPLES: [(u64, u64, u64); 10] = [
        (0, 0, 0),
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 2, 3),
        (7, 11, 13),
        (1_700_000_000_000_000, 0, 0),
        (1_700_000_000_000_000, 41, 15),
        (u32::MAX as u64, 1 << 20, 63),
        (u64::MAX, u64::MAX, u64::MAX),
    ];
    let mut out = Vec::with_capacity(TRIPLES.len() * draws as usize);
    for (m, i, k) in TRIPLES {
        let seed = derive_seed(m, i, k).mixed;
        let mut stream = GaussianStream::new(seed);
        for index in 0..draws {
            out.push(GoldenEntry {
                seed,
                index,
                bits: stream.next_normal().to_bits(),
            });
        }
    }
    out
}

/// Entries whose recomputed bit pattern differs from the recorded one.
pub fn check_golden(entries: &[GoldenEntry]) -> Vec<(GoldenEntry, u64)> {
    let mut mismatches = Vec::new();
    for entry in entries {
        let mut stream = GaussianStream::new(entry.seed);
        let mut value = 0.0;
        for _ in 0..=entry.index {
            value = stream.next_normal();
        }
        if value.to_bits() != entry.bits {
            mismatches.push((*entry, value.to_bits()));
        }
    }
    mismatches
}

pub fn render_golden(entries: &[GoldenEntry]) -> String {
    let mut out = String::from(
        "# seeded normal conformance vectors\n# mixed-seed draw-index f64-bit-pattern\n",
    );
    for e in entries {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}
