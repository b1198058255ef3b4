//! Compression operators and their wire-cost model.
//!
//! Supported operators: identity, Top-K sparsification, unbiased stochastic
//! `r`-bit quantization (norm-scaled, QSGD style), and Top-K followed by
//! quantization of the survivors.
//!
//! Bit costs assume 32-bit floats for dense values and for the norm scalar,
//! `ceil(log2 d)` bits per transmitted index, and `1 + r` bits (sign plus grid
//! level) per quantized entry.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vector::{l2_norm, ParamVector};

pub const FLOAT_BITS: u64 = 32;
pub const MAX_QUANT_BITS: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Identity,
    Topk,
    Quant,
    TopkQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    /// Fraction of coordinates kept by Top-K.
    #[serde(default = "default_density")]
    pub density: f64,
    /// Quantization bit budget `r`.
    #[serde(default = "default_bits")]
    pub bits: u32,
}

fn default_density() -> f64 {
    1.0
}

fn default_bits() -> u32 {
    8
}

impl Default for CompressorSpec {
    fn default() -> Self {
        CompressorSpec::identity()
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CompressorKind::Identity => write!(f, "identity"),
            CompressorKind::Topk => write!(f, "topk({}%)", self.density * 100.0),
            CompressorKind::Quant => write!(f, "quant({} bits)", self.bits),
            CompressorKind::TopkQuant => {
                write!(f, "topk({}%)+quant({} bits)", self.density * 100.0, self.bits)
            }
        }
    }
}

impl CompressorSpec {
    pub fn identity() -> Self {
        CompressorSpec {
            kind: CompressorKind::Identity,
            density: 1.0,
            bits: default_bits(),
        }
    }

    pub fn topk(density: f64) -> Self {
        CompressorSpec {
            kind: CompressorKind::Topk,
            density,
            bits: default_bits(),
        }
    }

    pub fn quant(bits: u32) -> Self {
        CompressorSpec {
            kind: CompressorKind::Quant,
            density: 1.0,
            bits,
        }
    }

    pub fn topk_quant(density: f64, bits: u32) -> Self {
        CompressorSpec {
            kind: CompressorKind::TopkQuant,
            density,
            bits,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == CompressorKind::Identity
    }

    /// Range violations, as `(field, message)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.density > 0.0 && self.density <= 1.0) {
            out.push(("density", format!("must lie in (0, 1], got {}", self.density)));
        }
        if self.bits < 1 || self.bits > MAX_QUANT_BITS {
            out.push((
                "bits",
                format!("must lie in [1, {MAX_QUANT_BITS}], got {}", self.bits),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::Parameter(format!("compressor.{field} {msg}"))),
        }
    }

    /// `max(1, round(density * d))`, capped at `d`.
    pub fn effective_k(&self, d: usize) -> usize {
        ((self.density * d as f64).round() as usize).clamp(1, d.max(1))
    }

    /// Applies the operator. Randomized kinds draw from `rng`.
    pub fn apply(&self, x: &ParamVector, rng: &mut RngStream) -> Result<ParamVector> {
        self.validate()?;
        let d = x.len();
        match self.kind {
            CompressorKind::Identity => Ok(x.clone()),
            CompressorKind::Topk => top_k(x, self.effective_k(d)),
            CompressorKind::Quant => quantize(x, self.bits, rng),
            CompressorKind::TopkQuant => compose_topk_quant(x, self.effective_k(d), self.bits, rng),
        }
    }

    /// Wire cost in bits of one compressed `d`-vector.
    pub fn bit_cost(&self, d: usize) -> u64 {
        bit_cost(self, d)
    }
}

/// `ceil(log2 d)`, with `ceil(log2 1) = 0`.
pub fn index_bits(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        u64::from(usize::BITS - (d - 1).leading_zeros())
    }
}

pub fn bit_cost(spec: &CompressorSpec, d: usize) -> u64 {
    let d64 = d as u64;
    let k = spec.effective_k(d) as u64;
    let r = u64::from(spec.bits);
    match spec.kind {
        CompressorKind::Identity => FLOAT_BITS * d64,
        CompressorKind::Topk => k * (FLOAT_BITS + index_bits(d)),
        CompressorKind::Quant => FLOAT_BITS + d64 * (1 + r),
        CompressorKind::TopkQuant => FLOAT_BITS + k * (1 + r + index_bits(d)),
    }
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
pub fn top_k(x: &ParamVector, k: usize) -> Result<ParamVector> {
    let d = x.len();
    if k < 1 || k > d {
        return Err(Error::Parameter(format!("top_k needs 1 <= K <= {d}, got {k}")));
    }
    if k == d {
        return Ok(x.clone());
    }
    let values = x.as_slice();
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps ascending index order among equal magnitudes
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    let mut out = ParamVector::zeros(d);
    for &i in &order[..k] {
        out[i] = values[i];
    }
    Ok(out)
}

/// Unbiased stochastic quantization onto `2^r` norm-scaled levels.
///
/// One uniform is drawn per component, in index order. The zero vector maps to
/// itself without consuming randomness.
pub fn quantize(x: &ParamVector, r: u32, rng: &mut RngStream) -> Result<ParamVector> {
    if r < 1 || r > MAX_QUANT_BITS {
        return Err(Error::Parameter(format!(
            "quantization bits must lie in [1, {MAX_QUANT_BITS}], got {r}"
        )));
    }
    let norm = l2_norm(x);
    if norm == 0.0 {
        return Ok(ParamVector::zeros(x.len()));
    }
    let levels = f64::from(1u32 << r);
    let out = x
        .iter()
        .map(|&xi| {
            let y = (xi.abs() / norm).min(1.0);
            let scaled = levels * y;
            let lower = scaled.floor();
            let frac = scaled - lower;
            let u = rng.uniform();
            let level = if u < frac { lower + 1.0 } else { lower };
            norm * xi.signum() * (level / levels)
        })
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect::<Vec<f64>>();
    Ok(ParamVector::from(out))
}

/// Top-K, then quantization of the survivors.
pub fn compose_topk_quant(
    x: &ParamVector,
    k: usize,
    r: u32,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    let sparse = top_k(x, k)?;
    quantize(&sparse, r, rng)
}
