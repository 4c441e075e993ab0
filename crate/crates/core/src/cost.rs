//! Analytic training FLOPs per token: a fixed backbone term plus a
//! vocabulary-dependent decoding term.
//!
//! Conventions:
//! - backbone: `48·L·d² + 8·L·S·d` (dense blocks, forward plus backward, and
//!   the attention score/value products);
//! - decoding: 12 FLOPs per decoding parameter per token, where the decoding
//!   parameters are the item rows that get scored plus the projection, if any.
//!
//! These are output-layer estimates, not runtime measurements.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::negative_count;
use crate::error::{config_err, Error, Result};

pub const FLOPS_PER_DECODE_PARAM: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "sampled")]
    Sampled,
    #[serde(rename = "projected")]
    Projected,
    #[serde(rename = "sampled+projected")]
    SampledProjected,
}

impl CostMode {
    pub const ALL: [CostMode; 4] =
        [CostMode::Full, CostMode::Sampled, CostMode::Projected, CostMode::SampledProjected];

    pub fn name(self) -> &'static str {
        match self {
            CostMode::Full => "full",
            CostMode::Sampled => "sampled",
            CostMode::Projected => "projected",
            CostMode::SampledProjected => "sampled+projected",
        }
    }

    fn sampled(self) -> bool {
        matches!(self, CostMode::Sampled | CostMode::SampledProjected)
    }

    fn projected(self) -> bool {
        matches!(self, CostMode::Projected | CostMode::SampledProjected)
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CostMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .map_or_else(|| config_err(format!("unknown cost mode '{s}'")), Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostQuery {
    pub layers: usize,
    pub d: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub mode: CostMode,
    pub sample_fraction: f64,
    pub n_positives: usize,
}

impl CostQuery {
    /// The production-scale setting: 6 layers, width 1024, 512 tokens,
    /// 1% sampling, one positive.
    pub fn reference(vocab: usize, mode: CostMode) -> Self {
        Self { layers: 6, d: 1024, seq_len: 512, vocab, mode, sample_fraction: 0.01, n_positives: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.seq_len == 0 || self.vocab == 0 {
            return config_err("layers, d, seq_len and vocab must be positive");
        }
        if self.mode.projected() && !self.d.is_multiple_of(8) {
            return config_err(format!("projected decoding needs d divisible by 8, got {}", self.d));
        }
        if self.mode.sampled() {
            negative_count(self.vocab, self.sample_fraction)?;
        }
        Ok(())
    }

    /// Parameters touched by decoding one token.
    pub fn decode_params(&self) -> Result<f64> {
        self.validate()?;
        let d = self.d as f64;
        let scored = if self.mode.sampled() {
            (negative_count(self.vocab, self.sample_fraction)? + self.n_positives) as f64
        } else {
            self.vocab as f64
        };
        Ok(if self.mode.projected() {
            let k = d / 8.0;
            d * k + k * scored
        } else {
            d * scored
        })
    }
}

pub fn backbone_flops_per_token(layers: usize, d: usize, seq_len: usize) -> f64 {
    let (l, d, s) = (layers as f64, d as f64, seq_len as f64);
    48.0 * l * d * d + 8.0 * l * s * d
}

pub fn decode_flops_per_token(q: &CostQuery) -> Result<f64> {
    Ok(FLOPS_PER_DECODE_PARAM * q.decode_params()?)
}

pub fn total_flops_per_token(q: &CostQuery) -> Result<f64> {
    Ok(backbone_flops_per_token(q.layers, q.d, q.seq_len) + decode_flops_per_token(q)?)
}

pub const SWEEP_CSV_HEADER: &str = "V,mode,flops_per_token";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vocab: usize,
    pub mode: CostMode,
    pub flops_per_token: f64,
}

/// One row per `(V, mode)`, vocabulary-major.
pub fn sweep(base: &CostQuery, vocabs: &[usize], modes: &[CostMode]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(vocabs.len() * modes.len());
    for &vocab in vocabs {
        for &mode in modes {
            let q = CostQuery { vocab, mode, ..*base };
            rows.push(SweepRow { vocab, mode, flops_per_token: total_flops_per_token(&q)? });
        }
    }
    Ok(rows)
}

pub fn emit_sweep<W: Write>(mut w: W, base: &CostQuery, vocabs: &[usize], modes: &[CostMode]) -> Result<()> {
    let rows = sweep(base, vocabs, modes)?;
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.vocab, r.mode, r.flops_per_token)?;
    }
    Ok(())
}

/// Ratio of full-decoding to sampled+projected total cost.
pub fn reduction_ratio(base: &CostQuery) -> Result<f64> {
    let full = total_flops_per_token(&CostQuery { mode: CostMode::Full, ..*base })?;
    let cheap = total_flops_per_token(&CostQuery { mode: CostMode::SampledProjected, ..*base })?;
    Ok(full / cheap)
}
