//! Quantizers onto the lattice `{t * delta : t in Z}`.
//!
//! Lattice indices are computed from `y / delta` with a relative snap
//! guard: an argument within `1e-12` (relative) of an integer is taken to
//! be that integer before flooring, so values that are lattice points up
//! to representation error are never mis-binned.

use serde::{Deserialize, Serialize};

use crate::error::{ConsensusError, Result};
use crate::rng::Stream;

/// Relative snap-to-integer guard applied before every floor.
pub const SNAP_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Unbiased randomized rounding to one of the two neighbouring lattice points.
    Probabilistic,
    /// Nearest lattice point, half-open cells `[(t - 1/2) delta, (t + 1/2) delta)`.
    Rounding,
    /// Largest lattice point not above the input.
    RoundDown,
}

impl std::str::FromStr for Scheme {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilistic" | "prob" => Ok(Scheme::Probabilistic),
            "rounding" | "round" => Ok(Scheme::Rounding),
            "round_down" | "round-down" | "floor" => Ok(Scheme::RoundDown),
            other => Err(ConsensusError::param(format!("unknown quantizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub delta: f64,
    pub scheme: Scheme,
}

impl QuantizerSpec {
    pub fn new(delta: f64, scheme: Scheme) -> Result<Self> {
        check_delta(delta)?;
        Ok(QuantizerSpec { delta, scheme })
    }

    /// Quantizes one value. `stream` is only consumed by the probabilistic scheme.
    pub fn apply(&self, y: f64, stream: &mut Stream) -> Result<f64> {
        match self.scheme {
            Scheme::Probabilistic => q_prob(y, self.delta, stream),
            Scheme::Rounding => q_round(y, self.delta),
            Scheme::RoundDown => q_round_down(y, self.delta),
        }
    }

    /// Entrywise quantization.
    pub fn apply_vec(&self, y: &[f64], stream: &mut Stream) -> Result<Vec<f64>> {
        y.iter().map(|&v| self.apply(v, stream)).collect()
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(ConsensusError::param(format!(
            "quantization resolution must be positive, got {delta}"
        )))
    }
}

fn check_finite(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(ConsensusError::param(format!("cannot quantize non-finite value {y}")))
    }
}

/// `floor(v)`, except that `v` within `SNAP_REL` (relative) of an integer maps to that integer.
#[inline]
pub fn snapped_floor(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP_REL * r.abs().max(1.0) {
        r
    } else {
        v.floor()
    }
}

/// Lattice index `t` of the cell `[t delta, (t+1) delta)` containing `y`,
/// together with the fractional position `y / delta - t`.
#[inline]
fn cell(y: f64, delta: f64) -> (f64, f64) {
    let s = y / delta;
    let r = s.round();
    if (s - r).abs() <= SNAP_REL * r.abs().max(1.0) {
        (r, 0.0)
    } else {
        let t = s.floor();
        (t, s - t)
    }
}

/// Probabilistic quantizer: `(t+1) delta` with probability `y/delta - t`, else `t delta`.
pub fn q_prob(y: f64, delta: f64, stream: &mut Stream) -> Result<f64> {
    check_finite(y)?;
    check_delta(delta)?;
    Ok(q_prob_unchecked(y, delta, stream))
}

#[inline]
pub(crate) fn q_prob_unchecked(y: f64, delta: f64, stream: &mut Stream) -> f64 {
    let (t, frac) = cell(y, delta);
    // One draw per call, including lattice inputs, so stream positions do
    // not depend on the values being quantized.
    let u = stream.uniform();
    if u < frac {
        (t + 1.0) * delta
    } else {
        t * delta
    }
}

/// Rounding quantizer Q_d: `t delta` with `t = floor(y/delta + 1/2)`.
pub fn q_round(y: f64, delta: f64) -> Result<f64> {
    check_finite(y)?;
    check_delta(delta)?;
    Ok(round_index(y, delta) * delta)
}

/// Lattice index of `q_round(y, delta)`.
#[inline]
pub fn round_index(y: f64, delta: f64) -> f64 {
    snapped_floor(y / delta + 0.5)
}

/// Rounding-down quantizer: `floor(y/delta) delta`.
pub fn q_round_down(y: f64, delta: f64) -> Result<f64> {
    check_finite(y)?;
    check_delta(delta)?;
    Ok(snapped_floor(y / delta) * delta)
}
