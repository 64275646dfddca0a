//! Rotary position embedding on interleaved channel pairs.
//!
//! Channel pair `(2i, 2i + 1)` at position `p` is rotated by `p · ω_i` with
//! `ω_i = θ^(−2i / rotary_dim)`. Channels at or beyond `rotary_dim` pass through.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndcore::flops::{self, Category};
use crate::ndcore::{NdArray, Real};

pub const DEFAULT_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub theta_base: f64,
    pub rotary_dim: usize,
}

impl RopeParams {
    pub fn new(rotary_dim: usize) -> Self {
        Self { theta_base: DEFAULT_THETA, rotary_dim }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if !self.rotary_dim.is_multiple_of(2) {
            return Err(Error::OddRotaryDim(self.rotary_dim));
        }
        if self.rotary_dim > head_dim {
            return Err(Error::InvalidSpec(format!(
                "rotary_dim {} exceeds head dim {head_dim}",
                self.rotary_dim
            )));
        }
        Ok(())
    }

    pub fn frequency(&self, pair: usize) -> f64 {
        self.theta_base.powf(-2.0 * pair as f64 / self.rotary_dim as f64)
    }
}

/// Rotate `x: [S, B, H, D]`, row `s` at `positions[s]`.
pub fn rope_apply<F: Real>(x: &NdArray<F>, positions: &[usize], p: &RopeParams) -> Result<NdArray<F>> {
    rotate(x, positions, p, false)
}

/// Inverse rotation (the transpose of [`rope_apply`]).
pub fn rope_apply_inverse<F: Real>(x: &NdArray<F>, positions: &[usize], p: &RopeParams) -> Result<NdArray<F>> {
    rotate(x, positions, p, true)
}

fn rotate<F: Real>(x: &NdArray<F>, positions: &[usize], p: &RopeParams, inverse: bool) -> Result<NdArray<F>> {
    let &[s, b, h, d] = x.shape() else {
        return shape_err("rope_apply", x.shape(), &[positions.len()]);
    };
    if positions.len() != s {
        return shape_err("rope_apply", x.shape(), &[positions.len()]);
    }
    p.validate(d)?;
    let mut out = x.clone();
    let pairs = p.rotary_dim / 2;
    if pairs == 0 {
        return Ok(out);
    }
    flops::record(Category::Elementwise, 6 * (s * b * h * pairs) as u64);
    let freqs: Vec<f64> = (0..pairs).map(|i| p.frequency(i)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let row = b * h * d;
    for (t, &pos) in positions.iter().enumerate() {
        let rot: Vec<(F, F)> = freqs
            .iter()
            .map(|w| {
                let a = sign * pos as f64 * w;
                (F::of(a.cos()), F::of(a.sin()))
            })
            .collect();
        for v in out.data_mut()[t * row..(t + 1) * row].chunks_mut(d) {
            for (i, &(c, sn)) in rot.iter().enumerate() {
                let (x0, x1) = (v[2 * i], v[2 * i + 1]);
                v[2 * i] = x0 * c - x1 * sn;
                v[2 * i + 1] = x0 * sn + x1 * c;
            }
        }
    }
    Ok(out)
}
