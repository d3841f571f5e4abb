//! Adam evaluated entirely in integer arithmetic.
//!
//! The first moment is Q32.32 (`i64`). The second moment keeps 64 fractional
//! bits (`i128`) because squares of small gradients vanish at 32. Bias
//! correction multiplies by a Q32.32 reciprocal of `1 - beta^t`; the square
//! root is an integer Newton iteration, and the root of a 64-fraction-bit
//! value is directly Q32.32.

use serde::{Deserialize, Serialize};

use crate::fixnum::Fx32;
use crate::nn::{Network, ParamGrads};
use crate::{Error, Result};

const ONE_Q32: i64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Fx32,
    pub beta1: Fx32,
    pub beta2: Fx32,
    pub eps: Fx32,
}

impl AdamConfig {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 2^-16` (one Q16.16 ulp).
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr: Fx32::from_real(lr),
            beta1: Fx32::from_real(0.9),
            beta2: Fx32::from_real(0.999),
            eps: Fx32::ULP,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<i64>,
    v: Vec<i128>,
    t: u64,
    beta1_pow: i64,
    beta2_pow: i64,
}

#[inline]
fn q32(x: Fx32) -> i64 {
    (x.raw() as i64) << 16
}

#[inline]
fn mul_q32(a: i64, b: i64) -> i64 {
    ((a as i128 * b as i128) >> 32) as i64
}

/// Q32.32 reciprocal of a positive Q32.32 value.
#[inline]
fn recip_q32(x: i64) -> i64 {
    debug_assert!(x > 0);
    ((1u128 << 64) / x as u128) as i64
}

/// `floor(sqrt(n))` by Newton's iteration.
pub(crate) fn isqrt(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    // Start above the root so the iteration decreases monotonically.
    let mut x = 1u128 << ((128 - n.leading_zeros()).div_ceil(2));
    loop {
        let y = (x + n / x) >> 1;
        if y >= x {
            return x;
        }
        x = y;
    }
}

impl AdamState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        AdamState {
            config,
            m: vec![0; param_count],
            v: vec![0; param_count],
            t: 0,
            beta1_pow: ONE_Q32,
            beta2_pow: ONE_Q32,
        }
    }

    pub fn for_network(config: AdamConfig, net: &Network) -> Self {
        Self::new(config, net.param_count())
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[i64], &[i128]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        m: Vec<i64>,
        v: Vec<i128>,
        t: u64,
        beta1_pow: i64,
        beta2_pow: i64,
    ) -> Self {
        AdamState {
            config,
            m,
            v,
            t,
            beta1_pow,
            beta2_pow,
        }
    }

    pub(crate) fn powers(&self) -> (i64, i64) {
        (self.beta1_pow, self.beta2_pow)
    }

    /// One update over a flat parameter slice.
    pub fn step_slice(&mut self, params: &mut [Fx32], grads: &[Fx32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adam parameters",
                expected: self.m.len(),
                found: params.len().min(grads.len()),
            });
        }
        self.advance();
        let c = self.coefficients();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            *p = self.update_one(i, *p, *g, &c);
        }
        Ok(())
    }

    /// One update of every parameter of `net`, in checkpoint order.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        let n: usize = grads.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        if n != self.m.len() || net.param_count() != self.m.len() || grads.layers.len() != net.layers().len() {
            return Err(Error::ShapeMismatch {
                context: "adam parameters",
                expected: self.m.len(),
                found: n,
            });
        }
        self.advance();
        let c = self.coefficients();
        let flat_grads = grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias));
        for (i, (p, g)) in net.params_mut().zip(flat_grads).enumerate() {
            *p = self.update_one(i, *p, *g, &c);
        }
        Ok(())
    }

    fn advance(&mut self) {
        self.t += 1;
        self.beta1_pow = mul_q32(self.beta1_pow, q32(self.config.beta1));
        self.beta2_pow = mul_q32(self.beta2_pow, q32(self.config.beta2));
    }

    fn coefficients(&self) -> Coefficients {
        let b1 = q32(self.config.beta1);
        let b2 = q32(self.config.beta2);
        Coefficients {
            b1,
            b2,
            one_minus_b1: ONE_Q32 - b1,
            one_minus_b2: ONE_Q32 - b2,
            corr1: recip_q32((ONE_Q32 - self.beta1_pow).max(1)),
            corr2: recip_q32((ONE_Q32 - self.beta2_pow).max(1)),
            eps: q32(self.config.eps),
            lr: self.config.lr.raw() as i128,
        }
    }

    fn update_one(&mut self, i: usize, p: Fx32, g: Fx32, c: &Coefficients) -> Fx32 {
        let g_q32 = q32(g);
        let g_sq = (g.raw() as i128 * g.raw() as i128) << 32;
        let m = mul_q32(c.b1, self.m[i]) + mul_q32(c.one_minus_b1, g_q32);
        let v = ((c.b2 as i128 * self.v[i]) >> 32) + ((c.one_minus_b2 as i128 * g_sq) >> 32);
        self.m[i] = m;
        self.v[i] = v;

        let m_hat = (m as i128 * c.corr1 as i128) >> 32;
        // Split so the product cannot overflow for saturated gradients.
        let corr2 = c.corr2 as i128;
        let v_hat = ((v >> 32) * corr2 + (((v & 0xFFFF_FFFF) * corr2) >> 32)).max(0) as u128;
        let root = isqrt(v_hat) as i128;
        let denom = root + c.eps as i128;
        let ratio = (m_hat << 32).div_euclid(denom);
        // Round the final step to nearest; a floored step drifts every
        // parameter by half an ulp per update.
        let delta = (c.lr * ratio + (1 << 31)) >> 32;
        Fx32::saturate_i128(p.raw() as i128 - delta)
    }
}

struct Coefficients {
    b1: i64,
    b2: i64,
    one_minus_b1: i64,
    one_minus_b2: i64,
    corr1: i64,
    corr2: i64,
    eps: i64,
    lr: i128,
}
