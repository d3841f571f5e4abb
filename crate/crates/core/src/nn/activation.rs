use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::fixnum::Fx32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: Fx32) -> Fx32 {
        match self {
            Activation::Identity => x,
            Activation::Relu => relu(x),
            Activation::Tanh => tanh(x),
        }
    }

    /// Scales an error at the activation output back to the pre-activation.
    pub fn backprop(self, err: Fx32, pre: Fx32, out: Fx32) -> Fx32 {
        match self {
            Activation::Identity => err,
            Activation::Relu => {
                if pre > Fx32::ZERO {
                    err
                } else {
                    Fx32::ZERO
                }
            }
            // d tanh = 1 - y^2, taken from the table output.
            Activation::Tanh => err * (Fx32::ONE - out * out),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

pub fn apply_activation(xs: &[Fx32], f: Activation) -> Vec<Fx32> {
    xs.iter().map(|&x| f.apply(x)).collect()
}

#[inline]
pub fn relu(x: Fx32) -> Fx32 {
    x.max(Fx32::ZERO)
}

const TANH_SEGMENTS: usize = 256;
// [-4, 4) in Q16.16 is 2^19 codes; 256 segments of 2^11 codes each.
const TANH_LO: i32 = -4 << 16;
const SEGMENT_SHIFT: u32 = 11;

fn tanh_table() -> &'static [i32; TANH_SEGMENTS + 1] {
    static TABLE: OnceLock<[i32; TANH_SEGMENTS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0i32; TANH_SEGMENTS + 1];
        for (k, slot) in t.iter_mut().enumerate() {
            let x = (TANH_LO + ((k as i32) << SEGMENT_SHIFT)) as f64 / 65536.0;
            // Knots are rounded to nearest so the table stays odd-symmetric.
            *slot = (x.tanh() * 65536.0).round() as i32;
        }
        t
    })
}

/// Piecewise-linear tanh over [-4, 4] with 256 segments, clamped to +-1
/// outside.
pub fn tanh(x: Fx32) -> Fx32 {
    let raw = x.raw();
    if raw < TANH_LO {
        return -Fx32::ONE;
    }
    if raw >= -TANH_LO {
        return Fx32::ONE;
    }
    let offset = raw - TANH_LO;
    let k = (offset >> SEGMENT_SHIFT) as usize;
    let frac = (offset & ((1 << SEGMENT_SHIFT) - 1)) as i64;
    let t = tanh_table();
    let (y0, y1) = (t[k] as i64, t[k + 1] as i64);
    Fx32::from_raw((y0 + (((y1 - y0) * frac) >> SEGMENT_SHIFT)) as i32)
}
