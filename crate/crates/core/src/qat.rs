//! Quantization-delay controller.
//!
//! Before the delay `d` the network runs with 32-bit activations while the
//! controller tracks a per-layer min/max envelope of layer inputs. On the
//! first tick with `t >= d` it fits one quantizer per layer from those
//! envelopes and freezes them; every later forward pass runs with 16-bit
//! activations.

use serde::{Deserialize, Serialize};

use crate::fixnum::{Fx32, Precision, Quantizer};
use crate::nn::{ActivationTape, ForwardMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QatController {
    delay: u64,
    bits: u32,
    t: u64,
    ranges: Vec<Option<(Fx32, Fx32)>>,
    quantizers: Option<Vec<Quantizer>>,
}

impl QatController {
    pub fn new(layers: usize, delay: u64, bits: u32) -> Self {
        QatController {
            delay,
            bits,
            t: 0,
            ranges: vec![None; layers],
            quantizers: None,
        }
    }

    pub fn delay(&self) -> u64 {
        self.delay
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn mode(&self) -> Precision {
        if self.quantizers.is_some() {
            Precision::Half16
        } else {
            Precision::Full32
        }
    }

    pub fn ranges(&self) -> &[Option<(Fx32, Fx32)>] {
        &self.ranges
    }

    pub fn quantizers(&self) -> Option<&[Quantizer]> {
        self.quantizers.as_deref()
    }

    pub fn forward_mode(&self) -> ForwardMode<'_> {
        match &self.quantizers {
            Some(qs) => ForwardMode::Half16(qs),
            None => ForwardMode::Full32,
        }
    }

    /// Widens the envelope of one layer.
    pub fn observe_range(&mut self, layer: usize, min: Fx32, max: Fx32) -> Result<()> {
        if self.quantizers.is_some() {
            return Err(Error::ObserveAfterFreeze);
        }
        let depth = self.ranges.len();
        let slot = self.ranges.get_mut(layer).ok_or(Error::ShapeMismatch {
            context: "observed layer",
            expected: depth,
            found: layer + 1,
        })?;
        *slot = Some(match *slot {
            Some((lo, hi)) => (lo.min(min), hi.max(max)),
            None => (min, max),
        });
        Ok(())
    }

    pub fn observe(&mut self, tape: &ActivationTape) -> Result<()> {
        if self.quantizers.is_some() {
            return Err(Error::ObserveAfterFreeze);
        }
        if tape.depth() != self.ranges.len() {
            return Err(Error::ShapeMismatch {
                context: "tape depth",
                expected: self.ranges.len(),
                found: tape.depth(),
            });
        }
        for (i, rec) in tape.layers.iter().enumerate() {
            self.observe_range(i, rec.min, rec.max)?;
        }
        Ok(())
    }

    /// Observes only while still in full precision.
    pub fn observe_if_full(&mut self, tape: &ActivationTape) -> Result<()> {
        if self.quantizers.is_some() {
            Ok(())
        } else {
            self.observe(tape)
        }
    }

    /// Fits quantizers from the current envelopes without changing state.
    pub fn fit_quantizers(&self) -> Result<Vec<Quantizer>> {
        self.ranges
            .iter()
            .map(|r| match *r {
                Some((lo, hi)) => Quantizer::fit_fx(lo, hi, self.bits),
                None => Err(Error::DegenerateRange { min: 0.0, max: 0.0 }),
            })
            .collect()
    }

    /// Advances one timestep; switches to half precision on the first tick
    /// with `t >= delay`. A failed switch leaves the controller untouched.
    pub fn tick(&mut self) -> Result<Precision> {
        let t = self.t + 1;
        if self.quantizers.is_none() && t >= self.delay {
            self.quantizers = Some(self.fit_quantizers()?);
        }
        self.t = t;
        Ok(self.mode())
    }

    pub(crate) fn from_parts(
        delay: u64,
        bits: u32,
        t: u64,
        ranges: Vec<Option<(Fx32, Fx32)>>,
        frozen: bool,
    ) -> Result<Self> {
        let mut ctrl = QatController {
            delay,
            bits,
            t,
            ranges,
            quantizers: None,
        };
        if frozen {
            ctrl.quantizers = Some(ctrl.fit_quantizers()?);
        }
        Ok(ctrl)
    }
}

/// Per-layer min/max envelope that can be built from many tapes in any
/// order and merged.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RangeEnvelope {
    ranges: Vec<Option<(Fx32, Fx32)>>,
}

impl RangeEnvelope {
    pub fn new(layers: usize) -> Self {
        RangeEnvelope {
            ranges: vec![None; layers],
        }
    }

    pub fn add_tape(&mut self, tape: &ActivationTape) {
        if self.ranges.len() < tape.depth() {
            self.ranges.resize(tape.depth(), None);
        }
        for (slot, rec) in self.ranges.iter_mut().zip(&tape.layers) {
            *slot = Some(match *slot {
                Some((lo, hi)) => (lo.min(rec.min), hi.max(rec.max)),
                None => (rec.min, rec.max),
            });
        }
    }

    pub fn merge(mut self, other: RangeEnvelope) -> RangeEnvelope {
        if self.ranges.len() < other.ranges.len() {
            self.ranges.resize(other.ranges.len(), None);
        }
        for (slot, r) in self.ranges.iter_mut().zip(other.ranges) {
            *slot = match (*slot, r) {
                (Some((a, b)), Some((c, d))) => Some((a.min(c), b.max(d))),
                (x, None) => x,
                (None, y) => y,
            };
        }
        self
    }

    pub fn ranges(&self) -> &[Option<(Fx32, Fx32)>] {
        &self.ranges
    }
}

impl QatController {
    /// Observes a merged envelope; equivalent to observing each tape in it.
    pub fn observe_envelope(&mut self, env: &RangeEnvelope) -> Result<()> {
        if self.quantizers.is_some() {
            return Err(Error::ObserveAfterFreeze);
        }
        for (i, r) in env.ranges.iter().enumerate() {
            if let Some((lo, hi)) = *r {
                self.observe_range(i, lo, hi)?;
            }
        }
        Ok(())
    }
}
