//! Binary checkpoints.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! magic "FXRLCKPT" | version u32 | fraction bits u32 | env name (u32 len, utf8)
//! timestep u64
//! actor, critic, actor target, critic target:
//!     layers u32, then per layer rows u32, cols u32, activation u8,
//!     weights i32 * rows*cols, bias i32 * rows
//! actor qat, critic qat:
//!     delay u64, bits u32, t u64, frozen u8, layers u32,
//!     then per layer present u8, min i32, max i32
//! actor adam, critic adam:
//!     lr i32, beta1 i32, beta2 i32, eps i32, t u64, beta1^t i64, beta2^t i64,
//!     n u32, first moments i64 * n, second moments i128 * n
//! ```
//!
//! Frozen quantizers are refitted from the stored ranges on load, which is
//! exact because fitting is deterministic.

use std::io::{Read, Write};
use std::path::Path;

use crate::ddpg::AgentParts;
use crate::fixnum::{Fx32, Precision, FRAC_BITS};
use crate::nn::{Activation, AdamConfig, AdamState, Layer, Network};
use crate::qat::QatController;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FXRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub env: String,
    pub timestep: u64,
    pub parts: AgentParts,
}

/// Summary printed by `inspect`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub frac_bits: u32,
    pub env: String,
    pub timestep: u64,
    pub actor_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
    pub precision: Precision,
    pub quant_delay: u64,
    pub quant_bits: u32,
    pub param_count: usize,
    pub optimizer_steps: u64,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i128(&mut self, v: i128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }
    fn fx(&mut self, v: Fx32) {
        self.i32(v.raw());
    }

    fn network(&mut self, net: &Network) {
        self.len(net.layers().len());
        for l in net.layers() {
            self.len(l.rows());
            self.len(l.cols());
            self.u8(l.activation().code());
            l.weights().iter().chain(l.bias()).for_each(|&w| self.fx(w));
        }
    }

    fn qat(&mut self, q: &QatController) {
        self.u64(q.delay());
        self.u32(q.bits());
        self.u64(q.timestep());
        self.u8(q.quantizers().is_some() as u8);
        self.len(q.ranges().len());
        for r in q.ranges() {
            let (present, (lo, hi)) = match r {
                Some(r) => (1, *r),
                None => (0, (Fx32::ZERO, Fx32::ZERO)),
            };
            self.u8(present);
            self.fx(lo);
            self.fx(hi);
        }
    }

    fn adam(&mut self, a: &AdamState) {
        let c = a.config();
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            self.fx(v);
        }
        self.u64(a.step_count());
        let (p1, p2) = a.powers();
        self.i64(p1);
        self.i64(p2);
        let (m, v) = a.moments();
        self.len(m.len());
        m.iter().for_each(|&x| self.i64(x));
        v.iter().for_each(|&x| self.i128(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn i128(&mut self) -> Result<i128> {
        Ok(i128::from_le_bytes(self.array()?))
    }
    fn fx(&mut self) -> Result<Fx32> {
        Ok(Fx32::from_raw(self.i32()?))
    }
    /// A count whose elements need at least `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(malformed(format!(
                "count {n} exceeds remaining data at byte {}",
                self.pos
            )));
        }
        Ok(n)
    }

    fn network(&mut self) -> Result<Network> {
        let n = self.count(9)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let act = self.u8()?;
            let act = Activation::from_code(act).ok_or_else(|| malformed(format!("unknown activation code {act}")))?;
            let total = rows
                .checked_mul(cols)
                .and_then(|w| w.checked_add(rows))
                .filter(|&t| t.saturating_mul(4) <= self.buf.len() - self.pos)
                .ok_or_else(|| malformed("layer larger than file"))?;
            let mut vals = (0..total).map(|_| self.fx()).collect::<Result<Vec<_>>>()?;
            let bias = vals.split_off(rows * cols);
            layers.push(Layer::new(rows, cols, vals, bias, act)?);
        }
        Network::new(layers)
    }

    fn qat(&mut self) -> Result<QatController> {
        let delay = self.u64()?;
        let bits = self.u32()?;
        let t = self.u64()?;
        let frozen = self.u8()? != 0;
        let n = self.count(9)?;
        let mut ranges = Vec::with_capacity(n);
        for _ in 0..n {
            let present = self.u8()? != 0;
            let (lo, hi) = (self.fx()?, self.fx()?);
            ranges.push(present.then_some((lo, hi)));
        }
        QatController::from_parts(delay, bits, t, ranges, frozen)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let config = AdamConfig {
            lr: self.fx()?,
            beta1: self.fx()?,
            beta2: self.fx()?,
            eps: self.fx()?,
        };
        let t = self.u64()?;
        let (p1, p2) = (self.i64()?, self.i64()?);
        let n = self.count(24)?;
        let m = (0..n).map(|_| self.i64()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| self.i128()).collect::<Result<Vec<_>>>()?;
        Ok(AdamState::from_parts(config, m, v, t, p1, p2))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(FRAC_BITS);
        w.len(self.env.len());
        w.0.extend_from_slice(self.env.as_bytes());
        w.u64(self.timestep);
        let p = &self.parts;
        for net in [&p.actor, &p.critic, &p.actor_target, &p.critic_target] {
            w.network(net);
        }
        w.qat(&p.actor_qat);
        w.qat(&p.critic_qat);
        w.adam(&p.actor_opt);
        w.adam(&p.critic_opt);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let frac = r.u32()?;
        if frac != FRAC_BITS {
            return Err(malformed(format!("expected Q16.16 data, found {frac} fraction bits")));
        }
        let n = r.count(1)?;
        let env = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| malformed("env name is not utf-8"))?;
        let timestep = r.u64()?;
        let actor = r.network()?;
        let critic = r.network()?;
        let actor_target = r.network()?;
        let critic_target = r.network()?;
        let actor_qat = r.qat()?;
        let critic_qat = r.qat()?;
        let actor_opt = r.adam()?;
        let critic_opt = r.adam()?;
        if r.pos != buf.len() {
            return Err(malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        if actor_opt.moments().0.len() != actor.param_count() || critic_opt.moments().0.len() != critic.param_count() {
            return Err(malformed("optimizer state does not match network size"));
        }
        if actor_qat.ranges().len() != actor.layers().len() || critic_qat.ranges().len() != critic.layers().len() {
            return Err(malformed("quantizer count does not match network depth"));
        }
        Ok(Checkpoint {
            env,
            timestep,
            parts: AgentParts {
                actor,
                critic,
                actor_target,
                critic_target,
                actor_qat,
                critic_qat,
                actor_opt,
                critic_opt,
            },
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn header(&self) -> CheckpointHeader {
        let p = &self.parts;
        CheckpointHeader {
            version: VERSION,
            frac_bits: FRAC_BITS,
            env: self.env.clone(),
            timestep: self.timestep,
            actor_widths: p.actor.widths(),
            critic_widths: p.critic.widths(),
            precision: p.actor_qat.mode(),
            quant_delay: p.actor_qat.delay(),
            quant_bits: p.actor_qat.bits(),
            param_count: p.actor.param_count() + p.critic.param_count(),
            optimizer_steps: p.actor_opt.step_count(),
        }
    }
}
