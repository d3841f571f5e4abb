//! Cycle-level model of the array-processing accelerator.
//!
//! A core is a 16x16 grid of PEs. Each core-cycle consumes one tile: 16
//! output rows by 16 input columns (32 in half precision, where each PE
//! multiplies two 16-bit activations against two weights). The functional
//! simulator walks the same tiles with the PE datapath and reproduces the
//! reference MVM bit for bit; cycle counts come from that walk, and the
//! closed-form schedules below are checked against it.

use serde::{Deserialize, Serialize};

use crate::fixnum::{pe_mac_full, pe_mac_half, Fx16, Fx32, Precision, Quantizer};
use crate::par::Exec;
use crate::{Error, Result};

pub const PE_ROWS: usize = 16;
pub const PE_COLS: usize = 16;
pub const PES_PER_CORE: u64 = (PE_ROWS * PE_COLS) as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// Actor inference runs after the training passes.
    #[default]
    Serial,
    /// Actor inference hides under the training passes.
    Overlapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AapConfig {
    pub n_cores: usize,
    pub pe_rows: usize,
    pub pe_cols: usize,
    pub weight_word_bits: u32,
    pub clock_hz: f64,
    pub precision: Precision,
    /// Extra cycles per tile for weight/activation fetch; 0 models fetch as
    /// fully overlapped with compute.
    pub fetch_stall: u64,
    pub composition: Composition,
}

impl Default for AapConfig {
    fn default() -> Self {
        AapConfig {
            n_cores: 2,
            pe_rows: PE_ROWS,
            pe_cols: PE_COLS,
            weight_word_bits: 512,
            clock_hz: 164e6,
            precision: Precision::Half16,
            fetch_stall: 0,
            composition: Composition::Serial,
        }
    }
}

impl AapConfig {
    pub fn with_cores(mut self, n: usize) -> Self {
        self.n_cores = n;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_cores == 0 {
            return bad("n_cores must be at least 1".into());
        }
        if self.pe_rows != PE_ROWS || self.pe_cols != PE_COLS {
            return bad(format!(
                "PE array is fixed at 16x16, got {}x{}",
                self.pe_rows, self.pe_cols
            ));
        }
        if self.weight_word_bits != 512 {
            return bad(format!(
                "weight_word_bits must be 512 (16 weights per row), got {}",
                self.weight_word_bits
            ));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return bad("clock_hz must be positive".into());
        }
        Ok(())
    }
}

/// One fully connected layer: `rows` outputs from `cols` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub layers: Vec<LayerDims>,
}

impl NetDims {
    /// Widths with the input first, e.g. `[17, 400, 300, 6]`.
    pub fn from_widths(widths: &[usize]) -> Self {
        NetDims {
            layers: widths
                .windows(2)
                .map(|w| LayerDims { rows: w[1], cols: w[0] })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.rows * l.cols + l.rows).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles: u64,
    /// Multiply-accumulates that contribute to a result.
    pub macs: u64,
    /// MAC slots offered by the cycles spent in compute passes.
    pub capacity: u64,
    pub utilization: f64,
    pub samples: u64,
    pub time_s: f64,
    /// Accelerator-only samples per second.
    pub ips: f64,
}

impl CycleReport {
    fn from_counts(cycles: u64, macs: u64, capacity: u64, samples: u64, clock_hz: f64) -> Self {
        let time_s = cycles as f64 / clock_hz;
        CycleReport {
            cycles,
            macs,
            capacity,
            utilization: if capacity == 0 {
                0.0
            } else {
                macs as f64 / capacity as f64
            },
            samples,
            time_s,
            ips: if time_s > 0.0 { samples as f64 / time_s } else { 0.0 },
        }
    }
}

/// Input vector of a simulated MVM.
#[derive(Debug, Clone, Copy)]
pub enum MvmInput<'a> {
    Full(&'a [Fx32]),
    Half {
        codes: &'a [Fx16],
        quantizer: &'a Quantizer,
    },
}

impl MvmInput<'_> {
    fn len(&self) -> usize {
        match self {
            MvmInput::Full(x) => x.len(),
            MvmInput::Half { codes, .. } => codes.len(),
        }
    }

    fn precision(&self) -> Precision {
        match self {
            MvmInput::Full(_) => Precision::Full32,
            MvmInput::Half { .. } => Precision::Half16,
        }
    }
}

fn tiles(n: usize, k: usize) -> u64 {
    n.div_ceil(k) as u64
}

fn log2_ceil(n: usize) -> u64 {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as u64
}

/// Input columns consumed per tile.
fn tile_width(p: Precision) -> usize {
    PE_COLS * p.lanes()
}

/// Closed-form cycles for one MVM of a `rows x cols` matrix whose column
/// tiles are interleaved across `n_cores`. `transposed` computes `W^T e`,
/// which swaps the output and input extents. Each output tile pays a
/// `ceil(log2 M)` cross-core reduction, where `M` is the number of cores
/// that received at least one column tile.
pub fn mvm_cycles(
    rows: usize,
    cols: usize,
    precision: Precision,
    n_cores: usize,
    transposed: bool,
    fetch_stall: u64,
) -> u64 {
    let (out, inp) = if transposed { (cols, rows) } else { (rows, cols) };
    if out == 0 || inp == 0 {
        return 0;
    }
    let out_tiles = tiles(out, PE_ROWS);
    let col_tiles = tiles(inp, tile_width(precision));
    let n = n_cores.max(1) as u64;
    let per_core = col_tiles.div_ceil(n);
    out_tiles * per_core * (1 + fetch_stall) + out_tiles * log2_ceil(n.min(col_tiles) as usize)
}

/// Runs `W x` (or `W^T e`) through the tiled PE datapath and returns the
/// result with its cycle report. Column tiles go round-robin to the cores;
/// per-core partial sums are added in the reduction step.
pub fn simulate_mvm(
    w: &[Fx32],
    rows: usize,
    cols: usize,
    input: MvmInput<'_>,
    cfg: &AapConfig,
    transposed: bool,
) -> Result<(Vec<Fx32>, CycleReport)> {
    cfg.validate()?;
    if w.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            context: "weight matrix",
            expected: rows * cols,
            found: w.len(),
        });
    }
    let (out_len, in_len) = if transposed { (cols, rows) } else { (rows, cols) };
    if input.len() != in_len {
        return Err(Error::ShapeMismatch {
            context: "mvm input",
            expected: in_len,
            found: input.len(),
        });
    }
    // The transposed product only redirects which weight reaches a PE.
    let weight = |o: usize, i: usize| if transposed { w[i * cols + o] } else { w[o * cols + i] };
    let precision = input.precision();
    let width = tile_width(precision);
    let n = cfg.n_cores;
    let col_tiles = in_len.div_ceil(width);
    let out_tiles = out_len.div_ceil(PE_ROWS);

    let mut partial = vec![vec![0i64; out_len]; n];
    let mut core_cycles = vec![0u64; n];
    for ot in 0..out_tiles {
        for ct in 0..col_tiles {
            let core = ct % n;
            core_cycles[core] += 1 + cfg.fetch_stall;
            let acc = &mut partial[core];
            for r in 0..PE_ROWS {
                let o = ot * PE_ROWS + r;
                if o >= out_len {
                    break;
                }
                for c in 0..PE_COLS {
                    match input {
                        MvmInput::Full(x) => {
                            let i = ct * width + c;
                            if i < in_len {
                                acc[o] = pe_mac_full(x[i], weight(o, i), acc[o]);
                            }
                        }
                        MvmInput::Half { codes, .. } => {
                            let (ia, ib) = (ct * width + c, ct * width + PE_COLS + c);
                            let pick = |i: usize| {
                                if i < in_len {
                                    (codes[i], weight(o, i))
                                } else {
                                    (Fx16::default(), Fx32::ZERO)
                                }
                            };
                            let ((a, wa), (b, wb)) = (pick(ia), pick(ib));
                            acc[o] = pe_mac_half(a, wa, b, wb, acc[o]);
                        }
                    }
                }
            }
        }
    }
    let mut acc = vec![0i64; out_len];
    for p in &partial {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let result = match input {
        MvmInput::Full(_) => acc.iter().map(|&a| Fx32::saturate(a >> 16)).collect(),
        MvmInput::Half { quantizer, .. } => {
            // Zero-point correction, folded in after the array.
            let offset = quantizer.offset();
            acc.iter()
                .enumerate()
                .map(|(o, &a)| {
                    let wsum: i64 = (0..in_len).map(|i| weight(o, i).raw() as i64).sum();
                    Fx32::saturate(quantizer.rescale(a + offset * wsum))
                })
                .collect()
        }
    };
    let reduction = out_tiles as u64 * log2_ceil(n.min(col_tiles));
    let cycles = core_cycles.iter().copied().max().unwrap_or(0) + reduction;
    let macs = (rows * cols) as u64;
    let capacity = cycles * PES_PER_CORE * n as u64 * precision.lanes() as u64;
    Ok((
        result,
        CycleReport::from_counts(cycles, macs, capacity, 1, cfg.clock_hz),
    ))
}

/// One sample through `net`, layers in sequence, each layer's column tiles
/// spread across all cores.
pub fn schedule_inference(net: &NetDims, cfg: &AapConfig) -> CycleReport {
    let (mut cycles, mut macs, mut capacity) = (0, 0, 0);
    let per_cycle = PES_PER_CORE * cfg.n_cores as u64 * cfg.precision.lanes() as u64;
    for l in &net.layers {
        let c = mvm_cycles(l.rows, l.cols, cfg.precision, cfg.n_cores, false, cfg.fetch_stall);
        cycles += c;
        macs += (l.rows * l.cols) as u64;
        capacity += c * per_cycle;
    }
    CycleReport::from_counts(cycles, macs, capacity, 1, cfg.clock_hz)
}

/// Cycles for one sample of training on a single core: per layer a forward
/// pass, a transposed error pass (errors stay 32-bit) and the gradient outer
/// product.
pub fn training_cycles_per_sample(nets: &[NetDims], cfg: &AapConfig) -> (u64, u64, u64) {
    let (mut cycles, mut macs, mut capacity) = (0, 0, 0);
    let p = cfg.precision;
    let stall = cfg.fetch_stall;
    for l in nets.iter().flat_map(|n| &n.layers) {
        let passes = [(p, false), (Precision::Full32, true), (p, false)];
        for (prec, t) in passes {
            let c = mvm_cycles(l.rows, l.cols, prec, 1, t, stall);
            cycles += c;
            capacity += c * PES_PER_CORE * prec.lanes() as u64;
            macs += (l.rows * l.cols) as u64;
        }
    }
    (cycles, macs, capacity)
}

/// Whole samples are spread over the cores, so a batch takes
/// `ceil(B / N)` per-sample schedules and needs no reduction.
pub fn schedule_training(nets: &[NetDims], batch: usize, cfg: &AapConfig) -> CycleReport {
    let (per_sample, macs, capacity) = training_cycles_per_sample(nets, cfg);
    let rounds = batch.div_ceil(cfg.n_cores.max(1)) as u64;
    let cycles = rounds * per_sample;
    // Idle cores in a partial last round still count as offered capacity.
    let offered = rounds * cfg.n_cores as u64 * capacity;
    CycleReport::from_counts(cycles, macs * batch as u64, offered, batch as u64, cfg.clock_hz)
}

/// One timestep on the accelerator: the training batch plus one actor
/// inference for the next action.
pub fn schedule_timestep(
    train: &CycleReport,
    inference: &CycleReport,
    composition: Composition,
    clock_hz: f64,
) -> CycleReport {
    let cycles = match composition {
        Composition::Serial => train.cycles + inference.cycles,
        Composition::Overlapped => train.cycles.max(inference.cycles),
    };
    CycleReport::from_counts(
        cycles,
        train.macs + inference.macs,
        train.capacity + inference.capacity,
        train.samples,
        clock_hz,
    )
}

/// Platform IPS: samples over accelerator time plus host time per
/// timestep. Zero host latency gives the accelerator-only figure.
pub fn compute_ips(report: &CycleReport, host_latency_s: f64) -> f64 {
    let t = report.time_s + host_latency_s.max(0.0);
    if t > 0.0 {
        report.samples as f64 / t
    } else {
        0.0
    }
}

/// Efficiency is only reported for a measured power figure.
pub fn ips_per_watt(ips: f64, watts: Option<f64>) -> Option<f64> {
    watts.filter(|w| *w > 0.0).map(|w| ips / w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub weight_bytes: usize,
    pub gradient_bytes: usize,
    pub activation_bytes: usize,
}

/// On-chip memory for 4-byte parameters. Gradients mirror the weights; the
/// activation buffer is shared, so it is sized for the largest network's
/// input plus every layer output.
pub fn memory_footprint(nets: &[NetDims]) -> MemoryFootprint {
    let weight_bytes = nets.iter().map(NetDims::param_count).sum::<usize>() * 4;
    let activation_bytes = nets
        .iter()
        .filter(|n| !n.layers.is_empty())
        .map(|n| (n.layers[0].cols + n.layers.iter().map(|l| l.rows).sum::<usize>()) * 4)
        .max()
        .unwrap_or(0);
    MemoryFootprint {
        weight_bytes,
        gradient_bytes: weight_bytes,
        activation_bytes,
    }
}

/// Training schedules for several batch sizes.
pub fn sweep_batches(nets: &[NetDims], batches: &[usize], cfg: &AapConfig, exec: Exec) -> Vec<CycleReport> {
    exec.map(batches, |&b| schedule_training(nets, b, cfg))
}
