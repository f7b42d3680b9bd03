//! Cycle-level emulator for the flattened systolic accelerator.
//!
//! Single issue, in order. Every instruction has its functional effect at
//! the cycle it issues; its destinations become readable `latency` cycles
//! later. An instruction issues once all its source and destination rows
//! and registers are ready and its unit is free. [`Machine::step`] advances
//! one cycle at a time; [`Machine::run`] skips whole stall intervals and
//! reaches the same state.
//!
//! Addressing is register indirect. Vector SRAM is a flat element array
//! viewed as rows of VLEN for the scoreboard. Matrix SRAM holds MLEN×MLEN
//! tiles; a matrix address is `tile * MLEN² + offset` with `offset < MLEN`
//! a multiple of BLEN.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{fake_quantize_row, fwht_in_place, DataFormat, FormatError, Kind};
use crate::hbm::{Channel, HbmError, HbmImage};
use crate::isa::{Class, Instruction, IsaError, LutFn, Mnemonic, Program};

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("pc {0} outside program")]
    PcOutOfRange(usize),
    #[error("pc {pc}: {what} address {addr} out of range")]
    OutOfRange { pc: usize, what: &'static str, addr: i64 },
    #[error("pc {pc}: {what} address {addr} misaligned")]
    Misaligned { pc: usize, what: &'static str, addr: i64 },
    #[error("pc {pc}: read of never-written {what} at {addr}")]
    Poison { pc: usize, what: &'static str, addr: usize },
    #[error("pc {pc}: matrix tile row {row} holds {found}, expected a weight or KV format")]
    FormatMismatch { pc: usize, row: usize, found: String },
    #[error("pc {pc}: scale register {reg} does not match region `{region}` scale offset {want}")]
    ScaleMismatch { pc: usize, reg: i64, region: String, want: u64 },
    #[error("pc {pc}: transfer overlaps in-flight rows at {row}")]
    InFlightOverlap { pc: usize, row: usize },
    #[error("pc {pc}: integer divide by zero")]
    DivideByZero { pc: usize },
    #[error("pc {pc}: non-finite value")]
    NonFinite { pc: usize },
    #[error("pc {pc}: {msg}")]
    Bad { pc: usize, msg: String },
    #[error("timeout after {} cycles", .0.cycles)]
    Timeout(Box<ExecutionReport>),
    #[error(transparent)]
    Hbm(#[from] HbmError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, MachineError>;

/// Pipeline latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latencies {
    pub vector: u64,
    pub scalar: u64,
    pub adder_tree_const: u64,
    /// Systolic fill/drain folded into every write-out.
    pub systolic_drain: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies { vector: 2, scalar: 1, adder_tree_const: 2, systolic_drain: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub blen: usize,
    pub mlen: usize,
    pub vlen: usize,
    /// Rows of MLEN elements.
    pub matrix_sram_depth: usize,
    /// Rows of VLEN elements.
    pub vector_sram_depth: usize,
    pub int_sram_depth: usize,
    pub fp_sram_depth: usize,
    pub fp_setting: DataFormat,
    pub weight_fmt: DataFormat,
    pub act_fmt: DataFormat,
    pub kv_fmt: DataFormat,
    /// Only feeds the area model; the emulator computes in 64 bits.
    pub int_width: u32,
    pub clock_ghz: f64,
    pub latency: Latencies,
}

impl ArchConfig {
    pub fn new(blen: usize, mlen: usize, vlen: usize) -> ArchConfig {
        ArchConfig {
            blen,
            mlen,
            vlen,
            matrix_sram_depth: 4096,
            vector_sram_depth: 8192,
            int_sram_depth: 1024,
            fp_sram_depth: 1024,
            fp_setting: DataFormat::minifloat(6, 5),
            weight_fmt: DataFormat::mxint(4, 16),
            act_fmt: DataFormat::mxint(8, 16),
            kv_fmt: DataFormat::mxint(8, 16),
            int_width: 32,
            clock_ghz: 1.0,
            latency: Latencies { systolic_drain: blen as u64, ..Latencies::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MachineError::Config(m));
        if self.blen == 0 || self.mlen == 0 || self.vlen == 0 {
            return bad("BLEN, MLEN and VLEN must be positive".into());
        }
        if self.mlen < self.blen || self.mlen % self.blen != 0 {
            return bad(format!("MLEN {} must be a multiple of BLEN {}", self.mlen, self.blen));
        }
        if self.fp_setting.kind != Kind::MiniFloat {
            return bad(format!("fp_setting {} is not a minifloat", self.fp_setting));
        }
        for f in [self.weight_fmt, self.act_fmt, self.kv_fmt] {
            f.validate()?;
            if !f.is_mx() {
                return bad(format!("{f} is not an MX format"));
            }
        }
        if self.mlen % self.act_fmt.block_size as usize != 0 {
            return bad(format!("MLEN {} not a multiple of the activation block", self.mlen));
        }
        if self.matrix_sram_depth % self.mlen != 0 {
            return bad("matrix SRAM depth must hold whole tiles".into());
        }
        if !(self.clock_ghz > 0.0) {
            return bad("clock must be positive".into());
        }
        Ok(())
    }

    pub fn peak_macs_per_cycle(&self) -> u64 {
        (self.mlen * self.blen) as u64
    }

    pub fn subarrays(&self) -> usize {
        self.mlen / self.blen
    }

    pub fn adder_tree_latency(&self) -> u64 {
        let s = self.subarrays() as u64;
        (64 - (s - 1).leading_zeros()) as u64 * u64::from(s > 1) + self.latency.adder_tree_const
    }

    pub fn writeout_latency(&self) -> u64 {
        self.latency.systolic_drain + self.adder_tree_latency()
    }
}

/// Diagonally skewed tile storage: tile-local element (r, c) lives in bank
/// `(r + c) % MLEN`, so a row read and a column read each hit every bank
/// exactly once.
#[derive(Debug, Clone)]
pub struct MatrixSram {
    mlen: usize,
    depth: usize,
    banks: Vec<f64>,
    valid: Vec<bool>,
    format: Vec<Option<DataFormat>>,
    seen: Vec<u64>,
    stamp: u64,
    pub bank_conflicts: u64,
    pub reads: u64,
    pub writes: u64,
}

impl MatrixSram {
    pub fn new(mlen: usize, depth: usize) -> MatrixSram {
        MatrixSram {
            mlen,
            depth,
            banks: vec![0.0; mlen * depth],
            valid: vec![false; depth],
            format: vec![None; depth],
            seen: vec![0; mlen],
            stamp: 0,
            bank_conflicts: 0,
            reads: 0,
            writes: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tiles(&self) -> usize {
        self.depth / self.mlen
    }

    fn bank(&self, row: usize, c: usize) -> usize {
        (row % self.mlen + c) % self.mlen
    }

    fn access(&mut self, banks: impl Iterator<Item = usize>) {
        self.stamp += 1;
        for b in banks {
            if self.seen[b] == self.stamp {
                self.bank_conflicts += 1;
            }
            self.seen[b] = self.stamp;
        }
    }

    pub fn write_row(&mut self, row: usize, values: &[f64], fmt: Option<DataFormat>) -> std::result::Result<(), String> {
        if row >= self.depth || values.len() != self.mlen {
            return Err(format!("matrix row {row} / width {}", values.len()));
        }
        let m = self.mlen;
        self.access((0..m).map(move |c| (row % m + c) % m));
        for (c, &v) in values.iter().enumerate() {
            let b = self.bank(row, c);
            self.banks[b * self.depth + row] = v;
        }
        self.valid[row] = true;
        self.format[row] = fmt;
        self.writes += self.mlen as u64;
        Ok(())
    }

    pub fn row_valid(&self, row: usize) -> bool {
        row < self.depth && self.valid[row]
    }

    pub fn row_format(&self, row: usize) -> Option<DataFormat> {
        self.format.get(row).copied().flatten()
    }

    /// Row `row` (absolute) as stored.
    pub fn read_row(&mut self, row: usize) -> Option<Vec<f64>> {
        if !self.row_valid(row) {
            return None;
        }
        let m = self.mlen;
        self.access((0..m).map(move |c| (row % m + c) % m));
        self.reads += self.mlen as u64;
        Some((0..self.mlen).map(|c| self.banks[self.bank(row, c) * self.depth + row]).collect())
    }

    /// Column `col` of tile `tile`, i.e. the transposed view.
    pub fn read_col(&mut self, tile: usize, col: usize) -> Option<Vec<f64>> {
        let base = tile * self.mlen;
        if col >= self.mlen || base + self.mlen > self.depth || !(base..base + self.mlen).all(|r| self.valid[r]) {
            return None;
        }
        let m = self.mlen;
        self.access((0..m).map(move |r| ((base + r) % m + col) % m));
        self.reads += self.mlen as u64;
        Some((0..self.mlen).map(|r| self.banks[self.bank(base + r, col) * self.depth + base + r]).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub cycles: u64,
    pub instructions: u64,
    pub stalls: u64,
    pub memory_stalls: u64,
    /// Memory stalls of matrix instructions after the first one issued.
    pub matrix_memory_stalls: u64,
    /// Memory stalls of the first matrix instruction (pipeline fill).
    pub matrix_memory_stalls_fill: u64,
    pub mac_ops: u64,
    pub utilization: f64,
    pub streaming_cycles: u64,
    pub streaming_macs: u64,
    pub streaming_utilization: f64,
    pub vector_sram_reads: u64,
    pub vector_sram_writes: u64,
    pub matrix_sram_reads: u64,
    pub matrix_sram_writes: u64,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    pub hbm_max_transfer_bytes: u64,
    pub hbm_region_bytes: BTreeMap<String, u64>,
    pub bank_conflicts: u64,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: u64,
    pub pc: usize,
    pub mnemonic: String,
    pub stall: u64,
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Issued,
    Stalled,
    Halted,
}

#[derive(Debug, Clone, Copy, Default)]
struct Ready {
    mem: u64,
    other: u64,
}

impl Ready {
    fn at(&self, cycle: u64) -> u64 {
        cycle.max(self.mem).max(self.other)
    }

    fn memory_part(&self, cycle: u64) -> u64 {
        self.mem.saturating_sub(cycle.max(self.other))
    }
}

#[derive(Debug, Clone, Default)]
struct Phase {
    open: bool,
    start: u64,
    end: u64,
    macs: u64,
}

/// Emulated accelerator state.
#[derive(Debug, Clone)]
pub struct Machine {
    cfg: ArchConfig,
    pc: usize,
    cycle: u64,
    halted: bool,
    gpr: [i64; 32],
    fpr: [f64; 32],
    gpr_ready: [u64; 32],
    fpr_ready: [u64; 32],
    addr_base: [i64; 32],
    addr_stride: [i64; 32],
    scale_reg: i64,
    lut: LutFn,
    vsram: Vec<f64>,
    vvalid: Vec<bool>,
    vready: Vec<u64>,
    vmem: Vec<bool>,
    msram: MatrixSram,
    mready: Vec<u64>,
    mmem: Vec<bool>,
    int_mem: Vec<i64>,
    fp_mem: Vec<f64>,
    fp_valid: Vec<bool>,
    acc: Vec<f64>,
    matrix_busy_until: u64,
    image: HbmImage,
    channel: Channel,
    store_done: BTreeMap<u64, u64>,
    last_completion: u64,
    phase: Phase,
    first_matrix_issued: bool,
    report: ExecutionReport,
    trace: Option<Vec<TraceRow>>,
}

fn class_name(c: Class) -> &'static str {
    match c {
        Class::Matrix => "matrix",
        Class::Vector => "vector",
        Class::Scalar => "scalar",
        Class::Memory => "memory",
        Class::Control => "control",
    }
}

impl Machine {
    pub fn new(cfg: ArchConfig, image: HbmImage) -> Result<Machine> {
        cfg.validate()?;
        let budget = image.config.bytes_per_cycle(cfg.clock_ghz);
        let channel = Channel::new(budget, image.config.fixed_latency_cycles);
        let vrows = cfg.vector_sram_depth;
        let mrows = cfg.matrix_sram_depth;
        Ok(Machine {
            pc: 0,
            cycle: 0,
            halted: false,
            gpr: [0; 32],
            fpr: [0.0; 32],
            gpr_ready: [0; 32],
            fpr_ready: [0; 32],
            addr_base: [0; 32],
            addr_stride: [0; 32],
            scale_reg: 0,
            lut: LutFn::Exp,
            vsram: vec![0.0; vrows * cfg.vlen],
            vvalid: vec![false; vrows * cfg.vlen],
            vready: vec![0; vrows],
            vmem: vec![false; vrows],
            msram: MatrixSram::new(cfg.mlen, mrows),
            mready: vec![0; mrows],
            mmem: vec![false; mrows],
            int_mem: vec![0; cfg.int_sram_depth],
            fp_mem: vec![0.0; cfg.fp_sram_depth],
            fp_valid: vec![false; cfg.fp_sram_depth],
            acc: vec![0.0; cfg.mlen * cfg.blen],
            matrix_busy_until: 0,
            channel,
            image,
            store_done: BTreeMap::new(),
            last_completion: 0,
            phase: Phase::default(),
            first_matrix_issued: false,
            report: ExecutionReport::default(),
            trace: None,
            cfg,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn gpr(&self, i: usize) -> i64 {
        self.gpr[i]
    }

    pub fn fpr(&self, i: usize) -> f64 {
        self.fpr[i]
    }

    pub fn hbm(&self) -> &HbmImage {
        &self.image
    }

    pub fn matrix_sram(&mut self) -> &mut MatrixSram {
        &mut self.msram
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.trace() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn cast(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(MachineError::NonFinite { pc: self.pc });
        }
        let m = self.cfg.fp_setting.max_value();
        Ok(self.cfg.fp_setting.round_element(x.clamp(-m, m)))
    }

    /// Preload FP scratch SRAM (constants).
    pub fn load_fp(&mut self, addr: usize, values: &[f64]) -> Result<()> {
        if addr + values.len() > self.fp_mem.len() {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "fp sram", addr: (addr + values.len()) as i64 });
        }
        for (i, &v) in values.iter().enumerate() {
            self.fp_mem[addr + i] = self.cast(v)?;
            self.fp_valid[addr + i] = true;
        }
        Ok(())
    }

    /// Preload Vector SRAM elements, rounded to the FP setting.
    pub fn write_vector(&mut self, addr: usize, values: &[f64]) -> Result<()> {
        if addr + values.len() > self.vsram.len() {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "vector sram", addr: (addr + values.len()) as i64 });
        }
        for (i, &v) in values.iter().enumerate() {
            self.vsram[addr + i] = self.cast(v)?;
            self.vvalid[addr + i] = true;
        }
        Ok(())
    }

    pub fn read_vector(&self, addr: usize, n: usize) -> Result<Vec<f64>> {
        if addr + n > self.vsram.len() {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "vector sram", addr: (addr + n) as i64 });
        }
        if let Some(i) = (addr..addr + n).find(|&i| !self.vvalid[i]) {
            return Err(MachineError::Poison { pc: self.pc, what: "vector element", addr: i });
        }
        Ok(self.vsram[addr..addr + n].to_vec())
    }

    // ---- address helpers ----

    fn vrange(&self, addr: i64, n: usize) -> Result<std::ops::Range<usize>> {
        if addr < 0 || addr as usize + n > self.vsram.len() {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "vector sram", addr });
        }
        Ok(addr as usize..addr as usize + n)
    }

    fn vrow_addr(&self, addr: i64) -> Result<usize> {
        let r = self.vrange(addr, self.cfg.vlen)?;
        if r.start % self.cfg.vlen != 0 {
            return Err(MachineError::Misaligned { pc: self.pc, what: "vector row", addr });
        }
        Ok(r.start)
    }

    fn rows_of(&self, r: &std::ops::Range<usize>) -> std::ops::Range<usize> {
        r.start / self.cfg.vlen..r.end.div_ceil(self.cfg.vlen)
    }

    fn vread(&mut self, r: std::ops::Range<usize>) -> Result<Vec<f64>> {
        if let Some(i) = r.clone().find(|&i| !self.vvalid[i]) {
            return Err(MachineError::Poison { pc: self.pc, what: "vector element", addr: i });
        }
        self.report.vector_sram_reads += r.len() as u64;
        Ok(self.vsram[r].to_vec())
    }

    fn vwrite(&mut self, start: usize, values: &[f64], ready: u64, from_mem: bool) -> Result<()> {
        for (i, &v) in values.iter().enumerate() {
            self.vsram[start + i] = self.cast(v)?;
            self.vvalid[start + i] = true;
        }
        for row in self.rows_of(&(start..start + values.len())) {
            self.vready[row] = ready;
            self.vmem[row] = from_mem;
        }
        self.report.vector_sram_writes += values.len() as u64;
        self.last_completion = self.last_completion.max(ready);
        Ok(())
    }

    /// Matrix operand rows touched by a compute instruction and whether the
    /// view is transposed.
    fn matrix_rows(&self, m: Mnemonic, addr: i64) -> Result<(usize, usize, Vec<usize>)> {
        let mlen = self.cfg.mlen;
        let tile_sz = (mlen * mlen) as i64;
        if addr < 0 {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "matrix sram", addr });
        }
        let tile = (addr / tile_sz) as usize;
        let off = (addr % tile_sz) as usize;
        if tile >= self.msram.tiles() {
            return Err(MachineError::OutOfRange { pc: self.pc, what: "matrix sram", addr });
        }
        if off >= mlen || off % self.cfg.blen != 0 {
            return Err(MachineError::Misaligned { pc: self.pc, what: "matrix tile offset", addr });
        }
        let rows = if matches!(m, Mnemonic::M_TMM | Mnemonic::M_TMV) {
            (tile * mlen + off..tile * mlen + off + self.cfg.blen).collect()
        } else {
            (tile * mlen..(tile + 1) * mlen).collect()
        };
        Ok((tile, off, rows))
    }

    fn a_rows(&self, m: Mnemonic) -> usize {
        if matches!(m, Mnemonic::M_MV | Mnemonic::M_TMV) {
            1
        } else {
            self.cfg.blen
        }
    }

    fn need_vrows(&self, rd: &mut Ready, r: std::ops::Range<usize>) {
        for row in self.rows_of(&r) {
            if self.vmem[row] {
                rd.mem = rd.mem.max(self.vready[row]);
            } else {
                rd.other = rd.other.max(self.vready[row]);
            }
        }
    }

    fn need_g(&self, rd: &mut Ready, regs: &[u8]) {
        for &r in regs {
            rd.other = rd.other.max(self.gpr_ready[r as usize]);
        }
    }

    fn need_f(&self, rd: &mut Ready, regs: &[u8]) {
        for &r in regs {
            rd.other = rd.other.max(self.fpr_ready[r as usize]);
        }
    }

    fn region_base(&self, a: u8) -> u64 {
        self.addr_base[a as usize] as u64
    }

    /// Earliest issue constraints for `inst` given current state.
    fn readiness(&self, inst: &Instruction) -> Result<Ready> {
        use Mnemonic::*;
        let mut r = Ready::default();
        let (rd, rs1, rs2) = (inst.rd, inst.rs1, inst.rs2);
        let g = |i: u8| self.gpr[i as usize];
        let vlen = self.cfg.vlen;
        match inst.mnemonic {
            M_MM | M_TMM | M_MV | M_TMV => {
                self.need_g(&mut r, &[rs1, rs2]);
                r.other = r.other.max(self.matrix_busy_until);
                if self.gpr_ready[rs1 as usize] <= self.cycle && self.gpr_ready[rs2 as usize] <= self.cycle {
                    for i in 0..self.a_rows(inst.mnemonic) {
                        let range = self.vrange(g(rs1) + (i * self.cfg.mlen) as i64, self.cfg.mlen)?;
                        self.need_vrows(&mut r, range);
                    }
                    let (_, _, rows) = self.matrix_rows(inst.mnemonic, g(rs2))?;
                    for row in rows {
                        if self.mmem[row] {
                            r.mem = r.mem.max(self.mready[row]);
                        } else {
                            r.other = r.other.max(self.mready[row]);
                        }
                    }
                }
            }
            M_MM_WO | M_MV_WO => {
                self.need_g(&mut r, &[rd]);
                r.other = r.other.max(self.matrix_busy_until);
                let n = if inst.mnemonic == M_MM_WO { self.cfg.blen } else { 1 };
                for i in 0..n {
                    let range = self.vrange(g(rd) + inst.imm as i64 + (i * self.cfg.mlen) as i64, self.cfg.blen)?;
                    self.need_vrows(&mut r, range);
                }
            }
            V_ADD_VV | V_SUB_VV | V_MUL_VV => {
                self.need_g(&mut r, &[rd, rs1, rs2]);
                for a in [g(rd), g(rs1), g(rs2)] {
                    let range = self.vrange(a, vlen)?;
                    self.need_vrows(&mut r, range);
                }
            }
            V_ADD_VF | V_SUB_VF | V_MUL_VF => {
                self.need_g(&mut r, &[rd, rs1]);
                self.need_f(&mut r, &[rs2]);
                for a in [g(rd), g(rs1)] {
                    let range = self.vrange(a, vlen)?;
                    self.need_vrows(&mut r, range);
                }
            }
            V_EXP_V | V_REC_V | V_ROTATION_EN | V_INV_ROTATION_EN => {
                self.need_g(&mut r, &[rd, rs1]);
                for a in [g(rd), g(rs1)] {
                    let range = self.vrange(a, vlen)?;
                    self.need_vrows(&mut r, range);
                }
            }
            V_LD_F => {
                self.need_g(&mut r, &[rd]);
                self.need_f(&mut r, &[rs1]);
                let range = self.vrange(g(rd), vlen)?;
                self.need_vrows(&mut r, range);
            }
            V_RED_SUM | V_RED_MAX => {
                self.need_g(&mut r, &[rs1]);
                self.need_f(&mut r, &[rd]);
                let range = self.vrange(g(rs1), vlen)?;
                self.need_vrows(&mut r, range);
            }
            S_ADD_INT | S_SUB_INT | S_MUL_INT | S_DIV_INT => self.need_g(&mut r, &[rd, rs1, rs2]),
            S_ADDI_INT | S_LD_INT | S_ST_INT => self.need_g(&mut r, &[rd, rs1]),
            S_LUI_INT => self.need_g(&mut r, &[rd]),
            S_ADD_FP | S_SUB_FP | S_MUL_FP | S_MAX_FP => self.need_f(&mut r, &[rd, rs1, rs2]),
            S_EXP_FP | S_LUT_FP => self.need_f(&mut r, &[rd, rs1]),
            S_LD_FP | S_ST_FP => {
                self.need_f(&mut r, &[rd]);
                self.need_g(&mut r, &[rs1]);
            }
            S_NOP | C_BREAK => {}
            H_PREFETCH_M | H_PREFETCH_V => {
                self.need_g(&mut r, &[rd, rs2]);
                if let Some(&done) = self.store_done.get(&self.region_base(rs1)) {
                    r.mem = r.mem.max(done);
                }
                if inst.mnemonic == H_PREFETCH_V && self.gpr_ready[rd as usize] <= self.cycle {
                    let n = inst.imm.max(0) as usize * vlen;
                    let range = self.vrange(g(rd), n)?;
                    for row in self.rows_of(&range) {
                        if !self.vmem[row] {
                            r.other = r.other.max(self.vready[row]);
                        }
                    }
                }
            }
            H_STORE_V => {
                self.need_g(&mut r, &[rd, rs2]);
                if self.gpr_ready[rd as usize] <= self.cycle {
                    let range = self.vrange(g(rd), inst.imm.max(0) as usize * vlen)?;
                    self.need_vrows(&mut r, range);
                }
            }
            C_SET_ADDR_REG => self.need_g(&mut r, &[rs1, rs2]),
            C_SET_SCALE_REG | C_SET_LUT_REG => self.need_g(&mut r, &[rd]),
        }
        Ok(r)
    }

    /// Advance by one cycle: issue the instruction at `pc` or stall.
    pub fn step(&mut self, program: &Program) -> Result<StepOutcome> {
        if self.halted {
            return Ok(StepOutcome::Halted);
        }
        let inst = *program.instructions.get(self.pc).ok_or(MachineError::PcOutOfRange(self.pc))?;
        let ready = self.readiness(&inst)?;
        if ready.at(self.cycle) > self.cycle {
            let mem = u64::from(ready.memory_part(self.cycle) > 0 && self.cycle >= ready.other);
            self.count_stall(&inst, 1, mem);
            self.cycle += 1;
            return Ok(StepOutcome::Stalled);
        }
        self.issue(inst, 0)?;
        Ok(if self.halted { StepOutcome::Halted } else { StepOutcome::Issued })
    }

    fn count_stall(&mut self, inst: &Instruction, cycles: u64, mem: u64) {
        self.report.stalls += cycles;
        self.report.memory_stalls += mem;
        if inst.class() == Class::Matrix {
            if self.first_matrix_issued {
                self.report.matrix_memory_stalls += mem;
            } else {
                self.report.matrix_memory_stalls_fill += mem;
            }
        }
    }

    /// Run to `C_BREAK`. Register readiness can gate the operand addresses,
    /// so stall intervals are resolved in at most two jumps.
    pub fn run(&mut self, program: &Program, max_cycles: u64) -> Result<ExecutionReport> {
        while !self.halted {
            if self.cycle > max_cycles {
                let mut rep = self.report();
                rep.halted = false;
                return Err(MachineError::Timeout(Box::new(rep)));
            }
            let inst = *program.instructions.get(self.pc).ok_or(MachineError::PcOutOfRange(self.pc))?;
            let mut waited = 0;
            loop {
                let ready = self.readiness(&inst)?;
                let at = ready.at(self.cycle);
                if at == self.cycle {
                    break;
                }
                let mem = ready.memory_part(self.cycle);
                self.count_stall(&inst, at - self.cycle, mem);
                waited += at - self.cycle;
                self.cycle = at;
            }
            self.issue(inst, waited)?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> ExecutionReport {
        let mut r = self.report.clone();
        r.cycles = self.cycle.max(if self.halted { self.last_completion } else { 0 });
        let peak = self.cfg.peak_macs_per_cycle() as f64;
        r.utilization = if r.cycles == 0 { 0.0 } else { r.mac_ops as f64 / (r.cycles as f64 * peak) };
        let (mut sc, mut sm) = (r.streaming_cycles, r.streaming_macs);
        if self.phase.open {
            sc += self.phase.end - self.phase.start;
            sm += self.phase.macs;
        }
        r.streaming_cycles = sc;
        r.streaming_macs = sm;
        r.streaming_utilization = if sc == 0 { 0.0 } else { sm as f64 / (sc as f64 * peak) };
        r.matrix_sram_reads = self.msram.reads;
        r.matrix_sram_writes = self.msram.writes;
        r.bank_conflicts = self.msram.bank_conflicts;
        r.halted = self.halted;
        r
    }

    fn issue(&mut self, inst: Instruction, waited: u64) -> Result<()> {
        let t = self.cycle;
        self.execute(&inst, t)?;
        self.report.instructions += 1;
        if let Some(tr) = self.trace.as_mut() {
            tr.push(TraceRow {
                cycle: t,
                pc: self.pc,
                mnemonic: inst.mnemonic.to_string(),
                stall: waited,
                unit: class_name(inst.class()).to_string(),
            });
        }
        if inst.class() == Class::Matrix {
            self.first_matrix_issued = true;
        }
        self.pc += 1;
        self.cycle = t + 1;
        Ok(())
    }

    fn set_g(&mut self, r: u8, v: i64, ready: u64) {
        if r != 0 {
            self.gpr[r as usize] = v;
            self.gpr_ready[r as usize] = ready;
        }
    }

    fn set_f(&mut self, r: u8, v: f64, ready: u64) -> Result<()> {
        self.fpr[r as usize] = self.cast(v)?;
        self.fpr_ready[r as usize] = ready;
        self.last_completion = self.last_completion.max(ready);
        Ok(())
    }

    fn close_phase(&mut self) {
        if self.phase.open {
            self.report.streaming_cycles += self.phase.end - self.phase.start;
            self.report.streaming_macs += self.phase.macs;
            self.phase.open = false;
        }
    }

    fn execute(&mut self, inst: &Instruction, t: u64) -> Result<()> {
        use Mnemonic::*;
        let pc = self.pc;
        let (rd, rs1, rs2, imm) = (inst.rd, inst.rs1, inst.rs2, inst.imm as i64);
        let g = |m: &Machine, i: u8| m.gpr[i as usize];
        let vlen = self.cfg.vlen;
        let lat_v = t + self.cfg.latency.vector;
        let lat_s = t + self.cfg.latency.scalar;
        match inst.mnemonic {
            M_MM | M_TMM | M_MV | M_TMV => {
                if rd != 0 {
                    return Err(MachineError::Bad { pc, msg: "accumulator selector rd must be x0".into() });
                }
                self.matrix_compute(inst.mnemonic, g(self, rs1), g(self, rs2))?;
                let busy = self.cfg.blen as u64;
                let macs = (self.a_rows(inst.mnemonic) * self.cfg.mlen * self.cfg.blen) as u64;
                self.report.mac_ops += macs;
                self.matrix_busy_until = t + busy;
                self.last_completion = self.last_completion.max(t + busy);
                if !self.phase.open {
                    self.phase = Phase { open: true, start: t, end: t, macs: 0 };
                }
                self.phase.end = t + busy;
                self.phase.macs += macs;
            }
            M_MM_WO | M_MV_WO => {
                self.close_phase();
                let rows = if inst.mnemonic == M_MM_WO { self.cfg.blen } else { 1 };
                let ready = t + self.cfg.writeout_latency();
                let blen = self.cfg.blen;
                let s = self.cfg.subarrays();
                for i in 0..rows {
                    let start = self.vrange(g(self, rd) + imm + (i * self.cfg.mlen) as i64, blen)?.start;
                    let vals: Vec<f64> = (0..blen)
                        .map(|n| {
                            let mut parts: Vec<f64> = (0..s).map(|j| self.acc[(j * blen + i) * blen + n]).collect();
                            adder_tree(&mut parts)
                        })
                        .collect();
                    self.vwrite(start, &vals, ready, false)?;
                }
                self.acc.iter_mut().for_each(|a| *a = 0.0);
                self.matrix_busy_until = ready;
            }
            V_ADD_VV | V_SUB_VV | V_MUL_VV => {
                let a = self.vrow_addr(g(self, rs1))?;
                let b = self.vrow_addr(g(self, rs2))?;
                let d = self.vrow_addr(g(self, rd))?;
                let x = self.vread(a..a + vlen)?;
                let y = self.vread(b..b + vlen)?;
                let out: Vec<f64> = x
                    .iter()
                    .zip(&y)
                    .map(|(p, q)| match inst.mnemonic {
                        V_ADD_VV => p + q,
                        V_SUB_VV => p - q,
                        _ => p * q,
                    })
                    .collect();
                self.vwrite(d, &out, lat_v, false)?;
            }
            V_ADD_VF | V_SUB_VF | V_MUL_VF => {
                let a = self.vrow_addr(g(self, rs1))?;
                let d = self.vrow_addr(g(self, rd))?;
                let f = self.fpr[rs2 as usize];
                let x = self.vread(a..a + vlen)?;
                let out: Vec<f64> = x
                    .iter()
                    .map(|p| match inst.mnemonic {
                        V_ADD_VF => p + f,
                        V_SUB_VF => p - f,
                        _ => p * f,
                    })
                    .collect();
                self.vwrite(d, &out, lat_v, false)?;
            }
            V_EXP_V | V_REC_V | V_ROTATION_EN | V_INV_ROTATION_EN => {
                let a = self.vrow_addr(g(self, rs1))?;
                let d = self.vrow_addr(g(self, rd))?;
                let mut x = self.vread(a..a + vlen)?;
                match inst.mnemonic {
                    V_EXP_V => x.iter_mut().for_each(|v| *v = v.exp()),
                    V_REC_V => x.iter_mut().for_each(|v| *v = 1.0 / *v),
                    _ => fwht_in_place(&mut x).map_err(|e| MachineError::Bad { pc, msg: e.to_string() })?,
                }
                self.vwrite(d, &x, lat_v, false)?;
            }
            V_LD_F => {
                let d = self.vrow_addr(g(self, rd))?;
                let f = self.fpr[rs1 as usize];
                self.vwrite(d, &vec![f; vlen], lat_v, false)?;
            }
            V_RED_SUM | V_RED_MAX => {
                let a = self.vrow_addr(g(self, rs1))?;
                let x = self.vread(a..a + vlen)?;
                let v = if inst.mnemonic == V_RED_SUM {
                    x.iter().sum()
                } else {
                    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                self.set_f(rd, v, lat_v)?;
            }
            S_ADD_INT => self.set_g(rd, g(self, rs1).wrapping_add(g(self, rs2)), lat_s),
            S_ADDI_INT => self.set_g(rd, g(self, rs1).wrapping_add(imm), lat_s),
            S_SUB_INT => self.set_g(rd, g(self, rs1).wrapping_sub(g(self, rs2)), lat_s),
            S_LUI_INT => self.set_g(rd, imm << crate::isa::IMM_BITS, lat_s),
            S_MUL_INT => self.set_g(rd, g(self, rs1).wrapping_mul(g(self, rs2)), lat_s),
            S_DIV_INT => {
                let d = g(self, rs2);
                if d == 0 {
                    return Err(MachineError::DivideByZero { pc });
                }
                self.set_g(rd, g(self, rs1).wrapping_div(d), lat_s)
            }
            S_LD_INT | S_ST_INT => {
                let addr = g(self, rs1) + imm;
                if addr < 0 || addr as usize >= self.int_mem.len() {
                    return Err(MachineError::OutOfRange { pc, what: "int sram", addr });
                }
                if inst.mnemonic == S_LD_INT {
                    let v = self.int_mem[addr as usize];
                    self.set_g(rd, v, lat_s);
                } else {
                    self.int_mem[addr as usize] = g(self, rd);
                }
            }
            S_ADD_FP | S_SUB_FP | S_MUL_FP | S_MAX_FP => {
                let (a, b) = (self.fpr[rs1 as usize], self.fpr[rs2 as usize]);
                let v = match inst.mnemonic {
                    S_ADD_FP => a + b,
                    S_SUB_FP => a - b,
                    S_MUL_FP => a * b,
                    _ => a.max(b),
                };
                self.set_f(rd, v, lat_s)?;
            }
            S_EXP_FP => self.set_f(rd, self.fpr[rs1 as usize].exp(), lat_s)?,
            S_LUT_FP => self.set_f(rd, self.lut.apply(self.fpr[rs1 as usize]), lat_s)?,
            S_LD_FP | S_ST_FP => {
                let addr = g(self, rs1) + imm;
                if addr < 0 || addr as usize >= self.fp_mem.len() {
                    return Err(MachineError::OutOfRange { pc, what: "fp sram", addr });
                }
                let a = addr as usize;
                if inst.mnemonic == S_LD_FP {
                    if !self.fp_valid[a] {
                        return Err(MachineError::Poison { pc, what: "fp sram", addr: a });
                    }
                    self.set_f(rd, self.fp_mem[a], lat_s)?;
                } else {
                    self.fp_mem[a] = self.fpr[rd as usize];
                    self.fp_valid[a] = true;
                }
            }
            S_NOP => {}
            H_PREFETCH_M | H_PREFETCH_V | H_STORE_V => self.memory(inst, t)?,
            C_SET_ADDR_REG => {
                self.addr_base[rd as usize] = g(self, rs1);
                self.addr_stride[rd as usize] = g(self, rs2);
            }
            C_SET_SCALE_REG => self.scale_reg = g(self, rd),
            C_SET_LUT_REG => {
                self.lut = LutFn::from_index(g(self, rd))
                    .ok_or_else(|| MachineError::Bad { pc, msg: format!("no LUT function {}", g(self, rd)) })?;
            }
            C_BREAK => {
                self.halted = true;
                self.close_phase();
            }
        }
        Ok(())
    }

    fn matrix_compute(&mut self, m: Mnemonic, a_addr: i64, b_addr: i64) -> Result<()> {
        let pc = self.pc;
        let (mlen, blen) = (self.cfg.mlen, self.cfg.blen);
        let rows_a = self.a_rows(m);
        let mut a = Vec::with_capacity(rows_a * mlen);
        for i in 0..rows_a {
            let r = self.vrange(a_addr + (i * mlen) as i64, mlen)?;
            let mut row = self.vread(r)?;
            fake_quantize_row(&mut row, &self.cfg.act_fmt, 1.0)?;
            a.extend(row);
        }
        let (tile, off, rows) = self.matrix_rows(m, b_addr)?;
        for &row in &rows {
            match self.msram.row_format(row) {
                Some(f) if f == self.cfg.weight_fmt || f == self.cfg.kv_fmt => {}
                _ if !self.msram.row_valid(row) => {
                    return Err(MachineError::Poison { pc, what: "matrix row", addr: row });
                }
                f => {
                    let found = f.map_or("unformatted data".to_string(), |f| f.to_string());
                    return Err(MachineError::FormatMismatch { pc, row, found });
                }
            }
        }
        // bt[n][k] = B[k][n]
        let mut bt = Vec::with_capacity(blen * mlen);
        for n in 0..blen {
            let v = if matches!(m, Mnemonic::M_TMM | Mnemonic::M_TMV) {
                self.msram.read_row(tile * mlen + off + n)
            } else {
                self.msram.read_col(tile, off + n)
            };
            bt.extend(v.ok_or(MachineError::Poison { pc, what: "matrix row", addr: tile * mlen + off + n })?);
        }
        for j in 0..self.cfg.subarrays() {
            let ks = j * blen..(j + 1) * blen;
            for i in 0..rows_a {
                let ar = &a[i * mlen..(i + 1) * mlen];
                for n in 0..blen {
                    let br = &bt[n * mlen..(n + 1) * mlen];
                    let s: f64 = ks.clone().map(|k| ar[k] * br[k]).sum();
                    self.acc[(j * blen + i) * blen + n] += s;
                }
            }
        }
        Ok(())
    }

    fn memory(&mut self, inst: &Instruction, t: u64) -> Result<()> {
        use Mnemonic::*;
        let pc = self.pc;
        let count = inst.imm as usize;
        if count == 0 {
            return Err(MachineError::Bad { pc, msg: "transfer of zero rows".into() });
        }
        let base = self.region_base(inst.rs1);
        let region = self.image.region_at(base)?.clone();
        if region.format.is_mx() && self.scale_reg != region.scale_offset as i64 {
            return Err(MachineError::ScaleMismatch { pc, reg: self.scale_reg, region: region.name, want: region.scale_offset });
        }
        let stride = self.addr_stride[inst.rs1 as usize];
        let off0 = self.gpr[inst.rs2 as usize];
        let dst = self.gpr[inst.rd as usize];
        let width = if inst.mnemonic == H_PREFETCH_M { self.cfg.mlen } else { self.cfg.vlen };
        let offsets: Vec<i64> = (0..count as i64).map(|i| off0 + i * stride).collect();
        if offsets.iter().any(|&o| o < 0) {
            return Err(MachineError::OutOfRange { pc, what: "hbm region", addr: off0 });
        }
        let bytes = vec![region.transfer_bytes(width as u64); count];
        let total: u64 = bytes.iter().sum();
        self.report.hbm_max_transfer_bytes = self.report.hbm_max_transfer_bytes.max(total);
        *self.report.hbm_region_bytes.entry(region.name.clone()).or_default() += total;
        match inst.mnemonic {
            H_PREFETCH_M => {
                if dst < 0 || dst as usize + count > self.msram.depth() {
                    return Err(MachineError::OutOfRange { pc, what: "matrix sram", addr: dst });
                }
                let d = dst as usize;
                if let Some(row) = (d..d + count).find(|&r| self.mmem[r] && self.mready[r] > t) {
                    return Err(MachineError::InFlightOverlap { pc, row });
                }
                let ready = self.channel.submit(t, &bytes);
                self.report.hbm_read_bytes += total;
                for (i, &o) in offsets.iter().enumerate() {
                    let vals = self.image.read_elements(&region, o as u64, width as u64)?;
                    self.msram
                        .write_row(d + i, &vals, Some(region.format))
                        .map_err(|msg| MachineError::Bad { pc, msg })?;
                    self.mready[d + i] = ready[i];
                    self.mmem[d + i] = true;
                    self.last_completion = self.last_completion.max(ready[i]);
                }
            }
            H_PREFETCH_V => {
                let first = self.vrow_addr(dst)?;
                let range = self.vrange(dst, count * width)?;
                if let Some(row) = self.rows_of(&range).find(|&r| self.vmem[r] && self.vready[r] > t) {
                    return Err(MachineError::InFlightOverlap { pc, row });
                }
                let ready = self.channel.submit(t, &bytes);
                self.report.hbm_read_bytes += total;
                for (i, &o) in offsets.iter().enumerate() {
                    let vals = self.image.read_elements(&region, o as u64, width as u64)?;
                    self.vwrite(first + i * width, &vals, ready[i], true)?;
                }
            }
            _ => {
                let first = self.vrow_addr(dst)?;
                self.vrange(dst, count * width)?;
                let ready = self.channel.submit(t, &bytes);
                self.report.hbm_write_bytes += total;
                for (i, &o) in offsets.iter().enumerate() {
                    let vals = self.vread(first + i * width..first + (i + 1) * width)?;
                    self.image.write_elements(&region, o as u64, &vals)?;
                }
                let done = *ready.last().unwrap();
                let e = self.store_done.entry(base).or_default();
                *e = (*e).max(done);
                self.last_completion = self.last_completion.max(done);
            }
        }
        Ok(())
    }
}

/// Pairwise reduction in a fixed order.
fn adder_tree(v: &mut Vec<f64>) -> f64 {
    while v.len() > 1 {
        let next: Vec<f64> = v.chunks(2).map(|c| c.iter().sum()).collect();
        *v = next;
    }
    v.first().copied().unwrap_or(0.0)
}

impl fmt::Display for ExecutionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cycles              {}", self.cycles)?;
        writeln!(f, "instructions        {}", self.instructions)?;
        writeln!(f, "stalls              {} (memory {})", self.stalls, self.memory_stalls)?;
        writeln!(f, "mac ops             {}", self.mac_ops)?;
        writeln!(f, "utilization         {:.4}", self.utilization)?;
        writeln!(f, "streaming util      {:.4}", self.streaming_utilization)?;
        writeln!(f, "hbm read/write      {} / {} bytes", self.hbm_read_bytes, self.hbm_write_bytes)?;
        write!(f, "bank conflicts      {}", self.bank_conflicts)
    }
}

/// Closed-form cycle model of a weight-stationary square `side × side`
/// array running an `m × k` by `k × n` GEMM. Weight tiles load one row per
/// cycle, double-buffered against compute, plus one pipeline fill/drain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleEstimate {
    pub cycles: u64,
    pub macs: u64,
    pub pes: u64,
    pub utilization: f64,
}

pub fn square_array_gemm(m: u64, k: u64, n: u64, side: u64) -> CycleEstimate {
    let tiles = k.div_ceil(side) * n.div_ceil(side);
    let cycles = tiles * m.max(side) + 2 * side;
    let macs = m * k * n;
    let pes = side * side;
    CycleEstimate { cycles, macs, pes, utilization: macs as f64 / (cycles as f64 * pes as f64) }
}

/// Same GEMM on the flattened array, compute-bound: every BLEN×BLEN output
/// tile streams K/MLEN instructions of BLEN cycles and one write-out.
pub fn flattened_array_gemm(m: u64, k: u64, n: u64, cfg: &ArchConfig) -> CycleEstimate {
    let (b, ml) = (cfg.blen as u64, cfg.mlen as u64);
    let tiles = m.div_ceil(b) * n.div_ceil(b);
    let cycles = tiles * (k.div_ceil(ml) * b + cfg.writeout_latency());
    let pes = b * ml;
    let macs = m * k * n;
    CycleEstimate { cycles, macs, pes, utilization: macs as f64 / (cycles as f64 * pes as f64) }
}
