//! Analytic cost of a GEMM schedule and the schedule search built on it.

use serde::{Deserialize, Serialize};

use super::{CompileError, GemmSchedule, LoopOrder};
use crate::hbm::HbmConfig;
use crate::machine::ArchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub cycles: f64,
    pub compute_cycles: f64,
    pub memory_cycles: f64,
    pub hbm_bytes: u64,
    pub bound: Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

fn row_bytes(k: usize, arch: &ArchConfig) -> u64 {
    let f = arch.weight_fmt;
    (k as u64 * f.element_bits as u64).div_ceil(8) + k as u64 / f.block_size as u64
}

/// `max(flops / peak, bytes / bandwidth)` for one schedule.
pub fn estimate(shape: GemmShape, sched: &GemmSchedule, arch: &ArchConfig, hbm: &HbmConfig) -> Estimate {
    let mt = shape.m.div_ceil(arch.blen) as u64;
    let passes = match sched.loop_order {
        LoopOrder::NOuter => 1,
        LoopOrder::MOuter => mt,
    };
    let mut bytes = passes * shape.n as u64 * row_bytes(shape.k, arch);
    let act = (arch.fp_setting.element_bits as u64).div_ceil(8);
    bytes += shape.m as u64 * shape.k as u64 * act;
    if !sched.fuse_output {
        bytes += 2 * shape.m as u64 * shape.n as u64 * act;
    }
    let flops = 2.0 * (mt * arch.blen as u64) as f64 * shape.k as f64 * shape.n as f64;
    let compute = flops / (2.0 * arch.mlen as f64 * arch.blen as f64);
    let memory = bytes as f64 / hbm.bytes_per_cycle(arch.clock_ghz) as f64;
    let bound = if memory > compute { Bound::Memory } else { Bound::Compute };
    Estimate { cycles: compute.max(memory), compute_cycles: compute, memory_cycles: memory, hbm_bytes: bytes, bound }
}

/// Infeasibility reasons for a schedule, empty if it fits on chip.
pub fn feasibility(shape: GemmShape, sched: &GemmSchedule, arch: &ArchConfig) -> Vec<String> {
    let mut v = Vec::new();
    let (b, ml) = (arch.blen, arch.mlen);
    if shape.k % ml != 0 || shape.n % b != 0 {
        v.push(format!("K {} must be a multiple of MLEN and N {} of BLEN", shape.k, shape.n));
        return v;
    }
    let ring = shape.k / ml + sched.prefetch_distance;
    let tiles = ring.div_ceil(ml / b);
    let have = arch.matrix_sram_depth / ml;
    if tiles > have {
        v.push(format!("prefetch ring needs {tiles} matrix tiles, have {have}"));
    }
    let rows_pad = shape.m.div_ceil(b) * b;
    let vrows = rows_pad * (shape.k / ml + shape.n.div_ceil(ml));
    if vrows > arch.vector_sram_depth {
        v.push(format!("activations need {vrows} vector rows, have {}", arch.vector_sram_depth));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSchedule {
    pub schedule: GemmSchedule,
    pub estimate: Estimate,
}

/// Enumerate loop order × fusion × prefetch distance, drop infeasible
/// points and rank by estimated cycles (grid order breaks ties).
pub fn schedule_search(shape: GemmShape, arch: &ArchConfig, hbm: &HbmConfig, distances: &[usize]) -> Result<Vec<RankedSchedule>, CompileError> {
    let mut out = Vec::new();
    let mut reasons = Vec::new();
    for loop_order in [LoopOrder::NOuter, LoopOrder::MOuter] {
        for fuse_output in [true, false] {
            for &prefetch_distance in distances {
                let s = GemmSchedule { loop_order, prefetch_distance, fuse_output };
                let bad = feasibility(shape, &s, arch);
                if bad.is_empty() {
                    out.push(RankedSchedule { schedule: s, estimate: estimate(shape, &s, arch, hbm) });
                } else {
                    reasons.extend(bad);
                }
            }
        }
    }
    if out.is_empty() {
        reasons.dedup();
        return Err(CompileError::Constraint(reasons));
    }
    out.sort_by(|a, b| a.estimate.cycles.total_cmp(&b.estimate.cycles));
    Ok(out)
}
