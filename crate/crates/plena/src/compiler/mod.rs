//! Lowering of GEMMs, FlashAttention, pointwise ops and whole decoder
//! layers into straight-line programs plus an HBM image.
//!
//! Activations live in Vector SRAM in a chunked layout of width MLEN:
//! element (m, k) sits at `base + (k / MLEN) * rows_pad * MLEN + m * MLEN +
//! k % MLEN`, so the BLEN rows one matrix instruction reads are MLEN apart.
//! Weights stay in HBM as `out × in` MX matrices and stream through a ring
//! of BLEN-row slots in Matrix SRAM, consumed through the transposed view.

pub mod emit;
pub mod reference;
pub mod roofline;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{DataFormat, FormatError, MXTensor};
use crate::hbm::{HbmConfig, HbmError, HbmImage, Region};
use crate::isa::{IsaError, LutFn, Mnemonic::*, Program};
use crate::machine::{ArchConfig, ExecutionReport, Machine, MachineError};

use emit::Emitter;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("constraints violated: {}", .0.join("; "))]
    Constraint(Vec<String>),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Hbm(#[from] HbmError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CompileError>;

fn shape<T>(msg: String) -> Result<T> {
    Err(CompileError::Shape(msg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub batch: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.hidden != self.heads * self.head_dim {
            v.push(format!("hidden {} != heads {} x head_dim {}", self.hidden, self.heads, self.head_dim));
        }
        if self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            v.push(format!("heads {} not a multiple of kv_heads {}", self.heads, self.kv_heads));
        }
        if self.head_dim % 2 != 0 {
            v.push("head_dim must be even for rotary embedding".into());
        }
        if self.batch != 1 {
            v.push("only batch 1 is lowered".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(CompileError::Constraint(v))
        }
    }

    pub fn tiny() -> ModelSpec {
        ModelSpec { hidden: 256, layers: 2, heads: 4, kv_heads: 2, head_dim: 64, ffn_dim: 512, vocab: 256, max_seq: 128, batch: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopOrder {
    /// Output columns outer: each weight slice is fetched once.
    NOuter,
    /// Output rows outer: weights are re-streamed per row tile.
    MOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmSchedule {
    pub loop_order: LoopOrder,
    /// Weight slices (BLEN rows × MLEN) requested ahead of their first use.
    pub prefetch_distance: usize,
    /// Keep the output on chip; otherwise it round-trips through HBM.
    pub fuse_output: bool,
}

impl GemmSchedule {
    pub fn streaming(prefetch_distance: usize) -> GemmSchedule {
        GemmSchedule { loop_order: LoopOrder::NOuter, prefetch_distance, fuse_output: true }
    }
}

/// Smallest distance that covers one slice's latency with the matrix
/// work of the slices in front of it: `ceil((L + ceil(bytes/budget)) / BLEN)`.
pub fn auto_prefetch_distance(arch: &ArchConfig, hbm: &HbmConfig) -> usize {
    let budget = hbm.bytes_per_cycle(arch.clock_ghz);
    let f = arch.weight_fmt;
    let row = (arch.mlen as u64 * f.element_bits as u64).div_ceil(8) + arch.mlen as u64 / f.block_size as u64;
    let unit = row * arch.blen as u64;
    let t = hbm.fixed_latency_cycles + unit.div_ceil(budget);
    t.div_ceil(arch.blen as u64) as usize
}

/// Activation tensor in Vector SRAM (chunked layout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTensor {
    pub base: usize,
    pub rows: usize,
    pub rows_pad: usize,
    pub cols: usize,
    pub mlen: usize,
}

impl VTensor {
    pub fn chunks(&self) -> usize {
        self.cols.div_ceil(self.mlen)
    }

    pub fn len(&self) -> usize {
        self.chunks() * self.rows_pad * self.mlen
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn addr(&self, m: usize, k: usize) -> usize {
        self.base + (k / self.mlen) * self.rows_pad * self.mlen + m * self.mlen + k % self.mlen
    }

    /// Row-major `rows_pad × chunks*mlen` data reordered chunk-major.
    pub fn to_chunked(&self, data: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for m in 0..self.rows {
            for k in 0..self.cols {
                out[self.addr(m, k) - self.base] = data[m * self.cols + k];
            }
        }
        out
    }
}

/// A compiled program with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub program: Program,
    pub image: HbmImage,
    pub arch: ArchConfig,
    pub fp_init: Vec<f64>,
    pub outputs: BTreeMap<String, VTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Package {
    arch: ArchConfig,
    fp_init: Vec<f64>,
    outputs: BTreeMap<String, VTensor>,
}

impl Compiled {
    pub fn machine(&self) -> Result<Machine> {
        let mut m = Machine::new(self.arch.clone(), self.image.clone())?;
        m.load_fp(0, &self.fp_init)?;
        Ok(m)
    }

    pub fn simulate(&self, max_cycles: u64) -> Result<(ExecutionReport, Machine)> {
        let mut m = self.machine()?;
        let rep = m.run(&self.program, max_cycles)?;
        Ok((rep, m))
    }

    /// Row-major `rows × cols` contents of a named output.
    pub fn read_output(&self, m: &Machine, name: &str) -> Result<Vec<f64>> {
        let t = self.outputs.get(name).ok_or_else(|| CompileError::Shape(format!("no output `{name}`")))?;
        let mut out = Vec::with_capacity(t.rows * t.cols);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.push(m.read_vector(t.addr(r, c), 1)?[0]);
            }
        }
        Ok(out)
    }

    /// Writes `program.plsm`, `image.json` + `image.bin` and `package.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("program.plsm"))?;
        self.program.write_to(&mut f)?;
        self.image.save(dir, "image")?;
        let pkg = Package { arch: self.arch.clone(), fp_init: self.fp_init.clone(), outputs: self.outputs.clone() };
        std::fs::write(dir.join("package.json"), serde_json::to_string_pretty(&pkg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Compiled> {
        let program = Program::read_from(&mut std::fs::File::open(dir.join("program.plsm"))?)?;
        let image = HbmImage::load(dir, "image")?;
        let pkg: Package = serde_json::from_str(&std::fs::read_to_string(dir.join("package.json"))?)?;
        Ok(Compiled { program, image, arch: pkg.arch, fp_init: pkg.fp_init, outputs: pkg.outputs })
    }
}

// fixed FP register roles
const F_ZERO: u8 = 0;
const F_SCALE: u8 = 7;
const F_NEG1: u8 = 8;
const F_ONE: u8 = 9;

/// Program builder holding the allocators for every on-chip memory.
#[derive(Debug)]
pub struct Builder {
    pub arch: ArchConfig,
    em: Emitter,
    image: HbmImage,
    fp_consts: Vec<f64>,
    fp_top: usize,
    vnext: usize,
    mnext: usize,
    outputs: BTreeMap<String, VTensor>,
    masks: Option<VTensor>,
    ones_loaded: bool,
}

impl Builder {
    pub fn new(arch: ArchConfig, hbm: HbmConfig) -> Result<Builder> {
        arch.validate()?;
        if arch.vlen != arch.mlen {
            return Err(CompileError::Constraint(vec![format!("compiler requires VLEN = MLEN (got {} / {})", arch.vlen, arch.mlen)]));
        }
        let fp_top = arch.fp_sram_depth;
        Ok(Builder {
            arch,
            em: Emitter::new(),
            image: HbmImage::new(hbm),
            fp_consts: Vec::new(),
            fp_top,
            vnext: 0,
            mnext: 0,
            outputs: BTreeMap::new(),
            masks: None,
            ones_loaded: false,
        })
    }

    pub fn image(&self) -> &HbmImage {
        &self.image
    }

    pub fn instructions(&self) -> usize {
        self.em.insts.len()
    }

    pub fn valloc(&mut self, rows: usize, cols: usize) -> Result<VTensor> {
        let b = self.arch.blen;
        let t = VTensor { base: self.vnext, rows, rows_pad: rows.div_ceil(b) * b, cols, mlen: self.arch.mlen };
        let end = t.base + t.len();
        let cap = self.arch.vector_sram_depth * self.arch.vlen;
        if end > cap {
            return Err(CompileError::Constraint(vec![format!(
                "vector SRAM overflow: need {} rows, depth {}",
                end.div_ceil(self.arch.vlen),
                self.arch.vector_sram_depth
            )]));
        }
        self.vnext = end;
        Ok(t)
    }

    pub fn vmark(&self) -> usize {
        self.vnext
    }

    pub fn vrelease(&mut self, mark: usize) {
        self.vnext = mark;
    }

    fn mtiles(&mut self, n: usize) -> Result<usize> {
        let t = self.mnext;
        let have = self.arch.matrix_sram_depth / self.arch.mlen;
        if t + n > have {
            return Err(CompileError::Constraint(vec![format!("matrix SRAM overflow: need {} tiles, have {have}", t + n)]));
        }
        self.mnext += n;
        Ok(t)
    }

    fn mrelease(&mut self, mark: usize) {
        self.mnext = mark;
    }

    /// FP SRAM address of a constant, deduplicated.
    pub fn fconst(&mut self, v: f64) -> Result<usize> {
        if let Some(i) = self.fp_consts.iter().position(|c| c.to_bits() == v.to_bits()) {
            return Ok(i);
        }
        if self.fp_consts.len() >= self.fp_top {
            return Err(CompileError::Constraint(vec!["FP SRAM overflow".into()]));
        }
        self.fp_consts.push(v);
        Ok(self.fp_consts.len() - 1)
    }

    fn fscratch(&mut self, n: usize) -> Result<usize> {
        if self.fp_top < self.fp_consts.len() + n {
            return Err(CompileError::Constraint(vec!["FP SRAM overflow".into()]));
        }
        self.fp_top -= n;
        Ok(self.fp_top)
    }

    fn load_fconst(&mut self, f: u8, v: f64) -> Result<()> {
        let a = self.fconst(v)?;
        self.em.fp_mem(S_LD_FP, f, a);
        Ok(())
    }

    fn unit_consts(&mut self) -> Result<()> {
        if !self.ones_loaded {
            self.load_fconst(F_NEG1, -1.0)?;
            self.load_fconst(F_ONE, 1.0)?;
            self.ones_loaded = true;
        }
        Ok(())
    }

    /// Quantize `w` (`n × k`, row-major) with the weight format into HBM.
    pub fn add_weight(&mut self, name: &str, w: &[f64], n: usize, k: usize) -> Result<Region> {
        if w.len() != n * k {
            return shape(format!("weight `{name}` has {} values, expected {n}x{k}", w.len()));
        }
        let t = MXTensor::quantize(w, &[n, k], self.arch.weight_fmt)?;
        Ok(self.image.alloc_tensor(name, &t)?)
    }

    /// Zero-filled KV region for `rows × cols` in the KV format.
    pub fn add_kv_region(&mut self, name: &str, rows: usize, cols: usize) -> Result<Region> {
        Ok(self.image.alloc_zeroed(name, rows, cols, self.arch.kv_fmt)?)
    }

    /// Place row-major data in HBM (chunk-major, FP setting) and prefetch it
    /// into a fresh Vector SRAM tensor.
    pub fn load_activation(&mut self, name: &str, data: &[f64], rows: usize, cols: usize) -> Result<VTensor> {
        if data.len() != rows * cols {
            return shape(format!("activation `{name}` has {} values, expected {rows}x{cols}", data.len()));
        }
        let t = self.valloc(rows, cols)?;
        let chunked = t.to_chunked(data);
        let ml = self.arch.mlen;
        let region = self.image.alloc_minifloat(name, &chunked, chunked.len() / ml, ml, self.arch.fp_setting)?;
        self.em.transfer(H_PREFETCH_V, t.base, ml, &region, 0, chunked.len() / ml);
        Ok(t)
    }

    pub fn mark_output(&mut self, name: &str, t: VTensor) {
        self.outputs.insert(name.to_string(), t);
    }

    pub fn finish(self) -> Compiled {
        Compiled {
            program: self.em.finish(),
            image: self.image,
            arch: self.arch,
            fp_init: self.fp_consts,
            outputs: self.outputs,
        }
    }

    /// `y = x · wᵀ` with `w` an `n × k` weight region.
    pub fn gemm(&mut self, x: &VTensor, w: &Region, y: &VTensor, sched: &GemmSchedule) -> Result<()> {
        let (b, ml) = (self.arch.blen, self.arch.mlen);
        let (n, k) = (w.rows, w.cols);
        if x.cols != k || k % ml != 0 || n % b != 0 || y.cols < n || y.rows_pad != x.rows_pad {
            return shape(format!("gemm {}x{} by {}x{} into {}x{}", x.rows_pad, x.cols, n, k, y.rows_pad, y.cols));
        }
        let (nk, nt, mt) = (k / ml, n / b, x.rows_pad / b);
        let d = sched.prefetch_distance;
        let ring = nk + d;
        let spt = ml / b;
        let mark = self.mnext;
        let tile0 = self.mtiles(ring.div_ceil(spt))?;
        let slot_row = |s: usize| (tile0 + s / spt) * ml + (s % spt) * b;
        let slot_addr = |s: usize| (tile0 + s / spt) * ml * ml + (s % spt) * b;
        let mut order = Vec::with_capacity(mt * nt);
        match sched.loop_order {
            LoopOrder::NOuter => (0..nt).for_each(|j| (0..mt).for_each(|i| order.push((i, j)))),
            LoopOrder::MOuter => (0..mt).for_each(|i| (0..nt).for_each(|j| order.push((i, j)))),
        }
        let unit = |i: usize, j: usize, kt: usize| match sched.loop_order {
            LoopOrder::NOuter => j * nk + kt,
            LoopOrder::MOuter => (i * nt + j) * nk + kt,
        };
        let source = |u: usize| ((u / nk) % nt, u % nk);
        let total = match sched.loop_order {
            LoopOrder::NOuter => nt * nk,
            LoopOrder::MOuter => mt * nt * nk,
        };
        if !sched.fuse_output && y.cols % ml != 0 {
            // the spill moves whole rows, so define the padding columns
            for m in 0..y.rows_pad {
                self.em.vld(y.addr(m, (y.chunks() - 1) * ml), F_ZERO);
            }
        }
        let mut fetched = 0;
        for &(i, j) in &order {
            for kt in 0..nk {
                let u = unit(i, j, kt);
                while fetched <= (u + d).min(total - 1) {
                    let (jj, kk) = source(fetched);
                    self.em.transfer(H_PREFETCH_M, slot_row(fetched % ring), 1, w, jj * b * k + kk * ml, b);
                    fetched += 1;
                }
                self.em.mm(M_TMM, x.addr(i * b, kt * ml), slot_addr(u % ring));
            }
            self.em.wo(M_MM_WO, y.addr(i * b, j * b));
        }
        self.mrelease(mark);
        if !sched.fuse_output {
            self.roundtrip(y)?;
        }
        Ok(())
    }

    /// Spill a tensor to HBM and read it back, as an unfused consumer would.
    fn roundtrip(&mut self, y: &VTensor) -> Result<()> {
        let ml = self.arch.mlen;
        let rows = y.len() / ml;
        let name = format!("spill{}", self.image.regions().count());
        let region = self.image.alloc_zeroed(&name, rows, ml, self.arch.fp_setting)?;
        self.em.transfer(H_STORE_V, y.base, ml, &region, 0, rows);
        self.em.transfer(H_PREFETCH_V, y.base, ml, &region, 0, rows);
        Ok(())
    }

    fn rows_chunks(&self, t: &VTensor) -> Vec<usize> {
        let mut v = Vec::with_capacity(t.rows_pad * t.chunks());
        for m in 0..t.rows_pad {
            for c in 0..t.chunks() {
                v.push(t.addr(m, c * self.arch.mlen));
            }
        }
        v
    }

    /// `x += y` elementwise.
    pub fn add_inplace(&mut self, x: &VTensor, y: &VTensor) -> Result<()> {
        if x.cols != y.cols || x.rows_pad != y.rows_pad {
            return shape("residual add shapes differ".into());
        }
        for (a, b) in self.rows_chunks(x).into_iter().zip(self.rows_chunks(y)) {
            self.em.vv(V_ADD_VV, a, a, b);
        }
        Ok(())
    }

    /// `out = x * rsqrt(mean(x²) + eps) * w` per row; `w` is a 1-row tensor.
    pub fn rmsnorm(&mut self, x: &VTensor, w: &VTensor, out: &VTensor, eps: f64) -> Result<()> {
        if x.cols != w.cols || out.cols != x.cols || out.rows_pad != x.rows_pad {
            return shape("rmsnorm shapes differ".into());
        }
        let ml = self.arch.mlen;
        let tmp = self.valloc(1, ml)?;
        let inv_d = self.fconst(1.0 / x.cols as f64)?;
        let eps_a = self.fconst(eps)?;
        self.em.set_lut(LutFn::Rsqrt as i64);
        for m in 0..x.rows_pad {
            for c in 0..x.chunks() {
                let a = x.addr(m, c * ml);
                self.em.vv(V_MUL_VV, tmp.base, a, a);
                self.em.red(V_RED_SUM, if c == 0 { 1 } else { 2 }, tmp.base);
                if c > 0 {
                    self.em.fop(S_ADD_FP, 1, 1, 2);
                }
            }
            self.em.fp_mem(S_LD_FP, 3, inv_d);
            self.em.fop(S_MUL_FP, 1, 1, 3);
            self.em.fp_mem(S_LD_FP, 3, eps_a);
            self.em.fop(S_ADD_FP, 1, 1, 3);
            self.em.fop(S_LUT_FP, 1, 1, 0);
            for c in 0..x.chunks() {
                let (src, dst) = (x.addr(m, c * ml), out.addr(m, c * ml));
                self.em.vf(V_MUL_VF, dst, src, 1);
                self.em.vv(V_MUL_VV, dst, dst, w.addr(0, c * ml));
            }
        }
        self.vrelease(tmp.base);
        Ok(())
    }

    /// `x = x ⊙ cos + x_rot ⊙ sin` where `x_rot` already holds the
    /// half-rotated projection. `cos`/`sin` are `rows × head_dim`.
    pub fn rope(&mut self, x: &VTensor, x_rot: &VTensor, cos: &VTensor, sin: &VTensor) -> Result<()> {
        let ml = self.arch.mlen;
        let hc = cos.chunks();
        if x.cols % cos.cols != 0 || x_rot.cols != x.cols || cos.rows_pad < x.rows_pad {
            return shape("rope shapes differ".into());
        }
        for m in 0..x.rows_pad {
            for c in 0..x.chunks() {
                let (a, r) = (x.addr(m, c * ml), x_rot.addr(m, c * ml));
                let k = (c % hc) * ml;
                self.em.vv(V_MUL_VV, a, a, cos.addr(m, k));
                self.em.vv(V_MUL_VV, r, r, sin.addr(m, k));
                self.em.vv(V_ADD_VV, a, a, r);
            }
        }
        Ok(())
    }

    /// `g = silu(g) ⊙ u` with `silu(g) = g / (1 + exp(-g))`.
    pub fn silu_mul(&mut self, g: &VTensor, u: &VTensor) -> Result<()> {
        self.unit_consts()?;
        let tmp = self.valloc(1, self.arch.mlen)?;
        for (a, b) in self.rows_chunks(g).into_iter().zip(self.rows_chunks(u)) {
            let t = tmp.base;
            self.em.vf(V_MUL_VF, t, a, F_NEG1);
            self.em.v1(V_EXP_V, t, t);
            self.em.vf(V_ADD_VF, t, t, F_ONE);
            self.em.v1(V_REC_V, t, t);
            self.em.vv(V_MUL_VV, a, a, t);
            self.em.vv(V_MUL_VV, a, a, b);
        }
        self.vrelease(tmp.base);
        Ok(())
    }

    /// Mask rows in Vector SRAM: row 0 masks everything, row r+1 keeps
    /// columns 0..=r.
    fn masks(&mut self) -> Result<VTensor> {
        if let Some(m) = self.masks {
            return Ok(m);
        }
        let ml = self.arch.mlen;
        let big = -self.arch.fp_setting.max_value();
        let mut data = Vec::with_capacity((ml + 1) * ml);
        for r in 0..=ml {
            data.extend((0..ml).map(|c| if r > 0 && c < r { 0.0 } else { big }));
        }
        let t = self.load_activation("masks", &data, ml + 1, ml)?;
        self.masks = Some(t);
        Ok(t)
    }

    /// Store rows `0..rows` of head-chunks `[chunk0, chunk0 + hd/MLEN)` of
    /// `src` into a `T × hd` region, re-quantizing to the region format.
    pub fn store_head(&mut self, src: &VTensor, chunk0: usize, region: &Region, rows: usize) -> Result<()> {
        let ml = self.arch.mlen;
        for ci in 0..region.cols / ml {
            self.em.transfer(H_STORE_V, src.addr(0, (chunk0 + ci) * ml), ml, region, ci * ml, rows);
        }
        Ok(())
    }

    /// FlashAttention for a group of query heads sharing one K/V head.
    /// `q` and `o` are `Tq × (heads·hd)`; `heads` lists head indices; the
    /// K/V regions are `Tkv_pad × hd` with `t_kv` valid rows.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: &VTensor,
        o: &VTensor,
        heads: &[usize],
        k_region: &Region,
        v_region: &Region,
        t_kv: usize,
        causal: bool,
    ) -> Result<()> {
        let (b, ml) = (self.arch.blen, self.arch.mlen);
        let hd = k_region.cols;
        if hd % ml != 0 || v_region.cols != hd || k_region.rows % ml != 0 || k_region.rows < t_kv || v_region.rows != k_region.rows {
            return shape(format!("attention head_dim {hd} / kv rows {} vs MLEN {ml}", k_region.rows));
        }
        if o.cols != q.cols || o.rows_pad != q.rows_pad {
            return shape("attention output shape".into());
        }
        let c = hd / ml;
        let ntk = k_region.rows / ml;
        let masks = self.masks()?;
        let mmark = self.mnext;
        let ktile = self.mtiles(ntk * c)?;
        let vtile = self.mtiles(ntk * c)?;
        for j in 0..ntk {
            for ci in 0..c {
                let off = j * ml * hd + ci * ml;
                self.em.transfer(H_PREFETCH_M, (ktile + j * c + ci) * ml, 1, k_region, off, ml);
                self.em.transfer(H_PREFETCH_M, (vtile + j * c + ci) * ml, 1, v_region, off, ml);
            }
        }
        let vmark = self.vmark();
        let s = self.valloc(b, ml)?;
        let otmp = self.valloc(b, hd)?;
        let tmp = self.valloc(1, ml)?;
        let st = self.fscratch(2 * b)?;
        let (m_at, l_at) = (st, st + b);
        self.load_fconst(F_SCALE, 1.0 / (hd as f64).sqrt())?;
        for &h in heads {
            let col = |ci: usize| (h * c + ci) * ml;
            for m in 0..q.rows_pad {
                for ci in 0..c {
                    let a = q.addr(m, col(ci));
                    self.em.vf(V_MUL_VF, a, a, F_SCALE);
                }
            }
            for mb in 0..q.rows_pad / b {
                let last_q = (mb * b + b - 1).min(q.rows.max(1) - 1);
                let tiles = if causal { (last_q.min(t_kv - 1)) / ml + 1 } else { t_kv.div_ceil(ml) };
                for j in 0..tiles {
                    let first = j == 0;
                    // S = Q Kᵀ, BLEN keys per write-out
                    for g in 0..ml / b {
                        for ci in 0..c {
                            self.em.mm(M_TMM, q.addr(mb * b, col(ci)), (ktile + j * c + ci) * ml * ml + g * b);
                        }
                        self.em.wo(M_MM_WO, s.base + g * b);
                    }
                    for i in 0..b {
                        let qi = (mb * b + i).min(q.rows.max(1) - 1);
                        let lim = if causal { qi.min(t_kv - 1) } else { t_kv - 1 } as i64 - (j * ml) as i64;
                        if lim < ml as i64 - 1 {
                            let row = if lim < 0 { 0 } else { lim as usize + 1 };
                            let srow = s.base + i * ml;
                            self.em.vv(V_ADD_VV, srow, srow, masks.addr(row, 0));
                        }
                    }
                    // online softmax per row
                    for i in 0..b {
                        let srow = s.base + i * ml;
                        self.em.red(V_RED_MAX, 1, srow);
                        if first {
                            self.em.fp_mem(S_ST_FP, 1, m_at + i);
                            self.em.vf(V_SUB_VF, srow, srow, 1);
                        } else {
                            self.em.fp_mem(S_LD_FP, 2, m_at + i);
                            self.em.fop(S_MAX_FP, 3, 2, 1);
                            self.em.fop(S_SUB_FP, 4, 2, 3);
                            self.em.fop(S_EXP_FP, 4, 4, 0);
                            self.em.fp_mem(S_ST_FP, 3, m_at + i);
                            self.em.vf(V_SUB_VF, srow, srow, 3);
                        }
                        self.em.v1(V_EXP_V, srow, srow);
                        self.em.red(V_RED_SUM, 5, srow);
                        if first {
                            self.em.fp_mem(S_ST_FP, 5, l_at + i);
                        } else {
                            self.em.fp_mem(S_LD_FP, 6, l_at + i);
                            self.em.fop(S_MUL_FP, 6, 6, 4);
                            self.em.fop(S_ADD_FP, 6, 6, 5);
                            self.em.fp_mem(S_ST_FP, 6, l_at + i);
                            for ci in 0..c {
                                let a = o.addr(mb * b + i, col(ci));
                                self.em.vf(V_MUL_VF, a, a, 4);
                            }
                        }
                    }
                    // P V
                    for dc in 0..c {
                        for g in 0..ml / b {
                            self.em.mm(M_MM, s.base, (vtile + j * c + dc) * ml * ml + g * b);
                            let dst = if first { o.addr(mb * b, col(dc) + g * b) } else { otmp.addr(0, dc * ml + g * b) };
                            self.em.wo(M_MM_WO, dst);
                        }
                    }
                    if !first {
                        for i in 0..b {
                            for dc in 0..c {
                                let a = o.addr(mb * b + i, col(dc));
                                self.em.vv(V_ADD_VV, a, a, otmp.addr(i, dc * ml));
                            }
                        }
                    }
                }
                for i in 0..b {
                    self.em.fp_mem(S_LD_FP, 6, l_at + i);
                    self.em.vld(tmp.base, 6);
                    self.em.v1(V_REC_V, tmp.base, tmp.base);
                    for ci in 0..c {
                        let a = o.addr(mb * b + i, col(ci));
                        self.em.vv(V_MUL_VV, a, a, tmp.base);
                    }
                }
            }
        }
        self.fp_top += 2 * b;
        self.vrelease(vmark);
        self.mrelease(mmark);
        Ok(())
    }
}

/// Standalone GEMM: `x` (`m × k`) from HBM, `w` (`n × k`) streamed, output
/// `y` (`m × n`) left in Vector SRAM.
pub fn compile_gemm(arch: &ArchConfig, hbm: &HbmConfig, x: &[f64], m: usize, w: &[f64], n: usize, k: usize, sched: &GemmSchedule) -> Result<Compiled> {
    let mut bld = Builder::new(arch.clone(), *hbm)?;
    let wr = bld.add_weight("w", w, n, k)?;
    let xt = bld.load_activation("x", x, m, k)?;
    let y = bld.valloc(m, n)?;
    bld.gemm(&xt, &wr, &y, sched)?;
    bld.mark_output("y", y);
    Ok(bld.finish())
}

/// Single-head attention over `q` (`tq × hd`) and `k`, `v` (`t × hd`).
#[allow(clippy::too_many_arguments)]
pub fn compile_attention(arch: &ArchConfig, hbm: &HbmConfig, q: &[f64], k: &[f64], v: &[f64], tq: usize, t: usize, hd: usize, causal: bool) -> Result<Compiled> {
    let ml = arch.mlen;
    let mut bld = Builder::new(arch.clone(), *hbm)?;
    let tpad = t.div_ceil(ml) * ml;
    let pad = |x: &[f64]| {
        let mut p = x.to_vec();
        p.resize(tpad * hd, 0.0);
        p
    };
    let kt = MXTensor::quantize(&pad(k), &[tpad, hd], arch.kv_fmt)?;
    let vt = MXTensor::quantize(&pad(v), &[tpad, hd], arch.kv_fmt)?;
    let kr = bld.image.alloc_tensor("k", &kt)?;
    let vr = bld.image.alloc_tensor("v", &vt)?;
    let qt = bld.load_activation("q", q, tq, hd)?;
    let o = bld.valloc(tq, hd)?;
    bld.attention(&qt, &o, &[0], &kr, &vr, t, causal)?;
    bld.mark_output("o", o);
    Ok(bld.finish())
}

/// Float weights of a decoder; projection matrices are `out × in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w_gate: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub embed: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Vec<f64>,
}

pub const RMS_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;

impl DecoderWeights {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, norms near 1.
    pub fn random(spec: &ModelSpec, seed: u64) -> DecoderWeights {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |n: usize, k: usize| {
            let d = Normal::new(0.0, 1.0 / (k as f64).sqrt()).unwrap();
            (0..n * k).map(|_| d.sample(&mut rng)).collect::<Vec<f64>>()
        };
        let (d, hd) = (spec.hidden, spec.head_dim);
        let kvd = spec.kv_heads * hd;
        let mut layers = Vec::new();
        for _ in 0..spec.layers {
            layers.push(LayerWeights {
                wq: mat(d, d),
                wk: mat(kvd, d),
                wv: mat(kvd, d),
                wo: mat(d, d),
                w_gate: mat(spec.ffn_dim, d),
                w_up: mat(spec.ffn_dim, d),
                w_down: mat(d, spec.ffn_dim),
                attn_norm: vec![1.0; d],
                ffn_norm: vec![1.0; d],
            });
        }
        let embed = mat(spec.vocab, d).into_iter().map(|x| x * (d as f64).sqrt()).collect();
        let lm_head = mat(spec.vocab, d);
        DecoderWeights { embed, layers, final_norm: vec![1.0; d], lm_head }
    }

    /// Replace every projection and the embedding table by its
    /// quantize-dequantize image under `fmt`.
    pub fn quantized(&self, spec: &ModelSpec, fmt: DataFormat) -> Result<DecoderWeights> {
        let q = |w: &[f64], k: usize| -> Result<Vec<f64>> { Ok(MXTensor::quantize(w, &[w.len() / k, k], fmt)?.dequantize()?) };
        let d = spec.hidden;
        let mut out = self.clone();
        out.embed = q(&self.embed, d)?;
        out.lm_head = q(&self.lm_head, d)?;
        for (o, l) in out.layers.iter_mut().zip(&self.layers) {
            o.wq = q(&l.wq, d)?;
            o.wk = q(&l.wk, d)?;
            o.wv = q(&l.wv, d)?;
            o.wo = q(&l.wo, d)?;
            o.w_gate = q(&l.w_gate, d)?;
            o.w_up = q(&l.w_up, d)?;
            o.w_down = q(&l.w_down, spec.ffn_dim)?;
        }
        Ok(out)
    }
}

/// Rows of `w` (`heads·hd × k`) permuted and negated so that
/// `x · rot(w)ᵀ = rotate_half(x · wᵀ)` within every head.
pub fn rotate_half_rows(w: &[f64], heads: usize, hd: usize, k: usize) -> Vec<f64> {
    let half = hd / 2;
    let mut out = vec![0.0; w.len()];
    for h in 0..heads {
        for j in 0..hd {
            let (src, sign) = if j < half { (j + half, -1.0) } else { (j - half, 1.0) };
            for c in 0..k {
                out[(h * hd + j) * k + c] = sign * w[(h * hd + src) * k + c];
            }
        }
    }
    out
}

/// Rotary tables, `t × hd` each, rotate-half convention.
pub fn rope_tables(t: usize, hd: usize) -> (Vec<f64>, Vec<f64>) {
    let half = hd / 2;
    let mut cos = Vec::with_capacity(t * hd);
    let mut sin = Vec::with_capacity(t * hd);
    for p in 0..t {
        for j in 0..hd {
            let theta = p as f64 * ROPE_BASE.powf(-2.0 * (j % half) as f64 / hd as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (cos, sin)
}

/// Whole decoder forward pass over `tokens`; output `logits` is
/// `tokens.len() × vocab`.
pub fn compile_decoder(arch: &ArchConfig, hbm: &HbmConfig, spec: &ModelSpec, w: &DecoderWeights, tokens: &[usize], prefetch_distance: usize) -> Result<Compiled> {
    spec.validate()?;
    let t = tokens.len();
    let (d, hd, ml) = (spec.hidden, spec.head_dim, arch.mlen);
    let mut bad = Vec::new();
    if t == 0 || t > spec.max_seq {
        bad.push(format!("sequence length {t} outside 1..={}", spec.max_seq));
    }
    for (name, v) in [("hidden", d), ("head_dim", hd), ("ffn_dim", spec.ffn_dim), ("vocab", spec.vocab)] {
        if v % ml != 0 {
            bad.push(format!("{name} {v} not a multiple of MLEN {ml}"));
        }
    }
    if let Some(&tok) = tokens.iter().find(|&&x| x >= spec.vocab) {
        bad.push(format!("token {tok} outside vocab"));
    }
    if !bad.is_empty() {
        return Err(CompileError::Constraint(bad));
    }
    let sched = GemmSchedule::streaming(prefetch_distance);
    let mut bld = Builder::new(arch.clone(), *hbm)?;
    let (kvd, ffn) = (spec.kv_heads * hd, spec.ffn_dim);
    let group = spec.heads / spec.kv_heads;
    let tpad = t.div_ceil(ml) * ml;

    let embed = bld.add_weight("embed", &w.embed, spec.vocab, d)?;
    let mut lw = Vec::new();
    for (l, lay) in w.layers.iter().enumerate() {
        let r = |b: &mut Builder, n: &str, x: &[f64], rows: usize, k: usize| b.add_weight(&format!("l{l}.{n}"), x, rows, k);
        let wq = r(&mut bld, "wq", &lay.wq, d, d)?;
        let wq_rot = r(&mut bld, "wq_rot", &rotate_half_rows(&lay.wq, spec.heads, hd, d), d, d)?;
        let wk = r(&mut bld, "wk", &lay.wk, kvd, d)?;
        let wk_rot = r(&mut bld, "wk_rot", &rotate_half_rows(&lay.wk, spec.kv_heads, hd, d), kvd, d)?;
        let wv = r(&mut bld, "wv", &lay.wv, kvd, d)?;
        let wo = r(&mut bld, "wo", &lay.wo, d, d)?;
        let wg = r(&mut bld, "w_gate", &lay.w_gate, ffn, d)?;
        let wu = r(&mut bld, "w_up", &lay.w_up, ffn, d)?;
        let wd = r(&mut bld, "w_down", &lay.w_down, d, ffn)?;
        let mut kc = Vec::new();
        for g in 0..spec.kv_heads {
            let k = bld.add_kv_region(&format!("l{l}.kcache{g}"), tpad, hd)?;
            let v = bld.add_kv_region(&format!("l{l}.vcache{g}"), tpad, hd)?;
            kc.push((k, v));
        }
        lw.push((wq, wq_rot, wk, wk_rot, wv, wo, wg, wu, wd, kc));
    }
    let lm = bld.add_weight("lm_head", &w.lm_head, spec.vocab, d)?;

    // resident tensors
    let (cos, sin) = rope_tables(t, hd);
    let cos_t = bld.load_activation("rope_cos", &cos, t, hd)?;
    let sin_t = bld.load_activation("rope_sin", &sin, t, hd)?;
    let mut norms = Vec::new();
    for (l, lay) in w.layers.iter().enumerate() {
        let a = bld.load_activation(&format!("l{l}.attn_norm"), &lay.attn_norm, 1, d)?;
        let f = bld.load_activation(&format!("l{l}.ffn_norm"), &lay.ffn_norm, 1, d)?;
        norms.push((a, f));
    }
    let final_norm = bld.load_activation("final_norm", &w.final_norm, 1, d)?;
    bld.masks()?;

    // embedding gather
    let x = bld.valloc(t, d)?;
    for (m, &tok) in tokens.iter().enumerate() {
        for c in 0..d / ml {
            bld.em.transfer(H_PREFETCH_V, x.addr(m, c * ml), ml, &embed, tok * d + c * ml, 1);
        }
    }
    for m in t..x.rows_pad {
        for c in 0..d / ml {
            bld.em.vld(x.addr(m, c * ml), F_ZERO);
        }
    }

    for (l, (wq, wq_rot, wk, wk_rot, wv, wo, wg, wu, wd, kc)) in lw.iter().enumerate() {
        let mark = bld.vmark();
        let h = bld.valloc(t, d)?;
        bld.rmsnorm(&x, &norms[l].0, &h, RMS_EPS)?;
        let q = bld.valloc(t, d)?;
        let q2 = bld.valloc(t, d)?;
        let k = bld.valloc(t, kvd)?;
        let k2 = bld.valloc(t, kvd)?;
        let v = bld.valloc(t, kvd)?;
        bld.gemm(&h, wq, &q, &sched)?;
        bld.gemm(&h, wq_rot, &q2, &sched)?;
        bld.gemm(&h, wk, &k, &sched)?;
        bld.gemm(&h, wk_rot, &k2, &sched)?;
        bld.gemm(&h, wv, &v, &sched)?;
        bld.rope(&q, &q2, &cos_t, &sin_t)?;
        bld.rope(&k, &k2, &cos_t, &sin_t)?;
        let c = hd / ml;
        for (g, (kr, vr)) in kc.iter().enumerate() {
            bld.store_head(&k, g * c, kr, t)?;
            bld.store_head(&v, g * c, vr, t)?;
        }
        let o = bld.valloc(t, d)?;
        for (g, (kr, vr)) in kc.iter().enumerate() {
            let heads: Vec<usize> = (g * group..(g + 1) * group).collect();
            bld.attention(&q, &o, &heads, kr, vr, t, true)?;
        }
        let attn = bld.valloc(t, d)?;
        bld.gemm(&o, wo, &attn, &sched)?;
        bld.add_inplace(&x, &attn)?;
        bld.vrelease(mark);

        let h2 = bld.valloc(t, d)?;
        bld.rmsnorm(&x, &norms[l].1, &h2, RMS_EPS)?;
        let g = bld.valloc(t, ffn)?;
        let u = bld.valloc(t, ffn)?;
        bld.gemm(&h2, wg, &g, &sched)?;
        bld.gemm(&h2, wu, &u, &sched)?;
        bld.silu_mul(&g, &u)?;
        let f = bld.valloc(t, d)?;
        bld.gemm(&g, wd, &f, &sched)?;
        bld.add_inplace(&x, &f)?;
        bld.vrelease(mark);
    }
    let hf = bld.valloc(t, d)?;
    bld.rmsnorm(&x, &final_norm, &hf, RMS_EPS)?;
    let logits = bld.valloc(t, spec.vocab)?;
    bld.gemm(&hf, &lm, &logits, &sched)?;
    bld.mark_output("logits", logits);
    Ok(bld.finish())
}
