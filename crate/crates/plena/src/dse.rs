//! Constrained multi-objective design-space exploration.
//!
//! Candidates are drawn from the discrete parameter grid, rejected if any
//! constraint row fails, and scored on three objectives (all minimized):
//! an accuracy proxy from a quantized toy decoder, latency from the roofline
//! model or the cycle emulator, and an analytic area proxy. The area proxy
//! is in arbitrary units and only meant to order designs.
//!
//! MX block size inside the explored space equals BLEN, which is what the
//! bandwidth rule's `MLEN / BLEN` scale count assumes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{auto_prefetch_distance, compile_decoder, CompileError, DecoderWeights, ModelSpec};
use crate::formats::DataFormat;
use crate::hbm::HbmConfig;
use crate::machine::ArchConfig;
use crate::quantizer::{forward, quantize_decoder, Emulation, QuantError, QuantPlan};

#[derive(Debug, Error)]
pub enum DseError {
    #[error("no feasible candidate in {0} draws")]
    NoFeasible(usize),
    #[error("design point is infeasible: {0:?}")]
    Infeasible(Vec<String>),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DseError>;

pub const BLEN_RANGE: [usize; 5] = [2, 4, 8, 16, 32];
pub const MLEN_RANGE: [usize; 9] = [2, 4, 8, 16, 32, 64, 128, 256, 512];
pub const VLEN_RANGE: [usize; 10] = [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
pub const PREFETCH_RANGE: [usize; 8] = [2, 4, 8, 16, 32, 64, 128, 256];
pub const INT_WIDTHS: [u32; 3] = [16, 32, 64];

/// Activation and KV choices.
pub fn mx_choices() -> Vec<DataFormat> {
    let mut v: Vec<DataFormat> = [2, 3, 4, 8].iter().map(|&b| DataFormat::mxint(b, 16)).collect();
    for (e, m) in [(1, 2), (2, 1), (3, 4), (4, 3), (5, 2)] {
        v.push(DataFormat::mxfp(e, m, 16));
    }
    v
}

pub fn fp_choices() -> Vec<DataFormat> {
    [(3, 2), (2, 3), (6, 5), (5, 6), (4, 7), (8, 5)].iter().map(|&(e, m)| DataFormat::minifloat(e, m)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DesignPoint {
    pub blen: usize,
    pub mlen: usize,
    pub vlen: usize,
    pub hbm_m_prefetch: usize,
    pub hbm_v_prefetch: usize,
    pub hbm_v_writeback: usize,
    pub act_fmt: DataFormatKey,
    pub kv_fmt: DataFormatKey,
    pub fp_setting: DataFormatKey,
    pub int_width: u32,
}

/// Orderable wrapper so design points can key maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataFormatKey(pub DataFormat);

impl PartialOrd for DataFormatKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DataFormatKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.to_string().cmp(&other.0.to_string())
    }
}

impl DesignPoint {
    /// Element bits of the activation format.
    pub fn act_width(&self) -> usize {
        self.act_fmt.0.element_bits as usize
    }

    pub fn act(&self) -> DataFormat {
        self.act_fmt.0.with_block(self.blen as u32)
    }

    pub fn kv(&self) -> DataFormat {
        self.kv_fmt.0.with_block(self.blen as u32)
    }

    /// Machine configuration for this point on top of `base` (SRAM depths,
    /// clock, weight format).
    pub fn arch(&self, base: &ArchConfig, weight: DataFormat) -> ArchConfig {
        let mut a = base.clone();
        a.blen = self.blen;
        a.mlen = self.mlen;
        a.vlen = self.vlen;
        a.act_fmt = self.act();
        a.kv_fmt = self.kv();
        a.weight_fmt = weight.with_block(self.blen as u32);
        a.fp_setting = self.fp_setting.0;
        a.int_width = self.int_width;
        a.latency.systolic_drain = self.blen as u64;
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub accuracy_proxy: f64,
    pub latency_seconds: f64,
    pub area_proxy: f64,
}

impl Objectives {
    pub fn as_array(&self) -> [f64; 3] {
        [self.accuracy_proxy, self.latency_seconds, self.area_proxy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fidelity {
    Roofline,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Random,
    GreedyLocal,
}

/// Context shared by every candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DseConfig {
    pub model: ModelSpec,
    /// Sequence length of the latency workload.
    pub tokens: usize,
    /// Sequence length of the accuracy workload.
    pub accuracy_tokens: usize,
    pub weight_fmt: DataFormat,
    pub weight_seed: u64,
    pub base: ArchConfig,
    pub hbm: HbmConfig,
    pub fp_constant_num: usize,
    pub act_scale_width: usize,
    pub bandwidth_threshold: usize,
    /// Issue cost of one HBM transaction in cycles.
    pub transaction_cycles: f64,
}

impl Default for DseConfig {
    fn default() -> Self {
        DseConfig {
            model: ModelSpec::tiny(),
            tokens: 128,
            accuracy_tokens: 32,
            weight_fmt: DataFormat::mxint(4, 16),
            weight_seed: 0,
            base: ArchConfig::new(8, 64, 64),
            hbm: HbmConfig::default(),
            fp_constant_num: 16,
            act_scale_width: 8,
            bandwidth_threshold: 1510,
            transaction_cycles: 4.0,
        }
    }
}

/// Violated constraint rows, empty when feasible.
pub fn check_constraints(p: &DesignPoint, cfg: &DseConfig) -> Vec<String> {
    let mut v = Vec::new();
    let b = &cfg.base;
    let m = &cfg.model;
    let inside = |x: usize, r: &[usize]| r.contains(&x);
    if !inside(p.blen, &BLEN_RANGE) || !inside(p.mlen, &MLEN_RANGE) || !inside(p.vlen, &VLEN_RANGE) {
        v.push("tile size outside the search range".into());
    }
    for x in [p.hbm_m_prefetch, p.hbm_v_prefetch, p.hbm_v_writeback] {
        if !inside(x, &PREFETCH_RANGE) {
            v.push(format!("transfer amount {x} outside the search range"));
        }
    }
    if !mx_choices().contains(&p.act_fmt.0) || !mx_choices().contains(&p.kv_fmt.0) {
        v.push("activation or KV format outside the search range".into());
    }
    if !fp_choices().contains(&p.fp_setting.0) {
        v.push("FP setting outside the search range".into());
    }
    if !INT_WIDTHS.contains(&p.int_width) {
        v.push("integer width outside the search range".into());
    }
    if p.mlen < p.blen {
        v.push(format!("MLEN {} >= BLEN {}", p.mlen, p.blen));
    }
    if p.blen == 0 || p.mlen % p.blen != 0 {
        v.push(format!("MLEN {} mod BLEN {} = 0", p.mlen, p.blen));
    }
    if b.matrix_sram_depth < 2 * p.mlen {
        v.push(format!("MATRIX_SRAM_DEPTH {} >= 2 x MLEN", b.matrix_sram_depth));
    }
    let need = 2 * m.head_dim + m.hidden.div_ceil(p.vlen.max(1));
    if b.vector_sram_depth < need {
        v.push(format!("VECTOR_SRAM_DEPTH {} >= 2 x HEAD_DIM + HIDDEN/VLEN = {need}", b.vector_sram_depth));
    }
    if b.int_sram_depth < 16 {
        v.push(format!("INT_SRAM_DEPTH {} >= 16", b.int_sram_depth));
    }
    if b.fp_sram_depth < 3 * p.mlen + cfg.fp_constant_num {
        v.push(format!("FP_SRAM_DEPTH {} >= 3 x MLEN + {}", b.fp_sram_depth, cfg.fp_constant_num));
    }
    let w = p.act_width();
    let blen = p.blen.max(1);
    for (name, len) in [("MLEN", p.mlen), ("VLEN", p.vlen)] {
        let bits = len * w + (len / blen) * cfg.act_scale_width;
        if bits >= cfg.bandwidth_threshold {
            v.push(format!("bandwidth: {name} x ACT_WIDTH + ({name}/BLEN) x ACT_SCALE_WIDTH = {bits} < {}", cfg.bandwidth_threshold));
        }
    }
    v
}

/// Roofline latency breakdown of the decoder workload, in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub gemm: f64,
    pub attention: f64,
    pub vector: f64,
    pub writeback: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.gemm + self.attention + self.vector + self.writeback
    }
}

fn fmt_bytes(elems: f64, fmt: DataFormat) -> f64 {
    let scales = if fmt.is_mx() { elems / fmt.block_size as f64 * fmt.scale_bits as f64 } else { 0.0 };
    (elems * fmt.element_bits as f64 + scales) / 8.0
}

/// Matrix-unit cycles of a `rows × k × n` GEMM: one BLEN-cycle pass per
/// row tile, MLEN chunk of K and BLEN output columns.
pub fn gemm_compute_cycles(p: &DesignPoint, rows: usize, k: usize, n: usize) -> f64 {
    (rows.div_ceil(p.blen) * k.div_ceil(p.mlen) * n.div_ceil(p.blen) * p.blen) as f64
}

/// Analytic cycle count of a prefill over `cfg.tokens` tokens.
pub fn roofline_latency(p: &DesignPoint, cfg: &DseConfig) -> LatencyBreakdown {
    let t = cfg.tokens;
    if t == 0 {
        return LatencyBreakdown::default();
    }
    let m = &cfg.model;
    let (b, ml, vl) = (p.blen, p.mlen, p.vlen);
    let bw = cfg.hbm.bytes_per_cycle(cfg.base.clock_ghz) as f64;
    let fill = cfg.hbm.fixed_latency_cycles as f64;
    let wfmt = cfg.weight_fmt.with_block(b as u32);
    let tx = cfg.transaction_cycles;
    let up = |x: usize, q: usize| x.div_ceil(q) * q;
    let mm_cycles = |rows: usize, k: usize, n: usize| gemm_compute_cycles(p, rows, k, n);
    let gemm = |k: usize, n: usize| {
        let compute = mm_cycles(t, k, n);
        let tile_rows = n * k.div_ceil(ml);
        let bytes = fmt_bytes((n * up(k, ml)) as f64, wfmt);
        let memory = bytes / bw + tile_rows.div_ceil(p.hbm_m_prefetch) as f64 * tx;
        compute.max(memory) + fill
    };
    let (d, hd, f, kvd) = (m.hidden, m.head_dim, m.ffn_dim, m.kv_heads * m.head_dim);
    let mut out = LatencyBreakdown::default();
    let per_layer = gemm(d, d) + 2.0 * gemm(d, kvd) + gemm(d, d) + 2.0 * gemm(d, f) + gemm(f, d);
    out.gemm = m.layers as f64 * per_layer + gemm(d, m.vocab);
    // causal attention touches about half the score tiles
    let scores = mm_cycles(t, hd, t).max(1.0) * 0.5 + mm_cycles(t, t, hd) * 0.5;
    let kv_bytes = 2.0 * fmt_bytes((t * kvd) as f64, p.kv());
    let kv_rows = 2 * t * kvd.div_ceil(vl);
    let kv_mem = kv_bytes / bw + kv_rows.div_ceil(p.hbm_v_prefetch) as f64 * tx;
    let softmax = (m.heads * t * t.div_ceil(vl) * 6) as f64 * 0.5;
    out.attention = m.layers as f64 * ((m.heads as f64 * scores + softmax).max(kv_mem) + fill);
    let rows = |cols: usize, ops: usize| (t * cols.div_ceil(vl) * ops) as f64;
    // norms, rotary, residuals and the gated activation
    let per_layer_vec = 2.0 * rows(d, 4) + rows(d + kvd, 3) + 2.0 * rows(d, 1) + rows(f, 5);
    out.vector = m.layers as f64 * per_layer_vec + rows(d, 4);
    let wb_bytes = fmt_bytes((t * m.vocab) as f64, p.fp_setting.0);
    let wb_rows = t * m.vocab.div_ceil(vl);
    out.writeback = wb_bytes / bw + wb_rows.div_ceil(p.hbm_v_writeback) as f64 * tx;
    out
}

/// Area in arbitrary units: PEs weighted by multiplier and accumulator
/// width, vector lanes by FP width, plus SRAM and transfer buffer bits.
pub fn area_proxy(p: &DesignPoint, cfg: &DseConfig) -> f64 {
    let b = &cfg.base;
    let w_bits = cfg.weight_fmt.element_bits as f64;
    let a_bits = p.act_fmt.0.element_bits as f64;
    let kv_bits = p.kv_fmt.0.element_bits as f64;
    let fp_bits = p.fp_setting.0.element_bits as f64;
    let pe = (p.blen * p.mlen) as f64 * (a_bits.max(kv_bits) * w_bits + 2.0 * fp_bits);
    let lanes = p.vlen as f64 * fp_bits * fp_bits;
    let int_alu = p.int_width as f64 * 4.0;
    let sram_bits = (b.matrix_sram_depth * p.mlen) as f64 * a_bits.max(w_bits)
        + (b.vector_sram_depth * p.vlen) as f64 * fp_bits
        + b.fp_sram_depth as f64 * fp_bits
        + b.int_sram_depth as f64 * p.int_width as f64
        + (p.hbm_m_prefetch * p.mlen) as f64 * w_bits
        + (p.hbm_v_prefetch * p.vlen) as f64 * kv_bits.max(a_bits)
        + (p.hbm_v_writeback * p.vlen) as f64 * fp_bits;
    pe + lanes + int_alu + 0.05 * sram_bits
}

/// Scores design points against one fixed toy decoder.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub cfg: DseConfig,
    weights: DecoderWeights,
    qweights: DecoderWeights,
    acc_tokens: Vec<usize>,
    exact: Vec<f64>,
    cache: BTreeMap<(DataFormatKey, DataFormatKey), f64>,
}

fn tokens(n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 37 + 11) % vocab).collect()
}

impl Evaluator {
    /// Random weights from `cfg.weight_seed`, quantized once with the
    /// Hessian-guided quantizer on the accuracy workload.
    pub fn new(cfg: DseConfig) -> Result<Evaluator> {
        let weights = DecoderWeights::random(&cfg.model, cfg.weight_seed);
        let acc_tokens = tokens(cfg.accuracy_tokens.max(1), cfg.model.vocab);
        let plan = QuantPlan { weight_fmt: cfg.weight_fmt, ..QuantPlan::default() };
        let (qweights, _) = quantize_decoder(&cfg.model, &weights, &acc_tokens, &plan)?;
        let exact = forward(&cfg.model, &weights, &acc_tokens, &Emulation::default())?.logits;
        Ok(Evaluator { cfg, weights, qweights, acc_tokens, exact, cache: BTreeMap::new() })
    }

    pub fn weights(&self) -> &DecoderWeights {
        &self.weights
    }

    /// Logits MSE of the quantized model with activations and KV cache in
    /// the given formats, against the unquantized model. Intermediate
    /// results stay in double precision.
    pub fn accuracy_proxy(&mut self, act: DataFormat, kv: DataFormat) -> Result<f64> {
        let key = (DataFormatKey(act), DataFormatKey(kv));
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let em = Emulation { act: Some(act), kv: Some(kv), ..Default::default() };
        let got = forward(&self.cfg.model, &self.qweights, &self.acc_tokens, &em)?.logits;
        let mse = got.iter().zip(&self.exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / got.len() as f64;
        self.cache.insert(key, mse);
        Ok(mse)
    }

    pub fn evaluate(&mut self, p: &DesignPoint, fidelity: Fidelity) -> Result<(Objectives, Fidelity)> {
        let bad = check_constraints(p, &self.cfg);
        if !bad.is_empty() {
            return Err(DseError::Infeasible(bad));
        }
        let accuracy_proxy = self.accuracy_proxy(p.act(), p.kv())?;
        let area_proxy = area_proxy(p, &self.cfg);
        let secs = |cycles: f64, cfg: &DseConfig| cycles / (cfg.base.clock_ghz * 1e9);
        let (latency_seconds, used) = match fidelity {
            Fidelity::Simulate => match self.simulate_cycles(p) {
                Some(c) => (secs(c as f64, &self.cfg), Fidelity::Simulate),
                None => (secs(roofline_latency(p, &self.cfg).total(), &self.cfg), Fidelity::Roofline),
            },
            Fidelity::Roofline => (secs(roofline_latency(p, &self.cfg).total(), &self.cfg), Fidelity::Roofline),
        };
        Ok((Objectives { accuracy_proxy, latency_seconds, area_proxy }, used))
    }

    /// Objectives from the analytic models only, with a given accuracy.
    pub fn predict(&self, p: &DesignPoint, acc: f64) -> [f64; 3] {
        let lat = roofline_latency(p, &self.cfg).total() / (self.cfg.base.clock_ghz * 1e9);
        [acc, lat, area_proxy(p, &self.cfg)]
    }

    /// Emulated cycles of the compiled decoder, or `None` when the point is
    /// outside what the lowering supports.
    pub fn simulate_cycles(&self, p: &DesignPoint) -> Option<u64> {
        let cfg = &self.cfg;
        if cfg.tokens == 0 {
            return Some(0);
        }
        let arch = p.arch(&cfg.base, cfg.weight_fmt);
        let toks = tokens(cfg.tokens, cfg.model.vocab);
        let d = auto_prefetch_distance(&arch, &cfg.hbm);
        let c = compile_decoder(&arch, &cfg.hbm, &cfg.model, &self.weights, &toks, d).ok()?;
        let (rep, _) = c.simulate(u64::MAX / 2).ok()?;
        Some(rep.cycles)
    }
}

/// `a` dominates `b`: no worse everywhere, better somewhere.
pub fn dominates(a: &[f64; 3], b: &[f64; 3]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of non-dominated points, in input order.
pub fn pareto_front(points: &[[f64; 3]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (points[i], points[j]);
        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
    });
    // a dominator sorts strictly before what it dominates
    let mut front: Vec<usize> = Vec::new();
    for &i in &order {
        if !front.iter().any(|&j| dominates(&points[j], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Volume dominated by `points` and bounded by `reference` (minimization).
pub fn hypervolume(points: &[[f64; 3]], reference: [f64; 3]) -> f64 {
    let mut pts: Vec<[f64; 3]> = points.iter().copied().filter(|p| p.iter().zip(&reference).all(|(a, r)| a < r)).collect();
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let mut vol = 0.0;
    for i in 0..pts.len() {
        let z_next = if i + 1 < pts.len() { pts[i + 1][2] } else { reference[2] };
        if z_next <= pts[i][2] {
            continue;
        }
        vol += area_2d(&pts[..=i], [reference[0], reference[1]]) * (z_next - pts[i][2]);
    }
    vol
}

fn area_2d(pts: &[[f64; 3]], r: [f64; 2]) -> f64 {
    let mut xy: Vec<(f64, f64)> = pts.iter().map(|p| (p[0], p[1])).collect();
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut best_y = r[1];
    for (i, &(x, y)) in xy.iter().enumerate() {
        if y < best_y {
            best_y = y;
        }
        let x_next = if i + 1 < xy.len() { xy[i + 1].0 } else { r[0] };
        area += (x_next - x) * (r[1] - best_y);
    }
    area
}

/// Hypervolumes of several point sets on a shared scale: objectives are
/// log-transformed, normalized to the joint range and bounded by a
/// reference 10% past the joint worst point.
pub fn comparable_hypervolumes(sets: &[Vec<[f64; 3]>]) -> Vec<f64> {
    let logs: Vec<Vec<[f64; 3]>> = sets.iter().map(|s| s.iter().map(|p| p.map(|x| x.max(1e-300).ln())).collect()).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in logs.iter().flatten() {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    logs.iter()
        .map(|s| {
            let norm: Vec<[f64; 3]> = s.iter().map(|p| std::array::from_fn(|i| (p[i] - lo[i]) / (hi[i] - lo[i]).max(1e-12))).collect();
            hypervolume(&norm, [1.1; 3])
        })
        .collect()
}

fn weighted_pick(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let mut at = rng.random::<f64>() * w.iter().sum::<f64>();
    for (j, c) in w.iter().enumerate() {
        if at < *c {
            return j;
        }
        at -= c;
    }
    w.len() - 1
}

/// Exclusive hypervolume of each front point on the shared log scale,
/// floored so every point keeps some chance of selection.
fn hv_contributions(front: &[[f64; 3]]) -> Vec<f64> {
    let all = comparable_hypervolumes(&[front.to_vec()])[0];
    (0..front.len())
        .map(|i| {
            let rest: Vec<[f64; 3]> = front.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| *p).collect();
            let logs = [front.to_vec(), rest];
            let hv = comparable_hypervolumes(&logs);
            (hv[0] - hv[1]).max(0.0) + 1e-3 * all.max(1e-12)
        })
        .collect()
}

/// One row of the exploration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub point: DesignPoint,
    pub feasible: bool,
    pub violations: Vec<String>,
    pub objectives: Option<Objectives>,
    pub fidelity: Option<Fidelity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreResult {
    pub sampler: Sampler,
    pub seed: u64,
    pub budget: usize,
    pub trace: Vec<TraceRecord>,
    /// Trace indices of the front, after any re-evaluation.
    pub front: Vec<usize>,
}

impl ExploreResult {
    pub fn evaluated(&self) -> impl Iterator<Item = &TraceRecord> {
        self.trace.iter().filter(|r| r.objectives.is_some())
    }

    pub fn front_points(&self) -> Vec<&TraceRecord> {
        self.front.iter().map(|&i| &self.trace[i]).collect()
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "index", "feasible", "blen", "mlen", "vlen", "hbm_m_prefetch", "hbm_v_prefetch", "hbm_v_writeback", "act_width", "kv_width",
            "fp_setting", "int_data_width", "accuracy_proxy", "latency_seconds", "area_proxy", "fidelity", "violations",
        ])?;
        for r in &self.trace {
            let p = &r.point;
            let o = |f: fn(&Objectives) -> f64| r.objectives.as_ref().map(|x| format!("{:e}", f(x))).unwrap_or_default();
            out.write_record([
                r.index.to_string(),
                r.feasible.to_string(),
                p.blen.to_string(),
                p.mlen.to_string(),
                p.vlen.to_string(),
                p.hbm_m_prefetch.to_string(),
                p.hbm_v_prefetch.to_string(),
                p.hbm_v_writeback.to_string(),
                p.act_fmt.0.to_string(),
                p.kv_fmt.0.to_string(),
                p.fp_setting.0.to_string(),
                p.int_width.to_string(),
                o(|x| x.accuracy_proxy),
                o(|x| x.latency_seconds),
                o(|x| x.area_proxy),
                r.fidelity.map(|f| format!("{f:?}")).unwrap_or_default(),
                r.violations.join("; "),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_front_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.front_points())?;
        Ok(())
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

pub fn random_point(rng: &mut ChaCha8Rng) -> DesignPoint {
    let (mx, fp) = (mx_choices(), fp_choices());
    DesignPoint {
        blen: pick(rng, &BLEN_RANGE),
        mlen: pick(rng, &MLEN_RANGE),
        vlen: pick(rng, &VLEN_RANGE),
        hbm_m_prefetch: pick(rng, &PREFETCH_RANGE),
        hbm_v_prefetch: pick(rng, &PREFETCH_RANGE),
        hbm_v_writeback: pick(rng, &PREFETCH_RANGE),
        act_fmt: DataFormatKey(pick(rng, &mx)),
        kv_fmt: DataFormatKey(pick(rng, &mx)),
        fp_setting: DataFormatKey(pick(rng, &fp)),
        int_width: pick(rng, &INT_WIDTHS),
    }
}

fn step<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, xs: &[T], cur: T) -> T {
    let i = xs.iter().position(|x| *x == cur).unwrap_or(0);
    let j = if i == 0 {
        1
    } else if i + 1 == xs.len() || rng.random_bool(0.5) {
        i - 1
    } else {
        i + 1
    };
    xs[j.min(xs.len() - 1)]
}

/// Move one or two parameters to a neighbouring grid value (formats jump
/// to any other choice).
pub fn neighbour(rng: &mut ChaCha8Rng, p: &DesignPoint) -> DesignPoint {
    let mut q = *p;
    let moves = rng.random_range(1..=2);
    for _ in 0..moves {
        match rng.random_range(0..10) {
            0 => q.blen = step(rng, &BLEN_RANGE, q.blen),
            1 => q.mlen = step(rng, &MLEN_RANGE, q.mlen),
            2 => q.vlen = step(rng, &VLEN_RANGE, q.vlen),
            3 => q.hbm_m_prefetch = step(rng, &PREFETCH_RANGE, q.hbm_m_prefetch),
            4 => q.hbm_v_prefetch = step(rng, &PREFETCH_RANGE, q.hbm_v_prefetch),
            5 => q.hbm_v_writeback = step(rng, &PREFETCH_RANGE, q.hbm_v_writeback),
            6 => q.act_fmt = DataFormatKey(pick(rng, &mx_choices())),
            7 => q.kv_fmt = DataFormatKey(pick(rng, &mx_choices())),
            8 => q.fp_setting = DataFormatKey(pick(rng, &fp_choices())),
            _ => q.int_width = step(rng, &INT_WIDTHS, q.int_width),
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExploreOptions {
    pub budget: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Draws allowed per evaluated candidate before giving up.
    pub max_draws_per_eval: usize,
    /// Random evaluations before the local search starts.
    pub warmup: usize,
    pub simulate_front: bool,
    /// Neighbours screened per local step.
    pub screen: usize,
}

impl ExploreOptions {
    pub fn new(budget: usize, sampler: Sampler, seed: u64) -> ExploreOptions {
        ExploreOptions { budget, sampler, seed, max_draws_per_eval: 2000, warmup: 10, simulate_front: false, screen: 8 }
    }
}

/// Draw candidates until `budget` feasible points are evaluated at
/// roofline fidelity. Rejected draws stay in the trace. Front points are
/// optionally re-scored at simulate fidelity before the final front.
pub fn explore(ev: &mut Evaluator, opts: &ExploreOptions) -> Result<ExploreResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut seen = BTreeMap::new();
    let max_draws = opts.budget.max(1) * opts.max_draws_per_eval;
    let mut draws = 0;
    let mut evaluated: Vec<usize> = Vec::new();
    let mut known = BTreeMap::new();
    while evaluated.len() < opts.budget && draws < max_draws {
        draws += 1;
        let local = opts.sampler == Sampler::GreedyLocal && evaluated.len() >= opts.warmup.min(opts.budget);
        let cand = if local {
            let pts: Vec<[f64; 3]> = evaluated.iter().map(|&i| trace[i].objectives.unwrap().as_array()).collect();
            let front = pareto_front(&pts);
            let fp: Vec<[f64; 3]> = front.iter().map(|&j| pts[j]).collect();
            let w = hv_contributions(&fp);
            // screen a few neighbours on the analytic objectives and keep
            // the one that would add the most hypervolume
            let mut best: Option<(f64, DesignPoint)> = None;
            for _ in 0..opts.screen {
                let parent = weighted_pick(&mut rng, &w);
                let q = neighbour(&mut rng, &trace[evaluated[front[parent]]].point);
                if seen.contains_key(&q) || !check_constraints(&q, &ev.cfg).is_empty() {
                    continue;
                }
                // accuracy seen earlier in this run, else the parent's
                let acc = known.get(&(DataFormatKey(q.act()), DataFormatKey(q.kv()))).copied().unwrap_or(fp[parent][0]);
                let guess = ev.predict(&q, acc);
                let mut with = fp.clone();
                with.push(guess);
                let hv = comparable_hypervolumes(&[fp.clone(), with]);
                let gain = hv[1] - hv[0];
                if best.as_ref().is_none_or(|b| gain > b.0) {
                    best = Some((gain, q));
                }
            }
            match best {
                Some((_, q)) => q,
                None => {
                    let parent = weighted_pick(&mut rng, &w);
                    neighbour(&mut rng, &trace[evaluated[front[parent]]].point)
                }
            }
        } else {
            random_point(&mut rng)
        };
        if seen.contains_key(&cand) {
            continue;
        }
        let bad = check_constraints(&cand, &ev.cfg);
        let index = trace.len();
        seen.insert(cand, index);
        if !bad.is_empty() {
            trace.push(TraceRecord { index, point: cand, feasible: false, violations: bad, objectives: None, fidelity: None });
            continue;
        }
        let (obj, fid) = ev.evaluate(&cand, Fidelity::Roofline)?;
        known.insert((DataFormatKey(cand.act()), DataFormatKey(cand.kv())), obj.accuracy_proxy);
        trace.push(TraceRecord { index, point: cand, feasible: true, violations: vec![], objectives: Some(obj), fidelity: Some(fid) });
        evaluated.push(index);
    }
    if evaluated.is_empty() {
        return Err(DseError::NoFeasible(draws));
    }
    let front_of = |trace: &[TraceRecord]| {
        let pts: Vec<[f64; 3]> = evaluated.iter().map(|&i| trace[i].objectives.unwrap().as_array()).collect();
        pareto_front(&pts).into_iter().map(|j| evaluated[j]).collect::<Vec<usize>>()
    };
    let mut front = front_of(&trace);
    if opts.simulate_front {
        for &i in &front {
            let (obj, fid) = ev.evaluate(&trace[i].point, Fidelity::Simulate)?;
            trace[i].objectives = Some(obj);
            trace[i].fidelity = Some(fid);
        }
        front = front_of(&trace);
    }
    Ok(ExploreResult { sampler: opts.sampler, seed: opts.seed, budget: opts.budget, trace, front })
}
