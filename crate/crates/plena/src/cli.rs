//! Command-line driver: `quantize`, `compile`, `simulate`, `dse`, `report`.
//!
//! Every option is a long flag mirrored by a `PLENA_*` environment variable.
//! Values resolve flag first, then environment, then the run manifest.
//! Everything a command writes lands under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::compiler::roofline::{feasibility, schedule_search, GemmShape};
use crate::compiler::{
    auto_prefetch_distance, compile_attention, compile_decoder, compile_gemm, CompileError, Compiled, DecoderWeights, GemmSchedule, ModelSpec,
};
use crate::dse::{explore, DseConfig, Evaluator, ExploreOptions, Sampler};
use crate::formats::{DataFormat, MXTensor};
use crate::hbm::{HbmConfig, HbmImage};
use crate::isa::{assemble, disassemble};
use crate::machine::{flattened_array_gemm, square_array_gemm, ArchConfig, ExecutionReport, Machine, MachineError};
use crate::quantizer::{
    clip_quantize_layer, gptq_quantize_layer, layer_output_error, quantize_decoder, rtn_quantize, CalibrationSet, LayerReport, QuantPlan,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_CYCLES: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, manifest or config files. Exit code 2.
    #[error("usage: {0}")]
    Usage(String),
    /// The workload does not fit the architecture. Exit code 3.
    #[error("constraints violated:\n  {}", .0.join("\n  "))]
    Constraint(Vec<String>),
    #[error(transparent)]
    Run(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Constraint(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "plena", version, about = "Quantize, compile, simulate and explore flattened-systolic accelerator designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize the workload's weights; writes `quantized/*.mxt` and `quant_report.json`.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Weight format, e.g. MXINT4 or MXFP_E4M3@32.
        #[arg(long, env = "PLENA_WEIGHT_FMT")]
        weight_fmt: Option<DataFormat>,
    },
    /// Lower the workload to a program and HBM image under `compiled/`.
    Compile {
        #[command(flatten)]
        common: Common,
        /// Weight slices requested ahead of use; defaults to the latency-covering distance.
        #[arg(long, env = "PLENA_PREFETCH_DISTANCE")]
        prefetch_distance: Option<usize>,
    },
    /// Run a compiled package or an assembly file; writes `simulate/`.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Compiled package directory (defaults to `<out>/compiled`).
        #[arg(long, env = "PLENA_COMPILED", conflicts_with = "asm")]
        compiled: Option<PathBuf>,
        /// Assembly source run against an empty HBM image.
        #[arg(long, env = "PLENA_ASM")]
        asm: Option<PathBuf>,
        #[arg(long, env = "PLENA_MAX_CYCLES")]
        max_cycles: Option<u64>,
        /// Also write the per-instruction trace.
        #[arg(long, env = "PLENA_TRACE")]
        trace: bool,
    },
    /// Explore the design space; writes `dse/trace.csv` and `dse/front.json`.
    Dse {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "PLENA_BUDGET")]
        budget: Option<usize>,
        #[arg(long, env = "PLENA_SAMPLER", value_enum)]
        sampler: Option<SamplerArg>,
        /// Re-score front points with the cycle emulator.
        #[arg(long, env = "PLENA_SIMULATE_FRONT")]
        simulate_front: bool,
    },
    /// Summarize a run directory into `summary.txt` and `summary.json`.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory (defaults to the output directory).
        #[arg(long, env = "PLENA_RUN_DIR")]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, env = "PLENA_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "PLENA_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "PLENA_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Random,
    GreedyLocal,
}

/// Run manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub arch: Option<PathBuf>,
    #[serde(default)]
    pub hbm: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub quant: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub max_cycles: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDesc {
    pub name: String,
    pub n: usize,
    pub k: usize,
}

/// Model description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    Decoder {
        spec: ModelSpec,
        /// Prompt length; defaults to `spec.max_seq`.
        #[serde(default)]
        tokens: Option<usize>,
    },
    Gemm {
        m: usize,
        k: usize,
        n: usize,
        #[serde(default)]
        schedule: Option<GemmSchedule>,
    },
    Attention {
        tq: usize,
        t: usize,
        head_dim: usize,
        #[serde(default)]
        causal: bool,
    },
    /// Standalone linear layers with Student-t weights and Gaussian calibration rows.
    Layers {
        layers: Vec<LayerDesc>,
        calibration_rows: usize,
    },
}

/// Fully resolved inputs of one command.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub out: PathBuf,
    pub seed: u64,
    pub arch: ArchConfig,
    pub hbm: HbmConfig,
    pub workload: Option<Workload>,
    pub plan: Option<QuantPlan>,
    pub budget: Option<usize>,
    pub max_cycles: Option<u64>,
}

fn read_json_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Overlay the keys of `patch` on the serialized `base`, rejecting keys
/// `base` does not have.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Value, what: &Path) -> Result<T> {
    let mut v = serde_json::to_value(base).context("serialize defaults")?;
    let (Value::Object(dst), Value::Object(src)) = (&mut v, patch) else {
        return usage(format!("{}: expected a JSON object", what.display()));
    };
    for (k, x) in src {
        if !dst.contains_key(&k) {
            return usage(format!("{}: unknown field `{k}`", what.display()));
        }
        dst.insert(k, x);
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", what.display())))
}

/// Architecture file: any subset of `ArchConfig` fields; missing ones
/// default from `ArchConfig::new(blen, mlen, vlen)`.
pub fn load_arch(path: &Path) -> Result<ArchConfig> {
    let v = read_json_value(path)?;
    let dim = |k: &str, d: usize| v.get(k).and_then(Value::as_u64).map_or(d, |x| x as usize);
    let base = ArchConfig::new(dim("blen", 8), dim("mlen", 64), dim("vlen", 64));
    let arch: ArchConfig = overlay(&base, v, path)?;
    arch.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(arch)
}

impl Common {
    pub fn resolve(&self) -> Result<Resolved> {
        let (m, root) = match &self.manifest {
            Some(p) => {
                let m: RunManifest = serde_json::from_value(read_json_value(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                (m, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (RunManifest::default(), PathBuf::new()),
        };
        let at = |p: &Option<PathBuf>| p.as_ref().map(|p| root.join(p));
        let out = match self.out.clone().or(at(&m.output_dir)) {
            Some(o) => o,
            None => return usage("no output directory: pass --out, set PLENA_OUT or give output_dir in the manifest"),
        };
        let arch = match at(&m.arch) {
            Some(p) => load_arch(&p)?,
            None => ArchConfig::new(8, 64, 64),
        };
        let hbm = match at(&m.hbm) {
            Some(p) => overlay(&HbmConfig::default(), read_json_value(&p)?, &p)?,
            None => HbmConfig::default(),
        };
        let workload = match at(&m.model) {
            Some(p) => Some(serde_json::from_value(read_json_value(&p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let plan = match at(&m.quant) {
            Some(p) => {
                let plan: QuantPlan = overlay(&QuantPlan::default(), read_json_value(&p)?, &p)?;
                plan.validate().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Some(plan)
            }
            None => None,
        };
        Ok(Resolved { out, seed: self.seed.or(m.seed).unwrap_or(0), arch, hbm, workload, plan, budget: m.budget, max_cycles: m.max_cycles })
    }
}

impl Resolved {
    fn workload(&self) -> Result<&Workload> {
        self.workload.as_ref().ok_or_else(|| CliError::Usage("manifest names no model file".into()))
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).with_context(|| format!("create {}", d.display()))?;
        Ok(d)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("create {}", d.display()))?;
    }
    let text = serde_json::to_string_pretty(value).context("serialize")?;
    fs::write(path, text + "\n").with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn student_t(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let t = StudentT::new(3.0).expect("positive dof");
    (0..n).map(|_| t.sample(rng)).collect()
}

/// Token ids of the decoder workload.
pub fn prompt(spec: &ModelSpec, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7463_6b6e);
    (0..len).map(|_| rng.random_range(0..spec.vocab)).collect()
}

fn decoder_tokens(spec: &ModelSpec, tokens: Option<usize>, seed: u64) -> Vec<usize> {
    prompt(spec, tokens.unwrap_or(spec.max_seq), seed)
}

/// Per-layer quantization summary written by `quantize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeSummary {
    pub schema_version: u32,
    pub weight_fmt: DataFormat,
    pub layers: Vec<LayerReport>,
    /// Clip-only relative output error per layer (standalone layers only).
    pub clip_errors: BTreeMap<String, f64>,
    pub rotated_layers: Vec<String>,
    pub rtn_logits_error: Option<f64>,
    pub gptq_logits_error: Option<f64>,
}

fn save_tensor(dir: &Path, name: &str, t: &MXTensor) -> Result<()> {
    let path = dir.join(format!("{name}.mxt"));
    let mut f = fs::File::create(&path).with_context(|| format!("create {}", path.display()))?;
    t.write_to(&mut f).context("write tensor")?;
    Ok(())
}

fn histogram(percentiles: &[f64]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for p in percentiles {
        *h.entry(format!("{p}")).or_insert(0) += 1;
    }
    h
}

pub fn cmd_quantize(r: &Resolved, weight_fmt: Option<DataFormat>) -> Result<QuantizeSummary> {
    let mut plan = r.plan.clone().unwrap_or_default();
    if let Some(f) = weight_fmt {
        plan.weight_fmt = f;
    }
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let fmt = plan.weight_fmt;
    let dir = r.subdir("quantized")?;
    let mut summary = QuantizeSummary {
        schema_version: SCHEMA_VERSION,
        weight_fmt: fmt,
        layers: Vec::new(),
        clip_errors: BTreeMap::new(),
        rotated_layers: Vec::new(),
        rtn_logits_error: None,
        gptq_logits_error: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let standalone = |name: &str, w: Vec<f64>, n: usize, k: usize, x: Vec<f64>, m: usize, s: &mut QuantizeSummary| -> Result<()> {
        let calib = CalibrationSet::new(name, x.clone(), m, k).context("calibration")?;
        let rtn = rtn_quantize(&w, n, k, fmt).context("rtn")?.dequantize().context("dequantize")?;
        let clip = clip_quantize_layer(&w, n, k, &calib, fmt, &plan.percentiles).context("clip")?;
        let q = gptq_quantize_layer(&w, n, k, &calib, fmt, &plan.percentiles, plan.damping).context("gptq")?;
        let base = layer_output_error(&x, m, &w, &vec![0.0; w.len()], n, k).max(f64::MIN_POSITIVE);
        s.layers.push(LayerReport {
            name: name.to_string(),
            n,
            k,
            rtn_error: layer_output_error(&x, m, &w, &rtn, n, k) / base,
            gptq_error: layer_output_error(&x, m, &w, &q.weights(), n, k) / base,
            percentile_histogram: histogram(&q.percentiles),
        });
        s.clip_errors.insert(name.to_string(), layer_output_error(&x, m, &w, &clip.weights(), n, k) / base);
        save_tensor(&dir, name, &q.q)
    };
    match r.workload()? {
        Workload::Layers { layers, calibration_rows } => {
            for l in layers {
                let w = student_t(&mut rng, l.n * l.k);
                let x = normal(&mut rng, calibration_rows * l.k);
                standalone(&l.name, w, l.n, l.k, x, *calibration_rows, &mut summary)?;
            }
        }
        Workload::Gemm { m, k, n, .. } => {
            let x = normal(&mut rng, m * k);
            let w = normal(&mut rng, n * k);
            standalone("gemm", w, *n, *k, x, *m, &mut summary)?;
        }
        Workload::Attention { .. } => return usage("attention workloads carry no weights to quantize"),
        Workload::Decoder { spec, tokens } => {
            let w = DecoderWeights::random(spec, r.seed);
            let toks = decoder_tokens(spec, *tokens, r.seed);
            let (qw, rep) = quantize_decoder(spec, &w, &toks, &plan).context("quantize decoder")?;
            for l in crate::quantizer::decoder_layers(spec, &qw) {
                let t = MXTensor::quantize(&l.w, &[l.n, l.k], fmt).context("pack weights")?;
                save_tensor(&dir, &l.name, &t)?;
            }
            summary.layers = rep.layers;
            summary.rotated_layers = rep.rotated_layers.into_iter().collect();
            summary.rtn_logits_error = Some(rep.rtn_logits_error);
            summary.gptq_logits_error = Some(rep.gptq_logits_error);
        }
    }
    write_json(&r.out.join("quant_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub schedule: GemmSchedule,
    pub estimated_cycles: f64,
    pub hbm_bytes: u64,
    pub bound: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileSummary {
    pub schema_version: u32,
    pub kind: String,
    pub arch: ArchConfig,
    pub instructions: usize,
    pub hbm_bytes: u64,
    pub prefetch_distance: usize,
    /// Ranked candidate schedules (GEMM workloads only).
    pub schedules: Vec<ScheduleRow>,
    pub outputs: Vec<String>,
}

fn constraint(e: CompileError) -> CliError {
    match e {
        CompileError::Constraint(v) => CliError::Constraint(v),
        e => CliError::Run(e.into()),
    }
}

pub fn cmd_compile(r: &Resolved, prefetch_distance: Option<usize>) -> Result<CompileSummary> {
    let mut arch = r.arch.clone();
    if let Some(p) = &r.plan {
        arch.weight_fmt = p.weight_fmt;
        arch.act_fmt = p.act_fmt;
        arch.kv_fmt = p.kv_fmt;
    }
    let distance = prefetch_distance.unwrap_or_else(|| auto_prefetch_distance(&arch, &r.hbm));
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let mut schedules = Vec::new();
    let (kind, compiled) = match r.workload()? {
        Workload::Gemm { m, k, n, schedule } => {
            let shape = GemmShape { m: *m, k: *k, n: *n };
            let sched = schedule.unwrap_or(GemmSchedule::streaming(distance));
            let sched = GemmSchedule { prefetch_distance: prefetch_distance.unwrap_or(sched.prefetch_distance), ..sched };
            let v = feasibility(shape, &sched, &arch);
            if !v.is_empty() {
                write_json(&r.out.join("constraints.json"), &v)?;
                return Err(CliError::Constraint(v));
            }
            let mut dists = vec![0, 1, distance, sched.prefetch_distance];
            dists.sort_unstable();
            dists.dedup();
            for c in schedule_search(shape, &arch, &r.hbm, &dists).map_err(constraint)? {
                schedules.push(ScheduleRow {
                    schedule: c.schedule,
                    estimated_cycles: c.estimate.cycles,
                    hbm_bytes: c.estimate.hbm_bytes,
                    bound: format!("{:?}", c.estimate.bound),
                });
            }
            let x = normal(&mut rng, m * k);
            let w = normal(&mut rng, n * k);
            ("gemm", compile_gemm(&arch, &r.hbm, &x, *m, &w, *n, *k, &sched))
        }
        Workload::Attention { tq, t, head_dim, causal } => {
            let q = normal(&mut rng, tq * head_dim);
            let k = normal(&mut rng, t * head_dim);
            let v = normal(&mut rng, t * head_dim);
            ("attention", compile_attention(&arch, &r.hbm, &q, &k, &v, *tq, *t, *head_dim, *causal))
        }
        Workload::Decoder { spec, tokens } => {
            let w = DecoderWeights::random(spec, r.seed);
            let toks = decoder_tokens(spec, *tokens, r.seed);
            let w = match &r.plan {
                Some(plan) => quantize_decoder(spec, &w, &toks, plan).context("quantize decoder")?.0,
                None => w,
            };
            ("decoder", compile_decoder(&arch, &r.hbm, spec, &w, &toks, distance))
        }
        Workload::Layers { .. } => return usage("standalone layers are quantized, not compiled"),
    };
    let compiled = match compiled {
        Ok(c) => c,
        Err(CompileError::Constraint(v)) => {
            write_json(&r.out.join("constraints.json"), &v)?;
            return Err(CliError::Constraint(v));
        }
        Err(e) => return Err(CliError::Run(e.into())),
    };
    let dir = r.out.join("compiled");
    compiled.save(&dir).context("save package")?;
    fs::write(dir.join("program.s"), disassemble(&compiled.program)).context("write disassembly")?;
    let summary = CompileSummary {
        schema_version: SCHEMA_VERSION,
        kind: kind.into(),
        arch,
        instructions: compiled.program.len(),
        hbm_bytes: compiled.image.used_bytes(),
        prefetch_distance: distance,
        schedules,
        outputs: compiled.outputs.keys().cloned().collect(),
    };
    write_json(&r.out.join("compile_report.json"), &summary)?;
    Ok(summary)
}

pub struct SimulateArgs {
    pub compiled: Option<PathBuf>,
    pub asm: Option<PathBuf>,
    pub max_cycles: Option<u64>,
    pub trace: bool,
}

fn finish_run(m: &mut Machine, res: std::result::Result<ExecutionReport, MachineError>, dir: &Path, trace: bool) -> Result<ExecutionReport> {
    if trace {
        m.write_trace_csv(&dir.join("trace.csv")).context("write trace")?;
    }
    match res {
        Ok(rep) => {
            write_json(&dir.join("report.json"), &rep)?;
            fs::write(dir.join("report.txt"), rep.to_string()).context("write report")?;
            Ok(rep)
        }
        Err(MachineError::Timeout(rep)) => {
            write_json(&dir.join("report.json"), &rep)?;
            Err(CliError::Run(anyhow::anyhow!("timeout after {} cycles", rep.cycles)))
        }
        Err(e) => Err(CliError::Run(e.into())),
    }
}

pub fn cmd_simulate(r: &Resolved, a: &SimulateArgs) -> Result<ExecutionReport> {
    let max_cycles = a.max_cycles.or(r.max_cycles).unwrap_or(DEFAULT_MAX_CYCLES);
    let dir = r.subdir("simulate")?;
    if let Some(src) = &a.asm {
        let text = fs::read_to_string(src).map_err(|e| CliError::Usage(format!("{}: {e}", src.display())))?;
        let program = assemble(&text).map_err(|e| CliError::Usage(format!("{}: {e}", src.display())))?;
        let mut m = Machine::new(r.arch.clone(), HbmImage::new(r.hbm)).context("machine")?;
        if a.trace {
            m.enable_trace();
        }
        let res = m.run(&program, max_cycles);
        return finish_run(&mut m, res, &dir, a.trace);
    }
    let src = a.compiled.clone().unwrap_or_else(|| r.out.join("compiled"));
    let c = Compiled::load(&src).map_err(|e| CliError::Usage(format!("{}: {e}", src.display())))?;
    let mut m = c.machine().context("machine")?;
    if a.trace {
        m.enable_trace();
    }
    let res = m.run(&c.program, max_cycles);
    let ok = res.is_ok();
    let rep = finish_run(&mut m, res, &dir, a.trace)?;
    if ok {
        let mut outs = BTreeMap::new();
        for name in c.outputs.keys() {
            outs.insert(name.clone(), c.read_output(&m, name).context("read output")?);
        }
        write_json(&dir.join("outputs.json"), &outs)?;
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseSummary {
    pub schema_version: u32,
    pub sampler: Sampler,
    pub seed: u64,
    pub budget: usize,
    pub evaluated: usize,
    pub front: Vec<usize>,
}

pub fn cmd_dse(r: &Resolved, budget: Option<usize>, sampler: Option<SamplerArg>, simulate_front: bool) -> Result<DseSummary> {
    let mut cfg = DseConfig { base: r.arch.clone(), hbm: r.hbm, ..DseConfig::default() };
    if let Some(Workload::Decoder { spec, tokens }) = &r.workload {
        cfg.model = spec.clone();
        if let Some(t) = tokens {
            cfg.tokens = *t;
            cfg.accuracy_tokens = cfg.accuracy_tokens.min(*t);
        }
    }
    if let Some(p) = &r.plan {
        cfg.weight_fmt = p.weight_fmt;
    }
    cfg.weight_seed = r.seed;
    let sampler = match sampler.unwrap_or(SamplerArg::GreedyLocal) {
        SamplerArg::Random => Sampler::Random,
        SamplerArg::GreedyLocal => Sampler::GreedyLocal,
    };
    let budget = budget.or(r.budget).unwrap_or(50);
    let mut ev = Evaluator::new(cfg).context("evaluator")?;
    let mut opts = ExploreOptions::new(budget, sampler, r.seed);
    opts.simulate_front = simulate_front;
    let res = explore(&mut ev, &opts).context("explore")?;
    let dir = r.subdir("dse")?;
    res.write_trace_csv(fs::File::create(dir.join("trace.csv")).context("create trace")?).context("write trace")?;
    res.write_front_json(fs::File::create(dir.join("front.json")).context("create front")?).context("write front")?;
    let summary = DseSummary { schema_version: SCHEMA_VERSION, sampler, seed: r.seed, budget, evaluated: res.evaluated().count(), front: res.front.clone() };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One line of the square-vs-flattened table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayComparison {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub pes: u64,
    pub square_side: u64,
    pub square_utilization: f64,
    pub flattened_utilization: f64,
    pub ratio: f64,
}

/// GEMM shapes of the comparison table.
pub const COMPARISON_SHAPES: [(u64, u64, u64); 5] = [(1, 4096, 4096), (8, 4096, 4096), (32, 4096, 11008), (128, 4096, 4096), (2048, 4096, 4096)];

/// Closed-form utilization of a square array and a flattened array with the
/// same PE count (`BLEN × MLEN`, rounded down to a square).
pub fn compare_arrays(arch: &ArchConfig, shapes: &[(u64, u64, u64)]) -> Vec<ArrayComparison> {
    let pes = (arch.blen * arch.mlen) as u64;
    let side = (pes as f64).sqrt().floor() as u64;
    shapes
        .iter()
        .map(|&(m, k, n)| {
            let sq = square_array_gemm(m, k, n, side);
            let fl = flattened_array_gemm(m, k, n, arch);
            ArrayComparison {
                m,
                k,
                n,
                pes,
                square_side: side,
                square_utilization: sq.utilization,
                flattened_utilization: fl.utilization,
                ratio: fl.utilization / sq.utilization,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub arch: ArchConfig,
    pub comparison: Vec<ArrayComparison>,
    pub compile: Option<CompileSummary>,
    pub simulate: Option<ExecutionReport>,
    /// Simulated streaming utilization over the square-array closed form
    /// for the same GEMM, when the run compiled one.
    pub simulated_utilization_ratio: Option<f64>,
    pub quantize: Option<QuantizeSummary>,
    pub dse: Option<DseSummary>,
}

fn read_opt<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?))
}

pub fn cmd_report(r: &Resolved, run_dir: Option<&Path>) -> Result<RunSummary> {
    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| r.out.clone());
    let compile: Option<CompileSummary> = read_opt(&dir.join("compile_report.json"))?;
    let simulate: Option<ExecutionReport> = read_opt(&dir.join("simulate/report.json"))?;
    let quantize: Option<QuantizeSummary> = read_opt(&dir.join("quant_report.json"))?;
    let dse: Option<DseSummary> = read_opt(&dir.join("dse/summary.json"))?;
    if compile.is_none() && simulate.is_none() && quantize.is_none() && dse.is_none() {
        return Err(CliError::Run(anyhow::anyhow!("no run artifacts in {}", dir.display())));
    }
    let arch = compile.as_ref().map_or_else(|| r.arch.clone(), |c| c.arch.clone());
    let mut shapes = COMPARISON_SHAPES.to_vec();
    let mut simulated_utilization_ratio = None;
    if let (Some(c), Some(s), Some(Workload::Gemm { m, k, n, .. })) = (&compile, &simulate, &r.workload) {
        if c.kind == "gemm" {
            let side = ((arch.blen * arch.mlen) as f64).sqrt().floor() as u64;
            let sq = square_array_gemm(*m as u64, *k as u64, *n as u64, side);
            simulated_utilization_ratio = Some(s.streaming_utilization / sq.utilization);
            let shape = (*m as u64, *k as u64, *n as u64);
            if !shapes.contains(&shape) {
                shapes.push(shape);
            }
        }
    }
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        comparison: compare_arrays(&arch, &shapes),
        arch,
        compile,
        simulate,
        simulated_utilization_ratio,
        quantize,
        dse,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    fs::write(dir.join("summary.txt"), render(&summary)).context("write summary")?;
    Ok(summary)
}

/// Text form of a run summary.
pub fn render(s: &RunSummary) -> String {
    use std::fmt::Write as _;
    let mut o = String::new();
    let a = &s.arch;
    let _ = writeln!(o, "arch BLEN={} MLEN={} VLEN={}", a.blen, a.mlen, a.vlen);
    let _ = writeln!(o, "\nsquare vs flattened (equal PE count)");
    let _ = writeln!(o, "{:>6} {:>6} {:>6} {:>6} {:>8} {:>10} {:>7}", "M", "K", "N", "side", "square", "flattened", "ratio");
    for c in &s.comparison {
        let _ = writeln!(
            o,
            "{:>6} {:>6} {:>6} {:>6} {:>8.4} {:>10.4} {:>7.2}",
            c.m, c.k, c.n, c.square_side, c.square_utilization, c.flattened_utilization, c.ratio
        );
    }
    if let Some(c) = &s.compile {
        let _ = writeln!(o, "\ncompiled {}: {} instructions, {} HBM bytes, prefetch distance {}", c.kind, c.instructions, c.hbm_bytes, c.prefetch_distance);
    }
    if let Some(r) = &s.simulate {
        let _ = writeln!(o, "\nsimulation\n{r}");
    }
    if let Some(x) = s.simulated_utilization_ratio {
        let _ = writeln!(o, "simulated utilization ratio (flattened / square): {x:.2}");
    }
    if let Some(q) = &s.quantize {
        let _ = writeln!(o, "\nquantization ({})", q.weight_fmt);
        for l in &q.layers {
            let _ = writeln!(o, "  {:<24} rtn {:.4e}  gptq {:.4e}", l.name, l.rtn_error, l.gptq_error);
        }
        if let (Some(a), Some(b)) = (q.rtn_logits_error, q.gptq_logits_error) {
            let _ = writeln!(o, "  logits: rtn {a:.4e}  gptq {b:.4e}");
        }
    }
    if let Some(d) = &s.dse {
        let _ = writeln!(o, "\ndse {:?} seed {}: {} evaluated, {} on the front", d.sampler, d.seed, d.evaluated, d.front.len());
    }
    o
}

/// Parse `args` and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("plena: {e}");
            e.exit_code()
        }
    }
}

/// Run one command, returning a one-line result.
pub fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Quantize { common, weight_fmt } => {
            let r = common.resolve()?;
            let s = cmd_quantize(&r, *weight_fmt)?;
            Ok(format!("quantized {} layers into {}", s.layers.len(), r.out.display()))
        }
        Command::Compile { common, prefetch_distance } => {
            let r = common.resolve()?;
            let s = cmd_compile(&r, *prefetch_distance)?;
            Ok(format!("compiled {} into {} instructions", s.kind, s.instructions))
        }
        Command::Simulate { common, compiled, asm, max_cycles, trace } => {
            let r = common.resolve()?;
            let a = SimulateArgs { compiled: compiled.clone(), asm: asm.clone(), max_cycles: *max_cycles, trace: *trace };
            let rep = cmd_simulate(&r, &a)?;
            Ok(format!("{} cycles, utilization {:.4}", rep.cycles, rep.utilization))
        }
        Command::Dse { common, budget, sampler, simulate_front } => {
            let r = common.resolve()?;
            let s = cmd_dse(&r, *budget, *sampler, *simulate_front)?;
            Ok(format!("evaluated {} points, {} on the front", s.evaluated, s.front.len()))
        }
        Command::Report { common, run_dir } => {
            let r = common.resolve()?;
            let s = cmd_report(&r, run_dir.as_deref())?;
            Ok(render(&s))
        }
    }
}
