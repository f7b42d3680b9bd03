use std::fs;
use std::path::Path;
use std::process::Command;

use plena::cli::{self, QuantizeSummary, RunSummary};
use plena::isa::{assemble, Program};
use plena::machine::ExecutionReport;
use serde_json::json;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_plena"));
    for (k, _) in std::env::vars() {
        if k.starts_with("PLENA_") {
            c.env_remove(k);
        }
    }
    c
}

fn put(dir: &Path, name: &str, v: serde_json::Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

/// Manifest plus model file in `dir`, writing to `dir/out`.
fn setup(dir: &Path, model: serde_json::Value) -> String {
    put(dir, "model.json", model);
    put(dir, "manifest.json", json!({ "model": "model.json", "output_dir": "out", "seed": 3 }));
    dir.join("manifest.json").to_str().unwrap().to_string()
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn plena(args: &[&str]) -> i32 {
    let mut v = vec!["plena"];
    v.extend_from_slice(args);
    cli::run(v)
}

#[test]
fn break_program_takes_one_cycle() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("halt.s"), "C_BREAK\n").unwrap();
    let out = d.path().join("out");
    let code = plena(&["simulate", "--asm", d.path().join("halt.s").to_str().unwrap(), "--out", out.to_str().unwrap(), "--trace"]);
    assert_eq!(code, 0);
    let rep: ExecutionReport = read(&out.join("simulate/report.json"));
    assert_eq!(rep.cycles, 1);
    assert!(rep.halted);
    assert!(out.join("simulate/trace.csv").exists());
}

#[test]
fn timeout_flag_is_honored() {
    let d = tempfile::tempdir().unwrap();
    let body: String = (0..200).map(|_| "S_ADDI_INT x1, x1, 1\n").collect::<String>() + "C_BREAK\n";
    fs::write(d.path().join("long.s"), body).unwrap();
    let out = d.path().join("out");
    let asm = d.path().join("long.s");
    let code = plena(&["simulate", "--asm", asm.to_str().unwrap(), "--out", out.to_str().unwrap(), "--max-cycles", "20"]);
    assert_eq!(code, 1);
    let rep: ExecutionReport = read(&out.join("simulate/report.json"));
    assert!(!rep.halted);
    assert_eq!(plena(&["simulate", "--asm", asm.to_str().unwrap(), "--out", out.to_str().unwrap(), "--max-cycles", "1000"]), 0);
}

#[test]
fn empty_layer_list_gives_empty_report() {
    let d = tempfile::tempdir().unwrap();
    let m = setup(d.path(), json!({ "kind": "layers", "layers": [], "calibration_rows": 8 }));
    assert_eq!(plena(&["quantize", "--manifest", &m]), 0);
    let s: QuantizeSummary = read(&d.path().join("out/quant_report.json"));
    assert!(s.layers.is_empty());
    assert_eq!(fs::read_dir(d.path().join("out/quantized")).unwrap().count(), 0);
}

#[test]
fn toy_decoder_reports_every_projection() {
    let d = tempfile::tempdir().unwrap();
    let spec = json!({ "hidden": 64, "layers": 1, "heads": 2, "kv_heads": 1, "head_dim": 32, "ffn_dim": 128, "vocab": 64, "max_seq": 16, "batch": 1 });
    let m = setup(d.path(), json!({ "kind": "decoder", "spec": spec, "tokens": 16 }));
    assert_eq!(plena(&["quantize", "--manifest", &m]), 0);
    let s: QuantizeSummary = read(&d.path().join("out/quant_report.json"));
    assert_eq!(s.layers.len(), 8);
    assert!(s.layers.iter().all(|l| l.gptq_error.is_finite() && l.rtn_error > 0.0));
    assert!(s.gptq_logits_error.unwrap() > 0.0);
    assert_eq!(fs::read_dir(d.path().join("out/quantized")).unwrap().count(), 8);
}

#[test]
fn unknown_format_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let m = setup(d.path(), json!({ "kind": "layers", "layers": [], "calibration_rows": 8 }));
    assert_eq!(plena(&["quantize", "--manifest", &m, "--weight-fmt", "MXINT99X"]), 2);
    put(d.path(), "quant.json", json!({ "weight_fmt": "BOGUS" }));
    put(d.path(), "manifest.json", json!({ "model": "model.json", "quant": "quant.json", "output_dir": "out" }));
    assert_eq!(plena(&["quantize", "--manifest", &m]), 2);
}

#[test]
fn gemm_compiles_disassembles_and_replays() {
    let d = tempfile::tempdir().unwrap();
    let m = setup(d.path(), json!({ "kind": "gemm", "m": 8, "k": 128, "n": 64 }));
    assert_eq!(plena(&["compile", "--manifest", &m]), 0);
    let dir = d.path().join("out/compiled");
    let prog = Program::read_from(&mut fs::File::open(dir.join("program.plsm")).unwrap()).unwrap();
    let back = assemble(&fs::read_to_string(dir.join("program.s")).unwrap()).unwrap();
    assert_eq!(back, prog);
    assert_eq!(plena(&["simulate", "--manifest", &m]), 0);
    let a: ExecutionReport = read(&d.path().join("out/simulate/report.json"));
    assert_eq!(plena(&["simulate", "--manifest", &m]), 0);
    let b: ExecutionReport = read(&d.path().join("out/simulate/report.json"));
    assert_eq!(a, b);
    assert!(a.halted && a.mac_ops == 8 * 128 * 64);
    let outs: std::collections::BTreeMap<String, Vec<f64>> = read(&d.path().join("out/simulate/outputs.json"));
    assert_eq!(outs.values().next().unwrap().len(), 8 * 64);
}

#[test]
fn infeasible_tiling_reports_constraints() {
    let d = tempfile::tempdir().unwrap();
    let m = setup(d.path(), json!({ "kind": "gemm", "m": 8, "k": 100, "n": 64 }));
    assert_eq!(plena(&["compile", "--manifest", &m]), 3);
    let v: Vec<String> = read(&d.path().join("out/constraints.json"));
    assert!(v[0].contains("multiple of MLEN"), "{v:?}");
}

#[test]
fn decoder_layer_compiles() {
    let d = tempfile::tempdir().unwrap();
    let spec = json!({ "hidden": 64, "layers": 1, "heads": 2, "kv_heads": 1, "head_dim": 32, "ffn_dim": 128, "vocab": 64, "max_seq": 16, "batch": 1 });
    put(d.path(), "model.json", json!({ "kind": "decoder", "spec": spec, "tokens": 8 }));
    put(d.path(), "arch.json", json!({ "blen": 8, "mlen": 32, "vlen": 32 }));
    put(d.path(), "manifest.json", json!({ "arch": "arch.json", "model": "model.json", "output_dir": "out" }));
    let m = d.path().join("manifest.json").to_str().unwrap().to_string();
    assert_eq!(plena(&["compile", "--manifest", &m]), 0);
    assert_eq!(plena(&["simulate", "--manifest", &m]), 0);
    let rep: ExecutionReport = read(&d.path().join("out/simulate/report.json"));
    assert!(rep.halted);
}

#[test]
fn dse_writes_trace_and_front_and_replays() {
    let d = tempfile::tempdir().unwrap();
    let spec = json!({ "hidden": 64, "layers": 1, "heads": 2, "kv_heads": 1, "head_dim": 32, "ffn_dim": 128, "vocab": 64, "max_seq": 16, "batch": 1 });
    let m = setup(d.path(), json!({ "kind": "decoder", "spec": spec, "tokens": 16 }));
    assert_eq!(plena(&["dse", "--manifest", &m, "--budget", "6", "--sampler", "random"]), 0);
    let t1 = fs::read(d.path().join("out/dse/trace.csv")).unwrap();
    let f1 = fs::read(d.path().join("out/dse/front.json")).unwrap();
    assert_eq!(plena(&["dse", "--manifest", &m, "--budget", "6", "--sampler", "random"]), 0);
    assert_eq!(fs::read(d.path().join("out/dse/trace.csv")).unwrap(), t1);
    assert_eq!(fs::read(d.path().join("out/dse/front.json")).unwrap(), f1);
}

#[test]
fn report_needs_artifacts() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(plena(&["report", "--out", d.path().to_str().unwrap()]), 1);
}

#[test]
fn report_has_utilization_ratio_and_stable_schema() {
    let d = tempfile::tempdir().unwrap();
    put(d.path(), "arch.json", json!({ "blen": 8, "mlen": 512, "vlen": 512 }));
    put(d.path(), "model.json", json!({ "kind": "gemm", "m": 8, "k": 1024, "n": 256 }));
    put(d.path(), "manifest.json", json!({ "arch": "arch.json", "model": "model.json", "output_dir": "out" }));
    let m = d.path().join("manifest.json");
    let m = m.to_str().unwrap();
    assert_eq!(plena(&["compile", "--manifest", m]), 0);
    assert_eq!(plena(&["simulate", "--manifest", m]), 0);
    assert_eq!(plena(&["report", "--manifest", m]), 0);
    let first = fs::read(d.path().join("out/summary.json")).unwrap();
    let s: RunSummary = serde_json::from_slice(&first).unwrap();
    let ratio = s.simulated_utilization_ratio.unwrap();
    assert!(ratio > 1.0, "{ratio}");
    let row = s.comparison.iter().find(|c| (c.m, c.k, c.n) == (8, 4096, 4096)).unwrap();
    assert_eq!(row.square_side, 64);
    assert!(fs::read_to_string(d.path().join("out/summary.txt")).unwrap().contains("simulated utilization ratio"));
    assert_eq!(plena(&["report", "--manifest", m]), 0);
    assert_eq!(fs::read(d.path().join("out/summary.json")).unwrap(), first);
}

#[test]
fn flag_beats_env_beats_manifest() {
    let d = tempfile::tempdir().unwrap();
    let m = setup(d.path(), json!({ "kind": "layers", "layers": [{ "name": "a", "n": 16, "k": 32 }], "calibration_rows": 8 }));
    let (env_out, flag_out) = (d.path().join("env"), d.path().join("flag"));
    let st = bin().args(["quantize", "--manifest", &m]).status().unwrap();
    assert!(st.success());
    assert!(d.path().join("out/quant_report.json").exists());
    let st = bin().args(["quantize", "--manifest", &m]).env("PLENA_OUT", &env_out).status().unwrap();
    assert!(st.success());
    assert!(env_out.join("quant_report.json").exists());
    let st = bin().args(["quantize", "--manifest", &m, "--out", flag_out.to_str().unwrap()]).env("PLENA_OUT", &env_out).env("PLENA_SEED", "9").status().unwrap();
    assert!(st.success());
    assert!(flag_out.join("quantized/a.mxt").exists());
    // seed 9 from the environment overrides the manifest's seed 3
    let a: QuantizeSummary = read(&env_out.join("quant_report.json"));
    let b: QuantizeSummary = read(&flag_out.join("quant_report.json"));
    assert_ne!(a.layers[0].rtn_error, b.layers[0].rtn_error);
    let mut names: Vec<String> = fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["env", "flag", "manifest.json", "model.json", "out"]);
}

#[test]
fn bin_exit_codes() {
    assert!(!bin().args(["compile"]).status().unwrap().success());
    assert_eq!(bin().args(["nonsense"]).status().unwrap().code(), Some(2));
    assert!(bin().args(["--help"]).status().unwrap().success());
}
