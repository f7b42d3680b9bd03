//! Quantize a two-layer decoder to W4A8KV8, compile it, run it on the
//! emulator and compare the logits with a double-precision forward pass.

use plena::compiler::reference::Numerics;
use plena::compiler::{auto_prefetch_distance, compile_decoder, DecoderWeights, ModelSpec};
use plena::hbm::HbmConfig;
use plena::machine::ArchConfig;
use plena::quantizer::{forward, quantize_decoder, relative_error, Emulation, QuantPlan};

fn main() -> anyhow::Result<()> {
    let spec = ModelSpec { max_seq: 64, ..ModelSpec::tiny() };
    let tokens: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % spec.vocab).collect();
    let w = DecoderWeights::random(&spec, 7);
    let plan = QuantPlan::default();
    let (wq, report) = quantize_decoder(&spec, &w, &tokens, &plan)?;
    for l in &report.layers {
        println!("{:<24} rtn {:.3e}  gptq {:.3e}", l.name, l.rtn_error, l.gptq_error);
    }

    let mut arch = ArchConfig::new(8, 64, 64);
    (arch.weight_fmt, arch.act_fmt, arch.kv_fmt) = (plan.weight_fmt, plan.act_fmt, plan.kv_fmt);
    let hbm = HbmConfig::default();
    let c = compile_decoder(&arch, &hbm, &spec, &wq, &tokens, auto_prefetch_distance(&arch, &hbm))?;
    let (rep, m) = c.simulate(1_000_000_000)?;
    let logits = c.read_output(&m, "logits")?;
    println!("\n{rep}");

    let exact = forward(&spec, &w, &tokens, &Emulation::default())?.logits;
    let bound = Numerics::new(&arch).decoder(&spec, &wq, &tokens);
    println!("logits vs unquantized model: {:.3e}", relative_error(&logits, &exact));
    println!("logits vs quantized weights: {:.3e}", relative_error(&logits, &bound.v));
    println!("inside error budget: {}", bound.contains(&logits));
    Ok(())
}
