//! Quantize one heavy-tailed linear layer to MXINT4 three ways and compare
//! the output error on its calibration inputs.

use plena::formats::DataFormat;
use plena::quantizer::{
    clip_quantize_layer, gptq_quantize_layer, layer_output_error, rtn_quantize, CalibrationSet, DEFAULT_DAMPING, DEFAULT_PERCENTILES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

fn main() -> anyhow::Result<()> {
    let (n, k, m) = (64, 256, 128);
    let fmt: DataFormat = "MXINT4".parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = StudentT::new(3.0)?;
    let w: Vec<f64> = (0..n * k).map(|_| t.sample(&mut rng)).collect();
    let x: Vec<f64> = (0..m * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let calib = CalibrationSet::new("proj", x.clone(), m, k)?;

    let rtn = rtn_quantize(&w, n, k, fmt)?.dequantize()?;
    let clip = clip_quantize_layer(&w, n, k, &calib, fmt, &DEFAULT_PERCENTILES)?;
    let gptq = gptq_quantize_layer(&w, n, k, &calib, fmt, &DEFAULT_PERCENTILES, DEFAULT_DAMPING)?;

    println!("output error ||XW^T - XQ^T||_F on {m} calibration rows ({fmt})");
    println!("  rtn          {:10.3}", layer_output_error(&x, m, &w, &rtn, n, k));
    println!("  rtn + clip   {:10.3}", layer_output_error(&x, m, &w, &clip.weights(), n, k));
    println!("  gptq + clip  {:10.3}", layer_output_error(&x, m, &w, &gptq.weights(), n, k));

    let mut hist = std::collections::BTreeMap::new();
    for p in &gptq.percentiles {
        *hist.entry(format!("{p}")).or_insert(0) += 1;
    }
    println!("chosen clipping percentiles over {} row blocks: {hist:?}", gptq.percentiles.len());
    Ok(())
}
