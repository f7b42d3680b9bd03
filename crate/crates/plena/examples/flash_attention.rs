//! Lower causal attention for growing sequence lengths and check the output
//! and the off-chip traffic, which grows linearly with T.

use plena::compiler::compile_attention;
use plena::hbm::HbmConfig;
use plena::machine::ArchConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attention(q: &[f64], k: &[f64], v: &[f64], t: usize, hd: usize) -> Vec<f64> {
    let mut o = vec![0.0; t * hd];
    for i in 0..t {
        let s: Vec<f64> = (0..=i).map(|j| (0..hd).map(|c| q[i * hd + c] * k[j * hd + c]).sum::<f64>() / (hd as f64).sqrt()).collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..hd {
            o[i * hd + c] = (0..=i).map(|j| e[j] * v[j * hd + c]).sum::<f64>() / z;
        }
    }
    o
}

fn main() -> anyhow::Result<()> {
    let hd = 64;
    let arch = ArchConfig::new(8, 64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    println!("{:>6} {:>10} {:>12} {:>10}", "T", "cycles", "HBM bytes", "rel err");
    for t in [64, 128, 256, 512] {
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (q, k, v) = (g(t * hd), g(t * hd), g(t * hd));
        let c = compile_attention(&arch, &HbmConfig::default(), &q, &k, &v, t, t, hd, true)?;
        let (rep, m) = c.simulate(1_000_000_000)?;
        let o = c.read_output(&m, "o")?;
        let r = attention(&q, &k, &v, t, hd);
        let num: f64 = o.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = r.iter().map(|b| b * b).sum();
        println!("{t:>6} {:>10} {:>12} {:>10.2e}", rep.cycles, rep.hbm_read_bytes + rep.hbm_write_bytes, (num / den).sqrt());
    }
    Ok(())
}
