//! Fat GEMM (M=8, K=4096, N=4096) on a flattened 8x512 array, simulated,
//! against a 64x64 square array with the same PE count.

use plena::compiler::{auto_prefetch_distance, compile_gemm, GemmSchedule};
use plena::hbm::HbmConfig;
use plena::machine::{flattened_array_gemm, square_array_gemm, ArchConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let (m, k, n) = (8, 4096, 4096);
    let arch = ArchConfig::new(8, 512, 512);
    let hbm = HbmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = auto_prefetch_distance(&arch, &hbm);
    let c = compile_gemm(&arch, &hbm, &x, m, &w, n, k, &GemmSchedule::streaming(d))?;
    println!("{} instructions, prefetch distance {d}", c.program.len());
    let (rep, _) = c.simulate(100_000_000)?;
    println!("{rep}");

    let sq = square_array_gemm(m as u64, k as u64, n as u64, 64);
    let fl = flattened_array_gemm(m as u64, k as u64, n as u64, &arch);
    println!("square 64x64     utilization {:.4}", sq.utilization);
    println!("flattened model  utilization {:.4}", fl.utilization);
    println!("flattened sim    streaming {:.4}, ratio {:.2}", rep.streaming_utilization, rep.streaming_utilization / sq.utilization);
    Ok(())
}
