use plena::compiler::{compile_gemm, GemmSchedule, LoopOrder};
use plena::formats::{fake_quantize_matrix, round_minifloat, MXTensor};
use plena::hbm::HbmConfig;
use plena::machine::ArchConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference(arch: &ArchConfig, x: &[f64], m: usize, w: &[f64], n: usize, k: usize) -> Vec<f64> {
    let xe: Vec<f64> = x.iter().map(|&v| round_minifloat(v, arch.fp_setting)).collect();
    let xq = fake_quantize_matrix(&xe, k, &arch.act_fmt).unwrap();
    let wq = MXTensor::quantize(w, &[n, k], arch.weight_fmt).unwrap().dequantize().unwrap();
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            y[i * n + j] = (0..k).map(|c| xq[i * k + c] * wq[j * k + c]).sum();
        }
    }
    y
}

fn check(arch: &ArchConfig, m: usize, k: usize, n: usize, sched: GemmSchedule, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = compile_gemm(arch, &HbmConfig::default(), &x, m, &w, n, k, &sched).unwrap();
    let (rep, mach) = c.simulate(10_000_000).unwrap();
    assert!(rep.halted);
    let y = c.read_output(&mach, "y").unwrap();
    let r = reference(arch, &x, m, &w, n, k);
    let u = arch.fp_setting.unit_roundoff();
    for (a, b) in y.iter().zip(&r) {
        assert!((a - b).abs() <= u * b.abs() * 1.0001 + 1e-9, "{a} vs {b}");
    }
}

#[test]
fn gemm_matches_reference_for_every_schedule() {
    let arch = ArchConfig::new(4, 16, 16);
    for (i, order) in [LoopOrder::NOuter, LoopOrder::MOuter].into_iter().enumerate() {
        for fuse in [true, false] {
            for d in [0, 1, 5] {
                check(&arch, 5, 32, 8, GemmSchedule { loop_order: order, prefetch_distance: d, fuse_output: fuse }, i as u64 + d as u64);
            }
        }
    }
}

#[test]
fn gemm_with_more_rows_than_blen() {
    let arch = ArchConfig::new(4, 16, 16);
    check(&arch, 13, 48, 12, GemmSchedule::streaming(3), 9);
}
