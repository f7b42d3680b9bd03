use plena::compiler::compile_attention;
use plena::formats::MXTensor;
use plena::hbm::HbmConfig;
use plena::machine::ArchConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], tq: usize, t: usize, hd: usize, causal: bool) -> Vec<f64> {
    let mut o = vec![0.0; tq * hd];
    for i in 0..tq {
        let lim = if causal { i.min(t - 1) } else { t - 1 };
        let s: Vec<f64> = (0..=lim).map(|j| (0..hd).map(|c| q[i * hd + c] * k[j * hd + c]).sum::<f64>() / (hd as f64).sqrt()).collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..hd {
            o[i * hd + c] = (0..=lim).map(|j| e[j] * v[j * hd + c]).sum::<f64>() / z;
        }
    }
    o
}

#[test]
fn attention_close_to_softmax() {
    let arch = ArchConfig::new(4, 16, 16);
    let (t, hd) = (40, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (q, k, v) = (g(t * hd), g(t * hd), g(t * hd));
    for causal in [true, false] {
        let c = compile_attention(&arch, &HbmConfig::default(), &q, &k, &v, t, t, hd, causal).unwrap();
        let (_, m) = c.simulate(10_000_000).unwrap();
        let o = c.read_output(&m, "o").unwrap();
        let kq = MXTensor::quantize(&k, &[t, hd], arch.kv_fmt).unwrap().dequantize().unwrap();
        let vq = MXTensor::quantize(&v, &[t, hd], arch.kv_fmt).unwrap().dequantize().unwrap();
        let r = softmax_attention(&q, &kq, &vq, t, t, hd, causal);
        let err = o.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        eprintln!("causal={causal} err {err}");
        assert!(err < 0.05, "causal={causal} err {err}");
    }
}

#[test]
fn attention_within_propagated_bound() {
    use plena::compiler::reference::{Numerics, Rows};
    let arch = ArchConfig::new(4, 16, 16);
    let (t, hd) = (37, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (q, k, v) = (g(t * hd), g(t * hd), g(t * hd));
    let nm = Numerics::new(&arch);
    for causal in [true, false] {
        let c = compile_attention(&arch, &HbmConfig::default(), &q, &k, &v, t, t, hd, causal).unwrap();
        let (_, m) = c.simulate(10_000_000).unwrap();
        let o = c.read_output(&m, "o").unwrap();
        let qb = nm.cast_exact(q.clone(), t, hd);
        let bound = nm.attention(&qb, &Rows::exact(k.clone(), t, hd), &Rows::exact(v.clone(), t, hd), 1, 1, hd, causal);
        let exact = softmax_attention(&q, &k, &v, t, t, hd, causal);
        for (b, r) in bound.v.iter().zip(&exact) {
            assert!((b - r).abs() <= 1e-9 * (1.0 + r.abs()), "center {b} vs exact {r}");
        }
        assert!(bound.contains(&o), "ratio {}", bound.worst_ratio(&o));
        let worst = bound.max_relative_radius();
        eprintln!("causal={causal} max radius {worst}");
    }
}
