use plena::compiler::reference;
use plena::compiler::{compile_decoder, DecoderWeights, ModelSpec};
use plena::formats::DataFormat;
use plena::hbm::HbmConfig;
use plena::machine::ArchConfig;

fn matvec_t(x: &[f64], rows: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            y[r * n + j] = (0..k).map(|c| x[r * k + c] * w[j * k + c]).sum();
        }
    }
    y
}

fn rms(x: &[f64], d: usize, w: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let s = (r.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-5).sqrt();
            r.iter().zip(w).map(move |(v, g)| v / s * g).collect::<Vec<_>>()
        })
        .collect()
}

fn rope(x: &mut [f64], t: usize, width: usize, hd: usize) {
    let half = hd / 2;
    for p in 0..t {
        for h in 0..width / hd {
            let base = p * width + h * hd;
            let old: Vec<f64> = x[base..base + hd].to_vec();
            for j in 0..hd {
                let th = p as f64 * 10000f64.powf(-2.0 * (j % half) as f64 / hd as f64);
                let rot = if j < half { -old[j + half] } else { old[j - half] };
                x[base + j] = old[j] * th.cos() + rot * th.sin();
            }
        }
    }
}

/// Plain double-precision Llama-style forward pass.
pub fn oracle(spec: &ModelSpec, w: &DecoderWeights, tokens: &[usize]) -> Vec<f64> {
    let (t, d, hd) = (tokens.len(), spec.hidden, spec.head_dim);
    let kvd = spec.kv_heads * hd;
    let mut x: Vec<f64> = tokens.iter().flat_map(|&k| w.embed[k * d..(k + 1) * d].to_vec()).collect();
    for l in &w.layers {
        let h = rms(&x, d, &l.attn_norm);
        let mut q = matvec_t(&h, t, d, &l.wq, d);
        let mut k = matvec_t(&h, t, d, &l.wk, kvd);
        let v = matvec_t(&h, t, d, &l.wv, kvd);
        rope(&mut q, t, d, hd);
        rope(&mut k, t, kvd, hd);
        let mut o = vec![0.0; t * d];
        for head in 0..spec.heads {
            let g = head / (spec.heads / spec.kv_heads);
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[i * d + head * hd + c] * k[j * kvd + g * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    o[i * d + head * hd + c] = (0..=i).map(|j| e[j] * v[j * kvd + g * hd + c]).sum::<f64>() / z;
                }
            }
        }
        let a = matvec_t(&o, t, d, &l.wo, d);
        x.iter_mut().zip(&a).for_each(|(p, q)| *p += q);
        let h2 = rms(&x, d, &l.ffn_norm);
        let g = matvec_t(&h2, t, d, &l.w_gate, spec.ffn_dim);
        let u = matvec_t(&h2, t, d, &l.w_up, spec.ffn_dim);
        let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
        let f = matvec_t(&act, t, spec.ffn_dim, &l.w_down, d);
        x.iter_mut().zip(&f).for_each(|(p, q)| *p += q);
    }
    let hf = rms(&x, d, &w.final_norm);
    matvec_t(&hf, t, d, &w.lm_head, spec.vocab)
}

#[test]
fn small_decoder_within_bound_and_deterministic() {
    let mut arch = ArchConfig::new(4, 16, 16);
    arch.act_fmt = DataFormat::mxint(8, 16);
    let spec = ModelSpec { hidden: 32, layers: 2, heads: 2, kv_heads: 1, head_dim: 16, ffn_dim: 64, vocab: 32, max_seq: 32, batch: 1 };
    let w = DecoderWeights::random(&spec, 5);
    let wq = w.quantized(&spec, arch.weight_fmt).unwrap();
    let tokens: Vec<usize> = (0..20).map(|i| (i * 7 + 3) % spec.vocab).collect();
    let hbm = HbmConfig::default();
    let c = compile_decoder(&arch, &hbm, &spec, &w, &tokens, 4).unwrap();
    let (r1, m1) = c.simulate(50_000_000).unwrap();
    let logits = c.read_output(&m1, "logits").unwrap();
    let (r2, m2) = c.simulate(50_000_000).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(logits, c.read_output(&m2, "logits").unwrap());

    let exact = oracle(&spec, &wq, &tokens);
    let bound = reference::Numerics::new(&arch).decoder(&spec, &wq, &tokens);
    for (b, r) in bound.v.iter().zip(&exact) {
        assert!((b - r).abs() <= 1e-9 * (1.0 + r.abs()), "center {b} vs oracle {r}");
    }
    assert!(bound.contains(&logits), "ratio {}", bound.worst_ratio(&logits));
    let worst = bound.max_relative_radius();
    let err = logits.iter().zip(&exact).map(|(x, r)| (x - r).abs()).fold(0.0, f64::max);
    eprintln!("max radius {worst} max err {err}");
}
