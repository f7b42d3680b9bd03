//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances are the constants below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use plena::compiler::reference::{Numerics, Rows};
use plena::compiler::{auto_prefetch_distance, compile_attention, compile_decoder, compile_gemm, DecoderWeights, GemmSchedule, ModelSpec};
use plena::dse::{self, check_constraints, explore, DseConfig, Evaluator, ExploreOptions, Sampler};
use plena::formats::DataFormat;
use plena::hbm::HbmConfig;
use plena::isa::{Instruction, IsaError, Mnemonic};
use plena::machine::{flattened_array_gemm, square_array_gemm, ArchConfig, MatrixSram};
use plena::quantizer::{
    activation_mse, clip_quantize_layer, gptq_quantize_layer, layer_output_error, quantize_decoder, rtn_quantize, search_block_clipping,
    CalibrationSet, LinearLayer, QuantPlan, DEFAULT_DAMPING, DEFAULT_PERCENTILES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};

const FLAT_MIN_UTIL: f64 = 0.95;
const SQUARE_MAX_UTIL: f64 = 0.15;
const MIN_UTIL_RATIO: f64 = 6.0;
const ATTN_MAX_REL: f64 = 5e-2;
const TRAFFIC_MIN_R2: f64 = 0.999;
const FUZZ_WORDS: usize = 1_000_000;
const PARETO_CLOUDS: u64 = 200;
const TRANSPOSE_TILES: usize = 1000;
const DSE_BUDGET: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn c1_utilization() -> Outcome {
    let (m, k, n) = (8, 4096, 4096);
    let arch = ArchConfig::new(8, 512, 512);
    let hbm = HbmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, m * k);
    let w = uniform(&mut rng, n * k);
    let sched = GemmSchedule::streaming(auto_prefetch_distance(&arch, &hbm));
    let c = compile_gemm(&arch, &hbm, &x, m, &w, n, k, &sched).unwrap();
    let (rep, _) = c.simulate(100_000_000).unwrap();
    let side = ((arch.blen * arch.mlen) as f64).sqrt() as u64;
    assert_eq!(side * side, (arch.blen * arch.mlen) as u64);
    let sq = square_array_gemm(m as u64, k as u64, n as u64, side);
    let closed = flattened_array_gemm(m as u64, k as u64, n as u64, &arch);
    let flat = rep.streaming_utilization;
    let ratio = flat / sq.utilization;
    outcome(
        flat >= FLAT_MIN_UTIL && sq.utilization <= SQUARE_MAX_UTIL && ratio >= MIN_UTIL_RATIO,
        format!(
            "flattened streaming {flat:.4} (whole run {:.4}, closed form {:.4}, {} cycles), square {side}x{side} {:.4}, ratio {ratio:.2}",
            rep.utilization, closed.utilization, rep.cycles, sq.utilization
        ),
    )
}

fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, hd: usize) -> Vec<f64> {
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

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn c2_attention() -> Outcome {
    let hd = 64;
    let mut arch = ArchConfig::new(8, 64, 64);
    let i8 = DataFormat::mxint(8, 16);
    (arch.weight_fmt, arch.act_fmt, arch.kv_fmt) = (i8, i8, i8);
    let nm = Numerics::new(&arch);
    let mut ok = true;
    let mut pts = Vec::new();
    let mut detail = String::new();
    for t in [64, 256, 1024] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let (q, k, v) = (uniform(&mut rng, t * hd), uniform(&mut rng, t * hd), uniform(&mut rng, t * hd));
        let c = compile_attention(&arch, &HbmConfig::default(), &q, &k, &v, t, t, hd, true).unwrap();
        let (rep, m) = c.simulate(2_000_000_000).unwrap();
        let o = c.read_output(&m, "o").unwrap();
        let bound = nm.attention(&nm.cast_exact(q.clone(), t, hd), &Rows::exact(k.clone(), t, hd), &Rows::exact(v.clone(), t, hd), 1, 1, hd, true);
        let r = rel(&o, &softmax_attention(&q, &k, &v, t, hd));
        let inside = bound.contains(&o);
        ok &= inside && r <= ATTN_MAX_REL;
        let bytes = rep.hbm_read_bytes + rep.hbm_write_bytes;
        pts.push((t as f64, bytes as f64));
        detail += &format!("T={t}: rel {r:.2e} in-bound {inside} bytes {bytes}; ");
    }
    // least squares bytes = a*T + b
    let n = pts.len() as f64;
    let (sx, sy) = (pts.iter().map(|p| p.0).sum::<f64>(), pts.iter().map(|p| p.1).sum::<f64>());
    let (mx, my) = (sx / n, sy / n);
    let a = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let b = my - a * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - a * p.0 - b).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    ok &= r2 >= TRAFFIC_MIN_R2;
    outcome(ok, format!("{detail}bytes = {a:.1}*T + {b:.0}, R^2 {r2:.6}"))
}

/// Channels scaled by 10 on Gaussian rows.
fn channel_outliers(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut a = gauss(rng, rows * cols, 1.0);
    let chans: Vec<usize> = (0..4).map(|_| rng.random_range(0..cols)).collect();
    for r in 0..rows {
        for &c in &chans {
            a[r * cols + c] *= 10.0;
        }
    }
    a
}

fn c3_ablation() -> Outcome {
    let (n, k, m) = (64, 256, 128);
    let fmt = DataFormat::mxint(4, 16);
    let heavy = StudentT::new(3.0).unwrap();
    let (mut rtn, mut clip, mut gptq) = (0.0, 0.0, 0.0);
    let (mut plain, mut rotated) = (0.0, 0.0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let w: Vec<f64> = (0..n * k).map(|_| heavy.sample(&mut rng)).collect();
        let x = gauss(&mut rng, m * k, 1.0);
        let cs = CalibrationSet::new("l", x.clone(), m, k).unwrap();
        let r = rtn_quantize(&w, n, k, fmt).unwrap().dequantize().unwrap();
        let c = clip_quantize_layer(&w, n, k, &cs, fmt, &DEFAULT_PERCENTILES).unwrap().weights();
        let g = gptq_quantize_layer(&w, n, k, &cs, fmt, &DEFAULT_PERCENTILES, DEFAULT_DAMPING).unwrap().weights();
        rtn += layer_output_error(&x, m, &w, &r, n, k) / 20.0;
        clip += layer_output_error(&x, m, &w, &c, n, k) / 20.0;
        gptq += layer_output_error(&x, m, &w, &g, n, k) / 20.0;
        let layer = LinearLayer { name: "l".into(), w: w.iter().map(|v| v * 0.1).collect(), n, k };
        let outl = CalibrationSet::new("l", channel_outliers(&mut rng, m, k), m, k).unwrap();
        plain += activation_mse(&layer, &outl, fmt, DataFormat::mxint(8, 16), false).unwrap() / 20.0;
        rotated += activation_mse(&layer, &outl, fmt, DataFormat::mxint(8, 16), true).unwrap() / 20.0;
    }
    outcome(
        rtn > clip && clip > gptq && rotated < plain,
        format!("mean ||XW^T-XQ^T||_F rtn {rtn:.3} > clip {clip:.3} > gptq {gptq:.3}; MXINT4 act mse plain {plain:.4e} rotated {rotated:.4e}"),
    )
}

/// Nearest grid magnitude found by scanning every code.
fn oracle_round(fmt: &DataFormat, a: f64) -> f64 {
    let half = 1u32 << (fmt.element_bits - 1);
    let mut best = (f64::INFINITY, 0u32, 0.0);
    for code in 0..half {
        let v = fmt.decode_element(code).unwrap();
        if !(v >= 0.0) {
            continue;
        }
        let d = (v - a.abs()).abs();
        if d < best.0 || (d == best.0 && code % 2 == 0 && best.1 % 2 == 1) {
            best = (d, code, v);
        }
    }
    best.2.copysign(a)
}

fn oracle_block(b: &[f64], fmt: &DataFormat, p: f64) -> Vec<f64> {
    let m = b.iter().fold(0.0f64, |a, x| a.max(x.abs())) * p;
    let (lo, hi) = fmt.scale_range();
    let mut e = lo;
    while e < hi && m > fmt.max_value() * 2f64.powi(e) {
        e += 1;
    }
    let s = 2f64.powi(e);
    b.iter().map(|&x| oracle_round(fmt, x / s) * s).collect()
}

fn oracle_err(xb: &[f64], d: &[f64]) -> f64 {
    xb.chunks(d.len()).map(|r| r.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum()
}

fn c4a_clipping() -> (bool, usize) {
    let mut cases = 0;
    let mut ok = true;
    for n in 1..=8usize {
        for b in [1usize, 2, 4, 8] {
            for np in 1..=5usize {
                for seed in 0..8u64 {
                    let fmt = DataFormat::mxint(4, b as u32);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + (n * 100 + b * 10 + np) as u64);
                    let wb = gauss(&mut rng, n * b, 1.0);
                    let xb = gauss(&mut rng, 6 * b, 1.0);
                    let p: Vec<f64> = (0..np).map(|_| rng.random_range(50..=100) as f64 / 100.0).collect();
                    let got = search_block_clipping(&wb, &xb, fmt, &p).unwrap();
                    for i in 0..n {
                        let row = &wb[i * b..(i + 1) * b];
                        let mut best = (f64::INFINITY, 0.0);
                        for &pp in &p {
                            let q = oracle_block(row, &fmt, pp);
                            let d: Vec<f64> = row.iter().zip(&q).map(|(a, c)| a - c).collect();
                            let e = oracle_err(&xb, &d);
                            if e < best.0 || (e == best.0 && pp > best.1) {
                                best = (e, pp);
                            }
                        }
                        ok &= got.p[i] == best.1 && got.q[i * b..(i + 1) * b] == oracle_block(row, &fmt, best.1)[..];
                        ok &= (got.err[i] - best.0).abs() <= 1e-12 * (1.0 + best.0);
                    }
                    cases += 1;
                }
            }
        }
    }
    (ok, cases)
}

fn c4b_transpose() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut ok = true;
    for i in 0..TRANSPOSE_TILES {
        let mlen = [2, 4, 8, 16, 32, 64][i % 6];
        let tiles = 1 + rng.random_range(0..4);
        let mut s = MatrixSram::new(mlen, mlen * tiles);
        let tile = rng.random_range(0..tiles);
        let t: Vec<Vec<f64>> = (0..mlen).map(|_| uniform(&mut rng, mlen)).collect();
        for (r, row) in t.iter().enumerate() {
            s.write_row(tile * mlen + r, row, None).unwrap();
        }
        for c in 0..mlen {
            let col = s.read_col(tile, c).unwrap();
            ok &= col.iter().enumerate().all(|(r, &v)| v == t[r][c]);
        }
        ok &= s.bank_conflicts == 0;
    }
    ok
}

fn brute_front(pts: &[[f64; 3]]) -> Vec<usize> {
    (0..pts.len())
        .filter(|&i| !pts.iter().any(|q| (0..3).all(|d| q[d] <= pts[i][d]) && (0..3).any(|d| q[d] < pts[i][d])))
        .collect()
}

fn c4c_pareto() -> bool {
    (0..PARETO_CLOUDS).all(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = seed % 2 == 0;
        let pts: Vec<[f64; 3]> =
            (0..100).map(|_| std::array::from_fn(|_| if grid { rng.random_range(0..5) as f64 } else { rng.random::<f64>() })).collect();
        dse::pareto_front(&pts) == brute_front(&pts)
    })
}

fn c4d_isa() -> (bool, usize) {
    let mut ok = true;
    for op in 0..64u32 {
        match Mnemonic::from_opcode(op) {
            Some(m) => {
                let ops = m.operands();
                let r = |x: Option<plena::isa::Reg>, v: u8| if x.is_some() { v } else { 0 };
                for v in [0u8, 7, 31] {
                    let i = Instruction::new(m, r(ops.rd, v), r(ops.rs1, v), r(ops.rs2, v), 0);
                    let w = i.encode().unwrap();
                    ok &= w >> 26 == op && Instruction::decode(w).unwrap() == i;
                }
            }
            None => ok &= matches!(Instruction::decode(op << 26), Err(IsaError::IllegalInstruction(_))),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut legal = 0;
    for _ in 0..FUZZ_WORDS {
        let w: u32 = rng.random();
        match Instruction::decode(w) {
            Ok(i) => {
                legal += 1;
                ok &= i.encode().ok() == Some(w);
            }
            Err(IsaError::IllegalInstruction(x)) => ok &= x == w,
            Err(_) => ok = false,
        }
    }
    (ok, legal)
}

fn c4_oracles() -> Outcome {
    let (a, cases) = c4a_clipping();
    let b = c4b_transpose();
    let c = c4c_pareto();
    let (d, legal) = c4d_isa();
    outcome(
        a && b && c && d,
        format!(
            "clipping {a} ({cases} instances), transpose {b} ({TRANSPOSE_TILES} tiles), pareto {c} ({PARETO_CLOUDS} clouds), isa {d} ({legal}/{FUZZ_WORDS} fuzzed words legal)"
        ),
    )
}

fn c5_decoder() -> Outcome {
    let spec = ModelSpec::tiny();
    let i4 = DataFormat::mxint(4, 16);
    let mut arch = ArchConfig::new(8, 64, 64);
    (arch.weight_fmt, arch.act_fmt, arch.kv_fmt) = (i4, i4, i4);
    arch.fp_setting = DataFormat::minifloat(6, 5);
    assert_eq!((spec.hidden, spec.layers, spec.heads, spec.kv_heads), (256, 2, 4, 2));
    let w = DecoderWeights::random(&spec, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tokens: Vec<usize> = (0..128).map(|_| rng.random_range(0..spec.vocab)).collect();
    let plan = QuantPlan { weight_fmt: i4, act_fmt: i4, kv_fmt: i4, ..QuantPlan::default() };
    let (wq, _) = quantize_decoder(&spec, &w, &tokens, &plan).unwrap();
    let hbm = HbmConfig::default();
    let c = compile_decoder(&arch, &hbm, &spec, &wq, &tokens, auto_prefetch_distance(&arch, &hbm)).unwrap();
    // a poison read aborts the run, so Ok means none happened
    let (r1, m1) = c.simulate(2_000_000_000).unwrap();
    let (r2, m2) = c.simulate(2_000_000_000).unwrap();
    let l1 = c.read_output(&m1, "logits").unwrap();
    let same = r1 == r2 && l1 == c.read_output(&m2, "logits").unwrap();
    let bound = Numerics::new(&arch).decoder(&spec, &wq, &tokens);
    let inside = bound.contains(&l1);
    let err = rel(&l1, &bound.v);
    outcome(
        inside && same && r1.halted,
        format!(
            "{} cycles, in-bound {inside} (worst ratio {:.3}), rel err {err:.3e}, max relative radius {:.3}, deterministic {same}",
            r1.cycles,
            bound.worst_ratio(&l1),
            bound.max_relative_radius()
        ),
    )
}

fn c6_latency_hiding() -> Outcome {
    let arch = ArchConfig::new(8, 64, 64);
    let hbm = HbmConfig::default();
    let (m, k, n) = (8, 1024, 512);
    // one weight slice: BLEN rows of MLEN packed elements plus scales
    let f = arch.weight_fmt;
    let slice = arch.blen as u64 * ((arch.mlen as u64 * f.element_bits as u64).div_ceil(8) + arch.mlen as u64 / f.block_size as u64);
    let latency = hbm.fixed_latency_cycles + slice.div_ceil(hbm.bytes_per_cycle(arch.clock_ghz));
    let per_row = arch.blen as u64;
    let dist = latency.div_ceil(per_row) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&mut rng, m * k);
    let w = uniform(&mut rng, n * k);
    let run = |d: usize| {
        let c = compile_gemm(&arch, &hbm, &x, m, &w, n, k, &GemmSchedule::streaming(d)).unwrap();
        c.simulate(100_000_000).unwrap().0
    };
    let (hidden, exposed) = (run(dist), run(0));
    outcome(
        hidden.matrix_memory_stalls == 0 && exposed.matrix_memory_stalls > 0,
        format!(
            "distance {dist} (latency {latency} / {per_row} cycles per slice): {} stalls ({} fill); distance 0: {} stalls",
            hidden.matrix_memory_stalls, hidden.matrix_memory_stalls_fill, exposed.matrix_memory_stalls
        ),
    )
}

fn c7_dse() -> Outcome {
    let mut ev = Evaluator::new(DseConfig::default()).unwrap();
    let opts = ExploreOptions::new(DSE_BUDGET, Sampler::GreedyLocal, 2024);
    let a = explore(&mut ev, &opts).unwrap();
    let b = explore(&mut ev, &opts).unwrap();
    let (mut ja, mut jb) = (Vec::new(), Vec::new());
    a.write_front_json(&mut ja).unwrap();
    b.write_front_json(&mut jb).unwrap();
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    a.write_trace_csv(&mut ta).unwrap();
    b.write_trace_csv(&mut tb).unwrap();
    let replay = a == b && ja == jb && ta == tb;
    let feasible = a.evaluated().all(|r| check_constraints(&r.point, &ev.cfg).is_empty());
    let mut monotone = true;
    for r in a.front_points() {
        let kv = r.point.kv();
        let blk = r.point.blen as u32;
        let e8 = ev.accuracy_proxy(DataFormat::mxint(8, blk), kv).unwrap();
        let e4 = ev.accuracy_proxy(DataFormat::mxint(4, blk), kv).unwrap();
        monotone &= e8 <= e4;
    }
    outcome(
        feasible && monotone && replay && a.evaluated().count() == DSE_BUDGET,
        format!("{} evaluated, {} on the front, feasible {feasible}, MXINT8<=MXINT4 {monotone}, replay {replay}", a.evaluated().count(), a.front.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 7] = [
        ("1 flattened vs square utilization", c1_utilization, 60),
        ("2 flash attention bound and traffic", c2_attention, 120),
        ("3 quantizer ablation direction", c3_ablation, 120),
        ("4 oracle equivalences", c4_oracles, 120),
        ("5 tiny decoder end to end", c5_decoder, 300),
        ("6 prefetch hides HBM latency", c6_latency_hiding, 60),
        ("7 dse sanity", c7_dse, 300),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f));
        let dt = t.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && dt < Duration::from_secs(limit), o.detail),
            Err(e) => (false, format!("panicked: {}", e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
        };
        if !pass {
            failed += 1;
        }
        println!("{} criterion {name}: {detail} [{:.1}s, limit {limit}s]", if pass { "PASS" } else { "FAIL" }, dt.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
