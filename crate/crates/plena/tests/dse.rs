use plena::dse::*;
use plena::formats::DataFormat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point(blen: usize, mlen: usize, vlen: usize, act: DataFormat) -> DesignPoint {
    DesignPoint {
        blen,
        mlen,
        vlen,
        hbm_m_prefetch: 16,
        hbm_v_prefetch: 8,
        hbm_v_writeback: 256,
        act_fmt: DataFormatKey(act),
        kv_fmt: DataFormatKey(DataFormat::mxfp(3, 4, 16)),
        fp_setting: DataFormatKey(DataFormat::minifloat(4, 7)),
        int_width: 64,
    }
}

/// Quadratic dominance scan.
fn brute_front(pts: &[[f64; 3]]) -> Vec<usize> {
    (0..pts.len())
        .filter(|&i| {
            !(0..pts.len()).any(|j| {
                let le = (0..3).all(|d| pts[j][d] <= pts[i][d]);
                let lt = (0..3).any(|d| pts[j][d] < pts[i][d]);
                le && lt
            })
        })
        .collect()
}

fn small_cfg() -> DseConfig {
    let mut cfg = DseConfig::default();
    cfg.model.layers = 1;
    cfg.accuracy_tokens = 16;
    cfg
}

#[test]
fn table_row_is_feasible() {
    let p = point(32, 128, 32, DataFormat::mxfp(4, 3, 16));
    assert!(check_constraints(&p, &DseConfig::default()).is_empty());
}

#[test]
fn mlen_below_blen_is_rejected() {
    let p = point(32, 2, 32, DataFormat::mxint(4, 16));
    let v = check_constraints(&p, &DseConfig::default());
    assert!(v.iter().any(|s| s.contains("MLEN 2 >= BLEN 32")), "{v:?}");
}

#[test]
fn bandwidth_rule() {
    let p = point(2, 512, 32, DataFormat::mxint(8, 16));
    let v = check_constraints(&p, &DseConfig::default());
    assert!(v.iter().any(|s| s.contains("= 6144 < 1510")), "{v:?}");
}

#[test]
fn doubling_mlen_halves_compute_cycles() {
    let a = point(8, 64, 64, DataFormat::mxint(4, 16));
    let b = point(8, 128, 64, DataFormat::mxint(4, 16));
    for (m, k, n) in [(8, 4096, 4096), (128, 256, 512), (64, 1024, 64)] {
        assert_eq!(gemm_compute_cycles(&a, m, k, n), 2.0 * gemm_compute_cycles(&b, m, k, n));
    }
}

#[test]
fn zero_workload_has_zero_latency() {
    let mut cfg = DseConfig::default();
    cfg.tokens = 0;
    let p = point(8, 64, 64, DataFormat::mxint(4, 16));
    assert_eq!(roofline_latency(&p, &cfg).total(), 0.0);
}

#[test]
fn wider_activations_never_hurt_accuracy() {
    let mut ev = Evaluator::new(small_cfg()).unwrap();
    for blen in [2, 8, 32] {
        let kv = DataFormat::mxint(8, blen);
        let e8 = ev.accuracy_proxy(DataFormat::mxint(8, blen), kv).unwrap();
        let e4 = ev.accuracy_proxy(DataFormat::mxint(4, blen), kv).unwrap();
        assert!(e8 <= e4, "blen {blen}: {e8} vs {e4}");
    }
}

#[test]
fn area_grows_with_pes_and_sram() {
    let cfg = DseConfig::default();
    let a = point(8, 64, 64, DataFormat::mxint(4, 16));
    let b = point(16, 64, 64, DataFormat::mxint(4, 16));
    assert!(area_proxy(&b, &cfg) > area_proxy(&a, &cfg));
    let mut big = cfg.clone();
    big.base.vector_sram_depth *= 2;
    assert!(area_proxy(&a, &big) > area_proxy(&a, &cfg));
}

#[test]
fn front_edge_cases() {
    assert_eq!(pareto_front(&[[1.0, 2.0, 3.0]]), vec![0]);
    assert_eq!(pareto_front(&[[2.0, 2.0, 2.0], [1.0, 1.0, 1.0]]), vec![1]);
    assert_eq!(pareto_front(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]), vec![0, 1]);
}

proptest! {
    #[test]
    fn front_equals_brute_force(seed in 0u64..2000, n in 1usize..100, grid in 0u32..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| if grid == 1 { rng.random_range(0..4) as f64 } else { rng.random::<f64>() }))
            .collect();
        prop_assert_eq!(pareto_front(&pts), brute_front(&pts));
    }

    #[test]
    fn hypervolume_matches_grid_count(seed in 0u64..500, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0..6) as f64)).collect();
        let mut count = 0;
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    let c = [x as f64, y as f64, z as f64];
                    if pts.iter().any(|p| (0..3).all(|d| p[d] <= c[d])) {
                        count += 1;
                    }
                }
            }
        }
        prop_assert_eq!(hypervolume(&pts, [6.0; 3]), count as f64);
    }
}

#[test]
fn budget_one_gives_at_most_one_front_point() {
    let mut ev = Evaluator::new(small_cfg()).unwrap();
    let r = explore(&mut ev, &ExploreOptions::new(1, Sampler::Random, 3)).unwrap();
    assert!(r.front.len() <= 1);
    assert_eq!(r.evaluated().count(), 1);
}

#[test]
fn exploration_replays_and_reports_feasible_points() {
    let mut ev = Evaluator::new(small_cfg()).unwrap();
    for sampler in [Sampler::Random, Sampler::GreedyLocal] {
        let opts = ExploreOptions::new(20, sampler, 11);
        let a = explore(&mut ev, &opts).unwrap();
        let b = explore(&mut ev, &opts).unwrap();
        assert_eq!(a, b);
        for r in a.evaluated() {
            assert!(check_constraints(&r.point, &ev.cfg).is_empty());
        }
        let pts: Vec<[f64; 3]> = a.evaluated().map(|r| r.objectives.unwrap().as_array()).collect();
        let idx: Vec<usize> = a.evaluated().map(|r| r.index).collect();
        let want: Vec<usize> = brute_front(&pts).into_iter().map(|i| idx[i]).collect();
        assert_eq!(a.front, want);
        let mut csv = Vec::new();
        a.write_trace_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), a.trace.len() + 1);
        let mut js = Vec::new();
        a.write_front_json(&mut js).unwrap();
        let back: Vec<TraceRecord> = serde_json::from_slice(&js).unwrap();
        assert_eq!(back.len(), a.front.len());
    }
}

#[test]
fn greedy_local_beats_random_in_hypervolume() {
    let mut ev = Evaluator::new(small_cfg()).unwrap();
    let mut wins = 0;
    for seed in 0..10 {
        let r = explore(&mut ev, &ExploreOptions::new(50, Sampler::Random, seed)).unwrap();
        let g = explore(&mut ev, &ExploreOptions::new(50, Sampler::GreedyLocal, seed)).unwrap();
        let f = |x: &ExploreResult| x.front_points().iter().map(|t| t.objectives.unwrap().as_array()).collect::<Vec<_>>();
        let hv = comparable_hypervolumes(&[f(&r), f(&g)]);
        if hv[1] > hv[0] {
            wins += 1;
        }
    }
    eprintln!("greedy wins {wins}/10");
    assert!(wins >= 7, "{wins}/10");
}
