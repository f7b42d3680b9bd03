use plena::formats::*;
use proptest::prelude::*;

fn all_formats() -> Vec<DataFormat> {
    let mut v: Vec<DataFormat> = [2u8, 3, 4, 8].iter().map(|&b| DataFormat::mxint(b, 16)).collect();
    for (e, m) in [(1, 2), (2, 1), (3, 4), (4, 3), (5, 2)] {
        v.push(DataFormat::mxfp(e, m, 16));
    }
    v
}

fn minifloats() -> Vec<DataFormat> {
    [(3, 2), (2, 3), (6, 5), (5, 6), (4, 7), (8, 5)]
        .iter()
        .map(|&(e, m)| DataFormat::minifloat(e, m))
        .collect()
}

/// Nearest grid value by scanning every non-negative code; ties go to the
/// code with an even last bit.
fn oracle_round(fmt: &DataFormat, a: f64) -> f64 {
    let half = 1u32 << (fmt.element_bits - 1);
    let mut best: Option<(f64, u32, f64)> = None;
    for code in 0..half {
        let v = fmt.decode_element(code).unwrap();
        let d = (v - a).abs();
        best = match best {
            None => Some((d, code, v)),
            Some((bd, bc, bv)) => {
                if d < bd || (d == bd && code % 2 == 0 && bc % 2 == 1) {
                    Some((d, code, v))
                } else {
                    Some((bd, bc, bv))
                }
            }
        };
    }
    best.unwrap().2
}

fn oracle_exponent(max_abs: f64, fmt: &DataFormat) -> i32 {
    if max_abs == 0.0 {
        return 0;
    }
    let mut e = -128;
    while e < 127 && fmt.max_value() * 2f64.powi(e) < max_abs {
        e += 1;
    }
    e
}

#[test]
fn minifloat_codec_is_exhaustively_bijective() {
    for fmt in minifloats().into_iter().chain(all_formats().into_iter().filter(|f| f.kind == Kind::MxFp)) {
        for bits in 0..(1u32 << fmt.element_bits) {
            let mf = MiniFloatValue::from_bits(bits, fmt);
            assert_eq!(mf.to_bits(), bits);
            let x = mf.to_f64();
            if fmt.kind == Kind::MiniFloat {
                let back = cast_minifloat(x, fmt).unwrap();
                assert_eq!(back.to_bits(), bits, "{fmt} pattern {bits:#x} value {x}");
            } else {
                assert_eq!(fmt.encode_element(x), bits, "{fmt} pattern {bits:#x}");
            }
        }
    }
}

#[test]
fn mxint_codes_cover_symmetric_range() {
    for b in [2u8, 3, 4, 8] {
        let fmt = DataFormat::mxint(b, 16);
        let q = (1i64 << (b - 1)) - 1;
        let mut seen = Vec::new();
        for code in 0..(1u32 << b) {
            if let Ok(v) = fmt.decode_element(code) {
                assert_eq!(fmt.encode_element(v), code);
                seen.push(v as i64);
            }
        }
        seen.sort();
        assert_eq!(seen, (-q..=q).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn rounding_matches_grid_scan(idx in 0usize..6, a in 0.0f64..600.0, scale in -12i32..12) {
        let fmt = minifloats()[idx];
        let a = (a * 2f64.powi(scale)).min(fmt.max_value() * 4.0);
        let got = fmt.round_element(a);
        let want = oracle_round(&fmt, a);
        prop_assert_eq!(got, want);
        prop_assert_eq!(fmt.round_element(-a), -want);
    }

    #[test]
    fn mx_float_rounding_matches_grid_scan(idx in 0usize..9, a in 0.0f64..600.0) {
        let fmt = all_formats()[idx];
        prop_assert_eq!(fmt.round_element(a), oracle_round(&fmt, a));
    }

    #[test]
    fn scale_is_smallest_fitting_power(idx in 0usize..9, m in 1e-30f64..1e30) {
        let fmt = all_formats()[idx];
        prop_assert_eq!(compute_scale(&[m, -m / 3.0], fmt), oracle_exponent(m, &fmt));
    }

    #[test]
    fn half_step_bound_and_idempotence(idx in 0usize..9, xs in prop::collection::vec(-50.0f64..50.0, 16)) {
        let fmt = all_formats()[idx];
        let (codes, e) = quantize_block(&xs, fmt, 1.0).unwrap();
        let dq = dequantize_block(&codes, e, fmt).unwrap();
        // bound uses the ceil-log2 scale; the stored exponent may be canonicalized lower
        let s = 2f64.powi(compute_scale(&xs, fmt));
        prop_assert!(e <= compute_scale(&xs, fmt));
        for (x, y) in xs.iter().zip(&dq) {
            let bound = if fmt.kind == Kind::MxInt {
                s / 2.0
            } else {
                // half the local grid spacing, largest near max_τ
                (x.abs() * fmt.unit_roundoff()).max(fmt.min_positive() * s / 2.0) + 1e-12
            };
            prop_assert!((x - y).abs() <= bound, "{} vs {} bound {}", x, y, bound);
        }
        let (codes2, e2) = quantize_block(&dq, fmt, 1.0).unwrap();
        prop_assert_eq!(e2, e);
        prop_assert_eq!(codes2, codes);
    }

    #[test]
    fn mxint8_beats_mxint4(xs in prop::collection::vec(-10.0f64..10.0, 16)) {
        let err = |b: u8| {
            let f = DataFormat::mxint(b, 16);
            let (c, e) = quantize_block(&xs, f, 1.0).unwrap();
            let d = dequantize_block(&c, e, f).unwrap();
            xs.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        prop_assert!(err(8) <= err(4));
    }

    #[test]
    fn fwht_is_orthonormal_involution(k in 0u32..9, seed in prop::collection::vec(-5.0f64..5.0, 256)) {
        let n = 1usize << k;
        let v = &seed[..n];
        let h = fwht(v, false).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n0 - n1).abs() <= 1e-12 * n0.max(1.0));
        let back = fwht(&h, true).unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tensor_file_roundtrip(idx in 0usize..9, rows in 1usize..4, cols in 1usize..40, seed in prop::collection::vec(-8.0f64..8.0, 160)) {
        let fmt = all_formats()[idx];
        let data = &seed[..rows * cols];
        let t = MXTensor::quantize(data, &[rows, cols], fmt).unwrap();
        prop_assert_eq!(t.scales.len(), rows * cols.div_ceil(16));
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = MXTensor::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &t);
        let dq = t.dequantize().unwrap();
        let again = MXTensor::quantize(&dq, &[rows, cols], fmt).unwrap();
        prop_assert_eq!(again, t);
    }
}

#[test]
fn brute_force_exponent_for_frozen_cases() {
    // values produced by oracle_exponent and frozen
    let f4 = DataFormat::mxint(4, 16);
    assert_eq!(compute_scale(&[4.0], f4), 0);
    assert_eq!(compute_scale(&[7.0], f4), 0);
    assert_eq!(compute_scale(&[7.5], f4), 1);
    assert_eq!(compute_scale(&[3.5], f4), -1);
    assert_eq!(compute_scale(&[1e-300], f4), -128);
    assert_eq!(compute_scale(&[1e300], f4), 127);
}
