use plena::formats::{DataFormat, MXTensor};
use plena::hbm::*;
use proptest::prelude::*;

fn run_controller(budget: u64, latency: u64, reqs: &[(u64, Vec<u64>)]) -> Vec<Vec<u64>> {
    let mut h = HbmController::new(budget, latency);
    let mut ready: Vec<Vec<u64>> = reqs.iter().map(|(_, r)| vec![0; r.len()]).collect();
    let mut next = 0;
    let mut ids = Vec::new();
    while next < reqs.len() || !h.is_idle() {
        while next < reqs.len() && reqs[next].0 == h.cycle {
            ids.push(h.enqueue(Engine::Vector, reqs[next].1.clone()));
            next += 1;
        }
        for d in h.service_cycle() {
            let k = ids.iter().position(|&i| i == d.transfer).unwrap();
            ready[k][d.row] = d.ready_cycle;
        }
    }
    ready
}

proptest! {
    #[test]
    fn stepped_and_analytic_channels_agree(
        budget in 1u64..300,
        latency in 0u64..50,
        gaps in prop::collection::vec(1u64..40, 1..12),
        sizes in prop::collection::vec(prop::collection::vec(1u64..700, 1..5), 12),
    ) {
        let mut t = 0;
        let mut reqs = Vec::new();
        for (g, s) in gaps.iter().zip(&sizes) {
            t += g;
            reqs.push((t, s.clone()));
        }
        let stepped = run_controller(budget, latency, &reqs);
        let mut ch = Channel::new(budget, latency);
        for ((t, rows), want) in reqs.iter().zip(&stepped) {
            prop_assert_eq!(&ch.submit(*t, rows), want);
        }
    }

    #[test]
    fn controller_conserves_bytes(budget in 1u64..128, sizes in prop::collection::vec(1u64..500, 1..20)) {
        let mut h = HbmController::new(budget, 3);
        for (k, &s) in sizes.iter().enumerate() {
            let e = [Engine::Matrix, Engine::Vector, Engine::Store][k % 3];
            h.enqueue(e, vec![s]);
        }
        let mut delivered = 0;
        let mut max_cycle_bytes = 0;
        while !h.is_idle() {
            let before = h.served_bytes;
            delivered += h.service_cycle().len();
            max_cycle_bytes = max_cycle_bytes.max(h.served_bytes - before);
        }
        prop_assert_eq!(delivered, sizes.len());
        prop_assert_eq!(h.served_bytes, h.requested_bytes);
        prop_assert!(max_cycle_bytes <= budget);
    }

    #[test]
    fn region_write_read_matches_quantizer(rows in 1usize..4, cols in 1usize..3, seed in prop::collection::vec(-6.0f64..6.0, 96)) {
        let fmt = DataFormat::mxint(4, 16);
        let n = rows * cols * 16;
        let data = &seed[..n];
        let t = MXTensor::quantize(data, &[rows, cols * 16], fmt).unwrap();
        let mut img = HbmImage::new(HbmConfig::default());
        let r = img.alloc_zeroed("x", rows, cols * 16, fmt).unwrap();
        img.write_elements(&r, 0, data).unwrap();
        prop_assert_eq!(img.read_elements(&r, 0, n as u64).unwrap(), t.dequantize().unwrap());
        prop_assert_eq!(img.read_tensor("x").unwrap(), t);
    }
}

#[test]
fn manifest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = HbmImage::new(HbmConfig::default());
    let t = MXTensor::quantize(&(0..64).map(|i| i as f64 / 7.0).collect::<Vec<_>>(), &[2, 32], DataFormat::mxfp(4, 3, 16)).unwrap();
    img.alloc_tensor("a", &t).unwrap();
    img.alloc_minifloat("c", &[0.5, -1.25, 3.0], 1, 3, DataFormat::minifloat(6, 5)).unwrap();
    img.save(dir.path(), "image").unwrap();
    let back = HbmImage::load(dir.path(), "image").unwrap();
    assert_eq!(back.read_tensor("a").unwrap(), t);
    let c = back.region("c").unwrap();
    assert_eq!(c.base % 64, 0);
    assert_eq!(back.read_elements(c, 0, 3).unwrap(), vec![0.5, -1.25, 3.0]);
}

#[test]
fn unaligned_store_is_rejected() {
    let mut img = HbmImage::new(HbmConfig::default());
    let r = img.alloc_zeroed("x", 1, 32, DataFormat::mxint(8, 16)).unwrap();
    assert!(matches!(img.write_elements(&r, 3, &[1.0; 16]), Err(HbmError::Unaligned { .. })));
    assert!(img.write_elements(&r, 0, &[1.0; 40]).is_err());
}
