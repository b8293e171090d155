use fracbnn::bitpack::{dot_planes_at, dot_words, lane_mask, Dims, PackedBitPlane};
use fracbnn::oracle::{self, DenseTensor};
use fracbnn::verify::{run_suite, VerifyOptions, CHANNEL_SET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_kernel_matches_the_oracle_on_500_cases() {
    let report = run_suite(VerifyOptions::new(11, 500));
    for c in &report.checks {
        assert!(c.passed(), "{} failed: {:?}", c.name, c.first_failure);
        assert!(c.cases > 0, "{} ran no cases", c.name);
    }
    let conv = report
        .checks
        .iter()
        .find(|c| c.name == "binary_conv2d")
        .unwrap();
    assert!(conv.cases >= 500);
}

#[test]
fn injected_fault_fails_every_check() {
    let mut opts = VerifyOptions::new(3, 24);
    opts.inject_fault = true;
    let report = run_suite(opts);
    assert!(!report.passed());
    let passed: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.passed())
        .map(|c| c.name)
        .collect();
    assert!(passed.is_empty(), "{passed:?}");
}

#[test]
fn dot_words_matches_lane_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let valid = rng.random_range(1..=64);
        let mask = lane_mask(valid);
        let (a, b) = (rng.random::<u64>() & mask, rng.random::<u64>() & mask);
        let lane = |w: u64, i: usize| if (w >> i) & 1 == 1 { 1 } else { -1 };
        let expected: i32 = (0..valid).map(|i| lane(a, i) * lane(b, i)).sum();
        assert_eq!(dot_words(a, b, valid), expected);
    }
}

#[test]
fn dot_planes_matches_dense_dot() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &c in CHANNEL_SET.iter().chain(&[96, 130]) {
        let dims = Dims::new(c, 2, 3);
        let x = PackedBitPlane::from_fn(dims, |_, _, _| rng.random());
        let w = PackedBitPlane::from_fn(dims, |_, _, _| rng.random());
        let (dx, dw) = (oracle::unpack_plane(&x), oracle::unpack_plane(&w));
        for h in 0..2 {
            for col in 0..3 {
                let dense: i64 = (0..c).map(|ch| dx.at(ch, h, col) * dw.at(ch, h, col)).sum();
                assert_eq!(dot_planes_at(&x, &w, (h, col)).unwrap() as i64, dense);
            }
        }
    }
}

#[test]
fn oracle_conv_counts_taps() {
    let mut x = DenseTensor::zeros(1, 5, 5);
    for h in 0..5 {
        for w in 0..5 {
            x.set(0, h, w, 1);
        }
    }
    let mut k = DenseTensor::zeros(1, 3, 3);
    for h in 0..3 {
        for w in 0..3 {
            k.set(0, h, w, 1);
        }
    }
    let y = oracle::conv2d(&x, &[k], 1, 1);
    assert_eq!((y.at(0, 0, 0), y.at(0, 0, 2), y.at(0, 2, 2)), (4, 6, 9));

    let mut one = DenseTensor::zeros(1, 1, 1);
    one.set(0, 0, 0, 1);
    assert_eq!(oracle::conv2d(&one, &[one.clone()], 1, 0).at(0, 0, 0), 1);
}
