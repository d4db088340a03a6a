use std::collections::HashSet;

use onebyte_core::rng::{derive_seed, GaussianStream, SplitMix64};

#[test]
fn moments_of_a_million_draws() {
    let n = 1_000_000;
    let (mut sum, mut sq) = (0.0f64, 0.0f64);
    for z in GaussianStream::new(derive_seed(3, 5, 7).mixed).take(n) {
        sum += z;
        sq += z * z;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    assert!(mean.abs() < 0.005, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn kolmogorov_smirnov_against_standard_normal() {
    let n = 100_000;
    let mut xs: Vec<f64> = GaussianStream::new(derive_seed(11, 0, 0).mixed).take(n).collect();
    xs.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = normal_cdf(*x);
        d = d.max((i as f64 + 1.0) / n as f64 - f).max(f - i as f64 / n as f64);
    }
    // Asymptotic critical value at the 0.01 level.
    let critical = 1.6276 / (n as f64).sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn all_small_triples_distinct() {
    let mut seen = HashSet::new();
    for m in 0..16 {
        for i in 0..16 {
            for k in 0..16 {
                assert!(seen.insert(derive_seed(m, i, k).mixed));
            }
        }
    }
    assert_eq!(seen.len(), 4096);
}

#[test]
fn no_collisions_among_sampled_triples_below_2_pow_20() {
    // Exhaustive checking of 2^60 triples is out of reach; cover a dense cube,
    // the axes and a few million random triples instead.
    let mut seen = HashSet::with_capacity(4_500_000);
    let mut add = |m: u64, i: u64, k: u64| {
        assert!(seen.insert(derive_seed(m, i, k).mixed), "collision at ({m}, {i}, {k})");
    };
    for m in 0..96 {
        for i in 0..96 {
            for k in 0..96 {
                add(m, i, k);
            }
        }
    }
    for x in 96..(1 << 20) {
        add(x, 0, 0);
        add(0, x, 0);
        add(0, 0, x);
    }
    let mut u = SplitMix64::new(99);
    for _ in 0..500_000 {
        let r = u.next_u64();
        let (m, i, k) = (r & 0xFFFFF, (r >> 20) & 0xFFFFF, (r >> 40) & 0xFFFFF);
        if m.max(i).max(k) >= 96 && [m, i, k].iter().filter(|c| **c != 0).count() > 1 {
            add(m, i, k);
        }
    }
}
