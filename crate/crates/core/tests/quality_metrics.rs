mod common;

use common::{naive_ssim, rng};
use proptest::prelude::*;
use rand::Rng;
use sdndti::quality_metrics::*;
use sdndti::{Error, StandardizationParams, Volume4D};

fn random_field(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0.0..1.0)).collect()
}

/// Smooth structured image in [0, 1].
fn structured(dims: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(0.5 + 0.4 * ((x as f64 * 0.5).sin() * (y as f64 * 0.3).cos() + 0.2 * (z as f64 * 0.7).sin()) / 1.2);
            }
        }
    }
    out
}

#[test]
fn ssim_matches_naive_oracle() {
    let dims = [13, 13, 13];
    let a = random_field(1, 2197);
    let b: Vec<f64> = a.iter().zip(random_field(2, 2197)).map(|(x, y)| 0.7 * x + 0.3 * y).collect();
    let mask: Vec<bool> = (0..2197).map(|i| i % 5 != 0).collect();
    let fast = ssim(&a, &b, dims, &mask).unwrap();
    let slow = naive_ssim(&a, &b, dims, &mask);
    assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    let full = vec![true; 2197];
    assert!((ssim(&a, &b, dims, &full).unwrap() - naive_ssim(&a, &b, dims, &full)).abs() < 1e-9);
}

#[test]
fn ssim_trivial_cases() {
    let dims = [16, 14, 12];
    let a = structured(dims);
    let m = vec![true; a.len()];
    assert!((ssim(&a, &a, dims, &m).unwrap() - 1.0).abs() < 1e-12);
    let inv: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
    assert!(ssim(&a, &inv, dims, &m).unwrap() < 0.5);
    let err = ssim(&a[..10 * 14 * 12], &a[..10 * 14 * 12], [10, 14, 12], &m[..10 * 14 * 12]).unwrap_err();
    assert!(matches!(err, Error::Window { window: 11, .. }));
}

#[test]
fn psnr_of_uniform_noise() {
    let n = 47 * 47 * 47;
    let mut r = rng(3);
    let a: Vec<f64> = (0..n).map(|_| r.random_range(0.2..0.8)).collect();
    let b: Vec<f64> = a.iter().map(|x| x + r.random_range(-0.005..0.005)).collect();
    let expected = -10.0 * (2.5e-5f64 / 3.0).log10();
    let got = psnr(&a, &b, &vec![true; n]).unwrap();
    assert!((got - expected).abs() < 0.1, "{got} vs {expected}");
}

#[test]
fn zero_error_consistency() {
    let dims = [12, 12, 12];
    let a = structured(dims);
    let m = vec![true; a.len()];
    assert_eq!(mae(&a, &a, &m).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a, &m).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a, dims, &m).unwrap() - 1.0).abs() < 1e-12);
    let mut b = a.clone();
    b[100] += 1e-3;
    assert!(mae(&a, &b, &m).unwrap() > 0.0);
    assert!(psnr(&a, &b, &m).unwrap().is_finite());
    assert!(ssim(&a, &b, dims, &m).unwrap() < 1.0);
}

#[test]
fn clamping_hides_outliers() {
    let p = StandardizationParams { mean: 100.0, std: 10.0 };
    let base: Vec<f64> = (0..64).map(|i| 90.0 + i as f64 * 0.3).collect();
    let mut at_clip = base.clone();
    let mut spiked = base.clone();
    at_clip[5] = 130.0;
    spiked[5] = 1e6;
    at_clip[9] = 70.0;
    spiked[9] = -500.0;
    let v = |d: Vec<f64>| rescale_for_metrics(&Volume4D::new([4, 4, 4, 1], d).unwrap(), &p).into_data();
    let (r0, r1, r2) = (v(base), v(at_clip), v(spiked));
    assert_eq!(r1, r2);
    let m = vec![true; 64];
    assert_eq!(mae(&r0, &r1, &m).unwrap(), mae(&r0, &r2, &m).unwrap());
    assert_eq!(psnr(&r0, &r1, &m).unwrap(), psnr(&r0, &r2, &m).unwrap());
}

fn unit(r: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 {
            return v.map(|x| x / n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let dims = [11, 12, 11];
        let n = 11 * 12 * 11;
        let a = random_field(seed, n);
        let b = random_field(seed + 7, n);
        let mask: Vec<bool> = (0..n).map(|i| (i + seed as usize) % 3 != 0).collect();
        prop_assert_eq!(mae(&a, &b, &mask).unwrap(), mae(&b, &a, &mask).unwrap());
        prop_assert_eq!(psnr(&a, &b, &mask).unwrap(), psnr(&b, &a, &mask).unwrap());
        prop_assert!((ssim(&a, &b, dims, &mask).unwrap() - ssim(&b, &a, dims, &mask).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b, dims, &mask).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn angular_mad_sign_blind(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a: Vec<[f64; 3]> = (0..50).map(|_| unit(&mut r)).collect();
        let b: Vec<[f64; 3]> = (0..50).map(|_| unit(&mut r)).collect();
        let flips: Vec<bool> = (0..50).map(|_| r.random_bool(0.5)).collect();
        let bf: Vec<[f64; 3]> = b.iter().zip(&flips).map(|(v, &f)| if f { v.map(|x| -x) } else { *v }).collect();
        let m = vec![true; 50];
        let d0 = angular_mad(&a, &b, &m).unwrap();
        prop_assert!((d0 - angular_mad(&a, &bf, &m).unwrap()).abs() < 1e-12);
        prop_assert!((d0 - angular_mad(&b, &a, &m).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=90.0).contains(&d0));
    }
}
