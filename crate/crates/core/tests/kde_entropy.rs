//! Entropy estimator against analytic entropies and an O(m²) direct KDE.

use ocd::layer_select::{kde_entropy, silverman_bandwidth};
use ocd::numkit::RngStream;
use proptest::prelude::*;

/// Direct plug-in estimate: every pairwise kernel evaluated, no binning.
fn exact_plugin_entropy(xs: &[f64]) -> f64 {
    let h = silverman_bandwidth(xs).unwrap();
    let m = xs.len() as f64;
    let c = 1.0 / (m * h * (2.0 * std::f64::consts::PI).sqrt());
    -xs.iter()
        .map(|a| {
            let p: f64 = xs.iter().map(|b| (-0.5 * ((a - b) / h).powi(2)).exp()).sum();
            (c * p).ln()
        })
        .sum::<f64>()
        / m
}

fn normals(seed: u64, n: usize) -> Vec<f64> {
    RngStream::new(seed, 0).gaussian(&[n]).into_data()
}

fn uniforms(seed: u64, n: usize) -> Vec<f64> {
    let mut r = RngStream::new(seed, 1);
    (0..n).map(|_| r.uniform()).collect()
}

#[test]
fn gaussian_entropy() {
    let h = kde_entropy(&normals(1, 10_000)).unwrap();
    let truth = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((truth - 1.4189).abs() < 1e-4);
    assert!((h - truth).abs() < 0.05, "{h} vs {truth}");
}

#[test]
fn uniform_entropy() {
    let h = kde_entropy(&uniforms(2, 10_000)).unwrap();
    assert!(h.abs() < 0.05, "{h}");
}

#[test]
fn binned_estimate_tracks_direct_estimate() {
    for (seed, xs) in [(3, normals(3, 2000)), (4, uniforms(4, 2000))] {
        let exp: Vec<f64> = normals(seed + 10, 2000).iter().map(|v| v.exp()).collect();
        for sample in [xs, exp] {
            let a = kde_entropy(&sample).unwrap();
            let b = exact_plugin_entropy(&sample);
            assert!((a - b).abs() < 1e-3, "binned {a} vs direct {b}");
        }
    }
}

#[test]
fn translation_invariance() {
    let xs = normals(5, 10_000);
    let h0 = kde_entropy(&xs).unwrap();
    for c in [1e-3, 3.7, -250.0] {
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let h1 = kde_entropy(&shifted).unwrap();
        assert!((h1 - h0).abs() < 1e-9, "shift {c}: {h1} vs {h0}");
    }
}

#[test]
fn scaling_adds_log_c() {
    let xs = uniforms(6, 5000);
    let h0 = kde_entropy(&xs).unwrap();
    for c in [0.01, 2.5, 1000.0] {
        let scaled: Vec<f64> = xs.iter().map(|v| v * c).collect();
        let h1 = kde_entropy(&scaled).unwrap();
        assert!((h1 - h0 - f64::ln(c)).abs() < 1e-9, "scale {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permutation_invariant(seed in 0u64..1000, n in 10usize..400) {
        let xs = normals(seed, n);
        let mut ys = xs.clone();
        RngStream::new(seed, 9).shuffle(&mut ys);
        prop_assert_eq!(kde_entropy(&xs).unwrap(), kde_entropy(&ys).unwrap());
    }
}
