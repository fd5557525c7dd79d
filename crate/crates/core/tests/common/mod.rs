//! Shared test helpers: deterministic data generation and a central
//! finite-difference gradient checker.

#![allow(dead_code)]

use lat_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi).
pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Checks analytic gradients of `f` against central finite differences.
///
/// `f` must be a pure function of its inputs: it is re-invoked many times on
/// fresh leaves and must return a single-element loss tensor. Every input
/// coordinate is probed with h = 1e-5 (scaled by magnitude); the analytic
/// value must match within relative error 1e-4 (absolute floor 1e-7 for
/// near-zero gradients).
pub fn check_grads<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| {
            Tensor::from_vec(shape, data.clone())
                .expect("test input shape")
                .with_grad()
        })
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.len(), 1, "loss must be scalar");
    loss.backward().expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad_vec().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |probe: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let fresh: Vec<Tensor<f64>> = probe
            .iter()
            .map(|(shape, data)| Tensor::from_vec(shape, data.clone()).unwrap())
            .collect();
        f(&fresh).item().expect("scalar loss")
    };

    for (i, (_, data)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let h = 1e-5 * data[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].1[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].1[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let got = analytic[i][j];
            let denom = numeric.abs().max(got.abs());
            let err = (numeric - got).abs();
            assert!(
                err <= 1e-4 * denom.max(1e-3) || err <= 1e-7,
                "gradient mismatch input {i} coord {j}: analytic {got}, numeric {numeric}"
            );
        }
    }
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {})",
        (a - b).abs()
    );
}
