//! Central finite-difference oracle for the backward rules, plus seeded
//! random inputs for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(rand_vec(n, seed), shape).unwrap()
}

/// Fixed pseudo-random linear functional of `y`, so every output element
/// contributes to the checked scalar with a distinct weight.
pub fn probe(y: &Tensor<f64>) -> Tensor<f64> {
    let w: Vec<f64> = (0..y.numel()).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
    let w = Tensor::new(w, y.shape()).unwrap();
    y.mul(&w).unwrap().sum_all()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error between analytic gradients of the scalar `f` and
/// central differences, over every element of every input.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()).unwrap())
        .collect();
    f(&params).backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (pi, p) in inputs.iter().enumerate() {
        for j in 0..p.numel() {
            let eval = |delta: f64| {
                let consts: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        let mut d = q.to_vec();
                        if qi == pi {
                            d[j] += delta;
                        }
                        Tensor::new(d, q.shape()).unwrap()
                    })
                    .collect();
                f(&consts).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let err = rel_err(analytic[pi][j], numeric);
            // NaN must not hide behind max().
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    worst
}

/// [`gradient_error`] that panics above `tol`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], tol: f64, f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let worst = gradient_error(inputs, f);
    assert!(worst <= tol, "gradient mismatch: worst relative error {worst:e} > {tol:e}");
    worst
}
