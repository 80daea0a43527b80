//! Shared oracles for the integration suites: dense linear algebra and
//! random fixtures, deliberately written with plain loops so they share
//! no code with the library paths they vouch for.

use marconflow::series::{ContextPoint, QueryPoint, TimeSeriesInstance};
use rand::Rng;
use rand_distr::StandardNormal;

/// Lower-triangular Cholesky factor of a dense row-major `n×n` matrix.
pub fn dense_cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    l
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l[i * n + j] * x[j];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Dense multivariate normal log-density via an explicit Cholesky
/// factorization — the oracle for the low-rank evaluation path.
pub fn dense_gaussian_logpdf(mu: &[f64], sigma: &[f64], z: &[f64]) -> f64 {
    let n = mu.len();
    let l = dense_cholesky(sigma, n);
    let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    let w = forward_substitute(&l, &diff, n);
    let maha: f64 = w.iter().map(|x| x * x).sum();
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    -0.5 * (maha + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Random irregular instance: `n_ctx` context points before t = 0.45 and
/// `k` queries after t = 0.5, channels drawn from {1, 2}.
pub fn random_instance<R: Rng + ?Sized>(n_ctx: usize, k: usize, rng: &mut R) -> TimeSeriesInstance {
    let context = (0..n_ctx)
        .map(|_| ContextPoint {
            t: rng.gen_range(0.0..0.45),
            c: rng.gen_range(1..=2),
            v: rng.sample(StandardNormal),
        })
        .collect();
    let query = (0..k)
        .map(|_| QueryPoint { t: rng.gen_range(0.5..1.0), c: rng.gen_range(1..=2) })
        .collect();
    let answer = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    TimeSeriesInstance { context, query, answer }
}
