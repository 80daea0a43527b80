//! Gaussian base distributions with low-rank-plus-identity covariance.
//!
//! Each mixture component predicts, per instance, a `K`-variate Gaussian
//! with mean `μ` and covariance `Σ = I_K + c·UUᵀ` where `U` is `K×M′` and
//! `c = 1/√M′`. All algebra goes through the low-rank structure:
//!
//! - log-densities use the Woodbury identity (an `M′×M′` solve instead of
//!   a `K×K` one) and the Weinstein–Aronszajn identity for the
//!   log-determinant, so the cost is `O(M′²K)` instead of `O(K³)`;
//! - marginalization over an index set is row selection on `μ` and `U`;
//! - sampling adds two independent noise terms, `z = μ + ε + √c·Uξ`,
//!   which has exactly the covariance `I + cUUᵀ` without ever factorizing
//!   a `K×K` matrix.
//!
//! Since `Σ` is the identity plus a positive semidefinite term, its
//! spectrum is bounded below by 1 and the inner `I_{M′} + cUᵀU` solve
//! needs no regularization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::gradcore::linalg;
use crate::gradcore::{NodeId, Tape, Tensor};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// A `K`-variate Gaussian `N(μ, I_K + c·UUᵀ)` with `c = 1/√M′`.
#[derive(Clone, Debug)]
pub struct LowRankGaussian {
    mu: Vec<f64>,
    u: Tensor,
    c: f64,
}

impl LowRankGaussian {
    /// Builds the distribution from its mean and low-rank factor.
    pub fn new(mu: Vec<f64>, u: Tensor) -> Result<LowRankGaussian> {
        let [k, rank] = crate::gradcore::tensor::dims2(&u)?;
        if k != mu.len() {
            return Err(Error::Contract(format!(
                "mean has {} entries but the factor has {k} rows",
                mu.len()
            )));
        }
        if rank == 0 {
            return Err(Error::Contract("low-rank factor needs at least one column".into()));
        }
        if mu.iter().any(|m| !m.is_finite()) || !u.is_finite() {
            return Err(Error::Numerical("non-finite Gaussian parameters".into()));
        }
        let c = 1.0 / (rank as f64).sqrt();
        Ok(LowRankGaussian { mu, u, c })
    }

    /// Builds the component distribution from its encoding `h_d` (`K×M`)
    /// and the shared head weights: `μ = h_d·θ_mean`, `U = h_d·θ_cov`.
    pub fn build(h_d: &Tensor, theta_mean: &Tensor, theta_cov: &Tensor) -> Result<LowRankGaussian> {
        let mu = h_d.matmul(theta_mean)?;
        let u = h_d.matmul(theta_cov)?;
        LowRankGaussian::new(mu.into_data(), u)
    }

    /// Number of variables `K`.
    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// Rank `M′` of the covariance correction.
    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    /// Mean vector.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Low-rank factor `U`, shape `[K, M′]`.
    pub fn u(&self) -> &Tensor {
        &self.u
    }

    /// Covariance scale `c = 1/√M′`.
    pub fn c(&self) -> f64 {
        self.c
    }

    /// Materializes the dense covariance `I + cUUᵀ`. Intended for small-K
    /// diagnostics and tests; the model itself never forms this matrix.
    pub fn covariance_dense(&self) -> Result<Tensor> {
        let uut = self.u.matmul(&self.u.transpose2()?)?;
        let k = self.k();
        let mut cov = uut.into_data();
        for (i, value) in cov.iter_mut().enumerate() {
            *value *= self.c;
            if i % k == i / k {
                *value += 1.0;
            }
        }
        Tensor::new(vec![k, k], cov)
    }

    /// Factorization of the inner matrix `A = I_{M′} + cUᵀU`.
    fn inner_factor(&self) -> Result<Tensor> {
        let ut = self.u.transpose2()?;
        let utu = ut.matmul(&self.u)?;
        let rank = self.rank();
        let mut a = utu.into_data();
        for (i, value) in a.iter_mut().enumerate() {
            *value *= self.c;
            if i % rank == i / rank {
                *value += 1.0;
            }
        }
        linalg::cholesky(&Tensor::new(vec![rank, rank], a)?)
    }

    /// Log-density at `z`.
    ///
    /// Computed as `−½[K·log 2π + logdet Σ + rᵀΣ⁻¹r]` with `r = z − μ`,
    /// where `logdet Σ = logdet(I_{M′} + cUᵀU)` and
    /// `rᵀΣ⁻¹r = rᵀr − c·(Uᵀr)ᵀ(I_{M′} + cUᵀU)⁻¹(Uᵀr)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let k = self.k();
        if z.len() != k {
            return Err(Error::Contract(format!(
                "point has {} entries but the distribution has {k} variables",
                z.len()
            )));
        }
        let r: Vec<f64> = z.iter().zip(&self.mu).map(|(z, m)| z - m).collect();
        let factor = self.inner_factor()?;
        let logdet = linalg::logdet_from_factor(&factor)?;
        let w = self.u.transpose2()?.matmul(&Tensor::column(&r))?;
        let s = linalg::solve_from_factor(&factor, &w)?;
        let rr: f64 = r.iter().map(|x| x * x).sum();
        let ws: f64 = w.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        let quad = rr - self.c * ws;
        let value = -0.5 * (k as f64 * LN_2PI + logdet + quad);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite Gaussian log-density {value}")));
        }
        Ok(value)
    }

    /// Restriction of the distribution to the 0-based variable subset
    /// `indices`: selects rows of `μ` and `U`, keeping the same scale `c`.
    pub fn marginalize(&self, indices: &[usize]) -> Result<LowRankGaussian> {
        if indices.is_empty() {
            return Err(Error::Contract("marginalization needs a nonempty index set".into()));
        }
        let k = self.k();
        let mut seen = vec![false; k];
        for &i in indices {
            if i >= k {
                return Err(Error::Contract(format!(
                    "marginal index {i} out of range for {k} variables"
                )));
            }
            if seen[i] {
                return Err(Error::Contract(format!("duplicate marginal index {i}")));
            }
            seen[i] = true;
        }
        let mu = indices.iter().map(|&i| self.mu[i]).collect();
        let u = self.u.select_rows(indices)?;
        Ok(LowRankGaussian { mu, u, c: self.c })
    }

    /// Draws one sample `z = μ + ε + √c·Uξ` with `ε ~ N(0, I_K)` and
    /// `ξ ~ N(0, I_{M′})`, whose covariance is exactly `I + cUUᵀ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.k();
        let rank = self.rank();
        let xi: Vec<f64> = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
        let sqrt_c = self.c.sqrt();
        let mut z = Vec::with_capacity(k);
        for i in 0..k {
            let eps: f64 = rng.sample(StandardNormal);
            let row = self.u.row_slice(i);
            let correlated: f64 = row.iter().zip(&xi).map(|(u, x)| u * x).sum();
            z.push(self.mu[i] + eps + sqrt_c * correlated);
        }
        z
    }
}

/// Tape-level log-density of `N(μ, I + c·UUᵀ)` at `z`.
///
/// `mu` and `z` are `[K, 1]` nodes and `u` is `[K, M′]`; the result is a
/// scalar node. The computation mirrors [`LowRankGaussian::log_density`]
/// (Woodbury solve, Weinstein–Aronszajn log-determinant) so that the two
/// paths agree to machine precision.
pub fn log_density_graph(tape: &mut Tape, mu: NodeId, u: NodeId, z: NodeId) -> Result<NodeId> {
    let [k, rank] = crate::gradcore::tensor::dims2(tape.value(u))?;
    let c = 1.0 / (rank as f64).sqrt();
    let r = tape.sub(z, mu)?;
    let ut = tape.transpose(u)?;
    let utu = tape.matmul(ut, u)?;
    let eye = tape.constant(Tensor::eye(rank))?;
    let scaled_utu = tape.scale(utu, c)?;
    let a = tape.add(eye, scaled_utu)?;
    let logdet = tape.chol_logdet(a)?;
    let w = tape.matmul(ut, r)?;
    let s = tape.chol_solve(a, w)?;
    let r_sq = tape.mul(r, r)?;
    let rr = tape.sum(r_sq)?;
    let w_s = tape.mul(w, s)?;
    let ws = tape.sum(w_s)?;
    let corr = tape.scale(ws, c)?;
    let quad = tape.sub(rr, corr)?;
    let logdet_quad = tape.add(logdet, quad)?;
    let inner = tape.add_const(logdet_quad, k as f64 * LN_2PI)?;
    tape.scale(inner, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::gradcheck;
    use crate::gradcore::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Dense O(K³) reference: textbook Cholesky of the full covariance,
    /// independent of the low-rank code path.
    fn dense_log_pdf(mu: &[f64], sigma: &[Vec<f64>], z: &[f64]) -> f64 {
        let k = mu.len();
        let mut l = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..=i {
                let mut s = sigma[i][j];
                for p in 0..j {
                    s -= l[i][p] * l[j][p];
                }
                if i == j {
                    l[i][j] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        let logdet: f64 = (0..k).map(|i| 2.0 * l[i][i].ln()).sum();
        // Solve L·y = z − μ; the quadratic form is ‖y‖².
        let mut y = vec![0.0; k];
        for i in 0..k {
            let mut s = z[i] - mu[i];
            for p in 0..i {
                s -= l[i][p] * y[p];
            }
            y[i] = s / l[i][i];
        }
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (k as f64 * LN_2PI + logdet + quad)
    }

    fn dense_cov(g: &LowRankGaussian) -> Vec<Vec<f64>> {
        let cov = g.covariance_dense().unwrap();
        (0..g.k()).map(|i| cov.row_slice(i).to_vec()).collect()
    }

    fn random_gaussian(k: usize, rank: usize, seed: u64) -> LowRankGaussian {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mu: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u: Vec<f64> =
            (0..k * rank).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        LowRankGaussian::new(mu, Tensor::new(vec![k, rank], u).unwrap()).unwrap()
    }

    #[test]
    fn zero_factor_gives_identity_covariance() {
        let h = Tensor::new(vec![3, 2], vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5]).unwrap();
        let theta_mean = Tensor::column(&[1.0, -1.0]);
        let theta_cov = Tensor::zeros(&[2, 4]);
        let g = LowRankGaussian::build(&h, &theta_mean, &theta_cov).unwrap();
        assert_eq!(g.covariance_dense().unwrap(), Tensor::eye(3));
        assert_eq!(g.mu(), &[1.3, 1.5, -1.5]);
    }

    #[test]
    fn unit_factor_gives_variance_two() {
        let g = LowRankGaussian::new(vec![0.0], Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(dense_cov(&g), vec![vec![2.0]]);
        let expected = -0.5 * (LN_2PI + 2.0_f64.ln());
        assert!((g.log_density(&[0.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn covariance_is_symmetric() {
        let g = random_gaussian(6, 3, 0);
        let cov = dense_cov(&g);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(cov[i][j], cov[j][i]);
            }
        }
    }

    #[test]
    fn standard_normal_at_the_mean() {
        let k = 4;
        let g = LowRankGaussian::new(vec![0.5; k], Tensor::zeros(&[k, 2])).unwrap();
        let got = g.log_density(&vec![0.5; k]).unwrap();
        assert!((got - (-(k as f64) / 2.0 * LN_2PI)).abs() < 1e-15);
    }

    #[test]
    fn log_density_matches_dense_oracle() {
        for (k, rank, seed) in [(8, 3, 1), (5, 1, 2), (12, 8, 3), (50, 8, 4), (3, 6, 5)] {
            let g = random_gaussian(k, rank, seed);
            let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
            let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let fast = g.log_density(&z).unwrap();
            let dense = dense_log_pdf(g.mu(), &dense_cov(&g), &z);
            assert!(
                (fast - dense).abs() < 1e-9,
                "K={k} M'={rank}: {fast} vs {dense}"
            );
        }
    }

    #[test]
    fn marginal_over_all_indices_is_the_same_distribution() {
        let g = random_gaussian(4, 2, 7);
        let m = g.marginalize(&[0, 1, 2, 3]).unwrap();
        assert_eq!(m.mu(), g.mu());
        assert_eq!(m.u(), g.u());
        let z = [0.3, -0.2, 1.1, 0.0];
        assert_eq!(m.log_density(&z).unwrap(), g.log_density(&z).unwrap());
    }

    #[test]
    fn marginal_keeps_the_selected_covariance_block() {
        // U chosen so that I + cUUᵀ = [[2,1],[1,3]].
        let s = 2.0_f64.powf(0.25);
        let u = Tensor::new(vec![2, 2], vec![s, 0.0, s, s]).unwrap();
        let g = LowRankGaussian::new(vec![0.5, -1.0], u).unwrap();
        let cov = dense_cov(&g);
        assert!((cov[0][0] - 2.0).abs() < 1e-12 && (cov[0][1] - 1.0).abs() < 1e-12);
        assert!((cov[1][1] - 3.0).abs() < 1e-12);

        let m = g.marginalize(&[1]).unwrap();
        let mcov = dense_cov(&m);
        assert!((mcov[0][0] - 3.0).abs() < 1e-12, "kept variance {}", mcov[0][0]);
        // And its density is the 1-D normal with that variance.
        let got = m.log_density(&[0.2]).unwrap();
        let want = dense_log_pdf(&[-1.0], &[vec![3.0]], &[0.2]);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_marginalization_composes() {
        let g = random_gaussian(5, 2, 9);
        let once = g.marginalize(&[4, 1]).unwrap();
        let twice = g.marginalize(&[0, 4, 1]).unwrap().marginalize(&[1, 2]).unwrap();
        assert_eq!(once.mu(), twice.mu());
        assert_eq!(once.u(), twice.u());
    }

    #[test]
    fn marginalize_rejects_bad_index_sets() {
        let g = random_gaussian(3, 1, 11);
        assert!(g.marginalize(&[]).is_err());
        assert!(g.marginalize(&[0, 0]).is_err());
        assert!(g.marginalize(&[3]).is_err());
    }

    #[test]
    fn marginal_density_equals_integrated_joint() {
        use crate::quadrature::{integrate, integrate2, QuadratureConfig};

        // K=2: p(z₁) must equal ∫ p(z₁, z₂) dz₂.
        let g = random_gaussian(2, 2, 13);
        let marginal = g.marginalize(&[0]).unwrap();
        let cfg = QuadratureConfig { tol: 1e-9, initial_panels: 32, max_depth: 32 };
        for z1 in [-1.5, -0.3, 0.0, 0.8, 2.0] {
            let direct = marginal.log_density(&[z1]).unwrap().exp();
            let integrated =
                integrate(|z2| Ok(g.log_density(&[z1, z2]).unwrap().exp()), -30.0, 30.0, &cfg)
                    .unwrap();
            assert!(
                (direct - integrated).abs() < 1e-3 * direct.max(1e-12),
                "z1={z1}: {direct} vs {integrated}"
            );
        }

        // K=3: p(z₂) must equal the double integral over the complement.
        let g = random_gaussian(3, 1, 17);
        let marginal = g.marginalize(&[1]).unwrap();
        let cfg2 = QuadratureConfig { tol: 1e-7, initial_panels: 16, max_depth: 32 };
        for z2 in [-0.7, 0.4] {
            let direct = marginal.log_density(&[z2]).unwrap().exp();
            let integrated = integrate2(
                |a, b| Ok(g.log_density(&[a, z2, b]).unwrap().exp()),
                -20.0,
                20.0,
                -20.0,
                20.0,
                &cfg2,
            )
            .unwrap();
            assert!(
                (direct - integrated).abs() < 1e-3 * direct.max(1e-12),
                "z2={z2}: {direct} vs {integrated}"
            );
        }
    }

    #[test]
    fn covariance_spectrum_is_bounded_below_by_one() {
        // Σ − 0.999·I stays positive definite for any U because Σ = I + PSD.
        for seed in 0..5 {
            let g = random_gaussian(6, 2, seed);
            let mut shifted = g.covariance_dense().unwrap().into_data();
            for i in 0..6 {
                shifted[i * 6 + i] -= 0.999;
            }
            linalg::cholesky(&Tensor::new(vec![6, 6], shifted).unwrap()).unwrap();
        }
    }

    #[test]
    fn samples_with_zero_factor_are_standard_normal() {
        let g = LowRankGaussian::new(vec![0.0; 3], Tensor::zeros(&[3, 2])).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let n = 100_000;
        let mut cov = [[0.0; 3]; 3];
        for _ in 0..n {
            let z = g.sample(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += z[i] * z[j] / n as f64;
                }
            }
        }
        let mut frob = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                frob += (cov[i][j] - want) * (cov[i][j] - want);
            }
        }
        assert!(frob.sqrt() < 0.05, "Frobenius error {}", frob.sqrt());
    }

    #[test]
    fn sample_covariance_matches_the_low_rank_structure() {
        // K=2, M′=1, U=[[1],[1]]: c=1, so cov = I + UUᵀ = [[2,1],[1,2]].
        let g = LowRankGaussian::new(
            vec![0.0, 0.0],
            Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.c(), 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let n = 100_000;
        let mut cov = [[0.0; 2]; 2];
        for _ in 0..n {
            let z = g.sample(&mut rng);
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += z[i] * z[j] / n as f64;
                }
            }
        }
        let want = [[2.0, 1.0], [1.0, 2.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (cov[i][j] - want[i][j]).abs() < 0.05,
                    "cov[{i}][{j}] = {}",
                    cov[i][j]
                );
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let g = random_gaussian(4, 2, 31);
        let a = g.sample(&mut ChaCha20Rng::seed_from_u64(5));
        let b = g.sample(&mut ChaCha20Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn graph_log_density_matches_value_path_and_finite_differences() {
        let k = 5;
        let rank = 2;
        let g = random_gaussian(k, rank, 37);
        let z: Vec<f64> = vec![0.4, -1.2, 0.0, 0.9, -0.3];

        let mut params = ParamStore::new();
        params.insert("mu", Tensor::new(vec![k, 1], g.mu().to_vec()).unwrap()).unwrap();
        params.insert("u", g.u().clone()).unwrap();

        let eval = |p: &ParamStore| -> Result<(Tape, NodeId)> {
            let mut tape = Tape::new();
            let ids = tape.register(p)?;
            let z_node = tape.constant(Tensor::column(&z))?;
            let out = log_density_graph(&mut tape, ids["mu"], ids["u"], z_node)?;
            Ok((tape, out))
        };

        // Forward values of the two code paths coincide.
        let (tape, out) = eval(&params).unwrap();
        let graph_value = tape.value(out).item().unwrap();
        let direct = g.log_density(&z).unwrap();
        assert!((graph_value - direct).abs() < 1e-12, "{graph_value} vs {direct}");

        // Reverse-mode gradients match central finite differences.
        let grads = tape.backward(out).unwrap();
        let numeric = gradcheck::finite_difference(
            |p| {
                let (tape, out) = eval(p)?;
                tape.value(out).item()
            },
            &params,
            1e-5,
        )
        .unwrap();
        let err = gradcheck::max_relative_error(&grads, &numeric).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let g = random_gaussian(3, 2, 41);
        assert!(g.log_density(&[0.0, 0.0]).is_err());
        assert!(LowRankGaussian::new(vec![0.0], Tensor::zeros(&[2, 1])).is_err());
        assert!(LowRankGaussian::new(vec![f64::NAN], Tensor::zeros(&[1, 1])).is_err());
    }
}
