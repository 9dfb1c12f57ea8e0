//! Seeded, splittable random streams.
//!
//! Every stochastic routine in the crate draws from a [`SeededGenerator`].
//! Generators are ChaCha8 streams: the 64-bit seed fixes the key and the
//! split label selects the stream, so `split(seed, a)` and `split(seed, b)`
//! never overlap for `a != b`.
//!
//! Gamma draws take a shape and a RATE. Nothing in this crate uses the
//! scale parameterization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SeededGenerator {
    rng: ChaCha8Rng,
}

impl SeededGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `label` under the same seed.
    pub fn split(seed: u64, label: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label);
        Self { rng }
    }

    pub fn uniform01(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal draw with mean `mu` and variance `sigma2`.
    pub fn draw_normal(&mut self, mu: f64, sigma2: f64) -> Result<f64> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) || !mu.is_finite() {
            return Err(Error::param(
                "sigma2",
                sigma2,
                "variance must be positive and finite",
            ));
        }
        Ok(mu + sigma2.sqrt() * self.standard_normal())
    }

    pub fn draw_gamma(&mut self, shape: f64, rate: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::param("shape", shape, "must be positive and finite"));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::param("rate", rate, "must be positive and finite"));
        }
        let gamma = Gamma::new(shape, 1.0 / rate)
            .map_err(|_| Error::param("shape", shape, "rejected by gamma sampler"))?;
        Ok(gamma.sample(&mut self.rng))
    }

    pub fn draw_bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param("p", p, "probability must lie in [0, 1]"));
        }
        // uniform01 is in [0, 1), so p = 0 never fires and p = 1 always does.
        Ok(self.uniform01() < p)
    }

    pub fn draw_uniform(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::param("b", b, "uniform bounds need a < b"));
        }
        Ok(a + (b - a) * self.uniform01())
    }

    /// `mean + L z` with `z` standard normal, where `chol_factor` is the
    /// lower Cholesky factor `L` of the covariance.
    pub fn draw_mvn_chol(
        &mut self,
        mean: &DVector<f64>,
        chol_factor: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let dim = mean.len();
        if chol_factor.nrows() != dim || chol_factor.ncols() != dim {
            return Err(Error::Dimension(format!(
                "covariance factor is {}x{}, mean has length {dim}",
                chol_factor.nrows(),
                chol_factor.ncols()
            )));
        }
        let z = self.standard_normal_vector(dim);
        Ok(mean + chol_factor.lower_triangle() * z)
    }

    pub fn standard_normal_vector(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.standard_normal())
    }
}

/// Mixes `(seed, label)` into a fresh 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn gamma_uses_rate() {
        let mut g = SeededGenerator::new(11);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| g.draw_gamma(2.0, 0.4).unwrap())
            .collect();
        let (mean, _) = mean_var(&xs);
        // shape / rate = 5
        assert!((mean - 5.0).abs() / 5.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_variance() {
        let mut g = SeededGenerator::new(12);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| g.draw_normal(0.0, 1.0).unwrap())
            .collect();
        let (_, var) = mean_var(&xs);
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn bernoulli_degenerate() {
        let mut g = SeededGenerator::new(3);
        assert!((0..10_000).all(|_| !g.draw_bernoulli(0.0).unwrap()));
        assert!((0..10_000).all(|_| g.draw_bernoulli(1.0).unwrap()));
    }

    #[test]
    fn parameter_violations() {
        let mut g = SeededGenerator::new(0);
        assert!(g.draw_normal(0.0, 0.0).is_err());
        assert!(g.draw_gamma(0.0, 1.0).is_err());
        assert!(g.draw_gamma(1.0, -1.0).is_err());
        assert!(g.draw_bernoulli(1.5).is_err());
        assert!(g.draw_uniform(1.0, 1.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededGenerator::split(99, 4);
        let mut b = SeededGenerator::split(99, 4);
        for _ in 0..1000 {
            assert_eq!(a.uniform01().to_bits(), b.uniform01().to_bits());
        }
        let mut c = SeededGenerator::split(99, 5);
        let mut a = SeededGenerator::split(99, 4);
        assert!((0..10).any(|_| a.uniform01() != c.uniform01()));
    }

    #[test]
    fn split_streams_pass_independence_test() {
        // 10x10 contingency table of paired uniforms, chi-square with 81 df.
        // Critical value at significance 0.001 is 126.0826.
        let mut a = SeededGenerator::split(2024, 1);
        let mut b = SeededGenerator::split(2024, 2);
        let pairs = 100_000;
        let mut table = [[0u32; 10]; 10];
        for _ in 0..pairs {
            let i = (a.uniform01() * 10.0) as usize;
            let j = (b.uniform01() * 10.0) as usize;
            table[i][j] += 1;
        }
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<u32>() as f64).collect();
        let cols: Vec<f64> = (0..10)
            .map(|j| table.iter().map(|r| r[j]).sum::<u32>() as f64)
            .collect();
        let mut stat = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                let expected = rows[i] * cols[j] / pairs as f64;
                stat += (table[i][j] as f64 - expected).powi(2) / expected;
            }
        }
        assert!(stat < 126.0826, "chi-square {stat}");
    }

    #[test]
    fn mvn_chol_moments() {
        let mut g = SeededGenerator::new(5);
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.0]);
        let draws: Vec<DVector<f64>> = (0..200_000)
            .map(|_| g.draw_mvn_chol(&mean, &l).unwrap())
            .collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
        let cov01 = draws
            .iter()
            .map(|d| (d[0] - 1.0) * (d[1] + 2.0))
            .sum::<f64>()
            / draws.len() as f64;
        assert!((m0 - 1.0).abs() < 0.02);
        // L Lᵀ off-diagonal = 2 * 0.5 = 1
        assert!((cov01 - 1.0).abs() < 0.03, "cov {cov01}");
    }

    #[test]
    fn derive_seed_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
