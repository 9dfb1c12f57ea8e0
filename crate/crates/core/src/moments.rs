//! Cross-product moments consumed by every estimator.
//!
//! The ridge modes, the Gibbs conditionals, the M-step and the error-bound
//! constants depend on the data only through `ZᵀZ`, `ZᵀD̂`, `ZᵀY`, `D̂ᵀD̂`,
//! `D̂ᵀY` (and `YᵀY` for the residual-variance update). Summary statistics
//! supply the same products already divided by the residual variance, which
//! is then pinned at 1.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::FirstStageFit;
use crate::model::{IndividualDataset, SummaryDataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    /// Individual-level data: `sigma2_eta` is sampled.
    Estimated { n: usize, yty: f64 },
    /// Summary data: the moments are already scaled and `sigma2_eta == 1`.
    Absorbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub ztz: DMatrix<f64>,
    /// `ZᵀD̂`
    pub ztd: DVector<f64>,
    pub zty: DVector<f64>,
    /// `D̂ᵀD̂`
    pub dtd: f64,
    /// `D̂ᵀY`
    pub dty: f64,
    pub gamma_hat: DVector<f64>,
    pub noise: NoiseScale,
}

impl Moments {
    pub fn individual(data: &IndividualDataset, fit: &FirstStageFit) -> Self {
        let z = data.z();
        let y = data.y();
        Self {
            ztz: z.tr_mul(z),
            ztd: z.tr_mul(&fit.d_hat),
            zty: z.tr_mul(y),
            dtd: fit.d_hat_norm2,
            dty: fit.d_hat.dot(y),
            gamma_hat: fit.gamma_hat.clone(),
            noise: NoiseScale::Estimated {
                n: data.n(),
                yty: y.dot(y),
            },
        }
    }

    /// Moment substitutions for summary statistics under a diagonal `ZᵀZ`:
    /// `ZᵀZ/σ² → Σ⁻¹`, `ZᵀD̂/σ² → Σ⁻¹γ̃`, `ZᵀY/σ² → Σ⁻¹Ω̃`,
    /// `D̂ᵀD̂/σ² → γ̃ᵀΣ⁻¹γ̃`, `D̂ᵀY/σ² → γ̃ᵀΣ⁻¹Ω̃`.
    pub fn summary(summary: &SummaryDataset) -> Self {
        let precision = summary.sigma2_omega().map(|s| 1.0 / s);
        let g = summary.gamma2();
        let o = summary.omega();
        let ztd = precision.component_mul(g);
        let zty = precision.component_mul(o);
        Self {
            ztz: DMatrix::from_diagonal(&precision),
            dtd: g.dot(&ztd),
            dty: g.dot(&zty),
            ztd,
            zty,
            gamma_hat: g.clone(),
            noise: NoiseScale::Absorbed,
        }
    }

    /// Divides every product by a known `σ²_η` and stops it being sampled,
    /// which puts individual-level moments on the summary-data footing.
    pub fn with_fixed_noise(self, sigma2_eta: f64) -> Result<Self> {
        if !(sigma2_eta > 0.0 && sigma2_eta.is_finite()) {
            return Err(Error::param(
                "sigma2_eta",
                sigma2_eta,
                "must be positive and finite",
            ));
        }
        let s = 1.0 / sigma2_eta;
        Ok(Self {
            ztz: self.ztz * s,
            ztd: self.ztd * s,
            zty: self.zty * s,
            dtd: self.dtd * s,
            dty: self.dty * s,
            gamma_hat: self.gamma_hat,
            noise: NoiseScale::Absorbed,
        })
    }

    pub fn num_instruments(&self) -> usize {
        self.ztz.nrows()
    }

    /// Sample count, or 1 for summary data where it cancels everywhere.
    pub fn scale_n(&self) -> f64 {
        match self.noise {
            NoiseScale::Estimated { n, .. } => n as f64,
            NoiseScale::Absorbed => 1.0,
        }
    }

    /// `‖Y − D̂β − Zα‖²` expanded in moments. `None` for summary data.
    pub fn residual_ss(&self, beta: f64, alpha: &DVector<f64>) -> Option<f64> {
        match self.noise {
            NoiseScale::Estimated { yty, .. } => {
                let cross = &self.zty - &self.ztd * beta;
                let quad = alpha.dot(&(&self.ztz * alpha));
                let rss = yty - 2.0 * beta * self.dty + beta * beta * self.dtd
                    - 2.0 * alpha.dot(&cross)
                    + quad;
                Some(rss.max(0.0))
            }
            NoiseScale::Absorbed => None,
        }
    }
}
