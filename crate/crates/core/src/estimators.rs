//! First stage, TSLS, the two penalized posterior modes, and the
//! error-bound diagnostics.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_with_jitter, eigen_extremes, inverse_sqrt_spd, symmetric_eigen, SINGULAR_RTOL,
};
use crate::model::IndividualDataset;
use crate::moments::Moments;

/// First-stage least-squares fit of `D` on `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageFit {
    pub gamma_hat: DVector<f64>,
    /// `D̂ = Z γ̂`
    pub d_hat: DVector<f64>,
    pub d_hat_norm2: f64,
}

pub fn first_stage(data: &IndividualDataset) -> Result<FirstStageFit> {
    let z = data.z();
    let ztz = z.tr_mul(z);
    let eig = symmetric_eigen(&ztz);
    let (lo, hi) = eigen_extremes(&eig.eigenvalues);
    let threshold = SINGULAR_RTOL * hi.max(0.0);
    if !(lo > threshold) {
        return Err(Error::RankDeficient {
            eigenvalue: lo,
            threshold,
        });
    }
    let chol = Cholesky::new(ztz).ok_or(Error::RankDeficient {
        eigenvalue: lo,
        threshold,
    })?;
    let gamma_hat = chol.solve(&z.tr_mul(data.d()));
    let d_hat = z * &gamma_hat;
    let d_hat_norm2 = d_hat.norm_squared();
    Ok(FirstStageFit {
        gamma_hat,
        d_hat,
        d_hat_norm2,
    })
}

/// `D̂ᵀY / D̂ᵀD̂`.
pub fn tsls(data: &IndividualDataset, fit: &FirstStageFit) -> Result<f64> {
    if !(fit.d_hat_norm2 > 0.0) {
        return Err(Error::ZeroExposure);
    }
    Ok(fit.d_hat.dot(data.y()) / fit.d_hat_norm2)
}

/// Same estimator from moments (works for summary data too).
pub fn tsls_from_moments(m: &Moments) -> Result<f64> {
    if !(m.dtd > 0.0) {
        return Err(Error::ZeroExposure);
    }
    Ok(m.dty / m.dtd)
}

/// Prior on the pleiotropic effects: a common Gaussian or the spike/slab
/// mixture with fixed indicators.
#[derive(Debug, Clone, Copy)]
pub enum PriorShape<'a> {
    Single,
    Mixture { xi: &'a [bool], nu0: f64 },
}

impl PriorShape<'_> {
    /// Diagonal of `Γ` (or `Γ_ξ`).
    pub fn variances(&self, tau2: f64, j: usize) -> DVector<f64> {
        match self {
            PriorShape::Single => DVector::from_element(j, tau2),
            PriorShape::Mixture { xi, nu0 } => {
                DVector::from_iterator(j, xi.iter().map(|&x| slab_or_spike_variance(x, tau2, *nu0)))
            }
        }
    }

    pub fn means(&self, mu_alpha: f64, j: usize) -> DVector<f64> {
        match self {
            PriorShape::Single => DVector::from_element(j, mu_alpha),
            PriorShape::Mixture { xi, .. } => {
                DVector::from_iterator(j, xi.iter().map(|&x| if x { mu_alpha } else { 0.0 }))
            }
        }
    }

    fn check(&self, j: usize) -> Result<()> {
        if let PriorShape::Mixture { xi, nu0 } = self {
            if xi.len() != j {
                return Err(Error::Dimension(format!(
                    "xi has {} entries for {j} instruments",
                    xi.len()
                )));
            }
            if !(*nu0 > 0.0 && *nu0 < 1.0) {
                return Err(Error::param("nu0", nu0, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// `(ν₀ + (1 − ν₀)ξ)τ²`, branching so that `ξ = 1` gives exactly `τ²`.
#[inline]
pub fn slab_or_spike_variance(xi: bool, tau2: f64, nu0: f64) -> f64 {
    if xi {
        tau2
    } else {
        nu0 * tau2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeMode {
    pub beta: f64,
    pub alpha: DVector<f64>,
}

fn check_variances(tau2: f64, sigma2_eta: f64) -> Result<()> {
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(Error::param("tau2", tau2, "must be positive and finite"));
    }
    if !(sigma2_eta > 0.0 && sigma2_eta.is_finite()) {
        return Err(Error::param(
            "sigma2_eta",
            sigma2_eta,
            "must be positive and finite",
        ));
    }
    Ok(())
}

/// Minimizer of `‖Y − D̂β − Zα‖² + σ² Σⱼ (αⱼ − mⱼ)² / Γⱼⱼ` over `(β, α)`.
/// Only `α` is penalized.
pub fn ridge_mode(
    m: &Moments,
    shape: PriorShape<'_>,
    mu_alpha: f64,
    tau2: f64,
    sigma2_eta: f64,
) -> Result<RidgeMode> {
    check_variances(tau2, sigma2_eta)?;
    let j = m.num_instruments();
    shape.check(j)?;
    if !(m.dtd > 0.0) {
        return Err(Error::ZeroExposure);
    }
    let vars = shape.variances(tau2, j);
    let means = shape.means(mu_alpha, j);

    let mut system = DMatrix::zeros(j + 1, j + 1);
    let mut rhs = DVector::zeros(j + 1);
    system[(0, 0)] = m.dtd;
    rhs[0] = m.dty;
    for a in 0..j {
        system[(0, a + 1)] = m.ztd[a];
        system[(a + 1, 0)] = m.ztd[a];
        let weight = sigma2_eta / vars[a];
        for b in 0..j {
            system[(a + 1, b + 1)] = m.ztz[(a, b)];
        }
        system[(a + 1, a + 1)] += weight;
        rhs[a + 1] = m.zty[a] + weight * means[a];
    }
    let chol = cholesky_with_jitter(system, "ridge block system")?;
    let sol = chol.solve(&rhs);
    Ok(RidgeMode {
        beta: sol[0],
        alpha: sol.rows(1, j).into_owned(),
    })
}

pub fn ridge_mode_single(
    m: &Moments,
    mu_alpha: f64,
    tau2: f64,
    sigma2_eta: f64,
) -> Result<RidgeMode> {
    ridge_mode(m, PriorShape::Single, mu_alpha, tau2, sigma2_eta)
}

pub fn ridge_mode_mixture(
    m: &Moments,
    mu_alpha: f64,
    xi: &[bool],
    tau2: f64,
    sigma2_eta: f64,
    nu0: f64,
) -> Result<RidgeMode> {
    ridge_mode(
        m,
        PriorShape::Mixture { xi, nu0 },
        mu_alpha,
        tau2,
        sigma2_eta,
    )
}

/// The matrices `A = ZᵀP_{D̂}Z/(nσ²)` and `B = (ZᵀZ/σ² + Γ⁻¹)/n`.
#[derive(Debug, Clone)]
pub struct AssumptionMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub fn assumption_matrices(
    m: &Moments,
    sigma2_eta: f64,
    prior_vars: &DVector<f64>,
) -> AssumptionMatrices {
    let n = m.scale_n();
    let a = (&m.ztd * m.ztd.transpose()) / (m.dtd * n * sigma2_eta);
    let mut b = &m.ztz / sigma2_eta;
    for k in 0..b.nrows() {
        b[(k, k)] += 1.0 / prior_vars[k];
    }
    AssumptionMatrices { a, b: b / n }
}

/// Largest eigenvalue of `AB⁻¹`, via the symmetric form `B^{-1/2} A B^{-1/2}`.
pub fn largest_eigenvalue_ratio(mats: &AssumptionMatrices) -> Result<f64> {
    let r = inverse_sqrt_spd(&mats.b, "B")?;
    let sym = &r * &mats.a * &r;
    let (_, hi) = eigen_extremes(&symmetric_eigen(&sym).eigenvalues);
    Ok(hi)
}

/// Ground truth needed by the error bound: the true `α` plus `Zᵀη̂` and
/// `D̂ᵀη̂` for the realized `η̂ = Y − βD̂ − Zα`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub alpha_true: DVector<f64>,
    pub zt_eta: DVector<f64>,
    pub dt_eta: f64,
}

impl BoundInputs {
    pub fn from_truth(
        data: &IndividualDataset,
        fit: &FirstStageFit,
        beta: f64,
        alpha_true: &DVector<f64>,
    ) -> Self {
        let eta = data.y() - &fit.d_hat * beta - data.z() * alpha_true;
        Self {
            alpha_true: alpha_true.clone(),
            zt_eta: data.z().tr_mul(&eta),
            dt_eta: fit.d_hat.dot(&eta),
        }
    }
}

/// The three summands of the error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// Prior-location misfit term.
    pub shrinkage_bias: f64,
    /// `‖ZᵀP⊥η̂‖` term.
    pub projection_noise: f64,
    /// `|D̂ᵀη̂| / D̂ᵀD̂`
    pub endogeneity: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.shrinkage_bias + self.projection_noise + self.endogeneity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    /// Largest eigenvalue of `AB⁻¹`.
    pub c_star: f64,
    /// Largest eigenvalue of `AB_ξ⁻¹`; equals `c_star` under the single prior.
    pub c_double_star: f64,
    /// Whether the constant governing the chosen prior lies in (0, 1).
    pub assumption_ok: bool,
    /// Present only when truth was supplied and `assumption_ok` holds.
    pub bound: Option<BoundTerms>,
}

impl DiagnosticsReport {
    pub fn bound_total(&self) -> Option<f64> {
        self.bound.map(|b| b.total())
    }
}

pub fn diagnostics(
    m: &Moments,
    tau2: f64,
    sigma2_eta: f64,
    shape: PriorShape<'_>,
    mu_alpha: f64,
    truth: Option<&BoundInputs>,
) -> Result<DiagnosticsReport> {
    check_variances(tau2, sigma2_eta)?;
    let j = m.num_instruments();
    shape.check(j)?;
    if !(m.dtd > 0.0) {
        return Err(Error::ZeroExposure);
    }
    let single_vars = PriorShape::Single.variances(tau2, j);
    let c_star = largest_eigenvalue_ratio(&assumption_matrices(m, sigma2_eta, &single_vars))?;
    let shape_vars = shape.variances(tau2, j);
    let c_double_star = match shape {
        PriorShape::Single => c_star,
        PriorShape::Mixture { .. } => {
            largest_eigenvalue_ratio(&assumption_matrices(m, sigma2_eta, &shape_vars))?
        }
    };
    let c = match shape {
        PriorShape::Single => c_star,
        PriorShape::Mixture { .. } => c_double_star,
    };
    let assumption_ok = c > 0.0 && c < 1.0;

    let bound = match truth {
        Some(t) if assumption_ok => {
            if t.alpha_true.len() != j || t.zt_eta.len() != j {
                return Err(Error::Dimension(
                    "bound inputs do not match instrument count".into(),
                ));
            }
            let gamma_norm = m.gamma_hat.norm();
            let factor = c / (1.0 - c) * gamma_norm / m.dtd;
            let misfit = (&t.alpha_true - shape.means(mu_alpha, j)).component_div(&shape_vars);
            let zt_perp_eta = &t.zt_eta - &m.ztd * (t.dt_eta / m.dtd);
            Some(BoundTerms {
                shrinkage_bias: factor * sigma2_eta * misfit.norm(),
                projection_noise: factor * zt_perp_eta.norm(),
                endogeneity: t.dt_eta.abs() / m.dtd,
            })
        }
        _ => None,
    };

    Ok(DiagnosticsReport {
        c_star,
        c_double_star,
        assumption_ok,
        bound,
    })
}
