//! Conditional samplers for the E-step chains.
//!
//! A sweep updates `α`, then `ξ` (mixture only), then `τ²`, then `σ²_η`,
//! each conditioned on the most recent values of the others.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::estimators::slab_or_spike_variance;
use crate::linalg::cholesky_with_jitter;
use crate::model::PriorConfig;
use crate::moments::{Moments, NoiseScale};
use crate::rng::SeededGenerator;

/// One Gibbs draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub alpha: DVector<f64>,
    /// All `true` under the single-Gaussian prior.
    pub xi: Vec<bool>,
    pub tau2: f64,
    pub sigma2_eta: f64,
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub current: PosteriorSample,
    pub rng: SeededGenerator,
    pub step_count: u64,
}

impl ChainState {
    /// Starting point: `α = 0`, `ξ ~ Ber(p0_init)` (all ones when
    /// `mixture` is false), `τ² = ν₂/ν₁`, `σ²_η` = sample variance of `Y`
    /// (1 for summary data).
    pub fn initial(
        m: &Moments,
        prior: &PriorConfig,
        mixture: bool,
        mut rng: SeededGenerator,
    ) -> Result<Self> {
        let j = m.num_instruments();
        let xi = if mixture {
            (0..j)
                .map(|_| draw_indicator(&mut rng, prior.p0_init))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![true; j]
        };
        let sigma2_eta = match m.noise {
            NoiseScale::Estimated { n, yty } if n > 1 && yty > 0.0 => yty / (n - 1) as f64,
            _ => 1.0,
        };
        Ok(Self {
            current: PosteriorSample {
                alpha: DVector::zeros(j),
                xi,
                tau2: prior.nu2 / prior.nu1,
                sigma2_eta,
            },
            rng,
            step_count: 0,
        })
    }
}

/// Mean and covariance of `α | β, μ_α, ξ, τ², σ²_η`:
/// `Σ = (ZᵀZ/σ² + Γ_ξ⁻¹)⁻¹`, `θ = Σ(Zᵀ(Y − D̂β)/σ² + Γ_ξ⁻¹ μ_α ξ)`.
/// Sampling goes through [`draw_alpha`]; this form exists for checking.
#[allow(clippy::too_many_arguments)]
pub fn alpha_conditional(
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    xi: &[bool],
    tau2: f64,
    sigma2_eta: f64,
    nu0: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (precision, linear) = alpha_precision_system(m, beta, mu_alpha, xi, tau2, sigma2_eta, nu0);
    let chol = cholesky_with_jitter(precision, "alpha conditional precision")?;
    Ok((chol.solve(&linear), chol.inverse()))
}

#[allow(clippy::too_many_arguments)]
fn alpha_precision_system(
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    xi: &[bool],
    tau2: f64,
    sigma2_eta: f64,
    nu0: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let inv_s = 1.0 / sigma2_eta;
    let mut precision = &m.ztz * inv_s;
    let mut linear = (&m.zty - &m.ztd * beta) * inv_s;
    for (k, &x) in xi.iter().enumerate() {
        let inv_v = 1.0 / slab_or_spike_variance(x, tau2, nu0);
        precision[(k, k)] += inv_v;
        if x {
            linear[k] += inv_v * mu_alpha;
        }
    }
    (precision, linear)
}

/// Draws `α` from its conditional. With `P = LLᵀ` the conditional
/// precision, `θ + L⁻ᵀz` has covariance `P⁻¹`, so `L⁻ᵀ` serves as the
/// covariance factor without forming `P⁻¹`.
#[allow(clippy::too_many_arguments)]
pub fn draw_alpha(
    rng: &mut SeededGenerator,
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    xi: &[bool],
    tau2: f64,
    sigma2_eta: f64,
    nu0: f64,
) -> Result<DVector<f64>> {
    let (precision, linear) = alpha_precision_system(m, beta, mu_alpha, xi, tau2, sigma2_eta, nu0);
    let chol = cholesky_with_jitter(precision, "alpha conditional precision")?;
    let mean = chol.solve(&linear);
    let z = rng.standard_normal_vector(mean.len());
    let offset = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    Ok(mean + offset)
}

/// `P(ξⱼ = 1 | αⱼ, μ_α, τ², p₀)`, evaluated through log-density
/// differences so a tiny spike variance cannot underflow.
pub fn xi_probability(alpha_j: f64, mu_alpha: f64, tau2: f64, nu0: f64, p0: f64) -> f64 {
    let log_slab = p0.ln() + log_normal_pdf(alpha_j, mu_alpha, tau2);
    let log_spike = (1.0 - p0).ln() + log_normal_pdf(alpha_j, 0.0, nu0 * tau2);
    if log_slab == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_spike == f64::NEG_INFINITY {
        return 1.0;
    }
    1.0 / (1.0 + (log_spike - log_slab).exp())
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Degenerate probabilities do not consume randomness, so a mixture sweep
/// at `p₀ = 1` replays the single-prior sweep exactly.
pub fn draw_xi(
    rng: &mut SeededGenerator,
    alpha: &DVector<f64>,
    mu_alpha: f64,
    tau2: f64,
    nu0: f64,
    p0: f64,
) -> Result<Vec<bool>> {
    alpha
        .iter()
        .map(|&a| draw_indicator(rng, xi_probability(a, mu_alpha, tau2, nu0, p0)))
        .collect()
}

fn draw_indicator(rng: &mut SeededGenerator, p: f64) -> Result<bool> {
    if p >= 1.0 {
        Ok(true)
    } else if p <= 0.0 {
        Ok(false)
    } else {
        rng.draw_bernoulli(p)
    }
}

/// Shape and rate of `τ⁻² | α, ξ`:
/// `Gamma(ν₁ + J/2, ν₂ + ½ Σⱼ (αⱼ − μ_α ξⱼ)² / (ν₀ + (1 − ν₀)ξⱼ))`.
pub fn tau2_conditional(
    alpha: &DVector<f64>,
    xi: &[bool],
    mu_alpha: f64,
    prior: &PriorConfig,
) -> (f64, f64) {
    let ss: f64 = alpha
        .iter()
        .zip(xi)
        .map(|(&a, &x)| {
            if x {
                (a - mu_alpha).powi(2)
            } else {
                a * a / prior.nu0
            }
        })
        .sum();
    (prior.nu1 + alpha.len() as f64 / 2.0, prior.nu2 + ss / 2.0)
}

/// Shape and rate of `σ⁻²_η | α`:
/// `Gamma(ν₃ + n/2, ν₄ + ½‖Y − D̂β − Zα‖²)`. `None` for summary data.
pub fn sigma2_conditional(
    m: &Moments,
    beta: f64,
    alpha: &DVector<f64>,
    prior: &PriorConfig,
) -> Option<(f64, f64)> {
    let n = match m.noise {
        NoiseScale::Estimated { n, .. } => n,
        NoiseScale::Absorbed => return None,
    };
    let rss = m.residual_ss(beta, alpha)?;
    Some((prior.nu3 + n as f64 / 2.0, prior.nu4 + rss / 2.0))
}

fn draw_inverse_gamma(rng: &mut SeededGenerator, (shape, rate): (f64, f64)) -> Result<f64> {
    let precision = rng.draw_gamma(shape, rate)?;
    // Guard against a zero precision draw at extreme parameters.
    Ok(1.0 / precision.max(f64::MIN_POSITIVE))
}

/// Draws `τ²` from its inverse-gamma conditional.
pub fn draw_tau2(
    rng: &mut SeededGenerator,
    alpha: &DVector<f64>,
    xi: &[bool],
    mu_alpha: f64,
    prior: &PriorConfig,
) -> Result<f64> {
    draw_inverse_gamma(rng, tau2_conditional(alpha, xi, mu_alpha, prior))
}

/// Draws `σ²_η` from its inverse-gamma conditional; summary data return 1
/// without touching the generator.
pub fn draw_sigma2(
    rng: &mut SeededGenerator,
    m: &Moments,
    beta: f64,
    alpha: &DVector<f64>,
    prior: &PriorConfig,
) -> Result<f64> {
    match sigma2_conditional(m, beta, alpha, prior) {
        Some(params) => draw_inverse_gamma(rng, params),
        None => Ok(1.0),
    }
}

fn finish_sweep(
    state: &mut ChainState,
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    prior: &PriorConfig,
    alpha: DVector<f64>,
    xi: Vec<bool>,
) -> Result<()> {
    let tau2 = draw_tau2(&mut state.rng, &alpha, &xi, mu_alpha, prior)?;
    let sigma2_eta = draw_sigma2(&mut state.rng, m, beta, &alpha, prior)?;
    state.current = PosteriorSample {
        alpha,
        xi,
        tau2,
        sigma2_eta,
    };
    state.step_count += 1;
    Ok(())
}

/// One sweep under the single-Gaussian prior.
pub fn gibbs_step_single(
    state: &mut ChainState,
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    prior: &PriorConfig,
) -> Result<()> {
    let j = m.num_instruments();
    let xi = vec![true; j];
    let cur = &state.current;
    let alpha = draw_alpha(
        &mut state.rng,
        m,
        beta,
        mu_alpha,
        &xi,
        cur.tau2,
        cur.sigma2_eta,
        prior.nu0,
    )?;
    finish_sweep(state, m, beta, mu_alpha, prior, alpha, xi)
}

/// One sweep under the spike/slab mixture prior.
pub fn gibbs_step_mixture(
    state: &mut ChainState,
    m: &Moments,
    beta: f64,
    mu_alpha: f64,
    p0: f64,
    prior: &PriorConfig,
) -> Result<()> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(crate::error::Error::param("p0", p0, "must lie in [0, 1]"));
    }
    let cur = &state.current;
    let (tau2, sigma2_eta) = (cur.tau2, cur.sigma2_eta);
    let alpha = draw_alpha(
        &mut state.rng,
        m,
        beta,
        mu_alpha,
        &cur.xi,
        tau2,
        sigma2_eta,
        prior.nu0,
    )?;
    let xi = draw_xi(&mut state.rng, &alpha, mu_alpha, tau2, prior.nu0, p0)?;
    finish_sweep(state, m, beta, mu_alpha, prior, alpha, xi)
}
