//! Monte Carlo EM drivers.
//!
//! Each iteration runs `burn_in + mc_samples` Gibbs sweeps at the current
//! `(β̂, μ̂_α[, p̂₀])`, then replaces them with the exact maximizer of the
//! sampled complete-data log posterior. The chain is warm-started from the
//! previous E-step.

use nalgebra::DVector;

use crate::error::Result;
use crate::estimators::{diagnostics, slab_or_spike_variance, DiagnosticsReport, PriorShape};
use crate::gibbs::{gibbs_step_mixture, gibbs_step_single, ChainState, PosteriorSample};
use crate::model::{IndividualDataset, McemSettings, PriorConfig, SummaryDataset};
use crate::moments::Moments;
use crate::rng::SeededGenerator;

/// Stream label of the E-step chain under the run seed.
const CHAIN_STREAM: u64 = 1;
/// Number of trailing iterations averaged into the reported estimate.
const TAIL_AVERAGE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    SingleGaussian,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub beta: f64,
    pub mu_alpha: f64,
    pub p0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub beta_hat: f64,
    pub mu_alpha_hat: f64,
    /// Mixture prior only.
    pub p0_hat: Option<f64>,
    pub iters: usize,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Posterior means over the final E-step.
    pub tau2_mean: f64,
    pub sigma2_eta_mean: f64,
    /// Majority vote of the final E-step indicators.
    pub xi_mode: Vec<bool>,
    /// `None` when the constants could not be evaluated.
    pub diagnostics: Option<DiagnosticsReport>,
}

/// Running sums for the closed-form M-step.
///
/// `β̂ = Σᵢ D̂ᵀ(Y − Zαᵢ)/σ²ᵢ / Σᵢ D̂ᵀD̂/σ²ᵢ`,
/// `μ̂_α = Σᵢⱼ αᵢⱼξᵢⱼ/τ²ᵢ / Σᵢⱼ ξᵢⱼ/τ²ᵢ`,
/// `p̂₀ = Σᵢⱼ ξᵢⱼ / (mJ)`.
#[derive(Debug, Clone, Default)]
pub struct MStepAccumulator {
    count: usize,
    weight_sum: f64,
    beta_num: f64,
    mu_num: f64,
    mu_den: f64,
    xi_ones: usize,
    xi_total: usize,
    dtd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStep {
    pub beta: f64,
    pub mu_alpha: f64,
    pub p0: Option<f64>,
}

impl MStepAccumulator {
    pub fn new(m: &Moments) -> Self {
        Self {
            dtd: m.dtd,
            ..Default::default()
        }
    }

    pub fn push(&mut self, m: &Moments, s: &PosteriorSample) {
        let w = 1.0 / s.sigma2_eta;
        self.weight_sum += w;
        self.beta_num += w * (m.dty - m.ztd.dot(&s.alpha));
        let inv_tau2 = 1.0 / s.tau2;
        for (&a, &x) in s.alpha.iter().zip(&s.xi) {
            if x {
                self.mu_num += a * inv_tau2;
                self.mu_den += inv_tau2;
                self.xi_ones += 1;
            }
        }
        self.xi_total += s.xi.len();
        self.count += 1;
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Closed-form maximizer. `prev_mu` is returned for `μ̂_α` when no
    /// indicator is on (the objective is then flat in `μ_α`). `p̂₀` is
    /// clamped to `[1/(mJ+1), 1 − 1/(mJ+1)]`.
    pub fn maximize(&self, kind: PriorKind, prev_mu: f64) -> MStep {
        let beta = self.beta_num / (self.dtd * self.weight_sum);
        let mu_alpha = if self.mu_den > 0.0 {
            self.mu_num / self.mu_den
        } else {
            prev_mu
        };
        let p0 = match kind {
            PriorKind::SingleGaussian => None,
            PriorKind::Mixture => {
                let edge = 1.0 / (self.xi_total as f64 + 1.0);
                let raw = self.xi_ones as f64 / self.xi_total as f64;
                Some(raw.clamp(edge, 1.0 - edge))
            }
        };
        MStep { beta, mu_alpha, p0 }
    }
}

/// Sampled complete-data log posterior of `(β, μ_α[, p₀])`, dropping
/// terms that do not depend on them.
pub fn sampled_q(
    m: &Moments,
    samples: &[PosteriorSample],
    nu0: f64,
    beta: f64,
    mu_alpha: f64,
    p0: Option<f64>,
) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let rss = m.residual_ss(beta, &s.alpha).unwrap_or_else(|| {
                // Scaled moments: the constant YᵀY term is unknown but irrelevant.
                -2.0 * beta * m.dty + beta * beta * m.dtd
                    - 2.0 * s.alpha.dot(&(&m.zty - &m.ztd * beta))
                    + s.alpha.dot(&(&m.ztz * &s.alpha))
            });
            let mut q = -rss / (2.0 * s.sigma2_eta);
            for (&a, &x) in s.alpha.iter().zip(&s.xi) {
                let mean = if x { mu_alpha } else { 0.0 };
                q -= (a - mean).powi(2) / (2.0 * slab_or_spike_variance(x, s.tau2, nu0));
                if let Some(p) = p0 {
                    q += if x { p.ln() } else { (1.0 - p).ln() };
                }
            }
            q
        })
        .sum();
    total / samples.len() as f64
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / (old.abs() + 0.01)
}

/// Receives the sweep count and each retained draw.
pub type DrawSink<'a> = &'a mut dyn FnMut(u64, &PosteriorSample);

/// Runs MCEM on precomputed moments. `sink` sees every retained draw.
pub fn run_mcem(
    m: &Moments,
    kind: PriorKind,
    prior: &PriorConfig,
    settings: &McemSettings,
    mut sink: Option<DrawSink<'_>>,
) -> Result<EstimateResult> {
    prior.validate()?;
    settings.validate()?;
    let mixture = kind == PriorKind::Mixture;
    let rng = SeededGenerator::split(settings.seed, CHAIN_STREAM);
    let mut chain = ChainState::initial(m, prior, mixture, rng)?;

    let j = m.num_instruments();
    let mut beta = prior.beta_init;
    let mut mu_alpha = prior.mu_alpha_init;
    let mut p0 = prior.p0_init;
    let mut trace = Vec::new();
    let mut converged = false;
    let (mut tau2_mean, mut sigma2_mean) = (0.0, 0.0);
    let mut xi_counts = vec![0usize; j];

    for iter in 1..=settings.max_iters {
        let sweep = |chain: &mut ChainState| -> Result<()> {
            match kind {
                PriorKind::SingleGaussian => gibbs_step_single(chain, m, beta, mu_alpha, prior),
                PriorKind::Mixture => gibbs_step_mixture(chain, m, beta, mu_alpha, p0, prior),
            }
        };
        for _ in 0..settings.burn_in {
            sweep(&mut chain)?;
        }
        let mut acc = MStepAccumulator::new(m);
        tau2_mean = 0.0;
        sigma2_mean = 0.0;
        xi_counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..settings.mc_samples {
            sweep(&mut chain)?;
            let s = &chain.current;
            acc.push(m, s);
            tau2_mean += s.tau2;
            sigma2_mean += s.sigma2_eta;
            for (c, &x) in xi_counts.iter_mut().zip(&s.xi) {
                *c += usize::from(x);
            }
            if let Some(f) = sink.as_mut() {
                f(chain.step_count, s);
            }
        }
        tau2_mean /= settings.mc_samples as f64;
        sigma2_mean /= settings.mc_samples as f64;

        let step = acc.maximize(kind, mu_alpha);
        let mut change =
            relative_change(step.beta, beta).max(relative_change(step.mu_alpha, mu_alpha));
        if let Some(new_p0) = step.p0 {
            change = change.max(relative_change(new_p0, p0));
            p0 = new_p0;
        }
        beta = step.beta;
        mu_alpha = step.mu_alpha;
        trace.push(TraceRow {
            beta,
            mu_alpha,
            p0: step.p0,
        });
        log::debug!(
            "iter {iter}: beta {beta:.6} mu_alpha {mu_alpha:.6} p0 {p0:.4} change {change:.2e}"
        );
        if change < settings.tol {
            converged = true;
            break;
        }
    }

    let tail = &trace[trace.len().saturating_sub(TAIL_AVERAGE)..];
    let k = tail.len() as f64;
    let beta_hat = tail.iter().map(|r| r.beta).sum::<f64>() / k;
    let mu_alpha_hat = tail.iter().map(|r| r.mu_alpha).sum::<f64>() / k;
    let p0_hat = mixture.then(|| tail.iter().map(|r| r.p0.unwrap_or(p0)).sum::<f64>() / k);

    let xi_mode: Vec<bool> = if mixture {
        xi_counts
            .iter()
            .map(|&c| 2 * c > settings.mc_samples)
            .collect()
    } else {
        vec![true; j]
    };
    let shape = match kind {
        PriorKind::SingleGaussian => PriorShape::Single,
        PriorKind::Mixture => PriorShape::Mixture {
            xi: &xi_mode,
            nu0: prior.nu0,
        },
    };
    let diag = diagnostics(m, tau2_mean, sigma2_mean, shape, mu_alpha_hat, None).ok();

    Ok(EstimateResult {
        beta_hat,
        mu_alpha_hat,
        p0_hat,
        iters: trace.len(),
        trace,
        converged,
        tau2_mean,
        sigma2_eta_mean: sigma2_mean,
        xi_mode,
        diagnostics: diag,
    })
}

/// Single-Gaussian empirical-Bayes estimator.
pub fn fit_single_gaussian(
    data: &IndividualDataset,
    prior: &PriorConfig,
    settings: &McemSettings,
) -> Result<EstimateResult> {
    let fit = crate::estimators::first_stage(data)?;
    run_mcem(
        &Moments::individual(data, &fit),
        PriorKind::SingleGaussian,
        prior,
        settings,
        None,
    )
}

/// Mixture-prior (MR-EB) estimator.
pub fn fit_mr_eb(
    data: &IndividualDataset,
    prior: &PriorConfig,
    settings: &McemSettings,
) -> Result<EstimateResult> {
    let fit = crate::estimators::first_stage(data)?;
    run_mcem(
        &Moments::individual(data, &fit),
        PriorKind::Mixture,
        prior,
        settings,
        None,
    )
}

/// MR-EB from summary statistics; the residual variance is absorbed into
/// the moments and never sampled.
pub fn fit_summary(
    summary: &SummaryDataset,
    prior: &PriorConfig,
    settings: &McemSettings,
) -> Result<EstimateResult> {
    run_mcem(
        &Moments::summary(summary),
        PriorKind::Mixture,
        prior,
        settings,
        None,
    )
}

/// Convenience for tests and tooling: draws `count` samples from a chain
/// held at fixed `(β, μ_α, p₀)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain(
    m: &Moments,
    kind: PriorKind,
    prior: &PriorConfig,
    beta: f64,
    mu_alpha: f64,
    p0: f64,
    burn_in: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PosteriorSample>> {
    let mut chain = ChainState::initial(
        m,
        prior,
        kind == PriorKind::Mixture,
        SeededGenerator::new(seed),
    )?;
    let mut out = Vec::with_capacity(count);
    for i in 0..burn_in + count {
        match kind {
            PriorKind::SingleGaussian => gibbs_step_single(&mut chain, m, beta, mu_alpha, prior)?,
            PriorKind::Mixture => gibbs_step_mixture(&mut chain, m, beta, mu_alpha, p0, prior)?,
        }
        if i >= burn_in {
            out.push(chain.current.clone());
        }
    }
    Ok(out)
}

/// Mean of retained α draws; handy for diagnostics dumps.
pub fn posterior_mean_alpha(samples: &[PosteriorSample]) -> Option<DVector<f64>> {
    let first = samples.first()?;
    let mut sum = DVector::zeros(first.alpha.len());
    for s in samples {
        sum += &s.alpha;
    }
    Some(sum / samples.len() as f64)
}
