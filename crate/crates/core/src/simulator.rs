//! Synthetic data from the instrument model, the replicated MSE grid, and
//! draws from the spike/slab prior.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{first_stage, tsls};
use crate::mcem::{fit_mr_eb, fit_single_gaussian};
use crate::model::{
    csv_error, csv_reader, fmt_f64, parse_field, IndividualDataset, McemSettings, PriorConfig,
};
use crate::rng::{derive_seed, SeededGenerator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationScenario {
    pub n: usize,
    pub j: usize,
    pub beta: f64,
    pub mu_alpha: f64,
    /// Probability that an instrument is invalid (`ξⱼ = 1`).
    pub p0: f64,
    /// When false, direct effects scale with instrument strength.
    pub inside_ok: bool,
    pub sigma2_v: f64,
    pub sigma_v_eps: f64,
    pub sigma2_eps: f64,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub seed: u64,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self {
            n: 1000,
            j: 30,
            beta: 0.2,
            mu_alpha: 0.2,
            p0: 0.5,
            inside_ok: true,
            sigma2_v: 1.0,
            sigma_v_eps: 0.2,
            sigma2_eps: 1.0,
            gamma_low: 0.1,
            gamma_high: 0.3,
            seed: 0,
        }
    }
}

impl SimulationScenario {
    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::param("J", self.j, "need at least one instrument"));
        }
        if self.n <= self.j {
            return Err(Error::TooFewObservations {
                n: self.n,
                j: self.j,
            });
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::param("p0", self.p0, "must lie in [0, 1]"));
        }
        let det = self.sigma2_v * self.sigma2_eps - self.sigma_v_eps * self.sigma_v_eps;
        if !(self.sigma2_v > 0.0 && det > 0.0) {
            return Err(Error::param(
                "sigma_v_eps",
                self.sigma_v_eps,
                "(v, eps) covariance must be positive definite",
            ));
        }
        if !(self.gamma_low < self.gamma_high) {
            return Err(Error::param(
                "gamma_high",
                self.gamma_high,
                "gamma range needs low < high",
            ));
        }
        Ok(())
    }
}

/// Ground truth behind a simulated dataset. `v` and `eps` are the raw
/// (uncentered) errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub beta: f64,
    pub gamma: DVector<f64>,
    pub alpha: DVector<f64>,
    pub xi: Vec<bool>,
    pub v: DVector<f64>,
    pub eps: DVector<f64>,
}

impl SimulationTruth {
    /// Writes the per-instrument truth as `instrument,beta,gamma,alpha,xi`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        writeln!(out, "instrument,beta,gamma,alpha,xi").map_err(io_err)?;
        for k in 0..self.alpha.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                k + 1,
                fmt_f64(self.beta),
                fmt_f64(self.gamma[k]),
                fmt_f64(self.alpha[k]),
                u8::from(self.xi[k])
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Instrument-level truth read back from [`SimulationTruth::save`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentTruth {
    pub beta: f64,
    pub gamma: DVector<f64>,
    pub alpha: DVector<f64>,
    pub xi: Vec<bool>,
}

pub fn load_truth(path: &Path) -> Result<InstrumentTruth> {
    let mut reader = csv_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if header != ["instrument", "beta", "gamma", "alpha", "xi"] {
        return Err(Error::Parse {
            row: 0,
            column: header.join(","),
            message: "header must be instrument,beta,gamma,alpha,xi".into(),
        });
    }
    let (mut betas, mut gamma, mut alpha, mut xi) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_error(e, row))?;
        if record.len() != 5 {
            return Err(Error::Dimension(format!(
                "row {row} has {} fields, expected 5",
                record.len()
            )));
        }
        betas.push(parse_field(&record[1], row, "beta")?);
        gamma.push(parse_field(&record[2], row, "gamma")?);
        alpha.push(parse_field(&record[3], row, "alpha")?);
        xi.push(match &record[4] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "xi".into(),
                    message: format!("expected 0 or 1, got {other:?}"),
                })
            }
        });
    }
    let beta = *betas.first().ok_or(Error::NoVariants)?;
    if betas.iter().any(|&b| b != beta) {
        return Err(Error::Config("beta differs between truth rows".into()));
    }
    Ok(InstrumentTruth {
        beta,
        gamma: DVector::from_vec(gamma),
        alpha: DVector::from_vec(alpha),
        xi,
    })
}

/// Generates the uncentered dataset. Draw order is fixed: γ, ξ, u, Z, (v, ε).
pub fn simulate_raw(scenario: &SimulationScenario) -> Result<(IndividualDataset, SimulationTruth)> {
    scenario.validate()?;
    let SimulationScenario {
        n,
        j,
        beta,
        mu_alpha,
        p0,
        ..
    } = *scenario;
    let mut g = SeededGenerator::new(scenario.seed);

    let gamma = DVector::from_iterator(
        j,
        (0..j)
            .map(|_| g.draw_uniform(scenario.gamma_low, scenario.gamma_high))
            .collect::<Result<Vec<_>>>()?,
    );
    let xi = (0..j)
        .map(|_| g.draw_bernoulli(p0))
        .collect::<Result<Vec<_>>>()?;
    let u = (0..j)
        .map(|_| g.draw_uniform(mu_alpha - 0.2, mu_alpha + 0.2))
        .collect::<Result<Vec<_>>>()?;
    let alpha = DVector::from_fn(j, |k, _| match (xi[k], scenario.inside_ok) {
        (false, _) => 0.0,
        (true, true) => u[k],
        (true, false) => 0.2 * gamma[k] + u[k],
    });

    let z = DMatrix::from_fn(n, j, |_, _| g.standard_normal());
    // (v, ε) = L (e1, e2) with L the Cholesky factor of the 2x2 covariance.
    let l11 = scenario.sigma2_v.sqrt();
    let l21 = scenario.sigma_v_eps / l11;
    let l22 = (scenario.sigma2_eps - l21 * l21).sqrt();
    let mut v = DVector::zeros(n);
    let mut eps = DVector::zeros(n);
    for i in 0..n {
        let e1 = g.standard_normal();
        let e2 = g.standard_normal();
        v[i] = l11 * e1;
        eps[i] = l21 * e1 + l22 * e2;
    }

    let d = &z * &gamma + &v;
    let y = &d * beta + &z * &alpha + &eps;
    let data = IndividualDataset::uncentered(z, d, y)?;
    Ok((
        data,
        SimulationTruth {
            beta,
            gamma,
            alpha,
            xi,
            v,
            eps,
        },
    ))
}

/// Centered dataset plus truth.
pub fn simulate(scenario: &SimulationScenario) -> Result<(IndividualDataset, SimulationTruth)> {
    let (data, truth) = simulate_raw(scenario)?;
    Ok((data.centered(), truth))
}

/// Iid draws of `αⱼ` from the spike/slab prior.
pub fn sample_mixture_prior(
    mu_alpha: f64,
    tau2: f64,
    nu0: f64,
    p0: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(tau2 > 0.0) {
        return Err(Error::param("tau2", tau2, "must be positive"));
    }
    if !(nu0 > 0.0 && nu0 < 1.0) {
        return Err(Error::param("nu0", nu0, "must lie in (0, 1)"));
    }
    if count == 0 {
        return Err(Error::param("count", count, "must be at least 1"));
    }
    let mut g = SeededGenerator::new(seed);
    (0..count)
        .map(|_| {
            if g.draw_bernoulli(p0)? {
                g.draw_normal(mu_alpha, tau2)
            } else {
                g.draw_normal(0.0, nu0 * tau2)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimatorKind {
    Tsls,
    SingleGaussian,
    MrEb,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::Tsls,
        EstimatorKind::SingleGaussian,
        EstimatorKind::MrEb,
    ];

    fn stream(self) -> u64 {
        match self {
            EstimatorKind::Tsls => 10,
            EstimatorKind::SingleGaussian => 11,
            EstimatorKind::MrEb => 12,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Tsls => "tsls",
            EstimatorKind::SingleGaussian => "single",
            EstimatorKind::MrEb => "mr-eb",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tsls" => Ok(EstimatorKind::Tsls),
            "single" | "single-gaussian" | "eb" => Ok(EstimatorKind::SingleGaussian),
            "mr-eb" | "mreb" | "mixture" => Ok(EstimatorKind::MrEb),
            other => Err(Error::Config(format!(
                "unknown estimator {other:?} (tsls, single, mr-eb)"
            ))),
        }
    }
}

/// Point estimate and realized constant (`c**` for MR-EB, `c*` for the
/// single prior, none for TSLS).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateOutcome {
    pub beta_hat: f64,
    pub c_constant: Option<f64>,
}

pub fn run_estimator(
    kind: EstimatorKind,
    data: &IndividualDataset,
    prior: &PriorConfig,
    settings: &McemSettings,
) -> Result<ReplicateOutcome> {
    match kind {
        EstimatorKind::Tsls => {
            let fit = first_stage(data)?;
            Ok(ReplicateOutcome {
                beta_hat: tsls(data, &fit)?,
                c_constant: None,
            })
        }
        EstimatorKind::SingleGaussian => {
            let r = fit_single_gaussian(data, prior, settings)?;
            Ok(ReplicateOutcome {
                beta_hat: r.beta_hat,
                c_constant: r.diagnostics.map(|d| d.c_star),
            })
        }
        EstimatorKind::MrEb => {
            let r = fit_mr_eb(data, prior, settings)?;
            Ok(ReplicateOutcome {
                beta_hat: r.beta_hat,
                c_constant: r.diagnostics.map(|d| d.c_double_star),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub scenario: SimulationScenario,
    pub estimator: EstimatorKind,
    pub mse: f64,
    pub mean_c: Option<f64>,
    pub failed_replicates: usize,
    pub replicates: usize,
}

/// Seed of replicate `r` under a scenario.
pub fn replicate_seed(scenario_seed: u64, replicate: usize) -> u64 {
    derive_seed(scenario_seed, replicate as u64)
}

/// MSE of every estimator on every scenario. Replicates run in parallel on
/// the current rayon pool; results are merged in input order, so output is
/// independent of the thread count.
pub fn run_grid(
    grid: &[SimulationScenario],
    replicates: usize,
    estimators: &BTreeSet<EstimatorKind>,
    prior: &PriorConfig,
    settings: &McemSettings,
) -> Result<Vec<GridRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty scenario grid".into()));
    }
    if replicates == 0 {
        return Err(Error::param("replicates", replicates, "must be at least 1"));
    }
    if estimators.is_empty() {
        return Err(Error::Config("no estimators selected".into()));
    }
    prior.validate()?;
    settings.validate()?;
    for s in grid {
        s.validate()?;
    }

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..replicates).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<Vec<(EstimatorKind, Result<ReplicateOutcome>)>> = jobs
        .par_iter()
        .map(|&(cell, rep)| {
            let seed = replicate_seed(grid[cell].seed, rep);
            let scenario = SimulationScenario { seed, ..grid[cell] };
            match simulate(&scenario) {
                Ok((data, _)) => estimators
                    .iter()
                    .map(|&kind| {
                        let run_settings = McemSettings {
                            seed: derive_seed(seed, kind.stream()),
                            ..*settings
                        };
                        (kind, run_estimator(kind, &data, prior, &run_settings))
                    })
                    .collect(),
                Err(e) => {
                    let msg = e.to_string();
                    estimators
                        .iter()
                        .map(|&k| (k, Err(Error::Config(msg.clone()))))
                        .collect()
                }
            }
        })
        .collect();

    let mut rows = Vec::new();
    for (cell, scenario) in grid.iter().enumerate() {
        for &kind in estimators {
            let mut sq = 0.0;
            let mut ok = 0usize;
            let mut c_sum = 0.0;
            let mut c_count = 0usize;
            for rep in 0..replicates {
                let per_kind = &outcomes[cell * replicates + rep];
                let (_, res) = per_kind
                    .iter()
                    .find(|(k, _)| *k == kind)
                    .expect("every estimator ran");
                match res {
                    Ok(o) if o.beta_hat.is_finite() => {
                        sq += (o.beta_hat - scenario.beta).powi(2);
                        ok += 1;
                        if let Some(c) = o.c_constant {
                            c_sum += c;
                            c_count += 1;
                        }
                    }
                    Ok(_) => log::warn!("non-finite estimate in cell {cell}, replicate {rep}"),
                    Err(e) => log::warn!("cell {cell}, replicate {rep}, {kind}: {e}"),
                }
            }
            rows.push(GridRow {
                scenario: *scenario,
                estimator: kind,
                mse: if ok > 0 { sq / ok as f64 } else { f64::NAN },
                mean_c: (c_count > 0).then(|| c_sum / c_count as f64),
                failed_replicates: replicates - ok,
                replicates,
            });
        }
    }
    Ok(rows)
}
