use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use mreb_core::config::{apply_mcem, apply_prior, render, FlatConfig, MCEM_KEYS, PRIOR_KEYS};
use mreb_core::estimators::{ridge_mode, tsls_from_moments};
use mreb_core::mcem::run_mcem;
use mreb_core::model::fmt_f64;
use mreb_core::rng::derive_seed;
use mreb_core::{
    diagnostics, first_stage, load_individual, load_summary, load_truth, run_grid,
    sample_mixture_prior, simulate, BoundInputs, Error, EstimateResult, EstimatorKind,
    McemSettings, Moments, PosteriorSample, PriorConfig, PriorKind, PriorShape, Result,
    SimulationScenario,
};

use crate::args::{
    Cli, Command, DiagnoseArgs, EstimateArgs, GridArgs, PriorSampleArgs, SimulateArgs, SummaryArgs,
    TraceFlags,
};

const SCENARIO_KEYS: [&str; 11] = [
    "n",
    "j",
    "beta",
    "mu_alpha",
    "p0",
    "inside_ok",
    "sigma2_v",
    "sigma_v_eps",
    "sigma2_eps",
    "gamma_low",
    "gamma_high",
];

const NA: &str = "NA";

/// Settings resolved from defaults, the config file and command-line flags,
/// in that order of precedence.
struct Resolved {
    prior: PriorConfig,
    settings: McemSettings,
    scenario: SimulationScenario,
    out_dir: PathBuf,
    manifest: Vec<(String, String)>,
}

impl Resolved {
    fn new(cli: &Cli, command: &str) -> Result<Self> {
        let cfg = match &cli.config {
            Some(path) => FlatConfig::load(path)?,
            None => FlatConfig::default(),
        };
        let allowed: Vec<&str> = PRIOR_KEYS
            .iter()
            .chain(&MCEM_KEYS)
            .chain(&SCENARIO_KEYS)
            .copied()
            .collect();
        cfg.check_keys(&allowed)?;

        let mut prior = PriorConfig::default();
        apply_prior(&cfg, &mut prior)?;
        let mut settings = McemSettings::default();
        apply_mcem(&cfg, &mut settings)?;
        if let Some(seed) = cli.seed {
            settings.seed = seed;
        }
        let mut scenario = scenario_from(&cfg)?;
        scenario.seed = settings.seed;

        let out_dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
            path: out_dir.clone(),
            source,
        })?;

        let manifest = vec![
            ("command".to_string(), command.to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("seed".to_string(), settings.seed.to_string()),
        ];
        Ok(Self {
            prior,
            settings,
            scenario,
            out_dir,
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.push((key.to_string(), value.to_string()));
    }

    fn note_prior(&mut self) {
        let p = self.prior;
        for (k, v) in [
            ("nu0", p.nu0),
            ("nu1", p.nu1),
            ("nu2", p.nu2),
            ("nu3", p.nu3),
            ("nu4", p.nu4),
            ("beta_init", p.beta_init),
            ("mu_alpha_init", p.mu_alpha_init),
            ("p0_init", p.p0_init),
        ] {
            self.note(k, fmt_f64(v));
        }
    }

    fn note_mcem(&mut self) {
        let s = self.settings;
        self.note("mc_samples", s.mc_samples);
        self.note("burn_in", s.burn_in);
        self.note("max_iters", s.max_iters);
        self.note("tol", fmt_f64(s.tol));
    }

    fn note_scenario(&mut self, s: &SimulationScenario) {
        self.note("n", s.n);
        self.note("j", s.j);
        self.note("beta", fmt_f64(s.beta));
        self.note("mu_alpha", fmt_f64(s.mu_alpha));
        self.note("p0", fmt_f64(s.p0));
        self.note("inside_ok", s.inside_ok);
        self.note("sigma2_v", fmt_f64(s.sigma2_v));
        self.note("sigma_v_eps", fmt_f64(s.sigma_v_eps));
        self.note("sigma2_eps", fmt_f64(s.sigma2_eps));
        self.note("gamma_low", fmt_f64(s.gamma_low));
        self.note("gamma_high", fmt_f64(s.gamma_high));
    }

    /// Writes `<stem>-manifest.txt` with every resolved value, sorted by key.
    fn finish(&self, stem: &str) -> Result<()> {
        let path = self.path(&format!("{stem}-manifest.txt"));
        std::fs::write(&path, render(&self.manifest)).map_err(|source| Error::Io { path, source })
    }
}

fn scenario_from(cfg: &FlatConfig) -> Result<SimulationScenario> {
    let mut s = SimulationScenario::default();
    if let Some(v) = cfg.get("n")? {
        s.n = v;
    }
    if let Some(v) = cfg.get("j")? {
        s.j = v;
    }
    let floats: [(&str, &mut f64); 8] = [
        ("beta", &mut s.beta),
        ("mu_alpha", &mut s.mu_alpha),
        ("p0", &mut s.p0),
        ("sigma2_v", &mut s.sigma2_v),
        ("sigma_v_eps", &mut s.sigma_v_eps),
        ("sigma2_eps", &mut s.sigma2_eps),
        ("gamma_low", &mut s.gamma_low),
        ("gamma_high", &mut s.gamma_high),
    ];
    for (key, slot) in floats {
        if let Some(v) = cfg.get(key)? {
            *slot = v;
        }
    }
    if let Some(v) = cfg.get("inside_ok")? {
        s.inside_ok = v;
    }
    Ok(s)
}

struct CsvOut {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvOut {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let mut w = Self {
            path,
            out: BufWriter::new(file),
        };
        w.line(&header.join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.line(&fields.join(","))
    }

    fn close(mut self) -> Result<()> {
        self.out.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), fmt_f64)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => estimate(cli, a),
        Command::EstimateSummary(a) => estimate_summary(cli, a),
        Command::Simulate(a) => simulate_cmd(cli, a),
        Command::Grid(a) => grid(cli, a),
        Command::PriorSample(a) => prior_sample(cli, a),
        Command::Diagnose(a) => diagnose(cli, a),
    }
}

const ESTIMATE_HEADER: [&str; 12] = [
    "estimator",
    "beta_hat",
    "mu_alpha_hat",
    "p0_hat",
    "iters",
    "converged",
    "tau2_mean",
    "sigma2_eta_mean",
    "c_star",
    "c_double_star",
    "assumption_ok",
    "num_invalid",
];

fn estimate_row(name: &str, r: &EstimateResult) -> Vec<String> {
    let d = r.diagnostics.as_ref();
    vec![
        name.to_string(),
        fmt_f64(r.beta_hat),
        fmt_f64(r.mu_alpha_hat),
        opt(r.p0_hat),
        r.iters.to_string(),
        r.converged.to_string(),
        fmt_f64(r.tau2_mean),
        fmt_f64(r.sigma2_eta_mean),
        opt(d.map(|d| d.c_star)),
        opt(d.map(|d| d.c_double_star)),
        d.map_or_else(|| NA.to_string(), |d| d.assumption_ok.to_string()),
        r.xi_mode.iter().filter(|&&x| x).count().to_string(),
    ]
}

/// Runs MCEM and writes the optional trace files.
fn fit_with_traces(
    res: &Resolved,
    stem: &str,
    m: &Moments,
    kind: PriorKind,
    flags: &TraceFlags,
) -> Result<EstimateResult> {
    let result = if flags.chain_trace {
        let j = m.num_instruments();
        let mut header = vec![
            "step".to_string(),
            "tau2".to_string(),
            "sigma2_eta".to_string(),
        ];
        header.extend((1..=j).map(|k| format!("alpha{k}")));
        header.extend((1..=j).map(|k| format!("xi{k}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut chain = CsvOut::create(res.path(&format!("{stem}-chain.csv")), &refs)?;
        let mut failure = None;
        let mut sink = |step: u64, s: &PosteriorSample| {
            if failure.is_some() {
                return;
            }
            let mut fields = vec![step.to_string(), fmt_f64(s.tau2), fmt_f64(s.sigma2_eta)];
            fields.extend(s.alpha.iter().map(|&a| fmt_f64(a)));
            fields.extend(s.xi.iter().map(|&x| u8::from(x).to_string()));
            if let Err(e) = chain.row(&fields) {
                failure = Some(e);
            }
        };
        let r = run_mcem(m, kind, &res.prior, &res.settings, Some(&mut sink))?;
        if let Some(e) = failure {
            return Err(e);
        }
        chain.close()?;
        r
    } else {
        run_mcem(m, kind, &res.prior, &res.settings, None)?
    };
    if flags.trace {
        let mut t = CsvOut::create(
            res.path(&format!("{stem}-trace.csv")),
            &["iter", "beta", "mu_alpha", "p0"],
        )?;
        for (i, row) in result.trace.iter().enumerate() {
            t.row(&[
                (i + 1).to_string(),
                fmt_f64(row.beta),
                fmt_f64(row.mu_alpha),
                opt(row.p0),
            ])?;
        }
        t.close()?;
    }
    Ok(result)
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let kind: EstimatorKind = a.estimator.parse()?;
    let mut res = Resolved::new(cli, "estimate")?;
    res.note("input", a.input.display());
    res.note("estimator", kind);
    res.note_prior();
    res.note_mcem();
    res.note("trace", a.trace.trace);
    res.note("chain_trace", a.trace.chain_trace);

    let data = load_individual(&a.input)?;
    let fit = first_stage(&data)?;
    let m = Moments::individual(&data, &fit);
    log::info!("loaded n = {}, J = {}", data.n(), data.num_instruments());

    let mut out = CsvOut::create(res.path("estimate.csv"), &ESTIMATE_HEADER)?;
    match kind {
        EstimatorKind::Tsls => {
            let beta = tsls_from_moments(&m)?;
            let mut row = vec![NA.to_string(); ESTIMATE_HEADER.len()];
            row[0] = kind.to_string();
            row[1] = fmt_f64(beta);
            out.row(&row)?;
        }
        EstimatorKind::SingleGaussian | EstimatorKind::MrEb => {
            let prior_kind = if kind == EstimatorKind::MrEb {
                PriorKind::Mixture
            } else {
                PriorKind::SingleGaussian
            };
            let r = fit_with_traces(&res, "estimate", &m, prior_kind, &a.trace)?;
            if !r.converged {
                log::warn!(
                    "MCEM stopped at max_iters = {} without meeting tol",
                    r.iters
                );
            }
            out.row(&estimate_row(&kind.to_string(), &r))?;
        }
    }
    out.close()?;
    res.finish("estimate")
}

fn estimate_summary(cli: &Cli, a: &SummaryArgs) -> Result<()> {
    let mut res = Resolved::new(cli, "estimate-summary")?;
    res.note("input", a.input.display());
    res.note_prior();
    res.note_mcem();
    res.note("trace", a.trace.trace);
    res.note("chain_trace", a.trace.chain_trace);

    let summary = load_summary(&a.input)?;
    let m = Moments::summary(&summary);
    log::info!("loaded J = {}", summary.num_variants());
    let r = fit_with_traces(&res, "estimate-summary", &m, PriorKind::Mixture, &a.trace)?;
    if !r.converged {
        log::warn!(
            "MCEM stopped at max_iters = {} without meeting tol",
            r.iters
        );
    }
    let mut out = CsvOut::create(res.path("estimate-summary.csv"), &ESTIMATE_HEADER)?;
    out.row(&estimate_row("mr-eb", &r))?;
    out.close()?;
    res.finish("estimate-summary")
}

fn simulate_cmd(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut res = Resolved::new(cli, "simulate")?;
    let mut s = res.scenario;
    if let Some(v) = a.n {
        s.n = v;
    }
    if let Some(v) = a.j {
        s.j = v;
    }
    if let Some(v) = a.beta {
        s.beta = v;
    }
    if let Some(v) = a.mu_alpha {
        s.mu_alpha = v;
    }
    if let Some(v) = a.p0 {
        s.p0 = v;
    }
    if a.inside_violated {
        s.inside_ok = false;
    }
    res.note_scenario(&s);

    let (data, truth) = simulate(&s)?;
    data.save(&res.path("simulate-data.csv"))?;
    truth.save(&res.path("simulate-truth.csv"))?;
    res.finish("simulate")
}

/// Cartesian product of the listed scenario values, in a fixed key order.
fn expand_grid(spec: &FlatConfig, base_seed: u64) -> Result<Vec<SimulationScenario>> {
    let mut allowed: Vec<&str> = SCENARIO_KEYS.to_vec();
    allowed.push("seed");
    spec.check_keys(&allowed)?;
    let base = SimulationScenario::default();
    let floats = |key: &str, default: f64| -> Result<Vec<f64>> {
        Ok(spec.list(key)?.unwrap_or(vec![default]))
    };
    let ns: Vec<usize> = spec.list("n")?.unwrap_or(vec![base.n]);
    let js: Vec<usize> = spec.list("j")?.unwrap_or(vec![base.j]);
    let betas = floats("beta", base.beta)?;
    let mus = floats("mu_alpha", base.mu_alpha)?;
    let p0s = floats("p0", base.p0)?;
    let insides: Vec<bool> = spec.list("inside_ok")?.unwrap_or(vec![base.inside_ok]);
    let sigma2_v = floats("sigma2_v", base.sigma2_v)?;
    let sigma_v_eps = floats("sigma_v_eps", base.sigma_v_eps)?;
    let sigma2_eps = floats("sigma2_eps", base.sigma2_eps)?;
    let gamma_low = floats("gamma_low", base.gamma_low)?;
    let gamma_high = floats("gamma_high", base.gamma_high)?;
    for (key, len) in [
        ("sigma2_v", sigma2_v.len()),
        ("sigma_v_eps", sigma_v_eps.len()),
        ("sigma2_eps", sigma2_eps.len()),
        ("gamma_low", gamma_low.len()),
        ("gamma_high", gamma_high.len()),
    ] {
        if len != 1 {
            return Err(Error::Config(format!(
                "{key} takes a single value in a grid spec"
            )));
        }
    }

    let mut grid = Vec::new();
    for &n in &ns {
        for &j in &js {
            for &beta in &betas {
                for &mu_alpha in &mus {
                    for &inside_ok in &insides {
                        for &p0 in &p0s {
                            let seed = derive_seed(base_seed, grid.len() as u64);
                            grid.push(SimulationScenario {
                                n,
                                j,
                                beta,
                                mu_alpha,
                                p0,
                                inside_ok,
                                sigma2_v: sigma2_v[0],
                                sigma_v_eps: sigma_v_eps[0],
                                sigma2_eps: sigma2_eps[0],
                                gamma_low: gamma_low[0],
                                gamma_high: gamma_high[0],
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

fn grid(cli: &Cli, a: &GridArgs) -> Result<()> {
    let mut res = Resolved::new(cli, "grid")?;
    let spec = FlatConfig::load(&a.spec)?;
    let base_seed = match (cli.seed, spec.get::<u64>("seed")?) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => res.settings.seed,
    };
    let estimators = a
        .estimators
        .split(',')
        .map(str::parse)
        .collect::<Result<BTreeSet<EstimatorKind>>>()?;
    let scenarios = expand_grid(&spec, base_seed)?;
    res.manifest.retain(|(k, _)| k != "seed");
    res.note("seed", base_seed);
    res.note("spec", a.spec.display());
    res.note("replicates", a.replicates);
    res.note(
        "estimators",
        estimators
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    res.note_prior();
    res.note_mcem();
    log::info!(
        "{} scenarios x {} replicates",
        scenarios.len(),
        a.replicates
    );

    let rows = run_grid(
        &scenarios,
        a.replicates,
        &estimators,
        &res.prior,
        &res.settings,
    )?;
    let mut out = CsvOut::create(
        res.path("grid.csv"),
        &[
            "n",
            "j",
            "beta",
            "mu_alpha",
            "p0",
            "inside_ok",
            "seed",
            "estimator",
            "mse",
            "mean_c_double_star",
            "failed_replicates",
            "replicates",
        ],
    )?;
    for r in rows {
        let s = r.scenario;
        out.row(&[
            s.n.to_string(),
            s.j.to_string(),
            fmt_f64(s.beta),
            fmt_f64(s.mu_alpha),
            fmt_f64(s.p0),
            s.inside_ok.to_string(),
            s.seed.to_string(),
            r.estimator.to_string(),
            fmt_f64(r.mse),
            opt(r.mean_c),
            r.failed_replicates.to_string(),
            r.replicates.to_string(),
        ])?;
    }
    out.close()?;
    res.finish("grid")
}

fn prior_sample(cli: &Cli, a: &PriorSampleArgs) -> Result<()> {
    let mut res = Resolved::new(cli, "prior-sample")?;
    res.note("p0", fmt_f64(a.p0));
    res.note("tau2", fmt_f64(a.tau2));
    res.note("nu0", fmt_f64(a.nu0));
    res.note("mu_alpha", fmt_f64(a.mu_alpha));
    res.note("count", a.count);
    let draws = sample_mixture_prior(a.mu_alpha, a.tau2, a.nu0, a.p0, a.count, res.settings.seed)?;
    let mut out = CsvOut::create(res.path("prior-sample.csv"), &["alpha"])?;
    for d in draws {
        out.line(&fmt_f64(d))?;
    }
    out.close()?;
    res.finish("prior-sample")
}

fn parse_xi(raw: &str) -> Result<Vec<bool>> {
    raw.split(',')
        .map(|t| match t.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::Config(format!(
                "xi entries must be 0 or 1, got {other:?}"
            ))),
        })
        .collect()
}

fn diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<()> {
    let mut res = Resolved::new(cli, "diagnose")?;
    res.note("input", a.input.display());
    res.note("tau2", fmt_f64(a.tau2));
    res.note("sigma2_eta", fmt_f64(a.sigma2_eta));
    res.note("mu_alpha", fmt_f64(a.mu_alpha));
    res.note("nu0", fmt_f64(res.prior.nu0));
    if let Some(xi) = &a.xi {
        res.note("xi", xi);
    }
    if let Some(t) = &a.truth {
        res.note("truth", t.display());
    }

    let data = load_individual(&a.input)?;
    let fit = first_stage(&data)?;
    let m = Moments::individual(&data, &fit);
    let xi = a.xi.as_deref().map(parse_xi).transpose()?;
    let truth = a.truth.as_deref().map(load_truth).transpose()?;
    let bound_inputs = match &truth {
        Some(t) if t.alpha.len() != data.num_instruments() => {
            return Err(Error::Dimension(format!(
                "truth has {} instruments, data has {}",
                t.alpha.len(),
                data.num_instruments()
            )))
        }
        Some(t) => Some(BoundInputs::from_truth(&data, &fit, t.beta, &t.alpha)),
        None => None,
    };

    let mut shapes = vec![("single", PriorShape::Single)];
    if let Some(xi) = &xi {
        shapes.push((
            "mixture",
            PriorShape::Mixture {
                xi,
                nu0: res.prior.nu0,
            },
        ));
    }
    let mut out = CsvOut::create(
        res.path("diagnose.csv"),
        &[
            "mode",
            "beta_hat",
            "c_star",
            "c_double_star",
            "assumption_ok",
            "shrinkage_bias",
            "projection_noise",
            "endogeneity",
            "bound_total",
            "abs_error",
        ],
    )?;
    for (name, shape) in shapes {
        let mode = ridge_mode(&m, shape, a.mu_alpha, a.tau2, a.sigma2_eta)?;
        let d = diagnostics(
            &m,
            a.tau2,
            a.sigma2_eta,
            shape,
            a.mu_alpha,
            bound_inputs.as_ref(),
        )?;
        out.row(&[
            name.to_string(),
            fmt_f64(mode.beta),
            fmt_f64(d.c_star),
            fmt_f64(d.c_double_star),
            d.assumption_ok.to_string(),
            opt(d.bound.map(|b| b.shrinkage_bias)),
            opt(d.bound.map(|b| b.projection_noise)),
            opt(d.bound.map(|b| b.endogeneity)),
            opt(d.bound_total()),
            opt(truth.as_ref().map(|t| (mode.beta - t.beta).abs())),
        ])?;
    }
    out.close()?;
    res.finish("diagnose")
}
