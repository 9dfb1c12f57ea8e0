//! Datasets, hyperparameters, and CSV ingestion.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Individual-level observations `(Z, D, Y)`.
///
/// Instances built through [`IndividualDataset::new`] or
/// [`load_individual`] are centered; every estimator assumes this.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualDataset {
    z: DMatrix<f64>,
    d: DVector<f64>,
    y: DVector<f64>,
}

impl IndividualDataset {
    /// Validates and centers.
    pub fn new(z: DMatrix<f64>, d: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        Ok(Self::uncentered(z, d, y)?.centered())
    }

    /// Validates without centering. Used by the simulator to keep the raw
    /// model identities checkable.
    pub fn uncentered(z: DMatrix<f64>, d: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, j) = z.shape();
        if j == 0 {
            return Err(Error::Dimension("no instrument columns".into()));
        }
        if d.len() != n || y.len() != n {
            return Err(Error::Dimension(format!(
                "Z has {n} rows but D has {} and Y has {}",
                d.len(),
                y.len()
            )));
        }
        for row in 0..n {
            for col in 0..j {
                if !z[(row, col)].is_finite() {
                    return Err(Error::NonFinite {
                        row: row + 1,
                        column: format!("z{}", col + 1),
                    });
                }
            }
            if !d[row].is_finite() {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: "d".into(),
                });
            }
            if !y[row].is_finite() {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: "y".into(),
                });
            }
        }
        if n <= j {
            return Err(Error::TooFewObservations { n, j });
        }
        Ok(Self { z, d, y })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_instruments(&self) -> usize {
        self.z.ncols()
    }

    pub fn centered(self) -> Self {
        center_columns(self)
    }

    pub fn is_centered(&self, tol: f64) -> bool {
        let n = self.n() as f64;
        self.z.column_iter().all(|c| (c.sum() / n).abs() <= tol)
            && (self.d.sum() / n).abs() <= tol
            && (self.y.sum() / n).abs() <= tol
    }

    /// Writes the dataset in the individual CSV layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let j = self.num_instruments();
        let mut header: Vec<String> = (1..=j).map(|k| format!("z{k}")).collect();
        header.push("d".into());
        header.push("y".into());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for row in 0..self.n() {
            let mut fields: Vec<String> = (0..j).map(|col| fmt_f64(self.z[(row, col)])).collect();
            fields.push(fmt_f64(self.d[row]));
            fields.push(fmt_f64(self.y[row]));
            writeln!(out, "{}", fields.join(",")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Subtracts each column mean from `Z`, `D` and `Y`.
///
/// A column whose mean is already below `1e-12` of its largest magnitude is
/// left untouched, which makes centering idempotent bit-for-bit.
pub fn center_columns(data: IndividualDataset) -> IndividualDataset {
    let IndividualDataset {
        mut z,
        mut d,
        mut y,
    } = data;
    for mut col in z.column_iter_mut() {
        center_slice(col.as_mut_slice());
    }
    center_slice(d.as_mut_slice());
    center_slice(y.as_mut_slice());
    IndividualDataset { z, d, y }
}

fn center_slice(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let scale = xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if mean.abs() <= 1e-12 * scale || mean == 0.0 {
        return;
    }
    xs.iter_mut().for_each(|x| *x -= mean);
}

/// Per-variant association estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryDataset {
    gamma2: DVector<f64>,
    omega: DVector<f64>,
    sigma2_omega: DVector<f64>,
}

impl SummaryDataset {
    pub fn new(
        gamma2: DVector<f64>,
        omega: DVector<f64>,
        sigma2_omega: DVector<f64>,
    ) -> Result<Self> {
        let j = gamma2.len();
        if j == 0 {
            return Err(Error::NoVariants);
        }
        if omega.len() != j || sigma2_omega.len() != j {
            return Err(Error::Dimension(format!(
                "gamma2 has {j} entries, omega {}, sigma2_omega {}",
                omega.len(),
                sigma2_omega.len()
            )));
        }
        for row in 0..j {
            for (name, v) in [("gamma2", gamma2[row]), ("omega", omega[row])] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row + 1,
                        column: name.into(),
                    });
                }
            }
            let s = sigma2_omega[row];
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: "sigma2_omega".into(),
                });
            }
            if s <= 0.0 {
                return Err(Error::NonPositiveVariance {
                    row: row + 1,
                    value: s,
                });
            }
        }
        Ok(Self {
            gamma2,
            omega,
            sigma2_omega,
        })
    }

    pub fn gamma2(&self) -> &DVector<f64> {
        &self.gamma2
    }

    pub fn omega(&self) -> &DVector<f64> {
        &self.omega
    }

    pub fn sigma2_omega(&self) -> &DVector<f64> {
        &self.sigma2_omega
    }

    pub fn num_variants(&self) -> usize {
        self.gamma2.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        writeln!(out, "gamma2,omega,sigma2_omega").map_err(io_err)?;
        for row in 0..self.num_variants() {
            writeln!(
                out,
                "{},{},{}",
                fmt_f64(self.gamma2[row]),
                fmt_f64(self.omega[row]),
                fmt_f64(self.sigma2_omega[row])
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Hyperparameters of the variance priors and the EM starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Spike-to-slab variance ratio.
    pub nu0: f64,
    /// Shape of the Gamma prior on `1/tau2`.
    pub nu1: f64,
    /// Rate of the Gamma prior on `1/tau2`.
    pub nu2: f64,
    /// Shape of the Gamma prior on `1/sigma2_eta`.
    pub nu3: f64,
    /// Rate of the Gamma prior on `1/sigma2_eta`.
    pub nu4: f64,
    pub beta_init: f64,
    pub mu_alpha_init: f64,
    pub p0_init: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            nu0: 0.001,
            nu1: 2.0,
            nu2: 0.4,
            nu3: 0.0001,
            nu4: 0.0001,
            beta_init: 0.0,
            mu_alpha_init: 0.0,
            p0_init: 0.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu0 > 0.0 && self.nu0 < 1.0) {
            return Err(Error::param("nu0", self.nu0, "must lie in (0, 1)"));
        }
        for (name, v) in [
            ("nu1", self.nu1),
            ("nu2", self.nu2),
            ("nu3", self.nu3),
            ("nu4", self.nu4),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, v, "must be positive and finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.p0_init) {
            return Err(Error::param("p0_init", self.p0_init, "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("beta_init", self.beta_init),
            ("mu_alpha_init", self.mu_alpha_init),
        ] {
            if !v.is_finite() {
                return Err(Error::param(name, v, "must be finite"));
            }
        }
        Ok(())
    }
}

/// Monte Carlo EM run controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McemSettings {
    /// Retained Gibbs draws per E-step.
    pub mc_samples: usize,
    /// Draws discarded at the start of each E-step.
    pub burn_in: usize,
    pub max_iters: usize,
    /// Relative-change tolerance on the monitored estimates.
    pub tol: f64,
    pub seed: u64,
}

impl Default for McemSettings {
    fn default() -> Self {
        Self {
            mc_samples: 500,
            burn_in: 100,
            max_iters: 200,
            tol: 1e-3,
            seed: 0,
        }
    }
}

impl McemSettings {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::param(
                "mc_samples",
                self.mc_samples,
                "must be at least 1",
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::param(
                "max_iters",
                self.max_iters,
                "must be at least 1",
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::param("tol", self.tol, "must be positive"));
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_field(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::NonFinite {
            row,
            column: column.into(),
        });
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        message: format!("cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            row,
            column: column.into(),
        });
    }
    Ok(v)
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub(crate) fn csv_error(e: csv::Error, row: usize) -> Error {
    Error::Parse {
        row,
        column: "-".into(),
        message: e.to_string(),
    }
}

/// Reads `z1,...,zJ,d,y`, validates, and centers.
pub fn load_individual(path: &Path) -> Result<IndividualDataset> {
    let mut reader = csv_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if header.len() < 3 {
        return Err(Error::Dimension(format!(
            "header needs z1..zJ,d,y; got {} columns",
            header.len()
        )));
    }
    let j = header.len() - 2;
    for (k, name) in header[..j].iter().enumerate() {
        if *name != format!("z{}", k + 1) {
            return Err(Error::Parse {
                row: 0,
                column: name.clone(),
                message: format!("expected header z{}", k + 1),
            });
        }
    }
    if header[j] != "d" || header[j + 1] != "y" {
        return Err(Error::Parse {
            row: 0,
            column: header[j..].join(","),
            message: "last two header columns must be d,y".into(),
        });
    }

    let mut zs = Vec::new();
    let mut ds = Vec::new();
    let mut ys = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_error(e, row))?;
        if record.len() != header.len() {
            return Err(Error::Dimension(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (col, name) in header.iter().enumerate() {
            let v = parse_field(&record[col], row, name)?;
            if col < j {
                zs.push(v);
            } else if col == j {
                ds.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = ds.len();
    if n <= j {
        return Err(Error::TooFewObservations { n, j });
    }
    let z = DMatrix::from_row_slice(n, j, &zs);
    IndividualDataset::new(z, DVector::from_vec(ds), DVector::from_vec(ys))
}

/// Reads `gamma2,omega,sigma2_omega`.
pub fn load_summary(path: &Path) -> Result<SummaryDataset> {
    let mut reader = csv_reader(path)?;
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(|h| h.to_ascii_lowercase()).collect(),
        Err(e) => return Err(csv_error(e, 0)),
    };
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::NoVariants);
    }
    if header != ["gamma2", "omega", "sigma2_omega"] {
        return Err(Error::Parse {
            row: 0,
            column: header.join(","),
            message: "header must be gamma2,omega,sigma2_omega".into(),
        });
    }
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_error(e, row))?;
        if record.len() != 3 {
            return Err(Error::Dimension(format!(
                "row {row} has {} fields, expected 3",
                record.len()
            )));
        }
        for (col, name) in header.iter().enumerate() {
            cols[col].push(parse_field(&record[col], row, name)?);
        }
    }
    let [g, o, s] = cols;
    SummaryDataset::new(
        DVector::from_vec(g),
        DVector::from_vec(o),
        DVector::from_vec(s),
    )
}
