//! Command-line plumbing: JSON run configuration, CSV exchange, metrics and
//! the `simulate` / `estimate` / `compare` subcommands.
//!
//! All CSV files are comma separated with LF line endings. Lines starting
//! with `#` are comments; the first one records the tool version, a SHA-256
//! of the resolved configuration and the seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dynamics::{augment, ContinuousModel, LinearModel};
use crate::error::{Error, Result};
use crate::gp_ssm::GpPrior;
use crate::integrator::{default_substeps, FdScheme, PiecewiseSignal};
use crate::kfrts::BaselineSetup;
use crate::nlp::InnerMethod;
use crate::ose::{
    estimate_dmhe, estimate_fie, learn_then_freeze_hyperparameter, EstimateResult, EstimationConfig, HyperLearning,
};
use crate::scenarios::{Dataset, EstimatorSetup, Scenario, RNG_ALGORITHM};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Search interval and grid size for the baseline's marginal-likelihood fit.
pub const BASELINE_LENGTH_SCALE_BOUNDS: (f64, f64) = (0.1, 10.0);
pub const BASELINE_GRID_POINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fie,
    Dmhe,
    Kfrts,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fie => "fie",
            Self::Dmhe => "dmhe",
            Self::Kfrts => "kfrts",
        }
    }
}

// ---------------------------------------------------------------------------
// Provenance header

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Random-number algorithm identifier, for simulated data.
    pub rng: Option<String>,
}

impl Provenance {
    /// Hashes the compact JSON form of `config` (object keys sorted).
    pub fn new(config: &Value, seed: Option<u64>) -> Self {
        Self {
            version: VERSION.to_string(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            seed,
            rng: None,
        }
    }

    pub fn line(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let mut line = format!("# lfm {} config_hash={} seed={}", self.version, self.config_hash, seed);
        if let Some(rng) = &self.rng {
            line.push_str(" rng=");
            line.push_str(rng);
        }
        line
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.strip_prefix('#')?.split_whitespace();
        if parts.next()? != "lfm" {
            return None;
        }
        let version = parts.next()?.to_string();
        let mut config_hash = None;
        let mut seed = None;
        let mut rng = None;
        for part in parts {
            match part.split_once('=')? {
                ("config_hash", v) => config_hash = Some(v.to_string()),
                ("seed", "none") => {}
                ("seed", v) => seed = Some(v.parse().ok()?),
                ("rng", v) => rng = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Self {
            version,
            config_hash: config_hash?,
            seed,
            rng,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// CSV tables

/// `t, y1..yp` (also used for inputs `t, u1..um`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTable {
    pub provenance: Option<Provenance>,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

/// Truth (`t, x1..xn, ell`) or estimates (`t, xhat1..xhatna, ell_hat`).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    pub provenance: Option<Provenance>,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub latent_force: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StateKind {
    Truth,
    Estimate,
}

impl StateKind {
    fn names(self) -> (&'static str, &'static str) {
        match self {
            Self::Truth => ("x", "ell"),
            Self::Estimate => ("xhat", "ell_hat"),
        }
    }
}

/// Shortest representation that parses back to the identical `f64`.
fn number(v: f64) -> String {
    format!("{v:?}")
}

fn render(provenance: Option<&Provenance>, header: Vec<String>, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str(&p.line());
        out.push('\n');
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(number).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn check_rows(times: usize, rows: usize, context: &'static str) -> Result<()> {
    if times == rows {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected: times,
            got: rows,
        })
    }
}

pub fn render_measurements(table: &MeasurementTable, prefix: &str) -> Result<String> {
    check_rows(table.times.len(), table.values.len(), "measurement rows")?;
    let p = table.values.first().map_or(0, |v| v.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=p).map(|i| format!("{prefix}{i}")));
    let rows = table.times.iter().zip(&table.values).map(|(t, y)| {
        let mut row = vec![*t];
        row.extend(y.iter());
        row
    });
    Ok(render(table.provenance.as_ref(), header, rows))
}

fn render_states(table: &StateTable, kind: StateKind) -> Result<String> {
    check_rows(table.times.len(), table.states.len(), "state rows")?;
    check_rows(table.times.len(), table.latent_force.len(), "latent-force rows")?;
    let (state, force) = kind.names();
    let n = table.states.first().map_or(0, |v| v.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("{state}{i}")));
    header.push(force.to_string());
    let rows = (0..table.times.len()).map(|k| {
        let mut row = vec![table.times[k]];
        row.extend(table.states[k].iter());
        row.push(table.latent_force[k]);
        row
    });
    Ok(render(table.provenance.as_ref(), header, rows))
}

pub fn render_truth(table: &StateTable) -> Result<String> {
    render_states(table, StateKind::Truth)
}

pub fn render_estimates(table: &StateTable) -> Result<String> {
    render_states(table, StateKind::Estimate)
}

struct RawTable {
    provenance: Option<Provenance>,
    columns: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

impl RawTable {
    fn parse(text: &str) -> Result<Self> {
        let provenance = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(Provenance::parse);
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let columns: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
        if columns.iter().all(|c| c.is_empty()) {
            return Err(Error::Parse {
                line: 1,
                message: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            rows.push((line, record));
        }
        Ok(Self {
            provenance,
            columns,
            rows,
        })
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        let index = self.position(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        self.rows
            .iter()
            .map(|(line, record)| {
                let field = record.get(index).unwrap_or("");
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line: *line,
                    message: format!("column `{name}`: `{field}` is not a number"),
                })
            })
            .collect()
    }

    /// `prefix1..prefixK`, contiguous from 1.
    fn indexed(&self, prefix: &str) -> Result<Vec<Vec<f64>>> {
        let highest = self
            .columns
            .iter()
            .filter_map(|c| c.strip_prefix(prefix)?.parse::<usize>().ok())
            .max()
            .unwrap_or(0);
        if highest == 0 {
            return Err(Error::MissingColumn(format!("{prefix}1")));
        }
        (1..=highest).map(|i| self.column(&format!("{prefix}{i}"))).collect()
    }
}

fn transpose(columns: &[Vec<f64>], rows: usize) -> Vec<DVector<f64>> {
    (0..rows)
        .map(|k| DVector::from_iterator(columns.len(), columns.iter().map(|c| c[k])))
        .collect()
}

pub fn parse_measurements(text: &str, prefix: &str) -> Result<MeasurementTable> {
    let raw = RawTable::parse(text)?;
    let times = raw.column("t")?;
    let columns = raw.indexed(prefix)?;
    Ok(MeasurementTable {
        provenance: raw.provenance,
        values: transpose(&columns, times.len()),
        times,
    })
}

fn parse_states(text: &str, kind: StateKind) -> Result<StateTable> {
    let (state, force) = kind.names();
    let raw = RawTable::parse(text)?;
    let times = raw.column("t")?;
    let columns = raw.indexed(state)?;
    let latent_force = raw.column(force)?;
    Ok(StateTable {
        provenance: raw.provenance,
        states: transpose(&columns, times.len()),
        times,
        latent_force,
    })
}

pub fn parse_truth(text: &str) -> Result<StateTable> {
    parse_states(text, StateKind::Truth)
}

pub fn parse_estimates(text: &str) -> Result<StateTable> {
    parse_states(text, StateKind::Estimate)
}

pub fn read_measurements(path: &Path) -> Result<MeasurementTable> {
    parse_measurements(&fs::read_to_string(path)?, "y")
}

pub fn read_inputs(path: &Path) -> Result<MeasurementTable> {
    parse_measurements(&fs::read_to_string(path)?, "u")
}

pub fn read_truth(path: &Path) -> Result<StateTable> {
    parse_truth(&fs::read_to_string(path)?)
}

pub fn read_estimates(path: &Path) -> Result<StateTable> {
    parse_estimates(&fs::read_to_string(path)?)
}

/// Measurement and truth tables for a simulated dataset.
pub fn dataset_tables(dataset: &Dataset, provenance: &Provenance) -> (MeasurementTable, StateTable) {
    let times = dataset.times();
    (
        MeasurementTable {
            provenance: Some(provenance.clone()),
            times: times.clone(),
            values: dataset.measurements.clone(),
        },
        StateTable {
            provenance: Some(provenance.clone()),
            times,
            states: dataset.states.clone(),
            latent_force: dataset.latent_force.clone(),
        },
    )
}

// ---------------------------------------------------------------------------
// Metrics

fn same_grid(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("{} vs {} nodes", a.len(), b.len())));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > 1e-9 * (1.0 + x.abs()) {
            return Err(Error::GridMismatch(format!("node {k}: t = {x} vs {y}")));
        }
    }
    Ok(())
}

/// Mean of squared per-node differences.
pub fn mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::GridMismatch(format!(
            "{} estimates vs {} truth values",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::GridMismatch("no nodes to compare".into()));
    }
    let sum: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / estimate.len() as f64)
}

pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    mse(estimate, truth).map(f64::sqrt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMetric {
    pub signal: String,
    pub mse: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub signals: Vec<SignalMetric>,
    pub max_violation: Option<f64>,
    pub wall_clock_seconds: Option<f64>,
    pub solver_iterations: Option<usize>,
    pub converged: Option<bool>,
    pub windows_not_converged: Option<usize>,
    pub learned_length_scale: Option<f64>,
    pub length_scale_relative_std_error: Option<f64>,
    pub low_confidence: Option<bool>,
}

/// Per-signal errors on matching columns: `x_i` against `xhat_i` for every
/// physical state present in both, then `ell` against `ell_hat`.
pub fn compare_tables(estimates: &StateTable, truth: &StateTable) -> Result<Vec<SignalMetric>> {
    same_grid(&estimates.times, &truth.times)?;
    let n = truth
        .states
        .first()
        .map_or(0, |x| x.len())
        .min(estimates.states.first().map_or(0, |x| x.len()));
    let mut out = Vec::with_capacity(n + 1);
    let metric = |signal: String, est: &[f64], tru: &[f64]| -> Result<SignalMetric> {
        let mse = mse(est, tru)?;
        Ok(SignalMetric {
            signal,
            mse,
            rmse: mse.sqrt(),
        })
    };
    for i in 0..n {
        let est: Vec<f64> = estimates.states.iter().map(|x| x[i]).collect();
        let tru: Vec<f64> = truth.states.iter().map(|x| x[i]).collect();
        out.push(metric(format!("x{}", i + 1), &est, &tru)?);
    }
    out.push(metric("ell".into(), &estimates.latent_force, &truth.latent_force)?);
    Ok(out)
}

pub fn render_metrics(metrics: &[SignalMetric], provenance: Option<&Provenance>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str(&p.line());
        out.push('\n');
    }
    out.push_str("signal,mse,rmse\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.signal, number(m.mse), number(m.rmse)));
    }
    out
}

// ---------------------------------------------------------------------------
// Run configuration

type Matrix = Vec<Vec<f64>>;

fn matrix(rows: &Matrix, context: &'static str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(Error::DimensionMismatch {
            context,
            expected: c,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Linear base model supplied directly in the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalModel {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Matrix>,
    #[serde(rename = "G")]
    pub g: Vec<f64>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Matrix>,
    #[serde(rename = "C")]
    pub c: Matrix,
    #[serde(default = "default_order")]
    pub matern_order: u32,
    #[serde(default = "one")]
    pub length_scale: f64,
    #[serde(default = "one")]
    pub signal_variance: f64,
}

fn default_order() -> u32 {
    1
}

fn one() -> f64 {
    1.0
}

impl ExternalModel {
    fn base(&self) -> Result<ContinuousModel<f64>> {
        let a = matrix(&self.a, "A")?;
        let n = a.nrows();
        let b = match &self.b {
            Some(b) => matrix(b, "B")?,
            None => DMatrix::zeros(n, 0),
        };
        let lin = LinearModel::new(a, b, DVector::from_vec(self.g.clone()), matrix(&self.c, "C")?)?;
        let base = ContinuousModel::new(lin);
        match &self.e {
            Some(e) => base.with_disturbance_map(matrix(e, "E")?),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opt_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_inner: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner: Option<InnerMethod>,
}

/// JSON run configuration. Estimation keys override the scenario defaults;
/// `null` entries in `state_lower` / `state_upper` mean unbounded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_overrides: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ExternalModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learn_window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_scheme: Option<FdScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_lower: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_upper: Option<Vec<Option<f64>>>,
    /// Prior initial-state estimate `x̂0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn for_scenario(name: &str) -> Self {
        Self {
            scenario: Some(name.to_string()),
            ..Self::default()
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("run configuration serializes")
    }

    /// Estimator setup: scenario defaults (or the external model) with this
    /// configuration's keys applied on top.
    pub fn resolve(&self) -> Result<EstimatorSetup> {
        let mut setup = match (&self.scenario, &self.model) {
            (Some(name), None) => Scenario::from_name(name, self.scenario_overrides.as_ref())?.default_weights()?,
            (None, Some(model)) => self.external_setup(model)?,
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("give either `scenario` or `model`, not both".into()));
            }
            (None, None) => return Err(Error::InvalidConfig("config needs `scenario` or `model`".into())),
        };
        if self.model.is_some() && self.scenario_overrides.is_some() {
            return Err(Error::InvalidConfig("`scenario_overrides` needs `scenario`".into()));
        }
        let config = &mut setup.config;
        if let Some(step) = self.step {
            config.step = step;
            config.substeps = self.substeps.unwrap_or_else(|| default_substeps(step));
            if let Some(b) = setup.baseline.as_mut() {
                b.step = step;
            }
        }
        if let Some(q) = &self.q {
            config.q = matrix(q, "q")?;
        }
        if let Some(r) = &self.r {
            config.r = matrix(r, "r")?;
        }
        if let Some(p) = &self.p {
            config.p = matrix(p, "p")?;
        }
        if let Some(v) = self.horizon_samples {
            config.horizon_samples = v;
        }
        if let Some(v) = self.learn_window {
            config.learn_window = v;
        }
        if let Some(v) = self.substeps {
            config.substeps = v;
        }
        if let Some(v) = self.fd_scheme {
            config.fd_scheme = v;
        }
        if let Some(s) = &self.solver {
            let o = &mut config.solver;
            o.opt_tol = s.opt_tol.unwrap_or(o.opt_tol);
            o.feas_tol = s.feas_tol.unwrap_or(o.feas_tol);
            o.max_outer = s.max_outer.unwrap_or(o.max_outer);
            o.max_inner = s.max_inner.unwrap_or(o.max_inner);
            o.memory = s.memory.unwrap_or(o.memory);
            o.inner = s.inner.unwrap_or(o.inner);
        }
        let na = setup.model.state_dim();
        let bounds = |values: &Vec<Option<f64>>, fill: f64, context| -> Result<DVector<f64>> {
            if values.len() != na {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: na,
                    got: values.len(),
                });
            }
            Ok(DVector::from_iterator(na, values.iter().map(|v| v.unwrap_or(fill))))
        };
        if let Some(lo) = &self.state_lower {
            config.constraints.state_lower = bounds(lo, f64::NEG_INFINITY, "state_lower")?;
        }
        if let Some(hi) = &self.state_upper {
            config.constraints.state_upper = bounds(hi, f64::INFINITY, "state_upper")?;
        }
        if let Some(prior) = &self.prior {
            if prior.len() != setup.prior.len() {
                return Err(Error::DimensionMismatch {
                    context: "prior",
                    expected: setup.prior.len(),
                    got: prior.len(),
                });
            }
            setup.prior = DVector::from_vec(prior.clone());
        }
        setup.config.validate(&setup.model)?;
        Ok(setup)
    }

    /// External linear models have no defaults for the weights. The baseline
    /// noise follows the weights: measurement covariance `(2R)⁻¹`, process
    /// spectral density `(4 Q_x)⁻¹` on the physical disturbance block and
    /// initial variance `(4 p_ii)⁻¹` (largest over the physical states).
    fn external_setup(&self, external: &ExternalModel) -> Result<EstimatorSetup> {
        let (Some(step), Some(q), Some(r), Some(p)) = (self.step, &self.q, &self.r, &self.p) else {
            return Err(Error::InvalidConfig(
                "an external `model` needs `step`, `q`, `r` and `p`".into(),
            ));
        };
        let base = external.base()?;
        let prior = GpPrior::new(external.matern_order, external.length_scale, external.signal_variance)?;
        let model = augment(base.clone(), prior.clone())?;
        let (q, r, p) = (matrix(q, "q")?, matrix(r, "r")?, matrix(p, "p")?);
        let config = EstimationConfig::new(&model, q.clone(), r.clone(), p.clone(), step)?;
        let inverse = |m: DMatrix<f64>, name| m.try_inverse().ok_or(Error::NotPositiveDefinite(name));
        let nq = base.disturbance_dim();
        let n = model.physical_dim();
        let baseline = if q.nrows() >= nq && p.nrows() >= n && r.nrows() > 0 {
            let kappa = (0..n).map(|i| 0.25 / p[(i, i)]).fold(0.0, f64::max);
            Some(BaselineSetup {
                base,
                prior,
                process_spectral: inverse(q.view((0, 0), (nq, nq)) * 4.0, "Q")?,
                measurement_cov: inverse(r * 2.0, "R")?,
                step,
                physical_prior_variance: kappa,
                prior_mean: None,
            })
        } else {
            None
        };
        Ok(EstimatorSetup {
            prior: DVector::zeros(model.state_dim()),
            learning: Some(HyperLearning::new(external.length_scale)),
            model,
            config,
            baseline,
        })
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub states: Vec<DVector<f64>>,
    pub latent_force: Vec<f64>,
    pub metrics: MetricsReport,
    /// Optimization result, absent for the baseline.
    pub estimate: Option<EstimateResult<f64>>,
}

fn check_grid(times: &[f64], step: f64) -> Result<()> {
    let t0 = times.first().copied().unwrap_or(0.0);
    for (k, t) in times.iter().enumerate() {
        let expected = t0 + step * k as f64;
        if (t - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
            return Err(Error::GridMismatch(format!(
                "node {k}: t = {t}, expected {expected} for step {step}"
            )));
        }
    }
    Ok(())
}

/// Runs one estimator on node-aligned measurements (`N + 1` samples).
///
/// With a learn window and learn-then-freeze settings the length scale is
/// estimated on the first `learn_window` samples and frozen for the full
/// run; the baseline fits it by marginal likelihood on the same samples.
pub fn run_method(
    method: Method,
    setup: &EstimatorSetup,
    measurements: &[DVector<f64>],
    inputs: Option<&PiecewiseSignal<f64>>,
) -> Result<MethodOutput> {
    let started = Instant::now();
    let config = &setup.config;
    let mut metrics = MetricsReport {
        method: Some(method),
        ..MetricsReport::default()
    };
    let learn = config.learn_window > 0;
    let output = match method {
        Method::Fie | Method::Dmhe => {
            let mut model = setup.model.clone();
            if let (true, Some(learning)) = (learn, setup.learning.as_ref()) {
                let learned =
                    learn_then_freeze_hyperparameter(&model, measurements, inputs, config, &setup.prior, learning)?;
                metrics.learned_length_scale = Some(learned.length_scale);
                metrics.length_scale_relative_std_error = Some(learned.relative_std_error);
                metrics.low_confidence = Some(learned.low_confidence);
                model = learned.model;
            }
            let estimate = if method == Method::Fie {
                estimate_fie(&model, measurements, inputs, config, &setup.prior)?
            } else {
                if config.horizon_samples == 0 {
                    return Err(Error::InvalidConfig("dmhe needs `horizon_samples` > 0".into()));
                }
                estimate_dmhe(&model, measurements, inputs, config, &setup.prior)?
            };
            metrics.max_violation = Some(estimate.max_violation());
            metrics.solver_iterations = Some(estimate.total_iterations());
            metrics.converged = Some(estimate.converged);
            metrics.windows_not_converged = Some(estimate.reports.iter().filter(|r| !r.converged).count());
            MethodOutput {
                states: estimate.states.clone(),
                latent_force: estimate.latent_force.clone(),
                metrics: MetricsReport::default(),
                estimate: Some(estimate),
            }
        }
        Method::Kfrts => {
            let baseline = setup
                .baseline
                .as_ref()
                .ok_or(Error::RequiresLinearModel("the kfrts method"))?;
            let observed: Vec<Option<DVector<f64>>> = measurements.iter().cloned().map(Some).collect();
            let length_scale = if learn {
                let window = &observed[..(config.learn_window + 1).min(observed.len())];
                let (lo, hi) = BASELINE_LENGTH_SCALE_BOUNDS;
                let search = baseline.optimize_lengthscale_ml(window, inputs, lo, hi, BASELINE_GRID_POINTS)?;
                metrics.learned_length_scale = Some(search.length_scale);
                search.length_scale
            } else {
                baseline.prior.length_scale()
            };
            let smoothed = baseline.smooth(length_scale, &observed, inputs)?;
            let model = augment(baseline.base.clone(), baseline.prior.with_length_scale(length_scale)?)?;
            let latent_force = smoothed.smoothed_means.iter().map(|x| model.latent_force(x)).collect();
            metrics.converged = Some(true);
            MethodOutput {
                states: smoothed.smoothed_means,
                latent_force,
                metrics: MetricsReport::default(),
                estimate: None,
            }
        }
    };
    metrics.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    log::info!(
        "{} finished in {:.2} s ({} iterations)",
        method.as_str(),
        started.elapsed().as_secs_f64(),
        metrics.solver_iterations.unwrap_or(0)
    );
    Ok(MethodOutput { metrics, ..output })
}

/// Piecewise-constant inputs from an input table: the first `intervals`
/// rows are used, one per interval.
pub fn inputs_from_table(table: &MeasurementTable, intervals: usize) -> Result<PiecewiseSignal<f64>> {
    if table.values.len() < intervals {
        return Err(Error::WindowTooShort {
            needed: intervals,
            got: table.values.len(),
        });
    }
    let dim = table.values.first().map_or(0, |v| v.len());
    PiecewiseSignal::new(dim, table.values[..intervals].to_vec())
}

/// Writes `measurements.csv` and `truth.csv` for a simulated scenario.
pub fn simulate_to_dir(scenario: &Scenario, seed: u64, out: &Path) -> Result<Dataset> {
    let dataset = scenario.generate(seed)?;
    let provenance = Provenance {
        rng: Some(RNG_ALGORITHM.to_string()),
        ..Provenance::new(
            &json!({"scenario": scenario.name(), "params": scenario.params_json()}),
            Some(seed),
        )
    };
    let (measurements, truth) = dataset_tables(&dataset, &provenance);
    fs::create_dir_all(out)?;
    fs::write(out.join("measurements.csv"), render_measurements(&measurements, "y")?)?;
    fs::write(out.join("truth.csv"), render_truth(&truth)?)?;
    Ok(dataset)
}

/// Runs `method` on a measurement table and writes `estimates.csv` and
/// `metrics.json` into `out`.
pub fn estimate_to_dir(
    method: Method,
    config: &RunConfig,
    measurements: &MeasurementTable,
    inputs: Option<&MeasurementTable>,
    out: &Path,
) -> Result<MethodOutput> {
    let setup = config.resolve()?;
    check_grid(&measurements.times, setup.config.step)?;
    if measurements.times.len() < 2 {
        return Err(Error::WindowTooShort {
            needed: 2,
            got: measurements.times.len(),
        });
    }
    let intervals = measurements.times.len() - 1;
    let inputs = inputs.map(|t| inputs_from_table(t, intervals)).transpose()?;
    let output = run_method(method, &setup, &measurements.values, inputs.as_ref())?;

    let mut resolved = config.clone();
    resolved.method = Some(method);
    let seed = config
        .seed
        .or_else(|| measurements.provenance.as_ref().and_then(|p| p.seed));
    let provenance = Provenance::new(&resolved.to_value(), seed);
    let table = StateTable {
        provenance: Some(provenance),
        times: measurements.times.clone(),
        states: output.states.clone(),
        latent_force: output.latent_force.clone(),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("estimates.csv"), render_estimates(&table)?)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&output.metrics)? + "\n")?;
    Ok(output)
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "lfm", version, about = "Latent force estimation by FIE, delayed MHE and a KF/RTS baseline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario; writes measurements.csv and truth.csv.
    Simulate {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Scenario::names()))]
        scenario: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON object deep-merged over the scenario parameters.
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
    /// Estimate states and latent force; writes estimates.csv and metrics.json.
    Estimate {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Output directory; falls back to `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-signal MSE/RMSE of estimates against truth.
    Compare {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Runtime(e.into())
    }
}

fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Simulate {
            scenario,
            seed,
            out,
            overrides,
        } => {
            let overrides = overrides
                .map(|path| -> Result<Value> { Ok(serde_json::from_str(&fs::read_to_string(path)?)?) })
                .transpose()?;
            let scenario = Scenario::from_name(&scenario, overrides.as_ref())?;
            simulate_to_dir(&scenario, seed, &out)?;
        }
        Command::Estimate {
            method,
            config,
            measurements,
            inputs,
            out,
        } => {
            let config = RunConfig::from_file(&config)?;
            let out = out
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `output_dir`".into()))?;
            let measurements = read_measurements(&measurements)?;
            let inputs = inputs.map(|p| read_inputs(&p)).transpose()?;
            estimate_to_dir(method, &config, &measurements, inputs.as_ref(), &out)?;
        }
        Command::Compare { estimates, truth, out } => {
            let estimates = read_estimates(&estimates)?;
            let truth = read_truth(&truth)?;
            let metrics = compare_tables(&estimates, &truth)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, render_metrics(&metrics, estimates.provenance.as_ref()))?;
        }
    }
    Ok(())
}

/// Entry point: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err}");
            2
        }
    }
}

/// Logger driven by `LFM_LOG` (error, info or debug); errors only by default.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LFM_LOG", "error")).try_init();
}
