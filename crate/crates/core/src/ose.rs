//! Optimal state estimation: full information estimation (FIE) over the whole
//! record and delayed moving horizon estimation (dMHE) over sliding windows.
//!
//! Dynamics are eliminated by single shooting. The decision vector is
//! `z = (χ, w_0, …, w_{N-1})` and the cost is
//!
//! ```text
//! 2‖χ − x̂₀‖²_P + Σ_k 2δ‖w_k‖²_Q + Σ_{k<N} ‖y_k − h(x(t_k))‖²_R
//! ```
//!
//! with measurements taken at the left end of each interval.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{augment_hyperparameter_with, AugmentedModel, ConstraintSet, HyperMapping, HyperState};
use crate::error::{Error, Result};
use crate::integrator::{default_substeps, simulate, trajectory_jacobians, FdScheme, Grid, PiecewiseSignal};
use crate::nlp::{solve, LeastSquaresEval, NlpProblem, SolveReport, SolverOptions, Termination};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct EstimationConfig<T: Real> {
    /// Disturbance weight, `n_w × n_w`.
    pub q: DMatrix<T>,
    /// Output residual weight, `p × p`.
    pub r: DMatrix<T>,
    /// Prior weight, `n_a × n_a`.
    pub p: DMatrix<T>,
    pub step: T,
    /// dMHE window length `M/δ`; must be even.
    pub horizon_samples: usize,
    /// Samples used to learn the length scale before freezing it.
    pub learn_window: usize,
    pub constraints: ConstraintSet<T>,
    pub solver: SolverOptions<T>,
    pub substeps: usize,
    pub fd_scheme: FdScheme,
}

impl<T: Real> EstimationConfig<T> {
    /// Unconstrained apart from model-implied bounds, default solver settings.
    pub fn new(model: &AugmentedModel<T>, q: DMatrix<T>, r: DMatrix<T>, p: DMatrix<T>, step: T) -> Result<Self> {
        let config = Self {
            q,
            r,
            p,
            step,
            horizon_samples: 0,
            learn_window: 0,
            constraints: ConstraintSet::for_model(model),
            solver: SolverOptions::default(),
            substeps: default_substeps(step),
            fd_scheme: FdScheme::Forward,
        };
        config.validate(model)?;
        Ok(config)
    }

    pub fn validate(&self, model: &AugmentedModel<T>) -> Result<()> {
        let square = |m: &DMatrix<T>, n: usize, context: &'static str| {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    got: if m.nrows() != n { m.nrows() } else { m.ncols() },
                });
            }
            Ok(())
        };
        square(&self.q, model.disturbance_dim(), "Q weight")?;
        square(&self.r, model.output_dim(), "R weight")?;
        square(&self.p, model.state_dim(), "P weight")?;
        if !(self.step > T::zero()) || !self.step.is_finite_value() {
            return Err(Error::InvalidConfig(format!("step must be positive, got {}", self.step)));
        }
        if self.horizon_samples % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "horizon must be an even number of samples, got {}",
                self.horizon_samples
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be at least 1".into()));
        }
        self.constraints.validate(model)?;
        Weights::new(self).map(|_| ())
    }

    /// Horizon `M` in time units.
    pub fn horizon(&self) -> T {
        self.step * T::from_usize_lossy(self.horizon_samples)
    }

    fn grid(&self, intervals: usize) -> Result<Grid<T>> {
        Grid::with_substeps(T::zero(), self.step, intervals, self.substeps)
    }
}

fn upper_factor<T: Real>(m: &DMatrix<T>, name: &'static str) -> Result<DMatrix<T>> {
    if (m - m.transpose()).amax() > T::lit(1e-12) * (T::one() + m.amax()) {
        return Err(Error::NotPositiveDefinite(name));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l().transpose())
        .ok_or(Error::NotPositiveDefinite(name))
}

/// Square-root weights: each cost term is `‖S v‖²`.
#[derive(Debug, Clone)]
struct Weights<T: Real> {
    prior: DMatrix<T>,
    disturbance: DMatrix<T>,
    measurement: DMatrix<T>,
}

impl<T: Real> Weights<T> {
    fn new(config: &EstimationConfig<T>) -> Result<Self> {
        let two = T::lit(2.0);
        Ok(Self {
            prior: upper_factor(&config.p, "P")? * two.sqrt(),
            disturbance: upper_factor(&config.q, "Q")? * (two * config.step).sqrt(),
            measurement: upper_factor(&config.r, "R")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Quantity {
    State,
    Output,
    Noise,
}

/// One inequality row `sign · (value − bound) ≤ 0`.
#[derive(Debug, Clone, Copy)]
struct Row<T: Real> {
    node: usize,
    quantity: Quantity,
    index: usize,
    bound: T,
    upper: bool,
}

fn constraint_rows<T: Real>(set: &ConstraintSet<T>, intervals: usize) -> Vec<Row<T>> {
    let mut rows = Vec::new();
    let mut push = |node, quantity, lo: &DVector<T>, hi: &DVector<T>| {
        for i in 0..lo.len() {
            if lo[i].is_finite_value() {
                rows.push(Row {
                    node,
                    quantity,
                    index: i,
                    bound: lo[i],
                    upper: false,
                });
            }
            if hi[i].is_finite_value() {
                rows.push(Row {
                    node,
                    quantity,
                    index: i,
                    bound: hi[i],
                    upper: true,
                });
            }
        }
    };
    for node in 0..=intervals {
        push(node, Quantity::State, &set.state_lower, &set.state_upper);
        if node < intervals {
            push(node, Quantity::Output, &set.output_lower, &set.output_upper);
            push(node, Quantity::Noise, &set.noise_lower, &set.noise_upper);
        }
    }
    rows
}

/// Shooting Jacobian of a linear model; independent of the decision vector,
/// so it is shared by every problem on the same window length.
#[derive(Debug)]
struct LinearCache<T: Real> {
    intervals: usize,
    /// Node sensitivities, `(N+1)·n_a × d`.
    sensitivities: DMatrix<T>,
    residual_jacobian: DMatrix<T>,
    gram: DMatrix<T>,
}

/// The FIE problem over one record (or one dMHE window).
pub struct FieProblem<'a, T: Real> {
    model: &'a AugmentedModel<T>,
    grid: Grid<T>,
    measurements: &'a [DVector<T>],
    inputs: PiecewiseSignal<T>,
    prior: DVector<T>,
    weights: Weights<T>,
    rows: Vec<Row<T>>,
    lower: DVector<T>,
    upper: DVector<T>,
    scheme: FdScheme,
    cache: Option<Arc<LinearCache<T>>>,
}

/// Builds the FIE problem for `N = measurements.len()` intervals; sample `k`
/// is compared with the output at node `k`.
pub fn build_fie<'a, T: Real>(
    model: &'a AugmentedModel<T>,
    measurements: &'a [DVector<T>],
    inputs: Option<&PiecewiseSignal<T>>,
    config: &EstimationConfig<T>,
    prior: &DVector<T>,
) -> Result<FieProblem<'a, T>> {
    config.validate(model)?;
    let n = measurements.len();
    if n == 0 {
        return Err(Error::WindowTooShort { needed: 1, got: 0 });
    }
    if prior.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "prior state",
            expected: model.state_dim(),
            got: prior.len(),
        });
    }
    if let Some(bad) = measurements.iter().find(|y| y.len() != model.output_dim()) {
        return Err(Error::DimensionMismatch {
            context: "measurement",
            expected: model.output_dim(),
            got: bad.len(),
        });
    }
    let inputs = match inputs {
        Some(u) => {
            if u.len() != n {
                return Err(Error::GridMismatch(format!(
                    "{} input intervals for {n} measurements",
                    u.len()
                )));
            }
            u.clone()
        }
        None => PiecewiseSignal::zeros(n, model.input_dim()),
    };
    let na = model.state_dim();
    let nw = model.disturbance_dim();
    let set = &config.constraints;
    let mut lower = DVector::from_element(na + n * nw, T::neg_infinity());
    let mut upper = DVector::from_element(na + n * nw, T::infinity());
    for i in 0..na {
        lower[i] = set.initial_lower[i];
        upper[i] = set.initial_upper[i];
    }
    for k in 0..n {
        for j in 0..nw {
            lower[na + k * nw + j] = set.disturbance_lower[j];
            upper[na + k * nw + j] = set.disturbance_upper[j];
        }
    }
    Ok(FieProblem {
        model,
        grid: config.grid(n)?,
        measurements,
        inputs,
        prior: prior.clone(),
        weights: Weights::new(config)?,
        rows: constraint_rows(set, n),
        lower,
        upper,
        scheme: config.fd_scheme,
        cache: None,
    })
}

impl<'a, T: Real> FieProblem<'a, T> {
    pub fn intervals(&self) -> usize {
        self.grid.intervals
    }

    /// Initial guess: the prior projected onto the box, zero disturbances.
    pub fn initial_guess(&self) -> DVector<T> {
        let mut z = DVector::zeros(self.lower.len());
        z.rows_mut(0, self.prior.len()).copy_from(&self.prior);
        z.zip_zip_apply(&self.lower, &self.upper, |v, l, h| *v = v.max(l).min(h));
        z
    }

    /// Splits `z` into the initial state and the disturbance signal.
    pub fn decode(&self, z: &DVector<T>) -> (DVector<T>, PiecewiseSignal<T>) {
        let na = self.model.state_dim();
        let nw = self.model.disturbance_dim();
        let x0 = z.rows(0, na).into_owned();
        let w = (0..self.grid.intervals)
            .map(|k| z.rows(na + k * nw, nw).into_owned())
            .collect();
        (
            x0,
            PiecewiseSignal {
                dim: nw,
                values: w,
            },
        )
    }

    pub fn trajectory(&self, z: &DVector<T>) -> Result<Vec<DVector<T>>> {
        let (x0, w) = self.decode(z);
        simulate(self.model, &x0, &self.inputs, &w, &self.grid)
    }

    /// Enables the constant-Jacobian shortcut when the augmented model is linear.
    fn with_linear_cache(mut self, cache: Option<Arc<LinearCache<T>>>) -> Self {
        self.cache = cache.filter(|c| c.intervals == self.grid.intervals);
        self
    }

    fn build_linear_cache(&self) -> Result<Option<Arc<LinearCache<T>>>> {
        if self.model.linear_form().is_none() {
            return Ok(None);
        }
        let na = self.model.state_dim();
        let zero_u = PiecewiseSignal::zeros(self.grid.intervals, self.model.input_dim());
        let zero_w = PiecewiseSignal::zeros(self.grid.intervals, self.model.disturbance_dim());
        let sens = trajectory_jacobians(
            self.model,
            &DVector::zeros(na),
            &zero_u,
            &zero_w,
            &self.grid,
            self.scheme,
        )?;
        let states = sens.states.clone();
        let residual_jacobian = self.residual_jacobian(&sens.jacobian, &states);
        let gram = residual_jacobian.tr_mul(&residual_jacobian);
        Ok(Some(Arc::new(LinearCache {
            intervals: self.grid.intervals,
            sensitivities: sens.jacobian,
            residual_jacobian,
            gram,
        })))
    }

    fn output_at(&self, node: usize, x: &DVector<T>) -> DVector<T> {
        let mut y = DVector::zeros(self.model.output_dim());
        let u = if node < self.inputs.len() {
            self.inputs.values[node].as_slice()
        } else {
            &[]
        };
        self.model.output_into(x.as_slice(), u, y.as_mut_slice());
        y
    }

    /// Central-difference output Jacobian at node `node`.
    fn output_jacobian(&self, node: usize, x: &DVector<T>) -> DMatrix<T> {
        let p = self.model.output_dim();
        let mut jac = DMatrix::zeros(p, x.len());
        let mut xp = x.clone();
        for j in 0..x.len() {
            let h = T::fd_step() * (T::one() + x[j].abs());
            xp[j] = x[j] + h;
            let yp = self.output_at(node, &xp);
            xp[j] = x[j] - h;
            let ym = self.output_at(node, &xp);
            xp[j] = x[j];
            jac.set_column(j, &((yp - ym) / (T::lit(2.0) * h)));
        }
        jac
    }

    fn residuals(&self, z: &DVector<T>, states: &[DVector<T>]) -> DVector<T> {
        let na = self.model.state_dim();
        let nw = self.model.disturbance_dim();
        let p = self.model.output_dim();
        let n = self.grid.intervals;
        let mut r = DVector::zeros(na + n * nw + n * p);
        let dx = z.rows(0, na) - &self.prior;
        r.rows_mut(0, na).copy_from(&(&self.weights.prior * dx));
        for k in 0..n {
            let w = z.rows(na + k * nw, nw);
            r.rows_mut(na + k * nw, nw)
                .copy_from(&(&self.weights.disturbance * w));
        }
        let off = na + n * nw;
        for k in 0..n {
            let e = &self.measurements[k] - self.output_at(k, &states[k]);
            r.rows_mut(off + k * p, p)
                .copy_from(&(&self.weights.measurement * e));
        }
        r
    }

    fn residual_jacobian(&self, sens: &DMatrix<T>, states: &[DVector<T>]) -> DMatrix<T> {
        let na = self.model.state_dim();
        let nw = self.model.disturbance_dim();
        let p = self.model.output_dim();
        let n = self.grid.intervals;
        let d = na + n * nw;
        let mut jac = DMatrix::zeros(na + n * nw + n * p, d);
        jac.view_mut((0, 0), (na, na)).copy_from(&self.weights.prior);
        for k in 0..n {
            jac.view_mut((na + k * nw, na + k * nw), (nw, nw))
                .copy_from(&self.weights.disturbance);
        }
        let off = na + n * nw;
        for k in 0..n {
            let h = -(&self.weights.measurement * self.output_jacobian(k, &states[k]));
            // Node k depends only on χ and w_0 … w_{k-1}.
            let cols = na + k * nw;
            let block = sens.view((k * na, 0), (na, cols));
            jac.view_mut((off + k * p, 0), (p, cols))
                .copy_from(&(h * block));
        }
        jac
    }

    fn constraint_values(&self, states: &[DVector<T>]) -> DVector<T> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|row| {
                let value = match row.quantity {
                    Quantity::State => states[row.node][row.index],
                    Quantity::Output => self.output_at(row.node, &states[row.node])[row.index],
                    Quantity::Noise => {
                        self.measurements[row.node][row.index]
                            - self.output_at(row.node, &states[row.node])[row.index]
                    }
                };
                if row.upper {
                    value - row.bound
                } else {
                    row.bound - value
                }
            }),
        )
    }

    fn constraint_rows_jacobian(&self, sens: &DMatrix<T>, states: &[DVector<T>]) -> DMatrix<T> {
        let na = self.model.state_dim();
        let d = sens.ncols();
        let mut jac = DMatrix::zeros(self.rows.len(), d);
        for (i, row) in self.rows.iter().enumerate() {
            let block = sens.view((row.node * na, 0), (na, d));
            let grad = match row.quantity {
                Quantity::State => block.row(row.index).into_owned(),
                Quantity::Output | Quantity::Noise => {
                    let h = self.output_jacobian(row.node, &states[row.node]);
                    let g = h.row(row.index) * block;
                    if row.quantity == Quantity::Noise {
                        -g
                    } else {
                        g
                    }
                }
            };
            let sign = if row.upper { T::one() } else { -T::one() };
            jac.row_mut(i).copy_from(&(grad * sign));
        }
        jac
    }

    fn evaluate(&self, z: &DVector<T>, jacobian: bool) -> Result<LeastSquaresEval<T>> {
        let (x0, w) = self.decode(z);
        if !jacobian {
            let states = simulate(self.model, &x0, &self.inputs, &w, &self.grid)?;
            return Ok(LeastSquaresEval {
                residuals: self.residuals(z, &states),
                residual_jacobian: None,
                residual_gram: None,
                constraints: self.constraint_values(&states),
                constraint_jacobian: None,
            });
        }
        if let Some(cache) = &self.cache {
            let states = simulate(self.model, &x0, &self.inputs, &w, &self.grid)?;
            return Ok(LeastSquaresEval {
                residuals: self.residuals(z, &states),
                residual_jacobian: Some(cache.residual_jacobian.clone()),
                residual_gram: Some(cache.gram.clone()),
                constraints: self.constraint_values(&states),
                constraint_jacobian: Some(self.constraint_rows_jacobian(&cache.sensitivities, &states)),
            });
        }
        let sens = trajectory_jacobians(self.model, &x0, &self.inputs, &w, &self.grid, self.scheme)?;
        let states = &sens.states;
        Ok(LeastSquaresEval {
            residuals: self.residuals(z, states),
            residual_jacobian: Some(self.residual_jacobian(&sens.jacobian, states)),
            residual_gram: None,
            constraints: self.constraint_values(states),
            constraint_jacobian: Some(self.constraint_rows_jacobian(&sens.jacobian, states)),
        })
    }
}

impl<T: Real> NlpProblem<T> for FieProblem<'_, T> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn lower(&self) -> &DVector<T> {
        &self.lower
    }

    fn upper(&self) -> &DVector<T> {
        &self.upper
    }

    fn objective(&self, z: &DVector<T>) -> Result<T> {
        Ok(self.evaluate(z, false)?.residuals.norm_squared())
    }

    fn gradient(&self, z: &DVector<T>) -> Result<DVector<T>> {
        let ls = self.evaluate(z, true)?;
        Ok(ls.residual_jacobian.expect("jacobian requested").tr_mul(&ls.residuals) * T::lit(2.0))
    }

    fn constraint_count(&self) -> usize {
        self.rows.len()
    }

    fn constraints(&self, z: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.evaluate(z, false)?.constraints)
    }

    fn constraint_jacobian(&self, z: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.evaluate(z, true)?.constraint_jacobian.expect("jacobian requested"))
    }

    fn least_squares(&self, z: &DVector<T>, jacobian: bool) -> Option<Result<LeastSquaresEval<T>>> {
        Some(self.evaluate(z, jacobian))
    }
}

/// Outcome of one window solve.
#[derive(Debug, Clone)]
pub struct WindowReport<T: Real> {
    /// Node index of the window end `t_i`.
    pub end_node: usize,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub objective: T,
    pub max_violation: T,
}

impl<T: Real> WindowReport<T> {
    fn from_solve(end_node: usize, report: &SolveReport<T>) -> Self {
        Self {
            end_node,
            converged: report.converged,
            termination: report.termination,
            iterations: report.iterations,
            objective: report.objective,
            max_violation: report.max_violation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateResult<T: Real> {
    pub times: Vec<T>,
    /// `x̂(t_i)` at every node.
    pub states: Vec<DVector<T>>,
    /// `ℓ̂(t_i) = C_gp x̂_gp(t_i)`.
    pub latent_force: Vec<T>,
    /// `w̄*` per interval.
    pub disturbances: Vec<DVector<T>>,
    pub objective: T,
    /// All windows converged.
    pub converged: bool,
    pub reports: Vec<WindowReport<T>>,
    /// θ̂ at every node, for hyper-augmented models.
    pub hyper_trace: Option<Vec<T>>,
}

impl<T: Real> EstimateResult<T> {
    pub fn max_violation(&self) -> T {
        self.reports
            .iter()
            .fold(T::zero(), |a, r| a.max(r.max_violation))
    }

    pub fn total_iterations(&self) -> usize {
        self.reports.iter().map(|r| r.iterations).sum()
    }

    fn assemble(
        model: &AugmentedModel<T>,
        grid: &Grid<T>,
        states: Vec<DVector<T>>,
        disturbances: Vec<DVector<T>>,
        objective: T,
        reports: Vec<WindowReport<T>>,
    ) -> Self {
        let gp = model.gp();
        let n = model.physical_dim();
        let latent_force = states
            .iter()
            .map(|x| (&gp.c * x.rows(n, gp.dim()))[0])
            .collect();
        let hyper_trace = model
            .hyper_index()
            .map(|i| states.iter().map(|x| x[i]).collect());
        Self {
            times: grid.times(),
            converged: reports.iter().all(|r| r.converged),
            states,
            latent_force,
            disturbances,
            objective,
            reports,
            hyper_trace,
        }
    }
}

fn split_node_measurements<T: Real>(measurements: &[DVector<T>]) -> Result<&[DVector<T>]> {
    if measurements.len() < 2 {
        return Err(Error::WindowTooShort {
            needed: 2,
            got: measurements.len(),
        });
    }
    Ok(&measurements[..measurements.len() - 1])
}

/// Full information estimate over the whole record.
///
/// `measurements` holds one sample per node `t_0 … t_N`; the final sample
/// lies at the right end of the last interval and does not enter the cost.
pub fn estimate_fie<T: Real>(
    model: &AugmentedModel<T>,
    measurements: &[DVector<T>],
    inputs: Option<&PiecewiseSignal<T>>,
    config: &EstimationConfig<T>,
    prior: &DVector<T>,
) -> Result<EstimateResult<T>> {
    let samples = split_node_measurements(measurements)?;
    let problem = build_fie(model, samples, inputs, config, prior)?;
    let cache = problem.build_linear_cache()?;
    let problem = problem.with_linear_cache(cache);
    let report = solve(&problem, &problem.initial_guess(), &config.solver)?;
    if !report.converged {
        log::warn!("FIE solve ended as {}", report.termination.as_str());
    }
    let states = problem.trajectory(&report.z)?;
    let (_, w) = problem.decode(&report.z);
    Ok(EstimateResult::assemble(
        model,
        &problem.grid,
        states,
        w.values,
        report.objective,
        vec![WindowReport::from_solve(problem.intervals(), &report)],
    ))
}

/// Window signals on `[t_i − M, t_i)`: intervals `end − horizon .. end` of
/// `inputs` and the samples at the same nodes.
pub fn extract_window<'a, T: Real>(
    inputs: &PiecewiseSignal<T>,
    samples: &'a [DVector<T>],
    end: usize,
    horizon: usize,
) -> Result<(PiecewiseSignal<T>, &'a [DVector<T>])> {
    if end < horizon || horizon == 0 {
        return Err(Error::WindowBeforeHorizon { end, horizon });
    }
    if end > samples.len() || end > inputs.len() {
        return Err(Error::WindowTooShort {
            needed: end,
            got: samples.len().min(inputs.len()),
        });
    }
    let start = end - horizon;
    Ok((inputs.slice(start, horizon), &samples[start..end]))
}

/// Which window supplies the estimate at node `node`, as
/// `(window end node, local index)`.
pub fn stitch_source(node: usize, horizon: usize, intervals: usize) -> (usize, usize) {
    let half = horizon / 2;
    if node <= half {
        (horizon, node)
    } else if node > intervals - half {
        (intervals, node + horizon - intervals)
    } else {
        (node + half, half)
    }
}

/// Delayed moving horizon estimate.
///
/// Windows end at nodes `M, M+1, …, N`. Each window's prior is the already
/// fixed estimate at its first node; it fixes the estimate at its middle
/// node. The head `[0, M/2]` comes from the first window and nodes after
/// `N − M/2` from the last.
pub fn estimate_dmhe<T: Real>(
    model: &AugmentedModel<T>,
    measurements: &[DVector<T>],
    inputs: Option<&PiecewiseSignal<T>>,
    config: &EstimationConfig<T>,
    prior: &DVector<T>,
) -> Result<EstimateResult<T>> {
    config.validate(model)?;
    let samples = split_node_measurements(measurements)?;
    let n = samples.len();
    let m = config.horizon_samples;
    if m == 0 || m > n {
        return Err(Error::InvalidConfig(format!(
            "horizon of {m} samples must lie in [2, {n}]"
        )));
    }
    let inputs = match inputs {
        Some(u) => u.clone(),
        None => PiecewiseSignal::zeros(n, model.input_dim()),
    };
    let grid = config.grid(n)?;
    let na = model.state_dim();
    let nw = model.disturbance_dim();

    let mut states: Vec<Option<DVector<T>>> = vec![None; n + 1];
    let mut disturbances: Vec<Option<DVector<T>>> = vec![None; n];
    let mut reports = Vec::with_capacity(n - m + 1);
    let mut cache = None;
    let mut warm: Option<DVector<T>> = None;
    let mut objective = T::zero();

    for end in m..=n {
        let start = end - m;
        let (u_win, y_win) = extract_window(&inputs, samples, end, m)?;
        let window_prior = if start == 0 {
            prior.clone()
        } else {
            states[start].clone().expect("prior node fixed by an earlier window")
        };
        let problem = build_fie(model, y_win, Some(&u_win), config, &window_prior)?;
        if cache.is_none() {
            cache = problem.build_linear_cache()?;
        }
        let problem = problem.with_linear_cache(cache.clone());
        let guess = match warm.take() {
            Some(previous) => shift_guess(&previous, &problem, na, nw)?,
            None => problem.initial_guess(),
        };
        let report = match solve(&problem, &guess, &config.solver) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("window ending at node {end} failed from warm start ({e}); retrying cold");
                solve(&problem, &problem.initial_guess(), &config.solver)?
            }
        };
        if !report.converged {
            log::warn!(
                "window ending at node {end}: {} after {} iterations",
                report.termination.as_str(),
                report.iterations
            );
        }
        let traj = problem.trajectory(&report.z)?;
        let (_, w) = problem.decode(&report.z);
        for (local, x) in traj.iter().enumerate() {
            let node = start + local;
            if stitch_source(node, m, n).0 == end {
                states[node] = Some(x.clone());
                if node < n {
                    disturbances[node] = Some(w.values[local.min(m - 1)].clone());
                }
            }
        }
        if end == n {
            objective = report.objective;
        }
        reports.push(WindowReport::from_solve(end, &report));
        warm = Some(DVector::from_iterator(
            na + m * nw,
            traj[1]
                .iter()
                .copied()
                .chain(report.z.rows(na, m * nw).iter().copied()),
        ));
    }

    let states: Vec<DVector<T>> = states
        .into_iter()
        .map(|s| s.expect("every node stitched"))
        .collect();
    let disturbances = disturbances
        .into_iter()
        .map(|w| w.expect("every interval stitched"))
        .collect();
    Ok(EstimateResult::assemble(model, &grid, states, disturbances, objective, reports))
}

/// Previous window's solution advanced by one sample: χ from its second node,
/// disturbances shifted left with a zero appended.
fn shift_guess<T: Real>(previous: &DVector<T>, problem: &FieProblem<'_, T>, na: usize, nw: usize) -> Result<DVector<T>> {
    let d = problem.dim();
    let mut z = DVector::zeros(d);
    z.rows_mut(0, na).copy_from(&previous.rows(0, na));
    let tail = d - na - nw;
    z.rows_mut(na, tail)
        .copy_from(&previous.rows(na + nw, tail));
    z.zip_zip_apply(problem.lower(), problem.upper(), |v, l, h| *v = v.max(l).min(h));
    Ok(z)
}

/// Settings for learning the length scale as an extra state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperLearning<T: Real> {
    /// Initial length-scale guess `θ̂(0)`.
    pub initial_length_scale: T,
    pub q_theta: T,
    pub p_theta: T,
    pub theta_min: T,
    pub theta_max: T,
    pub mapping: HyperMapping,
}

impl<T: Real> HyperLearning<T> {
    pub fn new(initial_length_scale: T) -> Self {
        Self {
            initial_length_scale,
            q_theta: T::one(),
            p_theta: T::lit(1e-2),
            theta_min: T::lit(crate::dynamics::DEFAULT_THETA_MIN),
            theta_max: T::infinity(),
            mapping: HyperMapping::LengthScale,
        }
    }

    /// θ corresponding to a length scale under this mapping.
    pub fn theta_for(&self, model: &AugmentedModel<T>, length_scale: T) -> T {
        match self.mapping {
            HyperMapping::LengthScale => length_scale,
            HyperMapping::Rate => (T::lit(2.0) * model.prior().nu()).sqrt() / length_scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedHyperparameter<T: Real> {
    pub length_scale: T,
    /// θ̂ at the last node of the learn window.
    pub theta: T,
    /// Model with the length scale frozen.
    pub model: AugmentedModel<T>,
    /// Estimate of the hyper-augmented model over the learn window.
    pub estimate: EstimateResult<T>,
    /// Gauss–Newton standard error of θ̂ relative to θ̂.
    pub relative_std_error: T,
    pub low_confidence: bool,
}

fn block_diag<T: Real>(m: &DMatrix<T>, extra: T) -> DMatrix<T> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(m);
    out[(n, n)] = extra;
    out
}

/// Learns the length scale on the first `config.learn_window` samples with
/// the hyper-augmented model, then freezes it at the final θ̂.
pub fn learn_then_freeze_hyperparameter<T: Real>(
    model: &AugmentedModel<T>,
    measurements: &[DVector<T>],
    inputs: Option<&PiecewiseSignal<T>>,
    config: &EstimationConfig<T>,
    prior: &DVector<T>,
    learning: &HyperLearning<T>,
) -> Result<LearnedHyperparameter<T>> {
    let window = config.learn_window;
    if window < 2 || window + 1 > measurements.len() {
        return Err(Error::WindowTooShort {
            needed: window.max(2) + 1,
            got: measurements.len(),
        });
    }
    if !(learning.theta_max > learning.theta_min) {
        return Err(Error::InvalidConfig("theta_max must exceed theta_min".into()));
    }
    let hyper_model = augment_hyperparameter_with(
        model,
        HyperState {
            theta_min: learning.theta_min,
            mapping: learning.mapping,
        },
    )?;
    let theta_index = hyper_model.hyper_index().expect("hyper-augmented");
    let mut constraints = config.constraints.extend_for_hyper(learning.theta_min);
    constraints.state_upper[theta_index] = learning.theta_max;
    constraints.initial_upper[theta_index] = learning.theta_max;
    let hyper_config = EstimationConfig {
        q: block_diag(&config.q, learning.q_theta),
        p: block_diag(&config.p, learning.p_theta),
        constraints,
        ..config.clone()
    };
    let theta0 = learning
        .theta_for(model, learning.initial_length_scale)
        .max(learning.theta_min)
        .min(learning.theta_max);
    let hyper_prior = prior.clone().push(theta0);
    let u = inputs.map(|u| u.slice(0, window));
    let samples = &measurements[..=window];
    let estimate = estimate_fie(&hyper_model, samples, u.as_ref(), &hyper_config, &hyper_prior)?;
    let last = &estimate.states[window];
    let theta = last[theta_index].max(learning.theta_min).min(learning.theta_max);
    let length_scale = hyper_model.length_scale_at(last.as_slice());

    // θ_N = χ_θ + δ Σ w_θ,k exactly, so its sensitivity row is known.
    let problem = build_fie(&hyper_model, &samples[..window], u.as_ref(), &hyper_config, &hyper_prior)?;
    let na = hyper_model.state_dim();
    let nw = hyper_model.disturbance_dim();
    let mut z = DVector::zeros(problem.dim());
    z.rows_mut(0, na).copy_from(&estimate.states[0]);
    for (k, w) in estimate.disturbances.iter().enumerate() {
        z.rows_mut(na + k * nw, nw).copy_from(w);
    }
    let ls = problem.evaluate(&z, true)?;
    let jr = ls.residual_jacobian.expect("jacobian requested");
    let mut info = jr.tr_mul(&jr) * T::lit(2.0);
    let ridge = T::lit(1e-12) * (T::one() + info.diagonal().amax());
    for i in 0..info.nrows() {
        info[(i, i)] += ridge;
    }
    let mut g = DVector::zeros(problem.dim());
    g[theta_index] = T::one();
    for k in 0..window {
        g[na + k * nw + (nw - 1)] = config.step;
    }
    let relative_std_error = match info.cholesky() {
        Some(ch) => g.dot(&ch.solve(&g)).max(T::zero()).sqrt() / theta.abs().max(learning.theta_min),
        None => T::infinity(),
    };
    let low_confidence = !(relative_std_error <= T::one()) || !estimate.converged;
    if low_confidence {
        log::warn!("length scale {length_scale} learned with low confidence (relative SE {relative_std_error})");
    }
    Ok(LearnedHyperparameter {
        length_scale,
        theta,
        model: model.with_length_scale(length_scale)?,
        estimate,
        relative_std_error,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{augment, ContinuousModel, LinearModel};
    use crate::gp_ssm::GpPrior;
    use crate::integrator::simulate;

    fn first_order(length_scale: f64) -> AugmentedModel<f64> {
        let lin = LinearModel::new(
            DMatrix::from_element(1, 1, -0.6),
            DMatrix::zeros(1, 0),
            DVector::from_element(1, 0.25),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        augment(ContinuousModel::new(lin), GpPrior::new(1, length_scale, 1.0).unwrap()).unwrap()
    }

    fn config(model: &AugmentedModel<f64>, step: f64) -> EstimationConfig<f64> {
        let na = model.state_dim();
        EstimationConfig::new(
            model,
            DMatrix::identity(na, na) * 10.0,
            DMatrix::identity(1, 1) * 100.0,
            DMatrix::identity(na, na),
            step,
        )
        .unwrap()
    }

    fn noiseless(model: &AugmentedModel<f64>, x0: &DVector<f64>, n: usize, step: f64) -> Vec<DVector<f64>> {
        let grid = Grid::new(0.0, step, n).unwrap();
        let states = simulate(
            model,
            x0,
            &PiecewiseSignal::zeros(n, 0),
            &PiecewiseSignal::zeros(n, model.disturbance_dim()),
            &grid,
        )
        .unwrap();
        states
            .iter()
            .map(|x| model.eval_output(x, &DVector::zeros(0)).unwrap())
            .collect()
    }

    #[test]
    fn exact_fit_recovers_truth() {
        let model = first_order(1.0);
        let x0 = DVector::from_vec(vec![0.3, 0.8, -0.2]);
        let y = noiseless(&model, &x0, 30, 0.05);
        let cfg = config(&model, 0.05);
        let est = estimate_fie(&model, &y, None, &cfg, &x0).unwrap();
        assert!(est.converged);
        assert!(est.objective < 1e-12, "{}", est.objective);
        assert!((&est.states[0] - &x0).amax() < 1e-6);
        assert!(est.disturbances.iter().all(|w| w.amax() < 1e-6));
    }

    #[test]
    fn objective_matches_resimulation() {
        let model = first_order(0.7);
        let x0 = DVector::from_vec(vec![0.0, 0.5, 0.0]);
        let mut y = noiseless(&model, &x0, 20, 0.05);
        for (k, v) in y.iter_mut().enumerate() {
            v[0] += 0.01 * ((k * 7 % 5) as f64 - 2.0);
        }
        let cfg = config(&model, 0.05);
        let prior = DVector::from_vec(vec![0.1, 0.0, 0.0]);
        let est = estimate_fie(&model, &y, None, &cfg, &prior).unwrap();

        let grid = Grid::with_substeps(0.0, 0.05, 20, cfg.substeps).unwrap();
        let w = PiecewiseSignal::new(3, est.disturbances.clone()).unwrap();
        let states = simulate(&model, &est.states[0], &PiecewiseSignal::zeros(20, 0), &w, &grid).unwrap();
        let dp = &est.states[0] - &prior;
        let mut cost = 2.0 * (dp.transpose() * &cfg.p * &dp)[0];
        for wk in &est.disturbances {
            cost += 2.0 * 0.05 * (wk.transpose() * &cfg.q * wk)[0];
        }
        for k in 0..20 {
            let e = y[k][0] - states[k][0];
            cost += e * cfg.r[(0, 0)] * e;
        }
        assert!((cost - est.objective).abs() <= 1e-9 * (1.0 + cost), "{cost} vs {}", est.objective);
        for (a, b) in states.iter().zip(est.states.iter()) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn dominant_prior_pins_initial_state() {
        let model = first_order(1.0);
        let x0 = DVector::from_vec(vec![0.2, 0.1, 0.0]);
        let mut y = noiseless(&model, &x0, 15, 0.05);
        for v in y.iter_mut() {
            v[0] += 0.05;
        }
        let mut cfg = config(&model, 0.05);
        cfg.p = DMatrix::identity(3, 3) * 1e10;
        let est = estimate_fie(&model, &y, None, &cfg, &x0).unwrap();
        assert!((&est.states[0] - &x0).amax() < 1e-4);
    }

    #[test]
    fn non_negative_force_constraint_holds() {
        let model = first_order(0.5);
        let x0 = DVector::from_vec(vec![0.5, 0.0, 0.0]);
        let mut y = noiseless(&model, &x0, 40, 0.05);
        for (k, v) in y.iter_mut().enumerate() {
            v[0] -= 0.02 * k as f64;
        }
        let mut cfg = config(&model, 0.05);
        cfg.constraints = cfg.constraints.with_state_bounds(1, 0.0, f64::INFINITY);
        let est = estimate_fie(&model, &y, None, &cfg, &x0).unwrap();
        assert!(est.latent_force.iter().all(|l| *l >= -1e-6), "{:?}", est.latent_force);
        let mut free_cfg = config(&model, 0.05);
        free_cfg.constraints = ConstraintSet::for_model(&model);
        let free = estimate_fie(&model, &y, None, &free_cfg, &x0).unwrap();
        assert!(free.latent_force.iter().any(|l| *l < -1e-3));
    }

    #[test]
    fn window_extraction() {
        let y: Vec<DVector<f64>> = (0..10).map(|k| DVector::from_element(1, k as f64)).collect();
        let u = PiecewiseSignal::new(1, y.clone()).unwrap();
        let (uw, yw) = extract_window(&u, &y, 4, 4).unwrap();
        assert_eq!(yw.len(), 4);
        assert_eq!(yw[0][0], 0.0);
        assert_eq!(uw.values[3][0], 3.0);
        let (_, shifted) = extract_window(&u, &y, 5, 4).unwrap();
        assert_eq!(shifted[0][0], 1.0);
        assert!(matches!(
            extract_window(&u, &y, 3, 4),
            Err(Error::WindowBeforeHorizon { end: 3, horizon: 4 })
        ));

        // Interior samples appear in exactly M windows.
        let (n, m) = (10, 4);
        let mut count = vec![0; n];
        for end in m..=n {
            for k in end - m..end {
                count[k] += 1;
            }
        }
        assert!(count[m - 1..=n - m].iter().all(|&c| c == m));
    }

    #[test]
    fn stitching_assigns_each_node_once() {
        let (m, n) = (60, 1500);
        assert_eq!(stitch_source(30, m, n), (60, 30));
        assert_eq!(stitch_source(0, m, n), (60, 0));
        assert_eq!(stitch_source(31, m, n), (61, 30));
        assert_eq!(stitch_source(n - 30, m, n), (n, 30));
        assert_eq!(stitch_source(n - 29, m, n), (n, 31));
        assert_eq!(stitch_source(n, m, n), (n, 60));
        for node in 0..=n {
            let (end, local) = stitch_source(node, m, n);
            assert!(end >= m && end <= n);
            assert_eq!(end - m + local, node);
        }
    }

    #[test]
    fn dmhe_with_full_horizon_equals_fie() {
        let model = first_order(1.0);
        let x0 = DVector::from_vec(vec![0.1, 0.4, 0.0]);
        let mut y = noiseless(&model, &x0, 20, 0.05);
        for (k, v) in y.iter_mut().enumerate() {
            v[0] += 0.01 * ((k % 3) as f64 - 1.0);
        }
        let mut cfg = config(&model, 0.05);
        cfg.horizon_samples = 20;
        let prior = DVector::zeros(3);
        let fie = estimate_fie(&model, &y, None, &cfg, &prior).unwrap();
        let mhe = estimate_dmhe(&model, &y, None, &cfg, &prior).unwrap();
        assert_eq!(mhe.reports.len(), 1);
        for (a, b) in fie.states.iter().zip(mhe.states.iter()) {
            assert!((a - b).amax() <= 1e-8);
        }
    }

    #[test]
    fn dmhe_covers_every_node() {
        let model = first_order(1.0);
        let x0 = DVector::from_vec(vec![0.1, 0.4, 0.0]);
        let y = noiseless(&model, &x0, 30, 0.05);
        let mut cfg = config(&model, 0.05);
        cfg.horizon_samples = 8;
        let est = estimate_dmhe(&model, &y, None, &cfg, &x0).unwrap();
        assert_eq!(est.states.len(), 31);
        assert_eq!(est.reports.len(), 23);
        assert_eq!(est.reports[0].end_node, 8);
        cfg.horizon_samples = 7;
        assert!(estimate_dmhe(&model, &y, None, &cfg, &x0).is_err());
    }

    #[test]
    fn learned_theta_respects_bounds() {
        let model = first_order(1.0);
        let x0 = DVector::from_vec(vec![0.0, 0.5, 0.0]);
        let y = noiseless(&model, &x0, 30, 0.05);
        let mut cfg = config(&model, 0.05);
        cfg.learn_window = 20;
        let learning = HyperLearning {
            theta_min: 0.8,
            theta_max: 1.2,
            ..HyperLearning::new(3.0)
        };
        let learned = learn_then_freeze_hyperparameter(&model, &y, None, &cfg, &x0, &learning).unwrap();
        assert!(learned.length_scale >= 0.8 - 1e-9 && learned.length_scale <= 1.2 + 1e-9);
        assert!(!learned.model.is_hyper_augmented());
        assert_eq!(learned.estimate.states.len(), 21);
        cfg.learn_window = 40;
        assert!(matches!(
            learn_then_freeze_hyperparameter(&model, &y, None, &cfg, &x0, &learning),
            Err(Error::WindowTooShort { .. })
        ));
    }

    #[test]
    fn weights_must_be_positive_definite() {
        let model = first_order(1.0);
        let err = EstimationConfig::new(
            &model,
            DMatrix::identity(3, 3),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(3, 3),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite("R")));
    }
}
