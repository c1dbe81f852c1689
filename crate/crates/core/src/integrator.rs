//! Fixed-step RK4 integration of augmented dynamics with piecewise-constant
//! inputs and disturbances, plus finite-difference trajectory sensitivities.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{AugmentedModel, ContinuousModel};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Equidistant sampling grid `t_i = t0 + i δ`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<T: Real> {
    pub t0: T,
    pub step: T,
    pub intervals: usize,
    /// RK4 substeps per interval.
    pub substeps: usize,
}

impl<T: Real> Grid<T> {
    pub fn new(t0: T, step: T, intervals: usize) -> Result<Self> {
        Self::with_substeps(t0, step, intervals, default_substeps(step))
    }

    pub fn with_substeps(t0: T, step: T, intervals: usize, substeps: usize) -> Result<Self> {
        if !(step > T::zero()) || !step.is_finite_value() {
            return Err(Error::InvalidConfig(format!("sampling step must be positive, got {step}")));
        }
        if intervals == 0 {
            return Err(Error::InvalidConfig("grid needs at least one interval".into()));
        }
        if substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be >= 1".into()));
        }
        Ok(Self {
            t0,
            step,
            intervals,
            substeps,
        })
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn time(&self, node: usize) -> T {
        self.t0 + self.step * T::from_usize_lossy(node)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.nodes()).map(|i| self.time(i)).collect()
    }

    pub fn horizon(&self) -> T {
        self.step * T::from_usize_lossy(self.intervals)
    }

    /// Sub-grid of `intervals` intervals starting at node `start`.
    pub fn window(&self, start: usize, intervals: usize) -> Result<Self> {
        Self::with_substeps(self.time(start), self.step, intervals, self.substeps)
    }

    /// Node index of `t`, or `None` if `t` is off the grid.
    pub fn node_of(&self, t: T) -> Option<usize> {
        let k = ((t - self.t0) / self.step).round();
        let idx = k.to_i64()?;
        if idx < 0 || idx as usize > self.intervals {
            return None;
        }
        let tol = T::lit(1e-9) * (T::one() + t.abs());
        ((self.time(idx as usize) - t).abs() <= tol).then_some(idx as usize)
    }
}

/// 1 substep for `δ ≤ 0.02`, else 4.
pub fn default_substeps<T: Real>(step: T) -> usize {
    if step <= T::lit(0.02) {
        1
    } else {
        4
    }
}

/// One constant vector per grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSignal<T: Real> {
    pub dim: usize,
    pub values: Vec<DVector<T>>,
}

impl<T: Real> PiecewiseSignal<T> {
    pub fn zeros(intervals: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![DVector::zeros(dim); intervals],
        }
    }

    pub fn new(dim: usize, values: Vec<DVector<T>>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "piecewise signal value",
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Intervals `start..start + len`, re-indexed from zero.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            dim: self.dim,
            values: self.values[start..start + len].to_vec(),
        }
    }

    fn check(&self, intervals: usize, dim: usize, context: &'static str) -> Result<()> {
        if self.values.len() != intervals {
            return Err(Error::GridMismatch(format!(
                "{context} has {} intervals, grid has {intervals}",
                self.values.len()
            )));
        }
        if self.dim != dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: dim,
                got: self.dim,
            });
        }
        Ok(())
    }
}

/// Classical RK4 step with `u` and `w_a` held constant.
pub fn rk4_step<T: Real>(
    model: &AugmentedModel<T>,
    x_a: &DVector<T>,
    u: &DVector<T>,
    w_a: &DVector<T>,
    h: T,
) -> Result<DVector<T>> {
    if !(h > T::zero()) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    model.eval_dynamics(x_a, u, w_a)?;
    let mut ws = Workspace::new(x_a.len());
    let mut x = x_a.clone();
    ws.step(model, x.as_mut_slice(), u.as_slice(), w_a.as_slice(), h);
    if x.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::IntegrationBlowUp { interval: 0 });
    }
    Ok(x)
}

struct Workspace<T: Real> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![T::zero(); n],
            k2: vec![T::zero(); n],
            k3: vec![T::zero(); n],
            k4: vec![T::zero(); n],
            tmp: vec![T::zero(); n],
        }
    }

    fn step(&mut self, model: &AugmentedModel<T>, x: &mut [T], u: &[T], w: &[T], h: T) {
        self.step_with(|xs, dx| model.rhs(xs, u, w, dx), x, h);
    }

    fn step_with(&mut self, mut f: impl FnMut(&[T], &mut [T]), x: &mut [T], h: T) {
        let half = h * T::lit(0.5);
        let n = x.len();
        f(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(&self.tmp, &mut self.k4);
        let sixth = h / T::lit(6.0);
        for i in 0..n {
            x[i] += sixth * (self.k1[i] + T::lit(2.0) * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

fn check_signals<T: Real>(
    model: &AugmentedModel<T>,
    x0: &DVector<T>,
    u: &PiecewiseSignal<T>,
    w: &PiecewiseSignal<T>,
    grid: &Grid<T>,
) -> Result<()> {
    if x0.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    u.check(grid.intervals, model.input_dim(), "input signal")?;
    w.check(grid.intervals, model.disturbance_dim(), "disturbance signal")
}

/// Node states `x_a(t_0) … x_a(t_N)`.
pub fn simulate<T: Real>(
    model: &AugmentedModel<T>,
    x0: &DVector<T>,
    u: &PiecewiseSignal<T>,
    w: &PiecewiseSignal<T>,
    grid: &Grid<T>,
) -> Result<Vec<DVector<T>>> {
    check_signals(model, x0, u, w, grid)?;
    let mut out = Vec::with_capacity(grid.nodes());
    out.push(x0.clone());
    propagate(model, x0, 0, u, w, grid, |_, x| out.push(DVector::from_column_slice(x)))?;
    Ok(out)
}

/// Integrates from node `start` (state `x_start`) to the end of the grid,
/// reporting every reached node.
fn propagate<T: Real>(
    model: &AugmentedModel<T>,
    x_start: &DVector<T>,
    start: usize,
    u: &PiecewiseSignal<T>,
    w: &PiecewiseSignal<T>,
    grid: &Grid<T>,
    mut visit: impl FnMut(usize, &[T]),
) -> Result<()> {
    let h = grid.step / T::from_usize_lossy(grid.substeps);
    let mut ws = Workspace::new(x_start.len());
    let mut x = x_start.as_slice().to_vec();
    for k in start..grid.intervals {
        for _ in 0..grid.substeps {
            ws.step(model, &mut x, u.values[k].as_slice(), w.values[k].as_slice(), h);
        }
        if x.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::IntegrationBlowUp { interval: k });
        }
        visit(k + 1, &x);
    }
    Ok(())
}

/// Simulates the physical model alone under a known, time-varying latent force.
/// Used to generate ground truth.
pub fn simulate_forced<T: Real>(
    model: &ContinuousModel<T>,
    x0: &DVector<T>,
    force: impl Fn(T) -> T,
    u: &PiecewiseSignal<T>,
    w: &PiecewiseSignal<T>,
    grid: &Grid<T>,
) -> Result<Vec<DVector<T>>> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: n,
            got: x0.len(),
        });
    }
    u.check(grid.intervals, model.physics().input_dim(), "input signal")?;
    w.check(grid.intervals, model.disturbance_dim(), "disturbance signal")?;
    let h = grid.step / T::from_usize_lossy(grid.substeps);
    let mut ws = Workspace::new(n);
    let mut x = x0.as_slice().to_vec();
    let mut out = vec![x0.clone()];
    let e = model.disturbance_map();
    for k in 0..grid.intervals {
        let ew = e * &w.values[k];
        for s in 0..grid.substeps {
            let t_sub = grid.time(k) + h * T::from_usize_lossy(s);
            // Stage times are t, t + h/2, t + h/2, t + h; track them by call index.
            let mut call = 0usize;
            ws.step_with(
                |xs, dx| {
                    let t = t_sub
                        + h * match call {
                            0 => T::zero(),
                            1 | 2 => T::lit(0.5),
                            _ => T::one(),
                        };
                    call += 1;
                    model.physics().dynamics(xs, u.values[k].as_slice(), force(t), dx);
                    for i in 0..n {
                        dx[i] += ew[i];
                    }
                },
                &mut x,
                h,
            );
        }
        if x.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::IntegrationBlowUp { interval: k });
        }
        out.push(DVector::from_column_slice(&x));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    #[default]
    Forward,
    Central,
}

/// Node states and their sensitivities with respect to the decision vector
/// `z = (χ, w_0, …, w_{N-1})`.
#[derive(Debug, Clone)]
pub struct Sensitivities<T: Real> {
    pub states: Vec<DVector<T>>,
    /// Row block `i` (rows `i·n_a .. (i+1)·n_a`) holds `∂x_a(t_i)/∂z`.
    pub jacobian: DMatrix<T>,
    pub state_dim: usize,
    pub disturbance_dim: usize,
}

impl<T: Real> Sensitivities<T> {
    pub fn decision_dim(&self) -> usize {
        self.jacobian.ncols()
    }

    pub fn node_block(&self, node: usize) -> nalgebra::DMatrixView<'_, T> {
        self.jacobian
            .view((node * self.state_dim, 0), (self.state_dim, self.jacobian.ncols()))
    }

    /// Column offset of `w_k` in the decision vector.
    pub fn disturbance_column(&self, interval: usize) -> usize {
        self.state_dim + interval * self.disturbance_dim
    }
}

fn fd_delta<T: Real>(value: T) -> T {
    T::fd_step() * (T::one() + value.abs())
}

/// Finite-difference sensitivities of all node states.
///
/// Perturbing `w_j` only re-simulates from node `j`; nodes `≤ j` have zero
/// sensitivity to it. Columns are computed in parallel.
pub fn trajectory_jacobians<T: Real>(
    model: &AugmentedModel<T>,
    x0: &DVector<T>,
    u: &PiecewiseSignal<T>,
    w: &PiecewiseSignal<T>,
    grid: &Grid<T>,
    scheme: FdScheme,
) -> Result<Sensitivities<T>> {
    let states = simulate(model, x0, u, w, grid)?;
    let na = model.state_dim();
    let nw = model.disturbance_dim();
    let nodes = grid.nodes();
    let d = na + grid.intervals * nw;

    let column = |c: usize| -> Result<Vec<T>> {
        let mut col = vec![T::zero(); nodes * na];
        // (start node, perturbed initial state at start, perturbed w)
        let run = |sign: T| -> Result<Vec<T>> {
            let mut out = vec![T::zero(); nodes * na];
            if c < na {
                let delta = fd_delta(x0[c]) * sign;
                let mut xp = x0.clone();
                xp[c] += delta;
                out[..na].copy_from_slice(xp.as_slice());
                propagate(model, &xp, 0, u, w, grid, |i, x| {
                    out[i * na..(i + 1) * na].copy_from_slice(x)
                })?;
                Ok(out)
            } else {
                let k = (c - na) / nw;
                let comp = (c - na) % nw;
                let mut wp = w.values[k].clone();
                let bump = fd_delta(wp[comp]) * sign;
                wp[comp] += bump;
                let h = grid.step / T::from_usize_lossy(grid.substeps);
                let mut ws = Workspace::new(na);
                let mut x = states[k].as_slice().to_vec();
                for _ in 0..grid.substeps {
                    ws.step(model, &mut x, u.values[k].as_slice(), wp.as_slice(), h);
                }
                if x.iter().any(|v| !v.is_finite_value()) {
                    return Err(Error::IntegrationBlowUp { interval: k });
                }
                out[(k + 1) * na..(k + 2) * na].copy_from_slice(&x);
                let xk1 = DVector::from_column_slice(&x);
                propagate(model, &xk1, k + 1, u, w, grid, |i, x| {
                    out[i * na..(i + 1) * na].copy_from_slice(x)
                })?;
                Ok(out)
            }
        };
        let first = if c < na { 0 } else { (c - na) / nw + 1 };
        let delta = if c < na {
            fd_delta(x0[c])
        } else {
            let k = (c - na) / nw;
            fd_delta(w.values[k][(c - na) % nw])
        };
        match scheme {
            FdScheme::Forward => {
                let plus = run(T::one())?;
                for i in first..nodes {
                    for r in 0..na {
                        col[i * na + r] = (plus[i * na + r] - states[i][r]) / delta;
                    }
                }
            }
            FdScheme::Central => {
                let plus = run(T::one())?;
                let minus = run(-T::one())?;
                for i in first..nodes {
                    for r in 0..na {
                        col[i * na + r] =
                            (plus[i * na + r] - minus[i * na + r]) / (T::lit(2.0) * delta);
                    }
                }
            }
        }
        Ok(col)
    };

    let columns: Vec<Vec<T>> = (0..d).into_par_iter().map(column).collect::<Result<_>>()?;
    let mut jacobian = DMatrix::zeros(nodes * na, d);
    for (c, col) in columns.iter().enumerate() {
        jacobian.column_mut(c).copy_from_slice(col);
    }
    Ok(Sensitivities {
        states,
        jacobian,
        state_dim: na,
        disturbance_dim: nw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{augment, FnModel, LinearModel};
    use crate::gp_ssm::GpPrior;
    use approx::assert_relative_eq;

    /// Scalar physical state, GP block with zero signal: `ẋ = -x + ℓ`.
    fn decay_model() -> AugmentedModel<f64> {
        let lin = LinearModel::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        augment(ContinuousModel::new(lin), GpPrior::new(1, 1.0, 1.0).unwrap()).unwrap()
    }

    fn frozen_model() -> AugmentedModel<f64> {
        let m = FnModel::new(1, 0, 1, |_x, _u, _l, dx| dx[0] = 0.0, |x, _u, y| y[0] = x[0]);
        // GP block stays at rest from a zero GP state.
        augment(ContinuousModel::new(m), GpPrior::new(1, 1.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_dynamics_unchanged() {
        let model = frozen_model();
        let x = DVector::from_vec(vec![1.5, 0.0, 0.0]);
        let out = rk4_step(&model, &x, &DVector::zeros(0), &DVector::zeros(3), 0.3).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn exponential_decay_step() {
        let model = decay_model();
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let out = rk4_step(&model, &x, &DVector::zeros(0), &DVector::zeros(3), 0.1).unwrap();
        assert!((out[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert_relative_eq!(out[0], 0.90483742, epsilon = 1e-7);
    }

    #[test]
    fn fourth_order_global_convergence() {
        let model = decay_model();
        let x0 = DVector::from_vec(vec![1.0, 0.5, -0.3]);
        let lf = model.linear_form().unwrap();
        let exact = (lf.a * 2.0).exp() * &x0;
        let err = |intervals: usize| {
            let grid = Grid::with_substeps(0.0, 2.0 / intervals as f64, intervals, 1).unwrap();
            let u = PiecewiseSignal::zeros(intervals, 0);
            let w = PiecewiseSignal::zeros(intervals, 3);
            let xs = simulate(&model, &x0, &u, &w, &grid).unwrap();
            (xs.last().unwrap() - &exact).amax()
        };
        let order = (err(40) / err(80)).log2();
        assert!((order - 4.0).abs() < 0.25, "observed global order {order}");
        // Local error: one step of size h vs h/2.
        let local = |h: f64| {
            let x = rk4_step(&model, &x0, &DVector::zeros(0), &DVector::zeros(3), h).unwrap();
            (x - (model.linear_form().unwrap().a * h).exp() * &x0).amax()
        };
        let local_ratio = local(0.2) / local(0.1);
        assert!((local_ratio - 32.0).abs() < 4.0, "local ratio {local_ratio}");
    }

    #[test]
    fn blow_up_detected() {
        let m = FnModel::new(1, 0, 1, |x, _u, _l, dx| dx[0] = x[0] * x[0], |x, _u, y| y[0] = x[0]);
        let model = augment(ContinuousModel::new(m), GpPrior::new(1, 1.0, 1.0).unwrap()).unwrap();
        let grid = Grid::with_substeps(0.0, 0.5, 40, 1).unwrap();
        let err = simulate(
            &model,
            &DVector::from_vec(vec![10.0, 0.0, 0.0]),
            &PiecewiseSignal::zeros(40, 0),
            &PiecewiseSignal::zeros(40, 3),
            &grid,
        )
        .unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowUp { .. }));
    }

    #[test]
    fn stable_linear_decays() {
        let model = decay_model();
        let grid = Grid::new(0.0, 0.05, 100).unwrap();
        let xs = simulate(
            &model,
            &DVector::from_vec(vec![2.0, 0.0, 0.0]),
            &PiecewiseSignal::zeros(100, 0),
            &PiecewiseSignal::zeros(100, 3),
            &grid,
        )
        .unwrap();
        for pair in xs.windows(2) {
            assert!(pair[1].norm() < pair[0].norm());
        }
    }

    #[test]
    fn signal_length_checked() {
        let model = decay_model();
        let grid = Grid::new(0.0, 0.1, 10).unwrap();
        let err = simulate(
            &model,
            &DVector::zeros(3),
            &PiecewiseSignal::zeros(10, 0),
            &PiecewiseSignal::zeros(9, 3),
            &grid,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
    }

    #[test]
    fn grid_node_lookup() {
        let grid = Grid::new(0.0, 0.01, 1500).unwrap();
        assert_eq!(grid.node_of(0.6), Some(60));
        assert_eq!(grid.node_of(15.0), Some(1500));
        assert_eq!(grid.node_of(0.605), None);
        assert_eq!(grid.node_of(15.01), None);
        assert_eq!(grid.substeps, 1);
        assert_eq!(Grid::new(0.0, 0.5, 50).unwrap().substeps, 4);
    }

    fn transition(a: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        (a * h).exp()
    }

    #[test]
    fn sensitivities_match_transition_matrices() {
        let model = decay_model();
        let n = 12;
        let dt = 0.1;
        let grid = Grid::with_substeps(0.0, dt, n, 4).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let u = PiecewiseSignal::zeros(n, 0);
        let w = PiecewiseSignal::new(
            3,
            (0..n).map(|k| DVector::from_element(3, 0.01 * k as f64)).collect(),
        )
        .unwrap();
        let sens = trajectory_jacobians(&model, &x0, &u, &w, &grid, FdScheme::Forward).unwrap();
        let a = model.linear_form().unwrap().a;
        // ∂x_i/∂χ = exp(A t_i)
        for i in [0, 1, 5, 12] {
            let block = sens.node_block(i).columns(0, 3).into_owned();
            assert_relative_eq!(block, transition(&a, dt * i as f64), epsilon = 1e-5);
        }
        // ∂x_i/∂w_j = exp(A (t_i - t_{j+1})) ∫_0^δ exp(A s) ds   for i > j
        let gamma = {
            // ∫_0^δ exp(A s) ds via the augmented exponential.
            let mut big = DMatrix::zeros(6, 6);
            big.view_mut((0, 0), (3, 3)).copy_from(&a);
            big.view_mut((0, 3), (3, 3)).fill_with_identity();
            (big * dt).exp().view((0, 3), (3, 3)).into_owned()
        };
        for (i, j) in [(1, 0), (7, 3), (12, 11)] {
            let block = sens
                .node_block(i)
                .columns(sens.disturbance_column(j), 3)
                .into_owned();
            let expected = transition(&a, dt * (i - j - 1) as f64) * &gamma;
            assert_relative_eq!(block, expected, epsilon = 1e-5);
        }
    }

    #[test]
    fn sensitivities_are_causal() {
        let model = decay_model();
        let n = 8;
        let grid = Grid::new(0.0, 0.1, n).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.2, 0.0]);
        let sens = trajectory_jacobians(
            &model,
            &x0,
            &PiecewiseSignal::zeros(n, 0),
            &PiecewiseSignal::zeros(n, 3),
            &grid,
            FdScheme::Forward,
        )
        .unwrap();
        for j in 0..n {
            let col = sens.disturbance_column(j);
            for i in 0..=j {
                assert_eq!(sens.node_block(i).columns(col, 3).amax(), 0.0);
            }
            assert!(sens.node_block(j + 1).columns(col, 3).amax() > 0.0);
        }
    }

    #[test]
    fn central_and_forward_agree() {
        use crate::dynamics::BallisticModel;
        let phys = BallisticModel {
            drag: 4.49e-4,
            decay: 1.49e-4,
            gravity: 9.81,
            sensor_x: 30000.0,
            sensor_y: 30.0,
        };
        let model = augment(ContinuousModel::new(phys), GpPrior::new(2, 2.0, 1.0).unwrap()).unwrap();
        let n = 10;
        let grid = Grid::new(0.0, 0.5, n).unwrap();
        let x0 = DVector::from_vec(vec![40000.0, 2500.0, 1.0, 0.0, 0.0]);
        let u = PiecewiseSignal::zeros(n, 0);
        let w = PiecewiseSignal::zeros(n, 5);
        let fwd = trajectory_jacobians(&model, &x0, &u, &w, &grid, FdScheme::Forward).unwrap();
        let cen = trajectory_jacobians(&model, &x0, &u, &w, &grid, FdScheme::Central).unwrap();
        let diff = (&fwd.jacobian - &cen.jacobian).amax();
        let scale = cen.jacobian.amax();
        // Forward-difference error budget: step · curvature; allow 10x of it.
        assert!(diff / scale < 10.0 * 1e-4, "relative diff {}", diff / scale);
    }
}
