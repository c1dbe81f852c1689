//! Smooth constrained minimization over a box with inequality constraints.
//!
//! Inequalities `g(z) ≤ 0` are handled by an augmented-Lagrangian outer loop
//! (`μ ← max(0, μ + ρ g)`, `ρ` grown tenfold when the violation stalls). Each
//! subproblem is solved by projected descent on the box: L-BFGS in general,
//! or Gauss–Newton/Levenberg–Marquardt when the problem exposes a
//! least-squares structure `f = ‖r‖²`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Residual form of a least-squares objective `f(z) = ‖r(z)‖²` together with
/// the inequality constraints, evaluated in one pass.
#[derive(Debug, Clone)]
pub struct LeastSquaresEval<T: Real> {
    pub residuals: DVector<T>,
    pub residual_jacobian: Option<DMatrix<T>>,
    /// Precomputed `J_rᵀ J_r`, when the problem can supply it cheaply.
    pub residual_gram: Option<DMatrix<T>>,
    pub constraints: DVector<T>,
    pub constraint_jacobian: Option<DMatrix<T>>,
}

pub trait NlpProblem<T: Real>: Sync {
    fn dim(&self) -> usize;
    fn lower(&self) -> &DVector<T>;
    fn upper(&self) -> &DVector<T>;
    fn objective(&self, z: &DVector<T>) -> Result<T>;

    /// Central finite differences unless overridden.
    fn gradient(&self, z: &DVector<T>) -> Result<DVector<T>> {
        let mut g = DVector::zeros(z.len());
        let mut zp = z.clone();
        for i in 0..z.len() {
            let h = T::fd_step() * (T::one() + z[i].abs());
            zp[i] = z[i] + h;
            let fp = self.objective(&zp)?;
            zp[i] = z[i] - h;
            let fm = self.objective(&zp)?;
            zp[i] = z[i];
            g[i] = (fp - fm) / (T::lit(2.0) * h);
        }
        Ok(g)
    }

    fn constraint_count(&self) -> usize {
        0
    }

    fn constraints(&self, _z: &DVector<T>) -> Result<DVector<T>> {
        Ok(DVector::zeros(0))
    }

    /// Forward finite differences unless overridden; row `i` is `∇gᵢ`.
    fn constraint_jacobian(&self, z: &DVector<T>) -> Result<DMatrix<T>> {
        let m = self.constraint_count();
        let g0 = self.constraints(z)?;
        let mut jac = DMatrix::zeros(m, z.len());
        let mut zp = z.clone();
        for i in 0..z.len() {
            let h = T::fd_step() * (T::one() + z[i].abs());
            zp[i] = z[i] + h;
            let gp = self.constraints(&zp)?;
            zp[i] = z[i];
            jac.set_column(i, &((gp - &g0) / h));
        }
        Ok(jac)
    }

    /// Least-squares structure, if the objective is `‖r(z)‖²`.
    fn least_squares(&self, _z: &DVector<T>, _jacobian: bool) -> Option<Result<LeastSquaresEval<T>>> {
        None
    }
}

type ScalarFn<'a, T> = Box<dyn Fn(&DVector<T>) -> T + Sync + 'a>;
type VectorFn<'a, T> = Box<dyn Fn(&DVector<T>) -> DVector<T> + Sync + 'a>;

/// Closure-backed problem.
pub struct FnProblem<'a, T: Real> {
    lower: DVector<T>,
    upper: DVector<T>,
    objective: ScalarFn<'a, T>,
    gradient: Option<VectorFn<'a, T>>,
    constraints: Option<(usize, VectorFn<'a, T>)>,
}

impl<'a, T: Real> FnProblem<'a, T> {
    pub fn new(dim: usize, objective: impl Fn(&DVector<T>) -> T + Sync + 'a) -> Self {
        Self {
            lower: DVector::from_element(dim, T::neg_infinity()),
            upper: DVector::from_element(dim, T::infinity()),
            objective: Box::new(objective),
            gradient: None,
            constraints: None,
        }
    }

    pub fn with_bounds(mut self, lower: DVector<T>, upper: DVector<T>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&DVector<T>) -> DVector<T> + Sync + 'a) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    /// Inequalities `g(z) ≤ 0` with `count` components.
    pub fn with_constraints(
        mut self,
        count: usize,
        constraints: impl Fn(&DVector<T>) -> DVector<T> + Sync + 'a,
    ) -> Self {
        self.constraints = Some((count, Box::new(constraints)));
        self
    }
}

impl<T: Real> NlpProblem<T> for FnProblem<'_, T> {
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
        Ok((self.objective)(z))
    }

    fn gradient(&self, z: &DVector<T>) -> Result<DVector<T>> {
        match &self.gradient {
            Some(g) => Ok(g(z)),
            None => {
                let mut g = DVector::zeros(z.len());
                let mut zp = z.clone();
                for i in 0..z.len() {
                    let h = T::fd_step() * (T::one() + z[i].abs());
                    zp[i] = z[i] + h;
                    let fp = (self.objective)(&zp);
                    zp[i] = z[i] - h;
                    let fm = (self.objective)(&zp);
                    zp[i] = z[i];
                    g[i] = (fp - fm) / (T::lit(2.0) * h);
                }
                Ok(g)
            }
        }
    }

    fn constraint_count(&self) -> usize {
        self.constraints.as_ref().map_or(0, |c| c.0)
    }

    fn constraints(&self, z: &DVector<T>) -> Result<DVector<T>> {
        Ok(self
            .constraints
            .as_ref()
            .map_or_else(|| DVector::zeros(0), |(_, g)| g(z)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Gauss–Newton when least-squares structure is available, else L-BFGS.
    #[default]
    Auto,
    Lbfgs,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T: Real> {
    /// Projected-gradient tolerance, relative to `1 + |f|`.
    pub opt_tol: T,
    pub feas_tol: T,
    pub max_outer: usize,
    pub max_inner: usize,
    pub memory: usize,
    pub armijo: T,
    pub initial_penalty: T,
    pub penalty_growth: T,
    pub inner: InnerMethod,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            opt_tol: T::lit(1e-6),
            feas_tol: T::lit(1e-6),
            max_outer: 30,
            max_inner: 500,
            memory: 10,
            armijo: T::lit(1e-4),
            initial_penalty: T::one(),
            penalty_growth: T::lit(10.0),
            inner: InnerMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    /// Iteration caps hit before feasibility/optimality.
    InfeasibleOrSlow,
    /// No descent step could be found before the tolerances were met.
    Stalled,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::InfeasibleOrSlow => "infeasible-or-slow",
            Self::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport<T: Real> {
    pub z: DVector<T>,
    pub objective: T,
    pub max_violation: T,
    pub projected_gradient: T,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub multipliers: DVector<T>,
    /// Maximum violation after each outer iteration.
    pub violation_history: Vec<T>,
}

fn project<T: Real>(z: &DVector<T>, lo: &DVector<T>, hi: &DVector<T>) -> DVector<T> {
    DVector::from_iterator(
        z.len(),
        z.iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(v, (l, h))| v.max(*l).min(*h)),
    )
}

fn projected_gradient_norm<T: Real>(z: &DVector<T>, g: &DVector<T>, lo: &DVector<T>, hi: &DVector<T>) -> T {
    (project(&(z - g), lo, hi) - z).amax()
}

fn max_violation<T: Real>(g: &DVector<T>) -> T {
    g.iter().fold(T::zero(), |a, v| a.max(*v))
}

/// Free variables: not pinned at a bound by the sign of the gradient.
fn free_mask<T: Real>(z: &DVector<T>, g: &DVector<T>, lo: &DVector<T>, hi: &DVector<T>) -> Vec<bool> {
    (0..z.len())
        .map(|i| {
            let tol = T::lit(1e-12) * (T::one() + z[i].abs());
            let at_lo = z[i] <= lo[i] + tol && g[i] > T::zero();
            let at_hi = z[i] >= hi[i] - tol && g[i] < T::zero();
            !(at_lo || at_hi)
        })
        .collect()
}

/// Augmented-Lagrangian state for one outer iteration.
struct Penalty<'a, T: Real> {
    multipliers: &'a DVector<T>,
    rho: T,
}

impl<T: Real> Penalty<'_, T> {
    /// `Σ (max(0, μ + ρ g)² − μ²) / (2ρ)`.
    fn value(&self, g: &DVector<T>) -> T {
        let two_rho = T::lit(2.0) * self.rho;
        g.iter()
            .zip(self.multipliers.iter())
            .fold(T::zero(), |acc, (gi, mu)| {
                let s = (*mu + self.rho * *gi).max(T::zero());
                acc + (s * s - *mu * *mu) / two_rho
            })
    }

    /// Shifted multipliers `max(0, μ + ρ g)`.
    fn weights(&self, g: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            g.len(),
            g.iter()
                .zip(self.multipliers.iter())
                .map(|(gi, mu)| (*mu + self.rho * *gi).max(T::zero())),
        )
    }
}

struct InnerOutcome<T: Real> {
    z: DVector<T>,
    iterations: usize,
    converged: bool,
    stalled: bool,
    objective: T,
}

/// A trial evaluation failing with a recoverable numerical error counts as +∞.
fn recoverable(err: &Error) -> bool {
    matches!(err, Error::IntegrationBlowUp { .. } | Error::ObjectiveBlowUp)
}

fn finite_or_inf<T: Real>(value: Result<T>) -> Result<T> {
    match value {
        Ok(v) if v.is_finite_value() => Ok(v),
        Ok(_) => Ok(T::infinity()),
        Err(e) if recoverable(&e) => Ok(T::infinity()),
        Err(e) => Err(e),
    }
}

struct LbfgsInner<'p, T: Real, P: NlpProblem<T> + ?Sized> {
    problem: &'p P,
    options: &'p SolverOptions<T>,
}

impl<T: Real, P: NlpProblem<T> + ?Sized> LbfgsInner<'_, T, P> {
    fn value(&self, z: &DVector<T>, penalty: &Penalty<'_, T>) -> Result<T> {
        let f = self.problem.objective(z)?;
        if self.problem.constraint_count() == 0 {
            return Ok(f);
        }
        Ok(f + penalty.value(&self.problem.constraints(z)?))
    }

    fn gradient(&self, z: &DVector<T>, penalty: &Penalty<'_, T>) -> Result<DVector<T>> {
        let mut g = self.problem.gradient(z)?;
        if self.problem.constraint_count() > 0 {
            let c = self.problem.constraints(z)?;
            let jac = self.problem.constraint_jacobian(z)?;
            g += jac.tr_mul(&penalty.weights(&c));
        }
        Ok(g)
    }

    fn run(&self, z0: DVector<T>, penalty: &Penalty<'_, T>) -> Result<InnerOutcome<T>> {
        let lo = self.problem.lower();
        let hi = self.problem.upper();
        let mut z = project(&z0, lo, hi);
        let mut f = self.value(&z, penalty)?;
        if !f.is_finite_value() {
            return Err(Error::ObjectiveBlowUp);
        }
        let mut g = self.gradient(&z, penalty)?;
        let mut pairs: std::collections::VecDeque<(DVector<T>, DVector<T>, T)> = Default::default();
        let mut stalled = false;
        let mut converged = false;
        let mut it = 0;
        while it < self.options.max_inner {
            let pg = projected_gradient_norm(&z, &g, lo, hi);
            if pg <= self.options.opt_tol * (T::one() + f.abs()) {
                converged = true;
                break;
            }
            it += 1;
            let free = free_mask(&z, &g, lo, hi);
            let masked = |v: &DVector<T>| {
                DVector::from_iterator(v.len(), v.iter().zip(free.iter()).map(|(x, f)| if *f { *x } else { T::zero() }))
            };
            // Two-loop recursion on the free subspace.
            let mut q = masked(&g);
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = *rho * masked(s).dot(&q);
                q -= masked(y) * a;
                alphas.push(a);
            }
            if let Some((s, y, _)) = pairs.back() {
                let (ms, my) = (masked(s), masked(y));
                let yy = my.dot(&my);
                if yy > T::zero() {
                    q *= ms.dot(&my) / yy;
                }
            } else {
                let gn = q.amax();
                if gn > T::zero() {
                    q *= (T::one() / gn).min(T::one());
                }
            }
            for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
                let b = *rho * masked(y).dot(&q);
                q += masked(s) * (*a - b);
            }
            let mut dir = -masked(&q);
            if g.dot(&dir) >= T::zero() {
                dir = -masked(&g);
                pairs.clear();
            }

            let mut step = T::one();
            let mut accepted = None;
            for _ in 0..40 {
                let trial = project(&(&z + &dir * step), lo, hi);
                let ft = finite_or_inf(self.value(&trial, penalty))?;
                let decrease = g.dot(&(&trial - &z));
                if ft <= f + self.options.armijo * decrease {
                    accepted = Some((trial, ft));
                    break;
                }
                step *= T::lit(0.5);
            }
            let Some((zn, fn_)) = accepted else {
                if pairs.is_empty() {
                    stalled = true;
                    break;
                }
                pairs.clear();
                continue;
            };
            let gn = self.gradient(&zn, penalty)?;
            let s = &zn - &z;
            let y = &gn - &g;
            let sy = s.dot(&y);
            if sy > T::lit(1e-12) * s.norm() * y.norm() && sy > T::zero() {
                pairs.push_back((s.clone(), y, T::one() / sy));
                if pairs.len() > self.options.memory {
                    pairs.pop_front();
                }
            }
            let small_step = s.amax() <= T::default_epsilon() * T::lit(10.0) * (T::one() + z.amax());
            z = zn;
            f = fn_;
            g = gn;
            if small_step {
                stalled = true;
                break;
            }
        }
        Ok(InnerOutcome {
            z,
            iterations: it,
            converged,
            stalled,
            objective: f,
        })
    }
}

struct GaussNewtonInner<'p, T: Real, P: NlpProblem<T> + ?Sized> {
    problem: &'p P,
    options: &'p SolverOptions<T>,
}

/// Augmented-Lagrangian merit with its gradient and Gauss–Newton Hessian.
struct StackedEval<T: Real> {
    value: T,
    gradient: Option<DVector<T>>,
    hessian: Option<DMatrix<T>>,
}

impl<T: Real, P: NlpProblem<T> + ?Sized> GaussNewtonInner<'_, T, P> {
    fn eval(&self, z: &DVector<T>, penalty: &Penalty<'_, T>, derivatives: bool) -> Result<StackedEval<T>> {
        let ls = self
            .problem
            .least_squares(z, derivatives)
            .ok_or_else(|| Error::InvalidConfig("problem has no least-squares structure".into()))??;
        let shifted = penalty.weights(&ls.constraints);
        let value = ls.residuals.norm_squared() + penalty.value(&ls.constraints);
        if !derivatives {
            return Ok(StackedEval {
                value,
                gradient: None,
                hessian: None,
            });
        }
        let jr = ls
            .residual_jacobian
            .ok_or_else(|| Error::InvalidConfig("missing residual jacobian".into()))?;
        let two = T::lit(2.0);
        let mut gradient = jr.tr_mul(&ls.residuals) * two;
        let mut hessian = match ls.residual_gram {
            Some(gram) => gram * two,
            None => jr.tr_mul(&jr) * two,
        };
        let active: Vec<usize> = (0..shifted.len()).filter(|&i| shifted[i] > T::zero()).collect();
        if !active.is_empty() {
            let jg = ls
                .constraint_jacobian
                .ok_or_else(|| Error::InvalidConfig("missing constraint jacobian".into()))?;
            let rows = DMatrix::from_fn(active.len(), z.len(), |a, c| jg[(active[a], c)]);
            let weights = DVector::from_fn(active.len(), |a, _| shifted[active[a]]);
            gradient += rows.tr_mul(&weights);
            hessian += rows.tr_mul(&rows) * penalty.rho;
        }
        Ok(StackedEval {
            value,
            gradient: Some(gradient),
            hessian: Some(hessian),
        })
    }

    fn value(&self, z: &DVector<T>, penalty: &Penalty<'_, T>) -> Result<T> {
        finite_or_inf(self.eval(z, penalty, false).map(|e| e.value))
    }

    fn run(&self, z0: DVector<T>, penalty: &Penalty<'_, T>) -> Result<InnerOutcome<T>> {
        let lo = self.problem.lower();
        let hi = self.problem.upper();
        let mut z = project(&z0, lo, hi);
        let mut current = self.eval(&z, penalty, true)?;
        if !current.value.is_finite_value() {
            return Err(Error::ObjectiveBlowUp);
        }
        let mut damping = T::lit(1e-10);
        let mut nu = T::lit(2.0);
        let mut it = 0;
        let mut converged = false;
        let mut stalled = false;
        while it < self.options.max_inner {
            let grad = current.gradient.take().expect("gradient requested");
            let hess = current.hessian.take().expect("hessian requested");
            let pg = projected_gradient_norm(&z, &grad, lo, hi);
            if pg <= self.options.opt_tol * (T::one() + current.value.abs()) {
                converged = true;
                break;
            }
            it += 1;
            let free: Vec<usize> = free_mask(&z, &grad, lo, hi)
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.then_some(i))
                .collect();
            let nf = free.len();
            let all_free = nf == z.len();
            let hff = if all_free {
                hess
            } else {
                DMatrix::from_fn(nf, nf, |a, b| hess[(free[a], free[b])])
            };
            let gf = DVector::from_fn(nf, |a, _| grad[free[a]]);

            // Levenberg–Marquardt with a gain-ratio update of the damping.
            let mut accepted = None;
            while damping <= T::lit(1e16) {
                let mut h = hff.clone();
                for a in 0..nf {
                    h[(a, a)] += damping * (hff[(a, a)] + T::lit(1e-12));
                }
                let Some(ch) = h.cholesky() else {
                    damping = (damping * nu).max(T::lit(1e-8));
                    nu *= T::lit(2.0);
                    continue;
                };
                let step_f = ch.solve(&(-&gf));
                let mut dir = DVector::zeros(z.len());
                for (a, &i) in free.iter().enumerate() {
                    dir[i] = step_f[a];
                }
                let trial = project(&(&z + &dir), lo, hi);
                let s = &trial - &z;
                let sf = DVector::from_fn(nf, |a, _| s[free[a]]);
                let predicted = -(grad.dot(&s) + sf.dot(&(&hff * &sf)) * T::lit(0.5));
                let ft = self.value(&trial, penalty)?;
                let gain = if predicted > T::zero() {
                    (current.value - ft) / predicted
                } else {
                    -T::one()
                };
                if gain > T::lit(1e-4) && ft.is_finite_value() {
                    let shrink = T::one() - (T::lit(2.0) * gain - T::one()).powi(3);
                    damping = (damping * shrink.max(T::lit(1.0 / 3.0))).max(T::lit(1e-12));
                    nu = T::lit(2.0);
                    accepted = Some((trial, gain));
                    break;
                }
                damping = (damping * nu).max(T::lit(1e-12));
                nu *= T::lit(2.0);
            }
            let Some((zn, gain)) = accepted else {
                stalled = true;
                break;
            };
            let moved = (&zn - &z).amax();
            log::trace!(
                "gn it {it}: f {} pg {} gain {} damping {} free {}/{}",
                current.value,
                pg,
                gain,
                damping,
                nf,
                z.len()
            );
            let previous = current.value;
            z = zn;
            current = self.eval(&z, penalty, true)?;
            let tiny_move = moved <= T::default_epsilon() * T::lit(10.0) * (T::one() + z.amax());
            let tiny_gain = (previous - current.value).abs()
                <= T::default_epsilon() * T::lit(4.0) * (T::one() + current.value.abs());
            if tiny_move || tiny_gain {
                let grad = current.gradient.as_ref().expect("gradient requested");
                converged = projected_gradient_norm(&z, grad, lo, hi)
                    <= self.options.opt_tol * (T::one() + current.value.abs());
                stalled = !converged;
                break;
            }
        }
        Ok(InnerOutcome {
            z,
            iterations: it,
            converged,
            stalled,
            objective: current.value,
        })
    }
}

/// Minimizes `problem` from `z0` (projected onto the box first).
pub fn solve<T: Real, P: NlpProblem<T> + ?Sized>(
    problem: &P,
    z0: &DVector<T>,
    options: &SolverOptions<T>,
) -> Result<SolveReport<T>> {
    if z0.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial guess",
            expected: problem.dim(),
            got: z0.len(),
        });
    }
    let lo = problem.lower();
    let hi = problem.upper();
    if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
        return Err(Error::InvalidConfig("lower bound exceeds upper bound".into()));
    }
    let use_gn = match options.inner {
        InnerMethod::Lbfgs => false,
        InnerMethod::GaussNewton => true,
        InnerMethod::Auto => problem.least_squares(&project(z0, lo, hi), false).is_some(),
    };

    let m = problem.constraint_count();
    let mut multipliers = DVector::zeros(m);
    let mut rho = options.initial_penalty;
    let rho_max = T::lit(1e12);
    let mut z = project(z0, lo, hi);
    let mut iterations = 0;
    let mut history = Vec::new();
    let mut outer = 0;
    let mut inner_ok = false;
    let mut stalled = false;

    let constraints_at = |z: &DVector<T>| -> Result<DVector<T>> {
        if m == 0 {
            return Ok(DVector::zeros(0));
        }
        if use_gn {
            Ok(problem
                .least_squares(z, false)
                .expect("least-squares structure")?
                .constraints)
        } else {
            problem.constraints(z)
        }
    };

    while outer < options.max_outer.max(1) {
        outer += 1;
        let penalty = Penalty {
            multipliers: &multipliers,
            rho,
        };
        let outcome = if use_gn {
            GaussNewtonInner { problem, options }.run(z.clone(), &penalty)?
        } else {
            LbfgsInner { problem, options }.run(z.clone(), &penalty)?
        };
        iterations += outcome.iterations;
        z = outcome.z;
        inner_ok = outcome.converged;
        stalled = outcome.stalled;
        let _ = outcome.objective;

        let g = constraints_at(&z)?;
        let violation = max_violation(&g);
        history.push(violation);
        if m == 0 {
            break;
        }
        let updated = penalty.weights(&g);
        // Feasible with no active multipliers: the next subproblem would be
        // identical, so another outer pass only extends the inner budget.
        let unchanged = updated == multipliers;
        multipliers = updated;
        if violation <= options.feas_tol && (inner_ok || stalled || unchanged) {
            break;
        }
        let previous = history
            .len()
            .checked_sub(2)
            .map(|i| history[i])
            .unwrap_or(T::infinity());
        if violation > T::lit(0.25) * previous || outer == 1 && violation > options.feas_tol {
            rho = (rho * options.penalty_growth).min(rho_max);
        }
    }

    let objective = if use_gn {
        problem
            .least_squares(&z, false)
            .expect("least-squares structure")?
            .residuals
            .norm_squared()
    } else {
        problem.objective(&z)?
    };
    if !objective.is_finite_value() {
        return Err(Error::ObjectiveBlowUp);
    }
    let g = constraints_at(&z)?;
    let violation = max_violation(&g);

    // Projected gradient of the Lagrangian f + μᵀg.
    let lagrangian_gradient = if use_gn {
        let ls = problem.least_squares(&z, true).expect("least-squares structure")?;
        let mut grad = ls
            .residual_jacobian
            .expect("jacobian requested")
            .tr_mul(&ls.residuals)
            * T::lit(2.0);
        if let Some(jg) = ls.constraint_jacobian {
            if m > 0 {
                grad += jg.tr_mul(&multipliers);
            }
        }
        grad
    } else {
        let mut grad = problem.gradient(&z)?;
        if m > 0 {
            grad += problem.constraint_jacobian(&z)?.tr_mul(&multipliers);
        }
        grad
    };
    let pg = projected_gradient_norm(&z, &lagrangian_gradient, lo, hi);
    let optimal = pg <= options.opt_tol * T::lit(10.0) * (T::one() + objective.abs());
    let feasible = violation <= options.feas_tol;
    let converged = feasible && (inner_ok || optimal);
    let termination = if converged {
        Termination::Converged
    } else if stalled && feasible {
        Termination::Stalled
    } else {
        Termination::InfeasibleOrSlow
    };
    Ok(SolveReport {
        z,
        objective,
        max_violation: violation,
        projected_gradient: pg,
        iterations,
        outer_iterations: outer,
        converged,
        termination,
        multipliers,
        violation_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_bowl() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let cc = c.clone();
        let p = FnProblem::new(3, move |z: &DVector<f64>| (z - &cc).norm_squared());
        let r = solve(&p, &DVector::zeros(3), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert_relative_eq!(r.z, c, epsilon = 1e-8);
    }

    #[test]
    fn active_box_bound() {
        let p = FnProblem::new(1, |z: &DVector<f64>| (z[0] - 2.0).powi(2))
            .with_bounds(DVector::from_element(1, f64::NEG_INFINITY), DVector::from_element(1, 1.0));
        let r = solve(&p, &DVector::from_element(1, -3.0), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.z[0], 1.0);
    }

    #[test]
    fn inequality_multiplier() {
        let p = FnProblem::new(1, |z: &DVector<f64>| z[0] * z[0])
            .with_constraints(1, |z| DVector::from_element(1, 1.0 - z[0]));
        let r = solve(&p, &DVector::from_element(1, 3.0), &SolverOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.termination);
        assert!((r.z[0] - 1.0).abs() < 1e-6);
        assert!((r.multipliers[0] - 2.0).abs() < 1e-4);
    }

    fn rosenbrock(z: &DVector<f64>) -> f64 {
        100.0 * (z[1] - z[0] * z[0]).powi(2) + (1.0 - z[0]).powi(2)
    }

    #[test]
    fn rosenbrock_with_and_without_gradient() {
        let start = DVector::from_vec(vec![-1.2, 1.0]);
        let opts = SolverOptions {
            max_inner: 5000,
            ..SolverOptions::default()
        };
        let fd = FnProblem::new(2, rosenbrock);
        let analytic = FnProblem::new(2, rosenbrock).with_gradient(|z| {
            DVector::from_vec(vec![
                -400.0 * z[0] * (z[1] - z[0] * z[0]) - 2.0 * (1.0 - z[0]),
                200.0 * (z[1] - z[0] * z[0]),
            ])
        });
        for p in [&fd, &analytic] {
            let r = solve(p, &start, &opts).unwrap();
            assert!(r.converged);
            assert!((r.z[0] - 1.0).abs() < 1e-4 && (r.z[1] - 1.0).abs() < 1e-4, "{}", r.z);
        }
    }

    /// Rosenbrock as residuals `(10(z₁ − z₀²), 1 − z₀)` with `z₀ + z₁ ≤ 1.5`.
    struct LsRosenbrock {
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl NlpProblem<f64> for LsRosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn lower(&self) -> &DVector<f64> {
            &self.lo
        }
        fn upper(&self) -> &DVector<f64> {
            &self.hi
        }
        fn objective(&self, z: &DVector<f64>) -> Result<f64> {
            Ok(rosenbrock(z))
        }
        fn constraint_count(&self) -> usize {
            1
        }
        fn constraints(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, z[0] + z[1] - 1.5))
        }
        fn least_squares(&self, z: &DVector<f64>, jacobian: bool) -> Option<Result<LeastSquaresEval<f64>>> {
            Some(Ok(LeastSquaresEval {
                residuals: DVector::from_vec(vec![10.0 * (z[1] - z[0] * z[0]), 1.0 - z[0]]),
                residual_jacobian: jacobian
                    .then(|| DMatrix::from_row_slice(2, 2, &[-20.0 * z[0], 10.0, -1.0, 0.0])),
                residual_gram: None,
                constraints: self.constraints(z).unwrap(),
                constraint_jacobian: jacobian.then(|| DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
            }))
        }
    }

    #[test]
    fn gauss_newton_matches_lbfgs_with_active_constraint() {
        let p = LsRosenbrock {
            lo: DVector::from_element(2, -5.0),
            hi: DVector::from_element(2, 5.0),
        };
        let start = DVector::from_vec(vec![-1.2, 1.0]);
        let gn = solve(&p, &start, &SolverOptions::default()).unwrap();
        let lb = solve(
            &p,
            &start,
            &SolverOptions {
                inner: InnerMethod::Lbfgs,
                max_inner: 5000,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        assert!(gn.converged && lb.converged);
        assert!(gn.max_violation <= 1e-6);
        assert_relative_eq!(gn.z, lb.z, epsilon = 1e-4);
        assert!((gn.z[0] + gn.z[1] - 1.5).abs() < 1e-5);
        assert!(gn.multipliers[0] > 0.0);
        // KKT: the projected Lagrangian gradient vanishes.
        assert!(gn.projected_gradient < 1e-4, "{}", gn.projected_gradient);
    }

    #[test]
    fn violation_history_non_increasing_and_box_respected() {
        let lo = DVector::from_vec(vec![0.0, -1.0]);
        let hi = DVector::from_vec(vec![2.0, 3.0]);
        let p = FnProblem::new(2, |z: &DVector<f64>| (z[0] - 3.0).powi(2) + (z[1] + 2.0).powi(2))
            .with_bounds(lo.clone(), hi.clone())
            .with_constraints(2, |z| DVector::from_vec(vec![z[0] * z[0] + z[1] * z[1] - 1.0, -z[1] - 0.5]));
        let r = solve(&p, &DVector::from_vec(vec![1.5, 2.5]), &SolverOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.termination);
        for w in r.violation_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", r.violation_history);
        }
        for i in 0..2 {
            assert!(r.z[i] >= lo[i] && r.z[i] <= hi[i]);
        }
    }

    #[test]
    fn non_finite_start_rejected() {
        let p = FnProblem::new(1, |z: &DVector<f64>| (-z[0]).ln());
        let err = solve(&p, &DVector::from_element(1, 1.0), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ObjectiveBlowUp));
    }

    #[test]
    fn infeasible_reported() {
        // z ≤ -1 and z ≥ 1 cannot both hold.
        let p = FnProblem::new(1, |z: &DVector<f64>| z[0] * z[0])
            .with_constraints(2, |z| DVector::from_vec(vec![z[0] + 1.0, 1.0 - z[0]]));
        let opts = SolverOptions {
            max_outer: 6,
            ..SolverOptions::default()
        };
        let r = solve(&p, &DVector::zeros(1), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.termination, Termination::InfeasibleOrSlow);
        assert_eq!(r.termination.as_str(), "infeasible-or-slow");
    }
}
