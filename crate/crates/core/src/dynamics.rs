//! Physical models, their augmentation with a GP latent-force block, and the
//! optional constant-dynamics hyperparameter state.
//!
//! Augmented state layout is `[x (n), x_gp (m_f), θ?]`; the disturbance vector
//! follows the same blocks, `[w (q), w_gp (m_f), w_θ?]`. Every GP coordinate
//! carries its own additive disturbance, so the GP block reads
//! `ẋ_gp = F x_gp + w_gp`; the driving channel of the prior is the last one.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp_ssm::{companion_matrix, lambda_for, matern_ssm, GpPrior, SsmRealization};
use crate::scalar::Real;

/// Default lower clamp on the length-scale state.
pub const DEFAULT_THETA_MIN: f64 = 1e-6;

/// Known physical dynamics `ẋ = f(x, u, ℓ)` and output map `y = h(x, u)`.
///
/// Implementations must be pure: the estimators evaluate them concurrently.
pub trait PhysicalModel<T: Real>: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Writes `f(x, u, ℓ)` into `dx`.
    fn dynamics(&self, x: &[T], u: &[T], force: T, dx: &mut [T]);
    /// Writes `h(x, u)` into `y`.
    fn output(&self, x: &[T], u: &[T], y: &mut [T]);
    fn as_linear(&self) -> Option<&LinearModel<T>> {
        None
    }
}

/// `ẋ = A x + B u + G ℓ`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub g: DVector<T>,
    pub c: DMatrix<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, g: DVector<T>, c: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        let dim = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                })
            }
        };
        dim("A columns", n, a.ncols())?;
        dim("B rows", n, b.nrows())?;
        dim("G rows", n, g.len())?;
        dim("C columns", n, c.ncols())?;
        Ok(Self { a, b, g, c })
    }
}

impl<T: Real> PhysicalModel<T> for LinearModel<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    fn dynamics(&self, x: &[T], u: &[T], force: T, dx: &mut [T]) {
        let n = self.a.nrows();
        for i in 0..n {
            let mut acc = self.g[i] * force;
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * *uj;
            }
            dx[i] = acc;
        }
    }

    fn output(&self, x: &[T], _u: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..x.len()).fold(T::zero(), |acc, j| acc + self.c[(i, j)] * x[j]);
        }
    }

    fn as_linear(&self) -> Option<&LinearModel<T>> {
        Some(self)
    }
}

/// 1-D ballistic target: altitude and (downward) speed with altitude
/// dependent drag, observed through the range to a ground sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BallisticModel<T: Real> {
    pub drag: T,
    pub decay: T,
    pub gravity: T,
    pub sensor_x: T,
    pub sensor_y: T,
}

impl<T: Real> PhysicalModel<T> for BallisticModel<T> {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &[T], _u: &[T], force: T, dx: &mut [T]) {
        dx[0] = -x[1];
        dx[1] = -self.drag * (-self.decay * x[0]).exp() * x[1] * x[1] + self.gravity + force;
    }

    fn output(&self, x: &[T], _u: &[T], y: &mut [T]) {
        let dy = self.sensor_y - x[0];
        y[0] = (self.sensor_x * self.sensor_x + dy * dy).sqrt();
    }
}

type DynamicsFn<T> = dyn Fn(&[T], &[T], T, &mut [T]) + Send + Sync;
type OutputFn<T> = dyn Fn(&[T], &[T], &mut [T]) + Send + Sync;

/// Closure-backed model for ad-hoc nonlinear systems.
#[derive(Clone)]
pub struct FnModel<T: Real> {
    dims: (usize, usize, usize),
    dynamics: Arc<DynamicsFn<T>>,
    output: Arc<OutputFn<T>>,
}

impl<T: Real> FnModel<T> {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
        dynamics: impl Fn(&[T], &[T], T, &mut [T]) + Send + Sync + 'static,
        output: impl Fn(&[T], &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims: (state_dim, input_dim, output_dim),
            dynamics: Arc::new(dynamics),
            output: Arc::new(output),
        }
    }
}

impl<T: Real> Debug for FnModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnModel").field("dims", &self.dims).finish()
    }
}

impl<T: Real> PhysicalModel<T> for FnModel<T> {
    fn state_dim(&self) -> usize {
        self.dims.0
    }
    fn input_dim(&self) -> usize {
        self.dims.1
    }
    fn output_dim(&self) -> usize {
        self.dims.2
    }
    fn dynamics(&self, x: &[T], u: &[T], force: T, dx: &mut [T]) {
        (self.dynamics)(x, u, force, dx)
    }
    fn output(&self, x: &[T], u: &[T], y: &mut [T]) {
        (self.output)(x, u, y)
    }
}

/// Physical model plus the map `E` through which its disturbance enters.
#[derive(Debug, Clone)]
pub struct ContinuousModel<T: Real> {
    physics: Arc<dyn PhysicalModel<T>>,
    disturbance_map: DMatrix<T>,
}

impl<T: Real> ContinuousModel<T> {
    /// Additive disturbance on every state (`E = I`).
    pub fn new(physics: impl PhysicalModel<T> + 'static) -> Self {
        let n = physics.state_dim();
        Self {
            physics: Arc::new(physics),
            disturbance_map: DMatrix::identity(n, n),
        }
    }

    pub fn with_disturbance_map(mut self, map: DMatrix<T>) -> Result<Self> {
        if map.nrows() != self.physics.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "disturbance map rows",
                expected: self.physics.state_dim(),
                got: map.nrows(),
            });
        }
        self.disturbance_map = map;
        Ok(self)
    }

    pub fn physics(&self) -> &dyn PhysicalModel<T> {
        self.physics.as_ref()
    }

    pub fn disturbance_map(&self) -> &DMatrix<T> {
        &self.disturbance_map
    }

    pub fn state_dim(&self) -> usize {
        self.physics.state_dim()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_map.ncols()
    }
}

/// How the hyperparameter state maps to the companion-form rate `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMapping {
    /// θ is the length scale; `λ = sqrt(2ν) / max(θ, θ_min)`.
    #[default]
    LengthScale,
    /// θ is `λ` itself, clamped below by θ_min.
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperState<T: Real> {
    pub theta_min: T,
    pub mapping: HyperMapping,
}

/// Explicit matrices of an augmented model with a linear base.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub e: DMatrix<T>,
    pub c: DMatrix<T>,
}

/// Physical model augmented with the state-space realization of its GP prior.
#[derive(Debug, Clone)]
pub struct AugmentedModel<T: Real> {
    base: ContinuousModel<T>,
    prior: GpPrior<T>,
    gp: SsmRealization<T>,
    hyper: Option<HyperState<T>>,
}

pub fn augment<T: Real>(base: ContinuousModel<T>, prior: GpPrior<T>) -> Result<AugmentedModel<T>> {
    let gp = matern_ssm(&prior)?;
    Ok(AugmentedModel {
        base,
        prior,
        gp,
        hyper: None,
    })
}

/// Appends the length-scale state θ with `θ̇ = w_θ`, using the default clamp
/// and the length-scale mapping.
pub fn augment_hyperparameter<T: Real>(model: &AugmentedModel<T>) -> Result<AugmentedModel<T>> {
    augment_hyperparameter_with(
        model,
        HyperState {
            theta_min: T::lit(DEFAULT_THETA_MIN),
            mapping: HyperMapping::LengthScale,
        },
    )
}

pub fn augment_hyperparameter_with<T: Real>(
    model: &AugmentedModel<T>,
    hyper: HyperState<T>,
) -> Result<AugmentedModel<T>> {
    if model.hyper.is_some() {
        return Err(Error::AlreadyHyperAugmented);
    }
    if !(hyper.theta_min > T::zero()) {
        return Err(Error::InvalidConfig("theta_min must be positive".into()));
    }
    let mut out = model.clone();
    out.hyper = Some(hyper);
    Ok(out)
}

impl<T: Real> AugmentedModel<T> {
    pub fn base(&self) -> &ContinuousModel<T> {
        &self.base
    }

    pub fn prior(&self) -> &GpPrior<T> {
        &self.prior
    }

    pub fn gp(&self) -> &SsmRealization<T> {
        &self.gp
    }

    pub fn hyper(&self) -> Option<&HyperState<T>> {
        self.hyper.as_ref()
    }

    pub fn is_hyper_augmented(&self) -> bool {
        self.hyper.is_some()
    }

    pub fn physical_dim(&self) -> usize {
        self.base.state_dim()
    }

    pub fn gp_dim(&self) -> usize {
        self.gp.dim()
    }

    pub fn state_dim(&self) -> usize {
        self.physical_dim() + self.gp_dim() + usize::from(self.hyper.is_some())
    }

    pub fn disturbance_dim(&self) -> usize {
        self.base.disturbance_dim() + self.gp_dim() + usize::from(self.hyper.is_some())
    }

    pub fn input_dim(&self) -> usize {
        self.base.physics().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.base.physics().output_dim()
    }

    /// Index of the latent force `ℓ = C_gp x_gp` in the augmented state.
    pub fn force_index(&self) -> usize {
        self.physical_dim()
    }

    /// Index of θ, if hyper-augmented.
    pub fn hyper_index(&self) -> Option<usize> {
        self.hyper
            .map(|_| self.physical_dim() + self.gp_dim())
    }

    pub fn latent_force(&self, x_a: &DVector<T>) -> T {
        x_a[self.force_index()]
    }

    /// Length scale in effect at `x_a`: θ (mapped and clamped) when
    /// hyper-augmented, the prior's otherwise.
    pub fn length_scale_at(&self, x_a: &[T]) -> T {
        match (self.hyper, self.hyper_index()) {
            (Some(h), Some(i)) => {
                let theta = clamp_min(x_a[i], h.theta_min);
                match h.mapping {
                    HyperMapping::LengthScale => theta,
                    HyperMapping::Rate => (T::lit(2.0) * self.prior.nu()).sqrt() / theta,
                }
            }
            _ => self.prior.length_scale(),
        }
    }

    fn rate_at(&self, x_a: &[T]) -> T {
        match (self.hyper, self.hyper_index()) {
            (Some(h), Some(i)) => {
                let theta = clamp_min(x_a[i], h.theta_min);
                match h.mapping {
                    HyperMapping::LengthScale => lambda_for(self.prior.order(), theta),
                    HyperMapping::Rate => theta,
                }
            }
            _ => self.prior.lambda(),
        }
    }

    /// Same model with the hyperparameter state removed and the length scale
    /// fixed to `length_scale`.
    pub fn with_length_scale(&self, length_scale: T) -> Result<Self> {
        let prior = self.prior.with_length_scale(length_scale)?;
        augment(self.base.clone(), prior)
    }

    fn check_dims(&self, x_a: &[T], u: &[T], w_a: Option<&[T]>) -> Result<()> {
        let check = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                })
            }
        };
        check("augmented state", self.state_dim(), x_a.len())?;
        check("input", self.input_dim(), u.len())?;
        if let Some(w) = w_a {
            check("disturbance", self.disturbance_dim(), w.len())?;
        }
        Ok(())
    }

    /// `ẋ_a = f_a(x_a, u, w_a)`.
    pub fn eval_dynamics(&self, x_a: &DVector<T>, u: &DVector<T>, w_a: &DVector<T>) -> Result<DVector<T>> {
        self.check_dims(x_a.as_slice(), u.as_slice(), Some(w_a.as_slice()))?;
        let mut out = DVector::zeros(self.state_dim());
        self.rhs(x_a.as_slice(), u.as_slice(), w_a.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `y = h_a(x_a, u)`.
    pub fn eval_output(&self, x_a: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.check_dims(x_a.as_slice(), u.as_slice(), None)?;
        let mut y = DVector::zeros(self.output_dim());
        self.output_into(x_a.as_slice(), u.as_slice(), y.as_mut_slice());
        Ok(y)
    }

    pub(crate) fn output_into(&self, x_a: &[T], u: &[T], y: &mut [T]) {
        let n = self.physical_dim();
        self.base.physics().output(&x_a[..n], u, y);
    }

    /// Unchecked right-hand side used by the integrator.
    pub(crate) fn rhs(&self, x_a: &[T], u: &[T], w_a: &[T], dx: &mut [T]) {
        let n = self.physical_dim();
        let m = self.gp_dim();
        let q = self.base.disturbance_dim();
        let force = x_a[n];

        self.base.physics().dynamics(&x_a[..n], u, force, &mut dx[..n]);
        let e = self.base.disturbance_map();
        for i in 0..n {
            let mut acc = dx[i];
            for j in 0..q {
                acc += e[(i, j)] * w_a[j];
            }
            dx[i] = acc;
        }

        let gp = &x_a[n..n + m];
        let wg = &w_a[q..q + m];
        for i in 0..m - 1 {
            dx[n + i] = gp[i + 1] + wg[i];
        }
        let last = if self.hyper.is_some() {
            let lambda = self.rate_at(x_a);
            // Last companion row for (s + λ)^m.
            let mut acc = T::zero();
            let mut binom = T::one();
            for j in 0..m {
                acc -= binom * lambda.powi((m - j) as i32) * gp[j];
                binom = binom * T::from_usize_lossy(m - j) / T::from_usize_lossy(j + 1);
            }
            acc
        } else {
            (0..m).fold(T::zero(), |acc, j| acc + self.gp.f[(m - 1, j)] * gp[j])
        };
        dx[n + m - 1] = last + wg[m - 1];

        if self.hyper.is_some() {
            dx[n + m] = w_a[q + m];
        }
    }

    /// Block matrices `A_a = [[A, G C_gp], [0, F]]`, `B_a`, `E_a`, `C_a` for a
    /// linear base without the hyperparameter state.
    pub fn linear_form(&self) -> Option<LinearForm<T>> {
        if self.hyper.is_some() {
            return None;
        }
        let lin = self.base.physics().as_linear()?;
        let n = self.physical_dim();
        let m = self.gp_dim();
        let q = self.base.disturbance_dim();
        let na = n + m;
        let mut a = DMatrix::zeros(na, na);
        a.view_mut((0, 0), (n, n)).copy_from(&lin.a);
        a.view_mut((0, n), (n, m)).copy_from(&(&lin.g * &self.gp.c));
        a.view_mut((n, n), (m, m)).copy_from(&self.gp.f);
        let mut b = DMatrix::zeros(na, lin.b.ncols());
        b.view_mut((0, 0), (n, lin.b.ncols())).copy_from(&lin.b);
        let mut e = DMatrix::zeros(na, q + m);
        e.view_mut((0, 0), (n, q)).copy_from(self.base.disturbance_map());
        e.view_mut((n, q), (m, m)).fill_with_identity();
        let mut c = DMatrix::zeros(lin.c.nrows(), na);
        c.view_mut((0, 0), (lin.c.nrows(), n)).copy_from(&lin.c);
        Some(LinearForm { a, b, e, c })
    }

    /// Companion matrix in effect at `x_a`.
    pub fn gp_matrix_at(&self, x_a: &[T]) -> Result<DMatrix<T>> {
        companion_matrix(self.prior.order(), self.rate_at(x_a))
    }
}

fn clamp_min<T: Real>(value: T, min: T) -> T {
    if value < min {
        min
    } else {
        value
    }
}

/// Box knowledge on states, disturbances, outputs and measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T: Real> {
    pub state_lower: DVector<T>,
    pub state_upper: DVector<T>,
    pub disturbance_lower: DVector<T>,
    pub disturbance_upper: DVector<T>,
    pub output_lower: DVector<T>,
    pub output_upper: DVector<T>,
    pub noise_lower: DVector<T>,
    pub noise_upper: DVector<T>,
    pub initial_lower: DVector<T>,
    pub initial_upper: DVector<T>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn unbounded(states: usize, disturbances: usize, outputs: usize) -> Self {
        let lo = |k| DVector::from_element(k, T::neg_infinity());
        let hi = |k| DVector::from_element(k, T::infinity());
        Self {
            state_lower: lo(states),
            state_upper: hi(states),
            disturbance_lower: lo(disturbances),
            disturbance_upper: hi(disturbances),
            output_lower: lo(outputs),
            output_upper: hi(outputs),
            noise_lower: lo(outputs),
            noise_upper: hi(outputs),
            initial_lower: lo(states),
            initial_upper: hi(states),
        }
    }

    /// Unbounded except for `θ ≥ θ_min` on hyper-augmented models.
    pub fn for_model(model: &AugmentedModel<T>) -> Self {
        let mut set = Self::unbounded(model.state_dim(), model.disturbance_dim(), model.output_dim());
        if let (Some(h), Some(i)) = (model.hyper(), model.hyper_index()) {
            set.state_lower[i] = h.theta_min;
            set.initial_lower[i] = h.theta_min;
        }
        set
    }

    /// Bounds state `index` at every node (initial node included).
    pub fn with_state_bounds(mut self, index: usize, lower: T, upper: T) -> Self {
        self.state_lower[index] = lower;
        self.state_upper[index] = upper;
        self.initial_lower[index] = self.initial_lower[index].max(lower);
        self.initial_upper[index] = self.initial_upper[index].min(upper);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_lower.len()
    }

    /// Appends the θ row (`θ ≥ θ_min`) and a free `w_θ` row.
    pub fn extend_for_hyper(&self, theta_min: T) -> Self {
        let push = |v: &DVector<T>, value: T| v.clone().push(value);
        Self {
            state_lower: push(&self.state_lower, theta_min),
            state_upper: push(&self.state_upper, T::infinity()),
            disturbance_lower: push(&self.disturbance_lower, T::neg_infinity()),
            disturbance_upper: push(&self.disturbance_upper, T::infinity()),
            output_lower: self.output_lower.clone(),
            output_upper: self.output_upper.clone(),
            noise_lower: self.noise_lower.clone(),
            noise_upper: self.noise_upper.clone(),
            initial_lower: push(&self.initial_lower, theta_min),
            initial_upper: push(&self.initial_upper, T::infinity()),
        }
    }

    /// Drops the trailing θ row.
    pub fn without_hyper(&self) -> Self {
        let pop = |v: &DVector<T>| v.rows(0, v.len() - 1).into_owned();
        Self {
            state_lower: pop(&self.state_lower),
            state_upper: pop(&self.state_upper),
            disturbance_lower: pop(&self.disturbance_lower),
            disturbance_upper: pop(&self.disturbance_upper),
            output_lower: self.output_lower.clone(),
            output_upper: self.output_upper.clone(),
            noise_lower: self.noise_lower.clone(),
            noise_upper: self.noise_upper.clone(),
            initial_lower: pop(&self.initial_lower),
            initial_upper: pop(&self.initial_upper),
        }
    }

    pub fn validate(&self, model: &AugmentedModel<T>) -> Result<()> {
        let pairs: [(&str, &DVector<T>, &DVector<T>, usize); 5] = [
            ("state", &self.state_lower, &self.state_upper, model.state_dim()),
            (
                "disturbance",
                &self.disturbance_lower,
                &self.disturbance_upper,
                model.disturbance_dim(),
            ),
            ("output", &self.output_lower, &self.output_upper, model.output_dim()),
            ("noise", &self.noise_lower, &self.noise_upper, model.output_dim()),
            ("initial", &self.initial_lower, &self.initial_upper, model.state_dim()),
        ];
        for (name, lo, hi, dim) in pairs {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "{name} bounds have length {}/{}, expected {dim}",
                    lo.len(),
                    hi.len()
                )));
            }
            if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                return Err(Error::InvalidConfig(format!("{name} lower bound exceeds upper bound")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn transcription(order: u32) -> AugmentedModel<f64> {
        let lin = LinearModel::new(
            DMatrix::from_element(1, 1, -0.6),
            DMatrix::zeros(1, 0),
            DVector::from_element(1, 0.25),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        augment(ContinuousModel::new(lin), GpPrior::new(order, 1.0, 1.0).unwrap()).unwrap()
    }

    fn ballistic() -> AugmentedModel<f64> {
        let phys = BallisticModel {
            drag: 4.49e-4,
            decay: 1.49e-4,
            gravity: 9.81,
            sensor_x: 30000.0,
            sensor_y: 30.0,
        };
        augment(ContinuousModel::new(phys), GpPrior::new(2, 1.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn transcription_block_form() {
        let model = transcription(1);
        assert_eq!(model.state_dim(), 3);
        let lf = model.linear_form().unwrap();
        let lam = 3f64.sqrt();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[-0.6, 0.25, 0.0, 0.0, 0.0, 1.0, 0.0, -lam * lam, -2.0 * lam],
        );
        assert_relative_eq!(lf.a, expected, epsilon = 1e-12);
        assert_eq!(lf.e.ncols(), 3);
    }

    #[test]
    fn order_two_adds_three_states() {
        assert_eq!(transcription(2).state_dim(), 4);
        assert_eq!(ballistic().state_dim(), 5);
    }

    #[test]
    fn zero_gp_state_gives_base_dynamics() {
        let model = ballistic();
        let x = DVector::from_vec(vec![20000.0, 1500.0, 0.0, 0.0, 0.0]);
        let w = DVector::zeros(model.disturbance_dim());
        let u = DVector::zeros(0);
        let dx = model.eval_dynamics(&x, &u, &w).unwrap();
        let drag = 4.49e-4 * (-1.49e-4f64 * 20000.0).exp() * 1500.0 * 1500.0;
        assert_relative_eq!(dx[1], -drag + 9.81, epsilon = 1e-9);
        assert_eq!(dx.rows(2, 3).amax(), 0.0);
    }

    #[test]
    fn ballistic_initial_acceleration() {
        let model = ballistic();
        let x = DVector::from_vec(vec![65000.0, 3000.0, 0.0, 0.0, 0.0]);
        let dx = model
            .eval_dynamics(&x, &DVector::zeros(0), &DVector::zeros(5))
            .unwrap();
        let oracle = -4.49e-4 * (-9.685f64).exp() * 9.0e6 + 9.81;
        assert_relative_eq!(dx[1], oracle, epsilon = 1e-9);
        assert_relative_eq!(dx[0], -3000.0);
    }

    #[test]
    fn ballistic_range_at_sensor_altitude() {
        let model = ballistic();
        let x = DVector::from_vec(vec![30.0, 100.0, 0.0, 0.0, 0.0]);
        let y = model.eval_output(&x, &DVector::zeros(0)).unwrap();
        assert_relative_eq!(y[0], 30000.0);
    }

    #[test]
    fn hyper_augmentation_layout() {
        let model = augment_hyperparameter(&ballistic()).unwrap();
        assert_eq!(model.state_dim(), 6);
        assert_eq!(model.hyper_index(), Some(5));
        let mut w = DVector::zeros(6);
        w[5] = 0.3;
        let x = DVector::from_vec(vec![60000.0, 2900.0, 1.0, 0.5, -0.2, 1.0]);
        let dx = model.eval_dynamics(&x, &DVector::zeros(0), &w).unwrap();
        assert_eq!(dx[5], 0.3);
        assert!(matches!(
            augment_hyperparameter(&model),
            Err(Error::AlreadyHyperAugmented)
        ));
    }

    #[test]
    fn hyper_state_reproduces_fixed_model() {
        let fixed = ballistic();
        let hyper = augment_hyperparameter(&fixed).unwrap();
        let x5 = DVector::from_vec(vec![50000.0, 2500.0, 2.0, -1.0, 0.5]);
        let x6 = x5.clone().push(fixed.prior().length_scale());
        let u = DVector::zeros(0);
        let a = fixed.eval_dynamics(&x5, &u, &DVector::zeros(5)).unwrap();
        let b = hyper.eval_dynamics(&x6, &u, &DVector::zeros(6)).unwrap();
        assert_relative_eq!(a, b.rows(0, 5).into_owned(), epsilon = 1e-9);
    }

    #[test]
    fn theta_clamped_near_zero() {
        let hyper = augment_hyperparameter(&transcription(1)).unwrap();
        let u = DVector::zeros(0);
        let w = DVector::zeros(4);
        let at = |theta: f64| {
            let x = DVector::from_vec(vec![0.1, 0.2, 0.3, theta]);
            hyper.eval_dynamics(&x, &u, &w).unwrap()
        };
        let clamped = at(1e-6);
        for theta in [0.0, -1.0, 1e-9] {
            let dx = at(theta);
            assert!(dx.iter().all(|v| v.is_finite()));
            assert_eq!(dx, clamped);
        }
    }

    #[test]
    fn rate_mapping_uses_theta_directly() {
        let base = transcription(1);
        let hyper = augment_hyperparameter_with(
            &base,
            HyperState {
                theta_min: 1e-6,
                mapping: HyperMapping::Rate,
            },
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0, 0.0, base.prior().lambda()]);
        let dx_h = hyper
            .eval_dynamics(&x, &DVector::zeros(0), &DVector::zeros(4))
            .unwrap();
        let dx_b = base
            .eval_dynamics(&x.rows(0, 3).into_owned(), &DVector::zeros(0), &DVector::zeros(3))
            .unwrap();
        assert_relative_eq!(dx_h.rows(0, 3).into_owned(), dx_b, epsilon = 1e-12);
    }

    #[test]
    fn gp_block_ignores_physical_state() {
        // ∂ẋ_gp/∂x_phys = 0 by finite differences.
        let model = ballistic();
        let u = DVector::zeros(0);
        let w = DVector::zeros(5);
        let x = DVector::from_vec(vec![40000.0, 2000.0, 0.3, 0.1, -0.4]);
        let base = model.eval_dynamics(&x, &u, &w).unwrap();
        for k in 0..2 {
            let mut xp = x.clone();
            xp[k] += 1.0;
            let dx = model.eval_dynamics(&xp, &u, &w).unwrap();
            assert_eq!(dx.rows(2, 3), base.rows(2, 3));
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let model = transcription(1);
        let err = model
            .eval_dynamics(&DVector::zeros(2), &DVector::zeros(0), &DVector::zeros(3))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn constraint_set_for_hyper_model() {
        let model = augment_hyperparameter(&transcription(1)).unwrap();
        let set = ConstraintSet::for_model(&model).with_state_bounds(1, 0.0, f64::INFINITY);
        set.validate(&model).unwrap();
        assert_eq!(set.state_lower[3], DEFAULT_THETA_MIN);
        assert_eq!(set.initial_lower[1], 0.0);
        let frozen = set.without_hyper();
        assert_eq!(frozen.state_dim(), 3);
        assert_eq!(frozen.extend_for_hyper(1e-3).state_lower[3], 1e-3);
    }
}
