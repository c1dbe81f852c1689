//! Kalman filter / RTS smoother baseline for linear latent force models, with
//! length-scale selection by maximizing the filter's marginal likelihood.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{augment, ContinuousModel};
use crate::error::{Error, Result};
use crate::gp_ssm::{stationary_covariance, GpPrior};
use crate::integrator::PiecewiseSignal;
use crate::scalar::Real;

/// `x_{k+1} = Ad x_k + Bd u_k + q_k`, `y_k = C x_k + r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLinearModel<T: Real> {
    pub transition: DMatrix<T>,
    pub input: DMatrix<T>,
    pub process_cov: DMatrix<T>,
    pub observation: DMatrix<T>,
    pub measurement_cov: DMatrix<T>,
    pub prior_mean: DVector<T>,
    pub prior_cov: DMatrix<T>,
}

impl<T: Real> DiscreteLinearModel<T> {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput<T: Real> {
    pub predicted_means: Vec<DVector<T>>,
    pub predicted_covs: Vec<DMatrix<T>>,
    pub filtered_means: Vec<DVector<T>>,
    pub filtered_covs: Vec<DMatrix<T>>,
    pub log_likelihood: T,
}

#[derive(Debug, Clone)]
pub struct SmoothingResult<T: Real> {
    pub filtered_means: Vec<DVector<T>>,
    pub filtered_covs: Vec<DMatrix<T>>,
    pub smoothed_means: Vec<DVector<T>>,
    pub smoothed_covs: Vec<DMatrix<T>>,
    pub log_likelihood: T,
}

pub(crate) fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(T::infinity(), |a, b| if b < a { b } else { a })
}

/// Exact discretization through the Van Loan block exponential.
///
/// Returns `Ad = exp(A δ)` and `Qd = ∫₀^δ exp(A s) E Σ Eᵀ exp(Aᵀ s) ds`.
pub fn discretize_lti<T: Real>(
    a: &DMatrix<T>,
    e: &DMatrix<T>,
    spectral: &DMatrix<T>,
    step: T,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if !(step > T::zero()) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let n = a.nrows();
    let qc = e * spectral * e.transpose();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-a));
    big.view_mut((0, n), (n, n)).copy_from(&qc);
    big.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let ex = (big * step).exp();
    if ex.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFiniteExponential);
    }
    let ad = ex.view((n, n), (n, n)).transpose();
    let qd = &ad * ex.view((0, n), (n, n));
    Ok((ad, symmetrize(&qd)))
}

/// `∫₀^δ exp(A s) ds · B`.
pub fn discretize_input<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, step: T) -> Result<DMatrix<T>> {
    let n = a.nrows();
    let m = b.ncols();
    let mut big = DMatrix::zeros(n + m, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    big.view_mut((0, n), (n, m)).copy_from(b);
    let ex = (big * step).exp();
    if ex.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFiniteExponential);
    }
    Ok(ex.view((0, n), (n, m)).into_owned())
}

/// Forward Kalman recursion. `measurements[k]` is the observation at node `k`
/// (`None` for nodes without one); `inputs`, when given, holds one value per
/// transition.
pub fn kalman_filter<T: Real>(
    model: &DiscreteLinearModel<T>,
    measurements: &[Option<DVector<T>>],
    inputs: Option<&PiecewiseSignal<T>>,
) -> Result<FilterOutput<T>> {
    if measurements.is_empty() {
        return Err(Error::WindowTooShort { needed: 1, got: 0 });
    }
    let n = model.state_dim();
    let p = model.observation.nrows();
    let two_pi = T::two_pi();
    let eye = DMatrix::<T>::identity(n, n);
    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(measurements.len()),
        predicted_covs: Vec::with_capacity(measurements.len()),
        filtered_means: Vec::with_capacity(measurements.len()),
        filtered_covs: Vec::with_capacity(measurements.len()),
        log_likelihood: T::zero(),
    };
    let mut mean = model.prior_mean.clone();
    let mut cov = model.prior_cov.clone();
    for (k, y) in measurements.iter().enumerate() {
        if k > 0 {
            mean = &model.transition * &mean;
            if let Some(u) = inputs {
                if u.dim > 0 {
                    mean += &model.input * &u.values[k - 1];
                }
            }
            cov = symmetrize(&(&model.transition * &cov * model.transition.transpose() + &model.process_cov));
        }
        out.predicted_means.push(mean.clone());
        out.predicted_covs.push(cov.clone());
        if let Some(y) = y {
            if y.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "measurement",
                    expected: p,
                    got: y.len(),
                });
            }
            let innovation = y - &model.observation * &mean;
            let s = symmetrize(&(&model.observation * &cov * model.observation.transpose() + &model.measurement_cov));
            let chol = s.clone().cholesky().ok_or(Error::DegenerateInnovation(k))?;
            let log_det = chol
                .l()
                .diagonal()
                .iter()
                .fold(T::zero(), |acc, d| acc + d.ln())
                * T::lit(2.0);
            let solved = chol.solve(&innovation);
            out.log_likelihood -= T::lit(0.5)
                * (T::from_usize_lossy(p) * two_pi.ln() + log_det + innovation.dot(&solved));
            // K = P Cᵀ S⁻¹
            let gain = chol.solve(&(&model.observation * &cov)).transpose();
            mean += &gain * innovation;
            let ikc = &eye - &gain * &model.observation;
            cov = symmetrize(
                &(&ikc * &cov * ikc.transpose() + &gain * &model.measurement_cov * gain.transpose()),
            );
        }
        out.filtered_means.push(mean.clone());
        out.filtered_covs.push(cov.clone());
    }
    Ok(out)
}

/// Backward Rauch–Tung–Striebel pass over a complete filter output.
pub fn rts_smoother<T: Real>(
    model: &DiscreteLinearModel<T>,
    filter: &FilterOutput<T>,
) -> Result<SmoothingResult<T>> {
    let nodes = filter.filtered_means.len();
    let mut means = filter.filtered_means.clone();
    let mut covs = filter.filtered_covs.clone();
    for k in (0..nodes.saturating_sub(1)).rev() {
        let pred = &filter.predicted_covs[k + 1];
        // G = P_k Adᵀ P⁻_{k+1}⁻¹, solved as P⁻ Gᵀ = Ad P_k.
        let rhs = &model.transition * &filter.filtered_covs[k];
        let gt = match pred.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => pred
                .clone()
                .lu()
                .solve(&rhs)
                .ok_or(Error::SingularCovariance(k + 1))?,
        };
        let gain = gt.transpose();
        let dm = &means[k + 1] - &filter.predicted_means[k + 1];
        means[k] = &filter.filtered_means[k] + &gain * dm;
        let dp = &covs[k + 1] - pred;
        covs[k] = symmetrize(&(&filter.filtered_covs[k] + &gain * dp * gain.transpose()));
    }
    Ok(SmoothingResult {
        filtered_means: filter.filtered_means.clone(),
        filtered_covs: filter.filtered_covs.clone(),
        smoothed_means: means,
        smoothed_covs: covs,
        log_likelihood: filter.log_likelihood,
    })
}

/// Linear latent force model plus the noise description used by the baseline.
#[derive(Debug, Clone)]
pub struct BaselineSetup<T: Real> {
    pub base: ContinuousModel<T>,
    pub prior: GpPrior<T>,
    /// Spectral density of the physical disturbance (`q × q`).
    pub process_spectral: DMatrix<T>,
    pub measurement_cov: DMatrix<T>,
    pub step: T,
    /// Prior variance `κ` of each physical state.
    pub physical_prior_variance: T,
    pub prior_mean: Option<DVector<T>>,
}

#[derive(Debug, Clone)]
pub struct LengthScaleSearch<T: Real> {
    pub length_scale: T,
    pub log_likelihood: T,
    /// Coarse log-spaced grid and its likelihood values.
    pub grid: Vec<(T, T)>,
}

impl<T: Real> BaselineSetup<T> {
    pub fn discrete_model(&self, length_scale: T) -> Result<DiscreteLinearModel<T>> {
        let prior = self.prior.with_length_scale(length_scale)?;
        let model = augment(self.base.clone(), prior)?;
        let form = model
            .linear_form()
            .ok_or(Error::RequiresLinearModel("the KF/RTS baseline"))?;
        let n = model.physical_dim();
        let m = model.gp_dim();
        let q = model.base().disturbance_dim();
        if self.process_spectral.shape() != (q, q) {
            return Err(Error::DimensionMismatch {
                context: "process noise",
                expected: q,
                got: self.process_spectral.nrows(),
            });
        }
        let gp = model.gp();
        let mut spectral = DMatrix::zeros(q + m, q + m);
        spectral.view_mut((0, 0), (q, q)).copy_from(&self.process_spectral);
        spectral
            .view_mut((q, q), (m, m))
            .copy_from(&(&gp.l * gp.l.transpose() * gp.q));
        let (ad, qd) = discretize_lti(&form.a, &form.e, &spectral, self.step)?;
        let bd = if form.b.ncols() > 0 {
            discretize_input(&form.a, &form.b, self.step)?
        } else {
            DMatrix::zeros(n + m, 0)
        };
        let mut p0 = DMatrix::zeros(n + m, n + m);
        p0.view_mut((0, 0), (n, n))
            .fill_diagonal(self.physical_prior_variance);
        p0.view_mut((n, n), (m, m))
            .copy_from(&stationary_covariance(gp)?);
        Ok(DiscreteLinearModel {
            transition: ad,
            input: bd,
            process_cov: qd,
            observation: form.c,
            measurement_cov: self.measurement_cov.clone(),
            prior_mean: self
                .prior_mean
                .clone()
                .unwrap_or_else(|| DVector::zeros(n + m)),
            prior_cov: p0,
        })
    }

    pub fn log_likelihood(
        &self,
        length_scale: T,
        measurements: &[Option<DVector<T>>],
        inputs: Option<&PiecewiseSignal<T>>,
    ) -> Result<T> {
        let model = self.discrete_model(length_scale)?;
        Ok(kalman_filter(&model, measurements, inputs)?.log_likelihood)
    }

    pub fn smooth(
        &self,
        length_scale: T,
        measurements: &[Option<DVector<T>>],
        inputs: Option<&PiecewiseSignal<T>>,
    ) -> Result<SmoothingResult<T>> {
        let model = self.discrete_model(length_scale)?;
        let filter = kalman_filter(&model, measurements, inputs)?;
        rts_smoother(&model, &filter)
    }

    /// Maximizes the marginal likelihood over `[lower, upper]`: a log-spaced
    /// grid of `grid_points`, then golden-section search (in `log ℓ`) between
    /// the neighbours of the best grid point.
    pub fn optimize_lengthscale_ml(
        &self,
        measurements: &[Option<DVector<T>>],
        inputs: Option<&PiecewiseSignal<T>>,
        lower: T,
        upper: T,
        grid_points: usize,
    ) -> Result<LengthScaleSearch<T>> {
        let observed = measurements.iter().filter(|m| m.is_some()).count();
        if observed < 2 {
            return Err(Error::WindowTooShort {
                needed: 2,
                got: observed,
            });
        }
        if !(lower > T::zero()) || !(upper > lower) || grid_points < 3 {
            return Err(Error::InvalidConfig(
                "length-scale search needs 0 < lower < upper and at least 3 grid points".into(),
            ));
        }
        let (lo, hi) = (lower.ln(), upper.ln());
        let at = |log_ls: T| self.log_likelihood(log_ls.exp(), measurements, inputs);
        let logs: Vec<T> = (0..grid_points)
            .map(|i| lo + (hi - lo) * T::from_usize_lossy(i) / T::from_usize_lossy(grid_points - 1))
            .collect();
        let values: Vec<T> = logs.iter().map(|l| at(*l)).collect::<Result<_>>()?;
        let best = (0..grid_points)
            .max_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(0);

        let mut a = logs[best.saturating_sub(1)];
        let mut b = logs[(best + 1).min(grid_points - 1)];
        let ratio = (T::lit(5.0).sqrt() - T::one()) * T::lit(0.5);
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let mut fc = at(c)?;
        let mut fd = at(d)?;
        for _ in 0..40 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = at(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = at(d)?;
            }
        }
        let (mut arg, mut val) = if fc > fd { (c, fc) } else { (d, fd) };
        if values[best] >= val {
            arg = logs[best];
            val = values[best];
        }
        Ok(LengthScaleSearch {
            length_scale: arg.exp(),
            log_likelihood: val,
            grid: logs
                .iter()
                .zip(values.iter())
                .map(|(l, v)| (l.exp(), *v))
                .collect(),
        })
    }
}
