#![allow(dead_code)]

use latent_force::dynamics::{augment, AugmentedModel, ConstraintSet, ContinuousModel, LinearModel};
use latent_force::gp_ssm::GpPrior;
use latent_force::kfrts::{kalman_filter, rts_smoother, DiscreteLinearModel};
use latent_force::ose::EstimationConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Linear-Gaussian estimation problem with random weights and data.
pub struct LinearInstance {
    pub model: AugmentedModel<f64>,
    pub config: EstimationConfig<f64>,
    pub prior: DVector<f64>,
    /// `N + 1` node-aligned samples; the last one is unused by the estimators.
    pub measurements: Vec<DVector<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random stable-ish linear base with `physical` states and a Matérn-3/2 prior.
pub fn random_instance(seed: u64, physical: usize, intervals: usize) -> LinearInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = physical;
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -uniform(&mut rng, 0.2, 1.5)
        } else {
            uniform(&mut rng, -0.5, 0.5)
        }
    });
    let g = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.3, 1.2));
    let c = DMatrix::from_fn(1, n, |_, j| if j == 0 { 1.0 } else { uniform(&mut rng, -0.5, 0.5) });
    let lin = LinearModel::new(a, DMatrix::zeros(n, 0), g, c).unwrap();
    let prior = GpPrior::new(1, uniform(&mut rng, 0.5, 2.0), uniform(&mut rng, 0.5, 2.0)).unwrap();
    let model = augment(ContinuousModel::new(lin), prior).unwrap();
    let na = model.state_dim();
    let nw = model.disturbance_dim();
    let step = uniform(&mut rng, 0.05, 0.2);
    let q = DMatrix::from_diagonal(&DVector::from_fn(nw, |_, _| uniform(&mut rng, 0.5, 5.0)));
    let r = DMatrix::from_element(1, 1, uniform(&mut rng, 1.0, 10.0));
    let p = DMatrix::from_diagonal(&DVector::from_fn(na, |_, _| uniform(&mut rng, 0.5, 2.0)));
    let mut config = EstimationConfig::new(&model, q, r, p, step).unwrap();
    config.constraints = ConstraintSet::unbounded(na, nw, 1);
    config.substeps = 20;
    let x0 = DVector::from_fn(na, |_, _| normal(&mut rng));
    let measurements = (0..=intervals)
        .map(|_| DVector::from_element(1, normal(&mut rng)))
        .collect();
    LinearInstance {
        model,
        config,
        prior: x0,
        measurements,
    }
}

/// Exact discretization by the block exponential of `[[A, E], [0, 0]] δ`:
/// `(Φ, Γ)` with `x⁺ = Φ x + Γ w` for `w` held over the interval.
pub fn exact_discretization(a: &DMatrix<f64>, e: &DMatrix<f64>, step: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = e.ncols();
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, m)).copy_from(e);
    let expm = (block * step).exp();
    (
        expm.view((0, 0), (n, n)).into_owned(),
        expm.view((0, n), (n, m)).into_owned(),
    )
}

/// RTS smoothed means of the Gaussian model whose negative log posterior is
/// the FIE cost: prior covariance `(4P)⁻¹`, disturbance covariance
/// `(4δQ)⁻¹`, measurement covariance `(2R)⁻¹`, measurements at nodes `< N`.
pub fn smoother_oracle(inst: &LinearInstance, measurements: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let form = inst.model.linear_form().expect("linear model");
    let step = inst.config.step;
    let (phi, gamma) = exact_discretization(&form.a, &form.e, step);
    let w_cov = (&inst.config.q * (4.0 * step)).try_inverse().unwrap();
    let na = phi.nrows();
    let discrete = DiscreteLinearModel {
        transition: phi,
        input: DMatrix::zeros(na, 0),
        process_cov: &gamma * w_cov * gamma.transpose(),
        observation: form.c.clone(),
        measurement_cov: (&inst.config.r * 2.0).try_inverse().unwrap(),
        prior_mean: inst.prior.clone(),
        prior_cov: (&inst.config.p * 4.0).try_inverse().unwrap(),
    };
    let last = measurements.len() - 1;
    let observed: Vec<Option<DVector<f64>>> = measurements
        .iter()
        .enumerate()
        .map(|(k, y)| (k < last).then(|| y.clone()))
        .collect();
    let filter = kalman_filter(&discrete, &observed, None).unwrap();
    rts_smoother(&discrete, &filter).unwrap().smoothed_means
}

pub fn max_node_deviation(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Textbook Matérn spectral densities for ν = 3/2 and ν = 5/2.
pub fn matern_spectrum_closed_form(order: u32, length_scale: f64, variance: f64, omega: f64) -> f64 {
    let nu = order as f64 + 0.5;
    let lambda = (2.0 * nu).sqrt() / length_scale;
    let base = lambda * lambda + omega * omega;
    match order {
        1 => 4.0 * variance * lambda.powi(3) / (base * base),
        2 => 16.0 / 3.0 * variance * lambda.powi(5) / base.powi(3),
        _ => unreachable!(),
    }
}

pub fn matern_covariance_closed_form(order: u32, length_scale: f64, variance: f64, tau: f64) -> f64 {
    let tau = tau.abs();
    match order {
        1 => {
            let r = 3f64.sqrt() * tau / length_scale;
            variance * (1.0 + r) * (-r).exp()
        }
        2 => {
            let r = 5f64.sqrt() * tau / length_scale;
            variance * (1.0 + r + 5.0 * tau * tau / (3.0 * length_scale * length_scale)) * (-r).exp()
        }
        _ => unreachable!(),
    }
}

/// Composite Simpson rule on `[a, b]` with an even number of panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let h = (b - a) / panels as f64;
    let mut sum = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + h * i as f64);
    }
    sum * h / 3.0
}

/// Fourier transform of the covariance, `2 ∫₀^∞ k(τ) cos(ωτ) dτ`, by quadrature.
pub fn spectrum_by_quadrature(order: u32, length_scale: f64, variance: f64, omega: f64) -> f64 {
    let upper = 60.0 * length_scale;
    2.0 * simpson(
        |tau| matern_covariance_closed_form(order, length_scale, variance, tau) * (omega * tau).cos(),
        0.0,
        upper,
        200_000,
    )
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}
