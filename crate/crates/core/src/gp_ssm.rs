//! State-space realizations of Matérn Gaussian-process priors.
//!
//! A Matérn process with smoothness `ν = p + 1/2` is exactly the output of a
//! `p + 1` dimensional linear SDE in companion form driven by white noise.
//! The companion coefficients come from expanding `(s + λ)^(p+1)`; the noise
//! spectral density `q` is fixed so that the stationary variance of the first
//! state equals the signal variance, which for Matérn kernels is the same as
//! matching the power spectral density exactly.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Matérn GP prior on a scalar latent force.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrior<T: Real> {
    order: u32,
    length_scale: T,
    signal_variance: T,
}

impl<T: Real> GpPrior<T> {
    pub fn new(order: u32, length_scale: T, signal_variance: T) -> Result<Self> {
        check_order(order)?;
        if !(length_scale > T::zero()) || !length_scale.is_finite_value() {
            return Err(Error::InvalidPrior(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        if !(signal_variance > T::zero()) || !signal_variance.is_finite_value() {
            return Err(Error::InvalidPrior(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        Ok(Self {
            order,
            length_scale,
            signal_variance,
        })
    }

    /// Matérn order `p`; smoothness is `ν = p + 1/2`.
    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn length_scale(&self) -> T {
        self.length_scale
    }

    pub fn signal_variance(&self) -> T {
        self.signal_variance
    }

    pub fn nu(&self) -> T {
        T::from_u32(self.order).unwrap() + T::lit(0.5)
    }

    /// `λ = sqrt(2ν) / ℓ`.
    pub fn lambda(&self) -> T {
        lambda_for(self.order, self.length_scale)
    }

    /// Dimension of the state-space realization, `p + 1`.
    pub fn state_dim(&self) -> usize {
        self.order as usize + 1
    }

    pub fn with_length_scale(&self, length_scale: T) -> Result<Self> {
        Self::new(self.order, length_scale, self.signal_variance)
    }
}

/// Companion-form linear SDE `ẋ = F x + L w`, `f = C x`, with `E[w w'] = q δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmRealization<T: Real> {
    pub f: DMatrix<T>,
    pub l: DVector<T>,
    pub c: RowDVector<T>,
    pub q: T,
}

impl<T: Real> SsmRealization<T> {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// Coefficients `a_0 … a_{m-1}` of the characteristic polynomial, read off
    /// the last row of `F`.
    pub fn coefficients(&self) -> Vec<T> {
        let m = self.dim();
        (0..m).map(|j| -self.f[(m - 1, j)]).collect()
    }

    /// Largest real part over the eigenvalues of `F`.
    pub fn spectral_abscissa(&self) -> T {
        self.f
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }
}

fn check_order(order: u32) -> Result<()> {
    match order {
        1 | 2 => Ok(()),
        other => Err(Error::UnsupportedMaternOrder(other)),
    }
}

pub(crate) fn lambda_for<T: Real>(order: u32, length_scale: T) -> T {
    let nu = T::from_u32(order).unwrap() + T::lit(0.5);
    (T::lit(2.0) * nu).sqrt() / length_scale
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Companion matrix of `(s + λ)^(p+1)`.
pub fn companion_matrix<T: Real>(order: u32, lambda: T) -> Result<DMatrix<T>> {
    check_order(order)?;
    let m = order as usize + 1;
    let mut f = DMatrix::zeros(m, m);
    for i in 0..m - 1 {
        f[(i, i + 1)] = T::one();
    }
    for j in 0..m {
        // a_j = C(m, j) λ^(m-j)
        let a = T::lit(binomial(m as u32, j as u32)) * lambda.powi((m - j) as i32);
        f[(m - 1, j)] = -a;
    }
    Ok(f)
}

/// White-noise spectral density giving a stationary variance of `σ²`:
/// `q = σ² (p!)² / (2p)! · (2λ)^(2p+1)`.
pub fn noise_density<T: Real>(order: u32, lambda: T, signal_variance: T) -> Result<T> {
    check_order(order)?;
    let p = order;
    let fact = |n: u32| (1..=n).fold(1.0, |acc, k| acc * f64::from(k));
    let ratio = fact(p) * fact(p) / fact(2 * p);
    Ok(signal_variance
        * T::lit(ratio)
        * (T::lit(2.0) * lambda).powi(2 * p as i32 + 1))
}

pub fn matern_ssm<T: Real>(prior: &GpPrior<T>) -> Result<SsmRealization<T>> {
    let lambda = prior.lambda();
    let m = prior.state_dim();
    let f = companion_matrix(prior.order, lambda)?;
    let mut l = DVector::zeros(m);
    l[m - 1] = T::one();
    let mut c = RowDVector::zeros(m);
    c[0] = T::one();
    let q = noise_density(prior.order, lambda, prior.signal_variance)?;
    Ok(SsmRealization { f, l, c, q })
}

/// Solves `F Σ + Σ Fᵀ + L q Lᵀ = 0` for the stationary covariance.
///
/// The `m²` unknowns are solved directly through the Kronecker form
/// `(I ⊗ F + F ⊗ I) vec(Σ) = −vec(L q Lᵀ)`.
pub fn stationary_covariance<T: Real>(ssm: &SsmRealization<T>) -> Result<DMatrix<T>> {
    let abscissa = ssm.spectral_abscissa();
    if !(abscissa < T::zero()) {
        return Err(Error::UnstableRealization(abscissa.as_f64()));
    }
    let forcing = &ssm.l * ssm.l.transpose() * ssm.q;
    lyapunov_continuous(&ssm.f, &forcing)
}

/// Solves `A X + X Aᵀ + W = 0` by vectorization. Suitable for small `A` only.
pub(crate) fn lyapunov_continuous<T: Real>(a: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>> {
    let m = a.nrows();
    let eye = DMatrix::<T>::identity(m, m);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    // Column-major vec, matching the Kronecker identity vec(AXB) = (Bᵀ⊗A) vec(X).
    let rhs = DVector::from_iterator(m * m, w.iter().map(|v| -*v));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::UnstableRealization(0.0))?;
    let x = DMatrix::from_column_slice(m, m, sol.as_slice());
    Ok((&x + x.transpose()) * T::lit(0.5))
}

/// Power spectral density `C (F + jωI)⁻¹ L q Lᵀ ((F − jωI)⁻¹)ᵀ Cᵀ`.
pub fn spectral_density<T: Real>(ssm: &SsmRealization<T>, omega: T) -> Result<T> {
    let m = ssm.dim();
    let shifted = |sign: T| {
        DMatrix::from_fn(m, m, |i, j| {
            let re = ssm.f[(i, j)];
            let im = if i == j { sign * omega } else { T::zero() };
            Complex::new(re, im)
        })
    };
    let l = DVector::from_iterator(m, ssm.l.iter().map(|v| Complex::new(*v, T::zero())));
    let c = DVector::from_iterator(m, ssm.c.iter().map(|v| Complex::new(*v, T::zero())));
    let resonant = || Error::ResonantFrequency(omega.as_f64());
    // a = C (F + jωI)⁻¹ L, b = Lᵀ ((F − jωI)⁻¹)ᵀ Cᵀ = C (F − jωI)⁻¹ L.
    let left = shifted(T::one()).lu().solve(&l).ok_or_else(resonant)?;
    let right = shifted(-T::one()).lu().solve(&l).ok_or_else(resonant)?;
    let a = c.dot(&left);
    let b = c.dot(&right);
    let s = a * b * Complex::new(ssm.q, T::zero());
    Ok(s.re)
}

/// Closed-form Matérn spectral density matching [`matern_ssm`].
pub fn matern_spectral_density<T: Real>(prior: &GpPrior<T>, omega: T) -> Result<T> {
    let lambda = prior.lambda();
    let q = noise_density(prior.order, lambda, prior.signal_variance)?;
    let denom = (lambda * lambda + omega * omega).powi(prior.order as i32 + 1);
    Ok(q / denom)
}

/// Matérn covariance `k(τ)` for `ν = 3/2` and `ν = 5/2`.
pub fn matern_covariance<T: Real>(prior: &GpPrior<T>, tau: T) -> Result<T> {
    let r = prior.lambda() * tau.abs();
    let poly = match prior.order {
        1 => T::one() + r,
        2 => T::one() + r + r * r / T::lit(3.0),
        other => return Err(Error::UnsupportedMaternOrder(other)),
    };
    Ok(prior.signal_variance * poly * (-r).exp())
}
