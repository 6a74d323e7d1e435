//! Closed-form Flow-Matching velocities and their divergences.
//!
//! With `p0 = N(0, I)` and the linear path `x_t = t·x₁ + (1−t)·x₀`, the
//! optimal velocity is a kernel-weighted regression over data samples.
//! All expectations here are Monte Carlo averages over the supplied batch.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::ensure_dim;
use crate::kernels::{weighted_stats_with, KernelSpec, Orientation, WeightedStats};
use crate::{Error, Result};

/// A Gaussian data distribution `N(μ, Σ)` used as an analytic oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianTarget {
    /// `cov` is row-major `d×d`.
    pub fn new(mean: &[f64], cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidInput("gaussian target needs d ≥ 1".into()));
        }
        ensure_dim(d * d, cov.len(), "covariance entries")?;
        let cov = DMatrix::from_row_slice(d, d, cov);
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?
            .l();
        Ok(GaussianTarget {
            mean: DVector::from_column_slice(mean),
            cov,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Covariance of `p_t = N(tμ, t²Σ + (1−t)²I)`.
    fn marginal_cov(&self, t: f64) -> DMatrix<f64> {
        let d = self.dim();
        &self.cov * (t * t) + DMatrix::identity(d, d) * ((1.0 - t) * (1.0 - t))
    }

    /// `n` draws from `N(μ, Σ)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        self.sample_marginal(1.0, n, rng)
    }

    /// `n` exact draws from the path marginal `p_t`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, t: f64, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let chol = if t == 1.0 {
            self.chol.clone()
        } else {
            self.marginal_cov(t)
                .cholesky()
                .expect("t²Σ + (1−t)²I is positive definite")
                .l()
        };
        let mut out = Array2::zeros((n, d));
        let mut z = DVector::zeros(d);
        for mut row in out.rows_mut() {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let y = &chol * &z + &self.mean * t;
            row.iter_mut().zip(y.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }

    /// `n` low-discrepancy points of `p_t`: a randomly shifted Halton
    /// sequence pushed through Box–Muller and the marginal Cholesky factor.
    pub fn sample_marginal_qmc<R: Rng + ?Sized>(
        &self,
        t: f64,
        n: usize,
        rng: &mut R,
    ) -> Array2<f64> {
        const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
        let d = self.dim();
        let pairs = d.div_ceil(2);
        assert!(
            2 * pairs <= PRIMES.len(),
            "quasi-random sampling supports up to 16 dimensions"
        );
        let chol = if t == 1.0 {
            self.chol.clone()
        } else {
            self.marginal_cov(t)
                .cholesky()
                .expect("t²Σ + (1−t)²I is positive definite")
                .l()
        };
        let shift: Vec<f64> = (0..2 * pairs).map(|_| rng.random::<f64>()).collect();
        let mut out = Array2::zeros((n, d));
        let mut z = DVector::zeros(d);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for j in 0..pairs {
                let u1 = (radical_inverse(i as u64 + 1, PRIMES[2 * j]) + shift[2 * j]).fract();
                let u2 =
                    (radical_inverse(i as u64 + 1, PRIMES[2 * j + 1]) + shift[2 * j + 1]).fract();
                let r = (-2.0 * (1.0 - u1).ln()).sqrt();
                let a = std::f64::consts::TAU * u2;
                z[2 * j] = r * a.cos();
                if 2 * j + 1 < d {
                    z[2 * j + 1] = r * a.sin();
                }
            }
            let y = &chol * &z + &self.mean * t;
            row.iter_mut().zip(y.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }
}

/// Van der Corput radical inverse of `i` in `base`.
fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

fn check_open_time(t: f64, what: &str) -> Result<()> {
    if (0.0..1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{what} requires t in [0, 1), got {t}; use the terminal drift at t = 1"
        )))
    }
}

fn data_stats(
    x: &[f64],
    t: f64,
    data: &ArrayView2<'_, f64>,
    orientation: Orientation,
    spec: &KernelSpec,
) -> Result<WeightedStats> {
    weighted_stats_with(t, data, x, orientation, None, spec)
}

/// `u_t(x) = (m(x) − x)/(1−t)` with `m` the mean of `data` under `k_t(x₁, x)`.
pub fn velocity(
    x: &[f64],
    t: f64,
    data: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    check_open_time(t, "velocity")?;
    let s = data_stats(x, t, data, Orientation::CenterFirst, spec)?;
    Ok(s.mean
        .iter()
        .zip(x)
        .map(|(m, x)| (m - x) / (1.0 - t))
        .collect())
}

/// Exact velocity for `p1 = N(μ, Σ)`:
/// `E[x₁|x_t=x] = μ + tΣ(t²Σ + (1−t)²I)⁻¹(x − tμ)`.
pub fn gaussian_oracle_velocity(x: &[f64], t: f64, target: &GaussianTarget) -> Result<Vec<f64>> {
    check_open_time(t, "gaussian oracle velocity")?;
    ensure_dim(target.dim(), x.len(), "query dimension")?;
    let xv = DVector::from_column_slice(x);
    let resid = &xv - &target.mean * t;
    let solved = target
        .marginal_cov(t)
        .cholesky()
        .ok_or_else(|| Error::Numerical("marginal covariance lost definiteness".into()))?
        .solve(&resid);
    let cond = &target.mean + (&target.cov * solved) * t;
    Ok(cond
        .iter()
        .zip(x)
        .map(|(e, x)| (e - x) / (1.0 - t))
        .collect())
}

/// Endpoint velocity: mean of `(x − x_t)/(1−t)` under `k_t(x, x_t)` over
/// samples of `p_t`.
pub fn endpoint_velocity(
    x: &[f64],
    t: f64,
    pt_samples: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    check_open_time(t, "endpoint velocity")?;
    let s = data_stats(x, t, pt_samples, Orientation::QueryFirst, spec)?;
    Ok(x.iter()
        .zip(&s.mean)
        .map(|(x, m)| (x - m) / (1.0 - t))
        .collect())
}

/// `∇·u_t(x) = [(2t/c)(s − ‖m‖²) − d]/(1−t)` with `c = 2(1−t)² + ε`.
pub fn divergence_velocity(
    x: &[f64],
    t: f64,
    data: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<f64> {
    check_open_time(t, "velocity divergence")?;
    let s = data_stats(x, t, data, Orientation::CenterFirst, spec)?;
    let d = x.len() as f64;
    Ok((2.0 * t / spec.scale(t) * s.variance() - d) / (1.0 - t))
}

/// Divergence of [`endpoint_velocity`]: `[d − (2t/c)(s − ‖m‖²)]/(1−t)`.
pub fn divergence_endpoint(
    x: &[f64],
    t: f64,
    pt_samples: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<f64> {
    check_open_time(t, "endpoint divergence")?;
    let s = data_stats(x, t, pt_samples, Orientation::QueryFirst, spec)?;
    let d = x.len() as f64;
    Ok((d - 2.0 * t / spec.scale(t) * s.variance()) / (1.0 - t))
}
