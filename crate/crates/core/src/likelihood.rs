//! Likelihood learning for `G = log p₁^θ − log p0`.
//!
//! The regression target at a point `x` is
//!
//! ```text
//! T(x) = G(x) − ½∇G(x)·(m⁺ − m⁻) − (1/ε)[(s⁺ − ‖m⁺‖²) − (s⁻ − ‖m⁻‖²)]
//! ```
//!
//! with `(m⁺, s⁺)` the terminal-kernel statistics of data around `x` and
//! `(m⁻, s⁻)` those of importance-weighted model samples. `T` is detached.
//! Model samples are candidates from a per-batch Gaussian mixture centred on
//! the data batch, weighted by `p0·e^G / p_ref`.

use std::f64::consts::PI;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{log_sum_exp, BaseDistribution};
use crate::drift::squared_error;
use crate::error::{ensure_dim, ensure_finite};
use crate::kernels::{terminal_moments, BatchMoments, KernelFamily, KernelSpec};
use crate::net::{ForwardCache, Mlp};
use crate::parallel::map_rows;
use crate::{Batch, Error, Result};

/// `p_ref(x) = (1/B) Σ N(x; cᵢ, σ²I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMixture {
    centers: Batch,
    sigma: f64,
}

impl ReferenceMixture {
    pub fn new(centers: Batch, sigma: f64) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::InvalidInput(
                "reference mixture needs centers".into(),
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "reference spread must be positive, got {sigma}"
            )));
        }
        Ok(ReferenceMixture { centers, sigma })
    }

    /// 0.25 × the mean per-axis standard deviation of `data`.
    pub fn default_sigma(data: &ArrayView2<'_, f64>) -> f64 {
        0.25 * data.std_axis(Axis(0), 0.0).mean().unwrap_or(1.0)
    }

    pub fn centers(&self) -> &Batch {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn log_density(&self, x: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let d = self.centers.ncols() as f64;
        let spec = KernelSpec::gaussian(2.0 * self.sigma * self.sigma)?;
        let m = terminal_moments(x, &self.centers.view(), None, false, &spec)?;
        let c = (self.centers.nrows() as f64).ln()
            + 0.5 * d * (2.0 * PI * self.sigma * self.sigma).ln();
        Ok(m.log_norm.iter().map(|l| l - c).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let (b, d) = self.centers.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let i = rng.random_range(0..b);
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                row[k] = self.centers[[i, k]] + self.sigma * z;
            }
        }
        out
    }
}

/// Points with self-normalized importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSampleSet {
    pub points: Batch,
    pub weights: Vec<f64>,
    /// Unnormalized log-weights.
    pub log_weights: Vec<f64>,
    pub ess: f64,
}

impl WeightedSampleSet {
    pub fn from_log_weights(points: Batch, log_weights: Vec<f64>) -> Result<Self> {
        ensure_dim(points.nrows(), log_weights.len(), "importance log-weights")?;
        if log_weights
            .iter()
            .any(|w| w.is_nan() || *w == f64::INFINITY)
        {
            return Err(Error::Numerical(
                "importance log-weights contain NaN or +inf".into(),
            ));
        }
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::Numerical("all importance weights vanish".into()));
        }
        let weights: Vec<f64> = log_weights.iter().map(|l| (l - lse).exp()).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Ok(WeightedSampleSet {
            points,
            weights,
            log_weights,
            ess,
        })
    }

    /// Unit raw weights.
    pub fn uniform(points: Batch) -> Result<Self> {
        let n = points.nrows();
        Self::from_log_weights(points, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Where the likelihood loss is enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleRegion {
    /// Uniform over an axis-aligned box.
    EulerianUniform { low: Vec<f64>, high: Vec<f64> },
    /// `ψ(x₀) + σ·η` around generated samples.
    LagrangianGaussian { sigma: f64 },
}

impl SampleRegion {
    pub fn default_box() -> Self {
        SampleRegion::EulerianUniform {
            low: vec![-4.0, -4.0],
            high: vec![4.0, 4.0],
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            SampleRegion::EulerianUniform { low, high } => {
                if low.len() != d || high.len() != d {
                    return Err(Error::Config(format!(
                        "region box must have {d} coordinates per corner"
                    )));
                }
                if low.iter().chain(high).any(|v| !v.is_finite())
                    || low.iter().zip(high).any(|(l, h)| l > h)
                {
                    return Err(Error::Config(
                        "region box bounds must be finite with low ≤ high".into(),
                    ));
                }
            }
            SampleRegion::LagrangianGaussian { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!(
                        "lagrangian spread must be ≥ 0, got {sigma}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn draw_sample_points<R: Rng + ?Sized>(
    region: &SampleRegion,
    flowmap: Option<&Mlp>,
    base: &BaseDistribution,
    n: usize,
    rng: &mut R,
) -> Result<Batch> {
    region.validate(base.dim)?;
    match region {
        SampleRegion::EulerianUniform { low, high } => {
            Ok(Array2::from_shape_fn((n, base.dim), |(_, k)| {
                low[k] + (high[k] - low[k]) * rng.random::<f64>()
            }))
        }
        SampleRegion::LagrangianGaussian { sigma } => {
            let psi = flowmap.ok_or_else(|| {
                Error::Config(
                    "lagrangian sample region requires a trained generator checkpoint".into(),
                )
            })?;
            let x0 = base.sample(n, rng);
            let mut x = psi.forward(&x0.view())?;
            if *sigma > 0.0 {
                x.mapv_inplace(|v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + sigma * z
                });
            }
            Ok(x)
        }
    }
}

fn scalar_output(g: &Mlp) -> Result<()> {
    ensure_dim(1, g.output_dim(), "likelihood model output")
}

fn importance_cached(
    candidates: Batch,
    g: &Mlp,
    base: &BaseDistribution,
    reference: &ReferenceMixture,
) -> Result<(WeightedSampleSet, ForwardCache)> {
    scalar_output(g)?;
    let (gv, cache) = g.forward_cached(&candidates.view())?;
    ensure_finite(&gv, "G at importance candidates")?;
    let lp0 = base.log_density(&candidates.view())?;
    let lref = reference.log_density(&candidates.view())?;
    let raw: Vec<f64> = (0..candidates.nrows())
        .map(|i| lp0[i] + gv[[i, 0]] - lref[i])
        .collect();
    Ok((WeightedSampleSet::from_log_weights(candidates, raw)?, cache))
}

/// Weights `p0(x)e^{G(x)}/p_ref(x)` of candidates drawn from `reference`.
pub fn importance_weights(
    candidates: Batch,
    g: &Mlp,
    base: &BaseDistribution,
    reference: &ReferenceMixture,
) -> Result<WeightedSampleSet> {
    Ok(importance_cached(candidates, g, base, reference)?.0)
}

fn require_gaussian(spec: &KernelSpec) -> Result<()> {
    if spec.family == KernelFamily::GaussianSquared {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "likelihood learning needs the squared-exponential kernel".into(),
        ))
    }
}

/// Model-side moments. Equal raw weights are passed as "no prior" so that a
/// uniform set reproduces the data-side statistics bit for bit.
fn model_moments(
    points: &ArrayView2<'_, f64>,
    set: &WeightedSampleSet,
    spec: &KernelSpec,
) -> Result<BatchMoments> {
    let first = set.log_weights.first().copied().unwrap_or(0.0);
    if set.log_weights.iter().all(|l| *l == first) {
        let mut m = terminal_moments(points, &set.points.view(), None, false, spec)?;
        m.log_norm.iter_mut().for_each(|l| *l += first);
        Ok(m)
    } else {
        terminal_moments(
            points,
            &set.points.view(),
            Some(&set.log_weights),
            false,
            spec,
        )
    }
}

/// Detached targets with their ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTargets {
    pub g: Vec<f64>,
    pub grad_g: Batch,
    pub target: Vec<f64>,
    pub ess_data: Vec<f64>,
    pub ess_model: Vec<f64>,
    /// `(1/B) Σ k₁(x₁ⁱ, x)` over data.
    pub data_kernel_mean: Vec<f64>,
    /// `(1/n) Σ e^{ℓⱼ} k₁(x, cⱼ)` with unnormalized log-weights `ℓ`.
    pub model_kernel_mean: Vec<f64>,
}

fn targets_cached(
    g: &Mlp,
    points: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    model_set: &WeightedSampleSet,
    spec: &KernelSpec,
) -> Result<(LikelihoodTargets, ForwardCache)> {
    require_gaussian(spec)?;
    scalar_output(g)?;
    if data.nrows() == 0 || model_set.is_empty() {
        return Err(Error::InvalidInput(
            "likelihood statistics need data and model samples".into(),
        ));
    }
    let n = points.nrows();
    let (gv, cache) = g.forward_cached(points)?;
    ensure_finite(&gv, "G at sample points")?;
    let grad_g = g.input_gradient_cached(&cache, &Array2::ones((n, 1)).view())?;
    if grad_g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite ∇G in likelihood target".into(),
        ));
    }
    let plus = terminal_moments(points, data, None, false, spec)?;
    let minus = model_moments(points, model_set, spec)?;
    let inv_eps = 1.0 / spec.epsilon;
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let drift: f64 = (0..points.ncols())
            .map(|k| grad_g[[i, k]] * (plus.shift[[i, k]] - minus.shift[[i, k]]))
            .sum();
        let t = gv[[i, 0]] - 0.5 * drift - inv_eps * (plus.variance[i] - minus.variance[i]);
        if !t.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite likelihood target at point {i}"
            )));
        }
        target.push(t);
    }
    let ln_b = (data.nrows() as f64).ln();
    let ln_n = (model_set.len() as f64).ln();
    let out = LikelihoodTargets {
        g: gv.column(0).to_vec(),
        grad_g,
        target,
        ess_data: plus.ess,
        ess_model: minus.ess,
        data_kernel_mean: plus.log_norm.iter().map(|l| (l - ln_b).exp()).collect(),
        model_kernel_mean: minus.log_norm.iter().map(|l| (l - ln_n).exp()).collect(),
    };
    Ok((out, cache))
}

pub fn likelihood_targets(
    g: &Mlp,
    points: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    model_set: &WeightedSampleSet,
    spec: &KernelSpec,
) -> Result<LikelihoodTargets> {
    Ok(targets_cached(g, points, data, model_set, spec)?.0)
}

/// Single-point form of [`likelihood_targets`].
pub fn likelihood_target(
    x: &[f64],
    data: &ArrayView2<'_, f64>,
    model_set: &WeightedSampleSet,
    g: &Mlp,
    spec: &KernelSpec,
) -> Result<f64> {
    let p = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(likelihood_targets(g, &p.view(), data, model_set, spec)?.target[0])
}

#[derive(Debug, Clone)]
pub struct LikelihoodLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub targets: LikelihoodTargets,
}

/// `mean (G(x) − sg(T(x)))²` over `points`.
pub fn likelihood_loss(
    g: &Mlp,
    points: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    model_set: &WeightedSampleSet,
    spec: &KernelSpec,
) -> Result<LikelihoodLoss> {
    let (targets, cache) = targets_cached(g, points, data, model_set, spec)?;
    let (loss, upstream) = regression_upstream(&targets);
    let grads = g.backward_cached(&cache, &upstream.view())?.params;
    Ok(LikelihoodLoss {
        loss,
        grads,
        targets,
    })
}

fn regression_upstream(t: &LikelihoodTargets) -> (f64, Batch) {
    let n = t.g.len();
    let gv = Array2::from_shape_vec((n, 1), t.g.clone()).expect("column");
    let tv = Array2::from_shape_vec((n, 1), t.target.clone()).expect("column");
    squared_error(&gv.view(), &tv.view())
}

/// `mean_x (E_data[k₁(x₁, x)] − E_model[k₁(x, x₁)])²`.
///
/// The model expectation uses the unnormalized weights `e^{ℓⱼ}/n`, so the
/// penalty sees the total mass of `p0·e^G`.
pub fn normalization_loss(
    points: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    model_set: &WeightedSampleSet,
    spec: &KernelSpec,
) -> Result<f64> {
    require_gaussian(spec)?;
    let plus = terminal_moments(points, data, None, false, spec)?;
    let minus = model_moments(points, model_set, spec)?;
    let ln_b = (data.nrows() as f64).ln();
    let ln_n = (model_set.len() as f64).ln();
    Ok(norm_penalty(&plus.log_norm, &minus.log_norm, ln_b, ln_n))
}

fn norm_penalty(plus: &[f64], minus: &[f64], ln_b: f64, ln_n: f64) -> f64 {
    let n = plus.len() as f64;
    plus.iter()
        .zip(minus)
        .map(|(a, b)| {
            let r = (a - ln_b).exp() - (b - ln_n).exp();
            r * r
        })
        .sum::<f64>()
        / n
}

/// One evaluation of `L + λ·L_norm` and its parameter gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub norm_loss: f64,
    pub total: f64,
    pub grads: Vec<f64>,
    pub importance_ess: f64,
    pub targets: LikelihoodTargets,
}

/// Full training objective on one batch.
///
/// `L_norm` is differentiated through `G` at the candidates; `L` only
/// through the leading `G(x)`.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_objective(
    g: &Mlp,
    points: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    candidates: Batch,
    base: &BaseDistribution,
    reference: &ReferenceMixture,
    lambda: f64,
    spec: &KernelSpec,
) -> Result<ObjectiveOutput> {
    let (set, cand_cache) = importance_cached(candidates, g, base, reference)?;
    let (targets, cache) = targets_cached(g, points, data, &set, spec)?;
    let (loss, upstream) = regression_upstream(&targets);
    let mut grads = g.backward_cached(&cache, &upstream.view())?.params;

    let p = points.nrows() as f64;
    let n = set.len() as f64;
    let resid: Vec<f64> = targets
        .data_kernel_mean
        .iter()
        .zip(&targets.model_kernel_mean)
        .map(|(a, b)| a - b)
        .collect();
    let norm_loss = resid.iter().map(|r| r * r).sum::<f64>() / p;
    if lambda != 0.0 {
        // ∂L_norm/∂G(cⱼ) = −(2/P) Σ_x (a_x − b_x) e^{ℓⱼ} k(x, cⱼ) / n
        let pts = points.as_standard_layout();
        let cands = set.points.as_standard_layout();
        let d = pts.ncols();
        let inv_eps = 1.0 / spec.epsilon;
        let ln_n = n.ln();
        let upstream_c: Vec<f64> = map_rows(set.len(), |j| {
            let c = cands.row(j);
            let mut acc = 0.0;
            for (x, r) in pts.rows().into_iter().zip(&resid) {
                let mut d2 = 0.0;
                for k in 0..d {
                    let t = x[k] - c[k];
                    d2 += t * t;
                }
                acc += r * (set.log_weights[j] - d2 * inv_eps - ln_n).exp();
            }
            -2.0 * acc / p
        });
        let up = Array2::from_shape_vec((set.len(), 1), upstream_c).expect("column");
        let gn = g.backward_cached(&cand_cache, &up.view())?.params;
        grads
            .iter_mut()
            .zip(&gn)
            .for_each(|(a, b)| *a += lambda * b);
    }
    Ok(ObjectiveOutput {
        loss,
        norm_loss,
        total: loss + lambda * norm_loss,
        grads,
        importance_ess: set.ess,
        targets,
    })
}

/// `log p0(x) + G(x)` per row.
pub fn log_density(g: &Mlp, base: &BaseDistribution, x: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    scalar_output(g)?;
    let gv = g.forward(x)?;
    let lp0 = base.log_density(x)?;
    Ok(lp0.iter().zip(gv.column(0)).map(|(a, b)| a + b).collect())
}

pub fn density(g: &Mlp, base: &BaseDistribution, x: &[f64]) -> Result<f64> {
    let p = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(log_density(g, base, &p.view())?[0].exp())
}

pub enum IntegralMethod<'a> {
    /// Trapezoidal rule on a `res × res` grid over `[low, high]`.
    Grid {
        low: [f64; 2],
        high: [f64; 2],
        res: usize,
    },
    Importance {
        reference: &'a ReferenceMixture,
        n: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub method: String,
    pub estimate: f64,
    pub n: usize,
}

/// Regular grid over a 2D box, row-major with `x` varying fastest.
pub fn grid_points(low: [f64; 2], high: [f64; 2], res: usize) -> Result<Batch> {
    if res < 2 {
        return Err(Error::InvalidInput(format!(
            "grid resolution must be at least 2, got {res}"
        )));
    }
    let step = |k: usize| (high[k] - low[k]) / (res - 1) as f64;
    let (hx, hy) = (step(0), step(1));
    Ok(Array2::from_shape_fn((res * res, 2), |(i, k)| {
        let (ix, iy) = (i % res, i / res);
        if k == 0 {
            low[0] + hx * ix as f64
        } else {
            low[1] + hy * iy as f64
        }
    }))
}

/// Trapezoidal integral of `exp(logf)` given on [`grid_points`] order.
pub fn trapezoid_exp(logf: &[f64], low: [f64; 2], high: [f64; 2], res: usize) -> f64 {
    let hx = (high[0] - low[0]) / (res - 1) as f64;
    let hy = (high[1] - low[1]) / (res - 1) as f64;
    let w = |i: usize| if i == 0 || i == res - 1 { 0.5 } else { 1.0 };
    logf.iter()
        .enumerate()
        .map(|(i, l)| w(i % res) * w(i / res) * l.exp())
        .sum::<f64>()
        * hx
        * hy
}

/// Estimate `∫ p0 e^G dx`.
pub fn normalization_integral<R: Rng + ?Sized>(
    g: &Mlp,
    base: &BaseDistribution,
    method: &IntegralMethod<'_>,
    rng: &mut R,
) -> Result<NormalizationReport> {
    match method {
        IntegralMethod::Grid { low, high, res } => {
            ensure_dim(2, base.dim, "grid quadrature dimension")?;
            let pts = grid_points(*low, *high, *res)?;
            let lp = log_density(g, base, &pts.view())?;
            let lp0 = base.log_density(&pts.view())?;
            let base_mass = trapezoid_exp(&lp0, *low, *high, *res);
            if base_mass < 0.999 {
                warn!("quadrature box covers only {base_mass:.4} of the base mass");
            }
            Ok(NormalizationReport {
                method: "grid".into(),
                estimate: trapezoid_exp(&lp, *low, *high, *res),
                n: res * res,
            })
        }
        IntegralMethod::Importance { reference, n } => {
            if *n == 0 {
                return Err(Error::InvalidInput(
                    "importance estimate needs n > 0".into(),
                ));
            }
            let x = reference.sample(*n, rng);
            let lp = log_density(g, base, &x.view())?;
            let lref = reference.log_density(&x.view())?;
            let lw: Vec<f64> = lp.iter().zip(&lref).map(|(a, b)| a - b).collect();
            Ok(NormalizationReport {
                method: "importance".into(),
                estimate: (log_sum_exp(&lw) - (*n as f64).ln()).exp(),
                n: *n,
            })
        }
    }
}
