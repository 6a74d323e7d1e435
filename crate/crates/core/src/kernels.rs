//! Mollified kernels and kernel-weighted statistics.
//!
//! The time-indexed squared-exponential kernel is
//!
//! ```text
//! k_t^ε(y, x) = exp(−‖t·y − x‖² / (2(1−t)² + ε))
//! ```
//!
//! which reduces to `exp(−‖y − x‖²/ε)` at `t = 1`. The Laplacian kernel
//! `exp(−‖y − x‖/ε)` exists only at `t = 1`. All weights are formed in the
//! log domain with max-subtraction; at `ε = 0.2` a distance of 3 already
//! underflows a naive `exp`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::ensure_dim;
use crate::parallel::map_rows;
use crate::simd;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianSquared,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub epsilon: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, epsilon: f64) -> Result<Self> {
        let spec = KernelSpec { family, epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(epsilon: f64) -> Result<Self> {
        Self::new(KernelFamily::GaussianSquared, epsilon)
    }

    pub fn laplacian(epsilon: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.epsilon
            )))
        }
    }

    /// Denominator `2(1−t)² + ε` of the squared-exponential exponent.
    pub fn scale(&self, t: f64) -> f64 {
        2.0 * (1.0 - t) * (1.0 - t) + self.epsilon
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        if self.family == KernelFamily::Laplacian && t != 1.0 {
            return Err(Error::Unsupported(format!(
                "laplacian kernel is only defined at t = 1 (got t = {t})"
            )));
        }
        Ok(())
    }
}

/// `log k_t^ε(y, x)`.
pub fn log_kernel(t: f64, y: &[f64], x: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    spec.check_time(t)?;
    ensure_dim(y.len(), x.len(), "kernel arguments")?;
    Ok(log_kernel_unchecked(t, y, x, spec))
}

#[inline]
fn log_kernel_unchecked(t: f64, y: &[f64], x: &[f64], spec: &KernelSpec) -> f64 {
    match spec.family {
        KernelFamily::GaussianSquared => {
            let d2: f64 = y
                .iter()
                .zip(x)
                .map(|(a, b)| (t * a - b) * (t * a - b))
                .sum();
            -d2 / spec.scale(t)
        }
        KernelFamily::Laplacian => {
            let d2: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2.sqrt() / spec.epsilon
        }
    }
}

/// Which slot of `k_t(·,·)` the weighted centers occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `k_t(center, query)`: the Flow-Matching velocity weighting.
    CenterFirst,
    /// `k_t(query, center)`: the endpoint-velocity weighting.
    QueryFirst,
}

/// Kernel-weighted statistics of a set of centers around one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStats {
    /// Normalized weights, one per center.
    pub weights: Vec<f64>,
    /// Weighted mean of the centers.
    pub mean: Vec<f64>,
    /// Weighted second moment `E_w[‖y‖²]`.
    pub second_moment: f64,
    /// `log Σ_i exp(log_prior_i) k(·,·)`.
    pub log_normalizer: f64,
    /// Effective sample size `1/Σ w_i²`.
    pub ess: f64,
}

impl WeightedStats {
    /// Trace of the weighted covariance, `s − ‖m‖²`.
    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean.iter().map(|m| m * m).sum::<f64>()
    }
}

fn check_finite(view: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if view.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{what} contain non-finite values"
        )))
    }
}

/// Statistics of `centers` under weights `k_t(center, x)`.
pub fn weighted_stats(
    t: f64,
    centers: &ArrayView2<'_, f64>,
    x: &[f64],
    spec: &KernelSpec,
) -> Result<WeightedStats> {
    weighted_stats_with(t, centers, x, Orientation::CenterFirst, None, spec)
}

/// General form: optional per-center log prior weights (e.g. importance
/// weights) are added to the log kernel before normalization.
pub fn weighted_stats_with(
    t: f64,
    centers: &ArrayView2<'_, f64>,
    x: &[f64],
    orientation: Orientation,
    log_prior: Option<&[f64]>,
    spec: &KernelSpec,
) -> Result<WeightedStats> {
    spec.validate()?;
    spec.check_time(t)?;
    let (n, d) = centers.dim();
    if n == 0 {
        return Err(Error::InvalidInput(
            "weighted statistics need at least one center".into(),
        ));
    }
    ensure_dim(d, x.len(), "query dimension")?;
    if let Some(p) = log_prior {
        ensure_dim(n, p.len(), "log prior length")?;
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("log prior contains NaN".into()));
        }
    }
    check_finite(centers, "centers")?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("query point is not finite".into()));
    }

    let mut logw: Vec<f64> = centers
        .rows()
        .into_iter()
        .map(|row| {
            let y = row.as_slice().expect("standard layout");
            match orientation {
                Orientation::CenterFirst => log_kernel_unchecked(t, y, x, spec),
                Orientation::QueryFirst => log_kernel_unchecked(t, x, y, spec),
            }
        })
        .collect();
    if let Some(p) = log_prior {
        logw.iter_mut().zip(p).for_each(|(l, p)| *l += p);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numerical("all kernel log-weights are -inf".into()));
    }
    let mut total = 0.0;
    for l in logw.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let weights: Vec<f64> = logw.iter().map(|w| w / total).collect();

    // Accumulate relative to the query so the mean and spread do not lose
    // bits to large absolute coordinates.
    let mut shift = vec![0.0; d];
    let mut spread = 0.0;
    for (row, &w) in centers.rows().into_iter().zip(&weights) {
        for (k, (&y, &q)) in row.iter().zip(x).enumerate() {
            let r = y - q;
            shift[k] += w * r;
            spread += w * r * r;
        }
    }
    let shift_sq: f64 = shift.iter().map(|s| s * s).sum();
    let variance = (spread - shift_sq).max(0.0);
    let mean: Vec<f64> = x.iter().zip(&shift).map(|(q, s)| q + s).collect();
    let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(WeightedStats {
        weights,
        mean,
        second_moment: variance + mean_sq,
        log_normalizer: max + total.ln(),
        ess,
    })
}

/// Per-query moments of a center set under the terminal (`t = 1`) kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    /// `E_w[y − x]` for every query row `x`.
    pub shift: Array2<f64>,
    /// Trace of the weighted covariance, `E_w[‖y‖²] − ‖E_w[y]‖²`.
    pub variance: Vec<f64>,
    /// `log Σ_j exp(log_prior_j) k_1(y_j, x)`; `-inf` when no center remains.
    pub log_norm: Vec<f64>,
    pub ess: Vec<f64>,
}

impl BatchMoments {
    /// Weighted mean `E_w[y]` of row `i`.
    pub fn mean(&self, queries: &ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
        queries
            .row(i)
            .iter()
            .zip(self.shift.row(i))
            .map(|(x, s)| x + s)
            .collect()
    }

    /// Weighted second moment `E_w[‖y‖²]` of row `i`.
    pub fn second_moment(&self, queries: &ArrayView2<'_, f64>, i: usize) -> f64 {
        self.variance[i] + self.mean(queries, i).iter().map(|m| m * m).sum::<f64>()
    }
}

struct RowMoments {
    shift: Vec<f64>,
    variance: f64,
    log_norm: f64,
    ess: f64,
}

/// Terminal-kernel moments of `centers` around every row of `queries`.
///
/// With `exclude_diagonal`, center `i` is skipped for query `i`; this only
/// makes sense when both arguments are the same batch.
pub fn terminal_moments(
    queries: &ArrayView2<'_, f64>,
    centers: &ArrayView2<'_, f64>,
    log_prior: Option<&[f64]>,
    exclude_diagonal: bool,
    spec: &KernelSpec,
) -> Result<BatchMoments> {
    spec.validate()?;
    let (n, d) = queries.dim();
    let m = centers.nrows();
    if m == 0 {
        return Err(Error::InvalidInput(
            "terminal moments need at least one center".into(),
        ));
    }
    ensure_dim(d, centers.ncols(), "center dimension")?;
    if exclude_diagonal {
        ensure_dim(n, m, "diagonal exclusion needs matching batches")?;
    }
    if let Some(p) = log_prior {
        ensure_dim(m, p.len(), "log prior length")?;
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("log prior contains NaN".into()));
        }
    }
    check_finite(queries, "queries")?;
    check_finite(centers, "centers")?;

    let queries = queries.as_standard_layout();
    let centers = centers.as_standard_layout();
    let qs = queries.as_slice().expect("standard layout");
    let cs = centers.as_slice().expect("standard layout");
    let inv_eps = 1.0 / spec.epsilon;
    let family = spec.family;

    let rows: Vec<Result<RowMoments>> = map_rows(n, |i| {
        let x = &qs[i * d..(i + 1) * d];
        let mut logw = vec![0.0; m];
        fill_log_weights(x, cs, inv_eps, family, &mut logw);
        if let Some(p) = log_prior {
            logw.iter_mut().zip(p).for_each(|(l, p)| *l += p);
        }
        if exclude_diagonal {
            logw[i] = f64::NEG_INFINITY;
        }
        let max = simd::max_of(&logw);
        if max == f64::NEG_INFINITY {
            if exclude_diagonal && m == 1 {
                return Ok(RowMoments {
                    shift: vec![0.0; d],
                    variance: 0.0,
                    log_norm: f64::NEG_INFINITY,
                    ess: 0.0,
                });
            }
            return Err(Error::Numerical(format!(
                "all kernel log-weights are -inf for query {i}"
            )));
        }
        exp_shifted(&mut logw, max);
        Ok(accumulate_row(x, cs, &logw, max))
    });
    collect_rows(rows, d)
}

#[inline(always)]
fn fill_log_weights_body(
    x: &[f64],
    centers: &[f64],
    inv_eps: f64,
    family: KernelFamily,
    out: &mut [f64],
) {
    let d = x.len();
    match (d, family) {
        (2, KernelFamily::GaussianSquared) => {
            for (o, y) in out.iter_mut().zip(centers.chunks_exact(2)) {
                let (a, b) = (y[0] - x[0], y[1] - x[1]);
                *o = -(a * a + b * b) * inv_eps;
            }
        }
        (2, KernelFamily::Laplacian) => {
            for (o, y) in out.iter_mut().zip(centers.chunks_exact(2)) {
                let (a, b) = (y[0] - x[0], y[1] - x[1]);
                *o = -(a * a + b * b).sqrt() * inv_eps;
            }
        }
        _ => {
            for (o, y) in out.iter_mut().zip(centers.chunks_exact(d)) {
                let d2: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                *o = match family {
                    KernelFamily::GaussianSquared => -d2 * inv_eps,
                    KernelFamily::Laplacian => -d2.sqrt() * inv_eps,
                };
            }
        }
    }
}

simd::avx2_dispatch! {
    /// Terminal-kernel log-weights of `x` against every center.
    fn fill_log_weights => fill_log_weights_body(x: &[f64], centers: &[f64], inv_eps: f64, family: KernelFamily, out: &mut [f64]) -> ()
}

#[inline(always)]
fn exp_shifted_body(logw: &mut [f64], max: f64) {
    logw.iter_mut()
        .for_each(|l| *l = simd::exp_nonpos(*l - max));
}

simd::avx2_dispatch! {
    /// `l ← exp(l − max)` in place.
    fn exp_shifted => exp_shifted_body(logw: &mut [f64], max: f64) -> ()
}

#[inline(always)]
fn accumulate_row_body(x: &[f64], centers: &[f64], weights: &[f64], max: f64) -> RowMoments {
    let d = x.len();
    let mut total = 0.0;
    let mut total_sq = 0.0;
    let mut shift = vec![0.0; d];
    let mut spread = 0.0;
    if d == 2 {
        const L: usize = simd::LANES;
        let (mut t, mut tsq, mut sx, mut sy, mut sp) =
            ([0.0; L], [0.0; L], [0.0; L], [0.0; L], [0.0; L]);
        let mut wc = weights.chunks_exact(L);
        let mut yc = centers.chunks_exact(2 * L);
        for (w, y) in (&mut wc).zip(&mut yc) {
            for k in 0..L {
                let (a, b) = (y[2 * k] - x[0], y[2 * k + 1] - x[1]);
                t[k] += w[k];
                tsq[k] += w[k] * w[k];
                sx[k] += w[k] * a;
                sy[k] += w[k] * b;
                sp[k] += w[k] * (a * a + b * b);
            }
        }
        for (&w, y) in wc.remainder().iter().zip(yc.remainder().chunks_exact(2)) {
            let (a, b) = (y[0] - x[0], y[1] - x[1]);
            t[0] += w;
            tsq[0] += w * w;
            sx[0] += w * a;
            sy[0] += w * b;
            sp[0] += w * (a * a + b * b);
        }
        let sum = |v: [f64; L]| (v[0] + v[1]) + (v[2] + v[3]);
        total = sum(t);
        total_sq = sum(tsq);
        shift[0] = sum(sx);
        shift[1] = sum(sy);
        spread = sum(sp);
    } else {
        for (&w, y) in weights.iter().zip(centers.chunks_exact(d)) {
            total += w;
            total_sq += w * w;
            let mut r2 = 0.0;
            for ((s, a), b) in shift.iter_mut().zip(y).zip(x) {
                let r = a - b;
                *s += w * r;
                r2 += r * r;
            }
            spread += w * r2;
        }
    }
    let inv = 1.0 / total;
    let mut shift_sq = 0.0;
    for s in shift.iter_mut() {
        *s *= inv;
        shift_sq += *s * *s;
    }
    RowMoments {
        shift,
        variance: (spread * inv - shift_sq).max(0.0),
        log_norm: max + total.ln(),
        ess: total * total / total_sq,
    }
}

simd::avx2_dispatch! {
    /// Moments from unnormalized weights `w_j = exp(l_j − max)`.
    fn accumulate_row => accumulate_row_body(x: &[f64], centers: &[f64], weights: &[f64], max: f64) -> RowMoments
}

/// Largest batch for which [`self_moments`] keeps the full weight matrix.
const SELF_MATRIX_LIMIT: usize = 2048;

/// Same result as `terminal_moments(points, points, None, false, spec)`.
///
/// Every row's largest log-weight is its own zero, so the weights
/// `exp(−dist/ε)` form a symmetric matrix and only half of them are
/// evaluated.
pub fn self_moments(points: &ArrayView2<'_, f64>, spec: &KernelSpec) -> Result<BatchMoments> {
    let n = points.nrows();
    if n == 0 || n > SELF_MATRIX_LIMIT {
        return terminal_moments(points, points, None, false, spec);
    }
    spec.validate()?;
    check_finite(points, "queries")?;
    let d = points.ncols();
    let pts = points.as_standard_layout();
    let ps = pts.as_slice().expect("standard layout");
    let inv_eps = 1.0 / spec.epsilon;
    let family = spec.family;
    let upper: Vec<Vec<f64>> = map_rows(n, |i| {
        let x = &ps[i * d..(i + 1) * d];
        let mut w = vec![0.0; n - i - 1];
        fill_log_weights(x, &ps[(i + 1) * d..], inv_eps, family, &mut w);
        exp_shifted(&mut w, -0.0);
        w
    });
    let rows: Vec<Result<RowMoments>> = map_rows(n, |i| {
        let x = &ps[i * d..(i + 1) * d];
        let mut w = Vec::with_capacity(n);
        w.extend((0..i).map(|j| upper[j][i - j - 1]));
        w.push(1.0);
        w.extend_from_slice(&upper[i]);
        Ok(accumulate_row(x, ps, &w, -0.0))
    });
    collect_rows(rows, d)
}

fn collect_rows(rows: Vec<Result<RowMoments>>, d: usize) -> Result<BatchMoments> {
    let n = rows.len();
    let mut out = BatchMoments {
        shift: Array2::zeros((n, d)),
        variance: Vec::with_capacity(n),
        log_norm: Vec::with_capacity(n),
        ess: Vec::with_capacity(n),
    };
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        out.shift
            .row_mut(i)
            .iter_mut()
            .zip(&row.shift)
            .for_each(|(o, s)| *o = *s);
        out.variance.push(row.variance);
        out.log_norm.push(row.log_norm);
        out.ess.push(row.ess);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::{stream, StreamId};

    #[test]
    fn self_moments_match_general_path_bitwise() {
        let mut rng = stream(11, StreamId::Eval);
        let mut x = Array2::from_shape_fn((70, 2), |_| rng.random::<f64>() * 4.0 - 2.0);
        let dup = x.row(9).to_owned();
        x.row_mut(5).assign(&dup);
        for spec in [
            KernelSpec::gaussian(0.3).unwrap(),
            KernelSpec::laplacian(0.7).unwrap(),
        ] {
            let a = self_moments(&x.view(), &spec).unwrap();
            let b = terminal_moments(&x.view(), &x.view(), None, false, &spec).unwrap();
            assert_eq!(a, b);
        }
    }

    fn g(eps: f64) -> KernelSpec {
        KernelSpec::gaussian(eps).unwrap()
    }

    #[test]
    fn log_kernel_examples() {
        assert_eq!(
            log_kernel(1.0, &[0.3, 0.4], &[0.3, 0.4], &g(0.5)).unwrap(),
            0.0
        );
        assert_eq!(
            log_kernel(0.0, &[5.0, -3.0], &[0.0, 0.0], &g(0.5)).unwrap(),
            0.0
        );
        // ‖0.5·(2,0)‖² / (2·0.25 + 0.5) = 1
        let v = log_kernel(0.5, &[2.0, 0.0], &[0.0, 0.0], &g(0.5)).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        // t = 1 reduces to −‖y−x‖²/ε
        let v = log_kernel(1.0, &[1.0, 1.0], &[0.0, 0.0], &g(0.5)).unwrap();
        assert!((v + 4.0).abs() < 1e-15);
    }

    #[test]
    fn laplacian_only_at_terminal_time() {
        let lap = KernelSpec::laplacian(0.5).unwrap();
        let v = log_kernel(1.0, &[3.0, 4.0], &[0.0, 0.0], &lap).unwrap();
        assert!((v + 10.0).abs() < 1e-15);
        assert!(matches!(
            log_kernel(0.9, &[3.0, 4.0], &[0.0, 0.0], &lap),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn rejects_bad_bandwidth_and_nan() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        let c = array![[f64::NAN, 0.0]];
        assert!(weighted_stats(1.0, &c.view(), &[0.0, 0.0], &g(0.5)).is_err());
        let c = Array2::<f64>::zeros((0, 2));
        assert!(weighted_stats(1.0, &c.view(), &[0.0, 0.0], &g(0.5)).is_err());
    }

    #[test]
    fn single_center() {
        let c = array![[1.5, -2.0]];
        let s = weighted_stats(0.4, &c.view(), &[0.1, 0.2], &g(0.3)).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.mean, vec![1.5, -2.0]);
        assert!((s.second_moment - 6.25).abs() < 1e-14);
        assert_eq!(s.ess, 1.0);
    }

    #[test]
    fn equidistant_pair_is_balanced() {
        let c = array![[1.0, 0.0], [-1.0, 0.0]];
        let s = weighted_stats(1.0, &c.view(), &[0.0, 0.0], &g(0.5)).unwrap();
        assert_eq!(s.weights, vec![0.5, 0.5]);
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.ess, 2.0);
    }

    #[test]
    fn log_domain_matches_naive_domain() {
        // Oracle: direct exp/normalize where nothing underflows.
        let mut rng = stream(5, StreamId::Eval);
        let centers = Array2::from_shape_fn((512, 2), |(i, _)| {
            let mode = if i % 2 == 0 { -1.0 } else { 1.0 };
            mode + 0.5 * (rng.random::<f64>() - 0.5)
        });
        let spec = g(0.5);
        for gx in -3..=3 {
            for gy in -3..=3 {
                let x = [0.5 * gx as f64, 0.5 * gy as f64];
                let t = 0.7;
                let s = weighted_stats(t, &centers.view(), &x, &spec).unwrap();
                let raw: Vec<f64> = centers
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let d2 = (t * r[0] - x[0]).powi(2) + (t * r[1] - x[1]).powi(2);
                        (-d2 / spec.scale(t)).exp()
                    })
                    .collect();
                let z: f64 = raw.iter().sum();
                let mut mean = [0.0; 2];
                let mut second = 0.0;
                for (r, w) in centers.rows().into_iter().zip(&raw) {
                    mean[0] += w / z * r[0];
                    mean[1] += w / z * r[1];
                    second += w / z * (r[0] * r[0] + r[1] * r[1]);
                }
                for k in 0..2 {
                    assert!((s.mean[k] - mean[k]).abs() <= 1e-10 * mean[k].abs().max(1.0));
                }
                assert!((s.second_moment - second).abs() <= 1e-10 * second);
                assert!((s.log_normalizer - z.ln()).abs() <= 1e-10 * z.ln().abs().max(1.0));
            }
        }
    }

    #[test]
    fn far_query_does_not_underflow() {
        let c = array![[0.0, 0.0], [0.1, 0.0]];
        let s = weighted_stats(1.0, &c.view(), &[40.0, 0.0], &g(0.2)).unwrap();
        assert!(s.mean.iter().all(|m| m.is_finite()));
        assert!(s.log_normalizer < -7000.0);
    }

    #[test]
    fn terminal_moments_agree_with_single_query_stats() {
        let mut rng = stream(9, StreamId::Eval);
        let centers = Array2::from_shape_fn((40, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let queries = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>() * 3.0 - 1.5);
        let prior: Vec<f64> = (0..40).map(|j| (j as f64 * 0.37).sin()).collect();
        for spec in [g(0.3), KernelSpec::laplacian(0.4).unwrap()] {
            let bm = terminal_moments(&queries.view(), &centers.view(), Some(&prior), false, &spec)
                .unwrap();
            for i in 0..6 {
                let x = queries.row(i).to_vec();
                let s = weighted_stats_with(
                    1.0,
                    &centers.view(),
                    &x,
                    Orientation::CenterFirst,
                    Some(&prior),
                    &spec,
                )
                .unwrap();
                let m = bm.mean(&queries.view(), i);
                for k in 0..2 {
                    assert!((m[k] - s.mean[k]).abs() < 1e-13);
                }
                assert!((bm.variance[i] - s.variance()).abs() < 1e-12);
                assert!((bm.log_norm[i] - s.log_normalizer).abs() < 1e-12);
                assert!((bm.ess[i] - s.ess).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn diagonal_exclusion() {
        let b = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let bm = terminal_moments(&b.view(), &b.view(), None, true, &g(0.5)).unwrap();
        // query 0 sees only the two other points, equally weighted
        assert!((bm.shift[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((bm.shift[[0, 1]] - 0.5).abs() < 1e-15);
        let single = array![[2.0, 3.0]];
        let bm = terminal_moments(&single.view(), &single.view(), None, true, &g(0.5)).unwrap();
        assert_eq!(bm.shift[[0, 0]], 0.0);
        assert_eq!(bm.ess[0], 0.0);
    }

    #[test]
    fn equidistant_centers_have_full_ess() {
        let n = 12;
        let c = Array2::from_shape_fn((n, 2), |(i, k)| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            if k == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let s = weighted_stats(1.0, &c.view(), &[0.0, 0.0], &g(0.3)).unwrap();
        assert!((s.ess - n as f64).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn prior_shift_invariance(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..20),
            qx in -3.0f64..3.0, qy in -3.0f64..3.0, c in -50.0f64..50.0, eps in 0.05f64..2.0,
        ) {
            let centers = Array2::from_shape_fn((pts.len(), 2), |(i, k)| if k == 0 { pts[i].0 } else { pts[i].1 });
            let prior: Vec<f64> = (0..pts.len()).map(|j| (j as f64).cos()).collect();
            let shifted: Vec<f64> = prior.iter().map(|p| p + c).collect();
            let spec = KernelSpec::gaussian(eps).unwrap();
            let a = weighted_stats_with(1.0, &centers.view(), &[qx, qy], Orientation::CenterFirst, Some(&prior), &spec).unwrap();
            let b = weighted_stats_with(1.0, &centers.view(), &[qx, qy], Orientation::CenterFirst, Some(&shifted), &spec).unwrap();
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert!((wa - wb).abs() < 1e-12);
            }
            prop_assert!((a.log_normalizer + c - b.log_normalizer).abs() < 1e-9);
            prop_assert!(a.ess >= 1.0 - 1e-12 && a.ess <= pts.len() as f64 + 1e-9);
            prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.second_moment >= a.mean.iter().map(|m| m * m).sum::<f64>() - 1e-9);
        }

        #[test]
        fn terminal_weights_rigid_motion(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..20),
            qx in -3.0f64..3.0, qy in -3.0f64..3.0, angle in 0.0f64..6.3, bx in -5.0f64..5.0, by in -5.0f64..5.0,
        ) {
            let (s, c) = angle.sin_cos();
            let rot = |p: (f64, f64)| (c * p.0 - s * p.1 + bx, s * p.0 + c * p.1 + by);
            let centers = Array2::from_shape_fn((pts.len(), 2), |(i, k)| if k == 0 { pts[i].0 } else { pts[i].1 });
            let moved = Array2::from_shape_fn((pts.len(), 2), |(i, k)| { let r = rot(pts[i]); if k == 0 { r.0 } else { r.1 } });
            let q2 = rot((qx, qy));
            let spec = KernelSpec::gaussian(0.5).unwrap();
            let a = weighted_stats(1.0, &centers.view(), &[qx, qy], &spec).unwrap();
            let b = weighted_stats(1.0, &moved.view(), &[q2.0, q2.1], &spec).unwrap();
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert!((wa - wb).abs() < 1e-10);
            }
            let m = rot((a.mean[0], a.mean[1]));
            prop_assert!((m.0 - b.mean[0]).abs() < 1e-10 && (m.1 - b.mean[1]).abs() < 1e-10);
        }
    }
}
