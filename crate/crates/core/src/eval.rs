//! Sample metrics, density grids, finite-difference helpers and the
//! closed-form verification sweep.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::closedform::{
    divergence_endpoint, divergence_velocity, endpoint_velocity, gaussian_oracle_velocity,
    velocity, GaussianTarget,
};
use crate::data::{mixture_log_density, BaseDistribution, MixtureComponent, Standardization};
use crate::error::ensure_dim;
use crate::kernels::KernelSpec;
use crate::likelihood::{grid_points, log_density, trapezoid_exp};
use crate::net::Mlp;
use crate::parallel::map_rows;
use crate::rng::{stream, StreamId};
use crate::{Batch, Error, Result};

fn check_nonempty(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidInput(
            "sample metrics need nonempty batches".into(),
        ));
    }
    ensure_dim(a.ncols(), b.ncols(), "sample dimension")
}

/// Mean of `f(‖aᵢ − bⱼ‖²)` over all pairs.
fn pair_mean(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    f: impl Fn(f64) -> f64 + Sync,
) -> f64 {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let d = a.ncols();
    let (asl, bsl) = (a.as_slice().expect("layout"), b.as_slice().expect("layout"));
    let m = b.nrows();
    let rows: Vec<f64> = map_rows(a.nrows(), |i| {
        let x = &asl[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..m {
            let y = &bsl[j * d..(j + 1) * d];
            let mut d2 = 0.0;
            for k in 0..d {
                let r = x[k] - y[k];
                d2 += r * r;
            }
            acc += f(d2);
        }
        acc
    });
    rows.iter().sum::<f64>() / (a.nrows() * m) as f64
}

/// V-statistic `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖`.
pub fn energy_distance(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab = pair_mean(a, b, f64::sqrt);
    let aa = pair_mean(a, a, f64::sqrt);
    let bb = pair_mean(b, b, f64::sqrt);
    Ok(2.0 * ab - aa - bb)
}

/// Biased squared MMD with kernel `exp(−‖a − b‖²/(2h²))`.
pub fn mmd_rbf(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, bandwidth: f64) -> Result<f64> {
    check_nonempty(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!(
            "MMD bandwidth must be positive, got {bandwidth}"
        )));
    }
    let s = -0.5 / (bandwidth * bandwidth);
    let k = move |d2: f64| (s * d2).exp();
    Ok(pair_mean(a, a, k) + pair_mean(b, b, k) - 2.0 * pair_mean(a, b, k))
}

/// Median pairwise distance of `x`; used to pick the MMD bandwidth from a
/// sample that is not part of the comparison.
pub fn median_bandwidth(x: &ArrayView2<'_, f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "median bandwidth needs two points".into(),
        ));
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let r = &x.row(i) - &x.row(j);
            d.push(r.dot(&r).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// How a metric's value is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    AtMost { limit: f64 },
    AtLeast { limit: f64 },
    Within { low: f64, high: f64 },
}

impl Threshold {
    pub fn accepts(&self, v: f64) -> bool {
        match *self {
            Threshold::AtMost { limit } => v <= limit,
            Threshold::AtLeast { limit } => v >= limit,
            Threshold::Within { low, high } => (low..=high).contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub tolerance: Threshold,
    pub pass: bool,
}

impl MetricReport {
    pub fn new(
        name: impl Into<String>,
        value: f64,
        n_samples: usize,
        seed: u64,
        tolerance: Threshold,
    ) -> Self {
        MetricReport {
            name: name.into(),
            value,
            n_samples,
            seed,
            pass: value.is_finite() && tolerance.accepts(value),
            tolerance,
        }
    }
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// What a density grid is evaluated from.
pub enum DensitySource<'a> {
    Model {
        g: &'a Mlp,
        base: &'a BaseDistribution,
    },
    /// Mixture density carried into standardized coordinates.
    Mixture {
        components: &'a [MixtureComponent],
        transform: &'a Standardization,
    },
}

impl DensitySource<'_> {
    pub fn log_density(&self, x: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            DensitySource::Model { g, base } => log_density(g, base, x),
            DensitySource::Mixture {
                components,
                transform,
            } => {
                let raw = transform.invert(x)?;
                let shift = transform.log_det();
                Ok(raw
                    .rows()
                    .into_iter()
                    .map(|r| mixture_log_density(components, r.as_slice().expect("layout")) - shift)
                    .collect())
            }
        }
    }
}

/// Log-density on a regular 2D grid, optionally paired with a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub low: [f64; 2],
    pub high: [f64; 2],
    pub res: usize,
    pub points: Batch,
    pub logp: Vec<f64>,
    pub logp_ref: Option<Vec<f64>>,
}

pub fn density_grid(
    source: &DensitySource<'_>,
    reference: Option<&DensitySource<'_>>,
    low: [f64; 2],
    high: [f64; 2],
    res: usize,
) -> Result<DensityGrid> {
    let points = grid_points(low, high, res)?;
    let logp = source.log_density(&points.view())?;
    let logp_ref = reference
        .map(|r| r.log_density(&points.view()))
        .transpose()?;
    Ok(DensityGrid {
        low,
        high,
        res,
        points,
        logp,
        logp_ref,
    })
}

impl DensityGrid {
    /// Trapezoidal integral of `exp(logp)`.
    pub fn integral(&self) -> f64 {
        trapezoid_exp(&self.logp, self.low, self.high, self.res)
    }

    /// Correlation of `logp` with the reference where the reference density
    /// is at least `min_density`.
    pub fn correlation(&self, min_density: f64) -> Result<f64> {
        let r = self
            .logp_ref
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("grid has no reference density".into()))?;
        let floor = min_density.ln();
        let (a, b): (Vec<f64>, Vec<f64>) = self
            .logp
            .iter()
            .zip(r)
            .filter(|(_, r)| **r >= floor)
            .map(|(a, b)| (*a, *b))
            .unzip();
        if a.len() < 2 {
            return Err(Error::InvalidInput(
                "fewer than two grid points above the density floor".into(),
            ));
        }
        Ok(pearson(&a, &b))
    }

    /// CSV with header `x,y,logp[,logp_ref]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["x", "y", "logp"];
        if self.logp_ref.is_some() {
            header.push("logp_ref");
        }
        w.write_record(&header).map_err(io)?;
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let mut rec = vec![
                format!("{:?}", row[0]),
                format!("{:?}", row[1]),
                format!("{:?}", self.logp[i]),
            ];
            if let Some(r) = &self.logp_ref {
                rec.push(format!("{:?}", r[i]));
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parse a grid written by [`DensityGrid::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(io)?;
        let header: Vec<String> = r
            .headers()
            .map_err(io)?
            .iter()
            .map(str::to_string)
            .collect();
        let with_ref = match header
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .as_slice()
        {
            ["x", "y", "logp"] => false,
            ["x", "y", "logp", "logp_ref"] => true,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unexpected grid header {other:?}"
                )))
            }
        };
        let mut xs = Vec::new();
        let mut logp = Vec::new();
        let mut logp_ref = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(io)?;
            let v: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("bad grid value '{f}'")))
                })
                .collect::<Result<_>>()?;
            xs.push([v[0], v[1]]);
            logp.push(v[2]);
            if with_ref {
                logp_ref.push(v[3]);
            }
        }
        let res = (xs.len() as f64).sqrt().round() as usize;
        if res < 2 || res * res != xs.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows do not form a square grid",
                xs.len()
            )));
        }
        let low = xs[0];
        let high = xs[xs.len() - 1];
        let points = Array2::from_shape_fn((xs.len(), 2), |(i, k)| xs[i][k]);
        Ok(DensityGrid {
            low,
            high,
            res,
            points,
            logp,
            logp_ref: with_ref.then_some(logp_ref),
        })
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along parameter `i`.
pub fn central_difference(
    f: &mut impl FnMut(&[f64]) -> f64,
    params: &[f64],
    i: usize,
    h: f64,
) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let up = f(&p);
    p[i] = params[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Trace of the central-difference Jacobian of a vector field.
pub fn fd_divergence(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..x.len() {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        total += (f(&a)?[k] - f(&b)?[k]) / (2.0 * h);
    }
    Ok(total)
}

/// Aggregate error of one closed-form comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCheck {
    pub op: String,
    pub n_points: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ClosedFormCheck {
    fn from_errors(op: &str, errs: &[f64], tolerance: f64) -> Self {
        let max = errs.iter().copied().fold(0.0, f64::max);
        let finite = errs.iter().all(|e| e.is_finite());
        ClosedFormCheck {
            op: op.into(),
            n_points: errs.len(),
            max_rel_err: if finite { max } else { f64::NAN },
            mean_rel_err: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
            tolerance,
            pass: finite && max <= tolerance,
        }
    }

    pub fn to_metric(&self, seed: u64) -> MetricReport {
        MetricReport::new(
            format!("{}_max_rel_err", self.op),
            self.max_rel_err,
            self.n_points,
            seed,
            Threshold::AtMost {
                limit: self.tolerance,
            },
        )
    }
}

/// Settings of [`verify_closed_form`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySweep {
    pub seed: u64,
    pub divergence_probes: usize,
    pub divergence_epsilons: Vec<f64>,
    pub divergence_data: usize,
    pub fd_step: f64,
    pub divergence_tol: f64,
    pub velocity_probes: usize,
    pub velocity_samples: usize,
    pub velocity_epsilon: f64,
    pub velocity_tol: f64,
    pub endpoint_probes: usize,
    pub endpoint_samples: usize,
    pub endpoint_time: f64,
    pub endpoint_epsilon: f64,
    pub endpoint_tol: f64,
}

impl Default for VerifySweep {
    fn default() -> Self {
        VerifySweep {
            seed: 0,
            divergence_probes: 100,
            divergence_epsilons: vec![0.05, 0.1, 0.5],
            divergence_data: 2000,
            fd_step: 1e-4,
            divergence_tol: 1e-4,
            velocity_probes: 20,
            velocity_samples: 100_000,
            velocity_epsilon: 1e-3,
            velocity_tol: 2e-2,
            endpoint_probes: 10,
            endpoint_samples: 100_000,
            endpoint_time: 0.5,
            endpoint_epsilon: 1e-3,
            endpoint_tol: 3e-2,
        }
    }
}

/// Gaussian target shared by the velocity and endpoint checks.
pub fn oracle_target() -> GaussianTarget {
    GaussianTarget::new(&[2.0, -1.0], &[1.0, 0.3, 0.3, 0.5]).expect("fixed SPD covariance")
}

/// Two-component mixture used by the divergence check.
pub fn divergence_data<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Batch {
    Array2::from_shape_fn((n, 2), |(i, k)| {
        let c = if i % 2 == 0 { [-1.0, 0.5] } else { [1.0, -0.5] };
        let z: f64 = rng.sample(StandardNormal);
        c[k] + 0.4 * z
    })
}

/// Divergence checks against finite differences of the velocities.
pub fn verify_divergences(sweep: &VerifySweep) -> Result<Vec<ClosedFormCheck>> {
    let mut rng = stream(sweep.seed, StreamId::Eval);
    let data = divergence_data(sweep.divergence_data, &mut rng);
    let mut ev = Vec::new();
    let mut ee = Vec::new();
    for i in 0..sweep.divergence_probes {
        let eps = sweep.divergence_epsilons[i % sweep.divergence_epsilons.len()];
        let spec = KernelSpec::gaussian(eps)?;
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let j = rng.random_range(0..data.nrows());
        let x: Vec<f64> = (0..2)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                t * data[[j, k]] + (1.0 - t) * z
            })
            .collect();
        let d = data.view();
        let fd = fd_divergence(|p| velocity(p, t, &d, &spec), &x, sweep.fd_step)?;
        ev.push(rel_err(divergence_velocity(&x, t, &d, &spec)?, fd, 1e-4));
        let fd = fd_divergence(|p| endpoint_velocity(p, t, &d, &spec), &x, sweep.fd_step)?;
        ee.push(rel_err(divergence_endpoint(&x, t, &d, &spec)?, fd, 1e-4));
    }
    Ok(vec![
        ClosedFormCheck::from_errors("divergence_velocity", &ev, sweep.divergence_tol),
        ClosedFormCheck::from_errors("divergence_endpoint", &ee, sweep.divergence_tol),
    ])
}

/// Kernel-regression velocity against the Gaussian oracle at probes drawn
/// from `p_t`, `t` cycling over `0.1..=0.9`. The `p1` samples are
/// quasi-random so the comparison is not dominated by sampling noise.
pub fn verify_gaussian_velocity(sweep: &VerifySweep) -> Result<ClosedFormCheck> {
    let target = oracle_target();
    let mut rng = stream(sweep.seed, StreamId::Holdout);
    let data = target.sample_marginal_qmc(1.0, sweep.velocity_samples, &mut rng);
    let spec = KernelSpec::gaussian(sweep.velocity_epsilon)?;
    let mut errs = Vec::new();
    for i in 0..sweep.velocity_probes {
        let t = 0.1 * (1 + i % 9) as f64;
        let x = target.sample_marginal(t, 1, &mut rng).row(0).to_vec();
        let u = velocity(&x, t, &data.view(), &spec)?;
        let o = gaussian_oracle_velocity(&x, t, &target)?;
        errs.push(vec_rel_err(&u, &o));
    }
    Ok(ClosedFormCheck::from_errors(
        "gaussian_velocity",
        &errs,
        sweep.velocity_tol,
    ))
}

/// Endpoint velocity from exact `p_t` samples against the limit `x`.
pub fn verify_endpoint_limit(sweep: &VerifySweep) -> Result<ClosedFormCheck> {
    let target = oracle_target();
    let t = sweep.endpoint_time;
    let mut rng = stream(sweep.seed, StreamId::Region);
    let pt = target.sample_marginal(t, sweep.endpoint_samples, &mut rng);
    let spec = KernelSpec::gaussian(sweep.endpoint_epsilon)?;
    let mut errs = Vec::new();
    while errs.len() < sweep.endpoint_probes {
        let p = target.sample_marginal(t, 1, &mut rng);
        let x = p.row(0).to_vec();
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5 {
            continue;
        }
        let u = endpoint_velocity(&x, t, &pt.view(), &spec)?;
        errs.push(vec_rel_err(&u, &x));
    }
    Ok(ClosedFormCheck::from_errors(
        "endpoint_limit",
        &errs,
        sweep.endpoint_tol,
    ))
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}

/// Every closed-form comparison.
pub fn verify_closed_form(sweep: &VerifySweep) -> Result<Vec<ClosedFormCheck>> {
    let mut out = verify_divergences(sweep)?;
    out.push(verify_gaussian_velocity(sweep)?);
    out.push(verify_endpoint_limit(sweep)?);
    Ok(out)
}

/// Energy distance between two independent draws of the same distribution.
pub fn self_baseline(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<f64> {
    energy_distance(a, b)
}

/// Per-axis mean and standard deviation, for quick summaries.
pub fn moments(x: &ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    (
        x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default(),
        x.std_axis(Axis(0), 0.0).to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;
    use crate::data::default_mixture;
    use crate::net::Activation;

    #[test]
    fn energy_distance_examples() {
        let a = array![[0.0, 0.0]];
        let b = array![[1.0, 0.0]];
        assert_eq!(energy_distance(&a.view(), &b.view()).unwrap(), 2.0);
        let s = divergence_data(50, &mut stream(1, StreamId::Eval));
        assert_eq!(energy_distance(&s.view(), &s.view()).unwrap(), 0.0);
        assert!(energy_distance(&Array2::zeros((0, 2)).view(), &b.view()).is_err());
    }

    #[test]
    fn energy_distance_brute_force() {
        let mut rng = stream(2, StreamId::Eval);
        let a = divergence_data(30, &mut rng);
        let b = divergence_data(40, &mut rng) * 1.3;
        let dist = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
            (&x - &y).mapv(|v| v * v).sum().sqrt()
        };
        let mut ab = 0.0;
        for x in a.rows() {
            for y in b.rows() {
                ab += dist(x, y);
            }
        }
        let mut aa = 0.0;
        for x in a.rows() {
            for y in a.rows() {
                aa += dist(x, y);
            }
        }
        let mut bb = 0.0;
        for x in b.rows() {
            for y in b.rows() {
                bb += dist(x, y);
            }
        }
        let oracle = 2.0 * ab / 1200.0 - aa / 900.0 - bb / 1600.0;
        let got = energy_distance(&a.view(), &b.view()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn energy_distance_symmetric_nonnegative(
            pa in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 8),
            pb in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 8),
        ) {
            let a = Array2::from_shape_fn((8, 2), |(i, k)| if k == 0 { pa[i].0 } else { pa[i].1 });
            let b = Array2::from_shape_fn((8, 2), |(i, k)| if k == 0 { pb[i].0 } else { pb[i].1 });
            let ab = energy_distance(&a.view(), &b.view()).unwrap();
            let ba = energy_distance(&b.view(), &a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= -1e-12);
            // a permuted copy is the same multiset
            let mut rev = a.clone();
            rev.invert_axis(Axis(0));
            prop_assert!(energy_distance(&a.view(), &rev.view()).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_is_zero_on_identical_batches() {
        let s = divergence_data(40, &mut stream(3, StreamId::Eval));
        let h = median_bandwidth(&s.view()).unwrap();
        assert!(mmd_rbf(&s.view(), &s.view(), h).unwrap().abs() < 1e-15);
        assert!(mmd_rbf(&s.view(), &(&s + 1.0).view(), h).unwrap() > 0.0);
    }

    #[test]
    fn thresholds() {
        assert!(Threshold::AtMost { limit: 1.0 }.accepts(1.0));
        assert!(!Threshold::AtLeast { limit: 0.95 }.accepts(0.9));
        assert!(Threshold::Within {
            low: 0.9,
            high: 1.1
        }
        .accepts(1.05));
        let r = MetricReport::new("x", f64::NAN, 1, 0, Threshold::AtMost { limit: 1.0 });
        assert!(!r.pass);
    }

    #[test]
    fn zero_g_grid_equals_base_grid() {
        let base = BaseDistribution::standard_normal(2);
        let g = Mlp::zeros(&[2, 4, 1], Activation::Tanh).unwrap();
        let grid = density_grid(
            &DensitySource::Model { g: &g, base: &base },
            None,
            [-3.0, -3.0],
            [3.0, 3.0],
            11,
        )
        .unwrap();
        for (p, l) in grid.points.rows().into_iter().zip(&grid.logp) {
            assert_eq!(*l, base.log_density_point(&[p[0], p[1]]));
        }
        assert!(density_grid(
            &DensitySource::Model { g: &g, base: &base },
            None,
            [0.0; 2],
            [1.0; 2],
            1
        )
        .is_err());
    }

    #[test]
    fn mixture_grid_integrates_to_one() {
        let comps = default_mixture();
        let t = Standardization::identity(2);
        let src = DensitySource::Mixture {
            components: &comps,
            transform: &t,
        };
        let grid = density_grid(&src, None, [-5.0, -4.0], [5.0, 4.0], 300).unwrap();
        assert!((grid.integral() - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn standardized_mixture_still_integrates_to_one() {
        let comps = default_mixture();
        let t = Standardization {
            mean: vec![0.3, -0.2],
            scale: vec![1.6, 0.5],
        };
        let src = DensitySource::Mixture {
            components: &comps,
            transform: &t,
        };
        let grid = density_grid(&src, None, [-4.0, -10.0], [4.0, 10.0], 400).unwrap();
        assert!((grid.integral() - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn grid_csv_round_trip() {
        let comps = default_mixture();
        let t = Standardization::identity(2);
        let src = DensitySource::Mixture {
            components: &comps,
            transform: &t,
        };
        let base = BaseDistribution::standard_normal(2);
        let g = Mlp::zeros(&[2, 4, 1], Activation::Tanh).unwrap();
        let grid = density_grid(
            &DensitySource::Model { g: &g, base: &base },
            Some(&src),
            [-2.0, -1.0],
            [2.0, 1.0],
            5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        grid.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("x,y,logp,logp_ref\n"));
        assert_eq!(DensityGrid::read_csv(&p).unwrap(), grid);
        std::fs::write(&p, "x,y,density\n0,0,1\n").unwrap();
        assert!(DensityGrid::read_csv(&p).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!(
            (pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 4.5 / (2.0f64 * 61.0 / 6.0).sqrt())
                .abs()
                < 1e-14
        );
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn divergence_sweep_passes() {
        let sweep = VerifySweep {
            divergence_probes: 30,
            ..Default::default()
        };
        for c in verify_divergences(&sweep).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn tightened_tolerance_fails() {
        let sweep = VerifySweep {
            divergence_probes: 12,
            divergence_tol: 1e-12,
            ..Default::default()
        };
        assert!(verify_divergences(&sweep).unwrap().iter().any(|c| !c.pass));
    }
}
