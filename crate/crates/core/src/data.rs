//! 2D benchmark point sets and base distributions.
//!
//! Canonical raw forms:
//!
//! * `two_moons`: upper arc `(cos θ, sin θ)` and lower arc
//!   `(1 − cos θ, ½ − sin θ)`, `θ ~ U[0, π]`, Gaussian jitter 0.05.
//! * `spiral`: two arms `r = θ/(3π)`, `θ ~ U[π, 6π]`, the second arm rotated
//!   by π, Gaussian jitter 0.03.
//! * `checkerboard`: uniform on the cells of `[−2, 2]²` whose
//!   `⌊x⌋ + ⌊y⌋` is even.
//! * `gaussian_mixture`: isotropic components with an analytic density.
//!
//! Generated sets are standardized per axis unless disabled; the affine
//! transform is returned alongside the points.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ensure_dim;
use crate::rng::{stream, StreamId};
use crate::{Batch, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Spiral,
    Checkerboard,
    TwoMoons,
    GaussianMixture,
}

impl DatasetKind {
    pub fn default_noise(self) -> f64 {
        match self {
            DatasetKind::TwoMoons => 0.05,
            DatasetKind::Spiral => 0.03,
            DatasetKind::Checkerboard | DatasetKind::GaussianMixture => 0.0,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown dataset kind '{s}'")))
    }
}

/// One isotropic mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Two equal-weight components at `(±1.5, 0)` with standard deviation 0.5.
pub fn default_mixture() -> Vec<MixtureComponent> {
    [-1.5, 1.5]
        .into_iter()
        .map(|m| MixtureComponent {
            weight: 0.5,
            mean: vec![m, 0.0],
            std: 0.5,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    /// Jitter scale; the kind's default when absent.
    #[serde(default)]
    pub noise: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Components for `gaussian_mixture`; [`default_mixture`] when absent.
    #[serde(default)]
    pub mixture: Option<Vec<MixtureComponent>>,
}

fn default_true() -> bool {
    true
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, seed: u64) -> Self {
        DatasetSpec {
            kind,
            n,
            noise: None,
            seed,
            standardize: kind != DatasetKind::GaussianMixture,
            mixture: None,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or_else(|| self.kind.default_noise())
    }

    pub fn components(&self) -> Vec<MixtureComponent> {
        self.mixture.clone().unwrap_or_else(default_mixture)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset size n must be positive".into()));
        }
        let noise = self.noise();
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!(
                "dataset noise must be ≥ 0, got {noise}"
            )));
        }
        if self.kind == DatasetKind::GaussianMixture {
            let comps = self.components();
            if comps.is_empty() {
                return Err(Error::Config("mixture needs at least one component".into()));
            }
            for c in &comps {
                if c.mean.len() != 2 || !(c.std > 0.0) || !(c.weight > 0.0) {
                    return Err(Error::Config(
                        "mixture components need a 2D mean and positive std and weight".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-axis affine map `z = (x − mean)/scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn fit(points: &ArrayView2<'_, f64>) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(Error::InvalidInput(
                "standardization needs at least two points".into(),
            ));
        }
        let mean = points.mean_axis(Axis(0)).expect("nonempty");
        let scale = points.std_axis(Axis(0), 0.0);
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput(
                "cannot standardize a constant axis".into(),
            ));
        }
        Ok(Standardization {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
        })
    }

    pub fn apply(&self, points: &ArrayView2<'_, f64>) -> Result<Batch> {
        ensure_dim(self.mean.len(), points.ncols(), "standardization dimension")?;
        let mean = Array1::from(self.mean.clone());
        let scale = Array1::from(self.scale.clone());
        Ok((points - &mean) / &scale)
    }

    pub fn invert(&self, points: &ArrayView2<'_, f64>) -> Result<Batch> {
        ensure_dim(self.mean.len(), points.ncols(), "standardization dimension")?;
        let mean = Array1::from(self.mean.clone());
        let scale = Array1::from(self.scale.clone());
        Ok(points * &scale + &mean)
    }

    /// `log |det ∂z/∂x|`, used to carry densities between coordinates.
    pub fn log_det(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// A generated set with the transform that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Batch,
    pub transform: Standardization,
}

/// Raw draws in the canonical coordinates, in generation order.
pub fn sample_raw<R: Rng + ?Sized>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<Batch> {
    spec.validate()?;
    let noise = spec.noise();
    let mut out = Array2::zeros((n, 2));
    match spec.kind {
        DatasetKind::TwoMoons => {
            let upper = n.div_ceil(2);
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let theta = rng.random::<f64>() * PI;
                let (s, c) = theta.sin_cos();
                let (x, y) = if i < upper {
                    (c, s)
                } else {
                    (1.0 - c, 0.5 - s)
                };
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                row[0] = x + noise * jx;
                row[1] = y + noise * jy;
            }
        }
        DatasetKind::Spiral => {
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let theta = PI + rng.random::<f64>() * 5.0 * PI;
                let r = theta / (3.0 * PI);
                let phase = if i % 2 == 0 { 0.0 } else { PI };
                let (s, c) = (theta + phase).sin_cos();
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                row[0] = r * c + noise * jx;
                row[1] = r * s + noise * jy;
            }
        }
        DatasetKind::Checkerboard => {
            for mut row in out.rows_mut() {
                let x = rng.random::<f64>() * 4.0 - 2.0;
                let fx = x.floor() as i64;
                // Rows -2..=1 whose parity matches ⌊x⌋.
                let base = if fx.rem_euclid(2) == 0 { -2 } else { -1 };
                let fy = base + 2 * rng.random_range(0..2i64);
                let y = fy as f64 + rng.random::<f64>();
                let jx: f64 = if noise > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                let jy: f64 = if noise > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                row[0] = x + noise * jx;
                row[1] = y + noise * jy;
            }
        }
        DatasetKind::GaussianMixture => {
            let comps = spec.components();
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            for mut row in out.rows_mut() {
                let mut u = rng.random::<f64>() * total;
                let mut pick = &comps[comps.len() - 1];
                for c in &comps {
                    if u < c.weight {
                        pick = c;
                        break;
                    }
                    u -= c.weight;
                }
                for k in 0..2 {
                    let z: f64 = rng.sample(StandardNormal);
                    row[k] = pick.mean[k] + pick.std * z;
                }
            }
        }
    }
    Ok(out)
}

/// `spec.n` points, standardized when `spec.standardize` is set.
pub fn sample_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let mut rng = stream(spec.seed, StreamId::Dataset);
    let raw = sample_raw(spec, spec.n, &mut rng)?;
    finish(spec, raw)
}

fn finish(spec: &DatasetSpec, raw: Batch) -> Result<Dataset> {
    let transform = if spec.standardize {
        Standardization::fit(&raw.view())?
    } else {
        Standardization::identity(raw.ncols())
    };
    Ok(Dataset {
        points: transform.apply(&raw.view())?,
        transform,
    })
}

/// Disjoint training and held-out sets from one permuted draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Batch,
    pub holdout: Batch,
    pub transform: Standardization,
    pub train_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
}

/// Draws `spec.n + n_holdout` points, permutes them and fits the transform
/// on the training part only.
pub fn sample_split(spec: &DatasetSpec, n_holdout: usize) -> Result<DatasetSplit> {
    let mut rng = stream(spec.seed, StreamId::Dataset);
    let total = spec.n + n_holdout;
    let raw = sample_raw(spec, total, &mut rng)?;
    let mut perm: Vec<usize> = (0..total).collect();
    perm.shuffle(&mut stream(spec.seed, StreamId::Holdout));
    let (train_idx, holdout_idx) = perm.split_at(spec.n);
    let train_raw = raw.select(Axis(0), train_idx);
    let holdout_raw = raw.select(Axis(0), holdout_idx);
    let transform = if spec.standardize {
        Standardization::fit(&train_raw.view())?
    } else {
        Standardization::identity(2)
    };
    Ok(DatasetSplit {
        train: transform.apply(&train_raw.view())?,
        holdout: transform.apply(&holdout_raw.view())?,
        transform,
        train_idx: train_idx.to_vec(),
        holdout_idx: holdout_idx.to_vec(),
    })
}

/// Log density of a mixture in raw coordinates.
pub fn mixture_log_density(components: &[MixtureComponent], x: &[f64]) -> f64 {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let terms: Vec<f64> = components
        .iter()
        .map(|c| {
            let d = x.len() as f64;
            let r2: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (c.weight / total).ln()
                - 0.5 * r2 / (c.std * c.std)
                - d * (c.std.ln() + 0.5 * (2.0 * PI).ln())
        })
        .collect();
    log_sum_exp(&terms)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFamily {
    Gaussian,
    Laplace,
}

/// Product base distribution `p0`: Gaussian with std `scale` or Laplace
/// with scale `scale` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseDistribution {
    pub family: BaseFamily,
    pub scale: f64,
    pub dim: usize,
}

impl BaseDistribution {
    pub fn standard_normal(dim: usize) -> Self {
        BaseDistribution {
            family: BaseFamily::Gaussian,
            scale: 1.0,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || self.dim == 0 {
            return Err(Error::Config(format!(
                "base distribution needs positive scale and dimension, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let s = self.scale;
        match self.family {
            BaseFamily::Gaussian => Array2::from_shape_fn((n, self.dim), |_| {
                let z: f64 = rng.sample(StandardNormal);
                s * z
            }),
            BaseFamily::Laplace => Array2::from_shape_fn((n, self.dim), |_| {
                let u = rng.random::<f64>() - 0.5;
                -s * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }),
        }
    }

    pub fn log_density_point(&self, x: &[f64]) -> f64 {
        let s = self.scale;
        match self.family {
            BaseFamily::Gaussian => x
                .iter()
                .map(|v| -0.5 * (v / s) * (v / s) - s.ln() - 0.5 * (2.0 * PI).ln())
                .sum(),
            BaseFamily::Laplace => x.iter().map(|v| -v.abs() / s - (2.0 * s).ln()).sum(),
        }
    }

    pub fn log_density(&self, x: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        ensure_dim(self.dim, x.ncols(), "base distribution dimension")?;
        Ok(x.rows()
            .into_iter()
            .map(|r| self.log_density_point(r.as_slice().expect("standard layout")))
            .collect())
    }
}

fn column_names(d: usize) -> Vec<String> {
    match d {
        2 => vec!["x".into(), "y".into()],
        _ => (1..=d).map(|k| format!("x{k}")).collect(),
    }
}

/// Write points as CSV with header `x,y` (or `x1,…,xd`).
pub fn write_csv(path: &Path, points: &ArrayView2<'_, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(column_names(points.ncols()))
        .map_err(|e| csv_error(path, e))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read points written by [`write_csv`] or any numeric CSV with a header.
pub fn read_csv(path: &Path) -> Result<Batch> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = r.headers().map_err(|e| csv_error(path, e))?.len();
    let mut flat = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "{}: non-numeric field '{field}' on row {}",
                    path.display(),
                    n + 1
                ))
            })?;
            flat.push(v);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::InvalidInput(format!("{}: {e}", path.display()))
}
