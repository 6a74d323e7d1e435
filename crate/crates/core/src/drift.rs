//! Terminal drift fields and the one-step generator losses.
//!
//! For a generated point `x` the attraction `V⁺(x) = E_w[x₁ − x]` averages
//! over data and the repulsion `V⁻(x)` over the generator's own batch, both
//! under the `t = 1` kernel. Targets are detached: the loss gradient only
//! flows through the generator output.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite};
use crate::kernels::{self_moments, terminal_moments, KernelSpec};
use crate::net::Mlp;
use crate::{Batch, Error, Result};

/// Which finite-difference scheme the loss came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DriftOrder {
    /// Forward Euler: attraction only.
    First,
    /// Trapezoidal: attraction and repulsion.
    Second,
}

impl TryFrom<u8> for DriftOrder {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(DriftOrder::First),
            2 => Ok(DriftOrder::Second),
            _ => Err(format!("drift order must be 1 or 2, got {v}")),
        }
    }
}

impl From<DriftOrder> for u8 {
    fn from(o: DriftOrder) -> u8 {
        match o {
            DriftOrder::First => 1,
            DriftOrder::Second => 2,
        }
    }
}

/// Coefficients of the second-order target: `½V⁺ − ½V⁻` or `V⁺ − V⁻`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftScale {
    #[default]
    Half,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftOptions {
    pub order: DriftOrder,
    #[serde(default)]
    pub scale: DriftScale,
    /// Drop the self-pair from the repulsion average.
    #[serde(default)]
    pub exclude_self: bool,
}

impl Default for DriftOptions {
    fn default() -> Self {
        DriftOptions {
            order: DriftOrder::Second,
            scale: DriftScale::Half,
            exclude_self: false,
        }
    }
}

impl DriftOptions {
    pub fn first_order() -> Self {
        DriftOptions {
            order: DriftOrder::First,
            ..Default::default()
        }
    }

    fn coefficients(&self) -> (f64, f64) {
        match (self.order, self.scale) {
            (DriftOrder::First, _) => (1.0, 0.0),
            (DriftOrder::Second, DriftScale::Half) => (0.5, 0.5),
            (DriftOrder::Second, DriftScale::Full) => (1.0, 1.0),
        }
    }
}

/// Per-row regression targets and their components.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTarget {
    pub target: Batch,
    pub attraction: Batch,
    /// Zero for first-order targets.
    pub repulsion: Batch,
    pub ess_attraction: Vec<f64>,
    /// Empty for first-order targets.
    pub ess_repulsion: Vec<f64>,
}

impl DriftTarget {
    pub fn min_ess(&self) -> f64 {
        self.ess_attraction
            .iter()
            .chain(&self.ess_repulsion)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn one_row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// `V⁺(x) = Σ wᵢ(x₁ⁱ − x)`, `wᵢ ∝ k₁(x₁ⁱ, x)`.
pub fn attraction(x: &[f64], data: &ArrayView2<'_, f64>, spec: &KernelSpec) -> Result<Vec<f64>> {
    let q = one_row(x);
    Ok(terminal_moments(&q.view(), data, None, false, spec)?
        .shift
        .row(0)
        .to_vec())
}

/// `V⁻(x)`: the same average over generated samples. It points toward the
/// generated mass; targets subtract it.
pub fn repulsion(
    x: &[f64],
    generated: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    attraction(x, generated, spec)
}

/// Attraction for every row of `gen`, with per-row ESS.
pub fn attraction_field(
    gen: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<(Batch, Vec<f64>)> {
    let m = terminal_moments(gen, data, None, false, spec)?;
    Ok((m.shift, m.ess))
}

/// Repulsion of every row of `gen` against the batch itself.
pub fn repulsion_field(
    gen: &ArrayView2<'_, f64>,
    exclude_self: bool,
    spec: &KernelSpec,
) -> Result<(Batch, Vec<f64>)> {
    let m = if exclude_self {
        terminal_moments(gen, gen, None, true, spec)?
    } else {
        self_moments(gen, spec)?
    };
    Ok((m.shift, m.ess))
}

/// `gen + V⁺(gen; data)`.
pub fn first_order_target(
    gen: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<DriftTarget> {
    drift_target(gen, data, &DriftOptions::first_order(), spec)
}

/// `gen + ½V⁺(gen; data) − ½V⁻(gen; gen)`.
pub fn second_order_target(
    gen: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<DriftTarget> {
    drift_target(gen, data, &DriftOptions::default(), spec)
}

pub fn drift_target(
    gen: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    opts: &DriftOptions,
    spec: &KernelSpec,
) -> Result<DriftTarget> {
    if gen.nrows() == 0 {
        return Err(Error::InvalidInput("generated batch is empty".into()));
    }
    let (a, b) = opts.coefficients();
    let (attraction, ess_attraction) = attraction_field(gen, data, spec)?;
    let (repulsion, ess_repulsion) = match opts.order {
        DriftOrder::First => (Array2::zeros(gen.raw_dim()), Vec::new()),
        DriftOrder::Second => repulsion_field(gen, opts.exclude_self, spec)?,
    };
    let mut target = gen.to_owned();
    ndarray::Zip::from(&mut target)
        .and(&attraction)
        .and(&repulsion)
        .for_each(|t, &vp, &vm| *t += a * vp - b * vm);
    Ok(DriftTarget {
        target,
        attraction,
        repulsion,
        ess_attraction,
        ess_repulsion,
    })
}

/// Loss value, flat parameter gradient and the detached target.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub target: DriftTarget,
}

/// `mean_i ‖out_i − target_i‖²` and `∂/∂out = 2(out − target)/n`.
pub(crate) fn squared_error(
    out: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
) -> (f64, Batch) {
    let n = out.nrows() as f64;
    let diff = out - target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

fn check_target(t: &DriftTarget) -> Result<()> {
    if t.target.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite drift target (kernel collapse); minimum ESS {:.3e}",
            t.min_ess()
        )))
    }
}

/// Drifting loss for `ψ` on one noise / data mini-batch.
pub fn drifting_loss(
    model: &Mlp,
    noise: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    opts: &DriftOptions,
    spec: &KernelSpec,
) -> Result<LossOutput> {
    ensure_dim(model.output_dim(), data.ncols(), "data columns")?;
    let (gen, cache) = model.forward_cached(noise)?;
    ensure_finite(&gen, "generator output")?;
    let target = drift_target(&gen.view(), data, opts, spec)?;
    check_target(&target)?;
    let (loss, upstream) = squared_error(&gen.view(), &target.target.view());
    let grads = model.backward_cached(&cache, &upstream.view())?.params;
    Ok(LossOutput {
        loss,
        grads,
        target,
    })
}

/// A linear feature map `φ(z) = A z + o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFeatureMap {
    /// Row-major `d_z × d`.
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
}

impl LinearFeatureMap {
    pub fn identity(d: usize) -> Self {
        let matrix = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        LinearFeatureMap {
            matrix,
            offset: None,
        }
    }

    /// `(A, o)` after shape and finiteness checks.
    pub fn parts(&self, d: usize) -> Result<(Array2<f64>, Array1<f64>)> {
        let dz = self.matrix.len();
        if dz == 0 {
            return Err(Error::InvalidInput("feature map has no rows".into()));
        }
        let mut a = Array2::zeros((dz, d));
        for (i, row) in self.matrix.iter().enumerate() {
            ensure_dim(d, row.len(), "feature map columns")?;
            a.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = *v);
        }
        let o = match &self.offset {
            Some(o) => {
                ensure_dim(dz, o.len(), "feature map offset")?;
                Array1::from(o.clone())
            }
            None => Array1::zeros(dz),
        };
        if a.iter().chain(o.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature map has non-finite entries".into(),
            ));
        }
        Ok((a, o))
    }

    /// `true` when `A Aᵀ = I` to within `tol`.
    pub fn has_orthonormal_rows(&self, d: usize, tol: f64) -> Result<bool> {
        let (a, _) = self.parts(d)?;
        let g = a.dot(&a.t());
        Ok(g.indexed_iter()
            .all(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs() <= tol))
    }

    pub fn apply(&self, x: &ArrayView2<'_, f64>) -> Result<Batch> {
        let (a, o) = self.parts(x.ncols())?;
        Ok(x.dot(&a.t()) + &o)
    }
}

/// Sum over feature maps of the drifting loss computed in feature space.
///
/// The returned target is the one of the last map.
pub fn feature_drifting_loss(
    model: &Mlp,
    noise: &ArrayView2<'_, f64>,
    data: &ArrayView2<'_, f64>,
    maps: &[LinearFeatureMap],
    opts: &DriftOptions,
    spec: &KernelSpec,
) -> Result<LossOutput> {
    if maps.is_empty() {
        return Err(Error::InvalidInput(
            "feature loss needs at least one map".into(),
        ));
    }
    let d = model.output_dim();
    ensure_dim(d, data.ncols(), "data columns")?;
    let (gen, cache) = model.forward_cached(noise)?;
    ensure_finite(&gen, "generator output")?;
    let mut upstream = Array2::<f64>::zeros(gen.raw_dim());
    let mut loss = 0.0;
    let mut last = None;
    for map in maps {
        let (a, o) = map.parts(d)?;
        let zg = gen.dot(&a.t()) + &o;
        let zd = data.dot(&a.t()) + &o;
        let target = drift_target(&zg.view(), &zd.view(), opts, spec)?;
        check_target(&target)?;
        let (l, dz) = squared_error(&zg.view(), &target.target.view());
        loss += l;
        upstream += &dz.dot(&a);
        last = Some(target);
    }
    let grads = model.backward_cached(&cache, &upstream.view())?.params;
    Ok(LossOutput {
        loss,
        grads,
        target: last.expect("maps is nonempty"),
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, concatenate, Axis};
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::net::Activation;
    use crate::rng::{stream, StreamId};

    fn spec() -> KernelSpec {
        KernelSpec::gaussian(0.5).unwrap()
    }

    fn normal(n: usize, seed: u64) -> Batch {
        let mut rng = stream(seed, StreamId::Eval);
        Array2::from_shape_fn((n, 2), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn attraction_trivial_cases() {
        let x = [0.3, -0.2];
        assert_eq!(
            attraction(&x, &one_row(&x).view(), &spec()).unwrap(),
            vec![0.0, 0.0]
        );
        let v = attraction(&x, &array![[1.3, 0.8]].view(), &spec()).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
        let sym = array![[1.3, 0.8], [-0.7, -1.2]];
        let v = attraction(&x, &sym.view(), &spec()).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
        let v = repulsion(&x, &sym.view(), &spec()).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn repulsion_of_data_batch_equals_attraction() {
        let s = normal(64, 1);
        let x = [0.1, 0.4];
        assert_eq!(
            attraction(&x, &s.view(), &spec()).unwrap(),
            repulsion(&x, &s.view(), &spec()).unwrap()
        );
    }

    #[test]
    fn first_order_targets() {
        let data = array![[2.0, 1.0]];
        let gen = normal(5, 2);
        let t = first_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        for row in t.target.rows() {
            assert!((row[0] - 2.0).abs() < 1e-14 && (row[1] - 1.0).abs() < 1e-14);
        }
        let t = first_order_target(
            &array![[0.0, 0.0]].view(),
            &array![[1.0, 0.0], [-1.0, 0.0]].view(),
            &spec(),
        )
        .unwrap();
        assert_eq!(t.target, array![[0.0, 0.0]]);
    }

    #[test]
    fn second_order_midpoint_and_identity() {
        let t = second_order_target(
            &array![[0.0, 2.0]].view(),
            &array![[1.0, 0.0]].view(),
            &spec(),
        )
        .unwrap();
        assert!((t.target[[0, 0]] - 0.5).abs() < 1e-15 && (t.target[[0, 1]] - 1.0).abs() < 1e-15);
        let s = normal(100, 3);
        let t = second_order_target(&s.view(), &s.view(), &spec()).unwrap();
        assert_eq!(t.target, s);
    }

    #[test]
    fn second_order_is_composed_from_parts() {
        let gen = normal(50, 4);
        let data = normal(70, 5) + 0.5;
        let t = second_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        let f = first_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        for i in 0..gen.nrows() {
            let x = gen.row(i).to_vec();
            let vm = repulsion(&x, &gen.view(), &spec()).unwrap();
            for k in 0..2 {
                let vp = f.attraction[[i, k]];
                assert_eq!(t.target[[i, k]], x[k] + (0.5 * vp - 0.5 * vm[k]));
            }
        }
    }

    #[test]
    fn full_scale_and_self_exclusion() {
        let gen = normal(20, 6);
        let data = normal(30, 7);
        let half = second_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        let full = drift_target(
            &gen.view(),
            &data.view(),
            &DriftOptions {
                scale: DriftScale::Full,
                ..Default::default()
            },
            &spec(),
        )
        .unwrap();
        let step_half = &half.target - &gen;
        let step_full = &full.target - &gen;
        for (h, f) in step_half.iter().zip(&step_full) {
            assert!((2.0 * h - f).abs() < 1e-14);
        }
        let excl = drift_target(
            &gen.view(),
            &data.view(),
            &DriftOptions {
                exclude_self: true,
                ..Default::default()
            },
            &spec(),
        )
        .unwrap();
        let rest = gen.slice(ndarray::s![1.., ..]);
        let vm = repulsion(&gen.row(0).to_vec(), &rest, &spec()).unwrap();
        for k in 0..2 {
            assert!((excl.repulsion[[0, k]] - vm[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_samples_leave_targets_unchanged() {
        let gen = normal(15, 8);
        let data = normal(25, 9);
        let a = second_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        let data3 = concatenate![Axis(0), data, data, data];
        let b = first_order_target(&gen.view(), &data3.view(), &spec()).unwrap();
        let f = first_order_target(&gen.view(), &data.view(), &spec()).unwrap();
        for (x, y) in f.target.iter().zip(&b.target) {
            assert!((x - y).abs() < 1e-13);
        }
        assert!(a.target.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_is_zero_when_generator_matches_batch() {
        // A zero network maps every noise row to the origin; the matching
        // data batch is a single repeated origin.
        let model = Mlp::zeros(&[2, 8, 2], Activation::Silu).unwrap();
        let noise = normal(10, 10);
        let data = Array2::zeros((10, 2));
        let out = drifting_loss(
            &model,
            &noise.view(),
            &data.view(),
            &DriftOptions::default(),
            &spec(),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn feature_map_checks() {
        let bad = LinearFeatureMap {
            matrix: vec![vec![1.0, 0.0], vec![0.0]],
            offset: None,
        };
        assert!(bad.parts(2).is_err());
        let bad = LinearFeatureMap {
            matrix: vec![vec![1.0, 0.0]],
            offset: Some(vec![0.0, 1.0]),
        };
        assert!(bad.parts(2).is_err());
        assert!(LinearFeatureMap::identity(3)
            .has_orthonormal_rows(3, 1e-15)
            .unwrap());
    }

    #[test]
    fn zero_feature_map_gives_zero_loss() {
        let mut rng = stream(1, StreamId::Init);
        let model = Mlp::new(&[2, 16, 2], Activation::Silu, &mut rng).unwrap();
        let zero = LinearFeatureMap {
            matrix: vec![vec![0.0, 0.0]],
            offset: Some(vec![1.5]),
        };
        let out = feature_drifting_loss(
            &model,
            &normal(12, 11).view(),
            &normal(12, 12).view(),
            &[zero],
            &DriftOptions::default(),
            &spec(),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn identity_feature_loss_equals_data_loss() {
        let mut rng = stream(2, StreamId::Init);
        let model = Mlp::new(&[2, 16, 2], Activation::Silu, &mut rng).unwrap();
        let noise = normal(32, 13);
        let data = normal(32, 14);
        let opts = DriftOptions::default();
        let a = drifting_loss(&model, &noise.view(), &data.view(), &opts, &spec()).unwrap();
        let b = feature_drifting_loss(
            &model,
            &noise.view(),
            &data.view(),
            &[LinearFeatureMap::identity(2)],
            &opts,
            &spec(),
        )
        .unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn order_round_trips_through_json() {
        let o: DriftOptions = serde_json::from_str(r#"{"order":1,"scale":"full"}"#).unwrap();
        assert_eq!(o.order, DriftOrder::First);
        assert_eq!(serde_json::to_string(&DriftOrder::Second).unwrap(), "2");
        assert!(serde_json::from_str::<DriftOptions>(r#"{"order":3}"#).is_err());
        assert!(serde_json::from_str::<DriftOptions>(r#"{"order":2,"bogus":0}"#).is_err());
    }
}
