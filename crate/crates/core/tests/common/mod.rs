//! Shared gradient and stop-gradient checks for the integration suites.

#![allow(dead_code)]

use driftmap_core::data::BaseDistribution;
use driftmap_core::drift::{drifting_loss, feature_drifting_loss, DriftOptions, LinearFeatureMap};
use driftmap_core::eval::rel_err;
use driftmap_core::kernels::KernelSpec;
use driftmap_core::likelihood::{
    importance_weights, likelihood_loss, likelihood_objective, ReferenceMixture,
};
use driftmap_core::net::{Activation, Mlp};
use driftmap_core::rng::{stream, StreamId};
use driftmap_core::Batch;
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative-error floor for gradient entries near zero.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;

/// Richardson-extrapolated central difference of `f` along coordinate `i`.
pub fn fd(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut central = |h: f64| {
        let mut p = x.to_vec();
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    };
    let coarse = central(FD_STEP);
    let fine = central(FD_STEP / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Worst relative error of `analytic` against finite differences of `f`
/// over `count` random coordinates.
pub fn fd_max_rel_err(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    sample(rng, x.len(), count.min(x.len()))
        .into_iter()
        .map(|i| rel_err(analytic[i], fd(&mut f, x, i), GRAD_FLOOR))
        .fold(0.0, f64::max)
}

pub fn with_params(model: &Mlp, p: &[f64]) -> Mlp {
    let mut m = model.clone();
    m.set_params(p).unwrap();
    m
}

pub fn gaussian_batch(rng: &mut ChaCha8Rng, n: usize, scale: f64, offset: f64) -> Batch {
    let base = BaseDistribution::standard_normal(2);
    base.sample(n, rng) * scale + offset
}

/// `mean_i ‖out_i − target_i‖²`.
pub fn frozen_mse(out: &ArrayView2<'_, f64>, target: &ArrayView2<'_, f64>) -> f64 {
    (out - target).mapv(|v| v * v).sum() / out.nrows() as f64
}

/// One finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Network, drifting-loss and likelihood-loss gradients against finite
/// differences, `count` random coordinates each.
pub fn gradient_suite(seed: u64, count: usize) -> Vec<GradCheck> {
    let mut rng = stream(seed, StreamId::Eval);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(GradCheck {
            name: name.into(),
            max_rel_err: err,
            checked: count,
        })
    };

    for act in [Activation::Silu, Activation::Tanh] {
        let net = Mlp::new(&[2, 16, 16, 2], act, &mut rng).unwrap();
        let x = gaussian_batch(&mut rng, 12, 1.0, 0.0);
        let u = gaussian_batch(&mut rng, 12, 1.0, 0.0);
        let g = net.backward(&x.view(), &u.view()).unwrap();
        let inner = |m: &Mlp, x: &ArrayView2<'_, f64>| (m.forward(x).unwrap() * &u).sum();
        let err = fd_max_rel_err(
            |p| inner(&with_params(&net, p), &x.view()),
            net.params(),
            &g.params,
            count,
            &mut rng,
        );
        push(&format!("net_params_{act:?}"), err);
        let flat: Vec<f64> = x.iter().copied().collect();
        let gin: Vec<f64> = g.input.iter().copied().collect();
        let err = fd_max_rel_err(
            |p| {
                inner(
                    &net,
                    &Array2::from_shape_vec((12, 2), p.to_vec()).unwrap().view(),
                )
            },
            &flat,
            &gin,
            count,
            &mut rng,
        );
        push(&format!("net_input_{act:?}"), err);
    }

    let psi = Mlp::new(&[2, 24, 24, 2], Activation::Silu, &mut rng).unwrap();
    let noise = gaussian_batch(&mut rng, 40, 1.0, 0.0);
    let data = gaussian_batch(&mut rng, 48, 0.7, 0.5);
    let spec = KernelSpec::gaussian(0.5).unwrap();
    for (name, opts) in [
        ("drifting_loss_order1", DriftOptions::first_order()),
        ("drifting_loss_order2", DriftOptions::default()),
    ] {
        let lo = drifting_loss(&psi, &noise.view(), &data.view(), &opts, &spec).unwrap();
        let t = lo.target.target.clone();
        let err = fd_max_rel_err(
            |p| {
                frozen_mse(
                    &with_params(&psi, p).forward(&noise.view()).unwrap().view(),
                    &t.view(),
                )
            },
            psi.params(),
            &lo.grads,
            count,
            &mut rng,
        );
        push(name, err);
    }
    let maps = vec![
        LinearFeatureMap {
            matrix: vec![vec![0.6, 0.8], vec![-0.8, 0.6]],
            offset: None,
        },
        LinearFeatureMap {
            matrix: vec![vec![1.5, -0.3]],
            offset: Some(vec![0.2]),
        },
    ];
    let lo = feature_drifting_loss(
        &psi,
        &noise.view(),
        &data.view(),
        &maps,
        &DriftOptions::default(),
        &spec,
    )
    .unwrap();
    let frozen: Vec<(Batch, Batch)> = maps
        .iter()
        .map(|m| {
            let zg = m
                .apply(&psi.forward(&noise.view()).unwrap().view())
                .unwrap();
            let zd = m.apply(&data.view()).unwrap();
            let t = driftmap_core::drift::drift_target(
                &zg.view(),
                &zd.view(),
                &DriftOptions::default(),
                &spec,
            )
            .unwrap();
            (zg, t.target)
        })
        .collect();
    let err = fd_max_rel_err(
        |p| {
            let gen = with_params(&psi, p).forward(&noise.view()).unwrap();
            maps.iter()
                .zip(&frozen)
                .map(|(m, (_, t))| frozen_mse(&m.apply(&gen.view()).unwrap().view(), &t.view()))
                .sum()
        },
        psi.params(),
        &lo.grads,
        count,
        &mut rng,
    );
    push("feature_drifting_loss", err);

    let (g, points, mix, reference, candidates) = likelihood_fixture(&mut rng);
    let base = BaseDistribution::standard_normal(2);
    let set = importance_weights(candidates.clone(), &g, &base, &reference).unwrap();
    let ll = likelihood_loss(&g, &points.view(), &mix.view(), &set, &spec).unwrap();
    let t = Array2::from_shape_vec((points.nrows(), 1), ll.targets.target.clone()).unwrap();
    let err = fd_max_rel_err(
        |p| {
            frozen_mse(
                &with_params(&g, p).forward(&points.view()).unwrap().view(),
                &t.view(),
            )
        },
        g.params(),
        &ll.grads,
        count,
        &mut rng,
    );
    push("likelihood_loss", err);

    let lambda = 0.7;
    let obj = likelihood_objective(
        &g,
        &points.view(),
        &mix.view(),
        candidates.clone(),
        &base,
        &reference,
        lambda,
        &spec,
    )
    .unwrap();
    let err = fd_max_rel_err(
        |p| {
            let gp = with_params(&g, p);
            let o = likelihood_objective(
                &gp,
                &points.view(),
                &mix.view(),
                candidates.clone(),
                &base,
                &reference,
                lambda,
                &spec,
            )
            .unwrap();
            frozen_mse(&gp.forward(&points.view()).unwrap().view(), &t.view())
                + lambda * o.norm_loss
        },
        g.params(),
        &obj.grads,
        count,
        &mut rng,
    );
    push("likelihood_objective", err);
    out
}

/// `(G, sample points, data, reference, candidates)` with a non-trivial `G`.
pub fn likelihood_fixture(rng: &mut ChaCha8Rng) -> (Mlp, Batch, Batch, ReferenceMixture, Batch) {
    let mut g = Mlp::new(&[2, 16, 16, 1], Activation::Tanh, rng).unwrap();
    let scaled: Vec<f64> = g.params().iter().map(|p| 0.5 * p).collect();
    g.set_params(&scaled).unwrap();
    let points = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>() * 6.0 - 3.0);
    let mix = gaussian_batch(rng, 40, 0.6, 0.4);
    let reference = ReferenceMixture::new(mix.clone(), 0.5).unwrap();
    let candidates = reference.sample(50, rng);
    (g, points, mix, reference, candidates)
}

/// Largest difference between each loss's gradient and a plain regression
/// onto its frozen target.
pub fn stop_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = stream(seed, StreamId::Eval);
    let mut out = Vec::new();
    let spec = KernelSpec::gaussian(0.5).unwrap();
    let psi = Mlp::new(&[2, 24, 24, 2], Activation::Silu, &mut rng).unwrap();
    let noise = gaussian_batch(&mut rng, 64, 1.0, 0.0);
    let data = gaussian_batch(&mut rng, 64, 0.7, 0.5);
    for (name, opts) in [
        ("drifting_loss_order1", DriftOptions::first_order()),
        ("drifting_loss_order2", DriftOptions::default()),
    ] {
        let lo = drifting_loss(&psi, &noise.view(), &data.view(), &opts, &spec).unwrap();
        let gen = psi.forward(&noise.view()).unwrap();
        let n = gen.nrows() as f64;
        let upstream = (&gen - &lo.target.target) * (2.0 / n);
        let reg = psi
            .backward(&noise.view(), &upstream.view())
            .unwrap()
            .params;
        out.push((name.to_string(), max_abs_diff(&lo.grads, &reg)));
    }
    let (g, points, mix, reference, candidates) = likelihood_fixture(&mut rng);
    let base = BaseDistribution::standard_normal(2);
    let set = importance_weights(candidates, &g, &base, &reference).unwrap();
    let ll = likelihood_loss(&g, &points.view(), &mix.view(), &set, &spec).unwrap();
    let gv = g.forward(&points.view()).unwrap();
    let t = Array2::from_shape_vec((points.nrows(), 1), ll.targets.target.clone()).unwrap();
    let upstream = (&gv - &t) * (2.0 / points.nrows() as f64);
    let reg = g.backward(&points.view(), &upstream.view()).unwrap().params;
    out.push(("likelihood_loss".to_string(), max_abs_diff(&ll.grads, &reg)));
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
