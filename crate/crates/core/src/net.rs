//! Feedforward networks with hand-written backpropagation, Adam and EMA.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its weight as an
//! `in × out` row-major block followed by its `out` biases. Gradients use the
//! same layout, which keeps the optimizer, EMA and finite-difference checks
//! layout-agnostic.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ensure_dim;
use crate::simd;
use crate::{Batch, Error, Result};

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * simd::sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Apply in place over a whole layer, optionally recording `f'(z)`.
    fn apply_batch(self, h: &mut Batch, deriv: Option<&mut Batch>) {
        let contiguous =
            h.is_standard_layout() && deriv.as_ref().is_none_or(|d| d.is_standard_layout());
        if matches!(self, Activation::Silu) && contiguous {
            let hs = h.as_slice_mut().expect("standard layout");
            match deriv {
                Some(d) => silu_with_deriv(hs, d.as_slice_mut().expect("standard layout")),
                None => silu(hs),
            }
            return;
        }
        match deriv {
            Some(d) => ndarray::Zip::from(h).and(d).for_each(|z, dz| {
                let (a, da) = self.apply_with_deriv(*z);
                *z = a;
                *dz = da;
            }),
            None => h.mapv_inplace(|z| self.apply(z)),
        }
    }

    /// Returns `(f(z), f'(z))`.
    #[inline(always)]
    fn apply_with_deriv(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let s = simd::sigmoid(z);
                (z * s, s * (1.0 + z * (1.0 - s)))
            }
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

#[inline(always)]
fn silu_body(h: &mut [f64]) {
    h.iter_mut().for_each(|z| *z *= simd::sigmoid(*z));
}

simd::avx2_dispatch! {
    fn silu => silu_body(h: &mut [f64]) -> ()
}

#[inline(always)]
fn silu_with_deriv_body(h: &mut [f64], deriv: &mut [f64]) {
    for (z, dz) in h.iter_mut().zip(deriv) {
        let (a, da) = Activation::Silu.apply_with_deriv(*z);
        *z = a;
        *dz = da;
    }
}

simd::avx2_dispatch! {
    fn silu_with_deriv => silu_with_deriv_body(h: &mut [f64], deriv: &mut [f64]) -> ()
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerLayout {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
    fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
    fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

/// Multilayer perceptron `R^{d_in} → R^{d_out}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (`inputs[0]` is the network input).
    inputs: Vec<Batch>,
    /// Activation derivative at every hidden pre-activation.
    derivs: Vec<Batch>,
}

/// Result of [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `∂⟨upstream, f(x)⟩/∂θ` in the flat parameter layout.
    pub params: Vec<f64>,
    /// `∂⟨upstream, f(x)⟩/∂x`, one row per input row.
    pub input: Batch,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; n],
        })
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activation)?;
        for l in 0..mlp.num_layers() {
            let lay = mlp.layout(l);
            let bound = 1.0 / (lay.fan_in as f64).sqrt();
            for p in &mut mlp.params[lay.offset..lay.bias_offset()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    /// Square hidden stack: `d_in → width (× hidden) → d_out`.
    pub fn widths_for(d_in: usize, hidden: usize, width: usize, d_out: usize) -> Vec<usize> {
        let mut w = vec![d_in];
        w.extend(std::iter::repeat_n(width, hidden));
        w.push(d_out);
        w
    }

    /// Zero the last affine map so the network starts as the zero function.
    pub fn zero_output_layer(&mut self) {
        let lay = self.layout(self.num_layers() - 1);
        self.params[lay.offset..lay.end()].fill(0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.params.len(), params.len(), "parameter vector")?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layout(&self, l: usize) -> LayerLayout {
        let offset = self.widths[..l + 1]
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        LayerLayout {
            fan_in: self.widths[l],
            fan_out: self.widths[l + 1],
            offset,
        }
    }

    /// Weight (`in × out`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let lay = self.layout(l);
        let w = ArrayView2::from_shape(
            (lay.fan_in, lay.fan_out),
            &self.params[lay.offset..lay.bias_offset()],
        )
        .expect("layout is consistent");
        let b = ArrayView1::from(&self.params[lay.bias_offset()..lay.end()]);
        (w, b)
    }

    fn affine(&self, l: usize, input: &ArrayView2<'_, f64>) -> Batch {
        let (w, b) = self.layer(l);
        let mut z = input.dot(&w);
        z += &b;
        z
    }

    /// Evaluate the network on every row of `x`.
    pub fn forward(&self, x: &ArrayView2<'_, f64>) -> Result<Batch> {
        ensure_dim(self.input_dim(), x.ncols(), "network input columns")?;
        let last = self.num_layers() - 1;
        let mut h = self.affine(0, x);
        for l in 1..=last {
            self.activation.apply_batch(&mut h, None);
            h = self.affine(l, &h.view());
        }
        Ok(h)
    }

    /// Forward pass that also records what [`Mlp::backward_cached`] needs.
    pub fn forward_cached(&self, x: &ArrayView2<'_, f64>) -> Result<(Batch, ForwardCache)> {
        ensure_dim(self.input_dim(), x.ncols(), "network input columns")?;
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut derivs = Vec::with_capacity(last);
        inputs.push(x.to_owned());
        let mut h = self.affine(0, x);
        for l in 1..=last {
            let mut d = Array2::zeros(h.raw_dim());
            self.activation.apply_batch(&mut h, Some(&mut d));
            derivs.push(d);
            let next = self.affine(l, &h.view());
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardCache { inputs, derivs }))
    }

    /// Gradients of `⟨upstream, f(x)⟩` with respect to parameters and input.
    pub fn backward(
        &self,
        x: &ArrayView2<'_, f64>,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        let (_, cache) = self.forward_cached(x)?;
        self.backward_cached(&cache, upstream)
    }

    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        let (params, input) = self.backprop(cache, upstream, true)?;
        Ok(Gradients {
            params: params.expect("requested"),
            input,
        })
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn input_gradient_cached(
        &self,
        cache: &ForwardCache,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Batch> {
        Ok(self.backprop(cache, upstream, false)?.1)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &ArrayView2<'_, f64>,
        want_params: bool,
    ) -> Result<(Option<Vec<f64>>, Batch)> {
        let n = cache.inputs[0].nrows();
        ensure_dim(n, upstream.nrows(), "upstream rows")?;
        ensure_dim(self.output_dim(), upstream.ncols(), "upstream columns")?;
        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let lay = self.layout(l);
            let (w, _) = self.layer(l);
            if let Some(g) = grads.as_mut() {
                let gw = cache.inputs[l].t().dot(&delta);
                let gb = delta.sum_axis(Axis(0));
                g[lay.offset..lay.bias_offset()]
                    .iter_mut()
                    .zip(gw.iter())
                    .for_each(|(d, s)| *d = *s);
                g[lay.bias_offset()..lay.end()]
                    .iter_mut()
                    .zip(gb.iter())
                    .for_each(|(d, s)| *d = *s);
            }
            let mut prev = delta.dot(&w.t());
            if l > 0 {
                prev *= &cache.derivs[l - 1];
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    pub(crate) fn to_layers(&self, params: &[f64]) -> Vec<LayerParams> {
        (0..self.num_layers())
            .map(|l| {
                let lay = self.layout(l);
                LayerParams {
                    w: params[lay.offset..lay.bias_offset()].to_vec(),
                    b: params[lay.bias_offset()..lay.end()].to_vec(),
                }
            })
            .collect()
    }

    pub(crate) fn flatten_layers(&self, layers: &[LayerParams]) -> Result<Vec<f64>> {
        ensure_dim(self.num_layers(), layers.len(), "checkpoint layer count")?;
        let mut flat = Vec::with_capacity(self.params.len());
        for (l, lp) in layers.iter().enumerate() {
            let lay = self.layout(l);
            ensure_dim(lay.weight_len(), lp.w.len(), "checkpoint weight length")?;
            ensure_dim(lay.fan_out, lp.b.len(), "checkpoint bias length")?;
            flat.extend_from_slice(&lp.w);
            flat.extend_from_slice(&lp.b);
        }
        Ok(flat)
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self::with_betas(num_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update. Non-finite gradients reject the whole update and leave
/// both parameters and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    ensure_dim(params.len(), grads.len(), "gradient length")?;
    ensure_dim(params.len(), state.m.len(), "adam state length")?;
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            context: "adam_step",
            index,
            value,
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidInput(format!(
                "ema decay {decay} outside [0, 1]"
            )));
        }
        Ok(EmaState {
            shadow: params.to_vec(),
            decay,
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.shadow.len(), params.len(), "ema parameter length")?;
        let d = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// One affine layer: `w` is `in × out` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub arch: Arch,
    pub params: Vec<LayerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<Vec<LayerParams>>,
    pub step: u64,
}

impl ModelFile {
    pub fn from_model(model: &Mlp, ema: Option<&EmaState>, step: u64) -> Self {
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            arch: Arch {
                widths: model.widths.clone(),
                activation: model.activation,
            },
            params: model.to_layers(&model.params),
            ema: ema.map(|e| model.to_layers(&e.shadow)),
            step,
        }
    }

    /// Rebuild the model and, when present, the EMA shadow parameters.
    pub fn to_model(&self) -> Result<(Mlp, Option<Vec<f64>>)> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model format version {}",
                self.version
            )));
        }
        let mut model = Mlp::zeros(&self.arch.widths, self.arch.activation)?;
        let flat = model.flatten_layers(&self.params)?;
        model.params = flat;
        let ema = self
            .ema
            .as_ref()
            .map(|layers| model.flatten_layers(layers))
            .transpose()?;
        Ok((model, ema))
    }
}
