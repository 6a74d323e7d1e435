//! Training loops for the generator `ψ` and the log-density change `G`,
//! with JSON configs, named presets, checkpoints and a JSON-lines run log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_raw, sample_split, BaseDistribution, DatasetKind, DatasetSpec, MixtureComponent,
    Standardization,
};
use crate::drift::{
    drifting_loss, feature_drifting_loss, DriftOptions, LinearFeatureMap, LossOutput,
};
use crate::eval::{energy_distance, DensitySource, MetricReport, Threshold};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihood::{
    draw_sample_points, grid_points, likelihood_objective, normalization_integral, IntegralMethod,
    ReferenceMixture, SampleRegion,
};
use crate::net::{adam_step, Activation, AdamState, EmaState, Mlp, ModelFile};
use crate::rng::{stream, StreamId, StreamState, Streams};
use crate::{Batch, Error, Result};

/// Which model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generator,
    Likelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
}

/// Everything a run needs; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dataset: DatasetSpec,
    #[serde(default = "default_base")]
    pub base: BaseDistribution,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub drift: DriftOptions,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    /// Weight of the normalization penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// `0` disables the parameter average.
    #[serde(default)]
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_maps: Option<Vec<LinearFeatureMap>>,
    #[serde(default = "SampleRegion::default_box")]
    pub region: SampleRegion,
    /// Reference-mixture spread; derived from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_sigma: Option<f64>,
    pub model: ModelConfig,
    /// Likelihood sample points per step.
    #[serde(default = "default_points")]
    pub sample_points: usize,
    /// Importance candidates per step.
    #[serde(default = "default_points")]
    pub candidates: usize,
    /// Generated points per energy-distance evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Held-out points set aside from the dataset.
    #[serde(default = "default_eval_samples")]
    pub holdout: usize,
    /// Resolution of the likelihood evaluation grid.
    #[serde(default = "default_grid_res")]
    pub eval_grid_res: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// Frozen generator for the Lagrangian region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_checkpoint: Option<PathBuf>,
}

fn default_base() -> BaseDistribution {
    BaseDistribution::standard_normal(2)
}

fn default_lambda() -> f64 {
    1.0
}

fn default_points() -> usize {
    512
}

fn default_eval_samples() -> usize {
    5000
}

fn default_grid_res() -> usize {
    200
}

/// Fraction of the candidate count below which importance ESS is reported.
pub const ESS_FLOOR: f64 = 0.1;

/// Box of the `‖G‖∞` probe grid.
pub const PROBE_BOX: ([f64; 2], [f64; 2], usize) = ([-3.0, -3.0], [3.0, 3.0], 61);

/// Lowest analytic density included in the grid correlation.
pub const CORRELATION_FLOOR: f64 = 1e-4;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.dataset.validate()?;
        self.base.validate()?;
        if self.base.dim != 2 {
            return cfg_err(format!(
                "datasets are 2D; base dimension is {}",
                self.base.dim
            ));
        }
        self.kernel
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size < 2 {
            return cfg_err(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if self.steps < 1 {
            return cfg_err("steps must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return cfg_err(format!("lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return cfg_err(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return cfg_err(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            ));
        }
        if self.eval_every < 1 {
            return cfg_err("eval_every must be ≥ 1".into());
        }
        if self.checkpoint_every == Some(0) {
            return cfg_err("checkpoint_every must be ≥ 1".into());
        }
        if self.model.hidden_layers < 1 || self.model.width < 1 {
            return cfg_err("model needs at least one hidden layer of positive width".into());
        }
        if let Some(s) = self.ref_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return cfg_err(format!("ref_sigma must be positive, got {s}"));
            }
        }
        match self.mode {
            Mode::Generator => {
                if self.eval_samples > self.holdout {
                    return cfg_err(format!(
                        "eval_samples ({}) exceeds the held-out set ({})",
                        self.eval_samples, self.holdout
                    ));
                }
                if let Some(maps) = &self.feature_maps {
                    if maps.is_empty() {
                        return cfg_err("feature_maps must not be empty when given".into());
                    }
                    for m in maps {
                        m.parts(2).map_err(|e| Error::Config(e.to_string()))?;
                    }
                }
            }
            Mode::Likelihood => {
                if self.kernel.family != KernelFamily::GaussianSquared {
                    return cfg_err("likelihood mode requires the gaussian_squared kernel".into());
                }
                if self.feature_maps.is_some() {
                    return cfg_err("feature_maps apply to generator mode only".into());
                }
                self.region.validate(2)?;
                if self.sample_points < 1 || self.candidates < 2 {
                    return cfg_err(
                        "likelihood mode needs sample_points ≥ 1 and candidates ≥ 2".into(),
                    );
                }
                if self.eval_grid_res < 2 {
                    return cfg_err("eval_grid_res must be ≥ 2".into());
                }
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let out = match self.mode {
            Mode::Generator => 2,
            Mode::Likelihood => 1,
        };
        Mlp::widths_for(
            self.base.dim,
            self.model.hidden_layers,
            self.model.width,
            out,
        )
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 8] = [
    "two-moons-gen",
    "spiral-gen",
    "checkerboard-gen",
    "two-moons-full",
    "spiral-full",
    "checkerboard-full",
    "mixture-likelihood",
    "identity-likelihood",
];

fn generator_preset(
    kind: DatasetKind,
    epsilon: f64,
    batch: usize,
    hidden: usize,
    steps: u64,
) -> TrainConfig {
    TrainConfig {
        mode: Mode::Generator,
        dataset: DatasetSpec::new(kind, 50_000, 0),
        base: default_base(),
        kernel: KernelSpec::gaussian(epsilon).expect("positive epsilon"),
        drift: DriftOptions::default(),
        batch_size: batch,
        lr: 1e-4,
        steps,
        lambda: 1.0,
        ema_decay: 0.999,
        seed: 0,
        eval_every: (steps / 10).max(1),
        feature_maps: None,
        region: SampleRegion::default_box(),
        ref_sigma: None,
        model: ModelConfig {
            hidden_layers: hidden,
            width: 128,
            activation: Activation::Silu,
        },
        sample_points: default_points(),
        candidates: default_points(),
        eval_samples: 5000,
        holdout: 5000,
        eval_grid_res: default_grid_res(),
        checkpoint_every: None,
        generator_checkpoint: None,
    }
}

fn likelihood_preset(components: Vec<MixtureComponent>, steps: u64) -> TrainConfig {
    let mut dataset = DatasetSpec::new(DatasetKind::GaussianMixture, 50_000, 0);
    dataset.mixture = Some(components);
    TrainConfig {
        mode: Mode::Likelihood,
        dataset,
        kernel: KernelSpec::gaussian(0.5).expect("positive epsilon"),
        batch_size: 512,
        steps,
        ema_decay: 0.0,
        eval_every: (steps / 10).max(1),
        model: ModelConfig {
            hidden_layers: 3,
            width: 64,
            activation: Activation::Tanh,
        },
        eval_samples: 0,
        holdout: 0,
        ..generator_preset(DatasetKind::GaussianMixture, 0.5, 512, 3, steps)
    }
}

/// A named configuration.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let cfg = match name {
        "two-moons-gen" => generator_preset(DatasetKind::TwoMoons, 0.5, 1024, 4, 20_000),
        "spiral-gen" => generator_preset(DatasetKind::Spiral, 0.5, 1024, 4, 20_000),
        "checkerboard-gen" => generator_preset(DatasetKind::Checkerboard, 0.2, 1024, 4, 20_000),
        "two-moons-full" => generator_preset(DatasetKind::TwoMoons, 0.5, 4096, 8, 150_000),
        "spiral-full" => generator_preset(DatasetKind::Spiral, 0.5, 4096, 8, 600_000),
        "checkerboard-full" => generator_preset(DatasetKind::Checkerboard, 0.2, 4096, 8, 50_000),
        "mixture-likelihood" => likelihood_preset(crate::data::default_mixture(), 20_000),
        "identity-likelihood" => likelihood_preset(
            vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                std: 1.0,
            }],
            500,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Diagnostic of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub norm_loss: Option<f64>,
    pub min_ess: f64,
}

/// One record of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean loss since the previous record.
    pub loss_avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_sup: Option<f64>,
    /// Smallest kernel or importance ESS seen since the previous record.
    pub min_ess: f64,
    pub wall_time: f64,
}

impl LogRecord {
    /// The record with its wall-clock field cleared.
    pub fn without_time(&self) -> Self {
        LogRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Parse a JSON-lines run log.
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model, optimizer, streams and config of a run at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_version: u32,
    pub mode: Mode,
    #[serde(flatten)]
    pub model: ModelFile,
    pub optimizer: AdamState,
    pub rng: StreamState,
    pub transform: Standardization,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if ck.checkpoint_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.checkpoint_version
            )));
        }
        ck.model.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The network with EMA parameters swapped in when present.
    pub fn inference_model(&self) -> Result<Mlp> {
        let (mut model, ema) = self.model.to_model()?;
        if let Some(ema) = ema {
            model.set_params(&ema)?;
        }
        Ok(model)
    }
}

/// Independent draw pairs averaged by [`energy_baseline`] in run reports.
pub const BASELINE_PAIRS: usize = 8;

/// Mean energy distance between two independent fresh draws of the dataset,
/// each of size `n`, over `pairs` such pairs, in the coordinates of
/// `transform`.
pub fn energy_baseline(
    spec: &DatasetSpec,
    transform: &Standardization,
    n: usize,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::InvalidInput(
            "baseline needs at least one pair".into(),
        ));
    }
    let mut rng = stream(seed, StreamId::Eval);
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = transform.apply(&sample_raw(spec, n, &mut rng)?.view())?;
        let b = transform.apply(&sample_raw(spec, n, &mut rng)?.view())?;
        total += energy_distance(&a.view(), &b.view())?;
    }
    Ok(total / pairs as f64)
}

/// Largest `|G|` on a square probe grid.
pub fn g_sup(g: &Mlp, low: [f64; 2], high: [f64; 2], res: usize) -> Result<f64> {
    let pts = grid_points(low, high, res)?;
    Ok(g.forward(&pts.view())?
        .iter()
        .fold(0.0, |m, v| m.max(v.abs())))
}

fn region_box(region: &SampleRegion) -> ([f64; 2], [f64; 2]) {
    match region {
        SampleRegion::EulerianUniform { low, high } if low.len() == 2 => {
            ([low[0], low[1]], [high[0], high[1]])
        }
        _ => ([-4.0, -4.0], [4.0, 4.0]),
    }
}

/// Whether the configured target is the base distribution itself.
fn target_is_base(cfg: &TrainConfig) -> bool {
    let comps = cfg.dataset.components();
    cfg.dataset.kind == DatasetKind::GaussianMixture
        && !cfg.dataset.standardize
        && comps.len() == 1
        && comps[0].mean.iter().all(|m| *m == 0.0)
        && comps[0].std == cfg.base.scale
        && cfg.base.family == crate::data::BaseFamily::Gaussian
}

/// Output of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub report: Vec<MetricReport>,
}

/// File names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "last_good.json";
pub const RUN_LOG_FILE: &str = "runlog.jsonl";
pub const REPORT_FILE: &str = "metrics.json";

/// Owns one run's model, optimizer and streams.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Mlp,
    adam: AdamState,
    ema: Option<EmaState>,
    streams: Streams,
    step: u64,
    train: Batch,
    holdout: Batch,
    transform: Standardization,
    ref_sigma: f64,
    flowmap: Option<Mlp>,
    log: Vec<LogRecord>,
    window: (f64, u64, f64),
    started: Instant,
}

impl Trainer {
    /// Fresh run; `flowmap` is the frozen generator for a Lagrangian region.
    pub fn new(cfg: TrainConfig, flowmap: Option<Mlp>) -> Result<Self> {
        cfg.validate()?;
        let mut streams = Streams::new(cfg.seed);
        let mut model = Mlp::new(
            &cfg.widths(),
            cfg.model.activation,
            streams.get(StreamId::Init),
        )?;
        if cfg.mode == Mode::Likelihood {
            model.zero_output_layer();
        }
        let adam = AdamState::new(model.num_params());
        let ema = (cfg.ema_decay > 0.0)
            .then(|| EmaState::new(model.params(), cfg.ema_decay))
            .transpose()?;
        Self::assemble(cfg, model, adam, ema, streams, 0, flowmap, None)
    }

    /// Continue from a checkpoint with its persisted streams.
    pub fn resume(ck: &Checkpoint, flowmap: Option<Mlp>) -> Result<Self> {
        let (model, shadow) = ck.model.to_model()?;
        let ema = shadow
            .map(|s| EmaState {
                shadow: s,
                decay: ck.config.ema_decay,
            })
            .or_else(|| {
                (ck.config.ema_decay > 0.0).then(|| EmaState {
                    shadow: model.params().to_vec(),
                    decay: ck.config.ema_decay,
                })
            });
        let streams = Streams::restore(&ck.rng)?;
        Self::assemble(
            ck.config.clone(),
            model,
            ck.optimizer.clone(),
            ema,
            streams,
            ck.model.step,
            flowmap,
            Some(&ck.transform),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        model: Mlp,
        adam: AdamState,
        ema: Option<EmaState>,
        streams: Streams,
        step: u64,
        flowmap: Option<Mlp>,
        transform: Option<&Standardization>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == Mode::Likelihood
            && matches!(cfg.region, SampleRegion::LagrangianGaussian { .. })
        {
            match &flowmap {
                None => {
                    return Err(Error::Config(
                        "lagrangian sample region requires a trained generator checkpoint".into(),
                    ))
                }
                Some(f) if f.input_dim() != cfg.base.dim || f.output_dim() != 2 => {
                    return Err(Error::Config(
                        "generator checkpoint does not map 2D noise to 2D points".into(),
                    ))
                }
                _ => {}
            }
        }
        let split = sample_split(&cfg.dataset, cfg.holdout)?;
        if let Some(t) = transform {
            if *t != split.transform {
                return Err(Error::Checkpoint(
                    "stored data transform does not match the dataset".into(),
                ));
            }
        }
        let ref_sigma = cfg
            .ref_sigma
            .unwrap_or_else(|| ReferenceMixture::default_sigma(&split.train.view()));
        Ok(Trainer {
            cfg,
            model,
            adam,
            ema,
            streams,
            step,
            train: split.train,
            holdout: split.holdout,
            transform: split.transform,
            ref_sigma,
            flowmap,
            log: Vec::new(),
            window: (0.0, 0, f64::INFINITY),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn transform(&self) -> &Standardization {
        &self.transform
    }

    pub fn holdout(&self) -> &Batch {
        &self.holdout
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Parameters used for evaluation: the EMA shadow when enabled.
    pub fn eval_model(&self) -> Result<Mlp> {
        let mut m = self.model.clone();
        if let Some(e) = &self.ema {
            m.set_params(&e.shadow)?;
        }
        Ok(m)
    }

    fn data_batch(&mut self) -> Batch {
        let n = self.train.nrows();
        let b = self.cfg.batch_size;
        let rng = self.streams.get(StreamId::Data);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        self.train.select(Axis(0), &idx)
    }

    /// One optimizer update. On error the model, optimizer and EMA are left
    /// as they were before the call.
    pub fn step(&mut self) -> Result<StepStats> {
        let data = self.data_batch();
        let (loss, norm_loss, grads, min_ess) = match self.cfg.mode {
            Mode::Generator => {
                let noise = self
                    .cfg
                    .base
                    .sample(self.cfg.batch_size, self.streams.get(StreamId::Noise));
                let out: LossOutput = match &self.cfg.feature_maps {
                    Some(maps) => feature_drifting_loss(
                        &self.model,
                        &noise.view(),
                        &data.view(),
                        maps,
                        &self.cfg.drift,
                        &self.cfg.kernel,
                    )?,
                    None => drifting_loss(
                        &self.model,
                        &noise.view(),
                        &data.view(),
                        &self.cfg.drift,
                        &self.cfg.kernel,
                    )?,
                };
                let ess = out.target.min_ess();
                (out.loss, None, out.grads, ess)
            }
            Mode::Likelihood => {
                let points = draw_sample_points(
                    &self.cfg.region,
                    self.flowmap.as_ref(),
                    &self.cfg.base,
                    self.cfg.sample_points,
                    self.streams.get(StreamId::Region),
                )?;
                let reference = ReferenceMixture::new(data.clone(), self.ref_sigma)?;
                let candidates =
                    reference.sample(self.cfg.candidates, self.streams.get(StreamId::Candidates));
                let out = likelihood_objective(
                    &self.model,
                    &points.view(),
                    &data.view(),
                    candidates,
                    &self.cfg.base,
                    &reference,
                    self.cfg.lambda,
                    &self.cfg.kernel,
                )?;
                if out.importance_ess < ESS_FLOOR * self.cfg.candidates as f64 {
                    warn!(
                        "step {}: importance ESS {:.1} below {:.0}% of {} candidates",
                        self.step + 1,
                        out.importance_ess,
                        ESS_FLOOR * 100.0,
                        self.cfg.candidates
                    );
                }
                (
                    out.total,
                    Some(out.norm_loss),
                    out.grads,
                    out.importance_ess,
                )
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at step {}",
                self.step + 1
            )));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam, self.cfg.lr)?;
        if let Some(e) = &mut self.ema {
            e.update(self.model.params())?;
        }
        self.step += 1;
        self.window.0 += loss;
        self.window.1 += 1;
        self.window.2 = self.window.2.min(min_ess);
        Ok(StepStats {
            loss,
            norm_loss,
            min_ess,
        })
    }

    /// Evaluate the current model and append a log record.
    pub fn evaluate(&mut self, last: &StepStats) -> Result<LogRecord> {
        let model = self.eval_model()?;
        let mut rec = LogRecord {
            step: self.step,
            loss: last.loss,
            loss_avg: if self.window.1 > 0 {
                self.window.0 / self.window.1 as f64
            } else {
                last.loss
            },
            norm_loss: last.norm_loss,
            energy_distance: None,
            normalization: None,
            correlation: None,
            g_sup: None,
            min_ess: self.window.2.min(last.min_ess),
            wall_time: 0.0,
        };
        match self.cfg.mode {
            Mode::Generator => {
                let n = self.cfg.eval_samples;
                if n > 0 {
                    let noise = self.cfg.base.sample(n, self.streams.get(StreamId::Eval));
                    let gen = model.forward(&noise.view())?;
                    let held = self.holdout.slice(s![..n, ..]);
                    rec.energy_distance = Some(energy_distance(&gen.view(), &held)?);
                }
            }
            Mode::Likelihood => {
                let (low, high) = region_box(&self.cfg.region);
                let res = self.cfg.eval_grid_res;
                let method = IntegralMethod::Grid { low, high, res };
                let report = normalization_integral(
                    &model,
                    &self.cfg.base,
                    &method,
                    self.streams.get(StreamId::Eval),
                )?;
                rec.normalization = Some(report.estimate);
                if self.cfg.dataset.kind == DatasetKind::GaussianMixture {
                    let comps = self.cfg.dataset.components();
                    let src = DensitySource::Model {
                        g: &model,
                        base: &self.cfg.base,
                    };
                    let reference = DensitySource::Mixture {
                        components: &comps,
                        transform: &self.transform,
                    };
                    let grid = crate::eval::density_grid(&src, Some(&reference), low, high, res)?;
                    rec.correlation = grid.correlation(CORRELATION_FLOOR).ok();
                }
                let (pl, ph, pr) = PROBE_BOX;
                rec.g_sup = Some(g_sup(&model, pl, ph, pr)?);
            }
        }
        rec.wall_time = self.started.elapsed().as_secs_f64();
        self.window = (0.0, 0, f64::INFINITY);
        self.log.push(rec.clone());
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            checkpoint_version: CHECKPOINT_VERSION,
            mode: self.cfg.mode,
            model: ModelFile::from_model(&self.model, self.ema.as_ref(), self.step),
            optimizer: self.adam.clone(),
            rng: self.streams.state(),
            transform: self.transform.clone(),
            config: self.cfg.clone(),
        }
    }

    /// Final pass/fail metrics of the run.
    pub fn final_report(&self) -> Result<Vec<MetricReport>> {
        let seed = self.cfg.seed;
        let mut out = Vec::new();
        let Some(last) = self.log.last() else {
            return Ok(out);
        };
        if let Some(ed) = last.energy_distance {
            let n = self.cfg.eval_samples;
            let b0 = energy_baseline(
                &self.cfg.dataset,
                &self.transform,
                n,
                BASELINE_PAIRS,
                self.cfg.dataset.seed.wrapping_add(1),
            )?;
            out.push(MetricReport::new(
                "energy_distance_baseline",
                b0,
                n,
                seed,
                Threshold::AtLeast { limit: 0.0 },
            ));
            out.push(MetricReport::new(
                "energy_distance",
                ed,
                n,
                seed,
                Threshold::AtMost { limit: 3.0 * b0 },
            ));
        }
        let grid_n = self.cfg.eval_grid_res * self.cfg.eval_grid_res;
        if let Some(z) = last.normalization {
            out.push(MetricReport::new(
                "normalization_integral",
                z,
                grid_n,
                seed,
                Threshold::Within {
                    low: 0.9,
                    high: 1.1,
                },
            ));
        }
        if let Some(c) = last.correlation {
            out.push(MetricReport::new(
                "log_density_correlation",
                c,
                grid_n,
                seed,
                Threshold::AtLeast { limit: 0.95 },
            ));
        }
        if let (Some(g), true) = (last.g_sup, target_is_base(&self.cfg)) {
            let (_, _, r) = PROBE_BOX;
            out.push(MetricReport::new(
                "g_sup",
                g,
                r * r,
                seed,
                Threshold::AtMost { limit: 0.2 },
            ));
        }
        Ok(out)
    }

    /// Run to `cfg.steps`, writing artifacts into `out` when given. A
    /// numerical failure writes the pre-failure state as the last good
    /// checkpoint before returning the error.
    pub fn run(mut self, out: Option<&Path>) -> Result<RunArtifacts> {
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(RUN_LOG_FILE);
                let f = if self.step == 0 {
                    File::create(&p)
                } else {
                    OpenOptions::new().append(true).create(true).open(&p)
                };
                Some(f.map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        while self.step < self.cfg.steps {
            let stats = match self.step() {
                Ok(s) => s,
                Err(e) if e.is_numerical() => {
                    if let Some(dir) = out {
                        let p = dir.join(LAST_GOOD_FILE);
                        self.checkpoint().save(&p)?;
                        return Err(Error::Numerical(format!(
                            "{e}; last good checkpoint at {}",
                            p.display()
                        )));
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
                let rec = self.evaluate(&stats)?;
                info!(
                    "step {} loss {:.4e} ed {:?} norm {:?} corr {:?} ess {:.1}",
                    rec.step,
                    rec.loss_avg,
                    rec.energy_distance,
                    rec.normalization,
                    rec.correlation,
                    rec.min_ess
                );
                if let Some(f) = &mut log_file {
                    let line = serde_json::to_string(&rec)?;
                    let p = out
                        .expect("log file implies a directory")
                        .join(RUN_LOG_FILE);
                    writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
                }
            }
            if let (Some(dir), Some(every)) = (out, self.cfg.checkpoint_every) {
                if self.step.is_multiple_of(every) && self.step < self.cfg.steps {
                    self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        let checkpoint = self.checkpoint();
        let report = self.final_report()?;
        if let Some(dir) = out {
            checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            let p = dir.join(REPORT_FILE);
            std::fs::write(&p, serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(&p, e))?;
        }
        Ok(RunArtifacts {
            checkpoint,
            log: self.log,
            report,
        })
    }
}

/// Train the generator described by `cfg`.
pub fn train_generator(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunArtifacts> {
    if cfg.mode != Mode::Generator {
        return Err(Error::Config(
            "train_generator needs mode = generator".into(),
        ));
    }
    Trainer::new(cfg.clone(), None)?.run(out)
}

/// Train `G`; `flowmap` is required for a Lagrangian region.
pub fn train_likelihood(
    cfg: &TrainConfig,
    flowmap: Option<&Mlp>,
    out: Option<&Path>,
) -> Result<RunArtifacts> {
    if cfg.mode != Mode::Likelihood {
        return Err(Error::Config(
            "train_likelihood needs mode = likelihood".into(),
        ));
    }
    Trainer::new(cfg.clone(), flowmap.cloned())?.run(out)
}

/// Frozen generator named by `cfg.generator_checkpoint`, if any.
pub fn load_flowmap(cfg: &TrainConfig) -> Result<Option<Mlp>> {
    let Some(path) = &cfg.generator_checkpoint else {
        return Ok(None);
    };
    let ck = Checkpoint::load(path)?;
    if ck.mode != Mode::Generator {
        return Err(Error::Config(format!(
            "{} is not a generator checkpoint",
            path.display()
        )));
    }
    Ok(Some(ck.inference_model()?))
}

/// Dispatch on `cfg.mode`.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunArtifacts> {
    match cfg.mode {
        Mode::Generator => train_generator(cfg, out),
        Mode::Likelihood => {
            let flowmap = load_flowmap(cfg)?;
            train_likelihood(cfg, flowmap.as_ref(), out)
        }
    }
}

/// `n` one-step samples from a generator checkpoint.
pub fn sample_generator(ck: &Checkpoint, n: usize, seed: u64) -> Result<Batch> {
    if ck.mode != Mode::Generator {
        return Err(Error::Config(
            "sampling needs a generator checkpoint".into(),
        ));
    }
    let model = ck.inference_model()?;
    if n == 0 {
        return Ok(Array2::zeros((0, model.output_dim())));
    }
    let noise = ck.config.base.sample(n, &mut stream(seed, StreamId::Noise));
    model.forward(&noise.view())
}

/// Bring model-coordinate points back to the dataset's raw coordinates.
pub fn to_raw(ck: &Checkpoint, points: &ArrayView2<'_, f64>) -> Result<Batch> {
    ck.transform.invert(points)
}
