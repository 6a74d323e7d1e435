//! `driftmap`: train, sample, evaluate densities and verify closed forms.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical abort,
//! 4 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use driftmap_core::data::{sample_dataset, write_csv, DatasetKind, DatasetSpec};
use driftmap_core::eval::{
    density_grid, verify_closed_form, ClosedFormCheck, DensitySource, VerifySweep,
};
use driftmap_core::likelihood::{normalization_integral, IntegralMethod, SampleRegion};
use driftmap_core::rng::{stream, StreamId};
use driftmap_core::train::{
    preset, sample_generator, train, Checkpoint, Mode, TrainConfig, PRESETS,
};
use log::info;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "driftmap",
    version,
    about = "One-step generators and likelihoods from drifting flow maps"
)]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator or likelihood model.
    Train(TrainArgs),
    /// Draw one-step samples from a generator checkpoint.
    Sample(SampleArgs),
    /// Evaluate a likelihood checkpoint on a grid.
    Density(DensityArgs),
    /// Compare closed-form velocities and divergences with their oracles.
    Verify(VerifyArgs),
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args, Debug)]
struct ConfigSource {
    /// JSON training config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `driftmap presets`).
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> anyhow::Result<TrainConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => Ok(TrainConfig::load(p)?),
            (None, Some(name)) => Ok(preset(name)?),
            (None, None) => Err(driftmap_core::Error::Config(
                "one of --config or --preset is required".into(),
            )
            .into()),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Run directory for the checkpoint, run log and metrics.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Write raw dataset coordinates instead of model coordinates.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lower grid corner `x,y`; the training box when absent.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    low: Option<Vec<f64>>,
    /// Upper grid corner `x,y`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    high: Option<Vec<f64>>,
    #[arg(long, default_value_t = 200)]
    res: usize,
    /// Add the analytic log-density of a mixture target as `logp_ref`.
    #[arg(long)]
    analytic: bool,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// JSON sweep settings; defaults otherwise.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the divergence tolerance.
    #[arg(long)]
    divergence_tol: Option<f64>,
    /// Restrict to these checks.
    #[arg(long, value_delimiter = ',', value_parser = ["divergence", "velocity", "endpoint"])]
    only: Vec<String>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Write a dataset to CSV.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Dataset kind when no config or preset is given.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    kind: Option<DatasetKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write raw coordinates instead of standardized ones.
    #[arg(long)]
    raw: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<driftmap_core::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.json),
        Command::Sample(a) => cmd_sample(a),
        Command::Density(a) => cmd_density(a, cli.json),
        Command::Verify(a) => cmd_verify(a, cli.json),
        Command::Data {
            command: DataCommand::Export(a),
        } => cmd_export(a),
        Command::Presets => {
            for name in PRESETS {
                println!("{name}");
            }
            Ok(0)
        }
    }
}

fn cmd_train(a: &TrainArgs, json: bool) -> anyhow::Result<u8> {
    let mut cfg = a.source.load()?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
        cfg.eval_every = cfg.eval_every.min(steps);
    }
    cfg.validate()?;
    info!(
        "training {:?} for {} steps into {}",
        cfg.mode,
        cfg.steps,
        a.out.display()
    );
    let run = train(&cfg, Some(&a.out))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&run.report)?);
    } else {
        for r in &run.report {
            println!(
                "{:<28} {:>12.6} {}",
                r.name,
                r.value,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        println!("artifacts in {}", a.out.display());
    }
    Ok(0)
}

fn load_checkpoint(path: &Path, mode: Mode) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.mode != mode {
        return Err(driftmap_core::Error::Config(format!(
            "{} holds a {:?} model; this command needs {:?}",
            path.display(),
            ck.mode,
            mode
        ))
        .into());
    }
    Ok(ck)
}

fn cmd_sample(a: &SampleArgs) -> anyhow::Result<u8> {
    let ck = load_checkpoint(&a.checkpoint, Mode::Generator)?;
    let mut x = sample_generator(&ck, a.n, a.seed)?;
    if a.raw {
        x = ck.transform.invert(&x.view())?;
    }
    write_csv(&a.out, &x.view())?;
    info!("wrote {} samples to {}", a.n, a.out.display());
    Ok(0)
}

fn corner(v: &Option<Vec<f64>>, fallback: [f64; 2]) -> [f64; 2] {
    v.as_ref().map_or(fallback, |v| [v[0], v[1]])
}

fn cmd_density(a: &DensityArgs, json: bool) -> anyhow::Result<u8> {
    let ck = load_checkpoint(&a.checkpoint, Mode::Likelihood)?;
    let g = ck.inference_model()?;
    let cfg = &ck.config;
    let (low, high) = match &cfg.region {
        SampleRegion::EulerianUniform { low, high } => ([low[0], low[1]], [high[0], high[1]]),
        SampleRegion::LagrangianGaussian { .. } => ([-4.0, -4.0], [4.0, 4.0]),
    };
    let (low, high) = (corner(&a.low, low), corner(&a.high, high));
    if a.res < 2 {
        bail!(driftmap_core::Error::Config(format!(
            "--res must be at least 2, got {}",
            a.res
        )));
    }
    let comps = cfg.dataset.components();
    if a.analytic && cfg.dataset.kind != DatasetKind::GaussianMixture {
        bail!(driftmap_core::Error::Config(
            "--analytic needs a checkpoint trained on a gaussian_mixture target".into()
        ));
    }
    let src = DensitySource::Model {
        g: &g,
        base: &cfg.base,
    };
    let reference = DensitySource::Mixture {
        components: &comps,
        transform: &ck.transform,
    };
    let grid = density_grid(&src, a.analytic.then_some(&reference), low, high, a.res)?;
    grid.write_csv(&a.out)?;
    let report = normalization_integral(
        &g,
        &cfg.base,
        &IntegralMethod::Grid {
            low,
            high,
            res: a.res,
        },
        &mut stream(cfg.seed, StreamId::Eval),
    )?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "normalization ({}, n = {}): {:.6}",
            report.method, report.n, report.estimate
        );
        if a.analytic {
            println!("log-density correlation: {:.6}", grid.correlation(1e-4)?);
        }
    }
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs, json: bool) -> anyhow::Result<u8> {
    let mut sweep = match &a.sweep {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<VerifySweep>(&text)
                .map_err(|e| driftmap_core::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => VerifySweep::default(),
    };
    if let Some(seed) = a.seed {
        sweep.seed = seed;
    }
    if let Some(tol) = a.divergence_tol {
        sweep.divergence_tol = tol;
    }
    let checks: Vec<ClosedFormCheck> = if a.only.is_empty() {
        verify_closed_form(&sweep)?
    } else {
        let mut out = Vec::new();
        for op in &a.only {
            match op.as_str() {
                "divergence" => out.extend(driftmap_core::eval::verify_divergences(&sweep)?),
                "velocity" => out.push(driftmap_core::eval::verify_gaussian_velocity(&sweep)?),
                _ => out.push(driftmap_core::eval::verify_endpoint_limit(&sweep)?),
            }
        }
        out
    };
    let text = serde_json::to_string_pretty(&checks)?;
    if let Some(p) = &a.out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        println!("{text}");
    } else {
        for c in &checks {
            println!(
                "{:<22} n={:<4} max {:.3e} mean {:.3e} tol {:.1e} {}",
                c.op,
                c.n_points,
                c.max_rel_err,
                c.mean_rel_err,
                c.tolerance,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(if checks.iter().all(|c| c.pass) {
        0
    } else {
        EXIT_VERIFY
    })
}

fn cmd_export(a: &ExportArgs) -> anyhow::Result<u8> {
    let mut spec = match a.kind {
        Some(kind) => DatasetSpec::new(kind, 5000, 0),
        None => a.source.load()?.dataset,
    };
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = sample_dataset(&spec)?;
    let x = if a.raw {
        data.transform.invert(&data.points.view())?
    } else {
        data.points
    };
    write_csv(&a.out, &x.view())?;
    info!("wrote {} points to {}", spec.n, a.out.display());
    Ok(0)
}
