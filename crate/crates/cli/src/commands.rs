use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use sinkflow::baselines::{average_history_rollout, identity_rollout};
use sinkflow::dataio::{generate_synthetic, split, write_timeline, SyntheticSpec};
use sinkflow::eval::{
    gradcheck, run_experiment, Dataset, EvalReport, ExperimentConfig, GradcheckConfig, GradcheckReport, Method,
};
use sinkflow::model::{self, training_samples, Checkpoint, ModelInput, ModelParams, MARKOV_ORDER};
use sinkflow::{FlowSeries, SinkhornConfig, TransportPlan};

use crate::config::{resolve, CommonArgs, RunConfig, DEFAULT_GRADCHECK_K, DEFAULT_TRIALS};
use crate::error::{CliError, CliResult};
use crate::io::{load_input, read_text, to_json, write_output, Loaded};
use crate::sankey::{default_labels, SankeyDocument};

pub const SERIES_FORMAT: &str = "sinkflow-series";
pub const SYNTH_META_FORMAT: &str = "sinkflow-synth-meta";
pub const LOSS_TRACE_FORMAT: &str = "sinkflow-loss-trace";
pub const EVAL_FORMAT: &str = "sinkflow-eval";
pub const FORECAST_FORMAT: &str = "sinkflow-forecast";
pub const GRADCHECK_FORMAT: &str = "sinkflow-gradcheck";

fn echo_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg.echo()).unwrap_or(serde_json::Value::Null)
}

fn check_k(cfg: &RunConfig, series: &FlowSeries) -> CliResult<()> {
    match cfg.k {
        Some(k) if k != series.k => Err(CliError::usage(format!(
            "--k {k} does not match the input's k = {}",
            series.k
        ))),
        _ => Ok(()),
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Serialize)]
struct SeriesDoc<'a> {
    format: &'static str,
    config: serde_json::Value,
    time_steps: &'a [i64],
    label_values: &'a [i64],
    num_elements: usize,
    series: &'a FlowSeries,
}

pub fn ingest(args: &IngestArgs) -> CliResult<()> {
    let cfg = resolve("ingest", &args.common, RunConfig::default())?;
    let input = cfg.require_input()?;
    if !input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Err(CliError::usage(format!(
            "{}: ingest reads a timeline CSV",
            input.display()
        )));
    }
    let Loaded { timeline, series } = load_input(input, cfg.k)?;
    let tl = timeline.expect("csv input yields a timeline");
    let doc = SeriesDoc {
        format: SERIES_FORMAT,
        config: echo_json(&cfg),
        time_steps: &tl.time_steps,
        label_values: &tl.label_values,
        num_elements: tl.num_elements(),
        series: &series,
    };
    write_output(cfg.output.as_deref(), to_json(&doc)?.as_bytes())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Synthetic spec JSON (k, n, t, kernel, drift, initial, seed).
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of elements for the default spec [default: 1000].
    #[arg(long)]
    pub elements: Option<usize>,
    /// Number of time steps for the default spec [default: 40].
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Sticky kernel: stay with probability 0.8, otherwise move uniformly.
fn default_spec(k: usize, n: usize, t: usize, seed: u64) -> SyntheticSpec {
    let off = if k > 1 { 0.2 / (k - 1) as f64 } else { 0.0 };
    let kernel = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { 1.0 - off * (k - 1) as f64 } else { off })
                .collect()
        })
        .collect();
    SyntheticSpec {
        k,
        n,
        t,
        kernel,
        drift: vec![],
        initial: None,
        seed,
    }
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    format: &'static str,
    config: serde_json::Value,
    spec: &'a SyntheticSpec,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let file_spec = match &args.spec {
        Some(path) => Some(
            SyntheticSpec::from_json(&read_text(path)?)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let extra = RunConfig {
        elements: args.elements,
        steps: args.steps,
        synthetic: file_spec,
        ..RunConfig::default()
    };
    let mut cfg = resolve("synth", &args.common, extra)?;
    let mut spec = match cfg.synthetic.clone() {
        Some(spec) => {
            if args.elements.is_some() || args.steps.is_some() {
                return Err(CliError::usage("--elements/--steps only apply to the default spec"));
            }
            spec
        }
        None => default_spec(
            cfg.k.unwrap_or(4),
            cfg.elements.unwrap_or(1000),
            cfg.steps.unwrap_or(40),
            0,
        ),
    };
    if let Some(k) = cfg.k {
        if k != spec.k {
            return Err(CliError::usage(format!(
                "--k {k} does not match the spec's k = {}",
                spec.k
            )));
        }
    }
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    cfg.synthetic = Some(spec.clone());
    let timeline = generate_synthetic(&spec)?;
    let mut csv = Vec::new();
    write_timeline(&timeline, &mut csv)?;
    write_output(cfg.output.as_deref(), &csv)?;
    if let Some(out) = &cfg.output {
        let meta = SynthMeta {
            format: SYNTH_META_FORMAT,
            config: echo_json(&cfg),
            spec: &spec,
        };
        write_output(Some(&sidecar(out, "meta.json")), to_json(&meta)?.as_bytes())?;
    }
    Ok(())
}

/// `dir/name.ext` → `dir/name.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Loss trace output [default: <output>.loss.json].
    #[arg(long, value_name = "FILE")]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Serialize)]
struct LossTraceDoc<'a> {
    format: &'static str,
    config: serde_json::Value,
    loss_trace: &'a [f64],
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let extra = RunConfig {
        loss_trace: args.loss_trace.clone(),
        ..RunConfig::default()
    };
    let mut cfg = resolve("train", &args.common, extra)?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::usage("train needs --output for the checkpoint"))?;
    let sink = cfg.sinkhorn()?;
    let loss_cfg = cfg.loss()?;
    let Loaded { series, .. } = load_input(cfg.require_input()?, None)?;
    check_k(&cfg, &series)?;
    let range = match cfg.split {
        Some(spec) => split(series.num_plans(), spec)?.train,
        None => 0..series.num_plans(),
    };
    let samples = training_samples(&series, range)?;
    let hidden = cfg
        .hidden_sizes
        .clone()
        .unwrap_or_else(|| ModelParams::default_hidden(series.k));
    let seed = cfg.seed.unwrap_or(0);
    cfg.k = Some(series.k);
    cfg.hidden_sizes = Some(hidden.clone());
    cfg.seed = Some(seed);
    let params = ModelParams::new(series.k, &hidden, seed)?;
    let outcome = model::train(&samples, params, &loss_cfg, &sink)?;

    let ckpt = Checkpoint::new(&outcome.params, loss_cfg, sink, echo_json(&cfg));
    write_output(Some(&output), to_json(&ckpt)?.as_bytes())?;
    let trace_path = cfg.loss_trace.clone().unwrap_or_else(|| sidecar(&output, "loss.json"));
    let trace = LossTraceDoc {
        format: LOSS_TRACE_FORMAT,
        config: echo_json(&cfg),
        loss_trace: &outcome.loss_trace,
    };
    write_output(Some(&trace_path), to_json(&trace)?.as_bytes())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Serialize)]
struct EvalDoc<'a> {
    format: &'static str,
    run_config: serde_json::Value,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = resolve("eval", &args.common, RunConfig::default())?;
    let split_spec = cfg
        .split
        .ok_or_else(|| CliError::usage("eval needs --split TRAIN,VAL,TEST"))?;
    let input = cfg.require_input()?;
    let Loaded { timeline, series } = load_input(input, cfg.k)?;
    check_k(&cfg, &series)?;
    let timeline =
        timeline.ok_or_else(|| CliError::usage(format!("{}: eval reads a timeline CSV", input.display())))?;
    let experiment = ExperimentConfig {
        split: split_spec,
        methods: cfg.methods.clone().unwrap_or_else(|| Method::ALL.to_vec()),
        seeds: cfg.seed_list(),
        horizons: cfg.horizons.clone().unwrap_or_else(|| vec![1, 3, 5]),
        loss_mix_grid: cfg.loss_mix_grid(),
        hidden_sizes: cfg.hidden_sizes.clone(),
        training: cfg.loss()?,
        sinkhorn: cfg.sinkhorn()?,
    };
    if experiment.loss_mix_grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(CliError::usage("loss mixes must lie in [0, 1]"));
    }
    let report = run_experiment(&Dataset { timeline, series }, &experiment)?;
    let doc = EvalDoc {
        format: EVAL_FORMAT,
        run_config: echo_json(&cfg),
        report: &report,
    };
    write_output(cfg.output.as_deref(), to_json(&doc)?.as_bytes())?;
    let failed: Vec<String> = report
        .methods
        .iter()
        .filter_map(|(name, m)| m.error.as_ref().map(|e| format!("{name}: {e}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("methods failed: {}", failed.join("; "))))
    }
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Step to forecast from [default: the last observed step].
    #[arg(long)]
    pub at: Option<usize>,
}

/// A method able to roll forward from a flow series alone.
enum SeriesForecaster {
    Identity,
    Average,
    SinkFlow {
        params: ModelParams,
        sinkhorn: SinkhornConfig,
    },
}

#[derive(Serialize)]
struct ForecastStep {
    step: usize,
    plan: TransportPlan,
    next_marginal: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_converged: Option<bool>,
}

impl SeriesForecaster {
    fn from_config(cfg: &mut RunConfig, k: usize) -> CliResult<Self> {
        let method = match cfg.methods.as_deref() {
            None if cfg.checkpoint.is_some() => Method::Sinkflow,
            None => {
                return Err(CliError::usage(
                    "choose --method identity, avg or sinkflow (with --checkpoint)",
                ))
            }
            Some([m]) => *m,
            Some(_) => return Err(CliError::usage("forecasting takes exactly one --method")),
        };
        cfg.methods = Some(vec![method]);
        match method {
            Method::Identity => Ok(Self::Identity),
            Method::Avg => Ok(Self::Average),
            Method::Lr | Method::Mlp => Err(CliError::usage(format!(
                "{} is fitted per run inside `eval` and cannot forecast from a checkpoint",
                method.name()
            ))),
            Method::Sinkflow => {
                let path = cfg
                    .checkpoint
                    .clone()
                    .ok_or_else(|| CliError::usage("sinkflow needs --checkpoint"))?;
                let ckpt = Checkpoint::from_json(&read_text(&path)?)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                if ckpt.k != k {
                    return Err(CliError::usage(format!(
                        "checkpoint has k = {}, input has k = {k}",
                        ckpt.k
                    )));
                }
                cfg.sinkhorn_iters = cfg.sinkhorn_iters.or(Some(ckpt.sinkhorn.max_iters));
                cfg.sinkhorn_tol = cfg.sinkhorn_tol.or(Some(ckpt.sinkhorn.tol));
                let sinkhorn = SinkhornConfig {
                    mode: ckpt.sinkhorn.mode,
                    ..cfg.sinkhorn()?
                };
                Ok(Self::SinkFlow {
                    params: ckpt.params()?,
                    sinkhorn,
                })
            }
        }
    }

    fn forecast(&self, series: &FlowSeries, t: usize, steps: usize) -> CliResult<Vec<ForecastStep>> {
        if t + 1 < MARKOV_ORDER || t >= series.marginals.len() {
            return Err(CliError::usage(format!(
                "forecasting from step {t} needs steps {}..={t} of history; the input has {} steps",
                MARKOV_ORDER - 1,
                series.marginals.len()
            )));
        }
        let plain = |plans: Vec<TransportPlan>| -> Vec<ForecastStep> {
            plans
                .into_iter()
                .enumerate()
                .map(|(i, plan)| ForecastStep {
                    step: t + i,
                    next_marginal: plan.target_mass(),
                    plan,
                    sinkhorn_residual: None,
                    sinkhorn_converged: None,
                })
                .collect()
        };
        Ok(match self {
            Self::Identity => plain(identity_rollout(&series.marginals[t], steps)),
            Self::Average => plain(average_history_rollout(
                &series.plans[t - 1],
                &series.plans[t - 2],
                series.marginals[t].as_slice(),
                steps,
            )?),
            Self::SinkFlow { params, sinkhorn } => {
                let input = ModelInput::from_series(series, t)?;
                model::rollout(&input, params, steps, sinkhorn)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| ForecastStep {
                        step: t + i,
                        next_marginal: p.next_marginal(),
                        sinkhorn_residual: Some(p.transition.residual()),
                        sinkhorn_converged: Some(p.transition.converged()),
                        plan: p.plan,
                    })
                    .collect()
            }
        })
    }
}

#[derive(Serialize)]
struct ForecastDoc {
    format: &'static str,
    config: serde_json::Value,
    method: Method,
    anchor: usize,
    steps: Vec<ForecastStep>,
}

fn horizon_of(cfg: &RunConfig) -> CliResult<Option<usize>> {
    match cfg.horizons.as_deref() {
        None => Ok(None),
        Some([h]) if *h >= 1 => Ok(Some(*h)),
        Some(_) => Err(CliError::usage("expected a single --horizon of at least 1")),
    }
}

fn forecast_command(name: &str, args: &ForecastArgs, one_step: bool) -> CliResult<()> {
    let extra = RunConfig {
        at: args.at,
        ..RunConfig::default()
    };
    let mut cfg = resolve(name, &args.common, extra)?;
    let Loaded { series, .. } = load_input(cfg.require_input()?, None)?;
    check_k(&cfg, &series)?;
    let steps = match (horizon_of(&cfg)?, one_step) {
        (None | Some(1), true) => 1,
        (Some(_), true) => {
            return Err(CliError::usage(
                "predict forecasts one step; use rollout for longer horizons",
            ))
        }
        (Some(h), false) => h,
        (None, false) => return Err(CliError::usage("rollout needs --horizon")),
    };
    cfg.horizons = Some(vec![steps]);
    let forecaster = SeriesForecaster::from_config(&mut cfg, series.k)?;
    let anchor = cfg.at.unwrap_or(series.marginals.len() - 1);
    cfg.at = Some(anchor);
    let doc = ForecastDoc {
        format: FORECAST_FORMAT,
        method: cfg.methods.as_ref().map_or(Method::Sinkflow, |m| m[0]),
        anchor,
        steps: forecaster.forecast(&series, anchor, steps)?,
        config: echo_json(&cfg),
    };
    write_output(cfg.output.as_deref(), to_json(&doc)?.as_bytes())
}

pub fn predict(args: &ForecastArgs) -> CliResult<()> {
    forecast_command("predict", args, true)
}

pub fn rollout(args: &ForecastArgs) -> CliResult<()> {
    forecast_command("rollout", args, false)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random instances per k [default: 50].
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Serialize)]
struct GradcheckDoc<'a> {
    format: &'static str,
    config: serde_json::Value,
    passed: bool,
    reports: &'a [GradcheckReport],
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> CliResult<()> {
    let extra = RunConfig {
        trials: args.trials,
        ..RunConfig::default()
    };
    let mut cfg = resolve("gradcheck", &args.common, extra)?;
    let trials = cfg.trials.unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    cfg.trials = Some(trials);
    let ks = cfg.k.map_or_else(|| DEFAULT_GRADCHECK_K.to_vec(), |k| vec![k]);
    if ks.iter().any(|&k| k < 2) {
        return Err(CliError::usage("gradcheck needs k >= 2"));
    }
    // The check runs to tight tolerances unless the forward is set explicitly.
    let tight = SinkhornConfig::tight();
    let forward = SinkhornConfig {
        max_iters: cfg.sinkhorn_iters.unwrap_or(tight.max_iters),
        tol: cfg.sinkhorn_tol.unwrap_or(tight.tol),
        ..tight.clone()
    };
    forward.validate().map_err(|e| CliError::usage(e.to_string()))?;
    cfg.sinkhorn_iters = Some(forward.max_iters);
    cfg.sinkhorn_tol = Some(forward.tol);
    let seed = cfg.seed.unwrap_or(0);
    cfg.seed = Some(seed);
    let reports = ks
        .iter()
        .map(|&k| {
            gradcheck(&GradcheckConfig {
                forward: forward.clone(),
                ..GradcheckConfig::new(k, trials, seed)
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(|r| r.passed);
    let doc = GradcheckDoc {
        format: GRADCHECK_FORMAT,
        config: echo_json(&cfg),
        passed,
        reports: &reports,
    };
    write_output(cfg.output.as_deref(), to_json(&doc)?.as_bytes())?;
    if passed {
        Ok(())
    } else {
        let worst: BTreeMap<usize, (f64, f64)> = reports
            .iter()
            .map(|r| (r.config.k, (r.max_fd_rel_error, r.max_unrolled_rel_error)))
            .collect();
        Err(CliError::Runtime(format!(
            "gradient check failed; worst (finite-difference, unrolled) error per k: {worst:?}"
        )))
    }
}

#[derive(Args, Debug)]
pub struct SankeyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Observed steps before the marker [default: 3].
    #[arg(long)]
    pub history: Option<usize>,
    /// Also write a static SVG rendering.
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

pub fn export_sankey(args: &SankeyArgs) -> CliResult<()> {
    let extra = RunConfig {
        history: args.history,
        svg: args.svg.clone(),
        ..RunConfig::default()
    };
    let mut cfg = resolve("export-sankey", &args.common, extra)?;
    let Loaded { timeline, series } = load_input(cfg.require_input()?, None)?;
    check_k(&cfg, &series)?;
    if series.plans.is_empty() {
        return Err(CliError::usage("the input has no transport plans to export"));
    }
    let labels = timeline.map_or_else(
        || default_labels(series.k),
        |tl| tl.label_values.iter().map(|v| format!("faction {v}")).collect(),
    );
    let history = cfg.history.unwrap_or(MARKOV_ORDER);
    cfg.history = Some(history);
    if history == 0 {
        return Err(CliError::usage("--history must be at least 1"));
    }
    let forecasting = cfg.methods.is_some() || cfg.checkpoint.is_some();
    let doc = if forecasting {
        let horizon = horizon_of(&cfg)?.unwrap_or(1);
        cfg.horizons = Some(vec![horizon]);
        let forecaster = SeriesForecaster::from_config(&mut cfg, series.k)?;
        let anchor = history - 1;
        let predicted = forecaster.forecast(&series, anchor, horizon)?;
        let mut plans: Vec<TransportPlan> = series.plans[..anchor].to_vec();
        let last = predicted.last().map(|s| s.next_marginal.clone()).unwrap_or_default();
        plans.extend(predicted.into_iter().map(|s| s.plan));
        SankeyDocument::from_plans(labels, &plans, &last, history, anchor, echo_json(&cfg))
    } else {
        if cfg.horizons.is_some() {
            return Err(CliError::usage(
                "--horizon needs a forecasting --method or --checkpoint",
            ));
        }
        let last = series.marginals[series.plans.len()].as_slice();
        let marker = history.min(series.marginals.len());
        SankeyDocument::from_plans(labels, &series.plans, last, marker, series.plans.len(), echo_json(&cfg))
    }
    .map_err(CliError::Runtime)?;
    write_output(cfg.output.as_deref(), to_json(&doc)?.as_bytes())?;
    if let Some(svg) = &cfg.svg {
        write_output(Some(svg), doc.to_svg().as_bytes())?;
    }
    Ok(())
}
