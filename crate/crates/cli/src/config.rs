//! Run configuration: command-line flags layered over a JSON config file
//! layered over defaults.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use sinkflow::dataio::{SplitSpec, SyntheticSpec};
use sinkflow::eval::Method;
use sinkflow::model::{LossConfig, MARKOV_ORDER};
use sinkflow::nn::OptimizerConfig;
use sinkflow::SinkhornConfig;

use crate::error::{CliError, CliResult};
use crate::io::read_text;

pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_SINKHORN_TOL: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_GRADCHECK_K: [usize; 4] = [3, 4, 5, 8];

macro_rules! run_config {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        /// Every setting a command may read. In a config file all fields are
        /// optional; outputs echo the effective values.
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $(
                $(#[$meta])*
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl RunConfig {
            /// Fields set in `top` win over fields set in `self`.
            pub fn overlay(self, top: RunConfig) -> RunConfig {
                RunConfig { $( $field: top.$field.or(self.$field), )* }
            }
        }
    };
}

run_config! {
    command: String,
    input: PathBuf,
    output: PathBuf,
    checkpoint: PathBuf,
    loss_trace: PathBuf,
    svg: PathBuf,
    k: usize,
    /// Lag order; only 3 is supported.
    lags: usize,
    seed: u64,
    seeds: Vec<u64>,
    hidden_sizes: Vec<usize>,
    sinkhorn_iters: usize,
    sinkhorn_tol: f64,
    loss_mix: f64,
    loss_mix_grid: Vec<f64>,
    learning_rate: f64,
    epochs: usize,
    optimizer: OptimizerConfig,
    methods: Vec<Method>,
    horizons: Vec<usize>,
    split: SplitSpec,
    trials: usize,
    /// Plan index to forecast from.
    at: usize,
    /// Number of observed steps shown before the marker in a Sankey export.
    history: usize,
    elements: usize,
    steps: usize,
    synthetic: SyntheticSpec,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.trim().parse::<Method>().map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    match parse_list::<usize>(s)?.as_slice() {
        [train_len, val_len, test_len] => Ok(SplitSpec {
            train_len: *train_len,
            val_len: *val_len,
            test_len: *test_len,
        }),
        _ => Err("expected TRAIN,VAL,TEST".into()),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerConfig, String> {
    match s {
        "gd" => Ok(OptimizerConfig::GradientDescent),
        "momentum" => Ok(OptimizerConfig::Momentum { beta: 0.9 }),
        "adam" => Ok(OptimizerConfig::adam()),
        _ => Err(format!("unknown optimizer `{s}` (expected gd, momentum, adam)")),
    }
}

/// Flags accepted by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Timeline CSV or flow-series JSON.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output file; stdout when omitted (except for `train`).
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds for learned methods in `eval`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Forward Sinkhorn iteration cap [default: 100].
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    /// Forward Sinkhorn residual tolerance [default: 1e-6].
    #[arg(long)]
    pub sinkhorn_tol: Option<f64>,
    /// Weight of the marginal term in the training loss, in [0, 1].
    #[arg(long)]
    pub loss_mix: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// gd, momentum or adam.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerConfig>,
    /// Comma-separated hidden layer sizes.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Comma-separated methods: identity, avg, lr, mlp, sinkflow.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub method: Option<Vec<Method>>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    pub horizon: Option<Vec<usize>>,
    /// Chronological split as TRAIN,VAL,TEST plan counts.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<SplitSpec>,
    /// Model checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Dump the effective configuration to stderr before running.
    #[arg(long)]
    pub dump_plan: bool,
}

impl CommonArgs {
    fn as_config(&self) -> RunConfig {
        RunConfig {
            input: self.input.clone(),
            output: self.output.clone(),
            checkpoint: self.checkpoint.clone(),
            k: self.k,
            seed: self.seed,
            seeds: self.seeds.clone(),
            hidden_sizes: self.hidden.clone(),
            sinkhorn_iters: self.sinkhorn_iters,
            sinkhorn_tol: self.sinkhorn_tol,
            loss_mix: self.loss_mix,
            learning_rate: self.lr,
            epochs: self.epochs,
            optimizer: self.optimizer.clone(),
            methods: self.method.clone(),
            horizons: self.horizon.clone(),
            split: self.split,
            ..RunConfig::default()
        }
    }
}

/// Reads the config file (if any) and layers `extra` and then the common
/// flags on top of it.
pub fn resolve(command: &str, common: &CommonArgs, extra: RunConfig) -> CliResult<RunConfig> {
    let file = match &common.config {
        Some(path) => serde_json::from_str::<RunConfig>(&read_text(path)?)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    let mut cfg = file.overlay(extra).overlay(common.as_config());
    if cfg.lags.is_some_and(|l| l != MARKOV_ORDER) {
        return Err(CliError::usage(format!("only lags = {MARKOV_ORDER} is supported")));
    }
    cfg.lags = Some(MARKOV_ORDER);
    cfg.command = Some(command.to_string());
    if common.dump_plan {
        eprintln!("{}", serde_json::to_string_pretty(&cfg).unwrap_or_default());
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn require_input(&self) -> CliResult<&PathBuf> {
        self.input
            .as_ref()
            .ok_or_else(|| CliError::usage("--input is required"))
    }

    pub fn sinkhorn(&self) -> CliResult<SinkhornConfig> {
        let cfg = SinkhornConfig {
            max_iters: self.sinkhorn_iters.unwrap_or(DEFAULT_SINKHORN_ITERS),
            tol: self.sinkhorn_tol.unwrap_or(DEFAULT_SINKHORN_TOL),
            ..SinkhornConfig::default()
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn loss(&self) -> CliResult<LossConfig> {
        let d = LossConfig::default();
        let cfg = LossConfig {
            loss_mix: self.loss_mix.unwrap_or(d.loss_mix),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            optimizer: self.optimizer.clone().unwrap_or(d.optimizer),
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Candidate loss mixes for `eval`: an explicit `--loss-mix` pins a
    /// single value.
    pub fn loss_mix_grid(&self) -> Vec<f64> {
        match (self.loss_mix, &self.loss_mix_grid) {
            (Some(m), _) => vec![m],
            (None, Some(g)) => g.clone(),
            (None, None) => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds
            .clone()
            .or_else(|| self.seed.map(|s| vec![s]))
            .unwrap_or_else(|| vec![0])
    }

    /// The echoed configuration: output locations are left out so that the
    /// same run written to different paths produces identical bytes.
    pub fn echo(&self) -> RunConfig {
        RunConfig {
            output: None,
            loss_trace: None,
            svg: None,
            ..self.clone()
        }
    }
}
