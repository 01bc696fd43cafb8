//! Time-lagged transport-map predictor.
//!
//! A feed-forward network maps the lag window
//! `[x_t : b_t : x_{t-1} : b_{t-1} : x_{t-2}]` to a `k x k` potential
//! matrix; the Sinkhorn layer turns it into a doubly stochastic transition
//! matrix, and pre-multiplying by `diag(x_t)` yields a plan whose rows sum to
//! the current marginal. Training minimizes, summed over samples,
//!
//! ```text
//! (1 - λ) |P_t - P̂_t|_F² + λ |x_{t+1} - P̂_tᵀ 1|²
//! ```
//!
//! with gradients flowing through the implicit Sinkhorn backward pass.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataio::{FlowSeries, MarginalDistribution, TransportPlan, SIMPLEX_TOL};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{Dense, Mlp, Optimizer, OptimizerConfig};
use crate::ot_layer::{sinkhorn_backward, sinkhorn_forward, DoublyStochasticMatrix, PotentialMatrix, SinkhornConfig};

/// Number of past marginals fed to the network.
pub const MARKOV_ORDER: usize = 3;

/// Lag window for one prediction. Missing history at the start of a series
/// is zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    k: usize,
    /// `x_t, x_{t-1}, x_{t-2}`.
    marginals: [Vec<f64>; MARKOV_ORDER],
    /// Flattened `b_t = P_{t-1}` and `b_{t-1} = P_{t-2}`.
    flows: [Vec<f64>; MARKOV_ORDER - 1],
}

fn check_marginal(x: &[f64], k: usize, allow_padding: bool) -> Result<()> {
    if x.len() != k {
        return Err(Error::dim("ModelInput marginal", k, x.len()));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "marginal entries must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = x.iter().sum();
    let padding = allow_padding && total == 0.0;
    if !padding && (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidInput(format!("marginal sums to {total}, expected 1")));
    }
    Ok(())
}

impl ModelInput {
    pub fn new(k: usize, marginals: [Vec<f64>; 3], flows: [Vec<f64>; 2]) -> Result<Self> {
        check_marginal(&marginals[0], k, false)?;
        for x in &marginals[1..] {
            check_marginal(x, k, true)?;
        }
        for b in &flows {
            if b.len() != k * k {
                return Err(Error::dim("ModelInput flow", k * k, b.len()));
            }
            if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(
                    "flow features must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(Self { k, marginals, flows })
    }

    /// Lag window for predicting the plan out of step `t`.
    pub fn from_series(series: &FlowSeries, t: usize) -> Result<Self> {
        let k = series.k;
        let x = |s: Option<usize>| -> Vec<f64> {
            s.and_then(|s| series.marginals.get(s))
                .map_or_else(|| vec![0.0; k], |m| m.as_slice().to_vec())
        };
        let b = |s: Option<usize>| -> Vec<f64> {
            s.and_then(|s| series.plans.get(s))
                .map_or_else(|| vec![0.0; k * k], |p| p.flow().as_slice().to_vec())
        };
        if t >= series.marginals.len() {
            return Err(Error::Insufficient(format!(
                "no marginal at step {t}; series has {} steps",
                series.marginals.len()
            )));
        }
        Self::new(
            k,
            [x(Some(t)), x(t.checked_sub(1)), x(t.checked_sub(2))],
            [b(t.checked_sub(1)), b(t.checked_sub(2))],
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_len(k: usize) -> usize {
        MARKOV_ORDER * k + (MARKOV_ORDER - 1) * k * k
    }

    /// `x_t`.
    pub fn current(&self) -> &[f64] {
        &self.marginals[0]
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(Self::feature_len(self.k));
        f.extend_from_slice(&self.marginals[0]);
        f.extend_from_slice(&self.flows[0]);
        f.extend_from_slice(&self.marginals[1]);
        f.extend_from_slice(&self.flows[1]);
        f.extend_from_slice(&self.marginals[2]);
        f
    }

    /// Shifts the window one step forward using `plan` as the newest flow
    /// and its normalized column sums as the newest marginal.
    pub fn advance(&self, plan: &TransportPlan) -> Result<Self> {
        if plan.k() != self.k {
            return Err(Error::dim("ModelInput::advance", self.k, plan.k()));
        }
        let [x0, x1, _] = &self.marginals;
        let [b0, _] = &self.flows;
        // Predicted plans carry the Sinkhorn residual, so the fed-back
        // marginal is rescaled onto the simplex.
        let total = plan.total();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::InvalidInput("cannot advance on a plan with no mass".into()));
        }
        let next: Vec<f64> = plan.target_mass().into_iter().map(|v| v / total).collect();
        Self::new(
            self.k,
            [next, x0.clone(), x1.clone()],
            [plan.flow().as_slice().to_vec(), b0.clone()],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    k: usize,
    seed: u64,
    net: Mlp,
}

impl ModelParams {
    /// Default architecture: one tanh hidden layer of width `4 k²`.
    pub fn default_hidden(k: usize) -> Vec<usize> {
        vec![4 * k * k]
    }

    pub fn new(k: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 factions, got {k}")));
        }
        if hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let net = Mlp::new(ModelInput::feature_len(k), hidden_sizes, k * k, seed);
        Ok(Self { k, seed, net })
    }

    pub fn from_network(k: usize, seed: u64, net: Mlp) -> Result<Self> {
        if net.inputs() != ModelInput::feature_len(k) || net.outputs() != k * k {
            return Err(Error::Config(format!(
                "network shape {}->{} does not fit k = {k}",
                net.inputs(),
                net.outputs()
            )));
        }
        Ok(Self { k, seed, net })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.net.hidden_sizes()
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.net.params()
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_params(params)
    }

    /// Network output reshaped to the potential matrix.
    pub fn potentials(&self, input: &ModelInput) -> Result<PotentialMatrix> {
        self.check_k(input)?;
        PotentialMatrix::new(Mat::from_vec(self.k, self.k, self.net.forward(&input.features()))?)
    }

    fn check_k(&self, input: &ModelInput) -> Result<()> {
        if input.k() != self.k {
            return Err(Error::Config(format!(
                "model expects k = {}, input has k = {}",
                self.k,
                input.k()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the marginal term; `1 - loss_mix` weights the plan term.
    pub loss_mix: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss_mix: 0.5,
            learning_rate: 0.01,
            epochs: 200,
            optimizer: OptimizerConfig::GradientDescent,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::Config(format!(
                "loss_mix must be in [0, 1], got {}",
                self.loss_mix
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub plan: TransportPlan,
    pub transition: DoublyStochasticMatrix,
}

impl Prediction {
    /// `P̂ᵀ 1`.
    pub fn next_marginal(&self) -> Vec<f64> {
        self.plan.target_mass()
    }
}

/// `diag(x) S`.
pub fn plan_from_transition(x: &[f64], s: &Mat) -> Result<TransportPlan> {
    if x.len() != s.rows() {
        return Err(Error::dim("plan_from_transition", s.rows(), x.len()));
    }
    let mut p = s.clone();
    for (i, &xi) in x.iter().enumerate() {
        p.row_mut(i).iter_mut().for_each(|v| *v *= xi);
    }
    TransportPlan::new(p)
}

pub fn predict_plan(input: &ModelInput, params: &ModelParams, cfg: &SinkhornConfig) -> Result<Prediction> {
    let m = params.potentials(input)?;
    let transition = sinkhorn_forward(&m, cfg)?;
    let plan = plan_from_transition(input.current(), transition.entries())?;
    Ok(Prediction { plan, transition })
}

fn check_loss_shapes(p_true: &TransportPlan, p_hat: &TransportPlan, x_next: &[f64]) -> Result<()> {
    p_true.flow().check_same_shape(p_hat.flow(), "loss")?;
    if x_next.len() != p_hat.k() {
        return Err(Error::dim("loss next marginal", p_hat.k(), x_next.len()));
    }
    Ok(())
}

/// `(1 - λ) |P_true - P̂|_F² + λ |x_next - P̂ᵀ 1|²`.
pub fn loss(
    p_true: &TransportPlan,
    p_hat: &TransportPlan,
    x_next: &MarginalDistribution,
    loss_mix: f64,
) -> Result<f64> {
    check_loss_shapes(p_true, p_hat, x_next.as_slice())?;
    let plan_term: f64 = p_true.flow().sub(p_hat.flow())?.as_slice().iter().map(|v| v * v).sum();
    let marginal_term: f64 = x_next
        .as_slice()
        .iter()
        .zip(p_hat.target_mass())
        .map(|(x, c)| (x - c) * (x - c))
        .sum();
    Ok((1.0 - loss_mix) * plan_term + loss_mix * marginal_term)
}

/// `dL/dP̂` for [`loss`].
fn loss_grad_wrt_plan(p_true: &TransportPlan, p_hat: &TransportPlan, x_next: &[f64], loss_mix: f64) -> Mat {
    let k = p_hat.k();
    let cols = p_hat.target_mass();
    let mut g = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            g[(i, j)] = 2.0 * (1.0 - loss_mix) * (p_hat.flow()[(i, j)] - p_true.flow()[(i, j)])
                + 2.0 * loss_mix * (cols[j] - x_next[j]);
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: ModelInput,
    pub target: TransportPlan,
    pub next_marginal: MarginalDistribution,
}

/// Supervised samples for plan indices in `range` that have a full lag
/// window (index ≥ 2).
pub fn training_samples(series: &FlowSeries, range: Range<usize>) -> Result<Vec<TrainingSample>> {
    if range.end > series.plans.len() {
        return Err(Error::Insufficient(format!(
            "range ends at {} but the series has {} plans",
            range.end,
            series.plans.len()
        )));
    }
    range
        .filter(|&t| t + 1 >= MARKOV_ORDER)
        .map(|t| {
            Ok(TrainingSample {
                input: ModelInput::from_series(series, t)?,
                target: series.plans[t].clone(),
                next_marginal: series.marginals[t + 1].clone(),
            })
        })
        .collect()
}

/// Loss of one sample; adds its parameter gradient into `grad`.
pub fn sample_loss_and_grad(
    sample: &TrainingSample,
    params: &ModelParams,
    loss_mix: f64,
    cfg: &SinkhornConfig,
    grad: &mut [f64],
) -> Result<f64> {
    params.check_k(&sample.input)?;
    let k = params.k;
    let trace = params.net.forward_traced(&sample.input.features());
    let m = PotentialMatrix::new(Mat::from_vec(k, k, params.net.output(&trace).to_vec())?)?;
    let transition = sinkhorn_forward(&m, cfg)?;
    let x = sample.input.current();
    let p_hat = plan_from_transition(x, transition.entries())?;
    let x_next = sample.next_marginal.as_slice();
    check_loss_shapes(&sample.target, &p_hat, x_next)?;

    let value = loss(&sample.target, &p_hat, &sample.next_marginal, loss_mix)?;
    let d_plan = loss_grad_wrt_plan(&sample.target, &p_hat, x_next, loss_mix);
    let mut d_s = d_plan;
    for (i, &xi) in x.iter().enumerate() {
        d_s.row_mut(i).iter_mut().for_each(|v| *v *= xi);
    }
    let d_m = sinkhorn_backward(&transition, &d_s, cfg)?;
    params.net.backward(&trace, d_m.potential.as_slice(), grad);
    Ok(value)
}

/// Summed loss over `samples` and its full-batch gradient.
pub fn batch_loss_and_grad(
    samples: &[TrainingSample],
    params: &ModelParams,
    loss_mix: f64,
    cfg: &SinkhornConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.num_params()];
    let mut total = 0.0;
    for s in samples {
        total += sample_loss_and_grad(s, params, loss_mix, cfg, &mut grad)?;
    }
    Ok((total, grad))
}

/// Total loss over `samples` without gradients.
pub fn batch_loss(
    samples: &[TrainingSample],
    params: &ModelParams,
    loss_mix: f64,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    samples.iter().try_fold(0.0, |acc, s| {
        let p = predict_plan(&s.input, params, cfg)?;
        Ok(acc + loss(&s.target, &p.plan, &s.next_marginal, loss_mix)?)
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Full-batch loss at the start of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Full-batch training for `loss_cfg.epochs` epochs.
pub fn train(
    dataset: &[TrainingSample],
    params: ModelParams,
    loss_cfg: &LossConfig,
    sink_cfg: &SinkhornConfig,
) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    sink_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Insufficient("training dataset is empty".into()));
    }
    if let Some(bad) = dataset
        .iter()
        .position(|s| s.input.k() != params.k || s.target.k() != params.k)
    {
        return Err(Error::Config(format!(
            "sample {bad} does not match model k = {}",
            params.k
        )));
    }

    let mut params = params;
    let mut optimizer = Optimizer::new(loss_cfg.optimizer.clone(), loss_cfg.learning_rate, params.num_params());
    let mut flat = params.flat();
    let mut trace = Vec::with_capacity(loss_cfg.epochs);
    for epoch in 0..loss_cfg.epochs {
        let mut grad = vec![0.0; flat.len()];
        let mut total = 0.0;
        for (idx, sample) in dataset.iter().enumerate() {
            let value =
                sample_loss_and_grad(sample, &params, loss_cfg.loss_mix, sink_cfg, &mut grad).map_err(|e| match e {
                    Error::InvalidInput(_) => Error::NonFiniteLoss { epoch, sample: idx },
                    other => other,
                })?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, sample: idx });
            }
            total += value;
        }
        trace.push(total);
        optimizer.step(&mut flat, &grad);
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteParams { epoch });
        }
        params.set_flat(&flat)?;
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Multi-step forecast: each step feeds the previous prediction back in as
/// the newest marginal and flow.
pub fn rollout(
    history: &ModelInput,
    params: &ModelParams,
    steps: usize,
    cfg: &SinkhornConfig,
) -> Result<Vec<Prediction>> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(steps);
    let mut window = history.clone();
    for step in 0..steps {
        let pred = predict_plan(&window, params, cfg)?;
        if step + 1 < steps {
            window = window.advance(&pred.plan)?;
        }
        out.push(pred);
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "sinkflow-checkpoint";

/// On-disk model: network shape and weights plus the configs that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
    pub layers: Vec<Dense>,
    pub loss_cfg: LossConfig,
    pub sinkhorn: SinkhornConfig,
    /// Effective run configuration, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        loss_cfg: LossConfig,
        sinkhorn: SinkhornConfig,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            k: params.k,
            hidden_sizes: params.hidden_sizes(),
            seed: params.seed,
            layers: params.net.layers().to_vec(),
            loss_cfg,
            sinkhorn,
            config,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.params()?;
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let net = Mlp::from_layers(self.layers.clone())?;
        if net.hidden_sizes() != self.hidden_sizes {
            return Err(Error::InvalidInput(
                "checkpoint hidden_sizes disagree with layers".into(),
            ));
        }
        self.loss_cfg.validate()?;
        self.sinkhorn.validate()?;
        ModelParams::from_network(self.k, self.seed, net)
    }
}
