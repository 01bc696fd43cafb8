//! Metrics, the Sinkhorn gradient-check harness, and the experiment runner
//! that compares all methods on one dataset.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    average_history_rollout, classifier_rollout, element_histories, identity_rollout, ClassifierConfig, HistoryCounts,
    SoftmaxClassifier,
};
use crate::dataio::{split, FactionTimeline, FlowSeries, SplitRanges, SplitSpec, TransportPlan};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{self, LossConfig, ModelInput, ModelParams, MARKOV_ORDER};
use crate::oracle::{finite_difference_gradient, relative_error, unrolled_gradient};
use crate::ot_layer::{sinkhorn_backward, sinkhorn_forward, PotentialMatrix, SinkhornConfig};

/// Frobenius distance between two plans.
pub fn flow_cost(p_true: &TransportPlan, p_hat: &TransportPlan) -> Result<f64> {
    Ok(p_true.flow().sub(p_hat.flow())?.frobenius_norm())
}

/// Root mean squared error between two marginals.
pub fn faction_rmse(x_true: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x_true.len() != x_hat.len() || x_true.is_empty() {
        return Err(Error::dim("faction_rmse", x_true.len(), x_hat.len()));
    }
    let sq: f64 = x_true.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / x_true.len() as f64).sqrt())
}

/// Cumulative cost of multi-step forecasts: for each `(anchor, plans)` pair,
/// the flow costs of the first `h` forecast steps against
/// `truth[anchor..anchor + h]`, summed over all anchors.
pub fn multi_step_cost(forecasts: &[(usize, Vec<TransportPlan>)], truth: &[TransportPlan], h: usize) -> Result<f64> {
    if h == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut total = 0.0;
    for (anchor, plans) in forecasts {
        if anchor + h > truth.len() {
            return Err(Error::Insufficient(format!(
                "horizon {h} from anchor {anchor} exceeds {} ground-truth plans",
                truth.len()
            )));
        }
        if plans.len() < h {
            return Err(Error::Insufficient(format!(
                "forecast has {} steps, horizon is {h}",
                plans.len()
            )));
        }
        for (p_true, p_hat) in truth[*anchor..anchor + h].iter().zip(plans) {
            total += flow_cost(p_true, p_hat)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    /// Forward settings for the path under test.
    pub forward: SinkhornConfig,
    /// Forward settings for the reference runs.
    pub oracle: SinkhornConfig,
    pub fd_step: f64,
    pub fd_threshold: f64,
    pub unrolled_threshold: f64,
    /// Potentials are drawn uniformly from `[-entry_range, entry_range]`.
    pub entry_range: f64,
}

impl GradcheckConfig {
    pub fn new(k: usize, trials: usize, seed: u64) -> Self {
        Self {
            k,
            trials,
            seed,
            forward: SinkhornConfig::tight(),
            oracle: SinkhornConfig::tight(),
            fd_step: 1e-5,
            fd_threshold: 1e-4,
            unrolled_threshold: 1e-5,
            entry_range: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    /// Set when the reference forward run did not converge.
    pub skipped: Option<String>,
    pub fd_rel_error: Option<f64>,
    pub unrolled_rel_error: Option<f64>,
    pub forward_iterations: usize,
    pub backward_iterations: usize,
    pub backward_converged: bool,
}

impl TrialReport {
    /// Richardson iterations per forward sweep.
    pub fn iteration_ratio(&self) -> f64 {
        self.backward_iterations as f64 / self.forward_iterations.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub checked: usize,
    pub skipped: usize,
    pub max_fd_rel_error: f64,
    pub max_unrolled_rel_error: f64,
    pub max_iteration_ratio: f64,
    pub passed: bool,
    pub trials: Vec<TrialReport>,
}

/// Compares the implicit backward pass on one `(M, dL/dS)` instance with
/// the finite-difference and unrolled references.
pub fn gradcheck_instance(m: &Mat, d_s: &Mat, cfg: &GradcheckConfig, trial: usize) -> Result<TrialReport> {
    let potentials = PotentialMatrix::new(m.clone())?;
    let reference = sinkhorn_forward(&potentials, &cfg.oracle)?;
    let forward = sinkhorn_forward(&potentials, &cfg.forward)?;
    let grad = sinkhorn_backward(&forward, d_s, &cfg.forward)?;
    let mut report = TrialReport {
        trial,
        skipped: None,
        fd_rel_error: None,
        unrolled_rel_error: None,
        forward_iterations: forward.iterations_used(),
        backward_iterations: grad.workspace.iterations_used,
        backward_converged: grad.workspace.converged,
    };
    if !reference.converged() {
        report.skipped = Some(format!(
            "reference forward stopped at residual {:e} after {} sweeps",
            reference.residual(),
            reference.iterations_used()
        ));
        return Ok(report);
    }
    let sweeps = reference.iterations_used();
    let unrolled = unrolled_gradient(m, d_s, sweeps.max(100));
    let fd = finite_difference_gradient(m, d_s, 2 * sweeps + 50, cfg.fd_step)?;
    report.fd_rel_error = Some(relative_error(&grad.potential, &fd));
    report.unrolled_rel_error = Some(relative_error(&grad.potential, &unrolled));
    Ok(report)
}

/// Runs `cfg.trials` random instances: potentials uniform in
/// `±entry_range`, upstream gradients uniform in `[-1, 1]`.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.k < 2 {
        return Err(Error::Config(format!("gradcheck needs k >= 2, got {}", cfg.k)));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    cfg.forward.validate()?;
    cfg.oracle.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (cfg.k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let k = cfg.k;
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let m = Mat::from_vec(
            k,
            k,
            (0..k * k)
                .map(|_| rng.gen_range(-cfg.entry_range..=cfg.entry_range))
                .collect(),
        )?;
        let d_s = Mat::from_vec(k, k, (0..k * k).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
        trials.push(gradcheck_instance(&m, &d_s, cfg, trial)?);
    }
    Ok(summarize(cfg.clone(), trials))
}

fn summarize(config: GradcheckConfig, trials: Vec<TrialReport>) -> GradcheckReport {
    let checked: Vec<&TrialReport> = trials.iter().filter(|t| t.skipped.is_none()).collect();
    let max_of = |f: fn(&TrialReport) -> f64| checked.iter().map(|t| f(t)).fold(0.0, f64::max);
    let max_fd = max_of(|t| t.fd_rel_error.unwrap_or(f64::INFINITY));
    let max_unrolled = max_of(|t| t.unrolled_rel_error.unwrap_or(f64::INFINITY));
    let passed = !checked.is_empty() && max_fd <= config.fd_threshold && max_unrolled <= config.unrolled_threshold;
    GradcheckReport {
        checked: checked.len(),
        skipped: trials.len() - checked.len(),
        max_fd_rel_error: max_fd,
        max_unrolled_rel_error: max_unrolled,
        max_iteration_ratio: max_of(TrialReport::iteration_ratio),
        passed,
        config,
        trials,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Identity,
    Avg,
    Lr,
    Mlp,
    Sinkflow,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Identity, Method::Avg, Method::Lr, Method::Mlp, Method::Sinkflow];

    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Avg => "avg",
            Method::Lr => "lr",
            Method::Mlp => "mlp",
            Method::Sinkflow => "sinkflow",
        }
    }

    fn seeded(self) -> bool {
        matches!(self, Method::Mlp | Method::Sinkflow)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method `{s}` (expected identity, avg, lr, mlp, sinkflow)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub split: SplitSpec,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
    /// Candidate values of the loss mix; the best on validation flow cost is kept.
    pub loss_mix_grid: Vec<f64>,
    /// Hidden layer sizes of the Sinkhorn-flow network; `4 k²` when absent.
    #[serde(default)]
    pub hidden_sizes: Option<Vec<usize>>,
    /// Training settings; `loss_mix` is overridden by the grid.
    pub training: LossConfig,
    pub sinkhorn: SinkhornConfig,
}

impl ExperimentConfig {
    pub fn new(split: SplitSpec) -> Self {
        Self {
            split,
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            horizons: vec![1, 3, 5],
            loss_mix_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            hidden_sizes: None,
            training: LossConfig::default(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub flow_cost_mean: f64,
    pub flow_cost_sum: f64,
    /// Mean over test steps of the next-marginal RMSE.
    pub faction_rmse: f64,
    pub per_step: Vec<f64>,
    /// Horizon (as a string key) to cumulative cost over all anchors.
    pub multi_step: BTreeMap<String, f64>,
}

impl Metrics {
    fn mean_of(runs: &[Metrics]) -> Metrics {
        let n = runs.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let steps = runs[0].per_step.len();
        Metrics {
            flow_cost_mean: avg(|m| m.flow_cost_mean),
            flow_cost_sum: avg(|m| m.flow_cost_sum),
            faction_rmse: avg(|m| m.faction_rmse),
            per_step: (0..steps)
                .map(|i| runs.iter().map(|m| m.per_step[i]).sum::<f64>() / n)
                .collect(),
            multi_step: runs[0]
                .multi_step
                .keys()
                .map(|h| (h.clone(), runs.iter().map(|m| m.multi_step[h]).sum::<f64>() / n))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    #[serde(flatten)]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<SeedRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_loss_mix: Option<f64>,
    /// Mean validation flow cost for each candidate loss mix.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub validation: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub split: SplitRanges,
    /// Plan indices evaluated one step ahead.
    pub test_steps: Vec<usize>,
    pub conventions: BTreeMap<String, String>,
    pub methods: BTreeMap<String, MethodReport>,
}

impl<'de> Deserialize<'de> for SplitRanges {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            train: std::ops::Range<usize>,
            val: std::ops::Range<usize>,
            test: std::ops::Range<usize>,
        }
        let r = Raw::deserialize(d)?;
        Ok(SplitRanges {
            train: r.train,
            val: r.val,
            test: r.test,
        })
    }
}

/// Timeline plus its derived marginals and plans.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub timeline: FactionTimeline,
    pub series: FlowSeries,
}

impl Dataset {
    pub fn new(timeline: FactionTimeline) -> Result<Self> {
        let series = crate::dataio::build_marginals_and_plans(&timeline)?;
        Ok(Self { timeline, series })
    }
}

/// A fitted predictor able to forecast from any step with full history.
pub enum Forecaster {
    Identity,
    AverageHistory,
    Classifier(SoftmaxClassifier),
    SinkFlow {
        params: ModelParams,
        sinkhorn: SinkhornConfig,
    },
}

impl Forecaster {
    /// Plans for `t, t+1, ..., t+steps-1`, using ground truth only up to `t`.
    pub fn forecast(&self, data: &Dataset, t: usize, steps: usize) -> Result<Vec<TransportPlan>> {
        let series = &data.series;
        if t + 1 < MARKOV_ORDER || t >= series.plans.len() {
            return Err(Error::Insufficient(format!("cannot forecast from step {t}")));
        }
        match self {
            Forecaster::Identity => Ok(identity_rollout(&series.marginals[t], steps)),
            Forecaster::AverageHistory => average_history_rollout(
                &series.plans[t - 1],
                &series.plans[t - 2],
                series.marginals[t].as_slice(),
                steps,
            ),
            Forecaster::Classifier(clf) => classifier_rollout(&element_histories(&data.timeline, t)?, clf, steps),
            Forecaster::SinkFlow { params, sinkhorn } => {
                let input = ModelInput::from_series(series, t)?;
                Ok(model::rollout(&input, params, steps, sinkhorn)?
                    .into_iter()
                    .map(|p| p.plan)
                    .collect())
            }
        }
    }
}

fn evaluate(f: &Forecaster, data: &Dataset, steps: &[usize], horizons: &[usize]) -> Result<Metrics> {
    let series = &data.series;
    let mut per_step = Vec::with_capacity(steps.len());
    let mut rmse = 0.0;
    let max_h = horizons.iter().copied().max().unwrap_or(1).max(1);
    let end = steps.last().map_or(0, |s| s + 1);
    let mut forecasts = Vec::with_capacity(steps.len());
    for &t in steps {
        let horizon = max_h.min(end - t);
        let plans = f.forecast(data, t, horizon)?;
        per_step.push(flow_cost(&series.plans[t], &plans[0])?);
        rmse += faction_rmse(series.marginals[t + 1].as_slice(), &plans[0].target_mass())?;
        forecasts.push((t, plans));
    }
    // Every horizon shares the anchors that leave room for the longest one.
    let anchored: Vec<(usize, Vec<TransportPlan>)> = forecasts.into_iter().filter(|(t, _)| t + max_h <= end).collect();
    if !horizons.is_empty() && anchored.is_empty() {
        return Err(Error::Insufficient(format!(
            "test split of {} steps is shorter than horizon {max_h}",
            steps.len()
        )));
    }
    let mut multi_step = BTreeMap::new();
    for &h in horizons {
        multi_step.insert(h.to_string(), multi_step_cost(&anchored, &series.plans[..end], h)?);
    }
    let sum: f64 = per_step.iter().sum();
    Ok(Metrics {
        flow_cost_mean: sum / steps.len().max(1) as f64,
        flow_cost_sum: sum,
        faction_rmse: rmse / steps.len().max(1) as f64,
        per_step,
        multi_step,
    })
}

fn mean_one_step_cost(f: &Forecaster, data: &Dataset, steps: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &t in steps {
        let plan = f.forecast(data, t, 1)?;
        total += flow_cost(&data.series.plans[t], &plan[0])?;
    }
    Ok(total / steps.len().max(1) as f64)
}

/// Trains a Sinkhorn-flow model on the training split.
pub fn fit_sinkflow(
    data: &Dataset,
    ranges: &SplitRanges,
    cfg: &ExperimentConfig,
    loss_mix: f64,
    seed: u64,
) -> Result<ModelParams> {
    let k = data.series.k;
    let hidden = cfg
        .hidden_sizes
        .clone()
        .unwrap_or_else(|| ModelParams::default_hidden(k));
    let samples = model::training_samples(&data.series, ranges.train.clone())?;
    let params = ModelParams::new(k, &hidden, seed)?;
    let loss_cfg = LossConfig {
        loss_mix,
        ..cfg.training.clone()
    };
    Ok(model::train(&samples, params, &loss_cfg, &cfg.sinkhorn)?.params)
}

fn run_method(
    method: Method,
    data: &Dataset,
    ranges: &SplitRanges,
    cfg: &ExperimentConfig,
    test: &[usize],
) -> Result<MethodReport> {
    let val: Vec<usize> = ranges.val.clone().collect();
    let mut report = MethodReport::default();
    match method {
        Method::Identity => report.metrics = Some(evaluate(&Forecaster::Identity, data, test, &cfg.horizons)?),
        Method::Avg => report.metrics = Some(evaluate(&Forecaster::AverageHistory, data, test, &cfg.horizons)?),
        Method::Lr => {
            let counts = HistoryCounts::from_timeline(&data.timeline, ranges.train.clone())?;
            let clf = SoftmaxClassifier::fit(&counts, &ClassifierConfig::logistic_regression())?;
            report.metrics = Some(evaluate(&Forecaster::Classifier(clf), data, test, &cfg.horizons)?);
        }
        Method::Mlp => {
            let counts = HistoryCounts::from_timeline(&data.timeline, ranges.train.clone())?;
            for &seed in &cfg.seeds {
                let clf = SoftmaxClassifier::fit(&counts, &ClassifierConfig::mlp(seed))?;
                let metrics = evaluate(&Forecaster::Classifier(clf), data, test, &cfg.horizons)?;
                report.per_seed.push(SeedRun { seed, metrics });
            }
        }
        Method::Sinkflow => {
            let mut best: Option<(f64, f64, Vec<ModelParams>)> = None;
            for &mix in &cfg.loss_mix_grid {
                let models = cfg
                    .seeds
                    .iter()
                    .map(|&seed| fit_sinkflow(data, ranges, cfg, mix, seed))
                    .collect::<Result<Vec<_>>>()?;
                let score = if val.is_empty() {
                    0.0
                } else {
                    let mut total = 0.0;
                    for params in &models {
                        let f = Forecaster::SinkFlow {
                            params: params.clone(),
                            sinkhorn: cfg.sinkhorn.clone(),
                        };
                        total += mean_one_step_cost(&f, data, &val)?;
                    }
                    total / models.len() as f64
                };
                report.validation.insert(mix.to_string(), score);
                if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                    best = Some((score, mix, models));
                }
            }
            let (_, mix, models) = best.ok_or_else(|| Error::Config("loss_mix grid is empty".into()))?;
            report.selected_loss_mix = Some(mix);
            for (params, &seed) in models.into_iter().zip(&cfg.seeds) {
                let f = Forecaster::SinkFlow {
                    params,
                    sinkhorn: cfg.sinkhorn.clone(),
                };
                report.per_seed.push(SeedRun {
                    seed,
                    metrics: evaluate(&f, data, test, &cfg.horizons)?,
                });
            }
        }
    }
    if method.seeded() {
        let runs: Vec<Metrics> = report.per_seed.iter().map(|r| r.metrics.clone()).collect();
        report.metrics = Some(Metrics::mean_of(&runs));
    }
    Ok(report)
}

/// Fits every requested method on the training split and evaluates it on
/// the test split. A failing method is recorded in its report entry.
pub fn run_experiment(data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.sinkhorn.validate()?;
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    if cfg.seeds.is_empty() && cfg.methods.iter().any(|m| m.seeded()) {
        return Err(Error::Config("seeded methods need at least one seed".into()));
    }
    if cfg.horizons.contains(&0) {
        return Err(Error::Config("horizons must be at least 1".into()));
    }
    let ranges = split(data.series.num_plans(), cfg.split)?;
    if ranges.test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    if ranges.val.start < MARKOV_ORDER - 1 && !ranges.val.is_empty() || ranges.test.start < MARKOV_ORDER - 1 {
        return Err(Error::Config(format!(
            "validation and test steps need {} earlier plans of history",
            MARKOV_ORDER - 1
        )));
    }
    let test: Vec<usize> = ranges.test.clone().collect();

    let mut methods = BTreeMap::new();
    for &method in &cfg.methods {
        let report = run_method(method, data, &ranges, cfg, &test).unwrap_or_else(|e| MethodReport {
            error: Some(e.to_string()),
            ..Default::default()
        });
        methods.insert(method.name().to_string(), report);
    }

    let conventions = BTreeMap::from([
        ("flow_cost".to_string(), "Frobenius distance between predicted and true plan; mean and sum over test steps".to_string()),
        ("faction_rmse".to_string(), "RMSE of the predicted next marginal, averaged over test steps".to_string()),
        ("multi_step".to_string(), "cumulative flow cost over horizons 1..h, summed over the test anchors that have ground truth for the longest configured horizon".to_string()),
        ("units".to_string(), "probability mass (counts divided by element count)".to_string()),
    ]);

    Ok(EvalReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        split: ranges,
        test_steps: test,
        conventions,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(rows: &[Vec<f64>]) -> TransportPlan {
        TransportPlan::from_rows(rows).unwrap()
    }

    #[test]
    fn flow_cost_examples() {
        let a = plan(&[vec![0.5, 0.0], vec![0.0, 0.5]]);
        let b = plan(&[vec![0.4, 0.1], vec![0.0, 0.5]]);
        assert_eq!(flow_cost(&a, &a).unwrap(), 0.0);
        assert!((flow_cost(&a, &b).unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((flow_cost(&a, &b).unwrap() - 0.14142).abs() < 1e-5);
        assert!(flow_cost(&a, &plan(&[vec![1.0]])).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(faction_rmse(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((faction_rmse(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let r = faction_rmse(&[0.25; 4], &[0.45, 0.05, 0.25, 0.25]).unwrap();
        assert!((r - (0.08f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.1414).abs() < 1e-4);
        assert!(faction_rmse(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn multi_step_cost_contract() {
        let truth = vec![plan(&[vec![0.5, 0.0], vec![0.0, 0.5]]); 4];
        let perfect: Vec<(usize, Vec<TransportPlan>)> = (0..3).map(|a| (a, truth[a..a + 1].to_vec())).collect();
        assert_eq!(multi_step_cost(&perfect, &truth, 1).unwrap(), 0.0);
        let off = plan(&[vec![0.4, 0.1], vec![0.0, 0.5]]);
        let one = vec![(0, vec![off.clone()]), (2, vec![off.clone()])];
        assert!((multi_step_cost(&one, &truth, 1).unwrap() - 2.0 * 0.02f64.sqrt()).abs() < 1e-15);
        assert!(multi_step_cost(&[(3, vec![off.clone(), off])], &truth, 2).is_err());
        assert!(multi_step_cost(&one, &truth, 0).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_errors() {
        let m = Mat::from_rows(&[vec![0.1, -2.0, 1.0], vec![3.0, 0.0, -1.0], vec![0.5, 0.5, 2.0]]).unwrap();
        let r = gradcheck_instance(&m, &Mat::zeros(3, 3), &GradcheckConfig::new(3, 1, 0), 0).unwrap();
        assert_eq!(r.fd_rel_error, Some(0.0));
        assert_eq!(r.unrolled_rel_error, Some(0.0));
    }

    #[test]
    fn gradcheck_rejects_bad_config() {
        assert!(gradcheck(&GradcheckConfig::new(1, 5, 0)).is_err());
        assert!(gradcheck(&GradcheckConfig::new(3, 0, 0)).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sinkhorn".parse::<Method>().is_err());
    }
}
