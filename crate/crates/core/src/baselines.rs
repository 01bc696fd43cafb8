//! Comparison predictors: Identity, Average history, and per-element
//! logistic regression / MLP classifiers aggregated into a plan.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataio::{FactionTimeline, MarginalDistribution, TransportPlan};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::MARKOV_ORDER;
use crate::nn::{Mlp, Optimizer, OptimizerConfig};

/// All mass stays where it is: `diag(x_t)`.
pub fn identity_predict(x: &MarginalDistribution) -> TransportPlan {
    TransportPlan::new(Mat::diag(x.as_slice())).expect("marginal entries are nonnegative")
}

/// Mean of the two previous plans with rows rescaled to `x`. Rows of the
/// mean that carry no mass put `x_i` on the diagonal.
pub fn average_history_predict(prev: &TransportPlan, prev2: &TransportPlan, x: &[f64]) -> Result<TransportPlan> {
    prev.flow().check_same_shape(prev2.flow(), "average_history_predict")?;
    let k = prev.k();
    if x.len() != k {
        return Err(Error::dim("average_history_predict", k, x.len()));
    }
    let mut avg = prev.flow().add(prev2.flow())?.scale(0.5);
    for (i, &xi) in x.iter().enumerate() {
        let row = avg.row_mut(i);
        let total: f64 = row.iter().sum();
        if xi == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else if total > 0.0 {
            row.iter_mut().for_each(|v| *v *= xi / total);
        } else {
            row[i] = xi;
        }
    }
    TransportPlan::new(avg)
}

/// Labels of one element at `t, t-1, t-2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElementHistory {
    pub element: usize,
    pub labels: [usize; MARKOV_ORDER],
}

/// Histories of every element at step `t` (requires `t >= 2`).
pub fn element_histories(tl: &FactionTimeline, t: usize) -> Result<Vec<ElementHistory>> {
    if t + 1 < MARKOV_ORDER || t >= tl.num_steps() {
        return Err(Error::Insufficient(format!(
            "element histories need steps {}..={t} within 0..{}",
            (t + 1).saturating_sub(MARKOV_ORDER),
            tl.num_steps()
        )));
    }
    Ok((0..tl.num_elements())
        .map(|e| ElementHistory {
            element: e,
            labels: [tl.labels[t][e], tl.labels[t - 1][e], tl.labels[t - 2][e]],
        })
        .collect())
}

/// Next-label counts for each distinct label history; the sufficient
/// statistic for fitting per-element classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryCounts {
    pub k: usize,
    pub patterns: BTreeMap<[usize; MARKOV_ORDER], Vec<u64>>,
}

impl HistoryCounts {
    /// Collects `(labels[t], labels[t-1], labels[t-2]) -> labels[t+1]` for
    /// plan indices `t` in `range` with a full history.
    pub fn from_timeline(tl: &FactionTimeline, range: Range<usize>) -> Result<Self> {
        if range.end + 1 > tl.num_steps() {
            return Err(Error::Insufficient(format!(
                "range ends at plan {} but the timeline has {} steps",
                range.end,
                tl.num_steps()
            )));
        }
        let mut patterns: BTreeMap<[usize; MARKOV_ORDER], Vec<u64>> = BTreeMap::new();
        for t in range.filter(|&t| t + 1 >= MARKOV_ORDER) {
            for e in 0..tl.num_elements() {
                let key = [tl.labels[t][e], tl.labels[t - 1][e], tl.labels[t - 2][e]];
                patterns.entry(key).or_insert_with(|| vec![0; tl.k])[tl.labels[t + 1][e]] += 1;
            }
        }
        if patterns.is_empty() {
            return Err(Error::Insufficient("no element histories in training range".into()));
        }
        Ok(Self { k: tl.k, patterns })
    }

    pub fn total(&self) -> u64 {
        self.patterns.values().flatten().sum()
    }
}

/// One-hot (or soft) encoding of the lag labels, concatenated.
fn encode(lags: &[Vec<f64>; MARKOV_ORDER]) -> Vec<f64> {
    lags.iter().flatten().copied().collect()
}

fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - peak).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Predicts a next-faction distribution for one element from the
/// distributions of its last three labels.
pub trait ElementClassifier {
    fn k(&self) -> usize;
    fn predict_proba(&self, lags: &[Vec<f64>; MARKOV_ORDER]) -> Vec<f64>;
}

/// Softmax classifier over the encoded history, fit by maximizing the
/// multinomial log-likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    k: usize,
    net: Mlp,
}

impl ElementClassifier for SoftmaxClassifier {
    fn k(&self) -> usize {
        self.k
    }

    fn predict_proba(&self, lags: &[Vec<f64>; MARKOV_ORDER]) -> Vec<f64> {
        softmax(&self.net.forward(&encode(lags)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Empty for logistic regression.
    pub hidden: Vec<usize>,
    pub max_steps: usize,
    /// Stop once the gradient norm of the mean log-likelihood is below this.
    pub grad_tol: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn logistic_regression() -> Self {
        Self {
            hidden: vec![],
            max_steps: 10_000,
            grad_tol: 1e-6,
            learning_rate: 0.5,
            optimizer: OptimizerConfig::GradientDescent,
            seed: 0,
        }
    }

    pub fn mlp(seed: u64) -> Self {
        Self {
            hidden: vec![16],
            max_steps: 3_000,
            grad_tol: 1e-6,
            learning_rate: 0.01,
            optimizer: OptimizerConfig::adam(),
            seed,
        }
    }
}

impl SoftmaxClassifier {
    pub fn fit(data: &HistoryCounts, cfg: &ClassifierConfig) -> Result<Self> {
        let k = data.k;
        let mut net = Mlp::new(MARKOV_ORDER * k, &cfg.hidden, k, cfg.seed);
        if cfg.hidden.is_empty() {
            // Logistic regression starts from the uniform predictor.
            net.set_params(&vec![0.0; net.num_params()])?;
        }
        let total = data.total() as f64;
        let encoded: Vec<(Vec<f64>, &Vec<u64>)> = data
            .patterns
            .iter()
            .map(|(key, counts)| (encode(&key.map(|l| one_hot(l, k))), counts))
            .collect();

        let mut params = net.params();
        let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate, params.len());
        for _ in 0..cfg.max_steps {
            let mut grad = vec![0.0; params.len()];
            for (x, counts) in &encoded {
                let trace = net.forward_traced(x);
                let q = softmax(net.output(&trace));
                let n: u64 = counts.iter().sum();
                let d: Vec<f64> = q
                    .iter()
                    .zip(*counts)
                    .map(|(q, &c)| (n as f64 * q - c as f64) / total)
                    .collect();
                net.backward(&trace, &d, &mut grad);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm <= cfg.grad_tol {
                break;
            }
            opt.step(&mut params, &grad);
            net.set_params(&params)?;
        }
        if !net.all_finite() {
            return Err(Error::InvalidInput("classifier training diverged".into()));
        }
        Ok(Self { k, net })
    }

    /// Mean negative log-likelihood on `data`.
    pub fn mean_nll(&self, data: &HistoryCounts) -> f64 {
        let total = data.total() as f64;
        data.patterns
            .iter()
            .map(|(key, counts)| {
                let q = self.predict_proba(&key.map(|l| one_hot(l, self.k)));
                counts.iter().zip(&q).map(|(&c, q)| -(c as f64) * q.ln()).sum::<f64>()
            })
            .sum::<f64>()
            / total
    }
}

/// Aggregates per-element predictions: an element currently in faction `i`
/// with predicted distribution `p` adds `p_j / N` to entry `(i, j)`.
pub fn classifier_predict(histories: &[ElementHistory], clf: &dyn ElementClassifier) -> Result<TransportPlan> {
    let k = clf.k();
    if histories.is_empty() {
        return Err(Error::InvalidInput("no element histories".into()));
    }
    let n = histories.len() as f64;
    let mut plan = Mat::zeros(k, k);
    for h in histories {
        if let Some(bad) = h.labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!(
                "element {} has label {bad}, unseen by a classifier with k = {k}",
                h.element
            )));
        }
        let p = clf.predict_proba(&h.labels.map(|l| one_hot(l, k)));
        for (dst, pj) in plan.row_mut(h.labels[0]).iter_mut().zip(&p) {
            *dst += pj / n;
        }
    }
    TransportPlan::new(plan)
}

pub fn lr_predict(histories: &[ElementHistory], clf: &SoftmaxClassifier) -> Result<TransportPlan> {
    classifier_predict(histories, clf)
}

pub fn mlp_predict(histories: &[ElementHistory], clf: &SoftmaxClassifier) -> Result<TransportPlan> {
    classifier_predict(histories, clf)
}

/// Multi-step classifier forecast. The mass of elements sharing each label
/// history is propagated exactly through the classifier, so later steps
/// keep the correlation between an element's current and next label.
pub fn classifier_rollout(
    histories: &[ElementHistory],
    clf: &dyn ElementClassifier,
    steps: usize,
) -> Result<Vec<TransportPlan>> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let k = clf.k();
    let mut plans = vec![classifier_predict(histories, clf)?];
    let n = histories.len() as f64;
    let mut mass: BTreeMap<[usize; MARKOV_ORDER], f64> = BTreeMap::new();
    for h in histories {
        *mass.entry(h.labels).or_default() += 1.0 / n;
    }
    let mut cache: BTreeMap<[usize; MARKOV_ORDER], Vec<f64>> = BTreeMap::new();
    for _ in 1..steps {
        let mut next_mass: BTreeMap<[usize; MARKOV_ORDER], f64> = BTreeMap::new();
        for (pattern, &w) in &mass {
            let q = cache
                .entry(*pattern)
                .or_insert_with(|| clf.predict_proba(&pattern.map(|l| one_hot(l, k))));
            for (j, &qj) in q.iter().enumerate() {
                *next_mass.entry([j, pattern[0], pattern[1]]).or_default() += w * qj;
            }
        }
        mass = next_mass;
        let mut plan = Mat::zeros(k, k);
        for (pattern, &w) in &mass {
            let q = cache
                .entry(*pattern)
                .or_insert_with(|| clf.predict_proba(&pattern.map(|l| one_hot(l, k))));
            for (dst, qj) in plan.row_mut(pattern[0]).iter_mut().zip(q.iter()) {
                *dst += w * qj;
            }
        }
        plans.push(TransportPlan::new(plan)?);
    }
    Ok(plans)
}

/// Identity forecast for `steps` steps: every step is `diag(x_t)`.
pub fn identity_rollout(x: &MarginalDistribution, steps: usize) -> Vec<TransportPlan> {
    vec![identity_predict(x); steps]
}

/// Average-history forecast fed back on its own predictions.
pub fn average_history_rollout(
    prev: &TransportPlan,
    prev2: &TransportPlan,
    x: &[f64],
    steps: usize,
) -> Result<Vec<TransportPlan>> {
    let mut out: Vec<TransportPlan> = Vec::with_capacity(steps);
    let (mut p1, mut p2, mut cur) = (prev.clone(), prev2.clone(), x.to_vec());
    for _ in 0..steps {
        let next = average_history_predict(&p1, &p2, &cur)?;
        cur = next.target_mass();
        p2 = std::mem::replace(&mut p1, next.clone());
        out.push(next);
    }
    Ok(out)
}
