//! Faction timelines, the marginals and transport plans derived from them,
//! chronological splits, and a seeded synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Tolerance on `Σ mass = 1` accepted by [`MarginalDistribution::new`].
/// Constructed marginals are exact to rounding; predicted ones inherit the
/// Sinkhorn residual.
pub const SIMPLEX_TOL: f64 = 1e-6;

pub const CSV_HEADER: [&str; 3] = ["time_step", "element_id", "faction_id"];

/// Mass shares of each faction at one time step.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct MarginalDistribution(Vec<f64>);

impl MarginalDistribution {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::InvalidInput("marginal must have at least one entry".into()));
        }
        if mass.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "marginal entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("marginal sums to {total}, expected 1")));
        }
        Ok(Self(mass))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for MarginalDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        MarginalDistribution::new(v).map_err(serde::de::Error::custom)
    }
}

/// `flow[(i, j)]` is the mass moving from faction `i` at `t` to faction `j`
/// at `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TransportPlan(Mat);

impl TransportPlan {
    pub fn new(flow: Mat) -> Result<Self> {
        if !flow.is_square() || flow.rows() == 0 {
            return Err(Error::dim(
                "TransportPlan",
                "non-empty square matrix",
                format!("{}x{}", flow.rows(), flow.cols()),
            ));
        }
        if flow.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "transport plan entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(flow))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn flow(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    /// `P 1`: mass leaving each faction.
    pub fn source_mass(&self) -> Vec<f64> {
        self.0.row_sums()
    }

    /// `Pᵀ 1`: mass arriving at each faction.
    pub fn target_mass(&self) -> Vec<f64> {
        self.0.col_sums()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

impl<'de> Deserialize<'de> for TransportPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Mat::deserialize(d)?;
        TransportPlan::new(m).map_err(serde::de::Error::custom)
    }
}

/// Per-element faction labels over time, with a closed element set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactionTimeline {
    /// Original time-step values, ascending.
    pub time_steps: Vec<i64>,
    /// Original element ids, ascending.
    pub element_ids: Vec<i64>,
    /// `labels[t][e]` in `0..k`.
    pub labels: Vec<Vec<usize>>,
    pub k: usize,
    /// Original faction id for each internal label.
    pub label_values: Vec<i64>,
}

impl FactionTimeline {
    /// Builds a timeline with 0-based labels and sequential ids.
    pub fn from_labels(labels: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        let t = labels.len();
        let n = labels.first().map_or(0, Vec::len);
        let tl = Self {
            time_steps: (0..t as i64).collect(),
            element_ids: (0..n as i64).collect(),
            labels,
            k,
            label_values: (0..k as i64).collect(),
        };
        tl.validate()?;
        Ok(tl)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.element_ids.is_empty() {
            return Err(Error::InvalidInput(
                "timeline needs at least one step and one element".into(),
            ));
        }
        if self.labels.len() != self.time_steps.len() {
            return Err(Error::dim(
                "FactionTimeline time steps",
                self.time_steps.len(),
                self.labels.len(),
            ));
        }
        if self.label_values.len() != self.k {
            return Err(Error::dim(
                "FactionTimeline label values",
                self.k,
                self.label_values.len(),
            ));
        }
        for row in &self.labels {
            if row.len() != self.element_ids.len() {
                return Err(Error::dim(
                    "FactionTimeline elements",
                    self.element_ids.len(),
                    row.len(),
                ));
            }
            if let Some(bad) = row.iter().find(|&&l| l >= self.k) {
                return Err(Error::InvalidInput(format!(
                    "label {bad} out of range for k = {}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.labels.len()
    }

    pub fn num_elements(&self) -> usize {
        self.element_ids.len()
    }
}

/// Reads a timeline CSV (`time_step,element_id,faction_id`).
///
/// Rows may appear in any order. Labels already forming a 0-based range are
/// kept; otherwise distinct labels are mapped to `0..k` in ascending order,
/// recorded in `label_values`. `min_k` widens `k` beyond the observed labels.
pub fn ingest<R: Read>(reader: R, min_k: Option<usize>) -> Result<FactionTimeline> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.len() != 3 || headers.iter().zip(CSV_HEADER).any(|(h, want)| h != want) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut cells: BTreeMap<(i64, i64), i64> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let field = |idx: usize| -> Result<i64> {
            record[idx].parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("{} `{}` is not an integer", CSV_HEADER[idx], &record[idx]),
            })
        };
        let (t, e, f) = (field(0)?, field(1)?, field(2)?);
        if cells.insert((t, e), f).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate cell (t={t}, e={e})"),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput("timeline file has no data rows".into()));
    }

    let time_steps: Vec<i64> = cells
        .keys()
        .map(|(t, _)| *t)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let element_ids: Vec<i64> = cells
        .keys()
        .map(|(_, e)| *e)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let distinct: Vec<i64> = cells.values().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let mut gaps = Vec::new();
    let mut gap_count = 0;
    for &t in &time_steps {
        for &e in &element_ids {
            if !cells.contains_key(&(t, e)) {
                gap_count += 1;
                if gaps.len() < 10 {
                    gaps.push((t, e));
                }
            }
        }
    }
    if gap_count > 0 {
        return Err(Error::Gaps {
            count: gap_count,
            first: gaps,
        });
    }

    let min_k = min_k.unwrap_or(0);
    let max_label = *distinct.last().expect("non-empty");
    let zero_based = distinct[0] >= 0 && (max_label as usize) < distinct.len().max(min_k);
    let (k, label_values, index): (usize, Vec<i64>, BTreeMap<i64, usize>) = if zero_based {
        let k = (max_label as usize + 1).max(min_k);
        (
            k,
            (0..k as i64).collect(),
            distinct.iter().map(|&v| (v, v as usize)).collect(),
        )
    } else {
        let k = distinct.len().max(min_k);
        let mut values = distinct.clone();
        let mut next = max_label;
        while values.len() < k {
            next += 1;
            values.push(next);
        }
        (k, values, distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect())
    };

    let labels = time_steps
        .iter()
        .map(|&t| element_ids.iter().map(|&e| index[&cells[&(t, e)]]).collect())
        .collect();

    let tl = FactionTimeline {
        time_steps,
        element_ids,
        labels,
        k,
        label_values,
    };
    tl.validate()?;
    Ok(tl)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes a timeline in the CSV schema read by [`ingest`], sorted by time
/// step then element id, with original label values.
pub fn write_timeline<W: Write>(tl: &FactionTimeline, mut writer: W) -> Result<()> {
    writeln!(writer, "{}", CSV_HEADER.join(","))?;
    for (t, row) in tl.time_steps.iter().zip(&tl.labels) {
        for (e, &label) in tl.element_ids.iter().zip(row) {
            writeln!(writer, "{t},{e},{}", tl.label_values[label])?;
        }
    }
    Ok(())
}

/// Ground-truth marginals (`T` of them) and plans (`T - 1`) for a timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowDump")]
pub struct FlowSeries {
    pub k: usize,
    pub marginals: Vec<MarginalDistribution>,
    pub plans: Vec<TransportPlan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDump {
    k: usize,
    marginals: Vec<MarginalDistribution>,
    plans: Vec<TransportPlan>,
}

impl TryFrom<FlowDump> for FlowSeries {
    type Error = Error;

    fn try_from(d: FlowDump) -> Result<Self> {
        let s = FlowSeries {
            k: d.k,
            marginals: d.marginals,
            plans: d.plans,
        };
        s.validate()?;
        Ok(s)
    }
}

impl FlowSeries {
    pub fn validate(&self) -> Result<()> {
        if self.marginals.iter().any(|x| x.k() != self.k) {
            return Err(Error::dim("FlowSeries marginals", self.k, "mismatched length"));
        }
        if self.plans.iter().any(|p| p.k() != self.k) {
            return Err(Error::dim("FlowSeries plans", self.k, "mismatched size"));
        }
        if !self.plans.is_empty() && self.plans.len() + 1 != self.marginals.len() {
            return Err(Error::dim("FlowSeries", self.plans.len() + 1, self.marginals.len()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn num_plans(&self) -> usize {
        self.plans.len()
    }
}

/// Integer transition counts `counts[t][i][j]` between consecutive steps.
pub fn transition_counts(tl: &FactionTimeline) -> Vec<Vec<Vec<u64>>> {
    tl.labels
        .windows(2)
        .map(|w| {
            let mut c = vec![vec![0u64; tl.k]; tl.k];
            for (&from, &to) in w[0].iter().zip(&w[1]) {
                c[from][to] += 1;
            }
            c
        })
        .collect()
}

pub fn build_marginals_and_plans(tl: &FactionTimeline) -> Result<FlowSeries> {
    tl.validate()?;
    let n = tl.num_elements() as f64;
    let k = tl.k;
    let marginals = tl
        .labels
        .iter()
        .map(|row| {
            let mut counts = vec![0u64; k];
            row.iter().for_each(|&l| counts[l] += 1);
            MarginalDistribution::new(counts.into_iter().map(|c| c as f64 / n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let plans = transition_counts(tl)
        .into_iter()
        .map(|c| {
            let data = c.into_iter().flatten().map(|v| v as f64 / n).collect();
            TransportPlan::new(Mat::from_vec(k, k, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowSeries { k, marginals, plans })
}

/// Chronological train/validation/test lengths, counted in transport plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

impl SplitSpec {
    /// Ukrainian parliament shape.
    pub const PARLIAMENT: SplitSpec = SplitSpec {
        train_len: 130,
        val_len: 10,
        test_len: 24,
    };
    /// EU-email shape.
    pub const EU_EMAIL: SplitSpec = SplitSpec {
        train_len: 85,
        val_len: 5,
        test_len: 26,
    };

    pub fn total(&self) -> usize {
        self.train_len + self.val_len + self.test_len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous ranges of plan indices, in train → validation → test order.
pub fn split(num_plans: usize, spec: SplitSpec) -> Result<SplitRanges> {
    let needed = spec.total();
    if needed > num_plans {
        return Err(Error::Insufficient(format!(
            "split needs {needed} plans but only {num_plans} are available (short by {})",
            needed - num_plans
        )));
    }
    let a = spec.train_len;
    let b = a + spec.val_len;
    Ok(SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..needed,
    })
}

/// Kernel switch taking effect for transitions out of step `from_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelPhase {
    pub from_step: usize,
    pub kernel: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k: usize,
    /// Number of elements.
    pub n: usize,
    /// Number of time steps (snapshots).
    pub t: usize,
    /// Row-stochastic per-element switching probabilities.
    pub kernel: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift: Vec<KernelPhase>,
    /// Distribution of labels at the first step; uniform when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    pub seed: u64,
}

fn check_stochastic(name: &str, rows: &[Vec<f64>], k: usize) -> Result<()> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput(format!("{name} must be {k}x{k}")));
    }
    for (i, r) in rows.iter().enumerate() {
        let total: f64 = r.iter().sum();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "{name} row {i} is not a probability vector (sum {total})"
            )));
        }
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 || self.t < 1 {
            return Err(Error::InvalidInput("synthetic spec needs k, n, t >= 1".into()));
        }
        check_stochastic("kernel", &self.kernel, self.k)?;
        for phase in &self.drift {
            check_stochastic("drift kernel", &phase.kernel, self.k)?;
        }
        if let Some(init) = &self.initial {
            let total: f64 = init.iter().sum();
            if init.len() != self.k || init.iter().any(|v| !v.is_finite() || *v < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "initial distribution must be a probability vector of length {}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn kernel_at(&self, step: usize) -> &[Vec<f64>] {
        self.drift
            .iter()
            .filter(|p| p.from_step <= step)
            .max_by_key(|p| p.from_step)
            .map_or(&self.kernel, |p| &p.kernel)
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u beyond the cumulative total; take the last supported category.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a timeline where each element's next label is sampled from the
/// kernel row of its current label. Pure in `spec`, seed included.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FactionTimeline> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniform = vec![1.0 / spec.k as f64; spec.k];
    let initial = spec.initial.as_deref().unwrap_or(&uniform);
    let mut labels = Vec::with_capacity(spec.t);
    labels.push(
        (0..spec.n)
            .map(|_| sample_categorical(&mut rng, initial))
            .collect::<Vec<_>>(),
    );
    for step in 1..spec.t {
        let kernel = spec.kernel_at(step - 1);
        let next = labels[step - 1]
            .iter()
            .map(|&from| sample_categorical(&mut rng, &kernel[from]))
            .collect();
        labels.push(next);
    }
    FactionTimeline::from_labels(labels, spec.k)
}

/// Greedy maximum-overlap relabeling: each step's labels are renamed to
/// match the previous step's labels they share the most elements with.
/// Optional preprocessing for timelines whose labels are not aligned
/// across steps.
pub fn relabel_by_overlap(tl: &FactionTimeline) -> Result<FactionTimeline> {
    tl.validate()?;
    let k = tl.k;
    let mut out = tl.clone();
    for t in 1..tl.num_steps() {
        let mut overlap = vec![vec![0u64; k]; k];
        for (&prev, &cur) in out.labels[t - 1].iter().zip(&tl.labels[t]) {
            overlap[prev][cur] += 1;
        }
        let mut pairs: Vec<(u64, usize, usize)> = (0..k)
            .flat_map(|p| (0..k).map(move |c| (p, c)))
            .filter(|&(p, c)| overlap[p][c] > 0)
            .map(|(p, c)| (overlap[p][c], p, c))
            .collect();
        pairs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut mapping: Vec<Option<usize>> = vec![None; k];
        let mut taken = vec![false; k];
        for (_, prev, cur) in pairs {
            if mapping[cur].is_none() && !taken[prev] {
                mapping[cur] = Some(prev);
                taken[prev] = true;
            }
        }
        let mut free = (0..k).filter(|&l| !taken[l]);
        for m in mapping.iter_mut().filter(|m| m.is_none()) {
            *m = free.next();
        }
        out.labels[t] = tl.labels[t].iter().map(|&l| mapping[l].expect("bijection")).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv() -> &'static str {
        "time_step,element_id,faction_id\n0,0,0\n0,1,0\n0,2,1\n0,3,1\n1,0,0\n1,1,1\n1,2,1\n1,3,1\n"
    }

    #[test]
    fn ingest_toy() {
        let tl = ingest(toy_csv().as_bytes(), None).unwrap();
        assert_eq!((tl.num_steps(), tl.num_elements(), tl.k), (2, 4, 2));
        assert_eq!(tl.labels, vec![vec![0, 0, 1, 1], vec![0, 1, 1, 1]]);
    }

    #[test]
    fn ingest_reports_gap() {
        let text = "time_step,element_id,faction_id\n0,0,0\n0,1,1\n1,0,0\n";
        match ingest(text.as_bytes(), None) {
            Err(Error::Gaps { count, first }) => {
                assert_eq!(count, 1);
                assert_eq!(first, vec![(1, 1)]);
            }
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_caps_gap_listing_at_ten() {
        let mut text = String::from("time_step,element_id,faction_id\n");
        for e in 0..15 {
            text.push_str(&format!("0,{e},0\n"));
        }
        text.push_str("1,0,0\n");
        match ingest(text.as_bytes(), None) {
            Err(Error::Gaps { count, first }) => {
                assert_eq!(count, 14);
                assert_eq!(first.len(), 10);
            }
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reports_line_of_bad_label() {
        let text = "time_step,element_id,faction_id\n0,0,0\n0,1,x\n";
        match ingest(text.as_bytes(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_wrong_header_and_duplicates() {
        assert!(matches!(
            ingest("t,e,f\n0,0,0\n".as_bytes(), None),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = "time_step,element_id,faction_id\n0,0,0\n0,0,1\n";
        assert!(matches!(
            ingest(dup.as_bytes(), None),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn ingest_remaps_sparse_labels() {
        let text = "time_step,element_id,faction_id\n0,7,10\n0,9,30\n1,7,30\n1,9,30\n";
        let tl = ingest(text.as_bytes(), None).unwrap();
        assert_eq!(tl.k, 2);
        assert_eq!(tl.label_values, vec![10, 30]);
        assert_eq!(tl.labels, vec![vec![0, 1], vec![1, 1]]);
        assert_eq!(tl.element_ids, vec![7, 9]);
    }

    #[test]
    fn counting_example() {
        let tl = FactionTimeline::from_labels(vec![vec![0, 0, 1, 1], vec![0, 1, 1, 1]], 2).unwrap();
        let fs = build_marginals_and_plans(&tl).unwrap();
        assert_eq!(fs.marginals[0].as_slice(), &[0.5, 0.5]);
        assert_eq!(fs.marginals[1].as_slice(), &[0.25, 0.75]);
        assert_eq!(fs.plans[0].flow().to_rows(), vec![vec![0.25, 0.25], vec![0.0, 0.5]]);
    }

    #[test]
    fn constant_labels_give_diagonal_plans() {
        let tl = FactionTimeline::from_labels(vec![vec![0, 2, 1, 2]; 3], 3).unwrap();
        let fs = build_marginals_and_plans(&tl).unwrap();
        for (p, x) in fs.plans.iter().zip(&fs.marginals) {
            assert_eq!(p.flow(), &Mat::diag(x.as_slice()));
        }
    }

    #[test]
    fn split_shapes() {
        let r = split(164, SplitSpec::PARLIAMENT).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..130, 130..140, 140..164));
        let r = split(116, SplitSpec::EU_EMAIL).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..85, 85..90, 90..116));
        match split(163, SplitSpec::PARLIAMENT) {
            Err(Error::Insufficient(msg)) => assert!(msg.contains("short by 1")),
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    fn spec(kernel: Vec<Vec<f64>>, n: usize, t: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            k: kernel.len(),
            n,
            t,
            kernel,
            drift: vec![],
            initial: None,
            seed,
        }
    }

    #[test]
    fn identity_kernel_freezes_labels() {
        let s = spec(Mat::identity(3).to_rows(), 50, 6, 1);
        let tl = generate_synthetic(&s).unwrap();
        assert!(tl.labels.windows(2).all(|w| w[0] == w[1]));
        let fs = build_marginals_and_plans(&tl).unwrap();
        for p in &fs.plans {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert_eq!(p.flow()[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let kernel = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]];
        let a = generate_synthetic(&spec(kernel.clone(), 40, 8, 9)).unwrap();
        let b = generate_synthetic(&spec(kernel.clone(), 40, 8, 9)).unwrap();
        let c = generate_synthetic(&spec(kernel, 40, 8, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_stochastic_kernel() {
        let s = spec(vec![vec![0.5, 0.6], vec![0.5, 0.5]], 4, 4, 0);
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn drift_switches_kernel() {
        let mut s = spec(Mat::identity(2).to_rows(), 20, 6, 3);
        s.initial = Some(vec![1.0, 0.0]);
        s.drift = vec![KernelPhase {
            from_step: 3,
            kernel: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        }];
        let tl = generate_synthetic(&s).unwrap();
        assert!(tl.labels[..4].iter().all(|r| r.iter().all(|&l| l == 0)));
        assert!(tl.labels[4].iter().all(|&l| l == 1));
        assert!(tl.labels[5].iter().all(|&l| l == 0));
    }

    #[test]
    fn relabel_undoes_permutation() {
        let labels = vec![vec![0, 0, 1, 1, 2], vec![1, 1, 2, 2, 0], vec![2, 2, 0, 0, 1]];
        let tl = FactionTimeline::from_labels(labels, 3).unwrap();
        let fixed = relabel_by_overlap(&tl).unwrap();
        assert!(fixed.labels.iter().all(|r| r == &vec![0, 0, 1, 1, 2]));
    }

    #[test]
    fn flow_dump_json_schema() {
        let tl = FactionTimeline::from_labels(vec![vec![0, 0, 1, 1], vec![0, 1, 1, 1]], 2).unwrap();
        let fs = build_marginals_and_plans(&tl).unwrap();
        let text = serde_json::to_string(&fs).unwrap();
        assert_eq!(
            text,
            r#"{"k":2,"marginals":[[0.5,0.5],[0.25,0.75]],"plans":[[[0.25,0.25],[0.0,0.5]]]}"#
        );
        assert_eq!(FlowSeries::from_json(&text).unwrap(), fs);
        assert!(FlowSeries::from_json(r#"{"k":3,"marginals":[[0.5,0.5]],"plans":[]}"#).is_err());
    }
}
