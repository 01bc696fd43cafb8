//! Sinkhorn layer.
//!
//! The forward pass maps a square potential matrix `M` to the doubly
//! stochastic matrix `S = lim N_c(N_r(...exp(-M)...))`, alternating row and
//! column normalization. The backward pass never unrolls those iterations:
//! it differentiates the optimality conditions of the entropy-regularized
//! transport problem
//!
//! ```text
//! minimize <M, S> - H(S)   subject to  S 1 = 1,  Sᵀ 1 = 1
//! ```
//!
//! which yields
//!
//! ```text
//! dL/dM = S ∘ (a 1ᵀ + 1 bᵀ - dL/dS)
//! [I  S ] [a]   [(S ∘ dL/dS) 1 ]
//! [Sᵀ I ] [b] = [(S ∘ dL/dS)ᵀ 1]
//! ```
//!
//! The block system is singular along `(1, -1)`. It is solved with a
//! Richardson iteration that re-centers every iterate so that `Σa = Σb`,
//! touching `S` only through matrix-vector products. Memory use of the
//! backward pass is two length-`k` vectors plus scratch, independent of how
//! many forward iterations produced `S`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, Mat};

/// Square matrix of real potentials fed to the Sinkhorn operator. Any
/// entropy temperature is already folded into the entries.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PotentialMatrix(Mat);

impl PotentialMatrix {
    pub fn new(entries: Mat) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::dim(
                "PotentialMatrix",
                "square matrix",
                format!("{}x{}", entries.rows(), entries.cols()),
            ));
        }
        if entries.rows() < 2 {
            return Err(Error::dim("PotentialMatrix", "k >= 2", entries.rows()));
        }
        if !entries.all_finite() {
            return Err(Error::InvalidInput(
                "potential matrix contains NaN or infinite entries".into(),
            ));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }
}

/// How the forward iteration is carried out numerically. Both modes compute
/// the same iterates in exact arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Exponentiate `-(M - min M)` once, then normalize. Falls back to
    /// [`ForwardMode::LogDomain`] if any entry underflows to zero.
    #[default]
    Direct,
    /// Normalize log-entries with log-sum-exp and exponentiate at the end.
    LogDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Cap on row+column normalization sweeps.
    pub max_iters: usize,
    /// Stop once every row and column sum is within `tol` of one.
    pub tol: f64,
    pub backward_max_iters: usize,
    /// Stop the Richardson solve once its residual, relative to
    /// `max(1, |rhs|_inf)`, is at most this.
    pub backward_tol: f64,
    #[serde(default)]
    pub mode: ForwardMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            backward_max_iters: 1000,
            backward_tol: 1e-9,
            mode: ForwardMode::Direct,
        }
    }
}

impl SinkhornConfig {
    /// Settings for reference runs that must reach the fixed point to near
    /// machine precision.
    pub fn tight() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-12,
            backward_max_iters: 100_000,
            backward_tol: 1e-12,
            mode: ForwardMode::Direct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be at least 1".into()));
        }
        if self.backward_max_iters == 0 {
            return Err(Error::Config("backward_max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("sinkhorn tol must be >= 0, got {}", self.tol)));
        }
        if !(self.backward_tol >= 0.0 && self.backward_tol.is_finite()) {
            return Err(Error::Config(format!(
                "backward tol must be >= 0, got {}",
                self.backward_tol
            )));
        }
        Ok(())
    }
}

/// Output of the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoublyStochasticMatrix {
    entries: Mat,
    iterations_used: usize,
    residual: f64,
    converged: bool,
}

impl DoublyStochasticMatrix {
    /// Wraps an externally supplied matrix, recording its current residual.
    /// Positivity is not checked here; [`sinkhorn_backward`] rejects
    /// matrices with non-positive entries.
    pub fn from_matrix(entries: Mat, tol: f64) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::dim(
                "DoublyStochasticMatrix",
                "square matrix",
                format!("{}x{}", entries.rows(), entries.cols()),
            ));
        }
        if !entries.all_finite() {
            return Err(Error::InvalidInput("matrix contains NaN or infinite entries".into()));
        }
        let residual = marginal_residual(&entries);
        Ok(Self {
            entries,
            iterations_used: 0,
            residual,
            converged: residual <= tol,
        })
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn into_entries(self) -> Mat {
        self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    /// Largest deviation of any row or column sum from one.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn converged(&self) -> bool {
        self.converged
    }
}

pub(crate) fn marginal_residual(s: &Mat) -> f64 {
    let rows = s.row_sums().into_iter().map(|v| (v - 1.0).abs());
    let cols = s.col_sums().into_iter().map(|v| (v - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn normalize_rows(s: &mut Mat) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
}

fn normalize_cols(s: &mut Mat) {
    let totals = s.col_sums();
    for i in 0..s.rows() {
        for (v, t) in s.row_mut(i).iter_mut().zip(&totals) {
            *v /= t;
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let peak = values.clone().fold(f64::NEG_INFINITY, f64::max);
    peak + values.map(|v| (v - peak).exp()).sum::<f64>().ln()
}

struct Tracker {
    best: Option<Mat>,
    best_residual: f64,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: None,
            best_residual: f64::INFINITY,
        }
    }

    fn offer(&mut self, residual: f64, current: impl FnOnce() -> Mat) {
        if residual < self.best_residual || self.best.is_none() {
            self.best_residual = residual;
            self.best = Some(current());
        }
    }
}

/// Runs the Sinkhorn operator on `m`.
///
/// Each iteration normalizes rows, then columns. Iteration stops as soon as
/// the residual is at most `cfg.tol`, or after `cfg.max_iters` sweeps, in
/// which case the best iterate seen is returned with `converged() == false`.
pub fn sinkhorn_forward(m: &PotentialMatrix, cfg: &SinkhornConfig) -> Result<DoublyStochasticMatrix> {
    cfg.validate()?;
    let mat = m.as_mat();
    match cfg.mode {
        ForwardMode::Direct => {
            let shift = mat.min();
            let kernel = mat.map(|v| (-(v - shift)).exp());
            if kernel.as_slice().contains(&0.0) {
                forward_log_domain(mat, cfg)
            } else {
                Ok(forward_direct(kernel, cfg))
            }
        }
        ForwardMode::LogDomain => forward_log_domain(mat, cfg),
    }
}

fn forward_direct(mut s: Mat, cfg: &SinkhornConfig) -> DoublyStochasticMatrix {
    let mut tracker = Tracker::new();
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        normalize_rows(&mut s);
        normalize_cols(&mut s);
        let residual = marginal_residual(&s);
        if residual <= cfg.tol {
            return DoublyStochasticMatrix {
                entries: s,
                iterations_used: it,
                residual,
                converged: true,
            };
        }
        tracker.offer(residual, || s.clone());
    }
    DoublyStochasticMatrix {
        entries: tracker.best.unwrap_or(s),
        iterations_used: iterations,
        residual: tracker.best_residual,
        converged: false,
    }
}

fn forward_log_domain(m: &Mat, cfg: &SinkhornConfig) -> Result<DoublyStochasticMatrix> {
    let k = m.rows();
    let mut log_s = m.scale(-1.0);
    let mut tracker = Tracker::new();
    let mut iterations = 0;
    let mut last = Mat::zeros(k, k);
    for it in 1..=cfg.max_iters {
        iterations = it;
        for i in 0..k {
            let row = log_s.row_mut(i);
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        for j in 0..k {
            let lse = log_sum_exp((0..k).map(|i| log_s[(i, j)]));
            for i in 0..k {
                log_s[(i, j)] -= lse;
            }
        }
        last = log_s.map(f64::exp);
        let residual = marginal_residual(&last);
        if residual <= cfg.tol {
            return Ok(DoublyStochasticMatrix {
                entries: last,
                iterations_used: it,
                residual,
                converged: true,
            });
        }
        tracker.offer(residual, || last.clone());
    }
    Ok(DoublyStochasticMatrix {
        entries: tracker.best.unwrap_or(last),
        iterations_used: iterations,
        residual: tracker.best_residual,
        converged: false,
    })
}

/// Richardson iterates and solve status of a backward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackwardWorkspace {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Final residual of the block system, relative to `max(1, |rhs|_inf)`,
    /// with the `(1, -1)` component removed.
    pub residual: f64,
}

impl BackwardWorkspace {
    /// Bytes held by the iterate vectors.
    pub fn heap_bytes(&self) -> usize {
        (self.a.capacity() + self.b.capacity()) * std::mem::size_of::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SinkhornGradient {
    /// dL/dM.
    pub potential: Mat,
    pub workspace: BackwardWorkspace,
}

/// One Richardson step, as reported to an observer.
#[derive(Debug)]
pub struct RichardsonStep<'a> {
    pub iteration: usize,
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub residual: f64,
}

/// Gradient of a loss with respect to the potential matrix, given the
/// forward output `s` and the upstream gradient `d_s = dL/dS`.
pub fn sinkhorn_backward(s: &DoublyStochasticMatrix, d_s: &Mat, cfg: &SinkhornConfig) -> Result<SinkhornGradient> {
    sinkhorn_backward_observed(s, d_s, cfg, |_| {})
}

/// [`sinkhorn_backward`] with a callback invoked after every Richardson step.
pub fn sinkhorn_backward_observed(
    s: &DoublyStochasticMatrix,
    d_s: &Mat,
    cfg: &SinkhornConfig,
    mut observer: impl FnMut(&RichardsonStep<'_>),
) -> Result<SinkhornGradient> {
    cfg.validate()?;
    let s = s.entries();
    s.check_same_shape(d_s, "sinkhorn_backward")?;
    if s.as_slice().iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::InvalidInput(
            "doubly stochastic matrix must be strictly positive and finite".into(),
        ));
    }
    if !d_s.all_finite() {
        return Err(Error::InvalidInput(
            "upstream gradient contains NaN or infinite entries".into(),
        ));
    }

    let k = s.rows();
    let weighted = s.hadamard(d_s)?;
    let rhs_a = weighted.row_sums();
    let rhs_b = weighted.col_sums();
    let scale = max_abs(&rhs_a).max(max_abs(&rhs_b)).max(1.0);

    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations_used = 0;

    for it in 1..=cfg.backward_max_iters {
        iterations_used = it;
        // The b-update consumes the freshly computed a-bar. Feeding it the
        // previous a instead leaves the (1, 1) mode oscillating and the
        // gradient off by a multiple of S.
        let s_b = s.mul_vec(&b);
        let a_bar: Vec<f64> = rhs_a.iter().zip(&s_b).map(|(r, v)| r - v).collect();
        let st_a = s.tr_mul_vec(&a_bar);
        let b_bar: Vec<f64> = rhs_b.iter().zip(&st_a).map(|(r, v)| r - v).collect();
        let shift = recenter_shift(&a_bar, &b_bar);
        for ((dst, src), (dst_b, src_b)) in a.iter_mut().zip(&a_bar).zip(b.iter_mut().zip(&b_bar)) {
            *dst = src - shift;
            *dst_b = src_b + shift;
        }

        residual = system_residual(s, &a, &b, &rhs_a, &rhs_b) / scale;
        observer(&RichardsonStep {
            iteration: it,
            a: &a,
            b: &b,
            residual,
        });
        if residual <= cfg.backward_tol {
            converged = true;
            break;
        }
    }

    let mut potential = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            potential[(i, j)] = s[(i, j)] * (a[i] + b[j] - d_s[(i, j)]);
        }
    }

    Ok(SinkhornGradient {
        potential,
        workspace: BackwardWorkspace {
            a,
            b,
            converged,
            iterations_used,
            residual,
        },
    })
}

fn recenter_shift(a_bar: &[f64], b_bar: &[f64]) -> f64 {
    let diff: f64 = a_bar.iter().sum::<f64>() - b_bar.iter().sum::<f64>();
    diff / (2 * a_bar.len()) as f64
}

/// Infinity norm of the block-system residual after projecting out the
/// `(1, -1)` direction, which the pseudo-inverse solution leaves unresolved.
fn system_residual(s: &Mat, a: &[f64], b: &[f64], rhs_a: &[f64], rhs_b: &[f64]) -> f64 {
    let s_b = s.mul_vec(b);
    let st_a = s.tr_mul_vec(a);
    let mut rho_a: Vec<f64> = (0..a.len()).map(|i| rhs_a[i] - a[i] - s_b[i]).collect();
    let mut rho_b: Vec<f64> = (0..b.len()).map(|j| rhs_b[j] - b[j] - st_a[j]).collect();
    let d = recenter_shift(&rho_a, &rho_b);
    rho_a.iter_mut().for_each(|v| *v -= d);
    rho_b.iter_mut().for_each(|v| *v += d);
    max_abs(&rho_a).max(max_abs(&rho_b))
}

/// Moves the `(1, -1)` component out of `(a_bar, b_bar)`:
/// `a = a_bar - c 1`, `b = b_bar + c 1` with `c = 1ᵀ(a_bar - b_bar) / 2k`.
/// The sum `a 1ᵀ + 1 bᵀ` is unchanged.
pub fn null_space_recenter(a_bar: &[f64], b_bar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a_bar.len() != b_bar.len() {
        return Err(Error::dim("null_space_recenter", a_bar.len(), b_bar.len()));
    }
    if a_bar.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let c = recenter_shift(a_bar, b_bar);
    Ok((
        a_bar.iter().map(|v| v - c).collect(),
        b_bar.iter().map(|v| v + c).collect(),
    ))
}
