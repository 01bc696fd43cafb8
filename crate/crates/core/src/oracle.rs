//! Reference gradients for the Sinkhorn layer, computed without the
//! implicit backward pass.

use crate::error::Result;
use crate::linalg::Mat;
use crate::ot_layer::{sinkhorn_forward, PotentialMatrix, SinkhornConfig};

/// Gradient of `<d_s, S_n(M)>` obtained by reverse-mode differentiation of
/// exactly `iters` explicit row/column normalization sweeps.
pub fn unrolled_gradient(m: &Mat, d_s: &Mat, iters: usize) -> Mat {
    let k = m.rows();
    let shift = m.min();
    let start = m.map(|v| (-(v - shift)).exp());

    // Store every intermediate normalized matrix and its normalizers.
    let mut row_normed = Vec::with_capacity(iters);
    let mut col_normed = Vec::with_capacity(iters);
    let mut row_totals = Vec::with_capacity(iters);
    let mut col_totals = Vec::with_capacity(iters);
    let mut x = start.clone();
    for _ in 0..iters {
        let rt = x.row_sums();
        let mut y = x.clone();
        for i in 0..k {
            for j in 0..k {
                y[(i, j)] /= rt[i];
            }
        }
        let ct = y.col_sums();
        let mut z = y.clone();
        for i in 0..k {
            for j in 0..k {
                z[(i, j)] /= ct[j];
            }
        }
        row_totals.push(rt);
        col_totals.push(ct);
        row_normed.push(y);
        col_normed.push(z.clone());
        x = z;
    }

    let mut grad = d_s.clone();
    for it in (0..iters).rev() {
        // z = y / colsum(y): dy_ij = (dz_ij - Σ_l dz_lj z_lj) / c_j
        let z = &col_normed[it];
        let ct = &col_totals[it];
        let mut dy = Mat::zeros(k, k);
        for j in 0..k {
            let dot: f64 = (0..k).map(|l| grad[(l, j)] * z[(l, j)]).sum();
            for i in 0..k {
                dy[(i, j)] = (grad[(i, j)] - dot) / ct[j];
            }
        }
        // y = x / rowsum(x): dx_ij = (dy_ij - Σ_l dy_il y_il) / r_i
        let y = &row_normed[it];
        let rt = &row_totals[it];
        let mut dx = Mat::zeros(k, k);
        for i in 0..k {
            let dot: f64 = (0..k).map(|l| dy[(i, l)] * y[(i, l)]).sum();
            for j in 0..k {
                dx[(i, j)] = (dy[(i, j)] - dot) / rt[i];
            }
        }
        grad = dx;
    }
    // start = exp(-(M - shift)); the shift cancels in the normalizations.
    let mut out = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] = -start[(i, j)] * grad[(i, j)];
        }
    }
    out
}

/// Central differences of `<d_s, S(M)>`, running the forward pass for a
/// fixed `iters` sweeps on every perturbed matrix.
pub fn finite_difference_gradient(m: &Mat, d_s: &Mat, iters: usize, step: f64) -> Result<Mat> {
    let cfg = SinkhornConfig {
        max_iters: iters,
        tol: 0.0,
        ..SinkhornConfig::tight()
    };
    let objective = |probe: &Mat| -> Result<f64> {
        let s = sinkhorn_forward(&PotentialMatrix::new(probe.clone())?, &cfg)?;
        Ok(s.entries().hadamard(d_s)?.sum())
    };
    let mut out = Mat::zeros(m.rows(), m.cols());
    let mut probe = m.clone();
    for idx in 0..m.as_slice().len() {
        let base = m.as_slice()[idx];
        probe.as_mut_slice()[idx] = base + step;
        let up = objective(&probe)?;
        probe.as_mut_slice()[idx] = base - step;
        let down = objective(&probe)?;
        probe.as_mut_slice()[idx] = base;
        out.as_mut_slice()[idx] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// `|got - want|_F / |want|_F`, or the absolute error when `want` is zero.
pub fn relative_error(got: &Mat, want: &Mat) -> f64 {
    let diff = got.sub(want).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY);
    let scale = want.frobenius_norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
