//! Least squares by Householder QR with column pivoting.
//!
//! Full column rank systems are solved by back substitution on `R`. Rank
//! deficient ones go through a complete orthogonal decomposition so the
//! minimum-norm minimiser is returned.

use crate::error::{PcpError, Result};

use super::Matrix;

/// Reflector `I - 2 v v^T / (v^T v)` applied to `x[offset..]`.
fn reflect(v: &[f64], vtv: f64, x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let scale = 2.0 * dot / vtv;
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= scale * vi;
    }
}

/// Builds the Householder vector mapping `x` onto `alpha e_1`.
/// Returns `(v, v^T v, alpha)`, or `None` when `x` is zero.
fn householder(x: &[f64]) -> Option<(Vec<f64>, f64, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let alpha = if x[0] >= 0.0 { -norm } else { norm };
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vtv: f64 = v.iter().map(|a| a * a).sum();
    if vtv == 0.0 {
        return None;
    }
    Some((v, vtv, alpha))
}

/// Returns `argmin_W ||B - A W||_F` for `A` (`m x k`) and `B` (`m x p`); the
/// minimum-norm minimiser when `A` is rank deficient.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (m, k) = (a.rows(), a.cols());
    let p = b.cols();
    if m == 0 || k == 0 {
        return Err(PcpError::InvalidArgument(format!(
            "least squares needs a non-empty design, got {m}x{k}"
        )));
    }
    if b.rows() != m {
        return Err(PcpError::Shape(format!(
            "design has {m} rows but right-hand side has {}",
            b.rows()
        )));
    }
    if p == 0 {
        return Ok(Matrix::zeros(k, 0));
    }

    // Column-major working copies keep the reflector updates contiguous.
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut rhs: Vec<Vec<f64>> = (0..p).map(|j| b.column(j)).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    let steps = m.min(k);
    let mut r_diag = vec![0.0f64; steps];

    for j in 0..steps {
        // Pivot on the largest remaining column norm; recomputed exactly so
        // that no downdating error creeps into the rank decision.
        let (best, _) = (j..k)
            .map(|c| (c, cols[c][j..].iter().map(|v| v * v).sum::<f64>()))
            .fold((j, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best != j {
            cols.swap(j, best);
            perm.swap(j, best);
        }
        let Some((v, vtv, alpha)) = householder(&cols[j][j..]) else {
            r_diag[j] = 0.0;
            continue;
        };
        cols[j][j] = alpha;
        cols[j][j + 1..].iter_mut().for_each(|x| *x = 0.0);
        r_diag[j] = alpha;
        for col in cols.iter_mut().skip(j + 1) {
            reflect(&v, vtv, &mut col[j..]);
        }
        for col in rhs.iter_mut() {
            reflect(&v, vtv, &mut col[j..]);
        }
    }

    let r0 = r_diag.first().copied().unwrap_or(0.0).abs();
    let tol = (m.max(k) as f64) * f64::EPSILON * r0;
    let rank = if r0 == 0.0 {
        0
    } else {
        r_diag.iter().take_while(|d| d.abs() > tol).count()
    };

    let mut solution = Matrix::zeros(k, p);
    if rank == 0 {
        return Ok(solution);
    }

    // R entries: R[i][j] = cols[j][i] for i <= j.
    let r = |i: usize, j: usize| cols[j][i];

    if rank == k {
        for (q, c) in rhs.iter().enumerate() {
            let mut z = vec![0.0f64; k];
            for i in (0..k).rev() {
                let mut s = c[i];
                for jj in i + 1..k {
                    s -= r(i, jj) * z[jj];
                }
                z[i] = s / r(i, i);
            }
            for i in 0..k {
                solution[(perm[i], q)] = z[i];
            }
        }
        return Ok(solution);
    }

    // Rank deficient: R1 = [R11 R12] is rank x k. Factor R1^T = Q2 T with T
    // upper triangular (rank x rank); then R1 = T^T Q2^T and the minimum-norm
    // solution of R1 z = c is z = Q2 (T^-T c).
    let mut r1t: Vec<Vec<f64>> = (0..rank)
        .map(|i| (0..k).map(|j| if j >= i { r(i, j) } else { 0.0 }).collect())
        .collect();
    let mut reflectors: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(rank);
    for j in 0..rank {
        match householder(&r1t[j][j..]) {
            Some((v, vtv, alpha)) => {
                r1t[j][j] = alpha;
                r1t[j][j + 1..].iter_mut().for_each(|x| *x = 0.0);
                for col in r1t.iter_mut().skip(j + 1) {
                    reflect(&v, vtv, &mut col[j..]);
                }
                reflectors.push(Some((v, vtv)));
            }
            None => reflectors.push(None),
        }
    }
    // T[i][j] = r1t[j][i] for i <= j; T^T is lower triangular.
    for (q, c) in rhs.iter().enumerate() {
        let mut u = vec![0.0f64; k];
        for i in 0..rank {
            let mut s = c[i];
            for jj in 0..i {
                s -= r1t[i][jj] * u[jj];
            }
            let diag = r1t[i][i];
            u[i] = if diag == 0.0 { 0.0 } else { s / diag };
        }
        for j in (0..rank).rev() {
            if let Some((v, vtv)) = &reflectors[j] {
                reflect(v, *vtv, &mut u[j..]);
            }
        }
        for i in 0..k {
            solution[(perm[i], q)] = u[i];
        }
    }
    Ok(solution)
}
