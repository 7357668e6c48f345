//! Cyclic coordinate descent for
//! `min_b ||y - sum_i b_i z_i||^2 + lambda ||b||_1`
//! with some coordinates frozen at zero.

use std::sync::OnceLock;

use crate::error::{PcpError, Result};

/// Per-channel response columns `z_i` and the regression target `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
    target: Vec<f64>,
    /// `(Z^T Z, Z^T y, y^T y)`, built on first use.
    gram: OnceLock<(Vec<f64>, Vec<f64>, f64)>,
}

impl DesignMatrix {
    pub fn new(columns: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let rows = target.len();
        if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != rows) {
            return Err(PcpError::Shape(format!(
                "design column {i} has length {} but the target has {rows}",
                c.len()
            )));
        }
        Ok(DesignMatrix {
            rows,
            columns,
            target,
            gram: OnceLock::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// `max_i |2 z_i^T y|` over the free coordinates: the smallest penalty at
    /// which the all-zero vector is optimal.
    pub fn lambda_max(&self, frozen: &[bool]) -> f64 {
        self.columns
            .iter()
            .zip(frozen)
            .filter(|(_, &f)| !f)
            .map(|(c, _)| 2.0 * dot(c, &self.target).abs())
            .fold(0.0, f64::max)
    }

    fn gram(&self) -> &(Vec<f64>, Vec<f64>, f64) {
        self.gram.get_or_init(|| self.compute_gram())
    }

    fn compute_gram(&self) -> (Vec<f64>, Vec<f64>, f64) {
        let c = self.columns.len();
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in i..c {
                let v = dot(&self.columns[i], &self.columns[j]);
                g[i * c + j] = v;
                g[j * c + i] = v;
            }
        }
        let q = self.columns.iter().map(|z| dot(z, &self.target)).collect();
        (g, q, dot(&self.target, &self.target))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LassoSettings {
    /// Stop once the largest coordinate change of a sweep falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for LassoSettings {
    fn default() -> Self {
        LassoSettings {
            tolerance: 1e-8,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each completed sweep.
    pub objective: Vec<f64>,
}

/// Objective value `||y - Z b||^2 + lambda ||b||_1`, computed from residuals.
pub fn lasso_objective(design: &DesignMatrix, beta: &[f64], lambda: f64) -> f64 {
    let mut resid = design.target.clone();
    for (z, &b) in design.columns.iter().zip(beta) {
        if b != 0.0 {
            for (r, zi) in resid.iter_mut().zip(z) {
                *r -= b * zi;
            }
        }
    }
    dot(&resid, &resid) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Solves the LASSO with default settings and returns the coefficients.
pub fn lasso_cd(design: &DesignMatrix, lambda: f64, frozen_zeros: &[bool]) -> Result<Vec<f64>> {
    lasso_cd_with(design, lambda, frozen_zeros, LassoSettings::default()).map(|fit| fit.beta)
}

pub fn lasso_cd_with(
    design: &DesignMatrix,
    lambda: f64,
    frozen_zeros: &[bool],
    settings: LassoSettings,
) -> Result<LassoFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(PcpError::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let c = design.num_columns();
    if frozen_zeros.len() != c {
        return Err(PcpError::Shape(format!(
            "frozen mask has {} entries for {c} design columns",
            frozen_zeros.len()
        )));
    }

    let (g, q, yy) = design.gram();
    let yy = *yy;
    let mut beta = vec![0.0f64; c];
    // g_beta = G beta, kept in sync with every coordinate update.
    let mut g_beta = vec![0.0f64; c];
    let objective_of = |beta: &[f64], g_beta: &[f64]| {
        let quad: f64 = beta.iter().zip(g_beta).map(|(b, gb)| b * gb).sum();
        let lin: f64 = beta.iter().zip(q.iter()).map(|(b, qi)| b * qi).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        yy - 2.0 * lin + quad + lambda * l1
    };

    let mut objective = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < settings.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for i in 0..c {
            let gii = g[i * c + i];
            if frozen_zeros[i] || gii <= 0.0 {
                continue;
            }
            let old = beta[i];
            let rho = q[i] - g_beta[i] + gii * old;
            let new = soft_threshold(rho, lambda / 2.0) / gii;
            let delta = new - old;
            if delta != 0.0 {
                beta[i] = new;
                for (j, gb) in g_beta.iter_mut().enumerate() {
                    *gb += delta * g[j * c + i];
                }
                max_change = max_change.max(delta.abs());
            }
        }
        objective.push(objective_of(&beta, &g_beta));
        if max_change < settings.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        beta,
        sweeps,
        converged,
        objective,
    })
}
