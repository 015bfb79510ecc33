//! Batch-quality histograms recovered from `(nu_bar, theta)` by fitting a
//! one-parameter Beta family with mean `nu_bar`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{invalid, Result};
use crate::frontier::ThetaTable;

/// Beta distribution with parameters `(lambda * nu_bar, lambda * (1 - nu_bar))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub lambda: f64,
    pub nu_bar: f64,
    /// `|theta_hat(lambda) - theta|` at the chosen lambda.
    pub residual: f64,
    pub feasible: bool,
}

impl BetaFit {
    pub fn alpha(&self) -> f64 {
        self.lambda * self.nu_bar
    }

    pub fn beta(&self) -> f64 {
        self.lambda * (1.0 - self.nu_bar)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        beta_cdf(self.alpha(), self.beta(), x)
    }
}

/// Linear lambda search grid `min, min + step, ..., max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        Self { min: 0.1, max: 200.0, step: 0.1 }
    }
}

impl LambdaSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.step > 0.0 && self.max >= self.min) {
            return Err(invalid(format!("bad lambda search range {self:?}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| self.min + k as f64 * self.step).collect()
    }
}

#[inline]
fn beta_cdf(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

/// Keeps the Beta parameters away from zero.
pub fn clamp_nu_bar(nu_bar: f64, n: usize) -> f64 {
    let eps = 0.5 / n.max(1) as f64;
    nu_bar.clamp(eps, 1.0 - eps)
}

/// CDF of the fitted Beta at the table's grid points `i / G`, `i = 0..=G`.
fn grid_cdf(lambda: f64, nu_bar: f64, resolution: usize) -> Vec<f64> {
    let (a, b) = (lambda * nu_bar, lambda * (1.0 - nu_bar));
    (0..=resolution).map(|i| beta_cdf(a, b, i as f64 / resolution as f64)).collect()
}

fn integrate(column: &[f64], cdf: &[f64]) -> f64 {
    column.iter().zip(cdf.windows(2)).map(|(t, w)| t * (w[1] - w[0])).sum()
}

/// `n * integral of theta~(nu, c) against the Beta density`, exact for the
/// piecewise-constant table. `nu_bar` at 0 or 1 is a point mass there.
pub fn expected_theta(lambda: f64, nu_bar: f64, pay_level: usize, table: &ThetaTable, n: usize) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&nu_bar) {
        return Err(invalid(format!("nu_bar must lie in [0, 1], got {nu_bar}")));
    }
    if pay_level >= table.pay_levels() {
        return Err(invalid(format!("pay level {pay_level} outside the table")));
    }
    if nu_bar == 0.0 || nu_bar == 1.0 {
        return Ok(n as f64 * table.lookup(nu_bar, pay_level));
    }
    let cdf = grid_cdf(lambda, nu_bar, table.resolution());
    Ok(n as f64 * integrate(table.column(pay_level), &cdf))
}

fn best_lambda(lambdas: &[f64], theta_hat: impl Fn(usize) -> f64, theta: f64) -> (f64, f64) {
    let mut best = (lambdas[0], f64::INFINITY);
    for (k, &l) in lambdas.iter().enumerate() {
        let r = (theta_hat(k) - theta).abs();
        if r < best.1 {
            best = (l, r);
        }
    }
    best
}

/// Linear search for the lambda whose `theta_hat` is closest to `theta`.
/// Ties go to the smallest lambda. The fit is infeasible when the residual
/// exceeds `0.5 * delta_theta`.
pub fn fit_lambda(
    nu_bar: f64,
    theta: f64,
    pay_level: usize,
    table: &ThetaTable,
    n: usize,
    search: &LambdaSearch,
    delta_theta: f64,
) -> Result<BetaFit> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(invalid(format!("theta must be finite and >= 0, got {theta}")));
    }
    search.validate()?;
    let nu_bar = clamp_nu_bar(nu_bar, n);
    let lambdas = search.grid();
    let hats: Vec<f64> = lambdas
        .iter()
        .map(|&l| expected_theta(l, nu_bar, pay_level, table, n))
        .collect::<Result<_>>()?;
    let (lambda, residual) = best_lambda(&lambdas, |k| hats[k], theta);
    Ok(BetaFit { lambda, nu_bar, residual, feasible: residual <= 0.5 * delta_theta })
}

/// Task counts per equal-width quality bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchHistogram {
    pub counts: Vec<u64>,
}

impl BatchHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.width()
    }

    /// Mean quality with every task placed at its bin center.
    pub fn mean(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.counts.iter().enumerate().map(|(i, &c)| c as f64 * self.center(i)).sum::<f64>() / n as f64
    }

    /// One quality value per task, in bin order.
    pub fn task_qualities(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total() as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(self.center(i), c as usize));
        }
        out
    }
}

/// Largest-remainder apportionment of `n` over `weights`; ties in the
/// remainder go to the lower index.
pub fn apportion(weights: &[f64], n: u64) -> Vec<u64> {
    let total: f64 = weights.iter().sum();
    if n == 0 || weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w.max(0.0) / total).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

pub fn reconstruct_histogram(fit: &BetaFit, n: u64, bins: usize) -> Result<BatchHistogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let masses: Vec<f64> = (0..bins).map(|i| fit.cdf((i + 1) as f64 / bins as f64) - fit.cdf(i as f64 / bins as f64)).collect();
    Ok(BatchHistogram { counts: apportion(&masses, n) })
}

/// Per-task `theta_hat` for every `(pay, nu_bar level, lambda)` on fixed
/// grids, so repeated fits are a scan over a precomputed row.
#[derive(Debug, Clone)]
pub struct ThetaCurves {
    pub lambdas: Vec<f64>,
    pub nu_levels: usize,
    pub n: usize,
    /// `[pay][nu_idx][lambda_idx]`, flattened.
    per_task: Vec<f64>,
}

impl ThetaCurves {
    pub fn build(table: &ThetaTable, nu_levels: usize, n: usize, search: &LambdaSearch) -> Result<Self> {
        search.validate()?;
        if nu_levels == 0 {
            return Err(invalid("nu_bar grid needs at least one level"));
        }
        let lambdas = search.grid();
        let g = table.resolution();
        let pays = table.pay_levels();
        let nl = lambdas.len();
        // cdf rows do not depend on pay
        let rows: Vec<Vec<f64>> = (0..=nu_levels)
            .into_par_iter()
            .map(|k| {
                let nu_bar = clamp_nu_bar(k as f64 / nu_levels as f64, n);
                let mut row = vec![0.0; pays * nl];
                for (li, &l) in lambdas.iter().enumerate() {
                    let cdf = grid_cdf(l, nu_bar, g);
                    for c in 0..pays {
                        row[c * nl + li] = integrate(table.column(c), &cdf);
                    }
                }
                row
            })
            .collect();
        let mut per_task = vec![0.0; pays * (nu_levels + 1) * nl];
        for (k, row) in rows.iter().enumerate() {
            for c in 0..pays {
                let dst = (c * (nu_levels + 1) + k) * nl;
                per_task[dst..dst + nl].copy_from_slice(&row[c * nl..(c + 1) * nl]);
            }
        }
        Ok(Self { lambdas, nu_levels, n, per_task })
    }

    fn row(&self, pay_level: usize, nu_idx: usize) -> &[f64] {
        let nl = self.lambdas.len();
        let start = (pay_level * (self.nu_levels + 1) + nu_idx) * nl;
        &self.per_task[start..start + nl]
    }

    pub fn nu_bar(&self, nu_idx: usize) -> f64 {
        clamp_nu_bar(nu_idx as f64 / self.nu_levels as f64, self.n)
    }

    /// Batch-level `theta_hat` for one lambda index.
    pub fn theta_hat(&self, pay_level: usize, nu_idx: usize, lambda_idx: usize) -> f64 {
        self.n as f64 * self.row(pay_level, nu_idx)[lambda_idx]
    }

    /// `(min, max)` of batch-level `theta_hat` over lambda.
    pub fn theta_range(&self, pay_level: usize, nu_idx: usize) -> (f64, f64) {
        let row = self.row(pay_level, nu_idx);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.n as f64 * lo, self.n as f64 * hi)
    }

    pub fn fit(&self, pay_level: usize, nu_idx: usize, theta: f64, delta_theta: f64) -> BetaFit {
        let row = self.row(pay_level, nu_idx);
        let n = self.n as f64;
        let (lambda, residual) = best_lambda(&self.lambdas, |k| n * row[k], theta);
        BetaFit { lambda, nu_bar: self.nu_bar(nu_idx), residual, feasible: residual <= 0.5 * delta_theta }
    }
}
