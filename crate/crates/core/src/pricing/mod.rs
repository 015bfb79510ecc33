//! Pay-setting MDP over aggregate batch state `(nu_bar, theta, tau, c)`.
//!
//! `nu_bar` lives on `nu_levels + 1` points in `[0, 1]`, `theta` on buckets
//! of width `delta_theta`, `tau` on whole epochs and `c` on the pay grid.
//! Pay changes take no time and shift `theta` by the difference of the
//! start-state `theta` at the two pays. No-change advances one epoch during
//! which a Poisson number of ballots arrives.

mod completion;
mod gao;
mod nucache;
mod plan;
mod solver;

pub use completion::{Bucket, CompletionModel};
pub use gao::{GaoModel, GaoPlan, GaoState};
pub use nucache::{estimate_nu_transition, reference_theta, NuTransitionCache};
pub use plan::{Plan, PlanDiagnostics};
pub use solver::{solve, SolvedPolicy, StageModel};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quality::QualityConfig;
use crate::reconstruct::LambdaSearch;
use crate::worker::{DifficultyPrior, WorkerPool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    NoChange,
    Terminate,
}

impl Action {
    pub(crate) fn code(self) -> u8 {
        match self {
            Action::NoChange => 0,
            Action::Terminate => 1,
            Action::Up => 2,
            Action::Down => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Action::NoChange,
            1 => Action::Terminate,
            2 => Action::Up,
            3 => Action::Down,
            _ => return Err(Error::Cache(format!("unknown action code {code}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::NoChange => "no_change",
            Action::Terminate => "terminate",
        }
    }
}

/// Everything the planner needs; stored in the policy cache manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_tasks: usize,
    pub quality: QualityConfig,
    pub prior: DifficultyPrior,
    /// Workers answering simulated ballots during transition estimation.
    pub pool: WorkerPool,
    /// Expected ballots per hour at each pay level.
    pub rates_per_hour: Vec<f64>,
    pub epoch_minutes: f64,
    pub max_epochs: usize,
    pub nu_levels: usize,
    pub delta_theta: f64,
    pub theta_resolution: usize,
    pub switch_cost: f64,
    /// Poisson tail mass dropped on each side is below half of this.
    pub truncation: f64,
    pub rollouts: usize,
    pub reference_rollouts: usize,
    pub lambda_search: LambdaSearch,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        let n = 500;
        Self {
            n_tasks: n,
            quality: QualityConfig::default(),
            prior: DifficultyPrior::default(),
            pool: WorkerPool::default(),
            rates_per_hour: default_rates(n, 6),
            epoch_minutes: 15.0,
            max_epochs: 24,
            nu_levels: 100,
            delta_theta: 10.0,
            theta_resolution: 40,
            switch_cost: 0.1,
            truncation: 1e-4,
            rollouts: 32,
            reference_rollouts: 16,
            lambda_search: LambdaSearch::default(),
            tolerance: 1e-6,
            max_sweeps: 10_000,
            seed: 0x5eed,
        }
    }
}

/// About one ballot per task per hour at the lowest pay, rising linearly to
/// twice that at the highest.
pub fn default_rates(n_tasks: usize, levels: usize) -> Vec<f64> {
    (0..levels)
        .map(|i| {
            let step = if levels > 1 { i as f64 / (levels - 1) as f64 } else { 0.0 };
            n_tasks as f64 * (1.0 + step)
        })
        .collect()
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        self.quality.validate()?;
        self.prior.validate()?;
        self.pool.validate()?;
        self.lambda_search.validate()?;
        if self.n_tasks == 0 {
            return Err(invalid("batch must contain at least one task"));
        }
        if self.rates_per_hour.len() != self.quality.pay_grid.len() {
            return Err(invalid(format!(
                "{} arrival rates for {} pay levels",
                self.rates_per_hour.len(),
                self.quality.pay_grid.len()
            )));
        }
        if self.rates_per_hour.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(invalid("arrival rates must be finite and >= 0"));
        }
        if !(self.epoch_minutes > 0.0) || self.max_epochs == 0 {
            return Err(invalid("epochs must have positive length and count"));
        }
        if self.nu_levels == 0 || !(self.delta_theta > 0.0) {
            return Err(invalid("nu_bar levels and theta bucket width must be positive"));
        }
        if !(self.switch_cost >= 0.0) {
            return Err(invalid("switch cost must be >= 0"));
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(invalid("truncation mass must lie in (0, 1)"));
        }
        if self.rollouts == 0 || self.reference_rollouts == 0 {
            return Err(invalid("rollout counts must be positive"));
        }
        if !(self.tolerance > 0.0) || self.max_sweeps == 0 {
            return Err(invalid("solver tolerance and sweep cap must be positive"));
        }
        Ok(())
    }

    pub fn pay_levels(&self) -> usize {
        self.quality.pay_grid.len()
    }

    /// Expected arrivals per epoch at each pay level.
    pub fn rates_per_epoch(&self) -> Vec<f64> {
        self.rates_per_hour.iter().map(|r| r * self.epoch_minutes / 60.0).collect()
    }
}

/// Discretized aggregate state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregateState {
    pub nu_bar_idx: usize,
    pub theta_idx: usize,
    pub tau_idx: usize,
    pub pay_idx: usize,
}

/// Grid geometry shared by the planner and the runtime controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateGrid {
    pub nu_levels: usize,
    pub theta_levels: usize,
    pub delta_theta: f64,
    pub max_epochs: usize,
    pub pay_levels: usize,
}

impl AggregateGrid {
    pub fn nu_bar(&self, idx: usize) -> f64 {
        idx as f64 / self.nu_levels as f64
    }

    pub fn theta(&self, idx: usize) -> f64 {
        idx as f64 * self.delta_theta
    }

    pub fn snap_nu(&self, nu_bar: f64) -> usize {
        ((nu_bar.clamp(0.0, 1.0) * self.nu_levels as f64).round() as usize).min(self.nu_levels)
    }

    pub fn snap_theta(&self, theta: f64) -> usize {
        ((theta.max(0.0) / self.delta_theta).round() as usize).min(self.theta_levels - 1)
    }

    /// States per pay level within one epoch layer.
    pub fn states_per_pay(&self) -> usize {
        (self.nu_levels + 1) * self.theta_levels
    }

    pub fn index(&self, nu_idx: usize, theta_idx: usize) -> usize {
        nu_idx * self.theta_levels + theta_idx
    }

    pub fn split(&self, s: usize) -> (usize, usize) {
        (s / self.theta_levels, s % self.theta_levels)
    }

    pub fn contains(&self, s: &AggregateState) -> bool {
        s.nu_bar_idx <= self.nu_levels && s.theta_idx < self.theta_levels && s.tau_idx <= self.max_epochs && s.pay_idx < self.pay_levels
    }
}

/// `n * (-0.5 P (1 - nu_bar))`.
pub fn terminal_reward(nu_bar: f64, penalty: f64, n: usize) -> f64 {
    n as f64 * (-0.5 * penalty * (1.0 - nu_bar))
}

/// Start-state `theta` per pay level, in buckets.
pub fn theta0_buckets(theta0: &[f64], delta_theta: f64) -> Vec<usize> {
    theta0.iter().map(|t| (t / delta_theta).round().max(0.0) as usize).collect()
}

/// Bucket shift of `theta` when moving between pay levels.
pub(crate) fn shifted_theta(theta_idx: usize, from: usize, to: usize, theta0_idx: &[usize], theta_levels: usize) -> usize {
    let t = theta_idx as i64 + theta0_idx[to] as i64 - theta0_idx[from] as i64;
    t.clamp(0, theta_levels as i64 - 1) as usize
}

/// Applies Up or Down. `theta` moves by the start-`theta` difference of the
/// two pay levels (in buckets) and is clamped to the grid. The reward is
/// `-switch_cost`.
pub fn pay_change_transition(
    s: &AggregateState,
    action: Action,
    theta0_idx: &[usize],
    grid: &AggregateGrid,
    switch_cost: f64,
) -> Result<(AggregateState, f64)> {
    let target = match action {
        Action::Up if s.pay_idx + 1 < grid.pay_levels => s.pay_idx + 1,
        Action::Down if s.pay_idx > 0 => s.pay_idx - 1,
        Action::Up | Action::Down => {
            return Err(Error::InvalidAction(format!("{} unavailable at pay level {}", action.name(), s.pay_idx)));
        }
        _ => return Err(Error::InvalidAction(format!("{} is not a pay change", action.name()))),
    };
    let theta_idx = shifted_theta(s.theta_idx, s.pay_idx, target, theta0_idx, grid.theta_levels);
    Ok((AggregateState { pay_idx: target, theta_idx, ..*s }, -switch_cost))
}

/// One outcome of the no-change action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoChangeOutcome {
    pub next: AggregateState,
    pub probability: f64,
    /// Pay for the arrivals, rounded to whole `theta` buckets.
    pub reward: f64,
    /// Exact expected pay within the arrival bucket, used by the solver.
    pub expected_reward: f64,
}

/// Enumerates no-change outcomes. Arrivals beyond the remaining `theta` are
/// not paid and do not move `nu_bar`.
pub fn no_change_transition(
    s: &AggregateState,
    model: &CompletionModel,
    cache: &NuTransitionCache,
    grid: &AggregateGrid,
    pay: f64,
) -> Result<Vec<NoChangeOutcome>> {
    if s.tau_idx >= grid.max_epochs {
        return Err(Error::InvalidAction("no-change at the deadline".into()));
    }
    let mut out = Vec::new();
    for b in model.buckets(s.pay_idx) {
        let j = b.bucket.min(s.theta_idx);
        let theta_idx = s.theta_idx.saturating_sub(b.bucket);
        let paid = b.mean.min(grid.theta(s.theta_idx));
        let rounded = (paid / grid.delta_theta).round() * grid.delta_theta;
        for (nu_idx, w) in cache.distribution(s.pay_idx, s.nu_bar_idx, j) {
            out.push(NoChangeOutcome {
                next: AggregateState { nu_bar_idx: nu_idx, theta_idx, tau_idx: s.tau_idx + 1, pay_idx: s.pay_idx },
                probability: b.probability * w,
                reward: -pay * rounded,
                expected_reward: -pay * paid,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AggregateGrid {
        AggregateGrid { nu_levels: 100, theta_levels: 200, delta_theta: 10.0, max_epochs: 24, pay_levels: 2 }
    }

    #[test]
    fn pay_change_examples() {
        let g = grid();
        let theta0 = theta0_buckets(&[1000.0, 800.0], 10.0);
        let s = AggregateState { nu_bar_idx: 10, theta_idx: 60, tau_idx: 3, pay_idx: 0 };
        let (up, r) = pay_change_transition(&s, Action::Up, &theta0, &g, 0.1).unwrap();
        assert_eq!(r, -0.1);
        assert_eq!(g.theta(up.theta_idx), 400.0);
        assert_eq!((up.nu_bar_idx, up.tau_idx, up.pay_idx), (10, 3, 1));
        let (back, _) = pay_change_transition(&up, Action::Down, &theta0, &g, 0.1).unwrap();
        assert_eq!(back, s);
        let flat = theta0_buckets(&[700.0, 700.0], 10.0);
        assert_eq!(pay_change_transition(&s, Action::Up, &flat, &g, 0.1).unwrap().0.theta_idx, 60);
        assert!(matches!(pay_change_transition(&s, Action::Down, &theta0, &g, 0.1), Err(Error::InvalidAction(_))));
        assert!(matches!(pay_change_transition(&up, Action::Up, &theta0, &g, 0.1), Err(Error::InvalidAction(_))));
    }

    #[test]
    fn terminal_reward_examples() {
        assert_eq!(terminal_reward(1.0, 200.0, 500), 0.0);
        assert_eq!(terminal_reward(0.0, 200.0, 500), -50_000.0);
        assert_eq!(terminal_reward(0.5, 200.0, 1), -50.0);
    }

    #[test]
    fn no_change_examples() {
        let g = grid();
        let cache = NuTransitionCache::identity(100, 2, 30);
        let quiet = CompletionModel::new(&[0.0, 0.0], 10.0, 1e-4).unwrap();
        let s = AggregateState { nu_bar_idx: 40, theta_idx: 50, tau_idx: 0, pay_idx: 0 };
        let out = no_change_transition(&s, &quiet, &cache, &g, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].next, AggregateState { tau_idx: 1, ..s });
        assert_eq!((out[0].probability, out[0].reward), (1.0, 0.0));

        let busy = CompletionModel::new(&[150.0, 150.0], 10.0, 1e-4).unwrap();
        let small = AggregateState { theta_idx: 3, ..s };
        let out = no_change_transition(&small, &busy, &cache, &g, 2.0).unwrap();
        let total: f64 = out.iter().map(|o| o.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(out.iter().all(|o| o.next.theta_idx == 0 && o.expected_reward == -60.0));
        let last = AggregateState { tau_idx: 24, ..s };
        assert!(no_change_transition(&last, &busy, &cache, &g, 1.0).is_err());
    }

    #[test]
    fn default_rates_double() {
        let r = default_rates(500, 6);
        assert_eq!(r[0], 500.0);
        assert_eq!(r[5], 1000.0);
        assert!(PlanConfig::default().validate().is_ok());
    }
}
