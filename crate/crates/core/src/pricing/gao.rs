//! Fixed-quota baseline: every task gets `r` ballots round-robin, and a pay
//! MDP over (remaining ballots, epoch, pay) decides the price. The same
//! solver is used with `theta` reinterpreted as a ballot counter.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quality::QualityManager;

use super::solver::{solve, SolvedPolicy, StageModel};
use super::{Action, CompletionModel, PlanConfig};

/// `E_k`: expected `1 - v` of a fresh task after `k` average-worker ballots,
/// for `k = 0..=r + 1`.
pub(crate) fn expected_error_by_count(qm: &QualityManager, r: usize) -> Vec<f64> {
    let acc = qm.mean_accuracies();
    let mut layer = vec![(qm.fresh_belief(), 1.0)];
    let mut out = Vec::with_capacity(r + 2);
    for _ in 0..=r + 1 {
        out.push(layer.iter().map(|(b, m)| m * (1.0 - b.confidence())).sum());
        let mut next: Vec<(Option<_>, f64)> = vec![(None, 0.0); layer.len() + 1];
        for (j, (b, m)) in layer.iter().enumerate() {
            let p1 = b.ballot_one_probability(acc);
            for (o, slot, p) in [(0u8, j, 1.0 - p1), (1u8, j + 1, p1)] {
                if next[slot].0.is_none() {
                    next[slot].0 = Some(b.update_with_accuracy(o, acc, 0.0).unwrap_or_else(|_| b.clone()));
                }
                next[slot].1 += m * p;
            }
        }
        layer = next.into_iter().map(|(b, m)| (b.expect("every slot has a parent"), m)).collect();
    }
    out
}

/// Stage model over remaining-ballot buckets `0..=T`.
#[derive(Debug, Clone)]
pub struct GaoModel {
    n: usize,
    r: usize,
    penalty: f64,
    delta_theta: f64,
    pay_grid: Vec<f64>,
    completion: CompletionModel,
    errors: Vec<f64>,
    buckets: usize,
}

impl GaoModel {
    pub fn new(cfg: &PlanConfig, qm: &QualityManager, r: usize) -> Result<Self> {
        cfg.validate()?;
        if r == 0 {
            return Err(invalid("the ballot quota must be at least 1"));
        }
        let completion = CompletionModel::new(&cfg.rates_per_epoch(), cfg.delta_theta, cfg.truncation)?;
        let buckets = ((cfg.n_tasks * r) as f64 / cfg.delta_theta).ceil() as usize;
        Ok(Self {
            n: cfg.n_tasks,
            r,
            penalty: cfg.quality.penalty,
            delta_theta: cfg.delta_theta,
            pay_grid: cfg.quality.pay_grid.clone(),
            completion,
            errors: expected_error_by_count(qm, r),
            buckets,
        })
    }

    pub fn quota(&self) -> usize {
        self.r
    }

    /// Ballots still to be bought in bucket `t`.
    pub fn remaining(&self, t: usize) -> f64 {
        (t as f64 * self.delta_theta).min((self.n * self.r) as f64)
    }

    pub fn bucket_of(&self, remaining: f64) -> usize {
        ((remaining.max(0.0) / self.delta_theta).round() as usize).min(self.buckets)
    }

    /// `-P * sum_q E[1 - v_q]` with ballots spread round-robin.
    pub fn terminal_for(&self, remaining: f64) -> f64 {
        let received = ((self.n * self.r) as f64 - remaining).max(0.0);
        let per_task = received / self.n as f64;
        let a = (per_task.floor() as usize).min(self.r);
        let f = (per_task - a as f64).clamp(0.0, 1.0);
        let e = (1.0 - f) * self.errors[a] + f * self.errors[a + 1];
        -self.penalty * self.n as f64 * e
    }
}

impl StageModel for GaoModel {
    fn pay_levels(&self) -> usize {
        self.pay_grid.len()
    }

    fn states(&self) -> usize {
        self.buckets + 1
    }

    fn terminal(&self, s: usize) -> f64 {
        self.terminal_for(self.remaining(s))
    }

    fn shift(&self, s: usize, _: usize, _: usize) -> usize {
        s
    }

    fn no_change(&self, s: usize, pay_level: usize, next: &[f64]) -> f64 {
        let left = self.remaining(s);
        self.completion
            .buckets(pay_level)
            .iter()
            .map(|b| b.probability * (-self.pay_grid[pay_level] * b.mean.min(left) + next[s.saturating_sub(b.bucket)]))
            .sum()
    }
}

/// Solved fixed-quota pay policy.
#[derive(Debug, Clone)]
pub struct GaoPlan {
    model: GaoModel,
    policy: SolvedPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaoState {
    pub remaining_idx: usize,
    pub tau_idx: usize,
    pub pay_idx: usize,
}

impl GaoPlan {
    pub fn build(cfg: &PlanConfig, qm: &QualityManager, r: usize) -> Result<Self> {
        let model = GaoModel::new(cfg, qm, r)?;
        let policy = solve(&model, cfg.max_epochs, cfg.switch_cost, cfg.tolerance, cfg.max_sweeps)?;
        Ok(Self { model, policy })
    }

    pub fn model(&self) -> &GaoModel {
        &self.model
    }

    pub fn policy(&self) -> &SolvedPolicy {
        &self.policy
    }

    pub fn state(&self, remaining: f64, tau_idx: usize, pay_idx: usize) -> GaoState {
        GaoState { remaining_idx: self.model.bucket_of(remaining), tau_idx, pay_idx }
    }

    pub fn action(&self, s: &GaoState) -> Action {
        self.policy.action(s.tau_idx, s.pay_idx, s.remaining_idx)
    }

    /// Action at a state reached by a pay change in the current epoch.
    pub fn next_in_chain(&self, s: &GaoState, previous: Action) -> Action {
        self.policy.next_in_chain(s.tau_idx, s.pay_idx, s.remaining_idx, previous)
    }

    pub fn value(&self, s: &GaoState) -> f64 {
        self.policy.value(s.tau_idx, s.pay_idx, s.remaining_idx)
    }
}
