//! Per-task stop/ballot policy.
//!
//! Lookahead always uses the average worker, so the belief reached after a
//! sequence of hypothetical ballots depends only on how many zeros and ones
//! were observed. The expectimax tree of depth `L` therefore collapses onto a
//! count lattice with `(L + 1)(L + 2) / 2` nodes, which is evaluated exactly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::belief::{posterior_in_place, BeliefState};
use crate::error::{invalid, Result};
use crate::worker::DifficultyGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    /// Penalty per wrong answer, in the same money unit as pay.
    pub penalty: f64,
    /// Strictly increasing pay levels.
    pub pay_grid: Vec<f64>,
    /// Error parameter of the average worker.
    pub mean_worker: f64,
    pub lookahead_depth: usize,
    /// Trajectory-tree leaves are cut below this path probability.
    pub prob_threshold: f64,
    /// Trajectory-tree depth cap.
    pub max_tree_depth: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            penalty: 200.0,
            pay_grid: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            mean_worker: 1.0,
            lookahead_depth: 6,
            prob_threshold: 1e-9,
            max_tree_depth: 40,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(invalid(format!("penalty must be finite and >= 0, got {}", self.penalty)));
        }
        if self.pay_grid.is_empty() {
            return Err(invalid("pay grid is empty"));
        }
        if self.pay_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(invalid("pay levels must be positive"));
        }
        if self.pay_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("pay grid must be strictly increasing"));
        }
        if !(self.mean_worker >= 0.0 && self.mean_worker.is_finite()) {
            return Err(invalid(format!("mean worker error must be >= 0, got {}", self.mean_worker)));
        }
        if self.lookahead_depth == 0 {
            return Err(invalid("lookahead depth must be at least 1"));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(invalid(format!("probability threshold must lie in (0, 1), got {}", self.prob_threshold)));
        }
        if self.max_tree_depth == 0 {
            return Err(invalid("trajectory depth cap must be at least 1"));
        }
        Ok(())
    }

    pub fn pay(&self, level: usize) -> Result<f64> {
        self.pay_grid
            .get(level)
            .copied()
            .ok_or_else(|| invalid(format!("pay level {level} outside a grid of {}", self.pay_grid.len())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    TakeBallot,
    MarkComplete,
}

/// Stop/ballot policy for a fixed configuration and difficulty grid.
#[derive(Debug, Clone)]
pub struct QualityManager {
    cfg: QualityConfig,
    grid: DifficultyGrid,
    acc: Arc<[f64]>,
}

impl QualityManager {
    pub fn new(cfg: QualityConfig, grid: DifficultyGrid) -> Result<Self> {
        cfg.validate()?;
        let acc = grid.accuracies(cfg.mean_worker).into();
        Ok(Self { cfg, grid, acc })
    }

    pub fn config(&self) -> &QualityConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &DifficultyGrid {
        &self.grid
    }

    pub fn fresh_belief(&self) -> BeliefState {
        BeliefState::from_grid(&self.grid)
    }

    /// Average-worker accuracy at each difficulty bin.
    pub fn mean_accuracies(&self) -> &[f64] {
        &self.acc
    }

    /// Predictive probabilities and posteriors for the two possible
    /// average-worker ballots. Unreachable outcomes keep the parent belief.
    pub fn outcomes(&self, b: &BeliefState, pay: f64) -> [(f64, BeliefState); 2] {
        let p1 = b.ballot_one_probability(&self.acc);
        let child = |o: u8| b.update_with_accuracy(o, &self.acc, pay).unwrap_or_else(|_| b.clone());
        [(1.0 - p1, child(0)), (p1, child(1))]
    }

    /// Depth-limited expectimax over average-worker ballots.
    pub fn decide(&self, b: &BeliefState, pay: f64) -> Decision {
        let stop = b.expected_task_utility(self.cfg.penalty);
        // no ballot sequence can beat a stop value that already exceeds -pay
        if stop >= -pay {
            return Decision::MarkComplete;
        }
        let lattice = Lattice::build(b, &self.acc, self.cfg.penalty, self.cfg.lookahead_depth);
        let values = lattice.horizon_values(pay, self.cfg.lookahead_depth - 1);
        if lattice.ballot_value(0, 0, pay, &values) > stop {
            Decision::TakeBallot
        } else {
            Decision::MarkComplete
        }
    }

    /// One-step expected utility gain of a single average-worker ballot.
    pub fn priority(&self, b: &BeliefState) -> f64 {
        let p = self.cfg.penalty;
        let stop = b.expected_task_utility(p);
        let mut expected = 0.0;
        for (prob, child) in self.outcomes(b, 0.0) {
            if prob > 0.0 {
                expected += prob * child.expected_task_utility(p);
            }
        }
        expected - stop
    }
}

/// Count lattice of average-worker outcomes rooted at one belief.
///
/// Node `(k, j)` is reached after `k` hypothetical ballots of which `j`
/// read 1.
#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    /// Stop value `-P (1 - v)` per node.
    pub stop: Vec<Vec<f64>>,
    /// Probability that the next ballot reads 1, per node.
    pub p_one: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn build(root: &BeliefState, acc: &[f64], penalty: f64, depth: usize) -> Self {
        let mut stop = Vec::with_capacity(depth + 1);
        let mut p_one = Vec::with_capacity(depth + 1);
        let mut level: Vec<Vec<f64>> = vec![root.weights().to_vec()];
        for k in 0..=depth {
            let mut s = Vec::with_capacity(k + 1);
            let mut p = Vec::with_capacity(k + 1);
            for w in &level {
                let (v, p1) = summarize(w, acc);
                s.push(-penalty * (1.0 - v));
                p.push(p1);
            }
            stop.push(s);
            p_one.push(p);
            if k == depth {
                break;
            }
            let mut next = Vec::with_capacity(k + 2);
            for w in &level {
                let mut child = w.clone();
                if posterior_in_place(&mut child, 0, acc).is_err() {
                    child.clone_from(w);
                }
                next.push(child);
            }
            let mut child = level[k].clone();
            if posterior_in_place(&mut child, 1, acc).is_err() {
                child.clone_from(&level[k]);
            }
            next.push(child);
            level = next;
        }
        Self { stop, p_one }
    }

    pub fn depth(&self) -> usize {
        self.stop.len() - 1
    }

    /// `V^(h)` at every node with enough lattice below it: `V^(0)` is the
    /// stop value and `V^(h) = max(stop, -pay + E[V^(h-1)(child)])`.
    /// Entry `[k][j]` exists for `k <= depth - h`.
    pub fn horizon_values(&self, pay: f64, h: usize) -> Vec<Vec<f64>> {
        let depth = self.depth();
        let mut values = self.stop.clone();
        for step in 1..=h {
            let rows = depth + 1 - step;
            let mut next = Vec::with_capacity(rows);
            for k in 0..rows {
                let row: Vec<f64> = (0..=k)
                    .map(|j| self.stop[k][j].max(self.ballot_value(k, j, pay, &values)))
                    .collect();
                next.push(row);
            }
            values = next;
        }
        values
    }

    /// `-pay + E[values(child)]` at node `(k, j)`.
    #[inline]
    pub fn ballot_value(&self, k: usize, j: usize, pay: f64, values: &[Vec<f64>]) -> f64 {
        let p1 = self.p_one[k][j];
        let mut q = -pay;
        if p1 > 0.0 {
            q += p1 * values[k + 1][j + 1];
        }
        if p1 < 1.0 {
            q += (1.0 - p1) * values[k + 1][j];
        }
        q
    }
}

/// Confidence and predictive probability of a 1-ballot for raw weights.
#[inline]
fn summarize(w: &[f64], acc: &[f64]) -> (f64, f64) {
    let n = acc.len();
    let (mut s0, mut s1, mut p1) = (0.0, 0.0, 0.0);
    for i in 0..n {
        s0 += w[i];
        s1 += w[n + i];
        p1 += w[n + i] * acc[i] + w[i] * (1.0 - acc[i]);
    }
    let total = s0 + s1;
    ((s0.max(s1)) / total, (p1 / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worker::DifficultyPrior;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manager(prior: DifficultyPrior) -> QualityManager {
        QualityManager::new(QualityConfig::default(), prior.discretize().unwrap()).unwrap()
    }

    /// Plain recursive expectimax on explicit beliefs.
    fn oracle_value(qm: &QualityManager, b: &BeliefState, pay: f64, h: usize) -> f64 {
        let stop = b.expected_task_utility(qm.config().penalty);
        if h == 0 {
            return stop;
        }
        stop.max(oracle_ballot(qm, b, pay, h))
    }

    fn oracle_ballot(qm: &QualityManager, b: &BeliefState, pay: f64, h: usize) -> f64 {
        let mut q = -pay;
        for (p, child) in qm.outcomes(b, pay) {
            if p > 0.0 {
                q += p * oracle_value(qm, &child, pay, h - 1);
            }
        }
        q
    }

    fn oracle_decide(qm: &QualityManager, b: &BeliefState, pay: f64) -> Decision {
        let stop = b.expected_task_utility(qm.config().penalty);
        if oracle_ballot(qm, b, pay, qm.config().lookahead_depth) > stop {
            Decision::TakeBallot
        } else {
            Decision::MarkComplete
        }
    }

    fn random_belief(qm: &QualityManager, rng: &mut ChaCha8Rng) -> BeliefState {
        let mut b = qm.fresh_belief();
        let k = rng.random_range(0..8);
        for _ in 0..k {
            let g = rng.random_range(0.0..3.0);
            b = b.update(rng.random_range(0..2), g, 0.0).unwrap();
        }
        b
    }

    #[test]
    fn certain_belief_stops() {
        let qm = manager(DifficultyPrior::default());
        let b = BeliefState::with_confidence(qm.grid(), 1.0);
        for &c in &qm.config().pay_grid {
            assert_eq!(qm.decide(&b, c), Decision::MarkComplete);
        }
    }

    #[test]
    fn fresh_uniform_belief_decisions() {
        let qm = manager(DifficultyPrior::uniform(40));
        let b = qm.fresh_belief();
        assert_eq!(qm.decide(&b, 1.0), Decision::TakeBallot);
        // two-level enumeration
        let mut shallow = qm.config().clone();
        shallow.lookahead_depth = 2;
        let qm2 = QualityManager::new(shallow, qm.grid().clone()).unwrap();
        assert!(oracle_ballot(&qm2, &b, 1.0, 2) > -100.0);
        assert_eq!(qm2.decide(&b, 1.0), Decision::TakeBallot);
        for pay in [100.0, 150.0] {
            assert_eq!(qm.decide(&b, pay), Decision::MarkComplete);
            assert_eq!(oracle_decide(&qm, &b, pay), Decision::MarkComplete);
        }
    }

    #[test]
    fn lattice_matches_recursive_expectimax() {
        let qm = manager(DifficultyPrior::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let b = random_belief(&qm, &mut rng);
            for &c in &[1.0, 3.0, 6.0, 20.0] {
                let lattice = Lattice::build(&b, qm.mean_accuracies(), 200.0, 6);
                let values = lattice.horizon_values(c, 5);
                let fast = lattice.ballot_value(0, 0, c, &values);
                let slow = oracle_ballot(&qm, &b, c, 6);
                assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
                assert_eq!(qm.decide(&b, c), oracle_decide(&qm, &b, c));
            }
        }
    }

    #[test]
    fn stopping_is_monotone_in_pay() {
        let qm = manager(DifficultyPrior::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = random_belief(&qm, &mut rng);
            let mut stopped = false;
            for &c in &qm.config().pay_grid {
                let d = qm.decide(&b, c);
                if stopped {
                    assert_eq!(d, Decision::MarkComplete);
                }
                stopped |= d == Decision::MarkComplete;
            }
        }
    }

    #[test]
    fn priority_examples() {
        let qm = manager(DifficultyPrior::uniform(40));
        assert!((qm.priority(&qm.fresh_belief()) - 50.0).abs() < 1e-9);
        let certain = BeliefState::with_confidence(qm.grid(), 1.0);
        assert!(qm.priority(&certain).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            QualityConfig { pay_grid: vec![2.0, 1.0], ..QualityConfig::default() },
            QualityConfig { lookahead_depth: 0, ..QualityConfig::default() },
            QualityConfig { prob_threshold: 1.0, ..QualityConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decide_is_pure(seed in 0u64..10_000, level in 0usize..6) {
            let qm = manager(DifficultyPrior::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_belief(&qm, &mut rng);
            let c = qm.config().pay_grid[level];
            prop_assert_eq!(qm.decide(&b, c), qm.decide(&b.clone(), c));
        }
    }
}
