//! Per-task belief over `(difficulty bin, true answer)`.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::worker::{DifficultyGrid, DifficultyPrior};

/// Joint belief over a task's difficulty bin and true answer.
///
/// Weights are stored answer-major: the first `bins` entries belong to
/// answer 0, the next `bins` to answer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    centers: Arc<[f64]>,
    weights: Vec<f64>,
    ballots_taken: u32,
    cost_spent: f64,
}

impl BeliefState {
    /// Fresh belief: symmetric answer prior times the difficulty prior.
    pub fn from_grid(grid: &DifficultyGrid) -> Self {
        Self::with_confidence(grid, 0.5)
    }

    /// Belief whose answer-1 marginal is `v_one` and whose difficulty
    /// marginal equals the prior.
    pub fn with_confidence(grid: &DifficultyGrid, v_one: f64) -> Self {
        let v_one = v_one.clamp(0.0, 1.0);
        let mut weights = Vec::with_capacity(2 * grid.len());
        weights.extend(grid.mass.iter().map(|m| m * (1.0 - v_one)));
        weights.extend(grid.mass.iter().map(|m| m * v_one));
        Self { centers: grid.centers.clone(), weights, ballots_taken: 0, cost_spent: 0.0 }
    }

    /// Belief built from explicit weights (answer-major layout).
    pub fn from_weights(centers: Arc<[f64]>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != 2 * centers.len() {
            return Err(invalid(format!(
                "expected {} weights for {} difficulty bins, got {}",
                2 * centers.len(),
                centers.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("belief weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("belief weights must sum to 1, got {total}")));
        }
        Ok(Self { centers, weights, ballots_taken: 0, cost_spent: 0.0 })
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &Arc<[f64]> {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, bin: usize, answer: u8) -> f64 {
        self.weights[answer as usize * self.bins() + bin]
    }

    pub fn ballots_taken(&self) -> u32 {
        self.ballots_taken
    }

    pub fn cost_spent(&self) -> f64 {
        self.cost_spent
    }

    /// `(v0, v1)`: probability that the answer is 0 or 1.
    pub fn answer_marginals(&self) -> (f64, f64) {
        let n = self.bins();
        let s0: f64 = self.weights[..n].iter().sum();
        let s1: f64 = self.weights[n..].iter().sum();
        let total = s0 + s1;
        (s0 / total, s1 / total)
    }

    /// Confidence in the most likely answer, in `[0.5, 1]`.
    pub fn confidence(&self) -> f64 {
        let (v0, v1) = self.answer_marginals();
        v0.max(v1)
    }

    /// Most likely answer; `None` on an exact tie.
    pub fn map_answer(&self) -> Option<u8> {
        let (v0, v1) = self.answer_marginals();
        match v1.partial_cmp(&v0) {
            Some(std::cmp::Ordering::Greater) => Some(1),
            Some(std::cmp::Ordering::Less) => Some(0),
            _ => None,
        }
    }

    /// Normalized task quality `2v - 1`.
    pub fn task_quality(&self) -> f64 {
        quality_of(self.confidence())
    }

    /// Expected terminal utility `-P (1 - v)`; spent cost is not included.
    pub fn expected_task_utility(&self, penalty: f64) -> f64 {
        -penalty * (1.0 - self.confidence())
    }

    pub fn difficulty_marginal(&self) -> Vec<f64> {
        let n = self.bins();
        (0..n).map(|i| self.weights[i] + self.weights[n + i]).collect()
    }

    pub fn mean_difficulty(&self) -> f64 {
        self.difficulty_marginal().iter().zip(self.centers.iter()).map(|(m, c)| m * c).sum()
    }

    /// Probability that the next ballot reads 1, given per-bin accuracies.
    pub fn ballot_one_probability(&self, acc: &[f64]) -> f64 {
        let n = self.bins();
        let (zero, one) = self.weights.split_at(n);
        let p: f64 = zero.iter().zip(one).zip(acc).map(|((w0, w1), a)| w1 * a + w0 * (1.0 - a)).sum();
        p.clamp(0.0, 1.0)
    }

    /// Bayesian update for one ballot from a worker with error `gamma`.
    pub fn update(&self, ballot: u8, gamma: f64, pay: f64) -> Result<Self> {
        if ballot > 1 {
            return Err(invalid(format!("ballots are binary, got {ballot}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("worker error rate must be >= 0, got {gamma}")));
        }
        let acc: Vec<f64> = self.centers.iter().map(|&d| crate::worker::raw_accuracy(gamma, d)).collect();
        self.update_with_accuracy(ballot, &acc, pay)
    }

    pub(crate) fn update_with_accuracy(&self, ballot: u8, acc: &[f64], pay: f64) -> Result<Self> {
        let mut weights = self.weights.clone();
        posterior_in_place(&mut weights, ballot, acc)?;
        Ok(Self {
            centers: self.centers.clone(),
            weights,
            ballots_taken: self.ballots_taken + 1,
            cost_spent: self.cost_spent + pay,
        })
    }
}

#[inline]
pub(crate) fn quality_of(confidence: f64) -> f64 {
    2.0 * confidence - 1.0
}

/// Multiplies answer-major weights by the ballot likelihood and normalizes.
pub(crate) fn posterior_in_place(weights: &mut [f64], ballot: u8, acc: &[f64]) -> Result<()> {
    let n = acc.len();
    let (w0, w1) = weights.split_at_mut(n);
    let mut total = 0.0;
    for i in 0..n {
        let (l0, l1) = if ballot == 1 { (1.0 - acc[i], acc[i]) } else { (acc[i], 1.0 - acc[i]) };
        w0[i] *= l0;
        w1[i] *= l1;
        total += w0[i] + w1[i];
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!("ballot {ballot} has zero likelihood under the current belief")));
    }
    let inv = 1.0 / total;
    weights.iter_mut().for_each(|w| *w *= inv);
    Ok(())
}

pub fn init_belief(prior: &DifficultyPrior) -> Result<BeliefState> {
    Ok(BeliefState::from_grid(&prior.discretize()?))
}

pub fn update_belief(b: &BeliefState, ballot: u8, gamma: f64, pay: f64) -> Result<BeliefState> {
    b.update(ballot, gamma, pay)
}

pub fn task_quality(b: &BeliefState) -> f64 {
    b.task_quality()
}

pub fn expected_task_utility(b: &BeliefState, penalty: f64) -> f64 {
    b.expected_task_utility(penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_uniform_belief() {
        let b = init_belief(&DifficultyPrior::uniform(40)).unwrap();
        assert!(b.weights().iter().all(|&w| (w - 1.0 / 80.0).abs() < 1e-15));
        assert_eq!(b.confidence(), 0.5);
        assert_eq!(b.task_quality(), 0.0);
        assert_eq!(b.ballots_taken(), 0);
        assert_eq!(b.cost_spent(), 0.0);
        assert_eq!(b.map_answer(), None);
    }

    #[test]
    fn beta_prior_difficulty_marginal() {
        let prior = DifficultyPrior::beta(2.0, 2.0, 40);
        let grid = prior.discretize().unwrap();
        let b = init_belief(&prior).unwrap();
        for (m, g) in b.difficulty_marginal().iter().zip(grid.mass.iter()) {
            assert!((m - g).abs() < 1e-9);
        }
        assert_eq!(b.task_quality(), 0.0);
    }

    #[test]
    fn one_ballot_from_average_worker() {
        let b = init_belief(&DifficultyPrior::uniform(40)).unwrap();
        let b = b.update(1, 1.0, 2.0).unwrap();
        let (_, v1) = b.answer_marginals();
        assert!((v1 - 0.75).abs() < 1e-12);
        assert_eq!(b.ballots_taken(), 1);
        assert_eq!(b.cost_spent(), 2.0);
        assert!((b.task_quality() - 0.5).abs() < 1e-12);
        assert!((b.expected_task_utility(200.0) + 50.0).abs() < 1e-9);
    }

    #[test]
    fn opposite_ballots_cancel_on_point_difficulty() {
        let centers: Arc<[f64]> = vec![0.3, 0.6].into();
        let b = BeliefState::from_weights(centers, vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let b = b.update(1, 1.3, 1.0).unwrap().update(0, 1.3, 1.0).unwrap();
        let (v0, v1) = b.answer_marginals();
        assert!((v0 - 0.5).abs() < 1e-12 && (v1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn certain_belief_stays_certain() {
        let grid = DifficultyPrior::uniform(10).discretize().unwrap();
        let b = BeliefState::with_confidence(&grid, 1.0);
        for ballot in [0, 1, 0, 0] {
            let next = b.update(ballot, 2.0, 1.0).unwrap();
            assert_eq!(next.answer_marginals().1, 1.0);
        }
    }

    #[test]
    fn utility_examples() {
        let grid = DifficultyPrior::uniform(10).discretize().unwrap();
        assert_eq!(BeliefState::with_confidence(&grid, 1.0).expected_task_utility(200.0), 0.0);
        assert_eq!(BeliefState::with_confidence(&grid, 0.5).expected_task_utility(200.0), -100.0);
        let b = BeliefState::with_confidence(&grid, 0.75);
        assert!((b.expected_task_utility(200.0) + 50.0).abs() < 1e-9);
        assert!((b.task_quality() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_likelihood_is_degenerate() {
        let centers: Arc<[f64]> = vec![0.5].into();
        let b = BeliefState::from_weights(centers, vec![0.0, 1.0]).unwrap();
        // an error-free worker cannot report 0 when the answer is surely 1
        assert!(matches!(b.update(0, 0.0, 1.0), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn updates_stay_normalized_and_commute(
            ballots in proptest::collection::vec((0u8..2, 0.0f64..4.0), 1..12),
            seed in 0u64..1000,
        ) {
            let grid = DifficultyPrior::beta(2.0, 2.0, 20).discretize().unwrap();
            let start = BeliefState::from_grid(&grid);
            let mut forward = start.clone();
            for &(o, g) in &ballots {
                forward = forward.update(o, g, 1.0).unwrap();
                prop_assert!((forward.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let mut shuffled = ballots.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let mut backward = start;
            for &(o, g) in &shuffled {
                backward = backward.update(o, g, 1.0).unwrap();
            }
            for (a, b) in forward.weights().iter().zip(backward.weights()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!(forward.confidence() >= 0.5 && forward.confidence() <= 1.0);
        }
    }
}
