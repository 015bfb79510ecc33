//! Routing of arriving workers to light tasks.

use std::cmp::Reverse;
use std::collections::BTreeSet;

use ordered_float::OrderedFloat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::quality::{Decision, QualityManager};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectorPolicy {
    /// Largest one-ballot expected utility gain; ties go to the lowest id.
    Greedy,
    /// Uniform over light tasks.
    Random,
    /// Every light task once in id order, then uniform.
    RandomRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskPriority {
    pub task_id: u32,
    pub phi: f64,
}

/// Incremental selector state over tasks `0..n`.
///
/// Callers report each task's status through [`TaskSelector::set`]:
/// `Some(phi)` marks it light with that priority, `None` marks it dark.
#[derive(Debug, Clone)]
pub struct TaskSelector {
    policy: SelectorPolicy,
    phi: Vec<Option<f64>>,
    queue: BTreeSet<(OrderedFloat<f64>, Reverse<u32>)>,
    light: Vec<u32>,
    slot: Vec<Option<usize>>,
    cursor: usize,
}

impl TaskSelector {
    pub fn new(policy: SelectorPolicy, n_tasks: usize) -> Self {
        Self {
            policy,
            phi: vec![None; n_tasks],
            queue: BTreeSet::new(),
            light: Vec::new(),
            slot: vec![None; n_tasks],
            cursor: 0,
        }
    }

    pub fn policy(&self) -> SelectorPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn is_light(&self, id: u32) -> bool {
        self.phi[id as usize].is_some()
    }

    pub fn light_count(&self) -> usize {
        self.light.len()
    }

    pub fn set(&mut self, id: u32, phi: Option<f64>) {
        let i = id as usize;
        if let Some(old) = self.phi[i] {
            self.queue.remove(&(OrderedFloat(old), Reverse(id)));
        }
        if let Some(p) = phi {
            self.queue.insert((OrderedFloat(p), Reverse(id)));
        }
        match (self.slot[i], phi.is_some()) {
            (None, true) => {
                self.slot[i] = Some(self.light.len());
                self.light.push(id);
            }
            (Some(pos), false) => {
                self.light.swap_remove(pos);
                if let Some(&moved) = self.light.get(pos) {
                    self.slot[moved as usize] = Some(pos);
                }
                self.slot[i] = None;
            }
            _ => {}
        }
        self.phi[i] = phi;
    }

    /// Next task to route a worker to, or `None` if every task is dark.
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<u32> {
        match self.policy {
            SelectorPolicy::Greedy => self.queue.last().map(|&(_, Reverse(id))| id),
            SelectorPolicy::Random => self.random(rng),
            SelectorPolicy::RandomRobin => {
                while self.cursor < self.phi.len() {
                    let id = self.cursor as u32;
                    self.cursor += 1;
                    if self.phi[id as usize].is_some() {
                        return Some(id);
                    }
                }
                self.random(rng)
            }
        }
    }

    fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u32> {
        if self.light.is_empty() {
            None
        } else {
            Some(self.light[rng.random_range(0..self.light.len())])
        }
    }
}

/// Priorities of the light tasks at the given pay.
pub fn light_priorities(qm: &QualityManager, beliefs: &[BeliefState], pay: f64) -> Vec<TaskPriority> {
    beliefs
        .iter()
        .enumerate()
        .filter(|(_, b)| qm.decide(b, pay) == Decision::TakeBallot)
        .map(|(q, b)| TaskPriority { task_id: q as u32, phi: qm.priority(b) })
        .collect()
}

/// Stateless selection over a batch. The round-robin phase picks the
/// lowest-id light task that has not been balloted yet.
pub fn select_next<R: Rng + ?Sized>(
    qm: &QualityManager,
    beliefs: &[BeliefState],
    pay: f64,
    policy: SelectorPolicy,
    rng: &mut R,
) -> Option<u32> {
    let light = light_priorities(qm, beliefs, pay);
    if light.is_empty() {
        return None;
    }
    match policy {
        SelectorPolicy::Greedy => {
            let mut best = light[0];
            for t in &light[1..] {
                if t.phi > best.phi {
                    best = *t;
                }
            }
            Some(best.task_id)
        }
        SelectorPolicy::Random => Some(light[rng.random_range(0..light.len())].task_id),
        SelectorPolicy::RandomRobin => light
            .iter()
            .find(|t| beliefs[t.task_id as usize].ballots_taken() == 0)
            .map(|t| t.task_id)
            .or_else(|| Some(light[rng.random_range(0..light.len())].task_id)),
    }
}
