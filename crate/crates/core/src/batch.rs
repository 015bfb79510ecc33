//! Batch belief bookkeeping keyed by ballot counts.
//!
//! Beliefs here are updated with the average worker, so a task's belief is
//! determined by its starting belief and its counts of 0- and 1-ballots.
//! [`CountCache`] stores one node per distinct `(root, n0, n1)` together
//! with lazily computed decisions, priorities and expected ballots.

use rand::Rng;

use crate::belief::BeliefState;
use crate::frontier::expected_ballots;
use crate::quality::{Decision, QualityManager};
use crate::selector::{SelectorPolicy, TaskSelector};

#[derive(Debug, Clone)]
struct Node {
    belief: BeliefState,
    confidence: f64,
    p_one: f64,
    phi: f64,
    children: [Option<u32>; 2],
    light: Vec<Option<bool>>,
    theta: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct CountCache {
    qm: QualityManager,
    roots: Vec<u32>,
    nodes: Vec<Node>,
}

impl CountCache {
    pub fn new(qm: QualityManager, roots: Vec<BeliefState>) -> Self {
        let mut cache = Self { qm, roots: Vec::with_capacity(roots.len()), nodes: Vec::new() };
        for b in roots {
            let id = cache.push(b);
            cache.roots.push(id);
        }
        cache
    }

    fn push(&mut self, belief: BeliefState) -> u32 {
        let k = self.qm.config().pay_grid.len();
        let node = Node {
            confidence: belief.confidence(),
            p_one: belief.ballot_one_probability(self.qm.mean_accuracies()),
            phi: self.qm.priority(&belief),
            belief,
            children: [None, None],
            light: vec![None; k],
            theta: vec![None; k],
        };
        self.nodes.push(node);
        (self.nodes.len() - 1) as u32
    }

    pub fn manager(&self) -> &QualityManager {
        &self.qm
    }

    pub fn root(&self, r: usize) -> u32 {
        self.roots[r]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node reached from `node` by one average-worker ballot `o`.
    pub fn child(&mut self, node: u32, o: u8) -> u32 {
        if let Some(c) = self.nodes[node as usize].children[o as usize] {
            return c;
        }
        let parent = &self.nodes[node as usize].belief;
        let belief = parent.update_with_accuracy(o, self.qm.mean_accuracies(), 0.0).unwrap_or_else(|_| parent.clone());
        let c = self.push(belief);
        self.nodes[node as usize].children[o as usize] = Some(c);
        c
    }

    pub fn belief(&self, node: u32) -> &BeliefState {
        &self.nodes[node as usize].belief
    }

    pub fn confidence(&self, node: u32) -> f64 {
        self.nodes[node as usize].confidence
    }

    pub fn quality(&self, node: u32) -> f64 {
        2.0 * self.nodes[node as usize].confidence - 1.0
    }

    pub fn p_one(&self, node: u32) -> f64 {
        self.nodes[node as usize].p_one
    }

    pub fn phi(&self, node: u32) -> f64 {
        self.nodes[node as usize].phi
    }

    pub fn is_light(&mut self, node: u32, pay_level: usize) -> bool {
        if let Some(l) = self.nodes[node as usize].light[pay_level] {
            return l;
        }
        let pay = self.qm.config().pay_grid[pay_level];
        let l = self.qm.decide(&self.nodes[node as usize].belief, pay) == Decision::TakeBallot;
        self.nodes[node as usize].light[pay_level] = Some(l);
        l
    }

    pub fn theta(&mut self, node: u32, pay_level: usize) -> f64 {
        if let Some(t) = self.nodes[node as usize].theta[pay_level] {
            return t;
        }
        let pay = self.qm.config().pay_grid[pay_level];
        let t = expected_ballots(&self.qm, &self.nodes[node as usize].belief, pay);
        self.nodes[node as usize].theta[pay_level] = Some(t);
        t
    }
}

/// A batch of tasks, each pointing at a cache node, with a selector kept in
/// sync with the tasks' light/dark status at the current pay.
#[derive(Debug, Clone)]
pub struct BatchState {
    nodes: Vec<u32>,
    selector: TaskSelector,
    pay_level: usize,
}

impl BatchState {
    pub fn new(cache: &mut CountCache, nodes: Vec<u32>, policy: SelectorPolicy, pay_level: usize) -> Self {
        let selector = TaskSelector::new(policy, nodes.len());
        let mut batch = Self { nodes, selector, pay_level };
        batch.set_pay_level(cache, pay_level);
        batch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, task: u32) -> u32 {
        self.nodes[task as usize]
    }

    pub fn nodes(&self) -> &[u32] {
        &self.nodes
    }

    pub fn pay_level(&self) -> usize {
        self.pay_level
    }

    pub fn light_count(&self) -> usize {
        self.selector.light_count()
    }

    /// Re-evaluates every task's status at a new pay level.
    pub fn set_pay_level(&mut self, cache: &mut CountCache, pay_level: usize) {
        self.pay_level = pay_level;
        for task in 0..self.nodes.len() {
            self.refresh(cache, task as u32);
        }
    }

    fn refresh(&mut self, cache: &mut CountCache, task: u32) {
        let node = self.nodes[task as usize];
        let status = cache.is_light(node, self.pay_level).then(|| cache.phi(node));
        self.selector.set(task, status);
    }

    pub fn select<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<u32> {
        self.selector.next(rng)
    }

    /// Records a ballot for `task`.
    pub fn apply(&mut self, cache: &mut CountCache, task: u32, ballot: u8) {
        let next = cache.child(self.nodes[task as usize], ballot);
        self.nodes[task as usize] = next;
        self.refresh(cache, task);
    }

    /// Mean normalized quality.
    pub fn nu_bar(&self, cache: &CountCache) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        self.nodes.iter().map(|&n| cache.quality(n)).sum::<f64>() / self.nodes.len() as f64
    }

    /// Expected ballots remaining at a pay level.
    pub fn theta(&self, cache: &mut CountCache, pay_level: usize) -> f64 {
        self.nodes.iter().map(|&n| cache.theta(n, pay_level)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontier::batch_theta;
    use crate::quality::QualityConfig;
    use crate::worker::DifficultyPrior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_nodes_match_direct_updates() {
        let qm = QualityManager::new(QualityConfig::default(), DifficultyPrior::default().discretize().unwrap()).unwrap();
        let mut cache = CountCache::new(qm.clone(), vec![qm.fresh_belief()]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let root = cache.root(0);
        let mut batch = BatchState::new(&mut cache, vec![root; 20], SelectorPolicy::Greedy, 0);
        let mut direct = vec![qm.fresh_belief(); 20];
        for _ in 0..60 {
            let Some(task) = batch.select(&mut rng) else { break };
            let o = u8::from(rng.random::<f64>() < cache.p_one(batch.node(task)));
            batch.apply(&mut cache, task, o);
            direct[task as usize] = direct[task as usize].update(o, qm.config().mean_worker, 0.0).unwrap();
        }
        for (task, b) in direct.iter().enumerate() {
            let node = batch.node(task as u32);
            for (x, y) in cache.belief(node).weights().iter().zip(b.weights()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let nu: f64 = direct.iter().map(|b| b.task_quality()).sum::<f64>() / 20.0;
        assert!((batch.nu_bar(&cache) - nu).abs() < 1e-12);
        let theta = batch.theta(&mut cache, 0);
        assert!((theta - batch_theta(&qm, &direct, 1.0)).abs() < 1e-6);
    }
}
