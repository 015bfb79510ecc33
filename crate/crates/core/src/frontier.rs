//! Expected ballots to completion under the per-task policy.
//!
//! The outcome tree under average-worker ballots has the same exchangeable
//! structure as the lookahead: every path reaching count node `(k, j)` has
//! the same probability and the same belief. `expected_ballots` walks that
//! lattice; [`TrajectoryTree`] expands the explicit tree and serves as a
//! cross-check.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::error::{invalid, Error, Result};
use crate::quality::{Decision, Lattice, QualityManager};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafKind {
    PolicyStopped,
    ProbabilityPruned,
    DepthCapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Children indexed by ballot outcome.
    Internal { children: [usize; 2] },
    Leaf(LeafKind),
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub belief: BeliefState,
    pub path_prob: f64,
    pub depth: usize,
    pub kind: NodeKind,
}

/// Explicit outcome tree; size is exponential in the depth cap.
#[derive(Debug, Clone)]
pub struct TrajectoryTree {
    nodes: Vec<TreeNode>,
}

impl TrajectoryTree {
    pub fn build(qm: &QualityManager, root: &BeliefState, pay: f64) -> Self {
        let cfg = qm.config();
        let mut nodes = vec![TreeNode { belief: root.clone(), path_prob: 1.0, depth: 0, kind: NodeKind::Leaf(LeafKind::PolicyStopped) }];
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let (kind, expand) = {
                let node = &nodes[idx];
                if qm.decide(&node.belief, pay) == Decision::MarkComplete {
                    (NodeKind::Leaf(LeafKind::PolicyStopped), false)
                } else if node.path_prob < cfg.prob_threshold {
                    (NodeKind::Leaf(LeafKind::ProbabilityPruned), false)
                } else if node.depth >= cfg.max_tree_depth {
                    (NodeKind::Leaf(LeafKind::DepthCapped), false)
                } else {
                    (NodeKind::Leaf(LeafKind::PolicyStopped), true)
                }
            };
            if !expand {
                nodes[idx].kind = kind;
                continue;
            }
            let (path_prob, depth) = (nodes[idx].path_prob, nodes[idx].depth);
            let outcomes = qm.outcomes(&nodes[idx].belief, pay);
            let mut children = [0; 2];
            for (o, (p, belief)) in outcomes.into_iter().enumerate() {
                children[o] = nodes.len();
                stack.push(nodes.len());
                nodes.push(TreeNode {
                    belief,
                    path_prob: path_prob * p,
                    depth: depth + 1,
                    kind: NodeKind::Leaf(LeafKind::PolicyStopped),
                });
            }
            nodes[idx].kind = NodeKind::Internal { children };
        }
        Self { nodes }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf(_)))
    }

    /// `sum over leaves of p(leaf) * depth(leaf)`.
    pub fn expected_depth(&self) -> f64 {
        self.leaves().map(|n| n.path_prob * n.depth as f64).sum()
    }
}

/// Expected number of further ballots before the policy marks the task
/// complete. Pruned and capped leaves contribute their depth.
pub fn expected_ballots(qm: &QualityManager, b: &BeliefState, pay: f64) -> f64 {
    if qm.decide(b, pay) == Decision::MarkComplete {
        return 0.0;
    }
    let cfg = qm.config();
    let cap = cfg.max_tree_depth;
    let look = cfg.lookahead_depth;
    let lattice = Lattice::build(b, qm.mean_accuracies(), cfg.penalty, cap - 1 + look);
    let values = lattice.horizon_values(pay, look - 1);

    let mut theta = 0.0;
    let mut mass = vec![1.0];
    let mut path = vec![1.0];
    for k in 0..cap {
        let mut next_mass = vec![0.0; k + 2];
        let mut next_path = vec![0.0; k + 2];
        for j in 0..=k {
            let p1 = lattice.p_one[k][j];
            next_path[j] = path[j] * (1.0 - p1);
            if j == k {
                next_path[k + 1] = path[k] * p1;
            }
            if mass[j] <= 0.0 || path[j] < cfg.prob_threshold {
                continue;
            }
            let stop = lattice.stop[k][j];
            if !(stop < -pay && lattice.ballot_value(k, j, pay, &values) > stop) {
                continue;
            }
            theta += mass[j];
            next_mass[j] += mass[j] * (1.0 - p1);
            next_mass[j + 1] += mass[j] * p1;
        }
        mass = next_mass;
        path = next_path;
    }
    theta
}

/// Expected ballots remaining for a whole batch.
pub fn batch_theta(qm: &QualityManager, beliefs: &[BeliefState], pay: f64) -> f64 {
    beliefs.iter().map(|b| expected_ballots(qm, b, pay)).sum()
}

/// `theta~(nu, c)` on the grid `nu = i / G`, `i = 0..=G`, for each pay level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaTable {
    resolution: usize,
    pay_grid: Vec<f64>,
    /// Pay-major: `values[c * (G + 1) + i]`.
    values: Vec<f64>,
}

const THETA_CACHE_TAG: &str = "#crowdctl theta-table v1";

impl ThetaTable {
    pub fn from_values(resolution: usize, pay_grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if resolution == 0 {
            return Err(invalid("theta table resolution must be positive"));
        }
        if values.len() != (resolution + 1) * pay_grid.len() {
            return Err(invalid(format!(
                "theta table needs {} values, got {}",
                (resolution + 1) * pay_grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("theta table entries must be finite and nonnegative"));
        }
        Ok(Self { resolution, pay_grid, values })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pay_grid(&self) -> &[f64] {
        &self.pay_grid
    }

    pub fn pay_levels(&self) -> usize {
        self.pay_grid.len()
    }

    pub fn nu(&self, i: usize) -> f64 {
        i as f64 / self.resolution as f64
    }

    pub fn get(&self, i: usize, pay_level: usize) -> f64 {
        self.values[pay_level * (self.resolution + 1) + i]
    }

    pub fn column(&self, pay_level: usize) -> &[f64] {
        let w = self.resolution + 1;
        &self.values[pay_level * w..(pay_level + 1) * w]
    }

    /// Piecewise-constant lookup anchored at the grid point at or below `nu`.
    pub fn lookup(&self, nu: f64, pay_level: usize) -> f64 {
        let g = self.resolution as f64;
        let i = ((nu.clamp(0.0, 1.0) * g) + 1e-9).floor() as usize;
        self.get(i.min(self.resolution), pay_level)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "{THETA_CACHE_TAG} G={}", self.resolution)?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["nu", "pay_level", "theta"])?;
        for c in 0..self.pay_levels() {
            for i in 0..=self.resolution {
                wtr.write_record([
                    format!("{:?}", self.nu(i)),
                    c.to_string(),
                    format!("{:?}", self.get(i, c)),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a cache written by [`ThetaTable::write_csv`]; the pay grid is
    /// supplied by the caller.
    pub fn read_csv<R: Read>(reader: R, pay_grid: Vec<f64>) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut tag = String::new();
        reader.read_line(&mut tag)?;
        let resolution = tag
            .trim()
            .strip_prefix(THETA_CACHE_TAG)
            .and_then(|rest| rest.trim().strip_prefix("G="))
            .and_then(|g| g.parse::<usize>().ok())
            .ok_or_else(|| Error::Cache(format!("unrecognized theta cache tag `{}`", tag.trim())))?;
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = vec![f64::NAN; (resolution + 1) * pay_grid.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = row as u64 + 3;
            let parse = |k: usize| -> Result<f64> {
                record.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or(Error::Parse { line, message: format!("bad field {k}") })
            };
            let nu = parse(0)?;
            let c = parse(1)? as usize;
            let i = (nu * resolution as f64).round() as usize;
            if c >= pay_grid.len() || i > resolution {
                return Err(Error::Parse { line, message: "cell outside the table".into() });
            }
            values[c * (resolution + 1) + i] = parse(2)?;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Cache("theta cache is missing cells".into()));
        }
        Self::from_values(resolution, pay_grid, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path, pay_grid: Vec<f64>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, pay_grid)
    }
}

/// Belief with `v = (nu + 1) / 2` on answer 1 and the prior difficulty marginal.
pub fn belief_at_quality(qm: &QualityManager, nu: f64) -> BeliefState {
    BeliefState::with_confidence(qm.grid(), 0.5 * (nu + 1.0))
}

/// Builds the table and projects each pay column onto nonincreasing
/// sequences (least-squares isotonic fit). Raw per-belief values can wiggle
/// upward by a few hundredths of a ballot where the depth cap and pruning
/// cut different parts of the tree.
pub fn build_theta_table(qm: &QualityManager, resolution: usize) -> Result<ThetaTable> {
    let raw = build_raw_theta_table(qm, resolution)?;
    let width = resolution + 1;
    let mut values = raw.values;
    for column in values.chunks_mut(width) {
        isotonic_nonincreasing(column);
    }
    ThetaTable::from_values(resolution, raw.pay_grid, values)
}

/// Pool-adjacent-violators fit of a nonincreasing sequence, in place.
pub(crate) fn isotonic_nonincreasing(xs: &mut [f64]) {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(xs.len());
    for &x in xs.iter() {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s1 / n1 as f64 > s0 / n0 as f64 {
                blocks.pop();
                *blocks.last_mut().unwrap() = (s0 + s1, n0 + n1);
            } else {
                break;
            }
        }
    }
    let mut i = 0;
    for (s, n) in blocks {
        let mean = s / n as f64;
        xs[i..i + n].iter_mut().for_each(|x| *x = mean);
        i += n;
    }
}

/// Table of unprojected `expected_ballots` values.
pub fn build_raw_theta_table(qm: &QualityManager, resolution: usize) -> Result<ThetaTable> {
    if resolution < 10 {
        return Err(invalid(format!("theta table resolution must be >= 10, got {resolution}")));
    }
    let pays = qm.config().pay_grid.clone();
    let width = resolution + 1;
    let values: Vec<f64> = (0..pays.len() * width)
        .into_par_iter()
        .map(|cell| {
            let (c, i) = (cell / width, cell % width);
            let b = belief_at_quality(qm, i as f64 / resolution as f64);
            expected_ballots(qm, &b, pays[c])
        })
        .collect();
    ThetaTable::from_values(resolution, pays, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::QualityConfig;
    use crate::worker::DifficultyPrior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manager() -> QualityManager {
        QualityManager::new(QualityConfig::default(), DifficultyPrior::default().discretize().unwrap()).unwrap()
    }

    /// Shallow settings that keep the explicit tree small.
    fn shallow_manager() -> QualityManager {
        let cfg = QualityConfig { prob_threshold: 1e-3, max_tree_depth: 10, ..QualityConfig::default() };
        QualityManager::new(cfg, DifficultyPrior::default().discretize().unwrap()).unwrap()
    }

    fn random_belief(qm: &QualityManager, rng: &mut ChaCha8Rng) -> BeliefState {
        let mut b = qm.fresh_belief();
        for _ in 0..rng.random_range(0..6) {
            b = b.update(rng.random_range(0..2), rng.random_range(0.0..3.0), 0.0).unwrap();
        }
        b
    }

    #[test]
    fn certain_belief_needs_no_ballots() {
        let qm = manager();
        let b = BeliefState::with_confidence(qm.grid(), 1.0);
        assert_eq!(expected_ballots(&qm, &b, 1.0), 0.0);
        let qm = shallow_manager();
        let tree = TrajectoryTree::build(&qm, &b, 1.0);
        assert_eq!(tree.nodes().len(), 1);
    }

    #[test]
    fn one_step_policy_gives_one() {
        // one lookahead step and a pay that only justifies the first ballot
        let cfg = QualityConfig { lookahead_depth: 1, ..QualityConfig::default() };
        let qm = QualityManager::new(cfg, DifficultyPrior::uniform(40).discretize().unwrap()).unwrap();
        let b = qm.fresh_belief();
        let pay = 40.0;
        assert_eq!(qm.decide(&b, pay), Decision::TakeBallot);
        for (_, child) in qm.outcomes(&b, pay) {
            assert_eq!(qm.decide(&child, pay), Decision::MarkComplete);
        }
        assert!((expected_ballots(&qm, &b, pay) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lattice_matches_explicit_tree() {
        let qm = shallow_manager();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..12 {
            let b = random_belief(&qm, &mut rng);
            for &c in &[1.0, 3.0, 6.0] {
                let tree = TrajectoryTree::build(&qm, &b, c);
                let total: f64 = tree.leaves().map(|n| n.path_prob).sum();
                assert!((total - 1.0).abs() < 1e-6);
                for n in tree.nodes() {
                    if let NodeKind::Internal { children } = n.kind {
                        let s = tree.nodes()[children[0]].path_prob + tree.nodes()[children[1]].path_prob;
                        assert!((s - n.path_prob).abs() < 1e-9);
                    }
                }
                let fast = expected_ballots(&qm, &b, c);
                assert!((fast - tree.expected_depth()).abs() < 1e-9, "{fast} vs {}", tree.expected_depth());
                assert_eq!(fast == 0.0, qm.decide(&b, c) == Decision::MarkComplete);
            }
        }
    }

    #[test]
    fn isotonic_fit_examples() {
        let mut xs = [3.0, 1.0, 2.0, 0.0];
        isotonic_nonincreasing(&mut xs);
        assert_eq!(xs, [3.0, 1.5, 1.5, 0.0]);
        let mut xs = [1.0, 2.0, 3.0];
        isotonic_nonincreasing(&mut xs);
        assert_eq!(xs, [2.0, 2.0, 2.0]);
        let mut xs = [5.0, 4.0, 4.0];
        isotonic_nonincreasing(&mut xs);
        assert_eq!(xs, [5.0, 4.0, 4.0]);
    }

    #[test]
    fn batch_theta_is_linear() {
        let qm = manager();
        let b = qm.fresh_belief();
        let single = expected_ballots(&qm, &b, 2.0);
        assert!((batch_theta(&qm, &vec![b; 7], 2.0) - 7.0 * single).abs() < 1e-9);
        let certain = vec![BeliefState::with_confidence(qm.grid(), 1.0); 5];
        assert_eq!(batch_theta(&qm, &certain, 2.0), 0.0);
    }

    #[test]
    fn theta_table_shape_and_cache_round_trip() {
        let qm = manager();
        let table = build_theta_table(&qm, 40).unwrap();
        for c in 0..table.pay_levels() {
            assert_eq!(table.get(40, c), 0.0);
            let col = table.column(c);
            assert!(col.windows(2).all(|w| w[1] <= w[0]), "column {c}: {col:?}");
        }
        assert_eq!(table.lookup(0.0, 0), table.get(0, 0));
        assert_eq!(table.lookup(0.049, 0), table.get(1, 0));
        assert_eq!(table.lookup(1.0, 0), 0.0);
        let raw = build_raw_theta_table(&qm, 40).unwrap();
        for c in 0..table.pay_levels() {
            let (a, b): (f64, f64) = (table.column(c).iter().sum(), raw.column(c).iter().sum());
            assert!((a - b).abs() < 1e-9, "isotonic fit preserves column sums");
        }

        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = ThetaTable::read_csv(buf.as_slice(), table.pay_grid().to_vec()).unwrap();
        assert_eq!(back, table);
        assert!(matches!(ThetaTable::read_csv(&b"nu,pay_level,theta\n"[..], vec![1.0]), Err(Error::Cache(_))));
        assert!(build_theta_table(&qm, 5).is_err());
    }
}
