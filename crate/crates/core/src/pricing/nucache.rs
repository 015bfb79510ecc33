//! Batch-quality transitions estimated by simulating the selector.
//!
//! Cells of the cached table `(c, nu_bar)` start from batches recorded at
//! that `nu_bar` along greedy runs from a fresh batch; the runs are kept as
//! per-task ballot counts so any pay level can reuse them. Each simulated
//! task carries a hidden difficulty and answer drawn given its counts, and
//! its ballots come from the worker pool; beliefs move with the average
//! worker, as they do at run time. One rollout of
//! `J * delta_theta` ballots then yields `nu_bar'` for every arrival bucket
//! `j <= J`. Rows store the mean over rollouts; the distribution of a row
//! splits that mean between the two neighbouring grid points.
//!
//! [`estimate_nu_transition`] is the standalone estimator for a single
//! aggregate: it reconstructs the histogram from `(nu_bar, theta)` with the
//! Beta fit and instantiates beliefs with the prior difficulty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchState, CountCache};
use crate::belief::BeliefState;
use crate::error::{invalid, Error, Result};
use crate::frontier::{belief_at_quality, ThetaTable};
use crate::quality::QualityManager;
use crate::reconstruct::{fit_lambda, reconstruct_histogram, BatchHistogram, LambdaSearch};
use crate::selector::SelectorPolicy;

use super::{CompletionModel, PlanConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuTransitionCache {
    nu_levels: usize,
    max_bucket: Vec<usize>,
    /// Per pay level, `means[k * (J + 1) + j]` is the mean `nu_bar'`.
    means: Vec<Vec<f64>>,
}

impl NuTransitionCache {
    /// Cache in which `nu_bar` never moves.
    pub fn identity(nu_levels: usize, pay_levels: usize, max_bucket: usize) -> Self {
        let means = (0..pay_levels)
            .map(|_| {
                (0..=nu_levels)
                    .flat_map(|k| std::iter::repeat_n(k as f64 / nu_levels as f64, max_bucket + 1))
                    .collect()
            })
            .collect();
        Self { nu_levels, max_bucket: vec![max_bucket; pay_levels], means }
    }

    pub fn from_means(nu_levels: usize, max_bucket: Vec<usize>, means: Vec<Vec<f64>>) -> Result<Self> {
        if max_bucket.len() != means.len() {
            return Err(invalid("one bucket limit per pay level is required"));
        }
        for (row, &j) in means.iter().zip(&max_bucket) {
            if row.len() != (nu_levels + 1) * (j + 1) {
                return Err(invalid("transition table has the wrong shape"));
            }
            if row.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(invalid("transition means must lie in [0, 1]"));
            }
        }
        Ok(Self { nu_levels, max_bucket, means })
    }

    pub fn nu_levels(&self) -> usize {
        self.nu_levels
    }

    pub fn pay_levels(&self) -> usize {
        self.means.len()
    }

    pub fn max_bucket(&self, pay_level: usize) -> usize {
        self.max_bucket[pay_level]
    }

    /// Mean `nu_bar'`; buckets past the table edge use the last column.
    pub fn mean(&self, pay_level: usize, nu_idx: usize, bucket: usize) -> f64 {
        let jmax = self.max_bucket[pay_level];
        self.means[pay_level][nu_idx * (jmax + 1) + bucket.min(jmax)]
    }

    /// `(lower index, weight on lower, upper index)` with the same mean.
    pub fn split(&self, pay_level: usize, nu_idx: usize, bucket: usize) -> (usize, f64, usize) {
        let x = self.mean(pay_level, nu_idx, bucket) * self.nu_levels as f64;
        let lo = (x.floor() as usize).min(self.nu_levels);
        let frac = x - lo as f64;
        if lo == self.nu_levels || frac <= 0.0 {
            (lo, 1.0, lo)
        } else {
            (lo, 1.0 - frac, lo + 1)
        }
    }

    /// Distribution over next `nu_bar` indices.
    pub fn distribution(&self, pay_level: usize, nu_idx: usize, bucket: usize) -> Vec<(usize, f64)> {
        let (lo, w, hi) = self.split(pay_level, nu_idx, bucket);
        if lo == hi {
            vec![(lo, 1.0)]
        } else {
            vec![(lo, w), (hi, 1.0 - w)]
        }
    }

    /// Expected change of `nu_bar` after `ballots` arrivals, interpolated
    /// bilinearly in `nu_bar` and in the arrival count.
    pub fn interpolated_delta(&self, pay_level: usize, nu_bar: f64, ballots: f64, delta_theta: f64) -> f64 {
        let l = self.nu_levels as f64;
        let kx = (nu_bar.clamp(0.0, 1.0) * l).min(l);
        let jx = (ballots.max(0.0) / delta_theta).min(self.max_bucket[pay_level] as f64);
        let (k0, j0) = (kx.floor() as usize, jx.floor() as usize);
        let (k1, j1) = ((k0 + 1).min(self.nu_levels), (j0 + 1).min(self.max_bucket[pay_level]));
        let (fk, fj) = (kx - k0 as f64, jx - j0 as f64);
        let d = |k: usize, j: usize| self.mean(pay_level, k, j) - k as f64 / l;
        let low = d(k0, j0) * (1.0 - fj) + d(k0, j1) * fj;
        let high = d(k1, j0) * (1.0 - fj) + d(k1, j1) * fj;
        low * (1.0 - fk) + high * fk
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cache: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Self::from_means(cache.nu_levels, cache.max_bucket, cache.means).map_err(|e| Error::Cache(e.to_string()))
    }
}

/// Root beliefs at the histogram bin centers.
fn bin_roots(qm: &QualityManager, bins: usize) -> Vec<BeliefState> {
    (0..bins).map(|i| belief_at_quality(qm, (i as f64 + 0.5) / bins as f64)).collect()
}

fn tasks_from_histogram(cache: &CountCache, hist: &BatchHistogram) -> Vec<u32> {
    let mut nodes = Vec::with_capacity(hist.total() as usize);
    for (i, &count) in hist.counts.iter().enumerate() {
        nodes.extend(std::iter::repeat_n(cache.root(i), count as usize));
    }
    nodes
}

/// Who answers simulated ballots.
#[derive(Clone, Copy)]
enum Workers<'a> {
    /// Ballots drawn from the average-worker predictive of each belief.
    Average,
    /// Each task gets a hidden difficulty bin and answer; ballots come from
    /// pool workers with per-bin accuracy `acc`. `mass` is the prior.
    Pool { acc: &'a [f64], mass: &'a [f64] },
}

/// Hidden `(difficulty bin, answer)` drawn from the posterior given a
/// task's ballot counts under per-bin accuracy `acc`.
fn sample_hidden<R: Rng>(mass: &[f64], acc: &[f64], (zeros, ones): (u16, u16), rng: &mut R) -> (usize, u8) {
    let (z, o) = (zeros as i32, ones as i32);
    let mut w = Vec::with_capacity(2 * mass.len());
    for answer in 0..2u8 {
        for (m, a) in mass.iter().zip(acc) {
            let (agree, disagree) = if answer == 1 { (o, z) } else { (z, o) };
            w.push(m * a.powi(agree) * (1.0 - a).powi(disagree));
        }
    }
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return (i % mass.len(), (i / mass.len()) as u8);
        }
        u -= wi;
    }
    let last = w.iter().rposition(|x| *x > 0.0).unwrap_or(0);
    (last % mass.len(), (last / mass.len()) as u8)
}

fn hidden_truth<R: Rng>(workers: Workers, tallies: Option<&[(u16, u16)]>, n: usize, rng: &mut R) -> Vec<(usize, u8)> {
    match workers {
        Workers::Average => Vec::new(),
        Workers::Pool { acc, mass } => (0..n).map(|i| sample_hidden(mass, acc, tallies.map_or((0, 0), |t| t[i]), rng)).collect(),
    }
}

fn draw_ballot<R: Rng>(cache: &CountCache, node: u32, workers: Workers, hidden: &[(usize, u8)], task: u32, rng: &mut R) -> u8 {
    match workers {
        Workers::Average => u8::from(rng.random::<f64>() < cache.p_one(node)),
        Workers::Pool { acc, .. } => {
            let (d, answer) = hidden[task as usize];
            if rng.random::<f64>() < acc[d] {
                answer
            } else {
                1 - answer
            }
        }
    }
}

/// Greedy rollout; beliefs move with the average worker whoever answers.
/// Returns the change of `nu_bar` after `j * step` ballots for
/// `j = 0..=buckets`.
#[allow(clippy::too_many_arguments)]
fn rollout_deltas<R: Rng>(
    cache: &mut CountCache,
    tasks: Vec<u32>,
    tallies: Option<&[(u16, u16)]>,
    workers: Workers,
    pay_level: usize,
    step: usize,
    buckets: usize,
    rng: &mut R,
) -> Vec<f64> {
    let hidden = hidden_truth(workers, tallies, tasks.len(), rng);
    let n = tasks.len().max(1) as f64;
    let mut batch = BatchState::new(cache, tasks, SelectorPolicy::Greedy, pay_level);
    let start = batch.nu_bar(cache);
    let mut nu_sum = start * n;
    let mut out = Vec::with_capacity(buckets + 1);
    out.push(0.0);
    let mut exhausted = false;
    while out.len() <= buckets && !exhausted {
        for _ in 0..step {
            let Some(task) = batch.select(rng) else {
                exhausted = true;
                break;
            };
            let node = batch.node(task);
            let o = draw_ballot(cache, node, workers, &hidden, task, rng);
            batch.apply(cache, task, o);
            nu_sum += cache.quality(batch.node(task)) - cache.quality(node);
        }
        out.push(nu_sum / n - start);
    }
    let last = *out.last().unwrap();
    out.resize(buckets + 1, last);
    out
}

/// Mean `theta` observed at each `nu_bar` level along greedy runs from a
/// fresh batch. Levels never visited are interpolated; levels above the
/// final quality get 0.
pub fn reference_theta(qm: &QualityManager, n: usize, pay_level: usize, nu_levels: usize, rollouts: usize, seed: u64) -> Vec<f64> {
    let mut cache = CountCache::new(qm.clone(), vec![qm.fresh_belief()]);
    reference_runs(&mut cache, 0, n, pay_level, nu_levels, rollouts, Workers::Average, seed).theta
}

/// Statistics of greedy runs from a fresh batch, indexed by `nu_bar` level.
struct Reference {
    theta: Vec<f64>,
    /// Per level: the batch at first entry to that level, one per run, as
    /// per-task `(zeros, ones)` ballot counts.
    snapshots: Vec<Vec<Vec<(u16, u16)>>>,
    /// Highest level visited.
    top: usize,
}

#[allow(clippy::too_many_arguments)]
fn reference_runs(cache: &mut CountCache, root: usize, n: usize, pay_level: usize, nu_levels: usize, rollouts: usize, workers: Workers, seed: u64) -> Reference {
    let mut sums = vec![0.0; nu_levels + 1];
    let mut counts = vec![0usize; nu_levels + 1];
    let mut snapshots: Vec<Vec<Vec<(u16, u16)>>> = vec![Vec::new(); nu_levels + 1];
    let snap = |nu: f64| ((nu.clamp(0.0, 1.0) * nu_levels as f64).round() as usize).min(nu_levels);
    let mut top = 0;
    for r in 0..rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let root_node = cache.root(root);
        let mut batch = BatchState::new(cache, vec![root_node; n], SelectorPolicy::Greedy, pay_level);
        let mut tally = vec![(0u16, 0u16); n];
        let hidden = hidden_truth(workers, None, n, &mut rng);
        let mut nu_sum = batch.nu_bar(cache) * n as f64;
        let mut theta = batch.theta(cache, pay_level);
        let mut last = usize::MAX;
        loop {
            let k = snap(nu_sum / n as f64);
            sums[k] += theta;
            counts[k] += 1;
            top = top.max(k);
            if k != last {
                snapshots[k].push(tally.clone());
                last = k;
            }
            let Some(task) = batch.select(&mut rng) else { break };
            let node = batch.node(task);
            let o = draw_ballot(cache, node, workers, &hidden, task, &mut rng);
            batch.apply(cache, task, o);
            let t = &mut tally[task as usize];
            if o == 0 {
                t.0 += 1;
            } else {
                t.1 += 1;
            }
            let next = batch.node(task);
            nu_sum += cache.quality(next) - cache.quality(node);
            theta += cache.theta(next, pay_level) - cache.theta(node, pay_level);
        }
    }
    let mut known: Vec<(usize, f64)> = (0..=nu_levels).filter(|&k| counts[k] > 0).map(|k| (k, sums[k] / counts[k] as f64)).collect();
    if known.is_empty() {
        known.push((0, 0.0));
    }
    let theta = (0..=nu_levels)
        .map(|k| {
            if k > top {
                return 0.0;
            }
            match known.binary_search_by_key(&k, |&(i, _)| i) {
                Ok(pos) => known[pos].1,
                Err(0) => known[0].1,
                Err(pos) if pos == known.len() => known[pos - 1].1,
                Err(pos) => {
                    let (a, ta) = known[pos - 1];
                    let (b, tb) = known[pos];
                    ta + (tb - ta) * (k - a) as f64 / (b - a) as f64
                }
            }
            .max(0.0)
        })
        .collect();
    Reference { theta, snapshots, top }
}

/// Snapshots used for level `k` at pay `c`: the pay's own runs if they
/// visited `k`, else the lowest pay whose runs did, else the highest level
/// any run reached.
fn snapshots_for(refs: &[Reference], c: usize, k: usize) -> &[Vec<(u16, u16)>] {
    if !refs[c].snapshots[k].is_empty() {
        return &refs[c].snapshots[k];
    }
    if let Some(r) = refs.iter().find(|r| !r.snapshots[k].is_empty()) {
        return &r.snapshots[k];
    }
    let best = refs.iter().max_by_key(|r| r.top).expect("at least one pay level");
    (0..=best.top.min(k)).rev().map(|l| &best.snapshots[l]).find(|s| !s.is_empty()).map(|s| s.as_slice()).unwrap_or(&[])
}

/// Lattice nodes below `root` for per-task ballot counts.
fn materialize(cache: &mut CountCache, root: u32, tally: &[(u16, u16)]) -> Vec<u32> {
    tally
        .iter()
        .map(|&(zeros, ones)| {
            let mut node = root;
            for _ in 0..zeros {
                node = cache.child(node, 0);
            }
            for _ in 0..ones {
                node = cache.child(node, 1);
            }
            node
        })
        .collect()
}

/// Expected `nu_bar` after `n_b` greedy average-worker ballots on a batch
/// reconstructed from `(nu_bar, theta)`, averaged over `repeats` rollouts.
#[allow(clippy::too_many_arguments)]
pub fn estimate_nu_transition(
    qm: &QualityManager,
    table: &ThetaTable,
    nu_bar: f64,
    theta: f64,
    n_b: usize,
    n: usize,
    pay_level: usize,
    search: &LambdaSearch,
    delta_theta: f64,
    bins: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 {
        return Err(invalid("at least one rollout is required"));
    }
    let fit = fit_lambda(nu_bar, theta, pay_level, table, n, search, delta_theta)?;
    if !fit.feasible {
        return Err(Error::Degenerate(format!("aggregate (nu_bar={nu_bar}, theta={theta}) is not reachable")));
    }
    let hist = reconstruct_histogram(&fit, n as u64, bins)?;
    let mut cache = CountCache::new(qm.clone(), bin_roots(qm, bins));
    let mut total = 0.0;
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let tasks = tasks_from_histogram(&cache, &hist);
        total += rollout_deltas(&mut cache, tasks, None, Workers::Average, pay_level, n_b, 1, &mut rng)[1];
    }
    Ok((nu_bar + total / repeats as f64).clamp(0.0, 1.0))
}

/// Builds the cache for every pay level. Each `(c, nu_bar)` cell starts
/// its rollouts from batches recorded at that `nu_bar` in greedy runs from
/// a fresh batch, with its own random stream per rollout.
pub(crate) fn build_cache(cfg: &PlanConfig, qm: &QualityManager, completion: &CompletionModel) -> NuTransitionCache {
    let levels = cfg.nu_levels;
    let step = cfg.delta_theta.round().max(1.0) as usize;
    let pool_acc = cfg.pool.mixture_accuracies(qm.grid());
    let workers = Workers::Pool { acc: &pool_acc, mass: &qm.grid().mass };
    let refs: Vec<Reference> = (0..cfg.pay_levels())
        .into_par_iter()
        .map(|c| {
            let mut cache = CountCache::new(qm.clone(), vec![qm.fresh_belief()]);
            reference_runs(&mut cache, 0, cfg.n_tasks, c, levels, cfg.reference_rollouts, workers, cfg.seed ^ 0xa5a5 ^ c as u64)
        })
        .collect();
    let per_pay: Vec<(usize, Vec<f64>)> = (0..cfg.pay_levels())
        .into_par_iter()
        .map(|c| {
            let mut cache = CountCache::new(qm.clone(), vec![qm.fresh_belief()]);
            let root = cache.root(0);
            let jmax = completion.max_bucket(c);
            let mut means = vec![0.0; (levels + 1) * (jmax + 1)];
            for k in 0..=levels {
                let snaps = snapshots_for(&refs, c, k);
                let mut acc = vec![0.0; jmax + 1];
                if !snaps.is_empty() {
                    for r in 0..cfg.rollouts {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                        rng.set_stream(((c * (levels + 1) + k) * cfg.rollouts + r) as u64);
                        let tally = &snaps[r % snaps.len()];
                        let tasks = materialize(&mut cache, root, tally);
                        let deltas = rollout_deltas(&mut cache, tasks, Some(tally), workers, c, step, jmax, &mut rng);
                        acc.iter_mut().zip(&deltas).for_each(|(a, d)| *a += d);
                    }
                }
                let base = k as f64 / levels as f64;
                for j in 0..=jmax {
                    let m = if j == 0 { base } else { (base + acc[j] / cfg.rollouts as f64).clamp(0.0, 1.0) };
                    means[k * (jmax + 1) + j] = m;
                }
            }
            // higher current quality never yields lower expected quality
            for j in 0..=jmax {
                for k in 1..=levels {
                    let prev = means[(k - 1) * (jmax + 1) + j];
                    let cur = &mut means[k * (jmax + 1) + j];
                    *cur = cur.max(prev);
                }
            }
            (jmax, means)
        })
        .collect();
    let (max_bucket, means) = per_pay.into_iter().unzip();
    NuTransitionCache { nu_levels: levels, max_bucket, means }
}
