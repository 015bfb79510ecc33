//! Building, storing and querying the pay policy.
//!
//! A cache directory holds `manifest.json` (format version and the full
//! [`PlanConfig`]), `theta_table.csv`, `nu_cache.json` and `policy.bin`.
//! `policy.bin` is little-endian: magic, version, the three table sizes,
//! `f32` values, `u8` action codes and a `u8` feasibility mask per
//! `(pay, state)`.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier::{build_theta_table, ThetaTable};
use crate::quality::QualityManager;
use crate::reconstruct::ThetaCurves;

use super::nucache::build_cache;
use super::solver::{solve, SolvedPolicy, StageModel};
use super::{
    shifted_theta, terminal_reward, theta0_buckets, Action, AggregateGrid, AggregateState, CompletionModel, NuTransitionCache, PlanConfig,
};

const MAGIC: &[u8; 8] = b"CRWDPLCY";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub feasible_states: usize,
    pub total_states: usize,
    pub max_sweeps_used: usize,
    pub start_value: f64,
    pub build_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: PlanConfig,
}

/// Stage model of the aggregate MDP.
struct AggregateModel<'a> {
    grid: &'a AggregateGrid,
    completion: &'a CompletionModel,
    cache: &'a NuTransitionCache,
    theta0_idx: &'a [usize],
    pay_grid: &'a [f64],
    penalty: f64,
    n: usize,
}

impl StageModel for AggregateModel<'_> {
    fn pay_levels(&self) -> usize {
        self.grid.pay_levels
    }

    fn states(&self) -> usize {
        self.grid.states_per_pay()
    }

    fn terminal(&self, s: usize) -> f64 {
        terminal_reward(self.grid.nu_bar(self.grid.split(s).0), self.penalty, self.n)
    }

    fn shift(&self, s: usize, from: usize, to: usize) -> usize {
        let (k, t) = self.grid.split(s);
        self.grid.index(k, shifted_theta(t, from, to, self.theta0_idx, self.grid.theta_levels))
    }

    fn no_change(&self, s: usize, c: usize, next: &[f64]) -> f64 {
        let (k, t) = self.grid.split(s);
        let left = self.grid.theta(t);
        let pay = self.pay_grid[c];
        let mut total = 0.0;
        for b in self.completion.buckets(c) {
            let j = b.bucket.min(t);
            let t2 = t - j;
            let (lo, w, hi) = self.cache.split(c, k, j);
            let v = w * next[self.grid.index(lo, t2)] + (1.0 - w) * next[self.grid.index(hi, t2)];
            total += b.probability * (-pay * b.mean.min(left) + v);
        }
        total
    }
}

/// A solved pay policy with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Plan {
    config: PlanConfig,
    qm: QualityManager,
    table: ThetaTable,
    theta0: Vec<f64>,
    theta0_idx: Vec<usize>,
    grid: AggregateGrid,
    completion: CompletionModel,
    nu_cache: NuTransitionCache,
    policy: SolvedPolicy,
    /// `[pay * S + s]`.
    feasible: Vec<bool>,
    diagnostics: PlanDiagnostics,
}

fn make_grid(cfg: &PlanConfig, theta0: &[f64]) -> AggregateGrid {
    let top = theta0.iter().copied().fold(0.0, f64::max);
    let theta_levels = (1.1 * top / cfg.delta_theta).ceil() as usize + 1;
    AggregateGrid { nu_levels: cfg.nu_levels, theta_levels, delta_theta: cfg.delta_theta, max_epochs: cfg.max_epochs, pay_levels: cfg.pay_levels() }
}

/// States whose `theta` lies within half a bucket of some fitted batch.
fn feasibility_mask(curves: &ThetaCurves, grid: &AggregateGrid) -> Vec<bool> {
    let mut mask = vec![false; grid.pay_levels * grid.states_per_pay()];
    for c in 0..grid.pay_levels {
        for k in 0..=grid.nu_levels {
            let mut row: Vec<f64> = (0..curves.lambdas.len()).map(|l| curves.theta_hat(c, k, l)).collect();
            row.sort_by(f64::total_cmp);
            for t in 0..grid.theta_levels {
                let theta = grid.theta(t);
                let pos = row.partition_point(|&x| x < theta);
                let near = [pos.checked_sub(1), (pos < row.len()).then_some(pos)]
                    .into_iter()
                    .flatten()
                    .map(|i| (row[i] - theta).abs())
                    .fold(f64::INFINITY, f64::min);
                mask[c * grid.states_per_pay() + grid.index(k, t)] = near <= 0.5 * grid.delta_theta;
            }
        }
    }
    mask
}

impl Plan {
    pub fn build(cfg: &PlanConfig) -> Result<Self> {
        cfg.validate()?;
        let started = Instant::now();
        let qm = QualityManager::new(cfg.quality.clone(), cfg.prior.discretize()?)?;
        let table = build_theta_table(&qm, cfg.theta_resolution)?;
        tracing::debug!("theta table built");
        let completion = CompletionModel::new(&cfg.rates_per_epoch(), cfg.delta_theta, cfg.truncation)?;
        let curves = ThetaCurves::build(&table, cfg.nu_levels, cfg.n_tasks, &cfg.lambda_search)?;
        tracing::debug!("theta curves built");
        let nu_cache = build_cache(cfg, &qm, &completion);
        tracing::debug!("nu transition cache built");
        let theta0: Vec<f64> = (0..cfg.pay_levels()).map(|c| cfg.n_tasks as f64 * table.get(0, c)).collect();
        let grid = make_grid(cfg, &theta0);
        let feasible = feasibility_mask(&curves, &grid);
        let mut plan = Self::assemble(cfg.clone(), qm, table, theta0, grid, completion, nu_cache, feasible, None)?;
        plan.diagnostics.build_seconds = started.elapsed().as_secs_f64();
        Ok(plan)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: PlanConfig,
        qm: QualityManager,
        table: ThetaTable,
        theta0: Vec<f64>,
        grid: AggregateGrid,
        completion: CompletionModel,
        nu_cache: NuTransitionCache,
        feasible: Vec<bool>,
        policy: Option<SolvedPolicy>,
    ) -> Result<Self> {
        let theta0_idx = theta0_buckets(&theta0, config.delta_theta);
        let policy = match policy {
            Some(p) => p,
            None => {
                let model = AggregateModel {
                    grid: &grid,
                    completion: &completion,
                    cache: &nu_cache,
                    theta0_idx: &theta0_idx,
                    pay_grid: &config.quality.pay_grid,
                    penalty: config.quality.penalty,
                    n: config.n_tasks,
                };
                solve(&model, config.max_epochs, config.switch_cost, config.tolerance, config.max_sweeps)?
            }
        };
        let total_states = feasible.len();
        let mut plan = Self {
            diagnostics: PlanDiagnostics {
                feasible_states: feasible.iter().filter(|&&f| f).count(),
                total_states,
                max_sweeps_used: policy.sweeps(),
                start_value: 0.0,
                build_seconds: 0.0,
            },
            config,
            qm,
            table,
            theta0,
            theta0_idx,
            grid,
            completion,
            nu_cache,
            policy,
            feasible,
        };
        plan.diagnostics.start_value = plan.value(&plan.start_state());
        Ok(plan)
    }

    pub fn config(&self) -> &PlanConfig {
        &self.config
    }

    pub fn manager(&self) -> &QualityManager {
        &self.qm
    }

    pub fn table(&self) -> &ThetaTable {
        &self.table
    }

    /// Start-state `theta` at each pay level.
    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn theta0_idx(&self) -> &[usize] {
        &self.theta0_idx
    }

    pub fn grid(&self) -> &AggregateGrid {
        &self.grid
    }

    pub fn completion(&self) -> &CompletionModel {
        &self.completion
    }

    pub fn nu_cache(&self) -> &NuTransitionCache {
        &self.nu_cache
    }

    pub fn policy(&self) -> &SolvedPolicy {
        &self.policy
    }

    pub fn diagnostics(&self) -> &PlanDiagnostics {
        &self.diagnostics
    }

    /// `(nu_bar = 0, theta = theta0(c_1), tau = 0, c_1)`.
    pub fn start_state(&self) -> AggregateState {
        AggregateState { nu_bar_idx: 0, theta_idx: self.grid.snap_theta(self.theta0[0]), tau_idx: 0, pay_idx: 0 }
    }

    /// Snaps continuous aggregates onto the grid.
    pub fn snap(&self, nu_bar: f64, theta: f64, tau_idx: usize, pay_idx: usize) -> AggregateState {
        AggregateState { nu_bar_idx: self.grid.snap_nu(nu_bar), theta_idx: self.grid.snap_theta(theta), tau_idx: tau_idx.min(self.grid.max_epochs), pay_idx }
    }

    pub fn is_feasible(&self, s: &AggregateState) -> bool {
        self.feasible[s.pay_idx * self.grid.states_per_pay() + self.grid.index(s.nu_bar_idx, s.theta_idx)]
    }

    pub fn action(&self, s: &AggregateState) -> Action {
        self.policy.action(s.tau_idx, s.pay_idx, self.grid.index(s.nu_bar_idx, s.theta_idx))
    }

    /// Action at a state reached by a pay change in the current epoch.
    pub fn next_in_chain(&self, s: &AggregateState, previous: Action) -> Action {
        self.policy.next_in_chain(s.tau_idx, s.pay_idx, self.grid.index(s.nu_bar_idx, s.theta_idx), previous)
    }

    pub fn value(&self, s: &AggregateState) -> f64 {
        self.policy.value(s.tau_idx, s.pay_idx, self.grid.index(s.nu_bar_idx, s.theta_idx))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest { version: FORMAT_VERSION, config: self.config.clone() };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("manifest.json"))?, &manifest)?;
        self.table.save(&dir.join("theta_table.csv"))?;
        self.nu_cache.save(&dir.join("nu_cache.json"))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("policy.bin"))?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for x in [self.policy.max_epochs(), self.policy.pay_levels(), self.policy.states()] {
            out.write_all(&(x as u64).to_le_bytes())?;
        }
        for v in self.policy.raw_values() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(self.policy.raw_actions())?;
        let mask: Vec<u8> = self.feasible.iter().map(|&f| u8::from(f)).collect();
        out.write_all(&mask)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(dir.join("manifest.json"))?))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Cache(format!("cache format {} is not supported (expected {FORMAT_VERSION})", manifest.version)));
        }
        let cfg = manifest.config;
        cfg.validate()?;
        let qm = QualityManager::new(cfg.quality.clone(), cfg.prior.discretize()?)?;
        let table = ThetaTable::load(&dir.join("theta_table.csv"), cfg.quality.pay_grid.clone())?;
        let nu_cache = NuTransitionCache::load(&dir.join("nu_cache.json"))?;
        if nu_cache.nu_levels() != cfg.nu_levels || nu_cache.pay_levels() != cfg.pay_levels() {
            return Err(Error::Cache("transition cache does not match the manifest".into()));
        }
        let completion = CompletionModel::new(&cfg.rates_per_epoch(), cfg.delta_theta, cfg.truncation)?;
        let theta0: Vec<f64> = (0..cfg.pay_levels()).map(|c| cfg.n_tasks as f64 * table.get(0, c)).collect();
        let grid = make_grid(&cfg, &theta0);

        let mut bytes = Vec::new();
        std::fs::File::open(dir.join("policy.bin"))?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Cache("policy.bin has the wrong magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Cache(format!("policy format {version} is not supported")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        }
        let [epochs, pays, states] = dims;
        if epochs != grid.max_epochs || pays != grid.pay_levels || states != grid.states_per_pay() {
            return Err(Error::Cache("policy dimensions do not match the manifest".into()));
        }
        let len = (epochs + 1) * pays * states;
        let values: Vec<f32> = cur.take(4 * len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let actions = cur.take(len)?.to_vec();
        let feasible: Vec<bool> = cur.take(pays * states)?.iter().map(|&b| b != 0).collect();
        if cur.pos != bytes.len() {
            return Err(Error::Cache("policy.bin has trailing bytes".into()));
        }
        let policy = SolvedPolicy::from_parts(epochs, pays, states, actions, values)?;
        Self::assemble(cfg, qm, table, theta0, grid, completion, nu_cache, feasible, Some(policy))
    }

    /// Loads a cached plan whose manifest matches `cfg`, or builds and stores
    /// a new one. Returns whether the cache was used.
    pub fn load_or_build(dir: &Path, cfg: &PlanConfig) -> Result<(Self, bool)> {
        if dir.join("manifest.json").exists() {
            match Self::load(dir) {
                Ok(plan) if plan.config == *cfg => return Ok((plan, true)),
                Ok(_) => tracing::warn!("policy cache at {} was built for another config; rebuilding", dir.display()),
                Err(e) => tracing::warn!("policy cache at {} is unusable ({e}); rebuilding", dir.display()),
            }
        }
        let plan = Self::build(cfg)?;
        plan.save(dir)?;
        Ok((plan, false))
    }

    /// One row per feasible state: `nu_bar,theta,tau,pay,action,value`.
    pub fn write_inspect_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["nu_bar", "theta", "tau", "pay", "action", "value"])?;
        let g = &self.grid;
        for tau in 0..=g.max_epochs {
            for c in 0..g.pay_levels {
                for k in 0..=g.nu_levels {
                    for t in 0..g.theta_levels {
                        let s = AggregateState { nu_bar_idx: k, theta_idx: t, tau_idx: tau, pay_idx: c };
                        if !self.is_feasible(&s) {
                            continue;
                        }
                        w.write_record([
                            format!("{:?}", g.nu_bar(k)),
                            format!("{:?}", g.theta(t)),
                            format!("{:?}", tau as f64 * self.config.epoch_minutes),
                            format!("{:?}", self.config.quality.pay_grid[c]),
                            self.action(&s).name().to_string(),
                            format!("{:?}", self.value(&s)),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Cache("policy.bin is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
