//! Marketplace simulation and trace replay.
//!
//! Ballots arrive as a Poisson process whose rate depends on the current
//! pay. Each arrival is routed to a task by the controller's selector and
//! answered by a freshly drawn worker. Controllers act at epoch boundaries.
//! Beliefs are updated with the average worker, since individual workers are
//! not identified.
//!
//! Random streams (one `ChaCha8` stream each, all from the episode seed):
//! ground truth, arrivals, worker answers, task selection, tie-breaking of
//! final answers and replay resampling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::batch::{BatchState, CountCache};
use crate::error::{invalid, Error, Result};
use crate::pricing::{default_rates, Action, GaoPlan, Plan, PlanConfig};
use crate::quality::{QualityConfig, QualityManager};
use crate::selector::SelectorPolicy;
use crate::trace::{BallotEvent, BallotTrace};
use crate::worker::{sample_ballot, DifficultyPrior, WorkerPool};

const STREAM_TRUTH: u64 = 0;
const STREAM_ARRIVALS: u64 = 1;
const STREAM_WORKERS: u64 = 2;
const STREAM_SELECTOR: u64 = 3;
const STREAM_TIES: u64 = 4;
const STREAM_RESAMPLE: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Marketplace and batch parameters. Read from TOML, where `seed` is
/// required and every other key defaults to the values of
/// [`SimConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_tasks: usize,
    pub prior: DifficultyPrior,
    pub pool: WorkerPool,
    /// Expected ballots per hour at each pay level.
    pub rates_per_hour: Vec<f64>,
    pub epoch_minutes: f64,
    pub deadline_minutes: f64,
    /// Penalty, pay grid and lookahead settings.
    pub quality: QualityConfig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_tasks: 500,
            prior: DifficultyPrior::default(),
            pool: WorkerPool::default(),
            rates_per_hour: default_rates(500, 6),
            epoch_minutes: 15.0,
            deadline_minutes: 360.0,
            quality: QualityConfig::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        if !table.contains_key("seed") {
            return Err(invalid("simulation config must set `seed`"));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.quality.validate()?;
        self.prior.validate()?;
        self.pool.validate()?;
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
        if !(self.epoch_minutes > 0.0 && self.deadline_minutes >= self.epoch_minutes) {
            return Err(invalid("the deadline must span at least one positive-length epoch"));
        }
        Ok(())
    }

    /// Number of pricing epochs before the deadline.
    pub fn epochs(&self) -> usize {
        (self.deadline_minutes / self.epoch_minutes).round().max(1.0) as usize
    }

    /// Planner settings matching this marketplace, with the horizon set to
    /// this deadline and the given arrival-rate scale.
    pub fn plan_config(&self, rate_scale: f64) -> PlanConfig {
        PlanConfig {
            n_tasks: self.n_tasks,
            quality: self.quality.clone(),
            prior: self.prior,
            pool: self.pool,
            rates_per_hour: self.rates_per_hour.iter().map(|r| r * rate_scale).collect(),
            epoch_minutes: self.epoch_minutes,
            max_epochs: self.epochs(),
            seed: PlanConfig::default().seed,
            ..PlanConfig::default()
        }
    }
}

/// Hidden per-task answers and difficulties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answers: Vec<u8>,
    pub difficulties: Vec<f64>,
}

impl GroundTruth {
    pub fn sample<R: Rng + ?Sized>(n: usize, prior: &DifficultyPrior, rng: &mut R) -> Self {
        let mut answers = Vec::with_capacity(n);
        let mut difficulties = Vec::with_capacity(n);
        for _ in 0..n {
            answers.push(u8::from(rng.random::<bool>()));
            difficulties.push(prior.sample(rng));
        }
        Self { answers, difficulties }
    }
}

/// Serializable controller description; serialized as its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ControllerSpec {
    Adaptive { selector: SelectorPolicy, sync: bool },
    /// Pay level index (0-based); the name uses the 1-based level.
    StaticPay { pay_level: usize, selector: SelectorPolicy },
    GaoFixed { r: usize },
}

impl ControllerSpec {
    pub const ADAPTIVE: Self = Self::Adaptive { selector: SelectorPolicy::Greedy, sync: true };
}

fn selector_suffix(s: SelectorPolicy) -> &'static str {
    match s {
        SelectorPolicy::Greedy => "",
        SelectorPolicy::Random => "-random",
        SelectorPolicy::RandomRobin => "-random-robin",
    }
}

impl fmt::Display for ControllerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Adaptive { selector, sync } => {
                write!(f, "adaptive{}{}", selector_suffix(selector), if sync { "" } else { "-nosync" })
            }
            Self::StaticPay { pay_level, selector } => write!(f, "static-{}{}", pay_level + 1, selector_suffix(selector)),
            Self::GaoFixed { r } => write!(f, "gao-{r}"),
        }
    }
}

impl FromStr for ControllerSpec {
    type Err = Error;

    /// `adaptive[-random|-random-robin][-nosync]`, `static-<level>[-random|-random-robin]`
    /// with a 1-based level, or `gao-<r>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("unknown controller `{s}`"));
        let split_selector = |rest: &str| -> (SelectorPolicy, String) {
            if let Some(x) = rest.strip_suffix("-random-robin") {
                (SelectorPolicy::RandomRobin, x.to_string())
            } else if let Some(x) = rest.strip_suffix("-random") {
                (SelectorPolicy::Random, x.to_string())
            } else {
                (SelectorPolicy::Greedy, rest.to_string())
            }
        };
        if let Some(rest) = s.strip_prefix("adaptive") {
            let (rest, sync) = match rest.strip_suffix("-nosync") {
                Some(x) => (x, false),
                None => (rest, true),
            };
            let (selector, left) = split_selector(rest);
            return if left.is_empty() { Ok(Self::Adaptive { selector, sync }) } else { Err(bad()) };
        }
        if let Some(rest) = s.strip_prefix("static-") {
            let (selector, level) = split_selector(rest);
            let level: usize = level.parse().map_err(|_| bad())?;
            if level == 0 {
                return Err(bad());
            }
            return Ok(Self::StaticPay { pay_level: level - 1, selector });
        }
        if let Some(rest) = s.strip_prefix("gao-") {
            let r: usize = rest.parse().map_err(|_| bad())?;
            if r == 0 {
                return Err(bad());
            }
            return Ok(Self::GaoFixed { r });
        }
        Err(bad())
    }
}

impl TryFrom<String> for ControllerSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ControllerSpec> for String {
    fn from(c: ControllerSpec) -> Self {
        c.to_string()
    }
}

/// A controller bound to its solved policy.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Adaptive { plan: &'a Plan, selector: SelectorPolicy, sync: bool },
    StaticPay { pay_level: usize, selector: SelectorPolicy },
    GaoFixed { plan: &'a GaoPlan },
}

impl Controller<'_> {
    pub fn spec(&self) -> ControllerSpec {
        match *self {
            Controller::Adaptive { selector, sync, .. } => ControllerSpec::Adaptive { selector, sync },
            Controller::StaticPay { pay_level, selector } => ControllerSpec::StaticPay { pay_level, selector },
            Controller::GaoFixed { plan } => ControllerSpec::GaoFixed { r: plan.model().quota() },
        }
    }
}

/// State at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Minutes elapsed at the end of the epoch.
    pub tau_min: f64,
    pub pay: f64,
    pub ballots: u64,
    pub nu_bar_tracked: Option<f64>,
    pub nu_bar_true: f64,
    pub theta_tracked: Option<f64>,
    pub theta_true: f64,
    pub cum_cost: f64,
}

pub const EPOCH_HEADER: [&str; 9] =
    ["epoch", "tau_min", "pay", "ballots", "nu_bar_tracked", "nu_bar_true", "theta_tracked", "theta_true", "cum_cost"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub controller: String,
    pub seed: u64,
    /// Resampling seed of a replayed episode.
    pub resample_seed: Option<u64>,
    pub n_tasks: usize,
    pub deadline_minutes: f64,
    /// `-P * wrong - total_cost`.
    pub utility: f64,
    pub accuracy: f64,
    pub wrong: usize,
    pub total_cost: f64,
    pub ballots: u64,
    /// Epoch at whose start the controller terminated, if it did.
    pub terminated_at: Option<usize>,
    /// Pay in force during each epoch that ran.
    pub pay_schedule: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub answers: Vec<u8>,
    pub truth: Vec<u8>,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_epoch_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(EPOCH_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:?}", e.tau_min),
                format!("{:?}", e.pay),
                e.ballots.to_string(),
                opt(e.nu_bar_tracked),
                format!("{:?}", e.nu_bar_true),
                opt(e.theta_tracked),
                format!("{:?}", e.theta_true),
                format!("{:?}", e.cum_cost),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Arrival {
    timestamp_sec: u64,
    worker_id: u32,
    event: Option<usize>,
}

trait Source {
    fn arrivals(&mut self, pay_level: usize, start_sec: f64, end_sec: f64) -> Vec<Arrival>;
    /// Answer to `task` for this arrival, or `None` if none can be produced.
    fn label(&mut self, arrival: &Arrival, task: u32, pay_level: usize) -> Option<u8>;
}

struct MarketSource<'a> {
    rates_per_hour: &'a [f64],
    pool: WorkerPool,
    truth: &'a GroundTruth,
    arrivals: ChaCha8Rng,
    workers: ChaCha8Rng,
    next_worker: u32,
}

impl Source for MarketSource<'_> {
    fn arrivals(&mut self, pay_level: usize, start_sec: f64, end_sec: f64) -> Vec<Arrival> {
        let mean = self.rates_per_hour[pay_level] * (end_sec - start_sec) / 3600.0;
        let count = if mean > 0.0 { Poisson::new(mean).expect("positive finite rate").sample(&mut self.arrivals) as usize } else { 0 };
        let mut times: Vec<u64> = (0..count).map(|_| (start_sec + self.arrivals.random::<f64>() * (end_sec - start_sec)).floor() as u64).collect();
        times.sort_unstable();
        times
            .into_iter()
            .map(|t| {
                self.next_worker += 1;
                Arrival { timestamp_sec: t, worker_id: self.next_worker - 1, event: None }
            })
            .collect()
    }

    fn label(&mut self, _: &Arrival, task: u32, _: usize) -> Option<u8> {
        let gamma = self.pool.sample(&mut self.workers);
        let q = task as usize;
        Some(sample_ballot(&mut self.workers, gamma, self.truth.difficulties[q], self.truth.answers[q]).expect("binary truth"))
    }
}

struct ReplaySource<'a> {
    events: &'a [BallotEvent],
    pos: usize,
    pools: Vec<Vec<u8>>,
    rng: ChaCha8Rng,
}

impl Source for ReplaySource<'_> {
    fn arrivals(&mut self, _: usize, start_sec: f64, end_sec: f64) -> Vec<Arrival> {
        let mut out = Vec::new();
        while self.pos < self.events.len() && (self.events[self.pos].timestamp_sec as f64) < end_sec {
            let e = &self.events[self.pos];
            if e.timestamp_sec as f64 >= start_sec {
                out.push(Arrival { timestamp_sec: e.timestamp_sec, worker_id: e.worker_id, event: Some(self.pos) });
            }
            self.pos += 1;
        }
        out
    }

    fn label(&mut self, arrival: &Arrival, task: u32, pay_level: usize) -> Option<u8> {
        let e = &self.events[arrival.event.expect("replayed arrivals carry their event")];
        if e.task_id == task && e.pay_level == pay_level {
            return Some(e.label);
        }
        let pool = &self.pools[task as usize];
        (!pool.is_empty()).then(|| pool[self.rng.random_range(0..pool.len())])
    }
}

/// Tasks as seen by the controller's routing.
enum Tasks {
    Managed(BatchState),
    /// Round-robin up to `quota` ballots per task.
    Quota { nodes: Vec<u32>, quota: usize, received: usize },
}

impl Tasks {
    fn nodes(&self) -> &[u32] {
        match self {
            Tasks::Managed(b) => b.nodes(),
            Tasks::Quota { nodes, .. } => nodes,
        }
    }

    fn select(&mut self, rng: &mut ChaCha8Rng) -> Option<u32> {
        match self {
            Tasks::Managed(b) => b.select(rng),
            Tasks::Quota { nodes, quota, received } => (*received < nodes.len() * *quota).then(|| (*received % nodes.len()) as u32),
        }
    }

    fn apply(&mut self, cache: &mut CountCache, task: u32, ballot: u8) {
        match self {
            Tasks::Managed(b) => b.apply(cache, task, ballot),
            Tasks::Quota { nodes, received, .. } => {
                nodes[task as usize] = cache.child(nodes[task as usize], ballot);
                *received += 1;
            }
        }
    }

    fn set_pay_level(&mut self, cache: &mut CountCache, pay_level: usize) {
        if let Tasks::Managed(b) = self {
            b.set_pay_level(cache, pay_level);
        }
    }

    fn nu_bar(&self, cache: &CountCache) -> f64 {
        let nodes = self.nodes();
        nodes.iter().map(|&n| cache.quality(n)).sum::<f64>() / nodes.len() as f64
    }

    fn theta(&self, cache: &mut CountCache, pay_level: usize) -> f64 {
        self.nodes().iter().map(|&n| cache.theta(n, pay_level)).sum()
    }
}

fn check_compatible(cfg: &SimConfig, pc: &PlanConfig, epochs: usize, max_epochs: usize) -> Result<()> {
    if pc.n_tasks != cfg.n_tasks || pc.quality.pay_grid != cfg.quality.pay_grid || pc.epoch_minutes != cfg.epoch_minutes {
        return Err(invalid("policy was built for a different batch size, pay grid or epoch length"));
    }
    if epochs > max_epochs {
        return Err(invalid(format!("deadline of {epochs} epochs exceeds the policy horizon of {max_epochs}")));
    }
    Ok(())
}

fn validate_controller(cfg: &SimConfig, controller: &Controller) -> Result<()> {
    let epochs = cfg.epochs();
    match controller {
        Controller::Adaptive { plan, .. } => check_compatible(cfg, plan.config(), epochs, plan.grid().max_epochs),
        Controller::StaticPay { pay_level, .. } if *pay_level >= cfg.quality.pay_grid.len() => {
            Err(invalid(format!("static pay level {} outside the pay grid", pay_level + 1)))
        }
        Controller::StaticPay { .. } => Ok(()),
        Controller::GaoFixed { plan } => {
            let p = plan.policy();
            if p.pay_levels() != cfg.quality.pay_grid.len() {
                return Err(invalid("fixed-quota policy was built for a different pay grid"));
            }
            if epochs > p.max_epochs() {
                return Err(invalid(format!("deadline of {epochs} epochs exceeds the policy horizon of {}", p.max_epochs())));
            }
            Ok(())
        }
    }
}

fn apply_pay_change(action: Action, pay: usize, levels: usize) -> Result<usize> {
    match action {
        Action::Up if pay + 1 < levels => Ok(pay + 1),
        Action::Down if pay > 0 => Ok(pay - 1),
        _ => Err(Error::InvalidAction(format!("{} unavailable at pay level {}", action.name(), pay + 1))),
    }
}

fn run_core(
    cfg: &SimConfig,
    controller: &Controller,
    source: &mut dyn Source,
    truth: &[u8],
    resample_seed: Option<u64>,
) -> Result<(RunResult, BallotTrace)> {
    let seed = cfg.seed;
    cfg.validate()?;
    validate_controller(cfg, controller)?;
    let n = cfg.n_tasks;
    let qm = QualityManager::new(cfg.quality.clone(), cfg.prior.discretize()?)?;
    let penalty = cfg.quality.penalty;
    let pay_grid = cfg.quality.pay_grid.clone();
    let levels = pay_grid.len();
    let mut cache = CountCache::new(qm.clone(), vec![qm.fresh_belief()]);
    let root = cache.root(0);
    let mut selector_rng = stream(seed, STREAM_SELECTOR);

    let mut pay = match *controller {
        Controller::StaticPay { pay_level, .. } => pay_level,
        _ => 0,
    };
    let mut tasks = match *controller {
        Controller::Adaptive { selector, .. } | Controller::StaticPay { selector, .. } => {
            Tasks::Managed(BatchState::new(&mut cache, vec![root; n], selector, pay))
        }
        Controller::GaoFixed { plan } => Tasks::Quota { nodes: vec![root; n], quota: plan.model().quota(), received: 0 },
    };
    // continuous (nu_bar, theta) the adaptive controller believes in
    let mut tracked = match *controller {
        Controller::Adaptive { plan, .. } => Some((0.0, plan.theta0()[0])),
        _ => None,
    };

    let epochs = cfg.epochs();
    let epoch_sec = cfg.epoch_minutes * 60.0;
    let mut trace = BallotTrace::default();
    let mut records = Vec::with_capacity(epochs);
    let mut pay_schedule = Vec::with_capacity(epochs);
    let mut total_cost = 0.0;
    let mut total_ballots = 0u64;
    let mut terminated_at = None;

    for e in 0..epochs {
        let remaining = epochs - e;
        let mut stop = false;
        match *controller {
            Controller::Adaptive { plan, sync, .. } => {
                let tau = plan.grid().max_epochs - remaining;
                if sync {
                    tracked = Some((tasks.nu_bar(&cache), tasks.theta(&mut cache, pay)));
                }
                let (mut nu, mut theta) = tracked.expect("adaptive tracks aggregates");
                let mut action = plan.action(&plan.snap(nu, theta, tau, pay));
                for _ in 0..=levels {
                    match action {
                        Action::Up | Action::Down => {
                            let next = apply_pay_change(action, pay, levels)?;
                            if sync {
                                theta = tasks.theta(&mut cache, next);
                            } else {
                                theta = (theta + plan.theta0()[next] - plan.theta0()[pay]).max(0.0);
                            }
                            pay = next;
                            action = plan.next_in_chain(&plan.snap(nu, theta, tau, pay), action);
                        }
                        Action::Terminate => {
                            stop = true;
                            break;
                        }
                        Action::NoChange => break,
                    }
                }
                if matches!(action, Action::Up | Action::Down) {
                    return Err(Error::InvalidAction("pay-change chain did not settle".into()));
                }
                nu = nu.clamp(0.0, 1.0);
                tracked = Some((nu, theta));
            }
            Controller::GaoFixed { plan } => {
                let tau = plan.policy().max_epochs() - remaining;
                let Tasks::Quota { quota, received, .. } = &tasks else { unreachable!("quota controller routes round-robin") };
                let left = (n * quota - received) as f64;
                let mut action = plan.action(&plan.state(left, tau, pay));
                for _ in 0..=levels {
                    match action {
                        Action::Up | Action::Down => {
                            pay = apply_pay_change(action, pay, levels)?;
                            action = plan.next_in_chain(&plan.state(left, tau, pay), action);
                        }
                        Action::Terminate => {
                            stop = true;
                            break;
                        }
                        Action::NoChange => break,
                    }
                }
                if matches!(action, Action::Up | Action::Down) {
                    return Err(Error::InvalidAction("pay-change chain did not settle".into()));
                }
            }
            Controller::StaticPay { .. } => {}
        }
        if stop {
            terminated_at = Some(e);
            break;
        }
        tasks.set_pay_level(&mut cache, pay);
        pay_schedule.push(pay_grid[pay]);

        let start = e as f64 * epoch_sec;
        let mut ballots = 0u64;
        for arrival in source.arrivals(pay, start, start + epoch_sec) {
            let Some(task) = tasks.select(&mut selector_rng) else { break };
            let Some(label) = source.label(&arrival, task, pay) else { continue };
            tasks.apply(&mut cache, task, label);
            trace.push(BallotEvent { timestamp_sec: arrival.timestamp_sec, task_id: task, worker_id: arrival.worker_id, label, pay_level: pay });
            ballots += 1;
        }
        let epoch_cost = pay_grid[pay] * ballots as f64;
        total_cost += epoch_cost;
        total_ballots += ballots;

        if let (Controller::Adaptive { plan, .. }, Some((nu, theta))) = (controller, tracked) {
            let nu = (nu + plan.nu_cache().interpolated_delta(pay, nu, ballots as f64, plan.grid().delta_theta)).clamp(0.0, 1.0);
            tracked = Some((nu, (theta - ballots as f64).max(0.0)));
        }
        records.push(EpochRecord {
            epoch: e,
            tau_min: (e + 1) as f64 * cfg.epoch_minutes,
            pay: pay_grid[pay],
            ballots,
            nu_bar_tracked: tracked.map(|t| t.0),
            nu_bar_true: tasks.nu_bar(&cache),
            theta_tracked: tracked.map(|t| t.1),
            theta_true: tasks.theta(&mut cache, pay),
            cum_cost: total_cost,
        });
    }

    let mut ties = stream(seed, STREAM_TIES);
    let answers: Vec<u8> = tasks
        .nodes()
        .iter()
        .map(|&node| cache.belief(node).map_answer().unwrap_or_else(|| u8::from(ties.random::<bool>())))
        .collect();
    let wrong = answers.iter().zip(truth).filter(|(a, t)| a != t).count();
    let result = RunResult {
        controller: controller.spec().to_string(),
        seed,
        resample_seed,
        n_tasks: n,
        deadline_minutes: cfg.deadline_minutes,
        utility: -penalty * wrong as f64 - total_cost,
        accuracy: 1.0 - wrong as f64 / n as f64,
        wrong,
        total_cost,
        ballots: total_ballots,
        terminated_at,
        pay_schedule,
        epochs: records,
        answers,
        truth: truth.to_vec(),
    };
    Ok((result, trace))
}

/// Runs one simulated episode with `cfg.seed`.
pub fn run_episode(cfg: &SimConfig, controller: &Controller) -> Result<RunResult> {
    run_episode_traced(cfg, controller).map(|(r, _)| r)
}

/// Runs one episode and also returns every ballot taken.
pub fn run_episode_traced(cfg: &SimConfig, controller: &Controller) -> Result<(RunResult, BallotTrace)> {
    let truth = GroundTruth::sample(cfg.n_tasks, &cfg.prior, &mut stream(cfg.seed, STREAM_TRUTH));
    let mut source = MarketSource {
        rates_per_hour: &cfg.rates_per_hour,
        pool: cfg.pool,
        truth: &truth,
        arrivals: stream(cfg.seed, STREAM_ARRIVALS),
        workers: stream(cfg.seed, STREAM_WORKERS),
        next_worker: 0,
    };
    run_core(cfg, controller, &mut source, &truth.answers, None)
}

/// Hidden truth of the episode `run_episode` would simulate for `cfg`.
pub fn ground_truth(cfg: &SimConfig) -> GroundTruth {
    GroundTruth::sample(cfg.n_tasks, &cfg.prior, &mut stream(cfg.seed, STREAM_TRUTH))
}

/// Replays recorded arrivals. A recorded ballot is used when the routed task
/// and the pay match the record; otherwise a random recorded ballot of the
/// routed task is drawn with `resample_seed`. Tasks without recorded
/// ballots cannot be answered and the arrival is lost.
pub fn replay_episode(trace: &BallotTrace, gold: &[u8], controller: &Controller, cfg: &SimConfig, resample_seed: u64) -> Result<RunResult> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("trace has no ballots".into()));
    }
    if gold.len() != cfg.n_tasks {
        return Err(Error::InvalidInput(format!("{} gold labels for {} tasks", gold.len(), cfg.n_tasks)));
    }
    if let Some(&g) = gold.iter().find(|&&g| g > 1) {
        return Err(Error::InvalidInput(format!("non-binary gold label {g}")));
    }
    trace.validate_pay_levels(cfg.quality.pay_grid.len())?;
    let mut pools = vec![Vec::new(); gold.len()];
    for e in trace.events() {
        let pool = pools.get_mut(e.task_id as usize).ok_or_else(|| Error::InvalidInput(format!("task {} has no gold label", e.task_id)))?;
        pool.push(e.label);
    }
    let mut source = ReplaySource { events: trace.events(), pos: 0, pools, rng: stream(resample_seed, STREAM_RESAMPLE) };
    run_core(cfg, controller, &mut source, gold, Some(resample_seed)).map(|(r, _)| r)
}

/// Average pay per ballot, absent when no ballot was bought.
pub fn avg_pay_per_ballot(result: &RunResult) -> Option<f64> {
    (result.ballots > 0).then(|| result.total_cost / result.ballots as f64)
}
