//! Experiment suites: every (controller, deadline, rate scale, seed) cell is
//! run in parallel, summarized per cell and compared against a reference
//! controller with Welch's t-test.
//!
//! A rate scale multiplies the arrival rates the planner is built with; the
//! marketplace keeps the configured rates, so scales other than 1 measure
//! robustness to misestimated rates.
//!
//! Normalized utility is `1 + (x - r) / |r|` for reference mean `r`: the
//! reference maps to 1.0, and order is kept for either sign of `r`.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::pricing::{GaoPlan, Plan};
use crate::quality::QualityManager;
use crate::sim::{avg_pay_per_ballot, replay_episode, run_episode, Controller, ControllerSpec, RunResult, SimConfig};
use crate::trace::{read_gold_csv, BallotTrace};

fn default_scales() -> Vec<f64> {
    vec![1.0]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_reference() -> ControllerSpec {
    ControllerSpec::ADAPTIVE
}

/// Recorded ballots and gold labels for a replay suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayInput {
    pub trace: PathBuf,
    pub gold: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub controllers: Vec<ControllerSpec>,
    #[serde(default = "default_reference")]
    pub reference: ControllerSpec,
    pub deadlines_minutes: Vec<f64>,
    #[serde(default = "default_scales")]
    pub rate_scales: Vec<f64>,
    /// Seeds per cell: `first_seed..first_seed + seeds`. In a replay suite
    /// these are the resampling seeds.
    pub seeds: usize,
    #[serde(default)]
    pub first_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Directory of saved plans, one subdirectory per rate scale.
    #[serde(default)]
    pub plan_cache: Option<PathBuf>,
    #[serde(default)]
    pub replay: Option<ReplayInput>,
    /// Marketplace settings; `deadline_minutes` and `seed` are set per cell.
    #[serde(default)]
    pub sim: SimConfig,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // relative paths are taken from the experiment file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = spec.replay.as_mut() {
            fix(&mut r.trace);
            fix(&mut r.gold);
        }
        if let Some(p) = spec.plan_cache.as_mut() {
            fix(p);
        }
        if let Some(p) = spec.output_dir.as_mut() {
            fix(p);
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.controllers.is_empty() {
            return Err(invalid("an experiment needs at least one controller"));
        }
        if self.deadlines_minutes.is_empty() || self.rate_scales.is_empty() {
            return Err(invalid("an experiment needs at least one deadline and one rate scale"));
        }
        if self.seeds == 0 {
            return Err(invalid("an experiment needs at least one seed per cell"));
        }
        if self.rate_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("rate scales must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("significance level must lie in (0, 1)"));
        }
        for &d in &self.deadlines_minutes {
            SimConfig { deadline_minutes: d, ..self.sim.clone() }.validate()?;
        }
        Ok(())
    }

    pub fn max_deadline(&self) -> f64 {
        self.deadlines_minutes.iter().copied().fold(0.0, f64::max)
    }

    /// Planner settings for one rate scale, with the horizon of the longest
    /// deadline.
    pub fn plan_config(&self, rate_scale: f64) -> crate::pricing::PlanConfig {
        SimConfig { deadline_minutes: self.max_deadline(), ..self.sim.clone() }.plan_config(rate_scale)
    }

    /// Subdirectory of a plan cache holding the plan for `rate_scale`.
    pub fn plan_dir(root: &Path, rate_scale: f64) -> PathBuf {
        root.join(format!("scale-{rate_scale}"))
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.seeds as u64).map(move |i| self.first_seed + i)
    }

    fn all_controllers(&self) -> Vec<ControllerSpec> {
        let mut out = self.controllers.clone();
        if !out.contains(&self.reference) {
            out.insert(0, self.reference);
        }
        out
    }
}

/// Solved policies for every rate scale of a suite.
#[derive(Debug, Default)]
pub struct SuitePlans {
    /// Keyed by the index into `rate_scales`.
    adaptive: BTreeMap<usize, Plan>,
    gao: BTreeMap<(usize, usize), GaoPlan>,
}

impl SuitePlans {
    /// Builds (or loads from `spec.plan_cache`) what the controllers need,
    /// with the horizon of the longest deadline.
    pub fn prepare(spec: &ExperimentSpec) -> Result<Self> {
        let controllers = spec.all_controllers();
        let needs_adaptive = controllers.iter().any(|c| matches!(c, ControllerSpec::Adaptive { .. }));
        let quotas: Vec<usize> = controllers
            .iter()
            .filter_map(|c| match c {
                ControllerSpec::GaoFixed { r } => Some(*r),
                _ => None,
            })
            .collect();
        let mut plans = Self::default();
        for (i, &scale) in spec.rate_scales.iter().enumerate() {
            let cfg = spec.plan_config(scale);
            if needs_adaptive {
                let plan = match &spec.plan_cache {
                    Some(root) => {
                        let dir = ExperimentSpec::plan_dir(root, scale);
                        let (plan, cached) = Plan::load_or_build(&dir, &cfg)?;
                        if !cached {
                            tracing::warn!("no usable plan in {}; built and saved a new one", dir.display());
                        }
                        plan
                    }
                    None => Plan::build(&cfg)?,
                };
                plans.adaptive.insert(i, plan);
            }
            if !quotas.is_empty() {
                let qm = QualityManager::new(cfg.quality.clone(), cfg.prior.discretize()?)?;
                for &r in &quotas {
                    plans.gao.insert((i, r), GaoPlan::build(&cfg, &qm, r)?);
                }
            }
        }
        Ok(plans)
    }

    /// Binds `spec` to the plans prepared for rate scale index `scale_idx`.
    pub fn controller(&self, spec: ControllerSpec, scale_idx: usize) -> Result<Controller<'_>> {
        let missing = || Error::InvalidInput(format!("no plan prepared for {spec}"));
        Ok(match spec {
            ControllerSpec::Adaptive { selector, sync } => {
                Controller::Adaptive { plan: self.adaptive.get(&scale_idx).ok_or_else(missing)?, selector, sync }
            }
            ControllerSpec::StaticPay { pay_level, selector } => Controller::StaticPay { pay_level, selector },
            ControllerSpec::GaoFixed { r } => Controller::GaoFixed { plan: self.gao.get(&(scale_idx, r)).ok_or_else(missing)? },
        })
    }
}

/// Mean, sample standard deviation and a two-sided 95% t-interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Some(Self { mean, sd: 0.0, ci_low: None, ci_high: None });
        }
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
        let half = t * sd / n.sqrt();
        Some(Self { mean, sd, ci_low: Some(mean - half), ci_high: Some(mean + half) })
    }
}

/// Welch's unequal-variance t-test of `a` against `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub fn welch_test(a: &[f64], b: &[f64], alpha: f64) -> Option<Welch> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (sa, sb) = (Stat::of(a)?, Stat::of(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sa.sd * sa.sd / na, sb.sd * sb.sd / nb);
    let se2 = va + vb;
    let diff = sa.mean - sb.mean;
    if se2 == 0.0 {
        let p = if diff == 0.0 { 1.0 } else { 0.0 };
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Some(Welch { t, df: na + nb - 2.0, p_value: p, significant: p < alpha });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Some(Welch { t, df, p_value: p, significant: p < alpha })
}

/// `1 + (x - reference) / |reference|`; absent for a zero reference.
pub fn normalized_utility(x: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| 1.0 + (x - reference) / reference.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub controller: ControllerSpec,
    pub deadline_minutes: f64,
    pub rate_scale: f64,
    pub runs: usize,
    pub utility: Stat,
    pub accuracy: Stat,
    pub cost: Stat,
    /// Mean over runs that bought at least one ballot.
    pub avg_pay_per_ballot: Option<f64>,
    pub normalized_utility: Option<f64>,
    /// This controller's utilities tested against the reference's; absent
    /// for the reference itself and for cells with fewer than two runs.
    pub vs_reference: Option<Welch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub controller: ControllerSpec,
    pub deadline_minutes: f64,
    pub rate_scale: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub controller: ControllerSpec,
    pub deadline_minutes: f64,
    pub rate_scale: f64,
    pub seed: u64,
    pub utility: f64,
    pub accuracy: f64,
    pub total_cost: f64,
    pub ballots: u64,
    pub avg_pay_per_ballot: Option<f64>,
}

/// Per-epoch means over seeds of a controller's tracked and true aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingPoint {
    pub controller: ControllerSpec,
    pub deadline_minutes: f64,
    pub rate_scale: f64,
    pub epoch: usize,
    pub tau_min: f64,
    pub runs: usize,
    pub nu_bar_tracked: f64,
    pub nu_bar_true: f64,
    pub theta_tracked: f64,
    pub theta_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: ControllerSpec,
    pub alpha: f64,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
    pub runs: Vec<RunRow>,
    pub tracking: Vec<TrackingPoint>,
}

impl ComparisonReport {
    pub fn empty(reference: ControllerSpec, alpha: f64) -> Self {
        Self { reference, alpha, cells: Vec::new(), failures: Vec::new(), runs: Vec::new(), tracking: Vec::new() }
    }

    /// True when no cell failed.
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn cell(&self, controller: ControllerSpec, deadline_minutes: f64, rate_scale: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.controller == controller && c.deadline_minutes == deadline_minutes && c.rate_scale == rate_scale)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.json`, `runs.csv` and the plot data files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?)?;
        let runs = dir.join("runs.csv");
        let mut w = csv::Writer::from_writer(File::create(&runs)?);
        w.write_record(["controller", "deadline_minutes", "rate_scale", "seed", "utility", "accuracy", "total_cost", "ballots", "avg_pay_per_ballot"])?;
        for r in &self.runs {
            w.write_record([
                r.controller.to_string(),
                fmt(r.deadline_minutes),
                fmt(r.rate_scale),
                r.seed.to_string(),
                fmt(r.utility),
                fmt(r.accuracy),
                fmt(r.total_cost),
                r.ballots.to_string(),
                opt(r.avg_pay_per_ballot),
            ])?;
        }
        w.flush()?;
        let mut files = vec![json, runs];
        files.extend(emit_plots_data(self, dir)?);
        Ok(files)
    }
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

struct CellKey {
    controller: ControllerSpec,
    scale_idx: usize,
    deadline: f64,
    seed: u64,
}

/// Runs every cell of `spec` with prepared plans. Failed cells are recorded
/// and the rest of the suite continues.
pub fn run_suite_with(spec: &ExperimentSpec, plans: &SuitePlans) -> Result<ComparisonReport> {
    spec.validate()?;
    let replay = match &spec.replay {
        Some(r) => Some((BallotTrace::load(&r.trace)?, read_gold_csv(File::open(&r.gold)?)?)),
        None => None,
    };
    let controllers = spec.all_controllers();
    let mut keys = Vec::new();
    for scale_idx in 0..spec.rate_scales.len() {
        for &deadline in &spec.deadlines_minutes {
            for &controller in &controllers {
                for seed in spec.seeds() {
                    keys.push(CellKey { controller, scale_idx, deadline, seed });
                }
            }
        }
    }
    tracing::info!("running {} episodes", keys.len());
    let outcomes: Vec<Result<RunResult>> = keys
        .par_iter()
        .map(|k| {
            let controller = plans.controller(k.controller, k.scale_idx)?;
            match &replay {
                None => run_episode(&SimConfig { deadline_minutes: k.deadline, seed: k.seed, ..spec.sim.clone() }, &controller),
                Some((trace, gold)) => {
                    let cfg = SimConfig { deadline_minutes: k.deadline, ..spec.sim.clone() };
                    replay_episode(trace, gold, &controller, &cfg, k.seed)
                }
            }
        })
        .collect();

    let mut report = ComparisonReport::empty(spec.reference, spec.alpha);
    // (scale, deadline, controller) -> results in seed order
    let mut groups: Vec<((usize, usize, usize), Vec<RunResult>)> = Vec::new();
    for (k, outcome) in keys.iter().zip(outcomes) {
        let scale = spec.rate_scales[k.scale_idx];
        let d_idx = spec.deadlines_minutes.iter().position(|&d| d == k.deadline).expect("deadline from the spec");
        let c_idx = controllers.iter().position(|&c| c == k.controller).expect("controller from the spec");
        let group = (k.scale_idx, d_idx, c_idx);
        if groups.last().is_none_or(|g| g.0 != group) {
            groups.push((group, Vec::new()));
        }
        match outcome {
            Ok(r) => {
                report.runs.push(RunRow {
                    controller: k.controller,
                    deadline_minutes: k.deadline,
                    rate_scale: scale,
                    seed: k.seed,
                    utility: r.utility,
                    accuracy: r.accuracy,
                    total_cost: r.total_cost,
                    ballots: r.ballots,
                    avg_pay_per_ballot: avg_pay_per_ballot(&r),
                });
                groups.last_mut().expect("group pushed above").1.push(r);
            }
            Err(e) => {
                tracing::warn!("{} at {} min, scale {scale}, seed {} failed: {e}", k.controller, k.deadline, k.seed);
                report.failures.push(CellFailure {
                    controller: k.controller,
                    deadline_minutes: k.deadline,
                    rate_scale: scale,
                    seed: k.seed,
                    error: e.to_string(),
                });
            }
        }
    }

    let ref_idx = controllers.iter().position(|&c| c == spec.reference).expect("reference is always run");
    let utilities = |results: &[RunResult]| results.iter().map(|r| r.utility).collect::<Vec<_>>();
    for ((s_idx, d_idx, c_idx), results) in &groups {
        let reference = groups.iter().find(|g| g.0 == (*s_idx, *d_idx, ref_idx)).map(|g| utilities(&g.1)).unwrap_or_default();
        let Some(utility) = Stat::of(&utilities(results)) else { continue };
        let accuracy = Stat::of(&results.iter().map(|r| r.accuracy).collect::<Vec<_>>()).expect("nonempty");
        let cost = Stat::of(&results.iter().map(|r| r.total_cost).collect::<Vec<_>>()).expect("nonempty");
        let pays: Vec<f64> = results.iter().filter_map(avg_pay_per_ballot).collect();
        let ref_mean = Stat::of(&reference).map(|s| s.mean);
        report.cells.push(CellSummary {
            controller: controllers[*c_idx],
            deadline_minutes: spec.deadlines_minutes[*d_idx],
            rate_scale: spec.rate_scales[*s_idx],
            runs: results.len(),
            utility,
            accuracy,
            cost,
            avg_pay_per_ballot: (!pays.is_empty()).then(|| pays.iter().sum::<f64>() / pays.len() as f64),
            normalized_utility: ref_mean.and_then(|r| normalized_utility(utility.mean, r)),
            vs_reference: (*c_idx != ref_idx).then(|| welch_test(&utilities(results), &reference, spec.alpha)).flatten(),
        });
        report.tracking.extend(tracking_points(controllers[*c_idx], spec.deadlines_minutes[*d_idx], spec.rate_scales[*s_idx], results));
    }
    Ok(report)
}

/// Prepares plans, runs the suite and, when `output_dir` is set, writes the
/// report there.
pub fn run_suite(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    let plans = SuitePlans::prepare(spec)?;
    let report = run_suite_with(spec, &plans)?;
    if let Some(dir) = &spec.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn tracking_points(controller: ControllerSpec, deadline: f64, scale: f64, results: &[RunResult]) -> Vec<TrackingPoint> {
    let epochs = results.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    (0..epochs)
        .filter_map(|e| {
            let rows: Vec<_> = results.iter().filter_map(|r| r.epochs.get(e)).filter(|x| x.nu_bar_tracked.is_some()).collect();
            if rows.is_empty() {
                return None;
            }
            let m = |f: &dyn Fn(&crate::sim::EpochRecord) -> f64| rows.iter().map(|x| f(x)).sum::<f64>() / rows.len() as f64;
            Some(TrackingPoint {
                controller,
                deadline_minutes: deadline,
                rate_scale: scale,
                epoch: e,
                tau_min: m(&|x| x.tau_min),
                runs: rows.len(),
                nu_bar_tracked: m(&|x| x.nu_bar_tracked.unwrap_or(f64::NAN)),
                nu_bar_true: m(&|x| x.nu_bar_true),
                theta_tracked: m(&|x| x.theta_tracked.unwrap_or(f64::NAN)),
                theta_true: m(&|x| x.theta_true),
            })
        })
        .collect()
}

pub const PLOT_FILES: [&str; 5] =
    ["utility_vs_deadline.csv", "accuracy_vs_deadline.csv", "cost_vs_deadline.csv", "avg_pay_vs_deadline.csv", "tracking.csv"];

/// Writes one CSV per figure family into `dir`; an empty report yields
/// header-only files.
pub fn emit_plots_data(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = PLOT_FILES.iter().map(|f| dir.join(f)).collect();
    let key = |c: &CellSummary| [c.controller.to_string(), fmt(c.rate_scale), fmt(c.deadline_minutes)];

    let mut w = csv::Writer::from_writer(File::create(&paths[0])?);
    w.write_record([
        "controller", "rate_scale", "deadline_minutes", "runs", "mean", "sd", "ci_low", "ci_high", "normalized", "p_value", "significant",
    ])?;
    for c in &report.cells {
        let [a, b, d] = key(c);
        let welch = c.vs_reference;
        w.write_record([
            a,
            b,
            d,
            c.runs.to_string(),
            fmt(c.utility.mean),
            fmt(c.utility.sd),
            opt(c.utility.ci_low),
            opt(c.utility.ci_high),
            opt(c.normalized_utility),
            opt(welch.map(|x| x.p_value)),
            welch.map(|x| x.significant.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    for (path, pick) in [(&paths[1], 0), (&paths[2], 1)] {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(["controller", "rate_scale", "deadline_minutes", "runs", "mean", "sd", "ci_low", "ci_high"])?;
        for c in &report.cells {
            let s = if pick == 0 { c.accuracy } else { c.cost };
            let [a, b, d] = key(c);
            w.write_record([a, b, d, c.runs.to_string(), fmt(s.mean), fmt(s.sd), opt(s.ci_low), opt(s.ci_high)])?;
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_writer(File::create(&paths[3])?);
    w.write_record(["controller", "rate_scale", "deadline_minutes", "avg_pay_per_ballot"])?;
    for c in &report.cells {
        let [a, b, d] = key(c);
        w.write_record([a, b, d, opt(c.avg_pay_per_ballot)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(File::create(&paths[4])?);
    w.write_record([
        "controller", "rate_scale", "deadline_minutes", "epoch", "tau_min", "runs", "nu_bar_tracked", "nu_bar_true", "theta_tracked", "theta_true",
    ])?;
    for t in &report.tracking {
        w.write_record([
            t.controller.to_string(),
            fmt(t.rate_scale),
            fmt(t.deadline_minutes),
            t.epoch.to_string(),
            fmt(t.tau_min),
            t.runs.to_string(),
            fmt(t.nu_bar_tracked),
            fmt(t.nu_bar_true),
            fmt(t.theta_tracked),
            fmt(t.theta_true),
        ])?;
    }
    w.flush()?;
    Ok(paths)
}
