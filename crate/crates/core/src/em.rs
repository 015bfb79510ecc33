//! Expectation-maximization over worker error rates and task difficulties.
//!
//! The E-step computes the posterior of each task's true answer under the
//! current parameters. The M-step runs projected gradient ascent with step
//! halving on the expected complete-data log-likelihood plus the log prior
//! of each task's difficulty, so every round is a generalized EM step and the
//! observed-data objective never decreases.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::BallotTrace;
use crate::worker::DifficultyPrior;

const GAMMA_MAX: f64 = 50.0;
const D_MAX: f64 = 1.0 - 1e-6;
const A_MAX: f64 = 1.0 - 1e-12;
const INNER_STEPS: usize = 12;

/// Which parameters the M-step re-estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmMode {
    /// Worker error rates and task difficulties.
    #[default]
    Full,
    /// Task difficulties only; worker error rates stay at their initial value.
    TasksOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub init_gamma: f64,
    pub mode: EmMode,
    pub max_rounds: usize,
    pub tolerance: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { init_gamma: 1.0, mode: EmMode::Full, max_rounds: 500, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmEstimate {
    pub worker_gamma: BTreeMap<u32, f64>,
    pub task_difficulty: BTreeMap<u32, f64>,
    /// Posterior probability that each task's answer is 1.
    pub posterior_one: BTreeMap<u32, f64>,
    /// Objective after every round (index 0 is the initial point).
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl EmEstimate {
    pub fn answers(&self) -> BTreeMap<u32, u8> {
        self.posterior_one.iter().map(|(&t, &p)| (t, u8::from(p > 0.5))).collect()
    }
}

pub fn em_estimate(trace: &BallotTrace, prior: &DifficultyPrior, init_gamma: f64) -> Result<EmEstimate> {
    em_estimate_with(trace, prior, &EmOptions { init_gamma, ..EmOptions::default() })
}

struct Problem {
    // (task index, worker index, label)
    ballots: Vec<(usize, usize, u8)>,
    n_tasks: usize,
    n_workers: usize,
    prior: DifficultyPrior,
}

#[inline]
fn acc(gamma: f64, d: f64) -> f64 {
    (0.5 * (1.0 + (1.0 - d).powf(gamma))).min(A_MAX)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Problem {
    /// Log-likelihood of each answer per task, `(log p(ballots | t=0), log p(ballots | t=1))`.
    fn answer_log_likelihoods(&self, gamma: &[f64], d: &[f64]) -> Vec<(f64, f64)> {
        let mut ll = vec![(0.0, 0.0); self.n_tasks];
        for &(q, w, l) in &self.ballots {
            let a = acc(gamma[w], d[q]);
            let (right, wrong) = (a.ln(), (1.0 - a).ln());
            if l == 1 {
                ll[q].0 += wrong;
                ll[q].1 += right;
            } else {
                ll[q].0 += right;
                ll[q].1 += wrong;
            }
        }
        ll
    }

    fn log_prior(&self, d: &[f64]) -> f64 {
        d.iter().map(|&x| self.prior.log_density(x)).sum()
    }

    fn observed_objective(&self, gamma: &[f64], d: &[f64]) -> f64 {
        let half = 0.5f64.ln();
        self.answer_log_likelihoods(gamma, d)
            .iter()
            .map(|&(l0, l1)| log_sum_exp(half + l0, half + l1))
            .sum::<f64>()
            + self.log_prior(d)
    }

    fn posteriors(&self, gamma: &[f64], d: &[f64]) -> Vec<f64> {
        self.answer_log_likelihoods(gamma, d)
            .iter()
            .map(|&(l0, l1)| 1.0 / (1.0 + (l0 - l1).exp()))
            .collect()
    }

    fn expected_complete(&self, post: &[f64], gamma: &[f64], d: &[f64]) -> f64 {
        let mut q = 0.0;
        for &(t, w, l) in &self.ballots {
            let p = if l == 1 { post[t] } else { 1.0 - post[t] };
            let a = acc(gamma[w], d[t]);
            q += p * a.ln() + (1.0 - p) * (1.0 - a).ln();
        }
        q + self.log_prior(d)
    }

    fn gradient(&self, post: &[f64], gamma: &[f64], d: &[f64], g_gamma: &mut [f64], g_d: &mut [f64]) {
        g_gamma.iter_mut().for_each(|x| *x = 0.0);
        g_d.iter_mut().for_each(|x| *x = 0.0);
        for &(t, w, l) in &self.ballots {
            let p = if l == 1 { post[t] } else { 1.0 - post[t] };
            let (gm, dd) = (gamma[w], d[t]);
            let a = acc(gm, dd);
            let dq_da = p / a - (1.0 - p) / (1.0 - a);
            let one_minus = 1.0 - dd;
            let u = one_minus.powf(gm);
            let da_dgamma = 0.5 * u * one_minus.ln();
            let da_dd = if gm == 0.0 { 0.0 } else { -0.5 * gm * one_minus.powf(gm - 1.0) };
            g_gamma[w] += dq_da * da_dgamma;
            g_d[t] += dq_da * da_dd;
        }
        if let crate::worker::PriorKind::Beta { a, b } = self.prior.kind {
            for (g, &x) in g_d.iter_mut().zip(d) {
                let x = x.clamp(1e-12, 1.0 - 1e-12);
                *g += (a - 1.0) / x - (b - 1.0) / (1.0 - x);
            }
        }
    }
}

pub fn em_estimate_with(trace: &BallotTrace, prior: &DifficultyPrior, opts: &EmOptions) -> Result<EmEstimate> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("EM needs a nonempty ballot trace".into()));
    }
    prior.validate()?;
    if !(opts.init_gamma >= 0.0 && opts.init_gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("initial gamma must be >= 0, got {}", opts.init_gamma)));
    }
    let mut task_ids = BTreeMap::new();
    let mut worker_ids = BTreeMap::new();
    for e in trace.events() {
        let nt = task_ids.len();
        task_ids.entry(e.task_id).or_insert(nt);
        let nw = worker_ids.len();
        worker_ids.entry(e.worker_id).or_insert(nw);
    }
    let problem = Problem {
        ballots: trace.events().iter().map(|e| (task_ids[&e.task_id], worker_ids[&e.worker_id], e.label)).collect(),
        n_tasks: task_ids.len(),
        n_workers: worker_ids.len(),
        prior: *prior,
    };

    // Per-parameter ballot counts precondition the gradient.
    let mut worker_counts = vec![0.0f64; problem.n_workers];
    let mut task_counts = vec![0.0f64; problem.n_tasks];
    for &(t, w, _) in &problem.ballots {
        worker_counts[w] += 1.0;
        task_counts[t] += 1.0;
    }

    let mut gamma = vec![opts.init_gamma.min(GAMMA_MAX); problem.n_workers];
    let mut d = vec![prior.mean().min(D_MAX); problem.n_tasks];
    let mut objective = problem.observed_objective(&gamma, &d);
    let mut history = vec![objective];
    let mut converged = false;
    let mut step = 0.5;

    let mut g_gamma = vec![0.0; problem.n_workers];
    let mut g_d = vec![0.0; problem.n_tasks];
    let (mut trial_gamma, mut trial_d) = (gamma.clone(), d.clone());

    for _round in 0..opts.max_rounds {
        let post = problem.posteriors(&gamma, &d);
        let mut q = problem.expected_complete(&post, &gamma, &d);
        for _ in 0..INNER_STEPS {
            problem.gradient(&post, &gamma, &d, &mut g_gamma, &mut g_d);
            let mut accepted = false;
            while step > 1e-12 {
                if opts.mode == EmMode::Full {
                    for w in 0..problem.n_workers {
                        trial_gamma[w] = (gamma[w] + step * g_gamma[w] / worker_counts[w]).clamp(0.0, GAMMA_MAX);
                    }
                } else {
                    trial_gamma.copy_from_slice(&gamma);
                }
                for t in 0..problem.n_tasks {
                    trial_d[t] = (d[t] + step * g_d[t] / task_counts[t]).clamp(0.0, D_MAX);
                }
                let q_trial = problem.expected_complete(&post, &trial_gamma, &trial_d);
                if q_trial > q {
                    let gain = q_trial - q;
                    std::mem::swap(&mut gamma, &mut trial_gamma);
                    std::mem::swap(&mut d, &mut trial_d);
                    q = q_trial;
                    step = (step * 2.0).min(8.0);
                    accepted = gain > 1e-12;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                step = step.max(1e-3);
                break;
            }
        }
        let next = problem.observed_objective(&gamma, &d);
        history.push(next);
        let gain = next - objective;
        objective = next;
        if gain < opts.tolerance {
            converged = true;
            break;
        }
    }

    let post = problem.posteriors(&gamma, &d);
    Ok(EmEstimate {
        worker_gamma: worker_ids.iter().map(|(&id, &i)| (id, gamma[i])).collect(),
        task_difficulty: task_ids.iter().map(|(&id, &i)| (id, d[i])).collect(),
        posterior_one: task_ids.iter().map(|(&id, &i)| (id, post[i])).collect(),
        log_likelihood: history,
        converged,
    })
}
