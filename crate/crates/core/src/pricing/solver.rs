//! Finite-horizon backward induction with pay changes resolved inside each
//! epoch.
//!
//! Within an epoch, Up and Down take no time. A pay-change chain keeps its
//! direction: the value of moving up is `-switch_cost` plus the best of
//! staying or moving further up at the target level (and likewise for down).
//! This rules out Up immediately followed by Down even when clamping makes
//! the round trip land on a different `theta`. The directional values are
//! found by sweeping to a fixed point.

use crate::error::{invalid, Error, Result};

use super::Action;

/// Per-epoch structure of a pricing MDP. States are indexed per pay level;
/// pay changes map a state to a state of the neighbouring level.
pub trait StageModel: Sync {
    fn pay_levels(&self) -> usize;
    /// Number of states per pay level.
    fn states(&self) -> usize;
    fn terminal(&self, s: usize) -> f64;
    /// State reached when moving from pay level `from` to `to`.
    fn shift(&self, s: usize, from: usize, to: usize) -> usize;
    /// Expected reward plus continuation value of one no-change epoch, with
    /// `next` the next-epoch values at the same pay level.
    fn no_change(&self, s: usize, pay_level: usize, next: &[f64]) -> f64;
}

/// Improvements smaller than this do not justify a pay change or prefer
/// termination over waiting.
const TIE: f64 = 1e-9;

/// Stored codes: the low two bits hold the action. The flags record the
/// choice inside a pay-change chain that arrived at the state.
const ACTION_MASK: u8 = 0b11;
const STAY_TERMINATES: u8 = 1 << 2;
const CONTINUE_UP: u8 = 1 << 3;
const CONTINUE_DOWN: u8 = 1 << 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedPolicy {
    max_epochs: usize,
    pay_levels: usize,
    states: usize,
    /// `[(remaining * K + c) * S + s]`.
    actions: Vec<u8>,
    values: Vec<f32>,
    sweeps: usize,
}

impl SolvedPolicy {
    pub(crate) fn from_parts(max_epochs: usize, pay_levels: usize, states: usize, actions: Vec<u8>, values: Vec<f32>) -> Result<Self> {
        let len = (max_epochs + 1) * pay_levels * states;
        if actions.len() != len || values.len() != len {
            return Err(Error::Cache(format!("policy tables have {} / {} entries, expected {len}", actions.len(), values.len())));
        }
        for &a in &actions {
            Action::from_code(a & ACTION_MASK)?;
        }
        Ok(Self { max_epochs, pay_levels, states, actions, values, sweeps: 0 })
    }

    fn idx(&self, tau: usize, pay_level: usize, s: usize) -> usize {
        let remaining = self.max_epochs - tau.min(self.max_epochs);
        (remaining * self.pay_levels + pay_level) * self.states + s
    }

    pub fn max_epochs(&self) -> usize {
        self.max_epochs
    }

    pub fn pay_levels(&self) -> usize {
        self.pay_levels
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// Largest number of inner sweeps any epoch needed.
    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// Optimal action at epoch `tau`; epochs past the deadline terminate.
    pub fn action(&self, tau: usize, pay_level: usize, s: usize) -> Action {
        Action::from_code(self.actions[self.idx(tau, pay_level, s)] & ACTION_MASK).expect("validated action code")
    }

    /// Action at a state reached by `previous` within the same epoch. A
    /// pay-change chain never reverses direction.
    pub fn next_in_chain(&self, tau: usize, pay_level: usize, s: usize, previous: Action) -> Action {
        let code = self.actions[self.idx(tau, pay_level, s)];
        let stay = if code & STAY_TERMINATES != 0 { Action::Terminate } else { Action::NoChange };
        match previous {
            Action::Up if code & CONTINUE_UP != 0 => Action::Up,
            Action::Down if code & CONTINUE_DOWN != 0 => Action::Down,
            Action::Up | Action::Down => stay,
            _ => self.action(tau, pay_level, s),
        }
    }

    pub fn value(&self, tau: usize, pay_level: usize, s: usize) -> f64 {
        self.values[self.idx(tau, pay_level, s)] as f64
    }

    pub(crate) fn raw_actions(&self) -> &[u8] {
        &self.actions
    }

    pub(crate) fn raw_values(&self) -> &[f32] {
        &self.values
    }
}

pub fn solve<M: StageModel + ?Sized>(model: &M, max_epochs: usize, switch_cost: f64, tol: f64, max_sweeps: usize) -> Result<SolvedPolicy> {
    let k = model.pay_levels();
    let n = model.states();
    if k == 0 || n == 0 {
        return Err(invalid("the model has no states"));
    }
    if !(tol > 0.0) || max_sweeps == 0 {
        return Err(invalid("tolerance and sweep cap must be positive"));
    }
    let layer = k * n;
    let mut actions = vec![Action::Terminate.code(); (max_epochs + 1) * layer];
    let mut values = vec![0f32; (max_epochs + 1) * layer];
    let terminal: Vec<f64> = (0..n).map(|s| model.terminal(s)).collect();

    let mut prev: Vec<f64> = (0..k).flat_map(|_| terminal.iter().copied()).collect();
    values[..layer].iter_mut().zip(&prev).for_each(|(v, x)| *v = *x as f32);
    let mut worst_sweeps = 0;

    for r in 1..=max_epochs {
        // staying put: wait one epoch or stop, waiting on ties
        let mut stay = vec![0.0; layer];
        let mut stay_action = vec![Action::NoChange; layer];
        for c in 0..k {
            let next = &prev[c * n..(c + 1) * n];
            for (s, &end) in terminal.iter().enumerate().take(n) {
                let wait = model.no_change(s, c, next);
                let i = c * n + s;
                if end > wait + TIE {
                    stay[i] = end;
                    stay_action[i] = Action::Terminate;
                } else {
                    stay[i] = wait;
                }
            }
        }
        let (up, down, sweeps) = directional_values(model, &stay, switch_cost, tol, max_sweeps)?;
        worst_sweeps = worst_sweeps.max(sweeps);

        let mut cur = vec![0.0; layer];
        let base = r * layer;
        for i in 0..layer {
            let (mut best, mut act) = (stay[i], stay_action[i]);
            if up[i] > best + TIE {
                (best, act) = (up[i], Action::Up);
            }
            if down[i] > best + TIE {
                (best, act) = (down[i], Action::Down);
            }
            let mut code = act.code();
            if stay_action[i] == Action::Terminate {
                code |= STAY_TERMINATES;
            }
            if up[i] > stay[i] + TIE {
                code |= CONTINUE_UP;
            }
            if down[i] > stay[i] + TIE {
                code |= CONTINUE_DOWN;
            }
            cur[i] = best;
            actions[base + i] = code;
            values[base + i] = best as f32;
        }
        prev = cur;
    }
    Ok(SolvedPolicy { max_epochs, pay_levels: k, states: n, actions, values, sweeps: worst_sweeps })
}

/// Values of starting an upward (downward) pay-change chain.
fn directional_values<M: StageModel + ?Sized>(
    model: &M,
    stay: &[f64],
    switch_cost: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let k = model.pay_levels();
    let n = model.states();
    let mut up = vec![f64::NEG_INFINITY; k * n];
    let mut down = vec![f64::NEG_INFINITY; k * n];
    for sweep in 1..=max_sweeps {
        let mut delta: f64 = 0.0;
        for c in 0..k {
            for s in 0..n {
                let i = c * n + s;
                if c + 1 < k {
                    let t = (c + 1) * n + model.shift(s, c, c + 1);
                    let v = -switch_cost + stay[t].max(up[t]);
                    delta = delta.max(change(up[i], v));
                    up[i] = v;
                }
                if c > 0 {
                    let t = (c - 1) * n + model.shift(s, c, c - 1);
                    let v = -switch_cost + stay[t].max(down[t]);
                    delta = delta.max(change(down[i], v));
                    down[i] = v;
                }
            }
        }
        if delta <= tol {
            return Ok((up, down, sweep));
        }
    }
    Err(Error::NonConvergence(format!("pay-change values did not settle within {max_sweeps} sweeps")))
}

fn change(old: f64, new: f64) -> f64 {
    if old == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (new - old).abs()
    }
}
