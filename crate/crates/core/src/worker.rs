//! Worker response model.
//!
//! A worker with error parameter `gamma` answers a task of difficulty `d`
//! correctly with probability `0.5 * (1 + (1 - d)^gamma)`. Difficulty priors
//! are discretized into equal-width bins with mass placed at bin centers.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// Error parameter of a worker; 0 is error-free.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct WorkerErrorRate(f64);

impl WorkerErrorRate {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(invalid(format!("worker error rate must be finite and >= 0, got {gamma}")));
        }
        Ok(Self(gamma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Task difficulty in `[0, 1]`; 0 is easy.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TaskDifficulty(f64);

impl TaskDifficulty {
    pub fn new(d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&d) {
            return Err(invalid(format!("task difficulty must lie in [0, 1], got {d}")));
        }
        Ok(Self(d))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Probability that a worker's ballot matches the true answer.
pub fn accuracy(gamma: f64, d: f64) -> Result<f64> {
    let gamma = WorkerErrorRate::new(gamma)?;
    let d = TaskDifficulty::new(d)?;
    Ok(accuracy_of(gamma, d))
}

pub fn accuracy_of(gamma: WorkerErrorRate, d: TaskDifficulty) -> f64 {
    raw_accuracy(gamma.0, d.0)
}

#[inline]
pub(crate) fn raw_accuracy(gamma: f64, d: f64) -> f64 {
    0.5 * (1.0 + (1.0 - d).powf(gamma))
}

/// Draws one binary ballot for a task with the given true answer.
pub fn sample_ballot<R: Rng + ?Sized>(rng: &mut R, gamma: f64, d: f64, true_answer: u8) -> Result<u8> {
    if true_answer > 1 {
        return Err(invalid(format!("labels are binary, got {true_answer}")));
    }
    let a = accuracy(gamma, d)?;
    Ok(if rng.random::<f64>() < a { true_answer } else { 1 - true_answer })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorKind {
    Uniform,
    Beta { a: f64, b: f64 },
}

/// Prior over task difficulty together with its discretization resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPrior {
    #[serde(flatten)]
    pub kind: PriorKind,
    pub bins: usize,
}

impl Default for DifficultyPrior {
    fn default() -> Self {
        Self { kind: PriorKind::Beta { a: 2.0, b: 2.0 }, bins: 40 }
    }
}

impl DifficultyPrior {
    pub fn uniform(bins: usize) -> Self {
        Self { kind: PriorKind::Uniform, bins }
    }

    pub fn beta(a: f64, b: f64, bins: usize) -> Self {
        Self { kind: PriorKind::Beta { a, b }, bins }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(invalid(format!("difficulty prior needs at least 2 bins, got {}", self.bins)));
        }
        if let PriorKind::Beta { a, b } = self.kind {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(invalid(format!("beta prior parameters must be positive, got ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self.kind {
            PriorKind::Uniform => x,
            PriorKind::Beta { a, b } => beta_reg(a, b, x),
        }
    }

    /// Log density of the continuous prior, used as a penalty in EM.
    pub fn log_density(&self, d: f64) -> f64 {
        match self.kind {
            PriorKind::Uniform => 0.0,
            PriorKind::Beta { a, b } => {
                let d = d.clamp(1e-12, 1.0 - 1e-12);
                (a - 1.0) * d.ln() + (b - 1.0) * (1.0 - d).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self.kind {
            PriorKind::Uniform => 0.5,
            PriorKind::Beta { a, b } => a / (a + b),
        }
    }

    /// Sample a continuous difficulty from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            PriorKind::Uniform => rng.random::<f64>(),
            PriorKind::Beta { a, b } => rand_distr::Beta::new(a, b).expect("validated beta prior").sample(rng),
        }
    }

    pub fn discretize(&self) -> Result<DifficultyGrid> {
        self.validate()?;
        let n = self.bins;
        let centers: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let mut mass: Vec<f64> = match self.kind {
            PriorKind::Uniform => vec![1.0 / n as f64; n],
            PriorKind::Beta { .. } => (0..n)
                .map(|i| self.cdf((i + 1) as f64 / n as f64) - self.cdf(i as f64 / n as f64))
                .collect(),
        };
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(DifficultyGrid { centers: centers.into(), mass: mass.into() })
    }
}

/// Discretized difficulty prior: bin centers and their probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyGrid {
    pub centers: Arc<[f64]>,
    pub mass: Arc<[f64]>,
}

impl DifficultyGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Accuracy of a worker with error `gamma` at every bin center.
    pub fn accuracies(&self, gamma: f64) -> Vec<f64> {
        self.centers.iter().map(|&d| raw_accuracy(gamma, d)).collect()
    }
}

/// Population of workers whose error parameters follow a gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerPool {
    pub shape: f64,
    pub scale: f64,
}

impl Default for WorkerPool {
    fn default() -> Self {
        Self { shape: 2.0, scale: 0.5 }
    }
}

impl WorkerPool {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        let pool = Self { shape, scale };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.scale > 0.0 && self.shape.is_finite() && self.scale.is_finite()) {
            return Err(invalid(format!(
                "worker pool shape and scale must be positive, got ({}, {})",
                self.shape, self.scale
            )));
        }
        Ok(())
    }

    /// Error parameter of the average worker.
    pub fn mean_error(&self) -> f64 {
        self.shape * self.scale
    }

    /// Accuracy of a worker drawn from the pool at every bin center:
    /// `E[0.5 (1 + (1 - d)^gamma)] = 0.5 (1 + (1 - scale ln(1 - d))^-shape)`.
    pub fn mixture_accuracies(&self, grid: &DifficultyGrid) -> Vec<f64> {
        grid.centers
            .iter()
            .map(|&d| if d >= 1.0 { 0.5 } else { 0.5 * (1.0 + (1.0 - self.scale * (1.0 - d).ln()).powf(-self.shape)) })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, self.scale).expect("validated worker pool").sample(rng)
    }
}
