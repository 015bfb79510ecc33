//! Pay-dependent Poisson ballot arrivals per epoch, bucketed on the theta grid.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Discrete, Poisson};

use crate::error::{invalid, Result};

/// Arrivals grouped by `round(n_b / delta_theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bucket: usize,
    pub probability: f64,
    /// Mean arrivals within the bucket.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionModel {
    rates: Vec<f64>,
    delta_theta: f64,
    buckets: Vec<Vec<Bucket>>,
}

impl CompletionModel {
    /// `rates` are expected arrivals per epoch. Each tail of the Poisson
    /// distribution is cut where it carries less than `truncation / 2`; the
    /// rest is renormalized.
    pub fn new(rates: &[f64], delta_theta: f64, truncation: f64) -> Result<Self> {
        if !(delta_theta > 0.0) {
            return Err(invalid("theta bucket width must be positive"));
        }
        let mut buckets = Vec::with_capacity(rates.len());
        for &rate in rates {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(invalid(format!("arrival rate must be finite and >= 0, got {rate}")));
            }
            buckets.push(bucketize(&truncated_pmf(rate, truncation)?, delta_theta));
        }
        Ok(Self { rates: rates.to_vec(), delta_theta, buckets })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn buckets(&self, pay_level: usize) -> &[Bucket] {
        &self.buckets[pay_level]
    }

    pub fn max_bucket(&self, pay_level: usize) -> usize {
        self.buckets[pay_level].last().map_or(0, |b| b.bucket)
    }
}

/// `(count, probability)` pairs of the truncated, renormalized Poisson.
pub(crate) fn truncated_pmf(rate: f64, truncation: f64) -> Result<Vec<(u64, f64)>> {
    if rate == 0.0 {
        return Ok(vec![(0, 1.0)]);
    }
    let dist = Poisson::new(rate).map_err(|e| invalid(e.to_string()))?;
    let half = truncation / 2.0;
    let mut lo = 0u64;
    let mut below = 0.0;
    while below + dist.pmf(lo) < half {
        below += dist.pmf(lo);
        lo += 1;
    }
    let mut support = Vec::new();
    let mut mass = below;
    let mut k = lo;
    loop {
        let p = dist.pmf(k);
        support.push((k, p));
        mass += p;
        if 1.0 - mass < half && k as f64 >= rate {
            break;
        }
        k += 1;
    }
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    Ok(support.into_iter().map(|(k, p)| (k, p / total)).collect())
}

fn bucketize(pmf: &[(u64, f64)], delta_theta: f64) -> Vec<Bucket> {
    let mut out: Vec<Bucket> = Vec::new();
    for &(k, p) in pmf {
        let bucket = (k as f64 / delta_theta).round() as usize;
        match out.last_mut() {
            Some(b) if b.bucket == bucket => {
                b.mean += k as f64 * p;
                b.probability += p;
            }
            _ => out.push(Bucket { bucket, probability: p, mean: k as f64 * p }),
        }
    }
    for b in &mut out {
        b.mean /= b.probability;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::DiscreteCDF;

    #[test]
    fn truncation_keeps_the_bulk_of_the_mass() {
        for rate in [0.5, 5.0, 50.0, 250.0] {
            let pmf = truncated_pmf(rate, 1e-4).unwrap();
            let (lo, hi) = (pmf[0].0, pmf.last().unwrap().0);
            let dist = Poisson::new(rate).unwrap();
            let kept = dist.cdf(hi) - if lo == 0 { 0.0 } else { dist.cdf(lo - 1) };
            assert!(kept >= 1.0 - 1e-4, "rate {rate}: kept {kept}");
            let total: f64 = pmf.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn buckets_at_rate_fifty() {
        let m = CompletionModel::new(&[50.0], 10.0, 1e-4).unwrap();
        let total: f64 = m.buckets(0).iter().map(|b| b.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let mean: f64 = m.buckets(0).iter().map(|b| b.probability * b.mean).sum();
        assert!((mean - 50.0).abs() < 0.05);
        let dist = Poisson::new(50.0).unwrap();
        let lo = m.buckets(0)[0].bucket as f64 * 10.0 - 5.0;
        let hi = m.max_bucket(0) as f64 * 10.0 + 4.0;
        let covered = dist.cdf(hi as u64) - dist.cdf(lo.max(0.0) as u64 - 1);
        assert!(covered >= 0.999);
    }

    #[test]
    fn zero_rate_is_a_point_mass() {
        let m = CompletionModel::new(&[0.0], 10.0, 1e-4).unwrap();
        assert_eq!(m.buckets(0), &[Bucket { bucket: 0, probability: 1.0, mean: 0.0 }]);
        assert!(CompletionModel::new(&[-1.0], 10.0, 1e-4).is_err());
    }
}
