//! Monte Carlo estimates and streaming moment accumulators.

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::{SimRng, Streams};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            se: 0.0,
            samples: 0,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            value: self.value * c,
            se: self.se * c.abs(),
            samples: self.samples,
        }
    }

    /// `Σ c_i X_i` for independent estimates.
    pub fn linear_combination(terms: &[(f64, Estimate)]) -> Self {
        let value = terms.iter().map(|(c, e)| c * e.value).sum();
        let var: f64 = terms.iter().map(|(c, e)| (c * e.se).powi(2)).sum();
        Self {
            value,
            se: var.sqrt(),
            samples: terms.iter().map(|(_, e)| e.samples).sum(),
        }
    }

    /// `|a - b| <= z · sqrt(se_a² + se_b²)`.
    pub fn agrees_with(&self, other: &Estimate, z: f64) -> bool {
        (self.value - other.value).abs() <= z * self.se.hypot(other.se)
    }
}

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean,
            se: (self.variance() / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Samples drawn from one generator stream before moving to the next.
pub const CHUNK: usize = 1024;

/// Mean and standard error of `m` draws of `sample`, parallel over chunks
/// of [`CHUNK`] draws. Chunk `c` uses stream `c` of `streams`, and chunks
/// are merged in index order, so the result does not depend on the
/// thread count.
pub fn monte_carlo<F>(m: usize, streams: Streams, sample: F) -> Result<Estimate>
where
    F: Fn(&mut SimRng) -> Result<f64> + Sync,
{
    monte_carlo_at(m, streams, 0, sample)
}

/// As [`monte_carlo`], with chunk `c` on stream `first_stream + c`.
pub fn monte_carlo_at<F>(m: usize, streams: Streams, first_stream: usize, sample: F) -> Result<Estimate>
where
    F: Fn(&mut SimRng) -> Result<f64> + Sync,
{
    let chunks = m.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.rng(first_stream + c);
            let len = CHUNK.min(m - c * CHUNK);
            let mut acc = Moments::default();
            for _ in 0..len {
                acc.push(sample(&mut rng)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 3.25];
        let m: Moments = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.mean() - mean).abs() < 1e-14);
        assert!((m.variance() - var).abs() < 1e-13);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let all: Moments = xs.iter().copied().collect();
        let mut a: Moments = xs[..37].iter().copied().collect();
        let b: Moments = xs[37..].iter().copied().collect();
        a.merge(&b);
        assert!((a.mean() - all.mean()).abs() < 1e-13);
        assert!((a.variance() - all.variance()).abs() < 1e-12);
        assert_eq!(a.count(), 100);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let s = Streams::new(3).experiment(1);
        let run = || monte_carlo(3000, s, |r| Ok(r.random::<f64>())).unwrap();
        assert_eq!(run(), run());
        let e = run();
        assert_eq!(e.samples, 3000);
        assert!((e.value - 0.5).abs() < 4.0 * e.se);
    }

    #[test]
    fn combinations() {
        let a = Estimate { value: 1.0, se: 0.3, samples: 10 };
        let b = Estimate { value: 2.0, se: 0.4, samples: 10 };
        let c = Estimate::linear_combination(&[(2.0, a), (-1.0, b)]);
        assert_eq!(c.value, 0.0);
        assert!((c.se - (0.36f64 + 0.16).sqrt()).abs() < 1e-15);
        assert!(a.agrees_with(&b, 3.0));
        assert!(!a.agrees_with(&b, 1.0));
    }
}
