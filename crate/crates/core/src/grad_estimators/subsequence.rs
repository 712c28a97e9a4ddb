//! Subsequence sampling and the inclusion-probability weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubsequenceScheme {
    /// Contiguous run starting uniformly at random.
    #[default]
    Uniform,
    /// One block of a fixed partition of the sequence into runs of length `S`.
    Partition,
}

/// A core run `[core_start, core_end)` and its buffered window `[window_start, window_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferedSubsequence {
    pub t_len: usize,
    pub core_start: usize,
    pub core_end: usize,
    pub window_start: usize,
    pub window_end: usize,
    /// `1 / Pr(t in core)` for each core step.
    pub weights: Vec<f64>,
    pub scheme: SubsequenceScheme,
}

impl BufferedSubsequence {
    /// Subsequence of length `s` starting at `core_start`, buffered by `b` on both sides.
    pub fn new(t_len: usize, core_start: usize, s: usize, b: usize, scheme: SubsequenceScheme) -> Result<Self> {
        check(t_len, s, scheme)?;
        if core_start + s > t_len {
            return Err(Error::Config(format!("subsequence {core_start}+{s} exceeds length {t_len}")));
        }
        if scheme == SubsequenceScheme::Partition && core_start % s != 0 {
            return Err(Error::Config("partition subsequences start at multiples of S".into()));
        }
        let core_end = core_start + s;
        let weights = (core_start..core_end)
            .map(|t| 1.0 / inclusion_probability(t, t_len, s, scheme))
            .collect();
        Ok(Self {
            t_len,
            core_start,
            core_end,
            window_start: core_start.saturating_sub(b),
            window_end: core_end.saturating_add(b).min(t_len),
            weights,
            scheme,
        })
    }

    pub fn core_len(&self) -> usize {
        self.core_end - self.core_start
    }

    pub fn window_len(&self) -> usize {
        self.window_end - self.window_start
    }

    /// `(t, weight)` for every core step.
    pub fn weighted_core(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.core_start..self.core_end).zip(self.weights.iter().copied())
    }

    /// The same core with buffer `b`.
    pub fn with_buffer(&self, b: usize) -> Self {
        Self {
            window_start: self.core_start.saturating_sub(b),
            window_end: self.core_end.saturating_add(b).min(self.t_len),
            ..self.clone()
        }
    }

    /// The same core with the whole sequence as its window.
    pub fn with_full_window(&self) -> Self {
        Self { window_start: 0, window_end: self.t_len, ..self.clone() }
    }
}

fn check(t_len: usize, s: usize, scheme: SubsequenceScheme) -> Result<()> {
    if t_len == 0 {
        return Err(Error::Config("sequence is empty".into()));
    }
    if s == 0 || s > t_len {
        return Err(Error::Config(format!("subsequence length {s} must be in 1..={t_len}")));
    }
    if scheme == SubsequenceScheme::Partition && t_len % s != 0 {
        return Err(Error::Config(format!("partition scheme needs S | T (S={s}, T={t_len})")));
    }
    Ok(())
}

/// `Pr(t in core)` for 0-indexed `t`.
pub fn inclusion_probability(t: usize, t_len: usize, s: usize, scheme: SubsequenceScheme) -> f64 {
    match scheme {
        SubsequenceScheme::Uniform => {
            let starts = t_len - s + 1;
            let hits = (t + 1).min(t_len - t).min(s).min(starts);
            hits as f64 / starts as f64
        }
        SubsequenceScheme::Partition => s as f64 / t_len as f64,
    }
}

pub fn sample_subsequence<R: Rng + ?Sized>(
    t_len: usize,
    s: usize,
    b: usize,
    scheme: SubsequenceScheme,
    rng: &mut R,
) -> Result<BufferedSubsequence> {
    check(t_len, s, scheme)?;
    let start = match scheme {
        SubsequenceScheme::Uniform => rng.random_range(0..=t_len - s),
        SubsequenceScheme::Partition => rng.random_range(0..t_len / s) * s,
    };
    BufferedSubsequence::new(t_len, start, s, b, scheme)
}

/// Every subsequence the scheme can produce; each is equally likely.
pub fn all_subsequences(t_len: usize, s: usize, b: usize, scheme: SubsequenceScheme) -> Result<Vec<BufferedSubsequence>> {
    check(t_len, s, scheme)?;
    let starts: Vec<usize> = match scheme {
        SubsequenceScheme::Uniform => (0..=t_len - s).collect(),
        SubsequenceScheme::Partition => (0..t_len / s).map(|i| i * s).collect(),
    };
    starts.into_iter().map(|st| BufferedSubsequence::new(t_len, st, s, b, scheme)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_probabilities_small_case() {
        let p: Vec<f64> = (0..10).map(|t| inclusion_probability(t, 10, 3, SubsequenceScheme::Uniform)).collect();
        assert!((p[0] - 1.0 / 8.0).abs() < 1e-15);
        assert!((p[4] - 3.0 / 8.0).abs() < 1e-15);
        assert!((p[9] - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn partition_requires_divisibility() {
        assert!(BufferedSubsequence::new(10, 0, 3, 0, SubsequenceScheme::Partition).is_err());
        let s = BufferedSubsequence::new(12, 3, 3, 0, SubsequenceScheme::Partition).unwrap();
        assert!(s.weights.iter().all(|w| (*w - 4.0).abs() < 1e-15));
    }

    #[test]
    fn window_is_clipped() {
        let s = BufferedSubsequence::new(10, 1, 3, 5, SubsequenceScheme::Uniform).unwrap();
        assert_eq!((s.window_start, s.window_end), (0, 9));
        let s = BufferedSubsequence::new(10, 0, 10, 100, SubsequenceScheme::Uniform).unwrap();
        assert_eq!((s.window_start, s.window_end), (0, 10));
        assert!(s.weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_subsequence(100, 4, 2, SubsequenceScheme::Uniform, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_subsequence(100, 4, 2, SubsequenceScheme::Uniform, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn probabilities_are_exact(t_len in 1usize..40, s_frac in 0.0f64..1.0) {
            let s = 1 + ((t_len - 1) as f64 * s_frac) as usize;
            let all = all_subsequences(t_len, s, 0, SubsequenceScheme::Uniform).unwrap();
            for t in 0..t_len {
                let hits = all.iter().filter(|x| x.core_start <= t && t < x.core_end).count();
                let p = inclusion_probability(t, t_len, s, SubsequenceScheme::Uniform);
                prop_assert!((p - hits as f64 / all.len() as f64).abs() < 1e-14);
                prop_assert!(p > 0.0 && p <= 1.0);
            }
            for x in &all {
                prop_assert!(x.weights.iter().all(|w| *w >= 1.0));
            }
        }
    }
}
