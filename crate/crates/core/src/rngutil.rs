//! Deterministic stream derivation and low-discrepancy sampling.
//!
//! Replications draw from independent ChaCha streams keyed by
//! `(seed, replication index)` through a splitmix finalizer, so runs are
//! reproducible under any parallel schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Splitmix64 finalizer: avalanche-mixes a 64-bit word.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent replication stream for `(seed, index)`.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Radical-inverse (van der Corput) sequence in the given base.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut acc = 0.0;
    while i > 0 {
        acc += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    acc
}

/// Two-dimensional Halton point (bases 2 and 3), index starting at 0.
pub fn halton2(i: u64) -> [f64; 2] {
    [radical_inverse(i + 1, 2), radical_inverse(i + 1, 3)]
}

/// Running mean and standard error over scalar samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn from_samples(samples: &[f64]) -> MeanSe {
        let n = samples.len();
        if n == 0 {
            return MeanSe::default();
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return MeanSe {
                mean,
                se: f64::INFINITY,
                count: 1,
            };
        }
        let var = samples
            .iter()
            .map(|&s| (s - mean) * (s - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        MeanSe {
            mean,
            se: (var / n as f64).sqrt(),
            count: n,
        }
    }

    /// |mean - reference| in units of the standard error.
    pub fn gap_in_se(&self, reference: f64) -> f64 {
        if self.se == 0.0 {
            if self.mean == reference {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - reference).abs() / self.se
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let mut a1 = replication_rng(7, 0);
        let mut a2 = replication_rng(7, 0);
        let mut b = replication_rng(7, 1);
        assert_eq!(a1.next_u64(), a2.next_u64());
        let mut a = replication_rng(7, 0);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn halton_covers_unit_square() {
        let pts: Vec<[f64; 2]> = (0..64).map(halton2).collect();
        assert!(pts
            .iter()
            .all(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0));
        let mean_x: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 64.0;
        let mean_y: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / 64.0;
        assert!((mean_x - 0.5).abs() < 0.05 && (mean_y - 0.5).abs() < 0.05);
    }

    #[test]
    fn mean_se_basics() {
        let s = MeanSe::from_samples(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.se - 1.0).abs() < 1e-12);
        assert_eq!(s.gap_in_se(0.0), 2.0);
    }
}
