//! Replica bookkeeping: per-replica random streams, the parallel map with its
//! sequential fallback, and the estimates and reports built from the results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub type ReplicaRng = ChaCha8Rng;

/// Monte Carlo size and provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McParams {
    pub replicas: usize,
    pub seed: u64,
}

impl McParams {
    pub fn new(replicas: usize, seed: u64) -> Self {
        Self { replicas, seed }
    }
}

/// Stream `index` of the ChaCha8 generator keyed by `seed`. Streams are
/// disjoint, so replica `i` sees the same numbers whichever worker runs it.
pub fn replica_rng(seed: u64, index: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `f(i, rng_i)` for every replica and returns results in replica order.
pub fn map_replicas<T, F>(params: McParams, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ReplicaRng) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_replicas_par(params, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_replicas_seq(params, f)
    }
}

/// Sequential reference implementation; always available.
pub fn map_replicas_seq<T, F>(params: McParams, f: F) -> Vec<T>
where
    F: Fn(usize, &mut ReplicaRng) -> T,
{
    (0..params.replicas)
        .map(|i| {
            let mut rng = replica_rng(params.seed, i as u64);
            f(i, &mut rng)
        })
        .collect()
}

#[cfg(feature = "parallel")]
pub fn map_replicas_par<T, F>(params: McParams, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ReplicaRng) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..params.replicas)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let mut rng = replica_rng(params.seed, i as u64);
            f(i, &mut rng)
        })
        .collect()
}

/// Same contract as [`map_replicas`] for an explicit list of work items.
pub fn map_items<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl McEstimate {
    /// Mean and `sample-std / sqrt(n)`, accumulated in slice order so the
    /// result is reproducible bit for bit.
    pub fn from_samples(xs: &[f64], seed: u64) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n, seed };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            f64::NAN
        };
        Self { mean, stderr: (var / n as f64).sqrt(), n, seed }
    }
}

/// One checked identity `lhs = rhs`, both sides estimated on the same
/// replicas. `z` is the paired-difference z-score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub name: String,
    pub lhs: McEstimate,
    pub rhs: McEstimate,
    pub diff: McEstimate,
    pub z: f64,
    pub pass: bool,
    pub excluded: usize,
}

/// Acceptance threshold on the paired z-score.
pub const Z_THRESHOLD: f64 = 3.0;

impl VerificationReport {
    /// Builds the report from per-replica pairs. Replicas flagged `None`
    /// (exceptional samples) are dropped from both sides and counted.
    pub fn paired(name: impl Into<String>, pairs: &[Option<(f64, f64)>], seed: u64) -> Self {
        let kept: Vec<(f64, f64)> = pairs.iter().flatten().copied().collect();
        let excluded = pairs.len() - kept.len();
        let l: Vec<f64> = kept.iter().map(|p| p.0).collect();
        let r: Vec<f64> = kept.iter().map(|p| p.1).collect();
        let d: Vec<f64> = kept.iter().map(|p| p.0 - p.1).collect();
        let lhs = McEstimate::from_samples(&l, seed);
        let rhs = McEstimate::from_samples(&r, seed);
        let diff = McEstimate::from_samples(&d, seed);
        let z = z_score(diff.mean, diff.stderr);
        Self { name: name.into(), lhs, rhs, diff, z, pass: z.abs() <= Z_THRESHOLD, excluded }
    }

    /// `lhs` estimated by Monte Carlo against an exact value.
    pub fn against_exact(name: impl Into<String>, samples: &[f64], exact: f64, seed: u64) -> Self {
        let lhs = McEstimate::from_samples(samples, seed);
        let rhs = McEstimate { mean: exact, stderr: 0.0, n: samples.len(), seed };
        let diff = McEstimate { mean: lhs.mean - exact, ..lhs };
        let z = z_score(diff.mean, diff.stderr);
        Self { name: name.into(), lhs, rhs, diff, z, pass: z.abs() <= Z_THRESHOLD, excluded: 0 }
    }

    /// Fraction of replicas dropped as exceptional.
    pub fn exclusion_rate(&self) -> f64 {
        let total = self.excluded + self.diff.n;
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }
}

fn z_score(mean: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        mean / stderr
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY * mean.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| replica_rng(7, 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| replica_rng(7, 3).random()).collect();
        assert_eq!(a, b);
        let mut r1 = replica_rng(7, 3);
        let mut r2 = replica_rng(7, 4);
        assert_ne!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let p = McParams::new(1000, 11);
        let f = |i: usize, rng: &mut ReplicaRng| rng.random::<f64>() + i as f64;
        let s = map_replicas_seq(p, f);
        let m = map_replicas(p, f);
        assert_eq!(s, m);
    }

    #[test]
    fn estimate_of_constant_has_zero_stderr() {
        let e = McEstimate::from_samples(&[2.0; 10], 0);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn exceptional_replicas_are_counted() {
        let pairs = vec![Some((1.0, 1.0)), None, Some((2.0, 2.0)), Some((3.0, 3.0))];
        let r = VerificationReport::paired("x", &pairs, 0);
        assert_eq!(r.excluded, 1);
        assert!(r.pass);
        assert!((r.exclusion_rate() - 0.25).abs() < 1e-15);
    }
}
