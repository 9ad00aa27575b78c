//! Deterministic parallel Monte Carlo: streaming moments, confidence
//! intervals and seed substreams.
//!
//! Work is cut into fixed-size chunks whose boundaries depend only on the
//! sample count. Chunk `c` draws from the substream `seed/c` and partial
//! estimates are merged in chunk order, so results are bit-identical for any
//! worker count.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SimRng = ChaCha8Rng;

/// Single-pass mean/variance accumulator (Welford), mergeable (Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    count: u64,
    mean: f64,
    m2: f64,
}

impl McEstimate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut est = Self::new();
        for &v in values {
            est.accumulate(v)?;
        }
        Ok(est)
    }

    pub fn accumulate(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        Ok(())
    }

    pub fn merge(&self, other: &McEstimate) -> McEstimate {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let count = self.count + other.count;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * nb / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / count as f64;
        McEstimate { count, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Unbiased sample variance; zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn ci95(&self) -> Result<(f64, f64)> {
        if self.count < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                have: self.count,
            });
        }
        let half = 1.96 * self.stderr();
        Ok((self.mean - half, self.mean + half))
    }

    pub fn ci95_half_width(&self) -> f64 {
        1.96 * self.stderr()
    }

    /// `c·X` for a deterministic constant `c`.
    pub fn scaled(&self, c: f64) -> McEstimate {
        McEstimate {
            count: self.count,
            mean: c * self.mean,
            m2: c * c * self.m2,
        }
    }
}

/// Root seed plus a path of task indices identifying one substream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root: u64,
    pub path: Vec<u64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(root: u64) -> Self {
        SeedSpec { root, path: vec![] }
    }

    pub fn child(&self, index: u64) -> SeedSpec {
        let mut path = self.path.clone();
        path.push(index);
        SeedSpec {
            root: self.root,
            path,
        }
    }

    /// 256-bit ChaCha key derived from `(root, path)`.
    pub fn key(&self) -> [u8; 32] {
        let mut state = self.root;
        let mut acc = splitmix64(&mut state);
        for &p in &self.path {
            let mut s = p ^ acc.rotate_left(17);
            acc = splitmix64(&mut s) ^ splitmix64(&mut state);
        }
        let mut s = acc ^ (self.path.len() as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> SimRng {
        ChaCha8Rng::from_seed(self.key())
    }
}

/// Parallel executor with a private thread pool.
#[derive(Clone)]
pub struct Engine {
    pool: Arc<rayon::ThreadPool>,
    workers: usize,
    chunk_size: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("workers", &self.workers)
            .field("chunk_size", &self.chunk_size)
            .finish()
    }
}

pub const DEFAULT_CHUNK: u64 = 2048;

impl Engine {
    pub fn new(workers: usize) -> Self {
        Self::with_chunk_size(workers, DEFAULT_CHUNK)
    }

    pub fn with_chunk_size(workers: usize, chunk_size: u64) -> Self {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build thread pool");
        Engine {
            pool: Arc::new(pool),
            workers,
            chunk_size: chunk_size.max(1),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    fn chunks(&self, samples: u64) -> Vec<(u64, u64)> {
        let n_chunks = samples.div_ceil(self.chunk_size);
        (0..n_chunks)
            .map(|c| {
                let start = c * self.chunk_size;
                (c, (samples - start).min(self.chunk_size))
            })
            .collect()
    }

    /// Runs `draw` `samples` times; each call writes `stats` statistics into
    /// its buffer. Returns one estimate per statistic.
    pub fn estimate<F>(
        &self,
        seed: &SeedSpec,
        samples: u64,
        stats: usize,
        draw: F,
    ) -> Result<Vec<McEstimate>>
    where
        F: Fn(&mut SimRng, &mut [f64]) -> Result<()> + Sync,
    {
        let chunks = self.chunks(samples);
        let partials: Vec<Result<Vec<McEstimate>>> = self.pool.install(|| {
            chunks
                .par_iter()
                .map(|&(c, len)| {
                    let mut rng = seed.child(c).rng();
                    let mut buf = vec![0.0; stats];
                    let mut est = vec![McEstimate::new(); stats];
                    for _ in 0..len {
                        draw(&mut rng, &mut buf)?;
                        for (e, &x) in est.iter_mut().zip(&buf) {
                            e.accumulate(x)?;
                        }
                    }
                    Ok(est)
                })
                .collect()
        });
        let mut total = vec![McEstimate::new(); stats];
        for part in partials {
            let part = part?;
            for (t, p) in total.iter_mut().zip(&part) {
                *t = t.merge(p);
            }
        }
        Ok(total)
    }

    /// Collects `samples` draws in deterministic order.
    pub fn collect<T, F>(&self, seed: &SeedSpec, samples: u64, draw: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut SimRng) -> Result<T> + Sync,
    {
        let chunks = self.chunks(samples);
        let partials: Vec<Result<Vec<T>>> = self.pool.install(|| {
            chunks
                .par_iter()
                .map(|&(c, len)| {
                    let mut rng = seed.child(c).rng();
                    (0..len).map(|_| draw(&mut rng)).collect()
                })
                .collect()
        });
        let mut out = Vec::with_capacity(samples as usize);
        for part in partials {
            out.extend(part?);
        }
        Ok(out)
    }
}

impl Default for Engine {
    fn default() -> Self {
        Engine::new(1)
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 99.9% critical value of the two-sample KS statistic.
pub fn ks_critical_999(na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    1.949 * ((na + nb) / (na * nb)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_stream_has_zero_variance() {
        let est = McEstimate::from_values(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(est.mean(), 2.0);
        assert_eq!(est.variance(), 0.0);
        let (lo, hi) = est.ci95().unwrap();
        assert_eq!((lo, hi), (2.0, 2.0));
    }

    #[test]
    fn one_two_three() {
        let est = McEstimate::from_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(est.mean(), 2.0);
        assert!((est.variance() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_and_short_ci() {
        let mut est = McEstimate::new();
        assert!(matches!(est.accumulate(f64::NAN), Err(Error::NonFinite(_))));
        est.accumulate(1.0).unwrap();
        assert!(matches!(est.ci95(), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn million_normals_center() {
        let engine = Engine::new(4);
        let est = engine
            .estimate(&SeedSpec::new(7), 1_000_000, 1, |rng, out| {
                out[0] = rng.sample(StandardNormal);
                Ok(())
            })
            .unwrap();
        assert!(est[0].mean().abs() < 4e-3);
        assert!((est[0].variance() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn merge_matches_sequential() {
        let mut rng = SeedSpec::new(3).rng();
        let xs: Vec<f64> = (0..1001).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
        let whole = McEstimate::from_values(&xs).unwrap();
        let a = McEstimate::from_values(&xs[..400]).unwrap();
        let b = McEstimate::from_values(&xs[400..]).unwrap();
        let merged = a.merge(&b);
        assert_eq!(merged.count(), whole.count());
        assert!((merged.mean() - whole.mean()).abs() < 1e-12);
        assert!((merged.m2() - whole.m2()).abs() < 1e-9 * whole.m2());
        assert_eq!(a.merge(&McEstimate::new()), a);
        assert_eq!(McEstimate::new().merge(&a), a);

        let c = McEstimate::from_values(&xs[..100]).unwrap();
        let d = McEstimate::from_values(&xs[100..400]).unwrap();
        let left = c.merge(&d).merge(&b);
        let right = c.merge(&d.merge(&b));
        assert!((left.mean() - right.mean()).abs() < 1e-12);
        assert!((left.m2() - right.m2()).abs() < 1e-9 * left.m2());
    }

    #[test]
    fn ci_width_halves_with_four_times_data() {
        let base = [1.0, 3.0, 1.0, 3.0];
        let small = McEstimate::from_values(&base).unwrap();
        let big: Vec<f64> = base.iter().cycle().take(16).copied().collect();
        let big = McEstimate::from_values(&big).unwrap();
        let ratio = small.ci95_half_width() / big.ci95_half_width();
        // Unbiased variances differ by (n-1) factors: 4/3 vs 16/15.
        let expected = 2.0 * ((4.0f64 / 3.0) / (16.0 / 15.0)).sqrt();
        assert!((ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn ci_coverage_near_95_percent() {
        let engine = Engine::new(2);
        let hits = engine
            .collect(&SeedSpec::new(11), 1000, |rng| {
                let mut est = McEstimate::new();
                for _ in 0..200 {
                    est.accumulate(1.5 + rng.sample::<f64, _>(StandardNormal))?;
                }
                let (lo, hi) = est.ci95()?;
                Ok((lo <= 1.5 && 1.5 <= hi) as u32)
            })
            .unwrap();
        let coverage = hits.iter().sum::<u32>() as f64 / 1000.0;
        assert!((coverage - 0.95).abs() < 0.03, "coverage {coverage}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let draw = |rng: &mut SimRng, out: &mut [f64]| {
            let z: f64 = rng.sample(StandardNormal);
            out[0] = z;
            out[1] = z * z;
            Ok(())
        };
        let one = Engine::new(1).estimate(&SeedSpec::new(5), 50_000, 2, draw).unwrap();
        let many = Engine::new(7).estimate(&SeedSpec::new(5), 50_000, 2, draw).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn substreams_are_reproducible_and_uncorrelated() {
        let s = SeedSpec::new(99);
        let a: Vec<f64> = {
            let mut r = s.child(0).rng();
            (0..20_000).map(|_| r.sample(StandardNormal)).collect()
        };
        let a2: Vec<f64> = {
            let mut r = s.child(0).rng();
            (0..20_000).map(|_| r.sample(StandardNormal)).collect()
        };
        assert_eq!(a, a2);
        let b: Vec<f64> = {
            let mut r = s.child(1).rng();
            (0..20_000).map(|_| r.sample(StandardNormal)).collect()
        };
        let n = a.len() as f64;
        let lag0 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n;
        let lag1 = a.iter().zip(&b[1..]).map(|(x, y)| x * y).sum::<f64>() / n;
        assert!(lag0.abs() < 4.0 / n.sqrt());
        assert!(lag1.abs() < 4.0 / n.sqrt());
        assert_ne!(SeedSpec::new(1).key(), SeedSpec::new(1).child(0).key());
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = SeedSpec::new(1).rng();
        let a: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f64> = b.iter().map(|x: &f64| x + 0.3).collect();
        assert!(ks_distance(&a, &b) < ks_critical_999(5000, 5000));
        assert!(ks_distance(&a, &c) > ks_critical_999(5000, 5000));
    }
}
