//! Edge and two-star processes of a Bernoulli random graph restricted to
//! its first `⌊nt⌋` vertices, the edge-resampling pair, the Gaussian
//! pre-limit and its Brownian representation, and the continuous limit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::functionals::CylinderFunctional;
use crate::mc::{Engine, McEstimate, SeedSpec, SimRng};
use crate::model::{ExchangeableModel, IdentityCheck, TargetLaw};
use crate::paths::PiecewiseConstantPath;
use crate::time::TimePoint;

/// Refinement factor of the `i/n` grid used for sup norms involving the
/// continuous limit.
pub const REFINE: usize = 8;

fn choose2(m: f64) -> f64 {
    m * (m - 1.0) / 2.0
}

fn choose3(m: f64) -> f64 {
    m * (m - 1.0) * (m - 2.0) / 6.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GraphModel {
    n: usize,
    p: f64,
}

/// Symmetric 0/1 adjacency, row-major `n × n`, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRealization {
    pub n: usize,
    pub adj: Vec<u8>,
}

impl GraphRealization {
    pub fn edge(&self, i: usize, j: usize) -> u8 {
        self.adj[i * self.n + j]
    }

    pub fn set_edge(&mut self, i: usize, j: usize, v: u8) {
        self.adj[i * self.n + j] = v;
        self.adj[j * self.n + i] = v;
    }

    /// `(#edges, #two-stars)` among the first `T` vertices, `T = 0..=n`.
    pub fn counts(&self) -> Vec<(u64, u64)> {
        let n = self.n;
        let mut deg = vec![0u64; n];
        let (mut edges, mut stars) = (0u64, 0u64);
        let mut out = Vec::with_capacity(n + 1);
        out.push((0, 0));
        for v in 0..n {
            let mut new_deg = 0u64;
            for u in 0..v {
                if self.edge(u, v) == 1 {
                    stars += deg[u];
                    deg[u] += 1;
                    new_deg += 1;
                }
            }
            stars += new_deg * new_deg.saturating_sub(1) / 2;
            deg[v] = new_deg;
            edges += new_deg;
            out.push((edges, stars));
        }
        out
    }
}

/// Pieces of one coupling draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingDraw {
    /// Sup over the factor-`REFINE` grid.
    pub dist: f64,
    /// Sup over the factor-`REFINE/2` subgrid.
    pub dist_coarse: f64,
    pub z_norm: f64,
    /// `(Z_n^{(1)}(1), Z^{(1)}(1))`.
    pub first_at_one: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub n: usize,
    pub samples: u64,
    pub dist: McEstimate,
    pub dist_sq: McEstimate,
    pub z_norm_sq: McEstimate,
    /// Mean increase of the sup when the grid is refined from factor 4 to 8.
    pub refinement_bias: McEstimate,
    pub correlation_at_one: f64,
    pub bound_dist: f64,
    pub bound_dist_sq: f64,
    pub bound_z_norm_sq: f64,
}

impl CouplingReport {
    /// `(name, estimate, bound, pass)` with the CI lower end compared to the bound.
    pub fn checks(&self) -> Vec<(&'static str, &McEstimate, f64, bool)> {
        let pass = |e: &McEstimate, b: f64| e.mean() - e.ci95_half_width() <= b;
        vec![
            ("coupling_dist", &self.dist, self.bound_dist, pass(&self.dist, self.bound_dist)),
            ("coupling_dist_sq", &self.dist_sq, self.bound_dist_sq, pass(&self.dist_sq, self.bound_dist_sq)),
            ("limit_norm_sq", &self.z_norm_sq, self.bound_z_norm_sq, pass(&self.z_norm_sq, self.bound_z_norm_sq)),
        ]
    }
}

/// Closed forms for `E D^{(a)}(t) D^{(b)}(u)`.
#[derive(Debug, Clone, Copy)]
pub struct PrelimitCovariance {
    n: usize,
    p: f64,
}

impl PrelimitCovariance {
    fn floors(&self, t: TimePoint, u: TimePoint) -> (f64, f64, f64, f64) {
        let (a, b) = (t.floor_mul(self.n) as f64, u.floor_mul(self.n) as f64);
        (a, b, a.min(b), a.max(b))
    }

    fn n4(&self) -> f64 {
        (self.n as f64).powi(4)
    }

    pub fn d1d1(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let p = self.p;
        (a - 2.0) * (b - 2.0) * m * (m - 1.0) * p * (1.0 - p) / (2.0 * self.n4())
    }

    pub fn d1d2(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let p = self.p;
        (a - 2.0) * (b - 2.0) * m * (m - 1.0) * p * p * (1.0 - p) / self.n4()
    }

    /// Simplified closed form of the second-component covariance.
    pub fn d2d2(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let (p, nf) = (self.p, self.n as f64);
        (a - 2.0) * (b - 2.0) * m * (m - 1.0) * (1.0 / nf.powi(5) + 2.0 * p.powi(3) * (1.0 - p) / self.n4())
            + m * (m - 1.0) * (m - 2.0) * p * p * (1.0 - p).powi(2) / (2.0 * self.n4())
    }

    /// The same quantity as the literal four-term sum over the table's
    /// nonzero covariance classes.
    pub fn d2d2_table_sum(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, big) = self.floors(t, u);
        let (p, nf, n4) = (self.p, self.n as f64, self.n4());
        let same_pair = (a - 2.0) * (b - 2.0) * m * (m - 1.0) / nf.powi(5);
        let pair_triple = (a - 2.0) * (b - 2.0) * m * (m - 1.0) * p.powi(3) * (1.0 - p) / n4;
        let same_triple = m * (m - 1.0) * (m - 2.0) * p * p * (1.0 - p * p) / (2.0 * n4);
        let shared_pair = m * (m - 1.0) * (m - 2.0) * (big - 3.0) * p.powi(3) * (1.0 - p) / n4;
        same_pair + pair_triple + same_triple + shared_pair
    }

    fn coefficients(&self) -> (f64, f64, f64) {
        brownian_coefficients(self.p)
    }

    fn tau(m: f64) -> f64 {
        m * (m - 1.0)
    }

    fn alpha(&self, a: f64) -> f64 {
        (a - 2.0) / (self.n as f64).powi(2)
    }

    /// `E Z_n^{(1)}(t) Z_n^{(1)}(u)` from the Brownian representation.
    pub fn brownian_d1d1(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let (c1, c2, _) = self.coefficients();
        self.alpha(a) * self.alpha(b) * (c1 * c1 + c2 * c2) * Self::tau(m)
    }

    pub fn brownian_d1d2(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let (c1, c2, c3) = self.coefficients();
        self.alpha(a) * self.alpha(b) * (c1 * c2 + c2 * c3) * Self::tau(m)
    }

    /// Second component with the `B₄` term read at `⌊nt⌋(⌊nt⌋−1)(⌊nt⌋−2)`.
    pub fn brownian_d2d2(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let (_, c2, c3) = self.coefficients();
        let nf = self.n as f64;
        let beta = |x: f64| (x - 2.0) / nf.powf(2.5);
        let gamma = self.p * (1.0 - self.p) / (2f64.sqrt() * nf * nf);
        self.alpha(a) * self.alpha(b) * (c2 * c2 + c3 * c3) * Self::tau(m)
            + beta(a) * beta(b) * Self::tau(m)
            + gamma * gamma * m * (m - 1.0) * (m - 2.0)
    }

    /// Second component with `B₄` read at `⌊nt⌋²(⌊nt⌋−1)` plus the constant
    /// `B₅(1)` term. Reported for comparison only.
    pub fn brownian_d2d2_as_printed(&self, t: TimePoint, u: TimePoint) -> f64 {
        let (a, b, m, _) = self.floors(t, u);
        let (_, c2, c3) = self.coefficients();
        let (nf, p) = (self.n as f64, self.p);
        let beta = |x: f64| (x - 2.0) / nf.powf(2.5);
        let gamma = p * (1.0 - p) / (2f64.sqrt() * nf * nf);
        self.alpha(a) * self.alpha(b) * (c2 * c2 + c3 * c3) * Self::tau(m)
            + beta(a) * beta(b) * Self::tau(m)
            + gamma * gamma * m * m * (m - 1.0)
            + 2.0 * p.powi(3) * (1.0 - p) / self.n4()
    }

    /// `E[D(t) D(u)ᵀ]` as a row-major 2×2 block.
    pub fn block(&self, t: TimePoint, u: TimePoint) -> [f64; 4] {
        [self.d1d1(t, u), self.d1d2(t, u), self.d1d2(u, t), self.d2d2(t, u)]
    }
}

/// `(c₁, c₂, c₃)` of the two-Brownian representation of the limit.
pub fn brownian_coefficients(p: f64) -> (f64, f64, f64) {
    let q = p * (1.0 - p);
    let c1 = q.sqrt() / (2.0 + 8.0 * p * p).sqrt();
    let c2 = p * (2.0 * q).sqrt() / (1.0 + 4.0 * p * p).sqrt();
    let c3 = 2.0 * p * p * (2.0 * q).sqrt() / (1.0 + 4.0 * p * p).sqrt();
    (c1, c2, c3)
}

/// `12·gnorm/n`.
pub fn bound_prelimit(n: usize, gnorm: f64) -> f64 {
    12.0 * gnorm / n as f64
}

/// `gnorm·(913√(ln n) + 112)/√n`.
pub fn bound_continuous(n: usize, gnorm: f64) -> f64 {
    let nf = n as f64;
    gnorm * (913.0 * nf.ln().sqrt() + 112.0) / nf.sqrt()
}

/// `(E‖Z_n−Z‖, E‖Z_n−Z‖², E‖Z‖²)` bounds.
pub fn coupling_bounds(n: usize) -> (f64, f64, f64) {
    let nf = n as f64;
    (
        12.0 / nf.sqrt() + 51.0 * nf.ln().sqrt() / nf.sqrt(),
        121.0 / nf + 743.0 * nf.ln() / nf,
        5.0,
    )
}

/// Brownian motion sampled at a nondecreasing list of times.
fn brownian_at(times: &[f64], rng: &mut SimRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let (mut prev_t, mut acc) = (0.0, 0.0);
    for &t in times {
        let dt = t - prev_t;
        if dt > 0.0 {
            acc += dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
            prev_t = t;
        }
        out.push(acc);
    }
    out
}

/// Two independent Brownian motions sampled at a common unsorted time set.
fn brownian_pair_at(times: &[f64], rng: &mut SimRng) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| times[k]).collect();
    let (mut b1, mut b2) = (vec![0.0; times.len()], vec![0.0; times.len()]);
    let (mut prev_t, mut x1, mut x2) = (0.0, 0.0, 0.0);
    for (&k, &t) in order.iter().zip(&sorted) {
        let dt = t - prev_t;
        if dt > 0.0 {
            let s = dt.sqrt();
            x1 += s * rng.sample::<f64, _>(StandardNormal);
            x2 += s * rng.sample::<f64, _>(StandardNormal);
            prev_t = t;
        }
        b1[k] = x1;
        b2[k] = x2;
    }
    (b1, b2)
}

impl GraphModel {
    pub fn new(n: usize, p: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidModel(format!("graph model needs n ≥ 3, got {n}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidModel(format!("edge probability must lie in (0, 1), got {p}")));
        }
        Ok(GraphModel { n, p })
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let n = doc
            .get("n")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::InvalidModel("missing integer field 'n'".into()))?;
        let p = doc
            .get("p")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::InvalidModel("missing number field 'p'".into()))?;
        Self::new(n as usize, p)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn prelimit_cov(&self) -> PrelimitCovariance {
        PrelimitCovariance { n: self.n, p: self.p }
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    /// `(E T_n(t), E V_n(t))`.
    pub fn moments_tv(&self, t: TimePoint) -> (f64, f64) {
        let m = t.floor_mul(self.n) as f64;
        let n2 = self.nf() * self.nf();
        ((m - 2.0) / n2 * choose2(m) * self.p, 3.0 / n2 * choose3(m) * self.p * self.p)
    }

    fn mean_levels(&self) -> Vec<(f64, f64)> {
        (0..=self.n)
            .map(|k| self.moments_tv(TimePoint::grid(k, self.n).expect("grid time")))
            .collect()
    }

    /// Leading-order covariance matrix of `(T_n(t), V_n(t))`, row-major.
    pub fn cov_tv(&self, t: TimePoint) -> [f64; 4] {
        let m = t.floor_mul(self.n) as f64;
        let p = self.p;
        let c = 3.0 * (m - 2.0) * choose3(m) * p * (1.0 - p) / self.nf().powi(4);
        [c, 2.0 * p * c, 2.0 * p * c, 4.0 * p * p * c]
    }

    pub fn sample_realization(&self, rng: &mut SimRng) -> GraphRealization {
        let n = self.n;
        let mut g = GraphRealization {
            n,
            adj: vec![0; n * n],
        };
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < self.p {
                    g.set_edge(i, j, 1);
                }
            }
        }
        g
    }

    /// Centred path `Y_n = (T_n − E T_n, V_n − E V_n)`.
    pub fn path(&self, g: &GraphRealization) -> PiecewiseConstantPath {
        let n2 = self.nf() * self.nf();
        let means = self.mean_levels();
        let mut levels = Vec::with_capacity(2 * (self.n + 1));
        for (k, (&(e, s), &(et, ev))) in g.counts().iter().zip(&means).enumerate() {
            levels.push((k as f64 - 2.0) / n2 * e as f64 - et);
            levels.push(s as f64 / n2 - ev);
        }
        PiecewiseConstantPath::from_grid_levels(self.n, 2, levels).expect("grid path")
    }

    /// `Y − Y′` when edge `(i, j)` (0-based, `i ≠ j`) is replaced by `new`.
    pub fn pair_difference(&self, g: &GraphRealization, i: usize, j: usize, new: u8) -> PiecewiseConstantPath {
        let n = self.n;
        let n2 = self.nf() * self.nf();
        let delta = g.edge(i, j) as f64 - new as f64;
        let top = i.max(j) + 1;
        let mut levels = vec![0.0; 2 * (n + 1)];
        let mut shared = 0.0;
        for t in 1..=n {
            let k = t - 1;
            if k != i && k != j {
                shared += (g.edge(j, k) + g.edge(i, k)) as f64;
            }
            if t >= top {
                levels[2 * t] = (t as f64 - 2.0) / n2 * delta;
                levels[2 * t + 1] = delta * shared / n2;
            }
        }
        PiecewiseConstantPath::from_grid_levels(n, 2, levels).expect("grid path")
    }

    fn draw_edge(&self, rng: &mut SimRng) -> (usize, usize) {
        let i = rng.random_range(0..self.n);
        let mut j = rng.random_range(0..self.n - 1);
        if j >= i {
            j += 1;
        }
        (i.min(j), i.max(j))
    }

    pub fn regression_residual_for(&self, g: &GraphRealization, f: &CylinderFunctional) -> Result<f64> {
        let y = self.path(g);
        let lambda = self.lambda();
        let pairs = choose2(self.nf());
        let mut expect = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                for (new, w) in [(0u8, 1.0 - self.p), (1u8, self.p)] {
                    let d = self.pair_difference(g, i, j, new).right_mul(&lambda)?;
                    expect += w / pairs * f.dderiv(&y, &d)?;
                }
            }
        }
        Ok((f.dderiv(&y, &y)? - 2.0 * expect).abs())
    }

    /// Levels of `Z_n` on `T = 0..=n` from the Brownian representation.
    fn sample_dn_levels(&self, rng: &mut SimRng) -> Vec<f64> {
        let n = self.n;
        let nf = self.nf();
        let (c1, c2, c3) = brownian_coefficients(self.p);
        let tau: Vec<f64> = (0..=n).map(|t| (t * t.saturating_sub(1)) as f64).collect();
        let kappa: Vec<f64> = (0..=n)
            .map(|t| (t * t.saturating_sub(1) * t.saturating_sub(2)) as f64)
            .collect();
        let b1 = brownian_at(&tau, rng);
        let b2 = brownian_at(&tau, rng);
        let b3 = brownian_at(&tau, rng);
        let b4 = brownian_at(&kappa, rng);
        let gamma = self.p * (1.0 - self.p) / (2f64.sqrt() * nf * nf);
        let mut levels = Vec::with_capacity(2 * (n + 1));
        for t in 0..=n {
            let alpha = (t as f64 - 2.0) / (nf * nf);
            let beta = (t as f64 - 2.0) / nf.powf(2.5);
            levels.push(alpha * (c1 * b1[t] + c2 * b2[t]));
            levels.push(alpha * (c2 * b1[t] + c3 * b2[t]) + beta * b3[t] + gamma * b4[t]);
        }
        levels
    }

    /// One draw of the coupled pair `(Z_n, Z)` built from shared `B₁, B₂`.
    pub fn sample_coupling(&self, rng: &mut SimRng) -> CouplingDraw {
        let n = self.n;
        let nf = self.nf();
        let fine = REFINE * n;
        let (c1, c2, c3) = brownian_coefficients(self.p);
        // Shared rescaled motions at τ_T/n² (T = 0..=n) and at t² on the fine grid.
        let mut times: Vec<f64> = (0..=n).map(|t| (t * t.saturating_sub(1)) as f64 / (nf * nf)).collect();
        times.extend((0..=fine).map(|j| {
            let t = j as f64 / fine as f64;
            t * t
        }));
        let (b1, b2) = brownian_pair_at(&times, rng);
        let tau: Vec<f64> = (0..=n).map(|t| (t * t.saturating_sub(1)) as f64).collect();
        let kappa: Vec<f64> = (0..=n)
            .map(|t| (t * t.saturating_sub(1) * t.saturating_sub(2)) as f64)
            .collect();
        let b3 = brownian_at(&tau, rng);
        let b4 = brownian_at(&kappa, rng);
        let gamma = self.p * (1.0 - self.p) / (2f64.sqrt() * nf * nf);
        let zn: Vec<(f64, f64)> = (0..=n)
            .map(|t| {
                let a = (t as f64 - 2.0) / nf;
                let beta = (t as f64 - 2.0) / nf.powf(2.5);
                (
                    a * (c1 * b1[t] + c2 * b2[t]),
                    a * (c2 * b1[t] + c3 * b2[t]) + beta * b3[t] + gamma * b4[t],
                )
            })
            .collect();
        let (mut dist, mut dist_coarse, mut z_norm) = (0.0f64, 0.0f64, 0.0f64);
        let mut z_at_one = 0.0;
        for j in 0..=fine {
            let t = j as f64 / fine as f64;
            let (u1, u2) = (b1[n + 1 + j], b2[n + 1 + j]);
            let z = (t * (c1 * u1 + c2 * u2), t * (c2 * u1 + c3 * u2));
            let (d1, d2) = (zn[j / REFINE].0 - z.0, zn[j / REFINE].1 - z.1);
            let d = d1.hypot(d2);
            dist = dist.max(d);
            if j % 2 == 0 {
                dist_coarse = dist_coarse.max(d);
            }
            z_norm = z_norm.max(z.0.hypot(z.1));
            if j == fine {
                z_at_one = z.0;
            }
        }
        CouplingDraw {
            dist,
            dist_coarse,
            z_norm,
            first_at_one: (zn[n].0, z_at_one),
        }
    }

    pub fn coupling_distance(&self, engine: &Engine, seed: &SeedSpec, samples: u64) -> Result<CouplingReport> {
        let est = engine.estimate(seed, samples, 8, |rng, out| {
            let d = self.sample_coupling(rng);
            let (a, b) = d.first_at_one;
            out.copy_from_slice(&[d.dist, d.dist * d.dist, d.z_norm * d.z_norm, d.dist - d.dist_coarse, a * b, a * a, b * b, a - b]);
            Ok(())
        })?;
        let (bd, bd2, bz) = coupling_bounds(self.n);
        let cov = est[4].mean();
        let correlation_at_one = cov / (est[5].mean() * est[6].mean()).sqrt();
        Ok(CouplingReport {
            n: self.n,
            samples,
            dist: est[0],
            dist_sq: est[1],
            z_norm_sq: est[2],
            refinement_bias: est[3],
            correlation_at_one,
            bound_dist: bd,
            bound_dist_sq: bd2,
            bound_z_norm_sq: bz,
        })
    }
}

/// The continuous limit on a grid of times, from fresh Brownian motions.
pub fn sample_z(p: f64, grid: &[TimePoint], rng: &mut SimRng) -> Result<Vec<[f64; 2]>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("edge probability must lie in (0, 1), got {p}")));
    }
    let (c1, c2, c3) = brownian_coefficients(p);
    let sq: Vec<f64> = grid.iter().map(|t| t.as_f64().powi(2)).collect();
    let (b1, b2) = brownian_pair_at(&sq, rng);
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let t = t.as_f64();
            [t * (c1 * b1[k] + c2 * b2[k]), t * (c2 * b1[k] + c3 * b2[k])]
        })
        .collect())
}

/// Explicit joint Gaussian family `Z^{(1)}_{ij}, Z^{(2,1)}_{ij}, Z^{(2,2)}_{ijk}`
/// over ordered distinct indices, with the table covariance. Only feasible
/// for small `n`.
pub struct DirectGaussianOracle {
    n: usize,
    pairs: Vec<(usize, usize)>,
    triples: Vec<(usize, usize, usize)>,
    cov: DMatrix<f64>,
}

pub const DIRECT_ORACLE_MAX_N: usize = 8;

impl DirectGaussianOracle {
    pub fn new(model: &GraphModel) -> Result<Self> {
        let n = model.n;
        if n > DIRECT_ORACLE_MAX_N {
            return Err(Error::Domain(format!(
                "direct oracle limited to n ≤ {DIRECT_ORACLE_MAX_N}, got {n}"
            )));
        }
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .collect();
        let triples: Vec<(usize, usize, usize)> = (0..n)
            .flat_map(|i| (0..n).flat_map(move |j| (0..n).map(move |k| (i, j, k))))
            .filter(|&(i, j, k)| i != j && j != k && i != k)
            .collect();
        let np = pairs.len();
        let dim = 2 * np + triples.len();
        let (p, n4, n5) = (model.p, (n as f64).powi(4), (n as f64).powi(5));
        let mut cov = DMatrix::zeros(dim, dim);
        // Layout: Z1 pairs, Z21 pairs, Z22 triples.
        for a in 0..np {
            cov[(a, a)] = p * (1.0 - p) / (2.0 * n4);
            cov[(np + a, np + a)] = 1.0 / n5;
            let c = p * p * (1.0 - p) / (4.0 * n4);
            cov[(a, np + a)] = c;
            cov[(np + a, a)] = c;
        }
        for (x, &(i, j, k)) in triples.iter().enumerate() {
            let r = 2 * np + x;
            let a = pairs.iter().position(|&q| q == (i, j)).expect("pair present");
            let c1 = 3.0 * p * p * (1.0 - p) / (4.0 * n4);
            let c21 = p.powi(3) * (1.0 - p) / (2.0 * n4);
            cov[(r, a)] = c1;
            cov[(a, r)] = c1;
            cov[(r, np + a)] = c21;
            cov[(np + a, r)] = c21;
            for (y, &(r2, s2, t2)) in triples.iter().enumerate() {
                let c = 2 * np + y;
                if (r2, s2) == (i, j) {
                    cov[(r, c)] = if t2 == k {
                        p * p * (1.0 - p * p) / (2.0 * n4)
                    } else {
                        p.powi(3) * (1.0 - p) / n4
                    };
                }
            }
        }
        Ok(DirectGaussianOracle {
            n,
            pairs,
            triples,
            cov,
        })
    }

    /// Rows: `D^{(1)}(t_a)`, `D^{(2)}(t_a)` for each grid time.
    fn linear_map(&self, grid: &[TimePoint]) -> DMatrix<f64> {
        let np = self.pairs.len();
        let mut l = DMatrix::zeros(2 * grid.len(), self.cov.nrows());
        for (g, t) in grid.iter().enumerate() {
            let m = t.floor_mul(self.n);
            let w = m as f64 - 2.0;
            for (a, &(i, j)) in self.pairs.iter().enumerate() {
                if i < m && j < m {
                    l[(2 * g, a)] = w;
                    l[(2 * g + 1, np + a)] = w;
                }
            }
            for (x, &(i, j, k)) in self.triples.iter().enumerate() {
                if i < m && j < m && k < m {
                    l[(2 * g + 1, 2 * np + x)] = 1.0;
                }
            }
        }
        l
    }

    /// Exact covariance of `(D(t_a))_a` implied by the table, `2k × 2k`.
    pub fn grid_covariance(&self, grid: &[TimePoint]) -> DMatrix<f64> {
        let l = self.linear_map(grid);
        &l * &self.cov * l.transpose()
    }

    /// Smallest eigenvalue of the table covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.cov.clone().symmetric_eigen().eigenvalues.min()
    }

    /// Sampler for `(D(t_a))_a`; errors if the table is not PSD.
    pub fn sampler(&self, grid: &[TimePoint]) -> Result<DirectSampler> {
        let eig = self.cov.clone().symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let min = eig.eigenvalues.min();
        if min < -1e-10 * scale {
            return Err(Error::NotPositiveSemidefinite(min));
        }
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Ok(DirectSampler {
            factor: self.linear_map(grid) * root,
        })
    }
}

pub struct DirectSampler {
    factor: DMatrix<f64>,
}

impl DirectSampler {
    /// One draw, laid out as `[D¹(t₁), D²(t₁), D¹(t₂), …]`.
    pub fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.factor * z).iter().copied().collect()
    }
}

impl TargetLaw for GraphModel {
    fn dim(&self) -> usize {
        2
    }

    fn n(&self) -> usize {
        self.n
    }

    fn sample_dn(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath> {
        PiecewiseConstantPath::from_grid_levels(self.n, 2, self.sample_dn_levels(rng))
    }

    fn cov_block(&self, s: TimePoint, t: TimePoint) -> Vec<f64> {
        self.prelimit_cov().block(s, t).to_vec()
    }
}

impl ExchangeableModel for GraphModel {
    fn kind(&self) -> &'static str {
        "graph"
    }

    fn sample_y(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath> {
        Ok(self.path(&self.sample_realization(rng)))
    }

    fn sample_pair(
        &self,
        rng: &mut SimRng,
    ) -> Result<(PiecewiseConstantPath, PiecewiseConstantPath)> {
        let g = self.sample_realization(rng);
        let (i, j) = self.draw_edge(rng);
        let new = u8::from(rng.random::<f64>() < self.p);
        let y = self.path(&g);
        let diff = self.pair_difference(&g, i, j, new);
        let y_prime = PiecewiseConstantPath::lin_comb(1.0, &y, -1.0, &diff)?;
        Ok((y, y_prime))
    }

    fn lambda(&self) -> Vec<f64> {
        let c = self.nf() * (self.nf() - 1.0) / 8.0;
        vec![2.0 * c, 2.0 * self.p * c, 0.0, c]
    }

    fn regression_residual(&self, f: &CylinderFunctional, rng: &mut SimRng) -> Result<f64> {
        let g = self.sample_realization(rng);
        self.regression_residual_for(&g, f)
    }

    fn sample_r_f(&self, _f: &CylinderFunctional, _rng: &mut SimRng) -> Result<f64> {
        Ok(0.0)
    }

    fn distance_bounds(&self, gnorm: f64) -> Result<Vec<(String, f64)>> {
        if gnorm < 0.0 || !gnorm.is_finite() {
            return Err(Error::Domain(format!("norm bound must be finite and ≥ 0, got {gnorm}")));
        }
        Ok(vec![
            ("prelimit_bound".into(), bound_prelimit(self.n, gnorm)),
            ("limit_bound".into(), bound_continuous(self.n, gnorm)),
        ])
    }

    fn covariance_identities(&self, times: &[TimePoint]) -> Vec<IdentityCheck> {
        let cov = self.prelimit_cov();
        let mut table = IdentityCheck::new("d2d2_table_sum_vs_closed_form", true);
        let mut b11 = IdentityCheck::new("d1d1_brownian_vs_closed_form", true);
        let mut b12 = IdentityCheck::new("d1d2_brownian_vs_closed_form", true);
        let mut b22 = IdentityCheck::new("d2d2_brownian_vs_closed_form", true);
        let mut printed = IdentityCheck::new("d2d2_as_printed_vs_closed_form", false);
        let mut tv11 = IdentityCheck::new("cov_tv_11_vs_block", true);
        let mut tv12 = IdentityCheck::new("cov_tv_12_vs_block", true);
        let mut tv22 = IdentityCheck::new("cov_tv_22_vs_block", false);
        for &s in times {
            for &t in times {
                let d22 = cov.d2d2(s, t);
                table.record(cov.d2d2_table_sum(s, t), d22);
                b11.record(cov.brownian_d1d1(s, t), cov.d1d1(s, t));
                b12.record(cov.brownian_d1d2(s, t), cov.d1d2(s, t));
                b22.record(cov.brownian_d2d2(s, t), d22);
                printed.record(cov.brownian_d2d2_as_printed(s, t), d22);
            }
            let (tv, blk) = (self.cov_tv(s), cov.block(s, s));
            tv11.record(tv[0], blk[0]);
            tv12.record(tv[1], blk[1]);
            tv22.record(tv[3], blk[3]);
        }
        vec![table, b11, b12, b22, printed, tv11, tv12, tv22]
    }

    fn to_json(&self) -> Value {
        json!({"model": "graph", "n": self.n, "p": self.p})
    }
}
