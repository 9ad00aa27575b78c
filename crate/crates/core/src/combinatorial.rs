//! Random-array permutation process
//! `Y_n(t) = s_n⁻¹ Σ_{i ≤ ⌊nt⌋} X_{iπ(i)}`, its transposition pair, the
//! Gaussian-mixture pre-limit `D_n` and the distance bound evaluators.

use std::f64::consts::{FRAC_2_PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::functionals::{dot, CylinderFunctional};
use crate::mc::SimRng;
use crate::model::{ExchangeableModel, IdentityCheck, TargetLaw};
use crate::paths::PiecewiseConstantPath;
use crate::time::TimePoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum EntryDist {
    Constant { value: f64 },
    Gaussian { mean: f64, sd: f64 },
    /// `mean ± scale` with probability 1/2 each.
    RademacherShifted { mean: f64, scale: f64 },
    /// `a` with probability `p`, otherwise `b`.
    TwoPoint { a: f64, b: f64, p: f64 },
}

/// `(E X, Var X, E|X|, E|X|³)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryMoments {
    pub mean: f64,
    pub var: f64,
    pub abs1: f64,
    pub abs3: f64,
}

impl EntryMoments {
    pub fn second(&self) -> f64 {
        self.var + self.mean * self.mean
    }
}

impl EntryDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EntryDist::Constant { value } => value.is_finite(),
            EntryDist::Gaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            EntryDist::RademacherShifted { mean, scale } => mean.is_finite() && scale.is_finite(),
            EntryDist::TwoPoint { a, b, p } => {
                a.is_finite() && b.is_finite() && (0.0..=1.0).contains(&p)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!("invalid entry parameters {self:?}")))
        }
    }

    pub fn moments(&self) -> EntryMoments {
        match *self {
            EntryDist::Constant { value } => EntryMoments {
                mean: value,
                var: 0.0,
                abs1: value.abs(),
                abs3: value.abs().powi(3),
            },
            EntryDist::Gaussian { mean, sd } => {
                if sd == 0.0 {
                    return EntryDist::Constant { value: mean }.moments();
                }
                // Folded normal moments.
                let r = mean / sd;
                let tail = 1.0 - libm::erfc(r / SQRT_2);
                let dens = FRAC_2_PI.sqrt() * (-0.5 * r * r).exp();
                EntryMoments {
                    mean,
                    var: sd * sd,
                    abs1: sd * dens + mean * tail,
                    abs3: (mean.powi(3) + 3.0 * mean * sd * sd) * tail
                        + sd * (mean * mean + 2.0 * sd * sd) * dens,
                }
            }
            EntryDist::RademacherShifted { mean, scale } => {
                let (u, v) = ((mean + scale).abs(), (mean - scale).abs());
                EntryMoments {
                    mean,
                    var: scale * scale,
                    abs1: 0.5 * (u + v),
                    abs3: 0.5 * (u.powi(3) + v.powi(3)),
                }
            }
            EntryDist::TwoPoint { a, b, p } => EntryMoments {
                mean: p * a + (1.0 - p) * b,
                var: p * (1.0 - p) * (a - b) * (a - b),
                abs1: p * a.abs() + (1.0 - p) * b.abs(),
                abs3: p * a.abs().powi(3) + (1.0 - p) * b.abs().powi(3),
            },
        }
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            EntryDist::Constant { value } => value,
            EntryDist::Gaussian { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            EntryDist::RademacherShifted { mean, scale } => {
                if rng.random::<bool>() {
                    mean + scale
                } else {
                    mean - scale
                }
            }
            EntryDist::TwoPoint { a, b, p } => {
                if rng.random::<f64>() < p {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct EntrySpec {
    i: usize,
    j: usize,
    #[serde(flatten)]
    dist: EntryDist,
}

/// `c ← c − row mean − column mean + grand mean`, in place.
pub fn double_center(c: &mut [f64], n: usize) {
    let row: Vec<f64> = (0..n).map(|i| c[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| c[i * n + j]).sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] += grand - row[i] - col[j];
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArrayModel {
    n: usize,
    entries: Vec<EntryDist>,
    moments: Vec<EntryMoments>,
    s2: f64,
    zhat: Vec<f64>,
    /// 2-D prefix sums of `zhat`, `(n+1) × (n+1)`.
    zhat_prefix: Vec<f64>,
    source: Value,
}

/// One draw of `(X, π)`; `pi` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinatorialRealization {
    pub n: usize,
    pub s: f64,
    pub x: Vec<f64>,
    pub pi: Vec<usize>,
}

impl CombinatorialRealization {
    pub fn x(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.n + j]
    }

    pub fn path(&self) -> PiecewiseConstantPath {
        let mut levels = Vec::with_capacity(self.n + 1);
        let mut acc = 0.0;
        levels.push(0.0);
        for i in 0..self.n {
            acc += self.x(i, self.pi[i]);
            levels.push(acc / self.s);
        }
        PiecewiseConstantPath::from_grid_levels(self.n, 1, levels).expect("grid path")
    }

    /// The realization after swapping `π(i)` and `π(j)`.
    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.pi.swap(i, j);
        out
    }
}

/// Individual pieces of the five-index distance bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceBound {
    pub moment_sum: f64,
    pub sqrt_term: f64,
    pub sigma_term: f64,
    pub abs3_term: f64,
    /// `moment_sum + sqrt_term + sigma_term`.
    pub total: f64,
    /// `moment_sum + sqrt_term + abs3_term`.
    pub total_abs3_variant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumMethod {
    Factorized,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub t: f64,
    pub u: f64,
    pub lhs_covariance: f64,
    pub lhs_second_moment: f64,
}

/// `58β₃n²/((n−1)s³) + 8β₃^{1/3}Σ|c_ir c_jr|/(n(n−1)s³) + 2/√n + 4Σσ²/(3ns²)`,
/// times `gnorm`. `c` is row-major `n × n`.
pub fn bound_beta3(n: usize, s: f64, beta3: f64, c: &[f64], sigma_sq_total: f64, gnorm: f64) -> f64 {
    let nf = n as f64;
    let mut cross = 0.0;
    for r in 0..n {
        let col: f64 = (0..n).map(|i| c[i * n + r].abs()).sum();
        cross += col * col;
    }
    let s3 = s.powi(3);
    gnorm
        * (58.0 * beta3 * nf * nf / ((nf - 1.0) * s3)
            + 8.0 * beta3.cbrt() * cross / (nf * (nf - 1.0) * s3)
            + 2.0 / nf.sqrt()
            + 4.0 * sigma_sq_total / (3.0 * nf * s * s))
}

impl ArrayModel {
    pub fn new(n: usize, entries: Vec<EntryDist>) -> Result<Self> {
        Self::with_source(n, entries, Value::Null)
    }

    fn with_source(n: usize, entries: Vec<EntryDist>, source: Value) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidModel(format!("need n ≥ 2, got {n}")));
        }
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        for e in &entries {
            e.validate()?;
        }
        let moments: Vec<EntryMoments> = entries.iter().map(EntryDist::moments).collect();
        let scale = moments.iter().map(|m| m.mean.abs()).fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| moments[i * n + j].mean).sum::<f64>() / n as f64;
            let col: f64 = (0..n).map(|k| moments[k * n + i].mean).sum::<f64>() / n as f64;
            if row.abs() > tol || col.abs() > tol {
                return Err(Error::InvalidModel(format!(
                    "row/column means must vanish (row {} mean {row:e}, column {} mean {col:e}); double-center the mean matrix",
                    i + 1,
                    i + 1
                )));
            }
        }
        for m in &moments {
            if m.abs3 + 1e-9 * m.abs3.max(1.0) < m.second().powf(1.5) {
                return Err(Error::InvalidModel(format!(
                    "third absolute moment {} below (E X²)^(3/2) = {}",
                    m.abs3,
                    m.second().powf(1.5)
                )));
            }
        }
        let nf = n as f64;
        let s2 = moments.iter().map(|m| m.var).sum::<f64>() / nf
            + moments.iter().map(|m| m.mean * m.mean).sum::<f64>() / (nf - 1.0);
        if !(s2 > 0.0) {
            return Err(Error::DegenerateModel(format!("s_n² = {s2} is not positive")));
        }
        let mut model = ArrayModel {
            n,
            entries,
            moments,
            s2,
            zhat: vec![],
            zhat_prefix: vec![],
            source,
        };
        model.zhat = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| model.zhat_cov_raw(i, j))
            .collect();
        let mut pre = vec![0.0; (n + 1) * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                pre[(i + 1) * (n + 1) + j + 1] = model.zhat[i * n + j] + pre[i * (n + 1) + j + 1]
                    + pre[(i + 1) * (n + 1) + j]
                    - pre[i * (n + 1) + j];
            }
        }
        model.zhat_prefix = pre;
        if model.source.is_null() {
            model.source = json!({
                "model": "combinatorial",
                "n": n,
                "entries": model.entries.iter().enumerate().map(|(k, d)| {
                    let mut v = serde_json::to_value(d).expect("entry serializes");
                    v["i"] = json!(k / n + 1);
                    v["j"] = json!(k % n + 1);
                    v
                }).collect::<Vec<_>>(),
            });
        }
        Ok(model)
    }

    /// Deterministic array (all variances zero).
    pub fn deterministic(n: usize, matrix: &[f64]) -> Result<Self> {
        let entries = matrix.iter().map(|&value| EntryDist::Constant { value }).collect();
        Self::with_source(
            n,
            entries,
            json!({"model": "combinatorial", "n": n, "preset": "deterministic", "matrix": to_rows(matrix, n)}),
        )
    }

    /// Independent Gaussian entries with the given means and common sd.
    pub fn iid_gaussian(n: usize, means: Option<&[f64]>, sd: f64) -> Result<Self> {
        let zeros = vec![0.0; n * n];
        let means = means.unwrap_or(&zeros);
        if means.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: means.len(),
            });
        }
        let entries = means.iter().map(|&mean| EntryDist::Gaussian { mean, sd }).collect();
        let mut src = json!({"model": "combinatorial", "n": n, "preset": "iid-gaussian", "sd": sd});
        if means.iter().any(|&m| m != 0.0) {
            src["matrix"] = to_rows(means, n);
        }
        Self::with_source(n, entries, src)
    }

    /// `{n, preset, matrix?, sd?}` or `{n, entries: [{i, j, dist, …}]}`.
    /// Entries missing from the list are the constant 0.
    pub fn from_json(doc: &Value) -> Result<Self> {
        let n = doc
            .get("n")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::InvalidModel("missing integer field 'n'".into()))? as usize;
        if n < 2 {
            return Err(Error::InvalidModel(format!("need n ≥ 2, got {n}")));
        }
        let matrix = match doc.get("matrix") {
            None => None,
            Some(m) => {
                let rows: Vec<Vec<f64>> = serde_json::from_value(m.clone())?;
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidModel(format!("'matrix' must be {n}×{n}")));
                }
                Some(rows.concat())
            }
        };
        if let Some(preset) = doc.get("preset") {
            return match preset.as_str() {
                Some("deterministic") => {
                    let m = matrix.ok_or_else(|| {
                        Error::InvalidModel("deterministic preset needs 'matrix'".into())
                    })?;
                    Self::deterministic(n, &m)
                }
                Some("iid-gaussian") => {
                    let sd = doc.get("sd").map_or(Some(1.0), Value::as_f64).ok_or_else(|| {
                        Error::InvalidModel("'sd' must be a number".into())
                    })?;
                    Self::iid_gaussian(n, matrix.as_deref(), sd)
                }
                _ => Err(Error::InvalidModel(format!(
                    "unknown preset {preset} (known: \"iid-gaussian\", \"deterministic\")"
                ))),
            };
        }
        let specs: Vec<EntrySpec> = match doc.get("entries") {
            Some(e) => serde_json::from_value(e.clone())?,
            None => {
                return Err(Error::InvalidModel(
                    "combinatorial model needs 'preset' or 'entries'".into(),
                ))
            }
        };
        let mut entries = vec![EntryDist::Constant { value: 0.0 }; n * n];
        let mut seen = vec![false; n * n];
        for s in specs {
            if s.i == 0 || s.i > n || s.j == 0 || s.j > n {
                return Err(Error::IndexOutOfRange {
                    index: s.i.max(s.j),
                    max: n,
                });
            }
            let k = (s.i - 1) * n + s.j - 1;
            if seen[k] {
                return Err(Error::InvalidModel(format!("duplicate entry ({}, {})", s.i, s.j)));
            }
            seen[k] = true;
            entries[k] = s.dist;
        }
        let mut src = doc.clone();
        src["model"] = json!("combinatorial");
        Self::with_source(n, entries, src)
    }

    pub fn moments(&self, i: usize, j: usize) -> &EntryMoments {
        &self.moments[i * self.n + j]
    }

    pub fn s_n_squared(&self) -> f64 {
        self.s2
    }

    pub fn s_n(&self) -> f64 {
        self.s2.sqrt()
    }

    pub fn means(&self) -> Vec<f64> {
        self.moments.iter().map(|m| m.mean).collect()
    }

    pub fn sigma_sq_total(&self) -> f64 {
        self.moments.iter().map(|m| m.var).sum()
    }

    pub fn abs3_total(&self) -> f64 {
        self.moments.iter().map(|m| m.abs3).sum()
    }

    pub fn beta3(&self) -> f64 {
        self.moments.iter().map(|m| m.abs3).fold(0.0, f64::max)
    }

    fn sample_x(&self, rng: &mut SimRng) -> Vec<f64> {
        self.entries.iter().map(|e| e.sample(rng)).collect()
    }

    pub fn sample_realization(&self, rng: &mut SimRng) -> CombinatorialRealization {
        let x = self.sample_x(rng);
        let mut pi: Vec<usize> = (0..self.n).collect();
        pi.shuffle(rng);
        CombinatorialRealization {
            n: self.n,
            s: self.s_n(),
            x,
            pi,
        }
    }

    fn draw_pair_indices(&self, rng: &mut SimRng) -> (usize, usize) {
        let i = rng.random_range(0..self.n);
        let mut j = rng.random_range(0..self.n - 1);
        if j >= i {
            j += 1;
        }
        (i, j)
    }

    fn zhat_cov_raw(&self, i: usize, j: usize) -> f64 {
        let n = self.n;
        let nf = n as f64;
        if i == j {
            (0..n).map(|l| self.moments(i, l).second()).sum::<f64>() / nf
        } else {
            -(0..n)
                .map(|k| self.moments(i, k).mean * self.moments(j, k).mean)
                .sum::<f64>()
                / (nf * (nf - 1.0))
        }
    }

    /// `E Ẑ_i Ẑ_j`, 1-based.
    pub fn zhat_cov(&self, i: usize, j: usize) -> Result<f64> {
        for idx in [i, j] {
            if idx == 0 || idx > self.n {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    max: self.n,
                });
            }
        }
        Ok(self.zhat[(i - 1) * self.n + j - 1])
    }

    /// One draw of `(Ẑ_1, …, Ẑ_n)`.
    pub fn sample_zhat(&self, rng: &mut SimRng) -> Vec<f64> {
        let n = self.n;
        let x2 = self.sample_x(rng);
        let z: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let zbar: Vec<f64> = (0..n)
            .map(|l| (0..n).map(|j| z[j * n + l]).sum::<f64>() / n as f64)
            .collect();
        let norm = 1.0 / ((n - 1) as f64).sqrt();
        (0..n)
            .map(|i| norm * (0..n).map(|l| x2[i * n + l] * (z[i * n + l] - zbar[l])).sum::<f64>())
            .collect()
    }

    /// Enumerates every ordered pair move from `real` and returns the
    /// absolute gap in the pathwise regression identity.
    pub fn regression_residual_for(
        &self,
        real: &CombinatorialRealization,
        f: &CylinderFunctional,
    ) -> Result<f64> {
        let n = self.n;
        let y = real.path();
        let mut lhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let diff = PiecewiseConstantPath::lin_comb(1.0, &y, -1.0, &real.swapped(i, j).path())?;
                    lhs += f.dderiv(&y, &diff)?;
                }
            }
        }
        lhs /= (n * (n - 1)) as f64;
        let mut inner = 0.0;
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| real.x(i, real.pi[j])).sum();
            let step = PiecewiseConstantPath::step_indicator(i + 1, n, 1, 1)?;
            inner += row_sum * f.dderiv(&y, &step)?;
        }
        let rhs = 2.0 / (n as f64 - 1.0) * (f.dderiv(&y, &y)? - inner / (n as f64 * real.s));
        Ok((lhs - rhs).abs())
    }

    /// `R_f = (n s_n)⁻¹ Σ_i (Σ_j X_ij) Df(Y)[1_{[i/n,1]}]`.
    pub fn r_f_for(&self, real: &CombinatorialRealization, f: &CylinderFunctional) -> Result<f64> {
        let n = self.n;
        let y = real.path();
        let x = f.points(&y)?;
        let grad = f.gradient_at(&x);
        let mut acc = 0.0;
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| real.x(i, j)).sum();
            let step = PiecewiseConstantPath::step_indicator(i + 1, n, 1, 1)?;
            acc += row_sum * dot(&grad, &f.points(&step)?);
        }
        Ok(acc / (n as f64 * real.s))
    }

    fn aggregates(&self) -> Aggregates {
        let n = self.n;
        let a: Vec<f64> = self.moments.iter().map(|m| m.abs1).collect();
        let b: Vec<f64> = self.moments.iter().map(|m| m.second()).collect();
        let c: Vec<f64> = self.moments.iter().map(|m| m.mean.abs()).collect();
        let m3: Vec<f64> = self.moments.iter().map(|m| m.abs3).collect();
        let row = |v: &[f64], i: usize| (0..n).map(|k| v[i * n + k]).sum::<f64>();
        let col = |v: &[f64], k: usize| (0..n).map(|i| v[i * n + k]).sum::<f64>();
        Aggregates {
            ra: (0..n).map(|i| row(&a, i)).collect(),
            ca: (0..n).map(|k| col(&a, k)).collect(),
            rb: (0..n).map(|i| row(&b, i)).collect(),
            cb: (0..n).map(|k| col(&b, k)).collect(),
            cc: (0..n).map(|k| col(&c, k)).collect(),
            a,
            b,
            c,
            m3,
        }
    }

    fn moment_sum_factorized(&self) -> f64 {
        let n = self.n;
        let nf = n as f64;
        let g = self.aggregates();
        let a_tot: f64 = g.a.iter().sum();
        let b_tot: f64 = g.b.iter().sum();
        let m3_tot: f64 = g.m3.iter().sum();
        let sum = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>();

        let t1 = 3.0 * nf.powi(3) * m3_tot;
        let t2 = 5.0 * nf * nf * sum(&|i| g.ra[i] * g.rb[i]);
        let t3 = 7.0 * nf * b_tot * a_tot;
        let t4 = 5.0 * nf * nf * sum(&|k| g.cb[k] * g.ca[k]);
        let t5 = 16.0 * nf * sum(&|i| g.ra[i] * sum(&|l| g.a[i * n + l] * g.ca[l]));
        let t6 = 2.0 * nf * sum(&|i| g.ra[i].powi(3));
        let t7 = 4.0 * sum(&|i| g.ra[i] * g.ra[i]) * a_tot;
        let t8 = 6.0 * sum(&|k| g.ca[k] * g.ca[k]) * a_tot;
        let t9 = 2.0 * nf * sum(&|k| g.ca[k].powi(3));

        // Q_ij = Σ_r (E|X_ir|² + |c_ir||c_jr|).
        let cross_i: Vec<f64> = (0..n).map(|i| sum(&|r| g.c[i * n + r] * g.cc[r])).collect();
        let sum_ri_q = sum(&|i| g.ra[i] * (nf * g.rb[i] + cross_i[i]));
        let sum_rj_q = sum(&|j| g.ra[j] * (b_tot + cross_i[j]));
        let sum_q = nf * b_tot + sum(&|r| g.cc[r] * g.cc[r]);
        let t10 = (2.0 * nf * nf * sum_ri_q + 2.0 * nf * nf * sum_rj_q + 4.0 * nf * a_tot * sum_q) / nf;

        t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8 + t9 + t10
    }

    fn moment_sum_naive(&self) -> f64 {
        let n = self.n;
        let nf = n as f64;
        let g = self.aggregates();
        let a = |i: usize, k: usize| g.a[i * n + k];
        let b = |i: usize, k: usize| g.b[i * n + k];
        let q: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                (0..n).map(|r| b(i, r) + g.c[i * n + r] * g.c[j * n + r]).sum()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        for u in 0..n {
                            total += 3.0 * g.m3[i * n + k]
                                + 5.0 * a(i, k) * b(i, l)
                                + 7.0 * b(i, k) * a(j, l)
                                + 5.0 * b(i, k) * a(j, k)
                                + 16.0 * a(i, k) * a(i, l) * a(j, l)
                                + 2.0 * a(i, u) * a(i, k) * a(i, l)
                                + 4.0 * a(i, u) * a(i, l) * a(j, k)
                                + 6.0 * a(u, k) * a(i, k) * a(j, l)
                                + 2.0 * a(u, k) * a(i, k) * a(j, k)
                                + (2.0 * a(i, k) + 2.0 * a(j, l) + 2.0 * a(u, k) + 2.0 * a(u, l))
                                    * q[i * n + j]
                                    / nf;
                        }
                    }
                }
            }
        }
        total
    }

    /// The five-index distance bound with `‖g‖_{M¹}` replaced by `gnorm`.
    pub fn distance_bound(&self, gnorm: f64, method: SumMethod) -> Result<DistanceBound> {
        if gnorm < 0.0 || !gnorm.is_finite() {
            return Err(Error::Domain(format!("norm bound must be finite and ≥ 0, got {gnorm}")));
        }
        let nf = self.n as f64;
        let s = self.s_n();
        let raw = match method {
            SumMethod::Factorized => self.moment_sum_factorized(),
            SumMethod::Naive => self.moment_sum_naive(),
        };
        let moment_sum = gnorm * raw / (nf.powi(3) * (nf - 1.0) * s.powi(3));
        let sqrt_term = 2.0 * gnorm / nf.sqrt();
        let sigma_term = 4.0 * gnorm * self.sigma_sq_total() / (3.0 * nf * self.s2);
        let abs3_term = 4.0 * gnorm * self.abs3_total() / (3.0 * nf * s.powi(3));
        Ok(DistanceBound {
            moment_sum,
            sqrt_term,
            sigma_term,
            abs3_term,
            total: moment_sum + sqrt_term + sigma_term,
            total_abs3_variant: moment_sum + sqrt_term + abs3_term,
        })
    }

    pub fn bound_beta3(&self, gnorm: f64) -> f64 {
        bound_beta3(self.n, self.s_n(), self.beta3(), &self.means(), self.sigma_sq_total(), gnorm)
    }

    /// Finite-n left sides of the two covariance-convergence assumptions on
    /// every `(t, u)` pair of the grid.
    pub fn assumption_diagnostic(&self, grid: &[TimePoint]) -> Vec<DiagnosticRow> {
        let n = self.n;
        let nf = n as f64;
        let mut rows = Vec::with_capacity(grid.len() * grid.len());
        for &t in grid {
            for &u in grid {
                let (tt, uu) = (t.floor_mul(n), u.floor_mul(n));
                let mut lhs1 = 0.0;
                let mut lhs2 = 0.0;
                for i in 0..tt {
                    for j in 0..uu {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        for k in 0..n {
                            let (mi, mj) = (self.moments(i, k), self.moments(j, k));
                            let exy = mi.mean * mj.mean + delta * mi.var;
                            lhs1 += exy * (delta - 1.0 / nf);
                            lhs2 += exy;
                        }
                    }
                }
                rows.push(DiagnosticRow {
                    t: t.as_f64(),
                    u: u.as_f64(),
                    lhs_covariance: lhs1 / (self.s2 * (nf - 1.0)),
                    lhs_second_moment: lhs2 / self.s2,
                });
            }
        }
        rows
    }
}

struct Aggregates {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    m3: Vec<f64>,
    ra: Vec<f64>,
    ca: Vec<f64>,
    rb: Vec<f64>,
    cb: Vec<f64>,
    cc: Vec<f64>,
}

fn to_rows(m: &[f64], n: usize) -> Value {
    json!(m.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>())
}

impl TargetLaw for ArrayModel {
    fn dim(&self) -> usize {
        1
    }

    fn n(&self) -> usize {
        self.n
    }

    fn sample_dn(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath> {
        let z = self.sample_zhat(rng);
        let s = self.s_n();
        let mut levels = Vec::with_capacity(self.n + 1);
        let mut acc = 0.0;
        levels.push(0.0);
        for v in z {
            acc += v;
            levels.push(acc / s);
        }
        PiecewiseConstantPath::from_grid_levels(self.n, 1, levels)
    }

    fn cov_block(&self, s: TimePoint, t: TimePoint) -> Vec<f64> {
        let (a, b) = (s.floor_mul(self.n), t.floor_mul(self.n));
        vec![self.zhat_prefix[a * (self.n + 1) + b] / self.s2]
    }

    fn is_gaussian(&self) -> bool {
        self.moments.iter().all(|m| m.var == 0.0)
    }
}

impl ExchangeableModel for ArrayModel {
    fn kind(&self) -> &'static str {
        "combinatorial"
    }

    fn sample_y(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath> {
        Ok(self.sample_realization(rng).path())
    }

    fn sample_pair(
        &self,
        rng: &mut SimRng,
    ) -> Result<(PiecewiseConstantPath, PiecewiseConstantPath)> {
        let real = self.sample_realization(rng);
        let (i, j) = self.draw_pair_indices(rng);
        Ok((real.path(), real.swapped(i, j).path()))
    }

    fn lambda(&self) -> Vec<f64> {
        vec![(self.n as f64 - 1.0) / 4.0]
    }

    fn regression_residual(&self, f: &CylinderFunctional, rng: &mut SimRng) -> Result<f64> {
        let real = self.sample_realization(rng);
        self.regression_residual_for(&real, f)
    }

    fn sample_r_f(&self, f: &CylinderFunctional, rng: &mut SimRng) -> Result<f64> {
        let real = self.sample_realization(rng);
        self.r_f_for(&real, f)
    }

    fn distance_bounds(&self, gnorm: f64) -> Result<Vec<(String, f64)>> {
        let b = self.distance_bound(gnorm, SumMethod::Factorized)?;
        Ok(vec![
            ("distance_bound".into(), b.total),
            ("distance_bound_moment_sum".into(), b.moment_sum),
            ("distance_bound_sqrt_term".into(), b.sqrt_term),
            ("distance_bound_sigma_term".into(), b.sigma_term),
            ("distance_bound_abs3_variant".into(), b.total_abs3_variant),
            ("beta3_simplified".into(), self.bound_beta3(gnorm)),
        ])
    }

    fn covariance_identities(&self, times: &[TimePoint]) -> Vec<IdentityCheck> {
        let mut prefix = IdentityCheck::new("prefix_sum_vs_direct_sum", true);
        let mut symmetric = IdentityCheck::new("symmetry", true);
        for &s in times {
            for &t in times {
                let (a, b) = (s.floor_mul(self.n), t.floor_mul(self.n));
                let direct: f64 = (1..=a)
                    .flat_map(|i| (1..=b).map(move |j| (i, j)))
                    .map(|(i, j)| self.zhat_cov(i, j).expect("indices in range"))
                    .sum::<f64>()
                    / self.s2;
                prefix.record(self.cov_block(s, t)[0], direct);
                symmetric.record(self.cov_block(s, t)[0], self.cov_block(t, s)[0]);
            }
        }
        let mut unit = IdentityCheck::new("unit_variance_at_one", true);
        unit.record(self.cov_block(TimePoint::ONE, TimePoint::ONE)[0], 1.0);
        vec![prefix, symmetric, unit]
    }

    fn to_json(&self) -> Value {
        self.source.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::parse_functional;
    use crate::mc::{Engine, SeedSpec};

    fn example3() -> ArrayModel {
        ArrayModel::deterministic(3, &[1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = vec![];
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn s_n_squared_examples() {
        let m = example3();
        assert_eq!(m.s_n_squared(), 2.0);
        // Permutation enumeration oracle.
        let x = [1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let sums: Vec<f64> = permutations(3)
            .iter()
            .map(|p| (0..3).map(|i| x[i * 3 + p[i]]).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / 6.0;
        let var = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((var - 2.0).abs() < 1e-15);

        for n in [2, 5, 9] {
            let m = ArrayModel::iid_gaussian(n, None, 1.0).unwrap();
            assert!((m.s_n_squared() - n as f64).abs() < 1e-12);
        }
        assert!(matches!(
            ArrayModel::deterministic(2, &[0.0; 4]),
            Err(Error::DegenerateModel(_))
        ));
    }

    #[test]
    fn uncentered_means_are_rejected() {
        let err = ArrayModel::deterministic(2, &[1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
        let mut c = vec![1.0, 0.0, 2.0, 0.5, 3.0, 1.0, -1.0, 0.0, 4.0];
        double_center(&mut c, 3);
        assert!(ArrayModel::deterministic(3, &c).is_ok());
    }

    #[test]
    fn folded_normal_moments() {
        let m = EntryDist::Gaussian { mean: 0.0, sd: 1.0 }.moments();
        assert!((m.abs1 - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((m.abs3 - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        // Numerical quadrature oracle for a shifted normal.
        let (mu, sd) = (0.7, 1.3);
        let m = EntryDist::Gaussian { mean: mu, sd }.moments();
        let (mut e1, mut e3) = (0.0, 0.0);
        let h = 1e-3;
        let mut x: f64 = -12.0;
        while x < 12.0 {
            let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let v = (mu + sd * x).abs();
            e1 += v * dens * h;
            e3 += v.powi(3) * dens * h;
            x += h;
        }
        assert!((m.abs1 - e1).abs() < 1e-6);
        assert!((m.abs3 - e3).abs() < 1e-5);
    }

    #[test]
    fn json_forms() {
        let m = ArrayModel::from_json(&json!({"n": 3, "preset": "deterministic",
            "matrix": [[1, -1, 0], [-1, 1, 0], [0, 0, 0]]}))
        .unwrap();
        assert_eq!(m.s_n_squared(), 2.0);
        let back = ArrayModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.s_n_squared(), 2.0);

        let m = ArrayModel::from_json(&json!({"n": 2, "entries": [
            {"i": 1, "j": 1, "dist": "two-point", "a": 1.0, "b": -1.0, "p": 0.5},
            {"i": 2, "j": 2, "dist": "rademacher-shifted", "mean": 0.0, "scale": 2.0}
        ]}))
        .unwrap();
        assert!((m.s_n_squared() - 2.5).abs() < 1e-15);
        let back = ArrayModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.s_n_squared(), m.s_n_squared());

        assert!(ArrayModel::from_json(&json!({"n": 2, "preset": "bogus"})).is_err());
        assert!(ArrayModel::from_json(&json!({"n": 2, "entries": [{"i": 3, "j": 1, "dist": "constant", "value": 1}]})).is_err());
    }

    #[test]
    fn realization_path_and_swap() {
        let m = ArrayModel::iid_gaussian(5, None, 1.0).unwrap();
        let mut rng = SeedSpec::new(2).rng();
        let r = m.sample_realization(&mut rng);
        let y = r.path();
        assert_eq!(y.num_intervals(), 6);
        let total: f64 = (0..5).map(|i| r.x(i, r.pi[i])).sum::<f64>() / r.s;
        assert!((y.evaluate(TimePoint::ONE)[0] - total).abs() < 1e-14);
        let sw = r.swapped(1, 3);
        assert_eq!(sw.swapped(1, 3), r);
        let diff = PiecewiseConstantPath::lin_comb(1.0, &y, -1.0, &sw.path()).unwrap();
        let bound = 2.0 / r.s
            * (r.x(1, r.pi[1]).abs() + r.x(3, r.pi[3]).abs() + r.x(1, r.pi[3]).abs() + r.x(3, r.pi[1]).abs());
        assert!(diff.sup_norm() <= bound);
    }

    #[test]
    fn regression_identity_examples() {
        let m = example3();
        let lin = parse_functional("lin:coord=1,t=1", 1).unwrap();
        for pi in permutations(3) {
            let real = CombinatorialRealization {
                n: 3,
                s: m.s_n(),
                x: vec![1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                pi,
            };
            assert!(m.regression_residual_for(&real, &lin).unwrap() < 1e-12);
        }
        let c = parse_functional("const:value=3", 1).unwrap();
        let mut rng = SeedSpec::new(1).rng();
        assert_eq!(m.regression_residual(&c, &mut rng).unwrap(), 0.0);

        let g = ArrayModel::iid_gaussian(6, None, 1.0).unwrap();
        let f = parse_functional("sin:coord=1,t=1/3,5/6", 1).unwrap();
        for _ in 0..10 {
            assert!(g.regression_residual(&f, &mut rng).unwrap() < 1e-10);
        }
    }

    #[test]
    fn zhat_cov_examples() {
        let m = example3();
        assert!((m.zhat_cov(1, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let g = ArrayModel::iid_gaussian(4, None, 1.0).unwrap();
        assert_eq!(g.zhat_cov(2, 2).unwrap(), 1.0);
        assert_eq!(g.zhat_cov(1, 3).unwrap(), 0.0);
        assert!(g.zhat_cov(0, 1).is_err());
    }

    #[test]
    fn zhat_cross_moment_by_monte_carlo() {
        let m = example3();
        let est = Engine::new(4)
            .estimate(&SeedSpec::new(3), 100_000, 2, |rng, out| {
                let z = m.sample_zhat(rng);
                out[0] = z[0] * z[1];
                out[1] = z[0] * z[0];
                Ok(())
            })
            .unwrap();
        assert!((est[0].mean() - 1.0 / 3.0).abs() < 4.0 * est[0].stderr());
        assert!((est[1].mean() - m.zhat_cov(1, 1).unwrap()).abs() < 4.0 * est[1].stderr());
    }

    #[test]
    fn y_has_unit_variance_at_one() {
        let m = ArrayModel::iid_gaussian(7, None, 1.0).unwrap();
        let est = Engine::new(4)
            .estimate(&SeedSpec::new(5), 100_000, 1, |rng, out| {
                let y = m.sample_y(rng)?;
                out[0] = y.evaluate(TimePoint::ONE)[0].powi(2);
                Ok(())
            })
            .unwrap();
        assert!((est[0].mean() - 1.0).abs() < 4.0 * est[0].stderr());
    }

    #[test]
    fn dn_shares_breakpoints_and_is_centred() {
        let m = ArrayModel::iid_gaussian(4, None, 1.0).unwrap();
        let mut rng = SeedSpec::new(6).rng();
        let d = m.sample_dn(&mut rng).unwrap();
        let y = m.sample_y(&mut rng).unwrap();
        assert_eq!(d.breakpoints(), y.breakpoints());
        let est = Engine::new(2)
            .estimate(&SeedSpec::new(7), 50_000, 1, |rng, out| {
                out[0] = m.sample_dn(rng)?.evaluate(TimePoint::ONE)[0];
                Ok(())
            })
            .unwrap();
        assert!(est[0].mean().abs() < 4.0 * est[0].stderr());
    }

    #[test]
    fn distance_bound_factorized_matches_naive() {
        let mut rng = SeedSpec::new(10).rng();
        for n in 2..=6 {
            let mut c: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            double_center(&mut c, n);
            let entries: Vec<EntryDist> = c
                .iter()
                .enumerate()
                .map(|(k, &mean)| match k % 3 {
                    0 => EntryDist::Gaussian { mean, sd: 0.3 + rng.random::<f64>() },
                    1 => EntryDist::RademacherShifted { mean, scale: rng.random::<f64>() },
                    _ => EntryDist::Constant { value: mean },
                })
                .collect();
            let m = ArrayModel::new(n, entries).unwrap();
            let f = m.distance_bound(1.0, SumMethod::Factorized).unwrap();
            let v = m.distance_bound(1.0, SumMethod::Naive).unwrap();
            assert!((f.total - v.total).abs() <= 1e-12 * v.total, "n={n}");
            assert!((f.moment_sum - v.moment_sum).abs() <= 1e-12 * v.moment_sum);
        }
    }

    /// Independent re-evaluation of the printed formula for i.i.d. N(0,1).
    #[test]
    fn distance_bound_iid_normal_closed_form() {
        let n = 10usize;
        let nf = n as f64;
        let m = ArrayModel::iid_gaussian(n, None, 1.0).unwrap();
        let a = (2.0 / std::f64::consts::PI).sqrt();
        let (b, m3) = (1.0, 2.0 * a);
        let n5 = nf.powi(5);
        let per = 3.0 * m3
            + 5.0 * a * b
            + 7.0 * b * a
            + 5.0 * b * a
            + 16.0 * a.powi(3)
            + 2.0 * a.powi(3)
            + 4.0 * a.powi(3)
            + 6.0 * a.powi(3)
            + 2.0 * a.powi(3)
            + 8.0 * a * nf * b / nf;
        let s = nf.sqrt();
        let expected = per * n5 / (nf.powi(3) * (nf - 1.0) * s.powi(3)) + 2.0 / s + 4.0 * nf * nf / (3.0 * nf * nf);
        let got = m.distance_bound(1.0, SumMethod::Factorized).unwrap().total;
        assert!((got - expected).abs() < 1e-12 * expected);
        assert_eq!(m.distance_bound(0.0, SumMethod::Factorized).unwrap().total, 0.0);
    }

    #[test]
    fn distance_bound_invariant_under_row_permutation() {
        let mut rng = SeedSpec::new(12).rng();
        let n = 5;
        let mut c: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        double_center(&mut c, n);
        let sds: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let build = |order: &[usize]| {
            let entries = order
                .iter()
                .flat_map(|&i| (0..n).map(move |j| i * n + j))
                .map(|k| EntryDist::Gaussian { mean: c[k], sd: sds[k] })
                .collect();
            ArrayModel::new(n, entries).unwrap().distance_bound(1.0, SumMethod::Factorized).unwrap().total
        };
        let base = build(&[0, 1, 2, 3, 4]);
        let perm = build(&[3, 0, 4, 2, 1]);
        assert!((base - perm).abs() < 1e-12 * base);
    }

    #[test]
    fn beta3_examples() {
        let v = bound_beta3(100, 10.0, 1.6, &vec![0.0; 100 * 100], 1e4, 1.0);
        let expected = 58.0 * 1.6 * 1e4 / (99.0 * 1000.0) + 0.2 + 4.0 / 3.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 10.907).abs() < 1e-3);
        assert!((bound_beta3(100, 10.0, 1.6, &vec![0.0; 100 * 100], 1e4, 2.0) - 2.0 * v).abs() < 1e-12);
        let m = example3();
        let with_c = m.bound_beta3(1.0);
        let cross_free = bound_beta3(3, m.s_n(), m.beta3(), &[0.0; 9], 0.0, 1.0);
        assert!(with_c > cross_free);
    }

    #[test]
    fn assumption_diagnostic_examples() {
        let m = ArrayModel::iid_gaussian(4, None, 1.0).unwrap();
        let grid: Vec<TimePoint> = ["0", "1/2", "1"].iter().map(|s| s.parse().unwrap()).collect();
        let rows = m.assumption_diagnostic(&grid);
        let at = |t: f64, u: f64| rows.iter().find(|r| r.t == t && r.u == u).unwrap();
        assert!((at(1.0, 1.0).lhs_covariance - 1.0).abs() < 1e-15);
        assert!((at(1.0, 1.0).lhs_second_moment - 4.0).abs() < 1e-15);
        assert_eq!(at(0.0, 1.0).lhs_covariance, 0.0);
        assert_eq!(at(0.5, 1.0).lhs_covariance, at(1.0, 0.5).lhs_covariance);
    }

    #[test]
    fn r_f_vanishes_for_zero_row_sums_and_linear_f() {
        let m = example3();
        let lin = parse_functional("lin:coord=1,t=1", 1).unwrap();
        let mut rng = SeedSpec::new(4).rng();
        for _ in 0..5 {
            assert_eq!(m.sample_r_f(&lin, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn cov_block_matches_direct_sum() {
        let m = ArrayModel::iid_gaussian(5, None, 1.0).unwrap();
        let (s, t): (TimePoint, TimePoint) = ("2/5".parse().unwrap(), "4/5".parse().unwrap());
        let direct: f64 = (1..=2)
            .flat_map(|i| (1..=4).map(move |j| (i, j)))
            .map(|(i, j)| m.zhat_cov(i, j).unwrap())
            .sum::<f64>()
            / m.s_n_squared();
        assert!((m.cov_block(s, t)[0] - direct).abs() < 1e-15);
    }
}
