//! Right-continuous piecewise-constant paths `[0, 1] → R^p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimePoint;

/// A càdlàg step function. The value stored for breakpoint `b_k` holds on
/// `[b_k, b_{k+1})`, and the last one on `[b_last, 1]`.
///
/// Adjacent intervals with equal values are kept as they are; use
/// [`PiecewiseConstantPath::approx_eq`] for pointwise comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPath", into = "RawPath")]
pub struct PiecewiseConstantPath {
    dim: usize,
    breakpoints: Vec<TimePoint>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPath {
    dim: usize,
    breakpoints: Vec<TimePoint>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<RawPath> for PiecewiseConstantPath {
    type Error = Error;

    fn try_from(raw: RawPath) -> Result<Self> {
        PiecewiseConstantPath::new(raw.dim, raw.breakpoints, raw.values)
    }
}

impl From<PiecewiseConstantPath> for RawPath {
    fn from(p: PiecewiseConstantPath) -> Self {
        let values = p.values.chunks(p.dim).map(<[f64]>::to_vec).collect();
        RawPath {
            dim: p.dim,
            breakpoints: p.breakpoints,
            values,
        }
    }
}

impl PiecewiseConstantPath {
    pub fn new(dim: usize, breakpoints: Vec<TimePoint>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != breakpoints.len() {
            return Err(Error::InvalidPath(format!(
                "{} breakpoints but {} values",
                breakpoints.len(),
                values.len()
            )));
        }
        let mut flat = Vec::with_capacity(dim * values.len());
        for v in &values {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            flat.extend_from_slice(v);
        }
        Self::from_flat(dim, breakpoints, flat)
    }

    /// Builds a path from row-major interval values (`dim` entries per breakpoint).
    pub fn from_flat(dim: usize, breakpoints: Vec<TimePoint>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidPath("dimension must be positive".into()));
        }
        if breakpoints.first() != Some(&TimePoint::ZERO) {
            return Err(Error::InvalidPath("first breakpoint must be 0".into()));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPath(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if values.len() != dim * breakpoints.len() {
            return Err(Error::InvalidPath(format!(
                "expected {} values, got {}",
                dim * breakpoints.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidPath(format!("non-finite value {v}")));
        }
        Ok(PiecewiseConstantPath {
            dim,
            breakpoints,
            values,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim.max(1)])
    }

    pub fn constant(value: Vec<f64>) -> Self {
        PiecewiseConstantPath {
            dim: value.len(),
            breakpoints: vec![TimePoint::ZERO],
            values: value,
        }
    }

    /// Path on the grid `{0, 1/n, …, 1}` whose value on `[k/n, (k+1)/n)` is
    /// `levels[k·dim..(k+1)·dim]`, `k = 0..=n`.
    pub fn from_grid_levels(n: usize, dim: usize, levels: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("grid size must be positive".into()));
        }
        let breakpoints = (0..=n)
            .map(|k| TimePoint::grid(k, n))
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(dim, breakpoints, levels)
    }

    /// `1_{[i/n, 1]} · e_coord` (1-based `i` and `coord`).
    pub fn step_indicator(i: usize, n: usize, coord: usize, dim: usize) -> Result<Self> {
        if n == 0 || i == 0 || i > n {
            return Err(Error::IndexOutOfRange { index: i, max: n });
        }
        if coord == 0 || coord > dim {
            return Err(Error::IndexOutOfRange {
                index: coord,
                max: dim,
            });
        }
        let mut values = vec![0.0; 2 * dim];
        values[dim + coord - 1] = 1.0;
        Self::from_flat(
            dim,
            vec![TimePoint::ZERO, TimePoint::grid(i, n)?],
            values,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[TimePoint] {
        &self.breakpoints
    }

    pub fn num_intervals(&self) -> usize {
        self.breakpoints.len()
    }

    /// Value on the `k`-th interval of constancy.
    pub fn interval_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn intervals(&self) -> impl Iterator<Item = (TimePoint, &[f64])> {
        self.breakpoints
            .iter()
            .copied()
            .zip(self.values.chunks(self.dim))
    }

    fn interval_index(&self, t: TimePoint) -> usize {
        // breakpoints[0] == 0 <= t, so the partition point is at least 1.
        self.breakpoints.partition_point(|b| *b <= t) - 1
    }

    pub fn evaluate(&self, t: TimePoint) -> &[f64] {
        self.interval_value(self.interval_index(t))
    }

    /// Float-time evaluation; ties at breakpoints are resolved in favour of
    /// the new value only when `t` is exactly representable.
    pub fn evaluate_f64(&self, t: f64) -> Result<&[f64]> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} lies outside [0, 1]")));
        }
        let k = self.breakpoints.partition_point(|b| b.as_f64() <= t) - 1;
        Ok(self.interval_value(k))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.dim)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `a·x + b·y` on the merged breakpoint set.
    pub fn lin_comb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        if x.dim != y.dim {
            return Err(Error::DimensionMismatch {
                expected: x.dim,
                got: y.dim,
            });
        }
        let dim = x.dim;
        let mut breakpoints = Vec::with_capacity(x.breakpoints.len() + y.breakpoints.len());
        let mut values = Vec::with_capacity(dim * (x.breakpoints.len() + y.breakpoints.len()));
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let t = match (x.breakpoints.get(i), y.breakpoints.get(j)) {
                (Some(&tx), Some(&ty)) => tx.min(ty),
                (Some(&tx), None) => tx,
                (None, Some(&ty)) => ty,
                (None, None) => break,
            };
            if x.breakpoints.get(i) == Some(&t) {
                i += 1;
            }
            if y.breakpoints.get(j) == Some(&t) {
                j += 1;
            }
            let xv = x.interval_value(i - 1);
            let yv = y.interval_value(j - 1);
            breakpoints.push(t);
            values.extend(xv.iter().zip(yv).map(|(u, v)| a * u + b * v));
        }
        Self::from_flat(dim, breakpoints, values)
    }

    pub fn scaled(&self, c: f64) -> Self {
        PiecewiseConstantPath {
            dim: self.dim,
            breakpoints: self.breakpoints.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// Applies `v ↦ v·m` (row vector times a `dim × dim` row-major matrix) to
    /// every interval value.
    pub fn right_mul(&self, m: &[f64]) -> Result<Self> {
        let d = self.dim;
        if m.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: m.len(),
            });
        }
        let mut values = vec![0.0; self.values.len()];
        for (src, dst) in self.values.chunks(d).zip(values.chunks_mut(d)) {
            for (c, out) in dst.iter_mut().enumerate() {
                *out = (0..d).map(|r| src[r] * m[r * d + c]).sum();
            }
        }
        Ok(PiecewiseConstantPath {
            dim: d,
            breakpoints: self.breakpoints.clone(),
            values,
        })
    }

    /// Pointwise comparison on the union of both breakpoint sets.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        match Self::lin_comb(1.0, self, -1.0, other) {
            Ok(diff) => diff.values.iter().all(|v| v.abs() <= tol),
            Err(_) => false,
        }
    }
}
