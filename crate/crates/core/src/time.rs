//! Exact rational times in `[0, 1]`.
//!
//! Every process in this crate jumps at grid points `i/n`, so evaluating at a
//! breakpoint with floating-point times is ambiguous. Times are stored as
//! reduced fractions and `⌊n t⌋` is computed with integer arithmetic.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u64, u64)", into = "(u64, u64)")]
pub struct TimePoint {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

impl TimePoint {
    pub const ZERO: TimePoint = TimePoint { num: 0, den: 1 };
    pub const ONE: TimePoint = TimePoint { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Domain("time denominator must be positive".into()));
        }
        if num > den {
            return Err(Error::Domain(format!("time {num}/{den} lies outside [0, 1]")));
        }
        let g = gcd(num, den).max(1);
        Ok(TimePoint {
            num: num / g,
            den: den / g,
        })
    }

    /// The grid point `i/n`.
    pub fn grid(i: usize, n: usize) -> Result<Self> {
        Self::new(i as u64, n as u64)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// `⌊n t⌋`, exact.
    pub fn floor_mul(&self, n: usize) -> usize {
        ((n as u128 * self.num as u128) / self.den as u128) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn min(self, other: TimePoint) -> TimePoint {
        if self <= other {
            self
        } else {
            other
        }
    }

    /// Nearest fraction with denominator `den` not exceeding `t`; used only to
    /// turn user-facing floats into exact times.
    pub fn from_f64(t: f64, den: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} lies outside [0, 1]")));
        }
        Self::new((t * den as f64).round() as u64, den)
    }
}

impl PartialOrd for TimePoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimePoint {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.num as u128 * other.den as u128;
        let rhs = other.num as u128 * self.den as u128;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl TryFrom<(u64, u64)> for TimePoint {
    type Error = Error;

    fn try_from((num, den): (u64, u64)) -> Result<Self> {
        TimePoint::new(num, den)
    }
}

impl From<TimePoint> for (u64, u64) {
    fn from(t: TimePoint) -> Self {
        (t.num, t.den)
    }
}

impl FromStr for TimePoint {
    type Err = Error;

    /// Accepts `a/b`, integers and plain decimals such as `0.49`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("cannot parse time '{s}'"));
        if let Some((a, b)) = s.split_once('/') {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            return TimePoint::new(a, b);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 18 || !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            let den = 10u64.pow(frac.len() as u32);
            let frac_val: u64 = if frac.is_empty() {
                0
            } else {
                frac.parse().map_err(|_| bad())?
            };
            let num = int
                .checked_mul(den)
                .and_then(|v| v.checked_add(frac_val))
                .ok_or_else(bad)?;
            return TimePoint::new(num, den);
        }
        let v: u64 = s.parse().map_err(|_| bad())?;
        TimePoint::new(v, 1)
    }
}
