//! Cylinder functionals `g(w) = φ(w(t₁), …, w(t_k))` with exact derivatives
//! and certified norm upper bounds.
//!
//! The base map `φ` sees the flat vector `x` with `x[a·p + c] = w^{(c)}(t_a)`.
//! Built-ins are described by a small spec language, for example
//! `sin:coord=1,t=1` or `tanhprod:coords=1,2,t=1/2,1,scale=0.5`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::paths::PiecewiseConstantPath;
use crate::time::TimePoint;

/// Sup of |tanh''| = 4/(3√3).
const TANH2_SUP: f64 = 0.769_800_358_919_501_4;

/// Analytic sup constants for a base map.
///
/// `hess_lip` bounds the Lipschitz constant of every Hessian block
/// `x ↦ H_ab(x)` in operator norm, measured against `max_c |δ_c|₂` over the
/// time blocks of the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub sup_value: f64,
    pub grad_sum: f64,
    pub hess_sum: f64,
    pub hess_lip: f64,
}

pub trait SmoothBase: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major `len × len` Hessian.
    fn hessian(&self, x: &[f64]) -> Vec<f64>;
    fn certificate(&self) -> Option<Certificate>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NormClass {
    M0,
    M1,
    M2,
    M,
}

impl NormClass {
    pub const ALL: [NormClass; 4] = [NormClass::M0, NormClass::M1, NormClass::M2, NormClass::M];
}

impl fmt::Display for NormClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NormClass::M0 => "M0",
            NormClass::M1 => "M1",
            NormClass::M2 => "M2",
            NormClass::M => "M",
        };
        f.write_str(s)
    }
}

impl FromStr for NormClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M0" => Ok(NormClass::M0),
            "M1" => Ok(NormClass::M1),
            "M2" => Ok(NormClass::M2),
            "M" => Ok(NormClass::M),
            _ => Err(Error::Parse(format!("unknown norm class '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormBound {
    pub class: NormClass,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct CylinderFunctional {
    dim: usize,
    times: Vec<TimePoint>,
    base: Arc<dyn SmoothBase>,
    label: String,
}

impl CylinderFunctional {
    pub fn new(
        dim: usize,
        times: Vec<TimePoint>,
        base: Arc<dyn SmoothBase>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("functional dimension must be positive".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("cylinder times must be strictly increasing".into()));
        }
        Ok(CylinderFunctional {
            dim,
            times,
            base,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[TimePoint] {
        &self.times
    }

    pub fn k(&self) -> usize {
        self.times.len()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn check_dim(&self, w: &PiecewiseConstantPath) -> Result<()> {
        if w.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: w.dim(),
            });
        }
        Ok(())
    }

    /// `(w(t₁), …, w(t_k))` flattened.
    pub fn points(&self, w: &PiecewiseConstantPath) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut x = Vec::with_capacity(self.times.len() * self.dim);
        for &t in &self.times {
            x.extend_from_slice(w.evaluate(t));
        }
        Ok(x)
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.base.value(x)
    }

    pub fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        self.base.gradient(x)
    }

    pub fn hessian_at(&self, x: &[f64]) -> Vec<f64> {
        self.base.hessian(x)
    }

    pub fn eval(&self, w: &PiecewiseConstantPath) -> Result<f64> {
        Ok(self.base.value(&self.points(w)?))
    }

    /// `Dg(w)[h] = Σ_a ⟨∇_aφ, h(t_a)⟩`.
    pub fn dderiv(&self, w: &PiecewiseConstantPath, h: &PiecewiseConstantPath) -> Result<f64> {
        let x = self.points(w)?;
        let hx = self.points(h)?;
        Ok(dot(&self.base.gradient(&x), &hx))
    }

    /// `D²g(w)[h1, h2] = Σ_ab h1(t_a)ᵀ H_ab h2(t_b)`.
    pub fn dderiv2(
        &self,
        w: &PiecewiseConstantPath,
        h1: &PiecewiseConstantPath,
        h2: &PiecewiseConstantPath,
    ) -> Result<f64> {
        let x = self.points(w)?;
        let u = self.points(h1)?;
        let v = self.points(h2)?;
        Ok(quad_form(&self.base.hessian(&x), &u, &v))
    }

    pub fn certificate(&self) -> Option<Certificate> {
        self.base.certificate()
    }

    /// Upper bound for the requested norm. The same certified value serves
    /// every class because the weighted quotients only shrink each summand.
    pub fn norm_upper_bound(&self, class: NormClass) -> Result<NormBound> {
        let cert = self.base.certificate().ok_or_else(|| {
            Error::Unsupported(format!("functional '{}' has no certified sup bounds", self.label))
        })?;
        let k = self.k() as f64;
        let value = cert.sup_value + cert.grad_sum + cert.hess_sum + k * k * cert.hess_lip;
        Ok(NormBound { class, value })
    }

    /// `c₀ + c₁·g`.
    pub fn affine(&self, scale: f64, shift: f64) -> CylinderFunctional {
        CylinderFunctional {
            dim: self.dim,
            times: self.times.clone(),
            base: Arc::new(Affine {
                inner: self.base.clone(),
                scale,
                shift,
            }),
            label: format!("{shift}+{scale}*({})", self.label),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn quad_form(m: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let mut acc = 0.0;
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            acc += ur * dot(&m[r * n..(r + 1) * n], v);
        }
    }
    acc
}

#[derive(Debug)]
struct Affine {
    inner: Arc<dyn SmoothBase>,
    scale: f64,
    shift: f64,
}

impl SmoothBase for Affine {
    fn value(&self, x: &[f64]) -> f64 {
        self.shift + self.scale * self.inner.value(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.inner.gradient(x).into_iter().map(|g| self.scale * g).collect()
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        self.inner.hessian(x).into_iter().map(|h| self.scale * h).collect()
    }

    fn certificate(&self) -> Option<Certificate> {
        let c = self.inner.certificate()?;
        let s = self.scale.abs();
        Some(Certificate {
            sup_value: self.shift.abs() + s * c.sup_value,
            grad_sum: s * c.grad_sum,
            hess_sum: s * c.hess_sum,
            hess_lip: s * c.hess_lip,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    Sin,
    Cos,
    Tanh,
    Identity,
}

impl Scalar {
    /// `(f, f', f'')` at `y`.
    fn jet(self, y: f64) -> (f64, f64, f64) {
        match self {
            Scalar::Sin => (y.sin(), y.cos(), -y.sin()),
            Scalar::Cos => (y.cos(), -y.sin(), -y.cos()),
            Scalar::Tanh => {
                let t = y.tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            }
            Scalar::Identity => (y, 1.0, 0.0),
        }
    }

    /// Sups of `|f|, |f'|, |f''|, |f'''|`, when all are finite.
    fn sups(self) -> Option<[f64; 4]> {
        match self {
            Scalar::Sin | Scalar::Cos => Some([1.0, 1.0, 1.0, 1.0]),
            Scalar::Tanh => Some([1.0, 1.0, TANH2_SUP, 2.0]),
            Scalar::Identity => None,
        }
    }
}

/// `φ(x) = Σ_m f(a·x[idx_m])`.
#[derive(Debug)]
struct SumBase {
    f: Scalar,
    scale: f64,
    len: usize,
    terms: Vec<usize>,
}

impl SmoothBase for SumBase {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&i| self.f.jet(self.scale * x[i]).0).sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.len];
        for &i in &self.terms {
            g[i] += self.scale * self.f.jet(self.scale * x[i]).1;
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.len * self.len];
        for &i in &self.terms {
            h[i * self.len + i] += self.scale * self.scale * self.f.jet(self.scale * x[i]).2;
        }
        h
    }

    fn certificate(&self) -> Option<Certificate> {
        let [s0, s1, s2, s3] = self.f.sups()?;
        let a = self.scale.abs();
        let m = self.terms.len() as f64;
        let mult = max_multiplicity(&self.terms) as f64;
        Some(Certificate {
            sup_value: m * s0,
            grad_sum: m * a * s1,
            hess_sum: m * a * a * s2,
            // Each block is diagonal; an entry moves by at most mult·a³·s3·|δ|.
            hess_lip: mult * a.powi(3) * s3,
        })
    }
}

/// `φ(x) = Π_m f(a·x[idx_m])`.
#[derive(Debug)]
struct ProductBase {
    f: Scalar,
    scale: f64,
    len: usize,
    factors: Vec<usize>,
    /// Largest number of factors sharing one time block.
    per_block: usize,
}

impl ProductBase {
    fn jets(&self, x: &[f64]) -> Vec<(f64, f64, f64)> {
        self.factors
            .iter()
            .map(|&i| self.f.jet(self.scale * x[i]))
            .collect()
    }

    fn product_except(j: &[(f64, f64, f64)], skip: &[usize]) -> f64 {
        j.iter()
            .enumerate()
            .filter(|(q, _)| !skip.contains(q))
            .map(|(_, v)| v.0)
            .product()
    }
}

impl SmoothBase for ProductBase {
    fn value(&self, x: &[f64]) -> f64 {
        self.jets(x).iter().map(|v| v.0).product()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let j = self.jets(x);
        let mut g = vec![0.0; self.len];
        for (m, &i) in self.factors.iter().enumerate() {
            g[i] += self.scale * j[m].1 * Self::product_except(&j, &[m]);
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let j = self.jets(x);
        let a2 = self.scale * self.scale;
        let mut h = vec![0.0; self.len * self.len];
        for (m, &i) in self.factors.iter().enumerate() {
            for (l, &k) in self.factors.iter().enumerate() {
                let v = if m == l {
                    j[m].2 * Self::product_except(&j, &[m])
                } else {
                    j[m].1 * j[l].1 * Self::product_except(&j, &[m, l])
                };
                h[i * self.len + k] += a2 * v;
            }
        }
        h
    }

    fn certificate(&self) -> Option<Certificate> {
        let [s0, s1, s2, s3] = self.f.sups()?;
        // Products of several unbounded factors would need s0 ≤ 1 below.
        if s0 > 1.0 || s1 > 1.0 {
            return None;
        }
        let a = self.scale.abs();
        let m = self.factors.len() as f64;
        let third = s3.max(s2 * s1).max(s1 * s1 * s1);
        let per = self.per_block as f64;
        Some(Certificate {
            sup_value: 1.0,
            grad_sum: m * a * s1,
            hess_sum: m * a * a * s2 + m * (m - 1.0) * a * a * s1 * s1,
            // Every third partial is at most a³·third; an entry of H_ab sums
            // per² second partials, each moving by at most m·a³·third·|δ|.
            hess_lip: per * per * m * a.powi(3) * third,
        })
    }
}

#[derive(Debug)]
struct ConstBase {
    value: f64,
}

impl SmoothBase for ConstBase {
    fn value(&self, _x: &[f64]) -> f64 {
        self.value
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len() * x.len()]
    }

    fn certificate(&self) -> Option<Certificate> {
        Some(Certificate {
            sup_value: self.value.abs(),
            grad_sum: 0.0,
            hess_sum: 0.0,
            hess_lip: 0.0,
        })
    }
}

fn max_multiplicity(idx: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &i in idx {
        *counts.entry(i).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

/// Parsed `name:key=v1,v2,key2=v3` spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecParams {
    pub name: String,
    params: BTreeMap<String, Vec<String>>,
}

impl SpecParams {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        if name.is_empty() {
            return Err(Error::Parse("empty functional name".into()));
        }
        let mut params: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some((k, v)) = tok.split_once('=') {
                let k = k.trim().to_string();
                if params.contains_key(&k) {
                    return Err(Error::Parse(format!("duplicate key '{k}' in '{spec}'")));
                }
                params.insert(k.clone(), vec![v.trim().to_string()]);
                current = Some(k);
            } else {
                let k = current
                    .as_ref()
                    .ok_or_else(|| Error::Parse(format!("value '{tok}' without a key in '{spec}'")))?;
                params.get_mut(k).expect("key inserted above").push(tok.to_string());
            }
        }
        Ok(SpecParams {
            name: name.to_string(),
            params,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Parse(format!(
                "unknown key '{k}' for functional '{}' (allowed: {})",
                self.name,
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(vals) = self.params.get(key) else {
            return Ok(None);
        };
        vals.iter()
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Parse(format!("bad value '{v}' for key '{key}'")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn scalar(&self, key: &str, default: f64) -> Result<f64> {
        match self.list::<f64>(key)? {
            None => Ok(default),
            Some(v) if v.len() == 1 && v[0].is_finite() => Ok(v[0]),
            Some(_) => Err(Error::Parse(format!("key '{key}' takes one finite number"))),
        }
    }

    fn coords(&self, dim: usize) -> Result<Vec<usize>> {
        let coords = match (self.list::<usize>("coord")?, self.list::<usize>("coords")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Parse("give either 'coord' or 'coords', not both".into()))
            }
            (Some(c), None) | (None, Some(c)) => c,
            (None, None) => vec![1],
        };
        for &c in &coords {
            if c == 0 || c > dim {
                return Err(Error::IndexOutOfRange { index: c, max: dim });
            }
        }
        Ok(coords)
    }

    fn times(&self) -> Result<Vec<TimePoint>> {
        Ok(self.list::<TimePoint>("t")?.unwrap_or_else(|| vec![TimePoint::ONE]))
    }
}

/// Distinct sorted times and the block index of each input time.
fn time_blocks(times: &[TimePoint]) -> (Vec<TimePoint>, Vec<usize>) {
    let mut uniq = times.to_vec();
    uniq.sort();
    uniq.dedup();
    let idx = times
        .iter()
        .map(|t| uniq.binary_search(t).expect("time present"))
        .collect();
    (uniq, idx)
}

pub trait FunctionalFactory: Send + Sync {
    fn name(&self) -> &'static str;
    fn help(&self) -> &'static str;
    fn build(&self, spec: &SpecParams, dim: usize, label: &str) -> Result<CylinderFunctional>;
}

/// Σ over every (coord, time) combination of `f(scale · w^{(c)}(t))`.
struct SumFactory {
    name: &'static str,
    help: &'static str,
    f: Scalar,
}

impl FunctionalFactory for SumFactory {
    fn name(&self) -> &'static str {
        self.name
    }

    fn help(&self) -> &'static str {
        self.help
    }

    fn build(&self, spec: &SpecParams, dim: usize, label: &str) -> Result<CylinderFunctional> {
        spec.check_keys(&["coord", "coords", "t", "scale"])?;
        let coords = spec.coords(dim)?;
        let (times, _) = time_blocks(&spec.times()?);
        let scale = spec.scale()?;
        let terms = (0..times.len())
            .flat_map(|a| coords.iter().map(move |&c| a * dim + c - 1))
            .collect();
        let base = SumBase {
            f: self.f,
            scale,
            len: times.len() * dim,
            terms,
        };
        CylinderFunctional::new(dim, times, Arc::new(base), label)
    }
}

/// Π over paired (coord, time) factors of `f(scale · w^{(c)}(t))`.
struct ProductFactory {
    name: &'static str,
    help: &'static str,
    f: Scalar,
}

impl FunctionalFactory for ProductFactory {
    fn name(&self) -> &'static str {
        self.name
    }

    fn help(&self) -> &'static str {
        self.help
    }

    fn build(&self, spec: &SpecParams, dim: usize, label: &str) -> Result<CylinderFunctional> {
        spec.check_keys(&["coord", "coords", "t", "scale"])?;
        let coords = spec.coords(dim)?;
        let raw_times = spec.times()?;
        let pairs: Vec<(usize, TimePoint)> = match (coords.len(), raw_times.len()) {
            (c, t) if c == t => coords.iter().copied().zip(raw_times.iter().copied()).collect(),
            (1, _) => raw_times.iter().map(|&t| (coords[0], t)).collect(),
            (_, 1) => coords.iter().map(|&c| (c, raw_times[0])).collect(),
            (c, t) => {
                return Err(Error::Parse(format!(
                    "{c} coords cannot be paired with {t} times"
                )))
            }
        };
        let factor_times: Vec<TimePoint> = pairs.iter().map(|p| p.1).collect();
        let (times, blocks) = time_blocks(&factor_times);
        let factors = pairs
            .iter()
            .zip(&blocks)
            .map(|(&(c, _), &a)| a * dim + c - 1)
            .collect();
        let base = ProductBase {
            f: self.f,
            scale: spec.scale()?,
            len: times.len() * dim,
            factors,
            per_block: max_multiplicity(&blocks),
        };
        CylinderFunctional::new(dim, times, Arc::new(base), label)
    }
}

struct ConstFactory;

impl FunctionalFactory for ConstFactory {
    fn name(&self) -> &'static str {
        "const"
    }

    fn help(&self) -> &'static str {
        "const:value=c  constant functional"
    }

    fn build(&self, spec: &SpecParams, dim: usize, label: &str) -> Result<CylinderFunctional> {
        spec.check_keys(&["value"])?;
        let value = spec.scalar("value", 0.0)?;
        CylinderFunctional::new(dim, vec![], Arc::new(ConstBase { value }), label)
    }
}

impl SpecParams {
    fn scale(&self) -> Result<f64> {
        self.scalar("scale", 1.0)
    }
}

/// Name-keyed functional factories.
pub struct FunctionalRegistry {
    factories: BTreeMap<&'static str, Box<dyn FunctionalFactory>>,
}

impl FunctionalRegistry {
    pub fn empty() -> Self {
        FunctionalRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(SumFactory {
            name: "sin",
            help: "sin:coord=1,t=1[,scale=a]  Σ sin(a·w_c(t)) over coords and times (certified)",
            f: Scalar::Sin,
        }));
        r.register(Box::new(SumFactory {
            name: "cos",
            help: "cos:coord=1,t=1[,scale=a]  Σ cos(a·w_c(t)) over coords and times (certified)",
            f: Scalar::Cos,
        }));
        r.register(Box::new(SumFactory {
            name: "tanh",
            help: "tanh:coord=1,t=1[,scale=a]  Σ tanh(a·w_c(t)) over coords and times (certified)",
            f: Scalar::Tanh,
        }));
        r.register(Box::new(ProductFactory {
            name: "tanhprod",
            help: "tanhprod:coords=1,2,t=1/2,1[,scale=a]  Π tanh(a·w_c(t)) over paired coords/times (certified)",
            f: Scalar::Tanh,
        }));
        r.register(Box::new(SumFactory {
            name: "lin",
            help: "lin:coords=1,2,t=1[,scale=a]  Σ a·w_c(t) (uncertified)",
            f: Scalar::Identity,
        }));
        r.register(Box::new(ProductFactory {
            name: "prod",
            help: "prod:coords=1,2,t=1[,scale=a]  Π a·w_c(t) over paired coords/times (uncertified)",
            f: Scalar::Identity,
        }));
        r.register(Box::new(ConstFactory));
        r
    }

    pub fn register(&mut self, factory: Box<dyn FunctionalFactory>) {
        self.factories.insert(factory.name(), factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn help(&self) -> String {
        self.factories
            .values()
            .map(|f| f.help())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn parse(&self, spec: &str, dim: usize) -> Result<CylinderFunctional> {
        let params = SpecParams::parse(spec)?;
        let factory = self.factories.get(params.name.as_str()).ok_or_else(|| {
            Error::Parse(format!(
                "unknown functional '{}' (known: {})",
                params.name,
                self.names().join(", ")
            ))
        })?;
        factory.build(&params, dim, spec.trim())
    }
}

impl Default for FunctionalRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Parses with the built-in registry.
pub fn parse_functional(spec: &str, dim: usize) -> Result<CylinderFunctional> {
    FunctionalRegistry::with_builtins().parse(spec, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::SeedSpec;
    use rand::Rng;

    fn t(s: &str) -> TimePoint {
        s.parse().unwrap()
    }

    fn random_path<R: Rng>(rng: &mut R, dim: usize, n: usize, amp: f64) -> PiecewiseConstantPath {
        let levels = (0..(n + 1) * dim).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect();
        PiecewiseConstantPath::from_grid_levels(n, dim, levels).unwrap()
    }

    fn unit_path<R: Rng>(rng: &mut R, dim: usize, n: usize) -> PiecewiseConstantPath {
        let p = random_path(rng, dim, n, 1.0);
        let s = p.sup_norm();
        p.scaled(1.0 / s)
    }

    fn library(dim: usize) -> Vec<CylinderFunctional> {
        let specs: &[&str] = if dim == 1 {
            &[
                "sin:coord=1,t=1",
                "cos:coord=1,t=1/3,3/4,scale=0.7",
                "tanh:coord=1,t=1/2,1,scale=1.3",
                "tanhprod:coord=1,t=1/4,1/2,1",
            ]
        } else {
            &[
                "sin:coords=1,2,t=1/2,1",
                "cos:coord=2,t=1,scale=2",
                "tanh:coords=1,2,t=1/4,3/4,scale=0.5",
                "tanhprod:coords=1,2,t=1/2,1",
                "tanhprod:coords=1,2,1,t=1/2,1/2,1,scale=1.5",
            ]
        };
        specs.iter().map(|s| parse_functional(s, dim).unwrap()).collect()
    }

    #[test]
    fn spec_examples_for_eval() {
        let g = parse_functional("sin:coord=1,t=1", 1).unwrap();
        assert_eq!(g.eval(&PiecewiseConstantPath::zero(1)).unwrap(), 0.0);

        let g = parse_functional("prod:coords=1,2,t=1", 2).unwrap();
        let w = PiecewiseConstantPath::constant(vec![2.0, 3.0]);
        assert_eq!(g.eval(&w).unwrap(), 6.0);

        let stairs = PiecewiseConstantPath::from_grid_levels(3, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = parse_functional("lin:coord=1,t=1/4,3/4", 1).unwrap();
        // w(1/4) = 0, w(3/4) = 2.
        assert_eq!(g.eval(&stairs).unwrap(), 2.0);
    }

    #[test]
    fn spec_examples_for_derivatives() {
        let g = parse_functional("sin:coord=1,t=1", 1).unwrap();
        let w = PiecewiseConstantPath::zero(1);
        let h = PiecewiseConstantPath::constant(vec![1.0]);
        assert_eq!(g.dderiv(&w, &h).unwrap(), 1.0);
        assert_eq!(g.dderiv(&w, &PiecewiseConstantPath::zero(1)).unwrap(), 0.0);

        let lin = parse_functional("lin:coords=1,2,t=1/2,1", 2).unwrap();
        let mut rng = SeedSpec::new(4).rng();
        let (w, a, b) = (random_path(&mut rng, 2, 5, 2.0), random_path(&mut rng, 2, 5, 1.0), random_path(&mut rng, 2, 4, 1.0));
        assert_eq!(lin.dderiv2(&w, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn sine_norm_bound_is_four() {
        let g = parse_functional("sin:coord=1,t=1", 1).unwrap();
        for class in NormClass::ALL {
            assert_eq!(g.norm_upper_bound(class).unwrap().value, 4.0);
        }
        let zero = parse_functional("const:value=0", 2).unwrap();
        for class in NormClass::ALL {
            assert_eq!(zero.norm_upper_bound(class).unwrap().value, 0.0);
        }
    }

    #[test]
    fn uncertified_functionals_are_rejected() {
        let g = parse_functional("lin:coord=1,t=1", 1).unwrap();
        assert!(matches!(g.norm_upper_bound(NormClass::M), Err(Error::Unsupported(_))));
        let g = parse_functional("prod:coords=1,2,t=1", 2).unwrap();
        assert!(matches!(g.norm_upper_bound(NormClass::M1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn parser_errors() {
        assert!(parse_functional("nope:coord=1", 1).is_err());
        assert!(parse_functional("sin:coord=3,t=1", 2).is_err());
        assert!(parse_functional("sin:coord=1,t=2", 1).is_err());
        assert!(parse_functional("sin:1,coord=1", 1).is_err());
        assert!(parse_functional("sin:coord=1,bogus=2", 1).is_err());
        assert!(parse_functional("tanhprod:coords=1,2,t=1/4,1/2,1", 2).is_err());
        assert!(FunctionalRegistry::with_builtins().help().contains("tanhprod"));
    }

    #[test]
    fn tanhprod_spec_layout() {
        let g = parse_functional("tanhprod:coords=1,2,t=1/2,1", 2).unwrap();
        assert_eq!(g.times(), &[t("1/2"), t("1")]);
        let w = PiecewiseConstantPath::lin_comb(
            1.0,
            &PiecewiseConstantPath::constant(vec![0.3, 0.0]),
            1.0,
            &PiecewiseConstantPath::step_indicator(1, 2, 2, 2).unwrap(),
        )
        .unwrap();
        let expected = 0.3f64.tanh() * 1.0f64.tanh();
        assert!((g.eval(&w).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = SeedSpec::new(21).rng();
        for dim in [1, 2] {
            for g in library(dim) {
                for _ in 0..20 {
                    let w = random_path(&mut rng, dim, 6, 1.5);
                    let h = random_path(&mut rng, dim, 5, 1.0);
                    let u = random_path(&mut rng, dim, 4, 1.0);
                    let eps = 1e-5;
                    let wp = PiecewiseConstantPath::lin_comb(1.0, &w, eps, &h).unwrap();
                    let wm = PiecewiseConstantPath::lin_comb(1.0, &w, -eps, &h).unwrap();
                    let fd = (g.eval(&wp).unwrap() - g.eval(&wm).unwrap()) / (2.0 * eps);
                    let d = g.dderiv(&w, &h).unwrap();
                    assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "{}: {fd} vs {d}", g.label());

                    let fd2 = (g.dderiv(&wp, &u).unwrap() - g.dderiv(&wm, &u).unwrap()) / (2.0 * eps);
                    let d2 = g.dderiv2(&w, &h, &u).unwrap();
                    assert!((fd2 - d2).abs() <= 1e-5 * d2.abs().max(1.0), "{}: {fd2} vs {d2}", g.label());
                    let d2s = g.dderiv2(&w, &u, &h).unwrap();
                    assert!((d2 - d2s).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn hessian_blocks_are_symmetric() {
        let mut rng = SeedSpec::new(8).rng();
        for g in library(2) {
            let w = random_path(&mut rng, 2, 5, 2.0);
            let x = g.points(&w).unwrap();
            let h = g.hessian_at(&x);
            let n = x.len();
            for r in 0..n {
                for c in 0..n {
                    assert_eq!(h[r * n + c], h[c * n + r]);
                }
            }
        }
    }

    #[test]
    fn dderiv_is_linear() {
        let mut rng = SeedSpec::new(9).rng();
        for g in library(2) {
            let w = random_path(&mut rng, 2, 5, 2.0);
            let h1 = random_path(&mut rng, 2, 3, 1.0);
            let h2 = random_path(&mut rng, 2, 7, 1.0);
            let (a, b) = (1.7, -0.4);
            let combo = PiecewiseConstantPath::lin_comb(a, &h1, b, &h2).unwrap();
            let lhs = g.dderiv(&w, &combo).unwrap();
            let rhs = a * g.dderiv(&w, &h1).unwrap() + b * g.dderiv(&w, &h2).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    /// Randomized search for violations of each certified summand.
    #[test]
    fn norm_bounds_are_sound() {
        let mut rng = SeedSpec::new(33).rng();
        for dim in [1, 2] {
            for g in library(dim) {
                let cert = g.certificate().unwrap();
                let k = g.k() as f64;
                let total = g.norm_upper_bound(NormClass::M).unwrap().value;
                for trial in 0..10_000 {
                    let amp = if trial % 2 == 0 { 0.5 } else { 4.0 };
                    let w = random_path(&mut rng, dim, 4, amp);
                    let h1 = unit_path(&mut rng, dim, 4);
                    let h2 = unit_path(&mut rng, dim, 3);
                    let v = g.eval(&w).unwrap().abs();
                    let d1 = g.dderiv(&w, &h1).unwrap().abs();
                    let d2 = g.dderiv2(&w, &h1, &h2).unwrap().abs();
                    let shift = random_path(&mut rng, dim, 3, 0.3);
                    let ws = PiecewiseConstantPath::lin_comb(1.0, &w, 1.0, &shift).unwrap();
                    let lip = (g.dderiv2(&ws, &h1, &h1).unwrap() - g.dderiv2(&w, &h1, &h1).unwrap()).abs()
                        / shift.sup_norm();
                    assert!(v <= cert.sup_value + 1e-12, "{}", g.label());
                    assert!(d1 <= cert.grad_sum + 1e-12, "{}", g.label());
                    assert!(d2 <= cert.hess_sum + 1e-12, "{}", g.label());
                    assert!(lip <= k * k * cert.hess_lip + 1e-9, "{}", g.label());
                    assert!(v + d1 + d2 + lip <= total + 1e-9);
                }
            }
        }
    }

    #[test]
    fn affine_wrapper() {
        let g = parse_functional("tanh:coord=1,t=1", 1).unwrap();
        let w = PiecewiseConstantPath::constant(vec![0.4]);
        let h = g.affine(2.0, 3.0);
        assert!((h.eval(&w).unwrap() - (3.0 + 2.0 * 0.4f64.tanh())).abs() < 1e-15);
        let c = h.certificate().unwrap();
        assert_eq!(c.sup_value, 5.0);
    }
}
