//! Strategy traits shared by the combinatorial and graph models, plus the
//! name-keyed registry used by the CLI.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::functionals::CylinderFunctional;
use crate::mc::SimRng;
use crate::paths::PiecewiseConstantPath;
use crate::time::TimePoint;

/// A Gaussian (or Gaussian-mixture) pre-limit `D_n` with known covariance.
pub trait TargetLaw: Send + Sync {
    fn dim(&self) -> usize;
    fn n(&self) -> usize;
    fn sample_dn(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath>;
    /// `E[D_n(s) D_n(t)ᵀ]`, row-major `dim × dim`.
    fn cov_block(&self, s: TimePoint, t: TimePoint) -> Vec<f64>;
    /// Whether `D_n` is exactly Gaussian, so that `E 𝒜 f(D_n) = 0` holds.
    fn is_gaussian(&self) -> bool {
        true
    }
}

/// A discrete process `Y_n` with an exchangeable pair satisfying
/// `Df(Y)[Y] = 2 E[Df(Y)[(Y − Y′)Λ] | Y] + R_f`.
pub trait ExchangeableModel: TargetLaw {
    fn kind(&self) -> &'static str;
    fn sample_y(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath>;
    fn sample_pair(&self, rng: &mut SimRng)
        -> Result<(PiecewiseConstantPath, PiecewiseConstantPath)>;
    /// Row-major `dim × dim`, acting on row vectors as `v·Λ`.
    fn lambda(&self) -> Vec<f64>;
    /// Draws one realization and returns the regression residual obtained by
    /// enumerating every pair move from it.
    fn regression_residual(&self, f: &CylinderFunctional, rng: &mut SimRng) -> Result<f64>;
    /// One draw of `R_f`.
    fn sample_r_f(&self, f: &CylinderFunctional, rng: &mut SimRng) -> Result<f64>;
    /// Named distance bounds for `|E g(Y_n) − E g(D_n)|`; the first entry is
    /// the headline bound.
    fn distance_bounds(&self, gnorm: f64) -> Result<Vec<(String, f64)>>;
    /// Closed-form covariance identities evaluated over `times`.
    fn covariance_identities(&self, times: &[TimePoint]) -> Vec<IdentityCheck>;
    fn to_json(&self) -> Value;
}

/// Largest relative discrepancy between two closed forms of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_rel_diff: f64,
    /// Whether the identity is expected to hold exactly; otherwise the row
    /// is informational.
    pub asserted: bool,
}

impl IdentityCheck {
    pub fn new(name: &str, asserted: bool) -> Self {
        IdentityCheck {
            name: name.to_string(),
            max_rel_diff: 0.0,
            asserted,
        }
    }

    pub fn record(&mut self, a: f64, b: f64) {
        self.max_rel_diff = self.max_rel_diff.max(rel_diff(a, b));
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `c·D_n` reporting the covariance of `D_n`. Used as a negative control.
pub struct ScaledLaw<'a> {
    pub inner: &'a dyn TargetLaw,
    pub factor: f64,
}

impl TargetLaw for ScaledLaw<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn sample_dn(&self, rng: &mut SimRng) -> Result<PiecewiseConstantPath> {
        Ok(self.inner.sample_dn(rng)?.scaled(self.factor))
    }

    fn cov_block(&self, s: TimePoint, t: TimePoint) -> Vec<f64> {
        self.inner.cov_block(s, t)
    }

    fn is_gaussian(&self) -> bool {
        self.inner.is_gaussian()
    }
}

type ModelFactory = fn(&Value) -> Result<Box<dyn ExchangeableModel>>;

pub struct ModelRegistry {
    factories: BTreeMap<&'static str, ModelFactory>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("combinatorial", |v| {
            Ok(Box::new(crate::combinatorial::ArrayModel::from_json(v)?))
        });
        r.register("graph", |v| Ok(Box::new(crate::graph::GraphModel::from_json(v)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: ModelFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    /// Builds from a model document. The `"model"` tag may be omitted, in
    /// which case a `"p"` field selects the graph model.
    pub fn build(&self, doc: &Value) -> Result<Box<dyn ExchangeableModel>> {
        let name = match doc.get("model") {
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::InvalidModel("\"model\" must be a string".into())),
            None if doc.get("p").is_some() => "graph",
            None => "combinatorial",
        };
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::InvalidModel(format!(
                "unknown model '{name}' (known: {})",
                self.names().join(", ")
            ))
        })?;
        factory(doc)
    }

    pub fn build_str(&self, text: &str) -> Result<Box<dyn ExchangeableModel>> {
        let doc: Value = serde_json::from_str(text)?;
        self.build(&doc)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Grid covariance matrix of `D_n` over `times`, block layout
/// `(a·dim + r, b·dim + c)`.
pub fn grid_covariance(law: &dyn TargetLaw, times: &[TimePoint]) -> Vec<f64> {
    let d = law.dim();
    let m = times.len() * d;
    let mut out = vec![0.0; m * m];
    for (a, &s) in times.iter().enumerate() {
        for (b, &t) in times.iter().enumerate() {
            let blk = law.cov_block(s, t);
            for r in 0..d {
                for c in 0..d {
                    out[(a * d + r) * m + b * d + c] = blk[r * d + c];
                }
            }
        }
    }
    out
}
