//! Ornstein–Uhlenbeck layer: the Mehler semigroup, the Stein generator, the
//! Stein-equation solution and the error terms of the abstract bound.
//!
//! Everything works on the cylinder coordinates `x = (w(t₁), …, w(t_k))`
//! of the functional, so a law only needs to supply `D_n` at those times.

use std::f64::consts::FRAC_PI_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::{dot, CylinderFunctional};
use crate::mc::{Engine, McEstimate, SeedSpec, SimRng};
use crate::model::{grid_covariance, ExchangeableModel, TargetLaw};
use crate::paths::PiecewiseConstantPath;
use crate::quadrature::gauss_legendre_on;

pub const DEFAULT_QUAD_POINTS: usize = 64;

fn check_dims(g: &CylinderFunctional, w: &PiecewiseConstantPath, law: &dyn TargetLaw) -> Result<()> {
    for got in [w.dim(), law.dim()] {
        if got != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: g.dim(),
                got,
            });
        }
    }
    Ok(())
}

fn sample_points(g: &CylinderFunctional, law: &dyn TargetLaw, rng: &mut SimRng) -> Result<Vec<f64>> {
    g.points(&law.sample_dn(rng)?)
}

/// `E g(D_n)`.
pub fn expectation(
    g: &CylinderFunctional,
    law: &dyn TargetLaw,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate> {
    let est = engine.estimate(seed, samples, 1, |rng, out| {
        out[0] = g.value_at(&sample_points(g, law, rng)?);
        Ok(())
    })?;
    Ok(est[0])
}

/// `(T_u g)(w) = E g(w e^{−u} + √(1 − e^{−2u}) D_n)`. At `u = 0` no sampling
/// takes place and every draw equals `g(w)`.
pub fn mehler_apply(
    g: &CylinderFunctional,
    w: &PiecewiseConstantPath,
    u: f64,
    law: &dyn TargetLaw,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate> {
    check_dims(g, w, law)?;
    if !(u >= 0.0) || !u.is_finite() {
        return Err(Error::Domain(format!("semigroup time must be finite and ≥ 0, got {u}")));
    }
    let x = g.points(w)?;
    if u == 0.0 {
        let v = g.value_at(&x);
        let mut est = McEstimate::new();
        for _ in 0..samples {
            est.accumulate(v)?;
        }
        return Ok(est);
    }
    let (a, b) = ((-u).exp(), (-(-2.0 * u).exp_m1()).sqrt());
    let est = engine.estimate(seed, samples, 1, |rng, out| {
        let y = sample_points(g, law, rng)?;
        let z: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        out[0] = g.value_at(&z);
        Ok(())
    })?;
    Ok(est[0])
}

/// Closed-form grid covariance of `D_n` at the cylinder times of `f`.
pub fn cylinder_covariance(f: &CylinderFunctional, law: &dyn TargetLaw) -> Vec<f64> {
    grid_covariance(law, f.times())
}

/// `−∇φ(x)·x + Σ_ij H_ij(x) C_ij`.
fn generator_at(f: &CylinderFunctional, x: &[f64], cov: &[f64]) -> f64 {
    let grad = f.gradient_at(x);
    let hess = f.hessian_at(x);
    -dot(&grad, x) + dot(&hess, cov)
}

/// `𝒜_n f(w) = −Df(w)[w] + E D²f(w)[D_n, D_n]`, the second term from the
/// closed-form covariance.
pub fn generator_apply(f: &CylinderFunctional, w: &PiecewiseConstantPath, law: &dyn TargetLaw) -> Result<f64> {
    check_dims(f, w, law)?;
    let x = f.points(w)?;
    Ok(generator_at(f, &x, &cylinder_covariance(f, law)))
}

/// Monte Carlo mean of `𝒜_n f(D_n)`.
pub fn stein_identity_residual(
    f: &CylinderFunctional,
    law: &dyn TargetLaw,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate> {
    if law.dim() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: law.dim(),
        });
    }
    let cov = cylinder_covariance(f, law);
    let est = engine.estimate(seed, samples, 1, |rng, out| {
        out[0] = generator_at(f, &sample_points(f, law, rng)?, &cov);
        Ok(())
    })?;
    Ok(est[0])
}

/// `θ`-nodes and weights on `[0, π/2]`.
fn theta_rule(quad_points: usize) -> Result<Vec<(f64, f64)>> {
    let (x, w) = gauss_legendre_on(quad_points, 0.0, FRAC_PI_2)?;
    Ok(x.into_iter().zip(w).collect())
}

/// Per-draw contribution to `φ̂(x)` for `D_n`-coordinates `y`.
///
/// With `v = e^{−u} = cos θ` the solution reads
/// `φ(x) = −∫₀^{π/2} E[g(x cos θ + D sin θ) − g(D)] tan θ dθ`. Using the
/// same `D` in both terms keeps the integrand bounded near `θ = π/2`.
fn phi_draw(g: &CylinderFunctional, rule: &[(f64, f64)], x: &[f64], y: &[f64]) -> f64 {
    let gy = g.value_at(y);
    let mut z = vec![0.0; x.len()];
    let mut acc = 0.0;
    for &(theta, w) in rule {
        let (s, c) = theta.sin_cos();
        for ((z, x), y) in z.iter_mut().zip(x).zip(y) {
            *z = c * x + s * y;
        }
        acc += w * s / c * (g.value_at(&z) - gy);
    }
    -acc
}

/// Gradient and Hessian of `phi_draw` in `x`.
fn phi_draw_derivatives(
    g: &CylinderFunctional,
    rule: &[(f64, f64)],
    x: &[f64],
    y: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let m = x.len();
    let mut grad = vec![0.0; m];
    let mut hess = vec![0.0; m * m];
    let mut z = vec![0.0; m];
    for &(theta, w) in rule {
        let (s, c) = theta.sin_cos();
        for ((z, x), y) in z.iter_mut().zip(x).zip(y) {
            *z = c * x + s * y;
        }
        for (a, b) in grad.iter_mut().zip(g.gradient_at(&z)) {
            *a -= w * s * b;
        }
        for (a, b) in hess.iter_mut().zip(g.hessian_at(&z)) {
            *a -= w * s * c * b;
        }
    }
    (grad, hess)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhiEstimate {
    pub value: McEstimate,
    /// `|φ̂_m − φ̂_{m/2}|` on common draws.
    pub quad_error: f64,
    pub quad_points: usize,
}

impl PhiEstimate {
    /// `4·SE + quadrature error`.
    pub fn tolerance(&self) -> f64 {
        4.0 * self.value.stderr() + self.quad_error
    }
}

/// `φ_n(g)(w) = −∫₀^∞ T_u(g − E g(D_n))(w) du`.
pub fn solve_phi(
    g: &CylinderFunctional,
    w: &PiecewiseConstantPath,
    law: &dyn TargetLaw,
    engine: &Engine,
    seed: &SeedSpec,
    quad_points: usize,
    samples: u64,
) -> Result<PhiEstimate> {
    check_dims(g, w, law)?;
    if quad_points < 2 {
        return Err(Error::Domain("quadrature needs at least two nodes".into()));
    }
    let x = g.points(w)?;
    let fine = theta_rule(quad_points)?;
    let coarse = theta_rule(quad_points / 2)?;
    let est = engine.estimate(seed, samples, 2, |rng, out| {
        let y = sample_points(g, law, rng)?;
        out[0] = phi_draw(g, &fine, &x, &y);
        out[1] = phi_draw(g, &coarse, &x, &y);
        Ok(())
    })?;
    Ok(PhiEstimate {
        value: est[0],
        quad_error: (est[0].mean() - est[1].mean()).abs(),
        quad_points,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SteinEquationCheck {
    /// Draws of `𝒜_n φ̂(w) − g(w) + g(D_n)`.
    pub residual: McEstimate,
    pub quad_error: f64,
}

impl SteinEquationCheck {
    pub fn tolerance(&self) -> f64 {
        4.0 * self.residual.stderr() + self.quad_error
    }

    pub fn passes(&self) -> bool {
        self.residual.mean().abs() <= self.tolerance()
    }
}

/// Checks `𝒜_n φ̂ = g − E g(D_n)` at `w`, differentiating each draw of `φ̂`
/// in the cylinder coordinates.
pub fn stein_equation_check(
    g: &CylinderFunctional,
    w: &PiecewiseConstantPath,
    law: &dyn TargetLaw,
    engine: &Engine,
    seed: &SeedSpec,
    quad_points: usize,
    samples: u64,
) -> Result<SteinEquationCheck> {
    check_dims(g, w, law)?;
    let x = g.points(w)?;
    let gx = g.value_at(&x);
    let cov = cylinder_covariance(g, law);
    let fine = theta_rule(quad_points)?;
    let coarse = theta_rule((quad_points / 2).max(1))?;
    let draw = |rule: &[(f64, f64)], y: &[f64]| {
        let (grad, hess) = phi_draw_derivatives(g, rule, &x, y);
        -dot(&grad, &x) + dot(&hess, &cov) - gx + g.value_at(y)
    };
    let est = engine.estimate(seed, samples, 2, |rng, out| {
        let y = sample_points(g, law, rng)?;
        out[0] = draw(&fine, &y);
        out[1] = draw(&coarse, &y);
        Ok(())
    })?;
    Ok(SteinEquationCheck {
        residual: est[0],
        quad_error: (est[0].mean() - est[1].mean()).abs(),
    })
}

/// `(‖g‖/6)·E‖(Y − Y′)Λ‖·‖Y − Y′‖²`.
pub fn epsilon1_estimate<P>(
    pair: P,
    lambda: &[f64],
    gnorm: f64,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate>
where
    P: Fn(&mut SimRng) -> Result<(PiecewiseConstantPath, PiecewiseConstantPath)> + Sync,
{
    let est = engine.estimate(seed, samples, 1, |rng, out| {
        let (y, y_prime) = pair(rng)?;
        let diff = PiecewiseConstantPath::lin_comb(1.0, &y, -1.0, &y_prime)?;
        let d = diff.sup_norm();
        out[0] = diff.right_mul(lambda)?.sup_norm() * d * d;
        Ok(())
    })?;
    Ok(est[0].scaled(gnorm / 6.0))
}

pub fn epsilon1_for_model(
    model: &dyn ExchangeableModel,
    gnorm: f64,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate> {
    epsilon1_estimate(|rng| model.sample_pair(rng), &model.lambda(), gnorm, engine, seed, samples)
}

/// Draws of `R_f`; `ε₃` is the absolute value of the mean.
pub fn epsilon3_estimate(
    model: &dyn ExchangeableModel,
    f: &CylinderFunctional,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> Result<McEstimate> {
    let est = engine.estimate(seed, samples, 1, |rng, out| {
        out[0] = model.sample_r_f(f, rng)?;
        Ok(())
    })?;
    Ok(est[0])
}
