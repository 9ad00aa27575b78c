use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use steinlab::functionals::{FunctionalRegistry, NormClass};
use steinlab::graph::GraphModel;
use steinlab::model::{grid_covariance, ScaledLaw};
use steinlab::ou_stein::stein_identity_residual;
use steinlab::{CylinderFunctional, Engine, ExchangeableModel, ModelRegistry, SeedSpec, TargetLaw, TimePoint};

use crate::report::RunReport;

/// Largest `n` accepted by `verify-regression`.
pub const MAX_ENUMERATION_N: usize = 12;

#[derive(Debug, Parser)]
#[command(name = "steinlab", version, about = "Stein's method laboratory for exchangeable-pair path processes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Root seed; echoed in every report.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

const FUNCTIONAL_HELP: &str = "Functional spec, repeatable. Examples: \"sin:coord=1,t=1\", \
\"tanhprod:coords=1,2,t=1/2,1\", \"cos:coord=2,t=1/3,2/3,scale=2\". Families: sin, cos, tanh \
(sum over every coordinate/time combination), tanhprod, prod (product over paired coordinates and \
times), lin, const. Keys: coord or coords, t, scale, value. Only sin, cos, tanh, tanhprod and \
const carry certified norm bounds. Defaults to a built-in certified set.";

const MODEL_HELP: &str = "Model JSON file, or inline JSON. Graph: {\"model\":\"graph\",\"n\":32,\"p\":0.3}. \
Combinatorial: {\"model\":\"combinatorial\",\"n\":16,\"preset\":\"iid-gaussian\",\"sd\":1}, \
{\"n\":3,\"preset\":\"deterministic\",\"matrix\":[[..],..]} or {\"n\":4,\"entries\":[{\"i\":1,\"j\":1,\"dist\":\"gaussian\",\"mean\":0,\"sd\":1},..]}";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample Y_n and D_n and compare grid moments with the closed forms.
    Simulate {
        #[arg(long, help = MODEL_HELP)]
        model: String,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        /// Comma-separated times, e.g. "1/4,1/2,1". Defaults to i/8.
        #[arg(long)]
        times: Option<String>,
    },
    /// Enumerate every pair move and check the linear regression identity.
    VerifyRegression {
        #[arg(long, help = MODEL_HELP)]
        model: String,
        #[arg(long, help = FUNCTIONAL_HELP)]
        functional: Vec<String>,
        /// Realizations per functional.
        #[arg(long, default_value_t = 20)]
        trials: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Check closed-form covariance identities and the D_n sampler.
    VerifyCovariance {
        /// Defaults to the graph model with n=7, p=0.3.
        #[arg(long, help = MODEL_HELP)]
        model: Option<String>,
        #[arg(long)]
        times: Option<String>,
        /// Number of grid points i/K used when --times is absent.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 20_000)]
        samples: u64,
        /// Relative tolerance for closed-form identities.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Estimate |E g(Y_n) − E g(D_n)| and compare with the distance bound.
    Distance {
        #[arg(long, help = MODEL_HELP)]
        model: String,
        #[arg(long, help = FUNCTIONAL_HELP)]
        functional: Vec<String>,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
    },
    /// Moments of the coupling between the graph pre-limit and its limit.
    Coupling {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
    },
    /// Evaluate the distance bounds for a model.
    Bound {
        #[arg(long, help = MODEL_HELP)]
        model: String,
        /// Norm bound of g; overrides --functional.
        #[arg(long)]
        gnorm: Option<f64>,
        #[arg(long, help = FUNCTIONAL_HELP)]
        functional: Option<String>,
    },
    /// Monte Carlo mean of the Stein generator applied at D_n.
    SteinIdentity {
        #[arg(long, help = MODEL_HELP)]
        model: String,
        #[arg(long, help = FUNCTIONAL_HELP)]
        functional: Vec<String>,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        /// Replace D_n by c·D_n (a negative control when c ≠ 1).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(steinlab::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<steinlab::Error> for CliError {
    fn from(e: steinlab::Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn load_model(arg: &str) -> CliResult<Box<dyn ExchangeableModel>> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| CliError::Usage(format!("cannot read model file '{arg}': {e}")))?
    };
    Ok(ModelRegistry::with_builtins().build_str(&text)?)
}

fn default_functionals(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![
            "sin:coord=1,t=1,scale=2".into(),
            "cos:coord=1,t=1/2,1".into(),
            "tanhprod:coord=1,t=1/2,1,scale=2".into(),
        ]
    } else {
        vec![
            "sin:coords=1,2,t=1/2,1,scale=8".into(),
            "cos:coords=1,2,t=3/4,1,scale=8".into(),
            "tanhprod:coords=1,2,t=1/2,1,scale=8".into(),
        ]
    }
}

fn functionals(specs: &[String], dim: usize) -> CliResult<Vec<CylinderFunctional>> {
    let specs = if specs.is_empty() { default_functionals(dim) } else { specs.to_vec() };
    let reg = FunctionalRegistry::with_builtins();
    specs.iter().map(|s| Ok(reg.parse(s, dim)?)).collect()
}

fn parse_times(times: &Option<String>, grid: usize) -> CliResult<Vec<TimePoint>> {
    match times {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<TimePoint>().map_err(CliError::from))
            .collect(),
        None if grid == 0 => usage("--grid must be positive"),
        None => (1..=grid).map(|i| Ok(TimePoint::grid(i, grid)?)).collect(),
    }
}

fn gnorm_of(f: &CylinderFunctional) -> CliResult<f64> {
    match f.norm_upper_bound(NormClass::M2) {
        Ok(b) => Ok(b.value),
        Err(_) => usage(format!(
            "functional '{}' has no certified norm bound; use sin, cos, tanh, tanhprod or const",
            f.label()
        )),
    }
}

fn positive_samples(samples: u64) -> CliResult<()> {
    if samples == 0 {
        return usage("--samples must be positive");
    }
    Ok(())
}

fn model_params(report: &mut RunReport, model: &dyn ExchangeableModel) {
    report.param("model", model.to_json());
}

pub fn run(cli: &Cli) -> CliResult<RunReport> {
    let engine = Engine::new(cli.common.workers);
    let seed = SeedSpec::new(cli.common.seed);
    match &cli.command {
        Command::Simulate { model, samples, times } => {
            let model = load_model(model)?;
            simulate(model.as_ref(), &engine, &seed, *samples, &parse_times(times, 8)?)
        }
        Command::VerifyRegression {
            model,
            functional,
            trials,
            tol,
        } => verify_regression(load_model(model)?.as_ref(), functional, &engine, &seed, *trials, *tol),
        Command::VerifyCovariance {
            model,
            times,
            grid,
            samples,
            tol,
        } => {
            let model: Box<dyn ExchangeableModel> = match model {
                Some(m) => load_model(m)?,
                None => Box::new(GraphModel::new(7, 0.3)?),
            };
            verify_covariance(model.as_ref(), &engine, &seed, &parse_times(times, *grid)?, *samples, *tol)
        }
        Command::Distance {
            model,
            functional,
            samples,
        } => distance(load_model(model)?.as_ref(), functional, &engine, &seed, *samples),
        Command::Coupling { n, p, samples } => coupling(*n, *p, &engine, &seed, *samples),
        Command::Bound {
            model,
            gnorm,
            functional,
        } => bound(load_model(model)?.as_ref(), *gnorm, functional.as_deref(), cli.common.seed),
        Command::SteinIdentity {
            model,
            functional,
            samples,
            scale,
        } => stein_identity(load_model(model)?.as_ref(), functional, &engine, &seed, *samples, *scale),
    }
}

fn time_label(t: TimePoint) -> String {
    t.to_string()
}

fn simulate(
    model: &dyn ExchangeableModel,
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
    times: &[TimePoint],
) -> CliResult<RunReport> {
    positive_samples(samples)?;
    let mut report = RunReport::new("simulate", seed.root);
    model_params(&mut report, model);
    report.param("samples", samples);
    report.param("times", times.iter().map(|t| time_label(*t)).collect::<Vec<_>>());
    let d = model.dim();
    let k = times.len() * d;
    let est = engine.estimate(seed, samples, 4 * k, |rng, out| {
        let y = model.sample_y(rng)?;
        let dn = model.sample_dn(rng)?;
        for (a, &t) in times.iter().enumerate() {
            for c in 0..d {
                let (yv, dv) = (y.evaluate(t)[c], dn.evaluate(t)[c]);
                let idx = 4 * (a * d + c);
                out[idx..idx + 4].copy_from_slice(&[yv, yv * yv, dv, dv * dv]);
            }
        }
        Ok(())
    })?;
    for (a, &t) in times.iter().enumerate() {
        let blk = model.cov_block(t, t);
        for c in 0..d {
            let tag = format!("t={},c={}", time_label(t), c + 1);
            let idx = 4 * (a * d + c);
            let exact = blk[c * d + c];
            report.estimate(format!("y_mean[{tag}]"), &est[idx]);
            report.estimate(format!("y_second_moment[{tag}]"), &est[idx + 1]);
            report.estimate(format!("dn_second_moment[{tag}]"), &est[idx + 3]);
            report.exact(format!("closed_form_variance[{tag}]"), exact);
            let m = &est[idx];
            report.check(
                format!("y_centred[{tag}]"),
                m.mean().abs() <= 5.0 * m.stderr(),
                5.0,
                format!("|mean| = {:.3e}, 5 SE = {:.3e}", m.mean().abs(), 5.0 * m.stderr()),
            );
            let v = &est[idx + 3];
            report.check(
                format!("dn_variance[{tag}]"),
                (v.mean() - exact).abs() <= 5.0 * v.stderr() + 1e-15,
                5.0,
                format!("|{:.6e} - {:.6e}| vs 5 SE", v.mean(), exact),
            );
        }
    }
    Ok(report)
}

fn verify_regression(
    model: &dyn ExchangeableModel,
    specs: &[String],
    engine: &Engine,
    seed: &SeedSpec,
    trials: u64,
    tol: f64,
) -> CliResult<RunReport> {
    if model.n() > MAX_ENUMERATION_N {
        return usage(format!(
            "verify-regression enumerates every pair move; n = {} exceeds the limit {MAX_ENUMERATION_N}. \
             Use a smaller model or the distance/stein-identity commands",
            model.n()
        ));
    }
    if trials == 0 {
        return usage("--trials must be positive");
    }
    let fs = functionals(specs, model.dim())?;
    let mut report = RunReport::new("verify-regression", seed.root);
    model_params(&mut report, model);
    report.param("functionals", fs.iter().map(|f| f.label().to_string()).collect::<Vec<_>>());
    report.param("trials", trials);
    report.param("tol", tol);
    let mut overall: f64 = 0.0;
    for (k, f) in fs.iter().enumerate() {
        let residuals = engine.collect(&seed.child(k as u64), trials, |rng| model.regression_residual(f, rng))?;
        let max = residuals.iter().copied().fold(0.0, f64::max);
        overall = overall.max(max);
        report.exact(format!("max_residual[{}]", f.label()), max);
        report.check(
            format!("regression[{}]", f.label()),
            max < tol,
            tol,
            format!("max residual {max:.3e} over {trials} realizations"),
        );
    }
    report.exact("max_residual", overall);
    Ok(report)
}

fn verify_covariance(
    model: &dyn ExchangeableModel,
    engine: &Engine,
    seed: &SeedSpec,
    times: &[TimePoint],
    samples: u64,
    tol: f64,
) -> CliResult<RunReport> {
    positive_samples(samples)?;
    let mut report = RunReport::new("verify-covariance", seed.root);
    model_params(&mut report, model);
    report.param("times", times.iter().map(|t| time_label(*t)).collect::<Vec<_>>());
    report.param("samples", samples);
    report.param("tol", tol);
    let exact = grid_covariance(model, times);
    if exact.iter().all(|&v| v == 0.0) {
        report.warn("every grid covariance vanishes; checks are vacuous");
    }
    for id in model.covariance_identities(times) {
        report.exact(format!("max_rel_diff[{}]", id.name), id.max_rel_diff);
        if id.asserted {
            report.check(
                format!("identity[{}]", id.name),
                id.max_rel_diff <= tol,
                tol,
                format!("max relative difference {:.3e}", id.max_rel_diff),
            );
        } else {
            report.warn(format!(
                "{} is informational: relative difference {:.3e}",
                id.name, id.max_rel_diff
            ));
        }
    }
    let d = model.dim();
    let k = times.len() * d;
    let est = engine.estimate(seed, samples, k * k, |rng, out| {
        let dn = model.sample_dn(rng)?;
        let v: Vec<f64> = times.iter().flat_map(|&t| dn.evaluate(t).to_vec()).collect();
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = v[a] * v[b];
            }
        }
        Ok(())
    })?;
    let mut worst: f64 = 0.0;
    let mut all = true;
    for (e, x) in est.iter().zip(&exact) {
        let z = if e.stderr() > 0.0 { (e.mean() - x).abs() / e.stderr() } else if e.mean() == *x { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        all &= (e.mean() - x).abs() <= 5.0 * e.stderr() + 1e-15 * x.abs().max(1e-300);
    }
    report.exact("sampler_max_z", worst);
    report.check(
        "sampler_grid_covariance",
        all,
        5.0,
        format!("{} entries, largest deviation {worst:.2} SE", est.len()),
    );
    Ok(report)
}

fn distance(
    model: &dyn ExchangeableModel,
    specs: &[String],
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
) -> CliResult<RunReport> {
    positive_samples(samples)?;
    let fs = functionals(specs, model.dim())?;
    let norms = fs.iter().map(gnorm_of).collect::<CliResult<Vec<_>>>()?;
    let mut report = RunReport::new("distance", seed.root);
    model_params(&mut report, model);
    report.param("functionals", fs.iter().map(|f| f.label().to_string()).collect::<Vec<_>>());
    report.param("samples", samples);
    for (k, (f, &gnorm)) in fs.iter().zip(&norms).enumerate() {
        let k = k as u64;
        let ey = engine.estimate(&seed.child(2 * k), samples, 1, |rng, out| {
            out[0] = f.eval(&model.sample_y(rng)?)?;
            Ok(())
        })?[0];
        let ed = engine.estimate(&seed.child(2 * k + 1), samples, 1, |rng, out| {
            out[0] = f.eval(&model.sample_dn(rng)?)?;
            Ok(())
        })?[0];
        let gap = (ey.mean() - ed.mean()).abs();
        let ci = 1.96 * ey.stderr().hypot(ed.stderr());
        let bounds = model.distance_bounds(gnorm)?;
        let (bname, bval) = bounds[0].clone();
        let label = f.label().to_string();
        report.estimate(format!("e_g_y[{label}]"), &ey);
        report.estimate(format!("e_g_dn[{label}]"), &ed);
        report.exact(format!("gap[{label}]"), gap);
        report.exact(format!("gap_ci95_half_width[{label}]"), ci);
        report.exact(format!("gnorm[{label}]"), gnorm);
        for (name, v) in &bounds {
            report.bound(format!("{name}[{label}]"), *v);
        }
        report.check(
            format!("distance[{label}]"),
            gap - ci <= bval,
            bval,
            format!("gap {gap:.3e} - CI {ci:.3e} vs {bname} {bval:.6e}"),
        );
    }
    Ok(report)
}

fn coupling(n: usize, p: f64, engine: &Engine, seed: &SeedSpec, samples: u64) -> CliResult<RunReport> {
    positive_samples(samples)?;
    let model = GraphModel::new(n, p)?;
    let mut report = RunReport::new("coupling", seed.root);
    report.param("n", n);
    report.param("p", p);
    report.param("samples", samples);
    let rep = model.coupling_distance(engine, seed, samples)?;
    report.estimate("refinement_bias", &rep.refinement_bias);
    report.exact("correlation_first_component_at_one", rep.correlation_at_one);
    for (name, est, b, pass) in rep.checks() {
        report.estimate(name, est);
        report.bound(name, b);
        report.check(
            name,
            pass,
            b,
            format!("estimate {:.4e} (CI half {:.2e}) vs bound {b:.4e}", est.mean(), est.ci95_half_width()),
        );
    }
    Ok(report)
}

fn bound(
    model: &dyn ExchangeableModel,
    gnorm: Option<f64>,
    functional: Option<&str>,
    seed: u64,
) -> CliResult<RunReport> {
    let mut report = RunReport::new("bound", seed);
    model_params(&mut report, model);
    let gnorm = match (gnorm, functional) {
        (Some(g), _) => g,
        (None, Some(spec)) => {
            let f = FunctionalRegistry::with_builtins().parse(spec, model.dim())?;
            report.param("functional", f.label());
            gnorm_of(&f)?
        }
        (None, None) => 1.0,
    };
    report.param("gnorm", gnorm);
    for (name, v) in model.distance_bounds(gnorm)? {
        report.bound(name, v);
    }
    let lambda = model.lambda();
    let d = model.dim();
    for (k, v) in lambda.iter().enumerate() {
        report.exact(format!("lambda[{},{}]", k / d + 1, k % d + 1), *v);
    }
    if model.kind() == "graph" {
        let (a, b, c) = steinlab::graph::coupling_bounds(model.n());
        report.bound("coupling_dist", a);
        report.bound("coupling_dist_sq", b);
        report.bound("limit_norm_sq", c);
    }
    Ok(report)
}

fn stein_identity(
    model: &dyn ExchangeableModel,
    specs: &[String],
    engine: &Engine,
    seed: &SeedSpec,
    samples: u64,
    scale: f64,
) -> CliResult<RunReport> {
    positive_samples(samples)?;
    let fs = functionals(specs, model.dim())?;
    let mut report = RunReport::new("stein-identity", seed.root);
    model_params(&mut report, model);
    report.param("functionals", fs.iter().map(|f| f.label().to_string()).collect::<Vec<_>>());
    report.param("samples", samples);
    report.param("scale", scale);
    if !model.is_gaussian() {
        report.warn("D_n is a Gaussian mixture for this model; the identity need not hold");
    }
    let law: &dyn TargetLaw = model;
    let scaled = ScaledLaw { inner: law, factor: scale };
    for (k, f) in fs.iter().enumerate() {
        let r = stein_identity_residual(f, &scaled, engine, &seed.child(k as u64), samples)?;
        let label = f.label().to_string();
        report.estimate(format!("generator_mean[{label}]"), &r);
        report.check(
            format!("stein_identity[{label}]"),
            r.mean().abs() <= 3.0 * r.stderr(),
            3.0,
            format!("|mean| = {:.3e}, 3 SE = {:.3e}", r.mean().abs(), 3.0 * r.stderr()),
        );
    }
    Ok(report)
}

/// Renders the report in the requested format.
pub fn render(report: &RunReport, format: Format) -> CliResult<String> {
    match format {
        Format::Json => Ok(report.to_json()),
        Format::Csv => report
            .to_csv()
            .map_err(|e| CliError::Usage(format!("csv output failed: {e}"))),
    }
}
