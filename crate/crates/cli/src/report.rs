//! Run reports with a canonical JSON form (sorted keys, 17 significant
//! digits) and a flat CSV table.

use serde_json::{json, Map, Value};
use steinlab::McEstimate;

pub const VERSION: &str = concat!("steinlab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub parameters: Map<String, Value>,
    pub seed: u64,
    pub estimates: Vec<Estimate>,
    pub bounds: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64) -> Self {
        RunReport {
            command: command.to_string(),
            parameters: Map::new(),
            seed,
            estimates: vec![],
            bounds: vec![],
            checks: vec![],
            warnings: vec![],
        }
    }

    pub fn param(&mut self, key: &str, value: impl Into<Value>) {
        self.parameters.insert(key.to_string(), value.into());
    }

    pub fn estimate(&mut self, name: impl Into<String>, est: &McEstimate) {
        let half = est.ci95_half_width();
        self.estimates.push(Estimate {
            name: name.into(),
            value: est.mean(),
            stderr: est.stderr(),
            ci95: (est.mean() - half, est.mean() + half),
            count: est.count(),
        });
    }

    /// A deterministic quantity reported alongside the estimates.
    pub fn exact(&mut self, name: impl Into<String>, value: f64) {
        self.estimates.push(Estimate {
            name: name.into(),
            value,
            stderr: 0.0,
            ci95: (value, value),
            count: 0,
        });
    }

    pub fn bound(&mut self, name: impl Into<String>, value: f64) {
        self.bounds.push((name.into(), value));
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, tolerance: f64, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            tolerance,
            detail: detail.into(),
        });
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_value(&self) -> Value {
        json!({
            "command": self.command,
            "version": VERSION,
            "seed": self.seed,
            "parameters": Value::Object(self.parameters.clone()),
            "estimates": self.estimates.iter().map(|e| json!({
                "name": e.name,
                "value": e.value,
                "stderr": e.stderr,
                "ci95": [e.ci95.0, e.ci95.1],
                "count": e.count,
            })).collect::<Vec<_>>(),
            "bounds": self.bounds.iter().map(|(n, v)| json!({"name": n, "value": v})).collect::<Vec<_>>(),
            "checks": self.checks.iter().map(|c| json!({
                "name": c.name,
                "pass": c.pass,
                "tolerance": c.tolerance,
                "detail": c.detail,
            })).collect::<Vec<_>>(),
            "warnings": self.warnings,
            "pass": self.all_pass(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write_canonical(&self.to_value(), 0, &mut out);
        out.push('\n');
        out
    }

    /// One row per estimate, bound and check.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["kind", "name", "value", "stderr", "ci95_lo", "ci95_hi", "pass", "detail"])?;
        for e in &self.estimates {
            w.write_record([
                "estimate".into(),
                e.name.clone(),
                fmt_float(e.value),
                fmt_float(e.stderr),
                fmt_float(e.ci95.0),
                fmt_float(e.ci95.1),
                String::new(),
                format!("count={}", e.count),
            ])?;
        }
        for (name, v) in &self.bounds {
            w.write_record(["bound", name, &fmt_float(*v), "", "", "", "", ""])?;
        }
        for c in &self.checks {
            w.write_record([
                "check".into(),
                c.name.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                c.pass.to_string(),
                format!("tol={}; {}", fmt_float(c.tolerance), c.detail),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// `{:.16e}` gives 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

fn write_canonical(v: &Value, depth: usize, out: &mut String) {
    let indent = |d: usize, out: &mut String| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => out.push_str(&u.to_string()),
            (None, Some(i)) => out.push_str(&i.to_string()),
            _ => out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN))),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                indent(depth + 1, out);
                write_canonical(item, depth + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            indent(depth, out);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                indent(depth + 1, out);
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push_str(": ");
                write_canonical(&map[*key], depth + 1, out);
                out.push_str(if k + 1 < keys.len() { ",\n" } else { "\n" });
            }
            indent(depth, out);
            out.push('}');
        }
    }
}
