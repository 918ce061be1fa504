//! Run configuration: a TOML document, validated into [`RunConfig`].
//!
//! ```toml
//! command = "equivalence"   # simulate | equivalence | closedform | bracket | lions-sweep | verify-derivatives
//! N = 2000
//! T = 1.0
//! n_steps = 16              # steps on the coarsest level
//! levels = 5                # halvings after the coarsest level
//! seeds = 8
//! base_seed = 1
//! scheme = "ito_euler"      # ito_euler | strat_heun_corrected | strat_heun_uncorrected
//! correction_variant = "inside"
//! fd_fallback = true
//! output_dir = "out"
//!
//! [model]
//! name = "LinearMean"
//! beta = 0.1
//!
//! [initial]
//! kind = "normal"           # normal | dirac
//! mean = 1.0
//! sd = 0.25
//! ```

use std::fmt;
use std::path::PathBuf;

use strato_core::{CorrectionOptions, CorrectionVariant, InitialLaw, Model, SchemeId};
use toml::{Table, Value};

pub const DEFAULT_PARTICLES: usize = 1000;
pub const DEFAULT_STEPS: usize = 256;
pub const DEFAULT_SEEDS: usize = 1;
pub const ENV_OUTPUT_DIR: &str = "STRATO_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Equivalence,
    ClosedForm,
    Bracket,
    LionsSweep,
    VerifyDerivatives,
}

impl Command {
    pub const NAMES: [&'static str; 6] = [
        "simulate",
        "equivalence",
        "closedform",
        "bracket",
        "lions-sweep",
        "verify-derivatives",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Equivalence => "equivalence",
            Command::ClosedForm => "closedform",
            Command::Bracket => "bracket",
            Command::LionsSweep => "lions-sweep",
            Command::VerifyDerivatives => "verify-derivatives",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "simulate" => Command::Simulate,
            "equivalence" => Command::Equivalence,
            "closedform" => Command::ClosedForm,
            "bracket" => Command::Bracket,
            "lions-sweep" => Command::LionsSweep,
            "verify-derivatives" => Command::VerifyDerivatives,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: Model,
    pub particles: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub levels: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub scheme: SchemeId,
    pub opts: CorrectionOptions,
    pub initial: InitialLaw,
    pub output_dir: PathBuf,
}

/// One problem with a config, located by its key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
pub struct ConfigErrors(pub Vec<ConfigError>);

const TOP_KEYS: [&str; 13] = [
    "command",
    "model",
    "N",
    "T",
    "n_steps",
    "levels",
    "seeds",
    "base_seed",
    "scheme",
    "correction_variant",
    "fd_fallback",
    "output_dir",
    "initial",
];

struct Reader {
    errors: Vec<ConfigError>,
}

impl Reader {
    fn err(&mut self, key: &str, reason: impl Into<String>) {
        self.errors.push(ConfigError {
            key: key.to_string(),
            reason: reason.into(),
        });
    }

    fn type_err<T>(&mut self, key: &str, want: &str, got: &Value) -> Option<T> {
        self.err(key, format!("expected {want}, found {}", got.type_str()));
        None
    }

    fn string<'v>(&mut self, t: &'v Table, key: &str, path: &str) -> Option<&'v str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            v => self.type_err(path, "a string", v),
        }
    }

    fn positive_int(&mut self, t: &Table, key: &str, path: &str, allow_zero: bool) -> Option<usize> {
        match t.get(key)? {
            Value::Integer(i) if *i > 0 || (allow_zero && *i == 0) => Some(*i as usize),
            Value::Integer(_) => {
                let need = if allow_zero { "non-negative" } else { "positive" };
                self.err(path, format!("must be {need}"));
                None
            }
            v => self.type_err(path, "an integer", v),
        }
    }

    fn float(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(x) if x.is_finite() => Some(*x),
            Value::Float(_) => {
                self.err(path, "must be finite");
                None
            }
            Value::Integer(i) => Some(*i as f64),
            v => self.type_err(path, "a number", v),
        }
    }

    fn positive_float(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        let x = self.float(t, key, path)?;
        if x > 0.0 {
            Some(x)
        } else {
            self.err(path, "must be positive");
            None
        }
    }

    fn floats(&mut self, t: &Table, key: &str, path: &str) -> Option<Vec<f64>> {
        match t.get(key)? {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, v) in items.iter().enumerate() {
                    match v {
                        Value::Float(x) => out.push(*x),
                        Value::Integer(x) => out.push(*x as f64),
                        v => return self.type_err(&format!("{path}[{i}]"), "a number", v),
                    }
                }
                Some(out)
            }
            _ => self.float(t, key, path).map(|x| vec![x]),
        }
    }

    fn unknown_keys(&mut self, t: &Table, allowed: &[&str], prefix: &str) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(&format!("{prefix}{k}"), "unknown key");
            }
        }
    }

    fn table<'v>(&mut self, t: &'v Table, key: &str) -> Option<&'v Table> {
        match t.get(key)? {
            Value::Table(inner) => Some(inner),
            v => self.type_err(key, "a table", v),
        }
    }
}

fn model_from(r: &mut Reader, t: Option<&Table>) -> Option<Model> {
    let Some(t) = t else {
        r.err("model", "missing table");
        return None;
    };
    let Some(name) = r.string(t, "name", "model.name") else {
        if !t.contains_key("name") {
            r.err("model.name", "missing");
        }
        return None;
    };
    let Some(defaults) = Model::parameter_defaults(name) else {
        r.err(
            "model.name",
            format!("unknown model {name:?}; available: {}", Model::NAMES.join(", ")),
        );
        return None;
    };
    let mut allowed: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
    allowed.push("name");
    r.unknown_keys(t, &allowed, "model.");
    let mut params = Vec::new();
    for (k, _) in defaults {
        if let Some(x) = r.float(t, k, &format!("model.{k}")) {
            params.push((*k, x));
        }
    }
    match Model::from_params(name, &params) {
        Ok(m) => Some(m),
        Err(e) => {
            r.err("model", e.to_string());
            None
        }
    }
}

fn initial_from(r: &mut Reader, t: Option<&Table>) -> Option<InitialLaw> {
    let Some(t) = t else {
        return Some(InitialLaw::Normal { mean: vec![1.0], sd: 0.25 });
    };
    r.unknown_keys(t, &["kind", "mean", "sd"], "initial.");
    let mean = r.floats(t, "mean", "initial.mean").unwrap_or_else(|| vec![1.0]);
    match r.string(t, "kind", "initial.kind").unwrap_or("normal") {
        "normal" => {
            let sd = match t.get("sd") {
                Some(_) => r.float(t, "sd", "initial.sd")?,
                None => 0.25,
            };
            if sd < 0.0 {
                r.err("initial.sd", "must be non-negative");
                return None;
            }
            Some(InitialLaw::Normal { mean, sd })
        }
        "dirac" => {
            if t.contains_key("sd") {
                r.err("initial.sd", "not used by a dirac initial law");
            }
            Some(InitialLaw::Dirac(mean))
        }
        other => {
            r.err("initial.kind", format!("unknown kind {other:?}; expected normal or dirac"));
            None
        }
    }
}

/// Output directory when the config has none: the environment variable, then
/// the current directory.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(ENV_OUTPUT_DIR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigError {
            key: "<document>".into(),
            reason: e.message().to_string(),
        }])
    })?;
    from_table(&table)
}

pub fn from_table(t: &Table) -> Result<RunConfig, ConfigErrors> {
    let mut r = Reader { errors: Vec::new() };
    r.unknown_keys(t, &TOP_KEYS, "");

    let command = match r.string(t, "command", "command") {
        Some(s) => Command::from_name(s).or_else(|| {
            r.err("command", format!("unknown command {s:?}; expected one of {}", Command::NAMES.join(", ")));
            None
        }),
        None => {
            if !t.contains_key("command") {
                r.err("command", "missing");
            }
            None
        }
    };
    let model_table = r.table(t, "model");
    let model = model_from(&mut r, model_table);
    let particles = r.positive_int(t, "N", "N", false).unwrap_or(DEFAULT_PARTICLES);
    let horizon = r.positive_float(t, "T", "T").unwrap_or(1.0);
    let n_steps = r.positive_int(t, "n_steps", "n_steps", false).unwrap_or(DEFAULT_STEPS);
    let levels = r.positive_int(t, "levels", "levels", true).unwrap_or(0);
    let seeds = r.positive_int(t, "seeds", "seeds", false).unwrap_or(DEFAULT_SEEDS);
    let base_seed = r.positive_int(t, "base_seed", "base_seed", true).unwrap_or(1) as u64;
    let scheme = match r.string(t, "scheme", "scheme") {
        Some(s) => SchemeId::from_name(s).or_else(|| {
            let names: Vec<&str> = SchemeId::ALL.iter().map(|s| s.name()).collect();
            r.err("scheme", format!("unknown scheme {s:?}; expected one of {}", names.join(", ")));
            None
        }),
        None => Some(SchemeId::ItoEuler),
    };
    let variant = match r.string(t, "correction_variant", "correction_variant") {
        Some("inside") | None => Some(CorrectionVariant::Inside),
        Some("displayed") => Some(CorrectionVariant::Displayed),
        Some(other) => {
            r.err("correction_variant", format!("unknown variant {other:?}; expected inside or displayed"));
            None
        }
    };
    let fd_fallback = match t.get("fd_fallback") {
        Some(Value::Boolean(b)) => *b,
        Some(v) => r.type_err("fd_fallback", "a boolean", v).unwrap_or(true),
        None => true,
    };
    let output_dir = r
        .string(t, "output_dir", "output_dir")
        .map(PathBuf::from)
        .unwrap_or_else(default_output_dir);
    let initial_table = r.table(t, "initial");
    let initial = initial_from(&mut r, initial_table);

    if let (Some(m), Some(init)) = (&model, &initial) {
        use strato_core::Coefficients;
        if init.dim() != m.state_dim() {
            r.err(
                "initial.mean",
                format!("has {} components, model state dimension is {}", init.dim(), m.state_dim()),
            );
        }
    }

    if !r.errors.is_empty() {
        return Err(ConfigErrors(r.errors));
    }
    Ok(RunConfig {
        command: command.expect("checked"),
        model: model.expect("checked"),
        particles,
        horizon,
        n_steps,
        levels,
        seeds,
        base_seed,
        scheme: scheme.expect("checked"),
        opts: CorrectionOptions {
            variant: variant.expect("checked"),
            fd_fallback,
        },
        initial: initial.expect("checked"),
        output_dir,
    })
}

/// Apply a `key=value` override to a top-level scalar key. The value is read
/// as a TOML value, falling back to a bare string.
pub fn apply_override(t: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(ConfigError {
            key: assignment.to_string(),
            reason: "expected key=value".into(),
        });
    };
    let key = key.trim();
    if !TOP_KEYS.contains(&key) || key == "model" || key == "initial" {
        return Err(ConfigError {
            key: key.to_string(),
            reason: "not an overridable top-level scalar key".into(),
        });
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    t.insert(key.to_string(), value);
    Ok(())
}
