//! Experiment configuration files.
//!
//! A config is a TOML document whose top-level keys are the [`RunConfig`]
//! fields plus `output_path`, `seeds` and `sweep`. Every key is optional;
//! missing ones take the `RunConfig` defaults. A sweep is a list of
//! `[[sweep]]` tables, each naming a `field` and its `values`, and expands to
//! the Cartesian product of all listed values.
//!
//! ```toml
//! algorithm = "fedsa"
//! rounds = 150
//! seeds = [0, 1, 2]
//!
//! [[sweep]]
//! field = "lambda2"
//! values = [0.01, 1.0]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use fedsa_core::fed::RunConfig;
use thiserror::Error;
use toml::{Table, Value};

const EXTRA_KEYS: [&str; 3] = ["output_path", "seeds", "sweep"];
const ALIASES: [&str; 3] = ["m", "K", "X"];

/// Where a problem was found: a file (optionally a line) or a command-line override.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub origin: String,
    pub line: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}", self.origin),
            None => f.write_str(&self.origin),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: malformed config: {message}")]
    Syntax { origin: String, message: String },
    #[error("{at}: unknown key `{key}`{}", .suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        at: Location,
        key: String,
        suggestion: Option<String>,
    },
    #[error("{at}: invalid value for `{key}`: {message}")]
    InvalidValue { at: Location, key: String, message: String },
    #[error("{at}: {message}")]
    OutOfRange { at: Location, message: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

/// One concrete run configuration produced by the sweep expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `field=value` pairs joined by commas; `None` without a sweep.
    pub label: Option<String>,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    /// The configuration before sweep expansion.
    pub run: RunConfig,
    pub output_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub sweep: Vec<(String, Vec<Value>)>,
    pub points: Vec<SweepPoint>,
}

/// Every key accepted at the top level of a config file.
pub fn known_keys() -> Vec<String> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut keys: Vec<String> = defaults.as_object().expect("config is a struct").keys().cloned().collect();
    keys.extend(EXTRA_KEYS.iter().chain(&ALIASES).map(|s| s.to_string()));
    keys.sort();
    keys
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        let rest = l
            .strip_prefix(key)
            .or_else(|| l.strip_prefix(&format!("\"{key}\"")))
            .or_else(|| l.strip_prefix(&format!("[[{key}]]")).map(|_| "="));
        rest.is_some_and(|r| r.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn suggest(key: &str, known: &[String]) -> Option<String> {
    known
        .iter()
        .map(|k| (strsim::levenshtein(key, k), k))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, k)| k.clone())
}

/// Parses the value of `--override key=value`. The value is read as a TOML
/// value; anything that is not valid TOML is taken as a bare string.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_owned()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.to_owned()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config_str(&text, &path.display().to_string(), overrides)
}

/// Parses config text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str, overrides: &[String]) -> Result<ConfigFile, ConfigError> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
        origin: origin.to_owned(),
        message: e.to_string().trim_end().to_owned(),
    })?;
    let mut overridden = Vec::new();
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        overridden.push(key.clone());
        table.insert(key, value);
    }
    let locate = |key: &str| -> Location {
        if overridden.iter().any(|k| k == key) {
            Location {
                origin: format!("--override {key}"),
                line: None,
            }
        } else {
            Location {
                origin: origin.to_owned(),
                line: line_of(text, key),
            }
        }
    };

    let known = known_keys();
    // Report unknown keys in document order.
    let mut unknown: Vec<&String> = table.keys().filter(|k| !known.contains(k)).collect();
    unknown.sort_by_key(|k| locate(k).line.unwrap_or(usize::MAX));
    if let Some(key) = unknown.first() {
        return Err(ConfigError::UnknownKey {
            at: locate(key),
            key: key.to_string(),
            suggestion: suggest(key, &known),
        });
    }

    let output_path = match table.remove("output_path") {
        None => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                at: locate("output_path"),
                key: "output_path".into(),
                message: format!("expected a string, found {}", other.type_str()),
            })
        }
    };
    let seeds = match table.remove("seeds") {
        None => None,
        Some(v) => Some(parse_seeds(&v).map_err(|message| ConfigError::InvalidValue {
            at: locate("seeds"),
            key: "seeds".into(),
            message,
        })?),
    };
    let sweep = match table.remove("sweep") {
        None => Vec::new(),
        Some(v) => parse_sweep(&v, &known).map_err(|message| ConfigError::InvalidValue {
            at: locate("sweep"),
            key: "sweep".into(),
            message,
        })?,
    };

    let build = |table: &Table, label: Option<&str>| -> Result<RunConfig, ConfigError> {
        let run: RunConfig = Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| {
            let message = e.to_string().trim_end().to_owned();
            let key = table
                .keys()
                .find(|k| message.contains(&format!("`{k}`")) || message.contains(&format!("{k}:")))
                .cloned()
                .unwrap_or_default();
            ConfigError::InvalidValue {
                at: locate(&key),
                key,
                message,
            }
        })?;
        run.validate().map_err(|e| ConfigError::OutOfRange {
            at: Location {
                origin: match label {
                    Some(l) => format!("{origin} [sweep {l}]"),
                    None => origin.to_owned(),
                },
                line: None,
            },
            message: e.to_string(),
        })?;
        Ok(run)
    };

    let run = build(&table, None)?;
    let mut points = Vec::new();
    for combo in cartesian(&sweep) {
        if combo.is_empty() {
            points.push(SweepPoint {
                label: None,
                run: run.clone(),
            });
            continue;
        }
        let mut t = table.clone();
        let mut parts = Vec::with_capacity(combo.len());
        for (field, value) in combo {
            parts.push(format!("{field}={}", render_value(value)));
            t.insert(field.clone(), value.clone());
        }
        let label = parts.join(",");
        let point = build(&t, Some(&label))?;
        points.push(SweepPoint {
            label: Some(label),
            run: point,
        });
    }

    Ok(ConfigFile {
        seeds: seeds.unwrap_or_else(|| vec![run.seed]),
        run,
        output_path,
        sweep,
        points,
    })
}

fn parse_seeds(v: &Value) -> Result<Vec<u64>, String> {
    let arr = v.as_array().ok_or("expected an array of non-negative integers")?;
    if arr.is_empty() {
        return Err("at least one seed is required".into());
    }
    arr.iter()
        .map(|s| match s.as_integer() {
            Some(i) if i >= 0 => Ok(i as u64),
            _ => Err(format!("seed {s} is not a non-negative integer")),
        })
        .collect()
}

fn parse_sweep(v: &Value, known: &[String]) -> Result<Vec<(String, Vec<Value>)>, String> {
    let entries = v.as_array().ok_or("expected [[sweep]] tables")?;
    entries
        .iter()
        .map(|e| {
            let t = e.as_table().ok_or("each sweep entry must be a table with `field` and `values`")?;
            if let Some(extra) = t.keys().find(|k| *k != "field" && *k != "values") {
                return Err(format!("unknown sweep key `{extra}`"));
            }
            let field = t.get("field").and_then(Value::as_str).ok_or("sweep entry needs a string `field`")?;
            if !known.iter().any(|k| k == field) || EXTRA_KEYS.contains(&field) {
                return Err(format!("cannot sweep over `{field}`"));
            }
            let values = t
                .get("values")
                .and_then(Value::as_array)
                .filter(|a| !a.is_empty())
                .ok_or("sweep entry needs a non-empty `values` array")?;
            Ok((field.to_owned(), values.clone()))
        })
        .collect()
}

fn cartesian(axes: &[(String, Vec<Value>)]) -> Vec<Vec<(&String, &Value)>> {
    let mut combos: Vec<Vec<(&String, &Value)>> = vec![Vec::new()];
    for (field, values) in axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((field, v));
                    next
                })
            })
            .collect();
    }
    combos
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
