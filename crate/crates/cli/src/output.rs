//! Artifact rendering: fixed significant-digit numbers, CSV with a
//! commented config header, JSON with a metadata envelope.

use std::path::Path;

use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Round to `digits` significant digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .expect("formatted float parses")
}

/// Shortest text for the rounded value: plain notation for magnitudes in
/// `[1e-4, 1e15)`, scientific otherwise.
pub fn fmt_num(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig(x, digits);
    if r == 0.0 {
        return "0".into();
    }
    let a = r.abs();
    if (1e-4..1e15).contains(&a) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

/// JSON number of the rounded value; non-finite values become `null`.
pub fn json_num(x: f64, digits: usize) -> Value {
    if x.is_finite() {
        serde_json::Number::from_f64(round_sig(x, digits)).map_or(Value::Null, Value::Number)
    } else {
        Value::Null
    }
}

/// One value in a report row.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Cell {
    pub fn csv(&self, digits: usize) -> String {
        match self {
            Cell::Num(x) => fmt_num(*x, digits),
            Cell::Int(n) => n.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn json(&self, digits: usize) -> Value {
        match self {
            Cell::Num(x) => json_num(*x, digits),
            Cell::Int(n) => Value::from(*n),
            Cell::Bool(b) => Value::Bool(*b),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Empty => Value::Null,
        }
    }
}

pub type Row = Vec<(&'static str, Cell)>;

/// CSV body with a header line taken from `columns`.
pub fn csv_table(columns: &[&str], rows: &[Row], digits: usize) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for row in rows {
        debug_assert!(row.iter().map(|(k, _)| *k).eq(columns.iter().copied()));
        w.write_record(row.iter().map(|(_, c)| c.csv(digits)))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn json_row(row: &Row, digits: usize) -> Value {
    Value::Object(
        row.iter()
            .map(|(k, c)| (k.to_string(), c.json(digits)))
            .collect(),
    )
}

/// Envelope timestamp: the configured string, else `SOURCE_DATE_EPOCH`
/// as RFC 3339, else `null`.
pub fn timestamp(config: &RunConfig, source_date_epoch: Option<&str>) -> Result<Value, CliError> {
    if let Some(t) = &config.output.timestamp {
        return Ok(Value::String(t.clone()));
    }
    let Some(raw) = source_date_epoch else {
        return Ok(Value::Null);
    };
    let secs: i64 = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("SOURCE_DATE_EPOCH `{raw}` is not an integer")))?;
    let t = time::OffsetDateTime::from_unix_timestamp(secs)
        .map_err(|e| CliError::Config(format!("SOURCE_DATE_EPOCH out of range: {e}")))?;
    let s = t
        .format(&time::format_description::well_known::Rfc3339)
        .map_err(|e| CliError::Config(format!("cannot format timestamp: {e}")))?;
    Ok(Value::String(s))
}

/// `# `-prefixed TOML echo of the effective configuration.
pub fn csv_header(config: &RunConfig) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(&format!("# osigma {}\n", env!("CARGO_PKG_VERSION")));
    for line in config.echo_toml()?.lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// `{config_echo, version, timestamp}` followed by `body`'s fields.
pub fn json_envelope(
    config: &RunConfig,
    timestamp: Value,
    body: Map<String, Value>,
) -> Result<String, CliError> {
    let mut root = Map::new();
    root.insert(
        "config_echo".into(),
        serde_json::to_value(config)
            .map_err(|e| CliError::Config(format!("cannot echo config: {e}")))?,
    );
    root.insert(
        "version".into(),
        Value::String(env!("CARGO_PKG_VERSION").into()),
    );
    root.insert("timestamp".into(), timestamp);
    root.extend(body);
    let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("json value serializes");
    s.push('\n');
    Ok(s)
}

/// Write to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}
