//! Artifact writing and terminal formatting.

use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// The effective configuration as a JSON value, echoed into every artifact.
pub fn echo<T: Serialize>(args: &T) -> CliResult<Value> {
    serde_json::to_value(args).map_err(|e| CliError::Config(e.to_string()))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn with_config(config: &Value, body: Value) -> Value {
    let mut obj = Map::new();
    obj.insert("config".into(), config.clone());
    match body {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("result".into(), other);
        }
    }
    Value::Object(obj)
}

/// Writes `body` (with a `config` field prepended) as pretty JSON.
pub fn write_json(path: &Path, config: &Value, body: Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&with_config(config, body)).map_err(|e| CliError::Config(e.to_string()))?;
    write(path, &(text + "\n"))
}

/// Writes a CSV table and a JSON mirror next to it. `out` names either file;
/// the other takes the same stem with the other extension. Returns both paths.
pub fn write_table(out: &Path, config: &Value, csv: &str, body: Value) -> CliResult<(PathBuf, PathBuf)> {
    let is_json = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let (csv_path, json_path) = if is_json {
        (sibling(out, "csv"), out.to_path_buf())
    } else {
        (out.to_path_buf(), sibling(out, "json"))
    };
    let header = serde_json::to_string(config).map_err(|e| CliError::Config(e.to_string()))?;
    write(&csv_path, &format!("# config: {header}\n{csv}"))?;
    write_json(&json_path, config, body)?;
    Ok((csv_path, json_path))
}

/// Left-aligned text table with a dashed rule under the header.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut s = line(&mut header.iter().copied());
    s.push('\n');
    s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    s.push('\n');
    for row in rows {
        s.push_str(&line(&mut row.iter().map(String::as_str)));
        s.push('\n');
    }
    s
}

pub fn color_enabled() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && std::io::stdout().is_terminal()
}

pub fn verdict(pass: bool) -> String {
    let word = if pass { "PASS" } else { "FAIL" };
    if color_enabled() {
        let code = if pass { 32 } else { 31 };
        format!("\x1b[{code}m{word}\x1b[0m")
    } else {
        word.to_string()
    }
}
