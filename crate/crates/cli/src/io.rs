//! Input loading and atomic output writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sinkflow::dataio::{build_marginals_and_plans, ingest};
use sinkflow::{FactionTimeline, FlowSeries};

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

/// Data loaded from `--input`: a timeline CSV, or a flow-series JSON
/// (bare, or as written by `ingest`).
pub struct Loaded {
    pub timeline: Option<FactionTimeline>,
    pub series: FlowSeries,
}

pub fn load_input(path: &Path, min_k: Option<usize>) -> CliResult<Loaded> {
    let text = read_text(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let timeline =
            ingest(text.as_bytes(), min_k).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let series = build_marginals_and_plans(&timeline)?;
        return Ok(Loaded {
            timeline: Some(timeline),
            series,
        });
    }
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let inner = value.get("series").cloned().unwrap_or(value);
    let series: FlowSeries = serde_json::from_value(inner)
        .map_err(|e| CliError::Runtime(format!("{}: not a flow series: {e}", path.display())))?;
    Ok(Loaded { timeline: None, series })
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes `bytes` to `path` through a temporary file in the same
/// directory, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    let Some(path) = path else {
        let mut out = std::io::stdout().lock();
        return out
            .write_all(bytes)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Runtime(e.to_string()));
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}
