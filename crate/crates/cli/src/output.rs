//! CSV result files headed by `#` provenance lines.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};

/// Enough digits to round-trip every `f64`.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `# level2 <version>`, `# command: <name>` and the resolved configuration
/// as commented TOML.
pub fn provenance<C: Serialize>(command: &str, config: &C) -> Result<String> {
    let toml = toml::to_string(config)
        .map_err(|e| CliError::Validation(format!("cannot serialize config: {e}")))?;
    let mut out = format!(
        "# level2 {}\n# command: {command}\n",
        env!("CARGO_PKG_VERSION")
    );
    for line in toml.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the provenance header followed by a CSV table.
pub fn write_table(
    path: &Path,
    header_lines: &str,
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut buf = header_lines.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err =
            |e: csv::Error| CliError::Validation(format!("cannot format {}: {e}", path.display()));
        w.write_record(columns).map_err(csv_err)?;
        for row in rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}
