//! Deterministic JSON report output: fixed field order from struct
//! definitions, pretty files, compact single-line stdout.

use std::io::Write;
use std::path::Path;

use geco_core::Result;

pub fn write_report<T: serde::Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, report)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn print_report<T: serde::Serialize>(report: &T) -> Result<()> {
    let line = serde_json::to_string(report)?;
    println!("{line}");
    Ok(())
}

/// Writes to `path` when given, always echoes to stdout.
pub fn emit<T: serde::Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        write_report(report, path)?;
    }
    print_report(report)
}
