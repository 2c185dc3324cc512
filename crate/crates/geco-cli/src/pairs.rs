//! Pair-list and seg-list file parsing.
//!
//! A pair list has one pair per line: three whitespace-separated paths
//! (source features, target features, annotation), relative to the features
//! directory. A seg list has two paths per line (features, label grid).
//! Blank lines and `#` comments are skipped.

use std::path::{Path, PathBuf};

use geco_core::{Error, Result};

pub struct PairEntry {
    pub features_src: PathBuf,
    pub features_tgt: PathBuf,
    pub annotation: PathBuf,
}

pub fn read_pair_list(list: &Path, base: &Path) -> Result<Vec<PairEntry>> {
    let text = std::fs::read_to_string(list)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "{}:{}: expected 3 paths per pair line, got {}",
                list.display(),
                lineno + 1,
                fields.len()
            )));
        }
        out.push(PairEntry {
            features_src: base.join(fields[0]),
            features_tgt: base.join(fields[1]),
            annotation: base.join(fields[2]),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "pair list {} is empty",
            list.display()
        )));
    }
    Ok(out)
}

pub struct SegEntry {
    pub features: PathBuf,
    pub labels: PathBuf,
}

pub fn read_seg_list(list: &Path, base: &Path) -> Result<Vec<SegEntry>> {
    let text = std::fs::read_to_string(list)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "{}:{}: expected 2 paths per seg line, got {}",
                list.display(),
                lineno + 1,
                fields.len()
            )));
        }
        out.push(SegEntry {
            features: base.join(fields[0]),
            labels: base.join(fields[1]),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "seg list {} is empty",
            list.display()
        )));
    }
    Ok(out)
}

/// Parses `start:end:step` into an inclusive sweep.
pub fn parse_sweep(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "sweep must be start:end:step, got {raw:?}"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("invalid sweep number {s:?}")))
    };
    let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if !(start > 0.0) || !(step > 0.0) || end < start {
        return Err(Error::InvalidConfig(format!(
            "sweep bounds must satisfy 0 < start <= end with positive step, got {raw:?}"
        )));
    }
    let mut alphas = Vec::new();
    let mut k = 0u32;
    loop {
        let alpha = start + step * f64::from(k);
        if alpha > end + 1e-12 {
            break;
        }
        alphas.push(alpha);
        k += 1;
    }
    Ok(alphas)
}
