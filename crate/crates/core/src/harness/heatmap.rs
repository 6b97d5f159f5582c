//! Attention maps as 8-bit PGM images with a CSV of the raw values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Min-max scales to `0..=255`. A constant map is all zeros.
pub fn to_gray(a: &Tensor) -> Vec<u8> {
    let (lo, hi) = a
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    a.data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Binary PGM (`P5`) bytes for a `[rows, cols]` map.
pub fn pgm_bytes(a: &Tensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", a.cols(), a.rows()).into_bytes();
    out.extend(to_gray(a));
    out
}

/// One line per row; values use the shortest representation that parses
/// back to the same float.
pub fn csv_string(a: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..a.rows() {
        let line: Vec<String> = a.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse("heatmap csv", format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&refs)
}

/// The CSV written next to a heatmap.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `path` as PGM and its sidecar CSV. The map must be non-negative.
pub fn dump_heatmap(a: &Tensor, path: &Path) -> Result<()> {
    if a.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidConfig("heatmap values must be non-negative".into()));
    }
    fs::write(path, pgm_bytes(a)).map_err(|e| Error::io(path, e))?;
    let csv = sidecar_path(path);
    fs::write(&csv, csv_string(a)).map_err(|e| Error::io(&csv, e))
}
