//! Map export: a lossless little-endian `f32` plane plus an 8-bit PGM
//! preview scaled linearly between the finite minimum and maximum.

use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct MapRange {
    pub min: f64,
    pub max: f64,
}

/// Finite range of a map; `None` when no value is finite.
pub fn finite_range(values: &[f64]) -> Option<MapRange> {
    values.iter().filter(|v| v.is_finite()).fold(None, |acc, &v| match acc {
        None => Some(MapRange { min: v, max: v }),
        Some(r) => Some(MapRange {
            min: r.min.min(v),
            max: r.max.max(v),
        }),
    })
}

pub fn raw_f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Binary PGM (P5). Non-finite pixels map to 0; a constant map is mid-grey.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize, range: Option<&MapRange>) -> Vec<u8> {
    let mut out = match range {
        Some(r) => format!("P5\n# range {} {}\n{width} {height}\n255\n", r.min, r.max),
        None => format!("P5\n{width} {height}\n255\n"),
    }
    .into_bytes();
    out.extend(values.iter().map(|&v| match range {
        Some(r) if v.is_finite() => {
            if r.max > r.min {
                ((v - r.min) / (r.max - r.min) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        }
        _ => 0,
    }));
    out
}

/// Writes `<stem>.f32` and `<stem>.pgm` into `dir` and returns the range.
pub fn export_map(dir: &Path, stem: &str, values: &[f64], height: usize, width: usize) -> CliResult<Option<MapRange>> {
    if values.len() != height * width {
        return Err(CliError::Config(format!(
            "map `{stem}` has {} values for {height}x{width}",
            values.len()
        )));
    }
    let range = finite_range(values);
    let raw = dir.join(format!("{stem}.f32"));
    fs::write(&raw, raw_f32_bytes(values)).map_err(|e| CliError::io(&raw, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, pgm_bytes(values, height, width, range.as_ref())).map_err(|e| CliError::io(&pgm, e))?;
    Ok(range)
}
