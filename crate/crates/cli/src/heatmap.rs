//! Heatmap export of output-shaped component maps.

use std::fmt::Write as _;

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoding {
    /// Raw values, one CSV row per grid row.
    SignedCsv,
    /// Binary 8-bit PGM (P5) after normalization.
    PositivePgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Normalization {
    /// Positive part divided by the map maximum.
    MaxPositive,
    /// `0.5 + 0.5·v / max|v|`, zero maps to mid-gray.
    SignedSymmetric,
    /// Logistic squashing of the raw value.
    Sigmoid,
}

/// Map values to `[0, 1]`.
pub fn normalize(values: &[f64], mode: Normalization) -> Vec<f64> {
    match mode {
        Normalization::MaxPositive => {
            let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
            values
                .iter()
                .map(|&v| if max > 0.0 { v.max(0.0) / max } else { 0.0 })
                .collect()
        }
        Normalization::SignedSymmetric => {
            let max = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            values
                .iter()
                .map(|&v| if max > 0.0 { 0.5 + 0.5 * v / max } else { 0.5 })
                .collect()
        }
        Normalization::Sigmoid => values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

pub fn pgm(values: &[f64], height: usize, width: usize, mode: Normalization) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        normalize(values, mode)
            .into_iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Shortest round-trip representation of every value.
pub fn csv(values: &[f64], width: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push_str("\r\n");
    }
    out
}
