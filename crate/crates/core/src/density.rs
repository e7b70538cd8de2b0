//! Computation density maps: how transformer cost spreads over the feature grid.
//!
//! Every polled location carries weight 1. A pooled location carries the sum of
//! its aggregation weights over all coarse tokens. Padded locations carry 0.
//! The total cost is then split in proportion to these weights.

use std::io::Write;

use crate::error::{Error, Result};
use crate::instance::AbstractInstance;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `H * W` entries.
    pub values: Vec<f64>,
}

/// Per-location weights for one abstract set.
pub fn location_weights(inst: &AbstractInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    let mut weights = vec![0.0; inst.len()];
    for &i in &inst.fine_indices {
        weights[i] = 1.0;
    }
    let m = inst.coarse_len();
    if m > 0 {
        for (r, &loc) in inst.remaining_indices.iter().enumerate() {
            weights[loc] = inst.weights[r * m..(r + 1) * m].iter().sum();
        }
    }
    Ok(weights)
}

/// `total_cost * weights / sum(weights)` laid out on an `H x W` grid.
pub fn render_density(weights: &[f64], total_cost: f64, height: usize, width: usize) -> Result<DensityMap> {
    if weights.len() != height * width {
        return Err(Error::dim(
            "render_density",
            format!("{} weights for a {height}x{width} grid", weights.len()),
        ));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::contract("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("at least one location needs a positive weight"));
    }
    let values = weights.iter().map(|w| total_cost * w / total).collect();
    Ok(DensityMap { height, width, values })
}

impl DensityMap {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Plain-text PGM (P2), scaled so the densest cell is 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.width, self.height)?;
        writeln!(out, "255")?;
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| {
                    let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                    (level as u8).to_string()
                })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// One grid row per line, values printed with round-trip precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}
