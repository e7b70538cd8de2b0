//! Analytic multiply-accumulate (MAC) cost model of the transformer, with and
//! without poll-and-pool abstraction.
//!
//! Costs are MAC counts. Published "FLOPs" figures for DETR-style models are
//! MAC counts as well, so the numbers here are directly comparable to them.
//! Softmax, normalisation and activation costs are lower-order and left out.
//!
//! With `L` tokens the encoder costs `a L^2 + b L` and the decoder `c L + O`:
//!
//! - `a = 2 n_enc d` (attention logits and weighted values)
//! - `b = n_enc (4 d^2 + 2 d d_ffn)` (Q/K/V/output projections and the FFN)
//! - `c = n_dec (2 d^2 + 2 D d)` (cross-attention key/value projections, logits, weighted values)
//! - `O = n_dec (4 D d^2 + 2 D^2 d + 2 D d d_ffn)` (everything that only sees the `D` queries)

use std::io::Write;

use crate::error::{Error, Result};
use crate::sampler::{poll_count, SCORING_HIDDEN};
use crate::transformer::TransformerConfig;

/// Canonical DETR-R50 token count: an 800x1066 image at stride 32 gives a 25x34 grid.
pub const R50_TOKENS: u64 = 850;
/// The same image at stride 16 (dilated C5).
pub const DC5_TOKENS: u64 = 3350;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConstants {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub o: u64,
}

impl CostConstants {
    pub fn from_config(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model as u64;
        let f = cfg.d_ffn as u64;
        let q = cfg.n_queries as u64;
        let enc = cfg.n_encoder_layers as u64;
        let dec = cfg.n_decoder_layers as u64;
        Self {
            a: 2 * enc * d,
            b: enc * (4 * d * d + 2 * d * f),
            c: dec * (2 * d * d + 2 * q * d),
            o: dec * (4 * q * d * d + 2 * q * q * d + 2 * q * d * f),
        }
    }

    pub fn encoder(&self, len: u64) -> u64 {
        self.a * len * len + self.b * len
    }

    pub fn decoder(&self, len: u64) -> u64 {
        self.c * len + self.o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostReport {
    pub encoder_macs: u64,
    pub decoder_macs: u64,
    pub sampler_macs: u64,
    pub total_macs: u64,
}

impl CostReport {
    fn new(encoder_macs: u64, decoder_macs: u64, sampler_macs: u64) -> Self {
        Self {
            encoder_macs,
            decoder_macs,
            sampler_macs,
            total_macs: encoder_macs + decoder_macs + sampler_macs,
        }
    }
}

/// Cost of running the full token set of length `len` through the transformer.
pub fn transformer_cost(cfg: &TransformerConfig, len: u64) -> Result<CostReport> {
    if len == 0 {
        return Err(Error::contract("token count must be at least 1"));
    }
    let k = CostConstants::from_config(cfg);
    Ok(CostReport::new(k.encoder(len), k.decoder(len), 0))
}

/// Number of abstract tokens `N + M` for a full set of `len` tokens.
pub fn abstract_len(len: u64, alpha: f64, pool: u64) -> u64 {
    let n = poll_count(alpha, len as usize) as u64;
    let m = if n < len { pool } else { 0 };
    n + m
}

/// Cost with the abstraction: the transformer sees `N + M` tokens and the
/// sampler pays for scoring every location plus pooling the remainder.
pub fn pnp_cost(cfg: &TransformerConfig, len: u64, alpha: f64, pool: u64, scoring_hidden: u64) -> Result<CostReport> {
    if len == 0 {
        return Err(Error::contract("token count must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::contract(format!("poll ratio must lie in (0, 1], got {alpha}")));
    }
    let d = cfg.d_model as u64;
    let n = poll_count(alpha, len as usize) as u64;
    let remaining = len - n;
    let k = CostConstants::from_config(cfg);
    let tokens = abstract_len(len, alpha, pool);
    let scoring = len * (d * scoring_hidden + scoring_hidden);
    let pooling = if remaining > 0 && pool > 0 {
        remaining * (d * pool + d * d)
    } else {
        0
    };
    Ok(CostReport::new(k.encoder(tokens), k.decoder(tokens), scoring + pooling))
}

/// [`pnp_cost`] with the default 256-wide scoring network.
pub fn pnp_cost_default(cfg: &TransformerConfig, len: u64, alpha: f64, pool: u64) -> Result<CostReport> {
    pnp_cost(cfg, len, alpha, pool, SCORING_HIDDEN as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub report: CostReport,
}

/// Cost at each poll ratio in `alphas`, in the order given.
pub fn tradeoff_curve(cfg: &TransformerConfig, len: u64, alphas: &[f64], pool: u64) -> Result<Vec<TradeoffRow>> {
    if alphas.is_empty() {
        return Err(Error::contract("trade-off curve needs at least one poll ratio"));
    }
    alphas
        .iter()
        .map(|&alpha| {
            Ok(TradeoffRow {
                alpha,
                report: pnp_cost_default(cfg, len, alpha, pool)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "alpha,encoder,decoder,sampler,total";

pub fn write_csv<W: Write>(rows: &[TradeoffRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{},{},{},{},{}",
            row.alpha, r.encoder_macs, r.decoder_macs, r.sampler_macs, r.total_macs
        )?;
    }
    Ok(())
}

/// Built-in transformer configurations by name.
pub fn named_config(name: &str) -> Option<TransformerConfig> {
    match name {
        "detr-r50" | "detr-r50-dc5" | "detr" => Some(TransformerConfig::detr_r50()),
        "desk" => Some(TransformerConfig::desk()),
        _ => None,
    }
}

/// Encoder cost ratio `(a r^2 L + b r) / (a L + b)` for a token fraction `r`.
pub fn encoder_ratio(k: &CostConstants, len: f64, r: f64) -> f64 {
    let (a, b) = (k.a as f64, k.b as f64);
    (a * r * r * len + b * r) / (a * len + b)
}

/// Decoder cost ratio `(c r L + O) / (c L + O)`.
pub fn decoder_ratio(k: &CostConstants, len: f64, r: f64) -> f64 {
    let (c, o) = (k.c as f64, k.o as f64);
    (c * r * len + o) / (c * len + o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_length_encoder_is_a_plus_b() {
        let cfg = TransformerConfig::detr_r50();
        let k = CostConstants::from_config(&cfg);
        let r = transformer_cost(&cfg, 1).unwrap();
        assert_eq!(r.encoder_macs, k.a + k.b);
        assert_eq!(r.decoder_macs, k.c + k.o);
        assert_eq!(r.sampler_macs, 0);
    }

    #[test]
    fn detr_constants() {
        let k = CostConstants::from_config(&TransformerConfig::detr_r50());
        assert_eq!(k.a, 3072);
        assert_eq!(k.b, 7_864_320);
        assert_eq!(k.c, 1_093_632);
        assert_eq!(k.o, 817_152_000);
    }

    #[test]
    fn full_ratio_matches_baseline_plus_scoring() {
        let cfg = TransformerConfig::detr_r50();
        let base = transformer_cost(&cfg, 850).unwrap();
        let full = pnp_cost_default(&cfg, 850, 1.0, 60).unwrap();
        assert_eq!(full.encoder_macs, base.encoder_macs);
        assert_eq!(full.decoder_macs, base.decoder_macs);
        assert_eq!(full.sampler_macs, 850 * (256 * 256 + 256));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TransformerConfig::detr_r50();
        assert!(transformer_cost(&cfg, 0).is_err());
        assert!(pnp_cost_default(&cfg, 850, 0.0, 60).is_err());
        assert!(pnp_cost_default(&cfg, 850, 1.5, 60).is_err());
        assert!(tradeoff_curve(&cfg, 850, &[], 60).is_err());
    }

    #[test]
    fn csv_layout() {
        let cfg = TransformerConfig::detr_r50();
        let rows = tradeoff_curve(&cfg, 850, &[0.5], 60).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "0.5");
        let r = rows[0].report;
        assert_eq!(fields[4], r.total_macs.to_string());
        assert!(fields[1..].iter().all(|f| f.chars().all(|c| c.is_ascii_digit())));
    }
}
