use pnp_core::cost::{
    abstract_len, decoder_ratio, encoder_ratio, named_config, pnp_cost, pnp_cost_default, tradeoff_curve,
    transformer_cost, write_csv, CostConstants, CSV_HEADER, DC5_TOKENS, R50_TOKENS,
};
use pnp_core::sampler::SCORING_HIDDEN;
use pnp_core::transformer::TransformerConfig;
use proptest::prelude::*;

fn within(value: u64, target: f64, tol: f64) -> bool {
    (value as f64 - target).abs() <= tol * target
}

/// MAC count of the layer stacks written out term by term. Cross-attention is
/// charged for its key and value projections and its score/mix products only.
fn hand_count(cfg: &TransformerConfig, len: u64) -> (u64, u64) {
    let d = cfg.d_model as u64;
    let f = cfg.d_ffn as u64;
    let q = cfg.n_queries as u64;
    let projections = 4 * len * d * d;
    let scores_and_mix = 2 * len * len * d;
    let ffn = 2 * len * d * f;
    let encoder = cfg.n_encoder_layers as u64 * (projections + scores_and_mix + ffn);
    let self_attn = 4 * q * d * d + 2 * q * q * d;
    let cross_attn = 2 * len * d * d + 2 * q * len * d;
    let dec_ffn = 2 * q * d * f;
    let decoder = cfg.n_decoder_layers as u64 * (self_attn + cross_attn + dec_ffn);
    (encoder, decoder)
}

#[test]
fn detr_r50_figures() {
    let cfg = TransformerConfig::detr_r50();
    let base = transformer_cost(&cfg, R50_TOKENS).unwrap();
    assert!(within(base.encoder_macs, 9.6e9, 0.15), "{}", base.encoder_macs);
    assert!(within(base.decoder_macs, 1.9e9, 0.15), "{}", base.decoder_macs);
    let pnp = pnp_cost_default(&cfg, R50_TOKENS, 0.33, 60).unwrap();
    assert!(within(pnp.encoder_macs, 3.2e9, 0.15), "{}", pnp.encoder_macs);
    assert!((pnp.total_macs as f64) <= 0.55 * base.total_macs as f64);
    let dc5 = transformer_cost(&cfg, DC5_TOKENS).unwrap();
    assert!(within(dc5.encoder_macs, 69.2e9, 0.15), "{}", dc5.encoder_macs);
}

#[test]
fn counts_match_term_by_term_expansion() {
    for cfg in [TransformerConfig::detr_r50(), TransformerConfig::desk()] {
        for len in [1, 7, 850, 3350] {
            let r = transformer_cost(&cfg, len).unwrap();
            assert_eq!((r.encoder_macs, r.decoder_macs), hand_count(&cfg, len));
        }
    }
}

#[test]
fn unit_length_encoder() {
    let cfg = TransformerConfig::detr_r50();
    let k = CostConstants::from_config(&cfg);
    assert_eq!(transformer_cost(&cfg, 1).unwrap().encoder_macs, k.a + k.b);
}

#[test]
fn full_ratio_endpoint() {
    let cfg = TransformerConfig::detr_r50();
    let base = transformer_cost(&cfg, R50_TOKENS).unwrap();
    let full = pnp_cost_default(&cfg, R50_TOKENS, 1.0, 0).unwrap();
    let scoring = R50_TOKENS * (256 * SCORING_HIDDEN as u64 + SCORING_HIDDEN as u64);
    assert_eq!(full.encoder_macs, base.encoder_macs);
    assert_eq!(full.decoder_macs, base.decoder_macs);
    assert_eq!(full.sampler_macs, scoring);
    let row = tradeoff_curve(&cfg, R50_TOKENS, &[1.0], 60).unwrap();
    assert_eq!(row[0].report.total_macs, base.total_macs + scoring);
}

#[test]
fn curve_totals_ascend_and_reduce() {
    let cfg = TransformerConfig::detr_r50();
    let rows = tradeoff_curve(&cfg, R50_TOKENS, &[0.33, 0.5, 0.65], 60).unwrap();
    assert!(rows.windows(2).all(|w| w[0].report.total_macs < w[1].report.total_macs));
    let full = pnp_cost_default(&cfg, R50_TOKENS, 1.0, 60).unwrap();
    assert!(rows[0].report.total_macs as f64 / full.total_macs as f64 <= 0.45);
}

#[test]
fn csv_has_header_and_integer_columns() {
    let cfg = named_config("detr-r50").unwrap();
    let rows = tradeoff_curve(&cfg, R50_TOKENS, &[0.25, 0.5], 60).unwrap();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        let ints: Vec<u64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
        assert_eq!(ints[0] + ints[1] + ints[2], ints[3]);
    }
    assert!(lines[1].starts_with("0.25,"));
}

#[test]
fn invalid_arguments_are_rejected() {
    let cfg = TransformerConfig::desk();
    assert!(transformer_cost(&cfg, 0).is_err());
    assert!(pnp_cost(&cfg, 10, 0.0, 2, 256).is_err());
    assert!(pnp_cost(&cfg, 10, 1.5, 2, 256).is_err());
    assert!(tradeoff_curve(&cfg, 10, &[], 2).is_err());
    assert!(named_config("resnet").is_none());
}

#[test]
fn abstract_length_counts_fine_plus_pool() {
    assert_eq!(abstract_len(850, 0.33, 60), 280 + 60);
    assert_eq!(abstract_len(850, 1.0, 60), 850);
    assert_eq!(abstract_len(10, 0.01, 3), 4);
}

fn positive_constants() -> impl Strategy<Value = CostConstants> {
    (1u64..1_000_000, 1u64..1_000_000_000, 1u64..1_000_000, 1u64..1_000_000_000).prop_map(|(a, b, c, o)| {
        CostConstants { a, b, c, o }
    })
}

proptest! {
    #[test]
    fn encoder_ratio_between_r_squared_and_r(k in positive_constants(), len in 1u64..100_000, r in 0.001f64..0.999) {
        let e = encoder_ratio(&k, len as f64, r);
        prop_assert!(e > r * r && e < r);
    }

    #[test]
    fn decoder_ratio_between_r_and_one(k in positive_constants(), len in 1u64..100_000, r in 0.001f64..0.999) {
        let d = decoder_ratio(&k, len as f64, r);
        prop_assert!(d > r && d < 1.0);
    }

    #[test]
    fn exact_encoder_ratio_shrinks_with_length(k in positive_constants(), num in 1u64..8) {
        let den = 8u64;
        let mut prev: Option<(u128, u128)> = None;
        let mut len = 64u64;
        while len <= 65536 {
            let n = (len / den * num) as u128;
            let full = k.a as u128 * (len as u128).pow(2) + k.b as u128 * len as u128;
            let part = k.a as u128 * n * n + k.b as u128 * n;
            if let Some((pp, pf)) = prev {
                prop_assert!(part * pf < pp * full);
            }
            prev = Some((part, full));
            len *= 2;
        }
    }

    #[test]
    fn totals_never_decrease_with_ratio(len in 1u64..5000, pool in 0u64..100, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let cfg = TransformerConfig::detr_r50();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = pnp_cost_default(&cfg, len, lo, pool).unwrap();
        let y = pnp_cost_default(&cfg, len, hi, pool).unwrap();
        prop_assert!(abstract_len(len, lo, pool) <= abstract_len(len, hi, pool) || hi == 1.0);
        prop_assert!(x.encoder_macs + x.decoder_macs <= y.encoder_macs + y.decoder_macs || hi == 1.0);
    }
}
