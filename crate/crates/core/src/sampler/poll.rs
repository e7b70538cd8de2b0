use std::cmp::Ordering;

use super::{BoundFeatures, ScoreMap};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Layer-norm epsilon used before score modulation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// The fine feature set: the top-`N` locations, normalised and scaled by their scores.
#[derive(Debug, Clone)]
pub struct FineSet {
    /// `N x C`
    pub vectors: Var,
    /// Flat locations, best score first.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl FineSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `max(1, floor(alpha * valid_len))`, never more than `valid_len`.
pub fn poll_count(alpha: f64, valid_len: usize) -> usize {
    // The small offset keeps products such as 0.29 * 100 from flooring to 28.
    let n = (alpha * valid_len as f64 + 1e-9).floor() as usize;
    n.clamp(1, valid_len.max(1))
}

/// Orders locations by descending score, breaking ties by ascending index.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `n` best-ranked locations among those not `excluded`.
pub fn top_n(ranking: &[f64], n: usize, excluded: Option<&[bool]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ranking.len())
        .filter(|&l| excluded.is_none_or(|m| !m[l]))
        .collect();
    let cmp = |a: &usize, b: &usize| rank_order((*a, ranking[*a]), (*b, ranking[*b]));
    if n < order.len() {
        order.select_nth_unstable_by(n, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    order
}

pub fn poll_sample(g: &mut Graph, fm: &BoundFeatures, scores: &ScoreMap, alpha: f64) -> Result<FineSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::contract(format!("poll ratio must lie in (0, 1], got {alpha}")));
    }
    if scores.ranking.len() != fm.len() {
        return Err(Error::dim(
            "poll_sample",
            format!("{} scores for {} locations", scores.ranking.len(), fm.len()),
        ));
    }
    let n = poll_count(alpha, fm.valid_len());
    let indices = top_n(&scores.ranking, n, fm.padding.as_deref());
    let picked = g.gather_rows(fm.features, &indices)?;
    let normalized = g.layer_norm(picked, LAYER_NORM_EPS)?;
    let picked_scores = g.gather_rows(scores.scores, &indices)?;
    let vectors = g.scale_rows(normalized, picked_scores)?;
    let score_values = g.value(picked_scores).data().to_vec();
    Ok(FineSet {
        vectors,
        indices,
        scores: score_values,
    })
}
