//! Set-prediction loss with an exact brute-force matcher.
//!
//! Each target is assigned to a distinct prediction. A matched prediction pays
//! cross-entropy against the target class plus `BOX_WEIGHT` times the squared
//! box error; every unmatched prediction pays cross-entropy against the
//! background class (index `num_classes`). The loss is the minimum over all
//! injections of targets into predictions, found by enumeration.

use super::scene::Target;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Enumeration bound on the number of predictions.
pub const MAX_PREDICTIONS: usize = 8;
pub const BOX_WEIGHT: f64 = 1.0;

/// `assignment[t]` is the prediction matched to target `t`.
pub type Assignment = Vec<usize>;

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn squared_error(a: &[f64], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise costs of a `D x (K + 1)` logit matrix and `D x 4` boxes.
struct CostTable {
    background: Vec<f64>,
    /// `pair[d][t]`: cost of matching prediction `d` to target `t`.
    pair: Vec<Vec<f64>>,
}

impl CostTable {
    fn new(logits: &Tensor, boxes: &Tensor, targets: &[Target]) -> Result<Self> {
        let (d, k1) = logits.dims2()?;
        if boxes.shape() != [d, 4] {
            return Err(Error::dim("match_and_loss", format!("boxes {:?} for {d} predictions", boxes.shape())));
        }
        if d > MAX_PREDICTIONS {
            return Err(Error::contract(format!(
                "{d} predictions exceed the enumeration bound of {MAX_PREDICTIONS}"
            )));
        }
        if targets.len() > d {
            return Err(Error::contract(format!("{} targets cannot be matched to {d} predictions", targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| t.label + 1 >= k1) {
            return Err(Error::contract(format!("label {} needs more than {k1} logits", t.label)));
        }
        let bg = k1 - 1;
        let mut background = Vec::with_capacity(d);
        let mut pair = Vec::with_capacity(d);
        for q in 0..d {
            let lp = log_softmax(logits.row(q));
            background.push(-lp[bg]);
            pair.push(
                targets
                    .iter()
                    .map(|t| -lp[t.label] + BOX_WEIGHT * squared_error(boxes.row(q), &t.boxes))
                    .collect(),
            );
        }
        Ok(Self { background, pair })
    }

    fn cost(&self, assignment: &[usize]) -> f64 {
        let mut total: f64 = self.background.iter().sum();
        for (t, &q) in assignment.iter().enumerate() {
            total += self.pair[q][t] - self.background[q];
        }
        total
    }
}

/// Cost of one specific assignment.
pub fn assignment_cost(logits: &Tensor, boxes: &Tensor, targets: &[Target], assignment: &[usize]) -> Result<f64> {
    let table = CostTable::new(logits, boxes, targets)?;
    Ok(table.cost(assignment))
}

/// Exhaustive search over all injections; ties resolve to the lexicographically first.
pub fn best_assignment(logits: &Tensor, boxes: &Tensor, targets: &[Target]) -> Result<(Assignment, f64)> {
    let table = CostTable::new(logits, boxes, targets)?;
    let d = table.background.len();
    let mut best: Option<(Assignment, f64)> = None;
    let mut current = Vec::with_capacity(targets.len());
    let mut used = vec![false; d];
    fn search(
        table: &CostTable,
        n_targets: usize,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(Assignment, f64)>,
    ) {
        if current.len() == n_targets {
            let c = table.cost(current);
            if best.as_ref().is_none_or(|(_, b)| c < *b) {
                *best = Some((current.clone(), c));
            }
            return;
        }
        for q in 0..used.len() {
            if !used[q] {
                used[q] = true;
                current.push(q);
                search(table, n_targets, current, used, best);
                current.pop();
                used[q] = false;
            }
        }
    }
    search(&table, targets.len(), &mut current, &mut used, &mut best);
    Ok(best.expect("at least the empty assignment exists"))
}

/// Minimum set-prediction loss for a `D x (K + 1 + 4)` prediction matrix
/// holding class logits followed by box coordinates.
pub fn match_and_loss(predictions: &Tensor, targets: &[Target], num_classes: usize) -> Result<f64> {
    let (d, width) = predictions.dims2()?;
    let k1 = num_classes + 1;
    if width != k1 + 4 {
        return Err(Error::dim(
            "match_and_loss",
            format!("predictions {:?} need {} columns", predictions.shape(), k1 + 4),
        ));
    }
    let mut logits = Vec::with_capacity(d * k1);
    let mut boxes = Vec::with_capacity(d * 4);
    for q in 0..d {
        let row = predictions.row(q);
        logits.extend_from_slice(&row[..k1]);
        boxes.extend_from_slice(&row[k1..]);
    }
    let logits = Tensor::new(&[d, k1], logits)?;
    let boxes = Tensor::new(&[d, 4], boxes)?;
    Ok(best_assignment(&logits, &boxes, targets)?.1)
}

/// Differentiable loss for a fixed assignment.
pub fn set_loss(g: &mut Graph, logits: Var, boxes: Var, targets: &[Target], assignment: &[usize]) -> Result<Var> {
    let (d, k1) = (g.shape(logits)[0], g.shape(logits)[1]);
    let mut class_mask = vec![0.0; d * k1];
    let mut box_target = vec![0.0; d * 4];
    let mut box_mask = vec![0.0; d * 4];
    let mut label = vec![k1 - 1; d];
    for (t, &q) in assignment.iter().enumerate() {
        label[q] = targets[t].label;
        box_target[q * 4..q * 4 + 4].copy_from_slice(&targets[t].boxes);
        box_mask[q * 4..q * 4 + 4].fill(BOX_WEIGHT);
    }
    for (q, &l) in label.iter().enumerate() {
        class_mask[q * k1 + l] = -1.0;
    }
    let logp = g.log_softmax(logits)?;
    let pick = g.constant(Tensor::new(&[d, k1], class_mask)?);
    let ce = g.mul(logp, pick)?;
    let ce = g.sum(ce)?;
    if assignment.is_empty() {
        return Ok(ce);
    }
    let target = g.constant(Tensor::new(&[d, 4], box_target)?);
    let weight = g.constant(Tensor::new(&[d, 4], box_mask)?);
    let diff = g.sub(boxes, target)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weight)?;
    let box_term = g.sum(weighted)?;
    g.add(ce, box_term)
}
