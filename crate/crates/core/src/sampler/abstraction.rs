use super::{BoundFeatures, CoarseSet, FineSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Fine tokens followed by coarse tokens, with matching position embeddings.
#[derive(Debug, Clone)]
pub struct AbstractSet {
    pub height: usize,
    pub width: usize,
    pub fine: FineSet,
    pub coarse: CoarseSet,
    /// `(N + M) x C`
    pub tokens: Var,
    pub positions: Option<Var>,
    /// All `false`: neither fine nor coarse tokens are padding.
    pub padding_mask: Vec<bool>,
}

impl AbstractSet {
    pub fn fine_len(&self) -> usize {
        self.fine.len()
    }

    pub fn coarse_len(&self, g: &Graph) -> usize {
        self.coarse.len(g)
    }

    pub fn token_len(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[0]
    }
}

/// Concatenates fine and coarse tokens. Fine positions are gathered in polling
/// order; each coarse position is the aggregation-weighted sum of the remaining
/// locations' positions.
pub fn build_abstract_set(
    g: &mut Graph,
    fm: &BoundFeatures,
    fine: FineSet,
    coarse: CoarseSet,
    with_positions: bool,
) -> Result<AbstractSet> {
    let tokens = match coarse.vectors {
        Some(c) => g.concat_rows(&[fine.vectors, c])?,
        None => fine.vectors,
    };
    let positions = if with_positions {
        let Some(pos) = fm.positions else {
            return Err(Error::contract("position embeddings requested but the feature map has none"));
        };
        let fine_pos = g.gather_rows(pos, &fine.indices)?;
        Some(match coarse.weights {
            Some(w) => {
                let remaining = g.gather_rows(pos, &coarse.remaining_indices)?;
                let wt = g.transpose(w)?;
                let coarse_pos = g.matmul(wt, remaining)?;
                g.concat_rows(&[fine_pos, coarse_pos])?
            }
            None => fine_pos,
        })
    } else {
        None
    };
    let count = g.shape(tokens)[0];
    Ok(AbstractSet {
        height: fm.height,
        width: fm.width,
        fine,
        coarse,
        tokens,
        positions,
        padding_mask: vec![false; count],
    })
}

/// Restores an `L x C` grid: fine tokens go back to their locations and each
/// remaining location receives the aggregation-weighted sum of coarse tokens.
/// Padded locations stay zero.
pub fn reverse_project(g: &mut Graph, encoded: Var, abs: &AbstractSet) -> Result<Var> {
    let n = abs.fine_len();
    let m = abs.coarse_len(g);
    let shape = g.shape(encoded).to_vec();
    if shape.len() != 2 || shape[0] != n + m {
        return Err(Error::dim(
            "reverse_project",
            format!("expected {} encoded tokens, got shape {shape:?}", n + m),
        ));
    }
    let len = abs.height * abs.width;
    let channels = shape[1];
    let fine_tokens = if m == 0 { encoded } else { g.slice_rows(encoded, 0, n)? };
    let fine_grid = g.scatter_rows(fine_tokens, &abs.fine.indices, len)?;
    let Some(weights) = abs.coarse.weights else {
        return Ok(fine_grid);
    };
    let coarse_tokens = g.slice_rows(encoded, n, n + m)?;
    let diffused = g.matmul(weights, coarse_tokens)?;
    let coarse_grid = g.scatter_rows(diffused, &abs.coarse.remaining_indices, len)?;
    debug_assert_eq!(g.shape(coarse_grid), [len, channels]);
    g.add(fine_grid, coarse_grid)
}
