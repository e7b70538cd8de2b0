use rand::Rng;

use super::{BoundFeatures, FineSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Learnable projections of the pool sampler: aggregation logits (`C x M`)
/// and value projection (`C x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    /// `None` when `M = 0`.
    pub aggregation: Option<Tensor>,
    pub value: Tensor,
}

impl PoolParams {
    pub fn new(aggregation: Option<Tensor>, value: Tensor) -> Result<Self> {
        let c = value.shape()[0];
        if value.shape() != [c, c] {
            return Err(Error::dim("pool_params", format!("value projection must be square, got {:?}", value.shape())));
        }
        if let Some(a) = &aggregation {
            if a.ndim() != 2 || a.shape()[0] != c {
                return Err(Error::dim(
                    "pool_params",
                    format!("aggregation projection {:?} does not take {c} channels", a.shape()),
                ));
            }
        }
        Ok(Self { aggregation, value })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, pool_size: usize, rng: &mut R) -> Self {
        Self {
            aggregation: (pool_size > 0).then(|| Tensor::xavier(channels, pool_size, rng)),
            value: Tensor::xavier(channels, channels, rng),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.aggregation.as_ref().map_or(0, |a| a.shape()[1])
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.aggregation.iter().chain(std::iter::once(&self.value)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.aggregation.iter_mut().chain(std::iter::once(&mut self.value)).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> PoolNet {
        PoolNet {
            aggregation: self.aggregation.as_ref().map(|a| g.param(a.clone())),
            value: g.param(self.value.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolNet {
    pub aggregation: Option<Var>,
    pub value: Var,
}

impl PoolNet {
    pub fn vars(&self) -> Vec<Var> {
        self.aggregation.into_iter().chain(std::iter::once(self.value)).collect()
    }
}

/// Coarse context vectors pooled from every non-polled, non-padded location.
#[derive(Debug, Clone)]
pub struct CoarseSet {
    /// `M x C`, absent when nothing was pooled.
    pub vectors: Option<Var>,
    /// `R x M` aggregation weights; each column is a softmax over the `R` remaining locations.
    pub weights: Option<Var>,
    /// Remaining locations in ascending order.
    pub remaining_indices: Vec<usize>,
}

impl CoarseSet {
    /// Number of coarse tokens.
    pub fn len(&self, g: &Graph) -> usize {
        self.vectors.map_or(0, |v| g.shape(v)[0])
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_none()
    }

    /// Row-major `R x M` weight values (empty when no pooling happened).
    pub fn weight_values(&self, g: &Graph) -> Vec<f64> {
        self.weights.map_or_else(Vec::new, |w| g.value(w).data().to_vec())
    }
}

/// Remaining set: every non-padded location the poll sampler did not pick, ascending.
pub fn remaining_locations(fm: &BoundFeatures, fine: &FineSet) -> Vec<usize> {
    let mut taken = vec![false; fm.len()];
    for &i in &fine.indices {
        taken[i] = true;
    }
    (0..fm.len()).filter(|&l| !taken[l] && !fm.is_padded(l)).collect()
}

pub fn pool_sample(g: &mut Graph, fm: &BoundFeatures, fine: &FineSet, net: &PoolNet) -> Result<CoarseSet> {
    let channels = g.shape(fm.features)[1];
    if g.shape(net.value) != [channels, channels] {
        return Err(Error::dim(
            "pool_sample",
            format!("value projection {:?} for {channels} channels", g.shape(net.value)),
        ));
    }
    let remaining_indices = remaining_locations(fm, fine);
    let Some(aggregation) = net.aggregation else {
        return Ok(CoarseSet {
            vectors: None,
            weights: None,
            remaining_indices,
        });
    };
    if g.shape(aggregation)[0] != channels {
        return Err(Error::dim(
            "pool_sample",
            format!("aggregation projection {:?} for {channels} channels", g.shape(aggregation)),
        ));
    }
    if remaining_indices.is_empty() {
        return Ok(CoarseSet {
            vectors: None,
            weights: None,
            remaining_indices,
        });
    }
    let remaining = g.gather_rows(fm.features, &remaining_indices)?;
    let logits = g.matmul(remaining, aggregation)?;
    let weights = g.softmax(logits, 0)?;
    let projected = g.matmul(remaining, net.value)?;
    let weights_t = g.transpose(weights)?;
    let vectors = g.matmul(weights_t, projected)?;
    Ok(CoarseSet {
        vectors: Some(vectors),
        weights: Some(weights),
        remaining_indices,
    })
}
