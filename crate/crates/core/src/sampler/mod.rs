//! Poll-and-pool feature abstraction.
//!
//! A scoring MLP ranks every grid location; the poll sampler keeps the top
//! `N = max(1, floor(alpha * L))` locations as fine tokens (layer-normalised and
//! scaled by their score so the ranking receives gradient), and the pool
//! sampler compresses the rest into `M` coarse tokens with softmax-normalised
//! aggregation weights. [`reverse_project`] maps encoded tokens back onto the
//! grid for dense outputs.

mod abstraction;
mod feature_map;
mod poll;
mod pool;
mod schedule;
mod scoring;

pub use abstraction::{build_abstract_set, reverse_project, AbstractSet};
pub use feature_map::{BoundFeatures, FeatureMap};
pub use poll::{poll_count, poll_sample, top_n, FineSet, LAYER_NORM_EPS};
pub use pool::{pool_sample, remaining_locations, CoarseSet, PoolNet, PoolParams};
pub use schedule::{sample_poll_ratio, PollRatioSchedule};
pub use scoring::{score_features, ScoreMap, ScoringNet, ScoringNetParams, SCORING_HIDDEN};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// All learnable tensors of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpParams {
    pub scoring: ScoringNetParams,
    pub pool: PoolParams,
}

impl PnpParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, pool_size: usize, rng: &mut R) -> Self {
        Self {
            scoring: ScoringNetParams::init(channels, rng),
            pool: PoolParams::init(channels, pool_size, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.scoring.tensors();
        v.extend(self.pool.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.scoring.tensors_mut();
        v.extend(self.pool.tensors_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph) -> PnpNet {
        PnpNet {
            scoring: self.scoring.bind(g),
            pool: self.pool.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PnpNet {
    pub scoring: ScoringNet,
    pub pool: PoolNet,
}

impl PnpNet {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.scoring.vars();
        v.extend(self.pool.vars());
        v
    }

    /// Scores, polls, pools and assembles the abstract set in one pass.
    pub fn abstract_features(
        &self,
        g: &mut Graph,
        fm: &BoundFeatures,
        alpha: f64,
    ) -> Result<AbstractSet> {
        let scores = score_features(g, fm, &self.scoring)?;
        let fine = poll_sample(g, fm, &scores, alpha)?;
        let coarse = pool_sample(g, fm, &fine, &self.pool)?;
        build_abstract_set(g, fm, fine, coarse, fm.positions.is_some())
    }
}
