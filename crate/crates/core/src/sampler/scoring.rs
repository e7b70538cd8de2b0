use rand::Rng;

use super::BoundFeatures;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Hidden width of the scoring MLP.
pub const SCORING_HIDDEN: usize = 256;

/// Two-layer `C -> 256 -> 1` MLP with a ReLU in between and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringNetParams {
    pub weight1: Tensor,
    pub bias1: Tensor,
    pub weight2: Tensor,
    pub bias2: Tensor,
}

impl ScoringNetParams {
    pub fn new(weight1: Tensor, bias1: Tensor, weight2: Tensor, bias2: Tensor) -> Result<Self> {
        let channels = weight1.shape()[0];
        let ok = weight1.shape() == [channels, SCORING_HIDDEN]
            && bias1.shape() == [SCORING_HIDDEN]
            && weight2.shape() == [SCORING_HIDDEN, 1]
            && bias2.shape() == [1];
        if !ok {
            return Err(Error::dim(
                "scoring_net",
                format!(
                    "expected [C, {h}], [{h}], [{h}, 1], [1]; got {:?}, {:?}, {:?}, {:?}",
                    weight1.shape(),
                    bias1.shape(),
                    weight2.shape(),
                    bias2.shape(),
                    h = SCORING_HIDDEN
                ),
            ));
        }
        Ok(Self {
            weight1,
            bias1,
            weight2,
            bias2,
        })
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            weight1: Tensor::zeros(&[channels, SCORING_HIDDEN]),
            bias1: Tensor::zeros(&[SCORING_HIDDEN]),
            weight2: Tensor::zeros(&[SCORING_HIDDEN, 1]),
            bias2: Tensor::zeros(&[1]),
        }
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            weight1: Tensor::xavier(channels, SCORING_HIDDEN, rng),
            bias1: Tensor::zeros(&[SCORING_HIDDEN]),
            weight2: Tensor::xavier(SCORING_HIDDEN, 1, rng),
            bias2: Tensor::zeros(&[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight1.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight1, &self.bias1, &self.weight2, &self.bias2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight1, &mut self.bias1, &mut self.weight2, &mut self.bias2]
    }

    pub fn bind(&self, g: &mut Graph) -> ScoringNet {
        ScoringNet {
            weight1: g.param(self.weight1.clone()),
            bias1: g.param(self.bias1.clone()),
            weight2: g.param(self.weight2.clone()),
            bias2: g.param(self.bias2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoringNet {
    pub weight1: Var,
    pub bias1: Var,
    pub weight2: Var,
    pub bias2: Var,
}

impl ScoringNet {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight1, self.bias1, self.weight2, self.bias2]
    }
}

/// Per-location informativeness scores.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    /// Raw `L x 1` scores on the graph.
    pub scores: Var,
    /// Values used for ranking: padded locations hold `f64::MIN`.
    pub ranking: Vec<f64>,
}

/// Runs the scoring MLP pointwise over every location.
pub fn score_features(g: &mut Graph, fm: &BoundFeatures, net: &ScoringNet) -> Result<ScoreMap> {
    let channels = g.shape(fm.features)[1];
    let expected = g.shape(net.weight1)[0];
    if channels != expected {
        return Err(Error::dim(
            "score_features",
            format!("features have {channels} channels, scoring net expects {expected}"),
        ));
    }
    let hidden = g.linear(fm.features, net.weight1, net.bias1)?;
    let hidden = g.relu(hidden)?;
    let scores = g.linear(hidden, net.weight2, net.bias2)?;
    let ranking = g
        .value(scores)
        .data()
        .iter()
        .enumerate()
        .map(|(l, &s)| if fm.is_padded(l) { f64::MIN } else { s })
        .collect();
    Ok(ScoreMap { scores, ranking })
}
