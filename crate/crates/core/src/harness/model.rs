use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matching::{best_assignment, set_loss, Assignment};
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::sampler::{AbstractSet, FeatureMap, PnpNet, PnpParams};
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{decode, encode, TokenSequence, TransformerConfig, TransformerNet, TransformerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub transformer: TransformerConfig,
    /// Number of coarse tokens `M`.
    pub pool_size: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::desk(),
            pool_size: 4,
            num_classes: 3,
        }
    }
}

/// Poll-and-pool sampler, transformer and prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub pnp: PnpParams,
    pub transformer: TransformerParams,
    pub class_weight: Tensor,
    pub class_bias: Tensor,
    pub box_weight1: Tensor,
    pub box_bias1: Tensor,
    pub box_weight2: Tensor,
    pub box_bias2: Tensor,
}

/// [`DetectorParams`] bound to a graph.
#[derive(Debug, Clone)]
pub struct DetectorNet {
    pub pnp: PnpNet,
    pub transformer: TransformerNet,
    pub class_weight: Var,
    pub class_bias: Var,
    pub box_weight1: Var,
    pub box_bias1: Var,
    pub box_weight2: Var,
    pub box_bias2: Var,
}

pub struct DetectorOutput {
    pub abstract_set: AbstractSet,
    /// `D x (K + 1)`
    pub logits: Var,
    /// `D x 4`, squashed into `(0, 1)`.
    pub boxes: Var,
}

impl DetectorParams {
    pub fn init<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.transformer.validate()?;
        if config.num_classes == 0 {
            return Err(Error::contract("detector needs at least one class"));
        }
        let c = config.transformer.d_model;
        let pnp = PnpParams::init(c, config.pool_size, rng);
        let transformer = TransformerParams::init(config.transformer, rng)?;
        Ok(Self {
            class_weight: Tensor::xavier(c, config.num_classes + 1, rng),
            class_bias: Tensor::zeros(&[config.num_classes + 1]),
            box_weight1: Tensor::xavier(c, c, rng),
            box_bias1: Tensor::zeros(&[c]),
            box_weight2: Tensor::xavier(c, 4, rng),
            box_bias2: Tensor::zeros(&[4]),
            config,
            pnp,
            transformer,
        })
    }

    /// Every trainable tensor, in the same order as [`DetectorNet::vars`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.pnp.tensors();
        v.extend(self.transformer.leaves());
        v.extend([
            &self.class_weight,
            &self.class_bias,
            &self.box_weight1,
            &self.box_bias1,
            &self.box_weight2,
            &self.box_bias2,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.pnp.tensors_mut();
        v.extend(self.transformer.leaves_mut());
        v.extend([
            &mut self.class_weight,
            &mut self.class_bias,
            &mut self.box_weight1,
            &mut self.box_bias1,
            &mut self.box_weight2,
            &mut self.box_bias2,
        ]);
        v
    }

    pub fn bind(&self, g: &mut Graph) -> DetectorNet {
        DetectorNet {
            pnp: self.pnp.bind(g),
            transformer: self.transformer.bind(g),
            class_weight: g.param(self.class_weight.clone()),
            class_bias: g.param(self.class_bias.clone()),
            box_weight1: g.param(self.box_weight1.clone()),
            box_bias1: g.param(self.box_bias1.clone()),
            box_weight2: g.param(self.box_weight2.clone()),
            box_bias2: g.param(self.box_bias2.clone()),
        }
    }
}

impl DetectorNet {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.pnp.vars();
        v.extend(self.transformer.leaves().into_iter().copied());
        v.extend([
            self.class_weight,
            self.class_bias,
            self.box_weight1,
            self.box_bias1,
            self.box_weight2,
            self.box_bias2,
        ]);
        v
    }

    /// Abstracts the feature map at poll ratio `alpha`, encodes, decodes and
    /// applies the class and box heads.
    pub fn forward(&self, g: &mut Graph, fm: &FeatureMap, alpha: f64) -> Result<DetectorOutput> {
        let bound = fm.bind(g, false);
        let abstract_set = self.pnp.abstract_features(g, &bound, alpha)?;
        let seq = TokenSequence::from_abstract(g, &abstract_set)?;
        let memory = encode(g, &self.transformer, &seq)?;
        let hs = decode(g, &self.transformer, &memory)?;
        let logits = g.linear(hs, self.class_weight, self.class_bias)?;
        let hidden = g.linear(hs, self.box_weight1, self.box_bias1)?;
        let hidden = g.relu(hidden)?;
        let raw = g.linear(hidden, self.box_weight2, self.box_bias2)?;
        let boxes = g.sigmoid(raw)?;
        Ok(DetectorOutput {
            abstract_set,
            logits,
            boxes,
        })
    }
}

/// Forward pass plus matched loss on one scene.
pub struct SceneLoss {
    pub output: DetectorOutput,
    pub assignment: Assignment,
    pub loss: Var,
}

pub fn scene_loss(g: &mut Graph, net: &DetectorNet, scene: &SyntheticScene, alpha: f64) -> Result<SceneLoss> {
    let output = net.forward(g, &scene.feature_map, alpha)?;
    let (assignment, _) = best_assignment(g.value(output.logits), g.value(output.boxes), &scene.targets)?;
    let loss = set_loss(g, output.logits, output.boxes, &scene.targets, &assignment)?;
    Ok(SceneLoss {
        output,
        assignment,
        loss,
    })
}
