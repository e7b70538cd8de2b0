use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// An `H x W` grid of `C`-dimensional feature vectors stored as `L x C` rows
/// in row-major grid order (`l = i * W + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    features: Tensor,
    position_embeddings: Option<Tensor>,
    padding_mask: Option<Vec<bool>>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, features: Tensor) -> Result<Self> {
        let len = height * width;
        if len == 0 {
            return Err(Error::dim("feature_map", "grid must have at least one location"));
        }
        match *features.shape() {
            [l, _] if l == len => {}
            _ => {
                return Err(Error::dim(
                    "feature_map",
                    format!("{height}x{width} grid needs [{len}, C] features, got {:?}", features.shape()),
                ))
            }
        }
        Ok(Self {
            height,
            width,
            features,
            position_embeddings: None,
            padding_mask: None,
        })
    }

    pub fn with_positions(mut self, positions: Tensor) -> Result<Self> {
        if positions.shape() != self.features.shape() {
            return Err(Error::dim(
                "feature_map",
                format!(
                    "position embeddings {:?} do not match features {:?}",
                    positions.shape(),
                    self.features.shape()
                ),
            ));
        }
        self.position_embeddings = Some(positions);
        Ok(self)
    }

    /// `mask[l] == true` marks location `l` as padding.
    pub fn with_padding(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::dim(
                "feature_map",
                format!("padding mask has {} entries for {} locations", mask.len(), self.len()),
            ));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::contract("every location is padding"));
        }
        self.padding_mask = Some(mask);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn position_embeddings(&self) -> Option<&Tensor> {
        self.position_embeddings.as_ref()
    }

    pub fn padding_mask(&self) -> Option<&[bool]> {
        self.padding_mask.as_deref()
    }

    /// Records the map on `g`. Features become trainable leaves when `track_grad` is set.
    pub fn bind(&self, g: &mut Graph, track_grad: bool) -> BoundFeatures {
        let features = g.leaf(self.features.clone().with_requires_grad(track_grad));
        let positions = self.position_embeddings.clone().map(|p| g.constant(p));
        BoundFeatures {
            height: self.height,
            width: self.width,
            features,
            positions,
            padding: self.padding_mask.clone(),
        }
    }
}

/// A feature map whose tensors live on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundFeatures {
    pub height: usize,
    pub width: usize,
    /// `L x C`
    pub features: Var,
    pub positions: Option<Var>,
    pub padding: Option<Vec<bool>>,
}

impl BoundFeatures {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_padded(&self, l: usize) -> bool {
        self.padding.as_ref().is_some_and(|m| m[l])
    }

    /// Number of non-padded locations.
    pub fn valid_len(&self) -> usize {
        match &self.padding {
            Some(m) => m.iter().filter(|&&p| !p).count(),
            None => self.len(),
        }
    }
}
