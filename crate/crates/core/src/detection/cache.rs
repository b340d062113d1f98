use super::scene::Scene;
use crate::encoder::{encode_image_layer1, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of labelled source scenes retained for deployment-time adaptation.
pub const SOURCE_CACHE_SIZE: usize = 5;

/// The labelled source scenes kept at deployment, with their layer-1 maps.
/// Immutable once built.
#[derive(Clone, Debug)]
pub struct SourceCache {
    scenes: Vec<Scene>,
    features: Vec<Tensor>,
}

impl SourceCache {
    /// Fails unless exactly [`SOURCE_CACHE_SIZE`] scenes are given.
    pub fn new(scenes: Vec<Scene>, w: &EncoderWeights) -> Result<Self> {
        if scenes.len() != SOURCE_CACHE_SIZE {
            return Err(Error::Config(format!(
                "source cache holds exactly {SOURCE_CACHE_SIZE} scenes, got {}",
                scenes.len()
            )));
        }
        let features = scenes
            .iter()
            .map(|s| encode_image_layer1(&s.image, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scenes, features })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, i: usize) -> &Scene {
        &self.scenes[i]
    }

    pub fn features(&self, i: usize) -> &Tensor {
        &self.features[i]
    }

    pub fn all_features(&self) -> &[Tensor] {
        &self.features
    }
}
