//! Whole-model container: backbone, interaction and head weights plus the
//! shapes they were built with.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{
    extract_pyramid, interact, BackboneWeights, Embedding, FeaturePyramid, Frame,
    InteractionConfig, InteractionWeights,
};
use crate::error::Result;
use crate::head::HeadWeights;
use crate::numkit::layers::{join, ParamSet};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stem: usize,
    pub pyramid: [usize; 3],
    pub gn_groups: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub interaction: InteractionConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            stem: 8,
            pyramid: [16, 32, 64],
            gn_groups: 4,
            embed_dim: 32,
            head_hidden: 32,
            num_classes: 1,
            interaction: InteractionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub backbone: BackboneWeights,
    pub interaction: InteractionWeights,
    pub head: HeadWeights,
}

impl ModelWeights {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        Ok(Self {
            spec,
            backbone: BackboneWeights::zeros(spec.stem, spec.pyramid, spec.gn_groups),
            interaction: InteractionWeights::zeros(
                spec.interaction,
                spec.pyramid[1],
                spec.embed_dim,
            )?,
            head: HeadWeights::zeros(spec.pyramid, spec.head_hidden, spec.num_classes),
        })
    }

    /// Seeded initialization; the same seed and spec give identical weights.
    pub fn init(seed: u64, spec: ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneWeights::init(spec.stem, spec.pyramid, spec.gn_groups, &mut rng);
        let interaction =
            InteractionWeights::init(spec.interaction, spec.pyramid[1], spec.embed_dim, &mut rng)?;
        let head = HeadWeights::init(spec.pyramid, spec.head_hidden, spec.num_classes, &mut rng);
        Ok(Self {
            spec,
            backbone,
            interaction,
            head,
        })
    }

    pub fn pyramid(&self, frame: &Frame) -> Result<FeaturePyramid> {
        extract_pyramid(frame, &self.backbone)
    }

    /// `(E_ref, E_cur)` from two cached pyramids.
    pub fn embed_pair(
        &self,
        pyr_ref: &FeaturePyramid,
        pyr_cur: &FeaturePyramid,
    ) -> Result<(Embedding, Embedding)> {
        interact(
            pyr_ref.stride16(),
            pyr_cur.stride16(),
            &self.spec.interaction,
            &self.interaction,
        )
    }
}

pub fn init_weights(seed: u64, spec: ModelSpec) -> Result<ModelWeights> {
    ModelWeights::init(seed, spec)
}

impl ParamSet for ModelWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.interaction.visit(&join(prefix, "interaction"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.interaction.visit_mut(&join(prefix, "interaction"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
