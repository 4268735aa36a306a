use rand::Rng;

use super::{FeaturePyramid, Frame};
use crate::error::{Error, Result};
use crate::numkit::layers::{join, relu_in_place, Conv, ParamSet};
use crate::numkit::{group_norm, Tensor};

const GN_EPS: f64 = 1e-5;

/// Five stride-2 `3×3` convolutions (strides 2, 4, 8, 16, 32), each followed
/// by group norm and ReLU. The last three outputs form the pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub stages: Vec<Conv>,
    pub gn_groups: usize,
}

impl BackboneWeights {
    /// Stage widths: two stem stages, then the pyramid widths.
    pub fn widths(stem: usize, pyramid: [usize; 3]) -> [usize; 5] {
        [stem, stem, pyramid[0], pyramid[1], pyramid[2]]
    }

    pub fn zeros(stem: usize, pyramid: [usize; 3], gn_groups: usize) -> Self {
        let w = Self::widths(stem, pyramid);
        let mut cin = 3;
        let stages = w
            .iter()
            .map(|&cout| {
                let c = Conv::zeros(3, cin, cout, 2);
                cin = cout;
                c
            })
            .collect();
        Self { stages, gn_groups }
    }

    pub fn init<R: Rng>(stem: usize, pyramid: [usize; 3], gn_groups: usize, rng: &mut R) -> Self {
        let w = Self::widths(stem, pyramid);
        let mut cin = 3;
        let stages = w
            .iter()
            .map(|&cout| {
                let c = Conv::init(3, cin, cout, 2, rng);
                cin = cout;
                c
            })
            .collect();
        Self { stages, gn_groups }
    }

    pub fn pyramid_channels(&self) -> [usize; 3] {
        [
            self.stages[2].cout(),
            self.stages[3].cout(),
            self.stages[4].cout(),
        ]
    }
}

impl ParamSet for BackboneWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

/// Runs the backbone. The same weights serve both frames of a pair.
pub fn extract_pyramid(frame: &Frame, weights: &BackboneWeights) -> Result<FeaturePyramid> {
    if weights.stages.len() != 5 {
        return Err(Error::invalid("backbone needs exactly five stages"));
    }
    let mut x = frame.to_tensor();
    let mut levels = Vec::with_capacity(3);
    for (i, stage) in weights.stages.iter().enumerate() {
        let y = stage.forward(&x)?;
        let mut y = group_norm(&y, weights.gn_groups.min(stage.cout()), GN_EPS)?;
        relu_in_place(&mut y);
        if i >= 2 {
            levels.push(y.clone());
        }
        x = y;
    }
    Ok(FeaturePyramid { levels })
}
