//! Weight-shared toy backbone and the cross-frame feature interaction that
//! produces stride-8 embeddings for a (reference, current) frame pair.

mod backbone;
mod interaction;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Tensor};

pub use backbone::{extract_pyramid, BackboneWeights};
pub use interaction::{
    attend, interact, interact_backward, interact_cached, InteractionCache, InteractionLayer,
    InteractionWeights,
};

/// Pyramid strides, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Stride of the embedding grid.
pub const EMBED_STRIDE: usize = 8;

/// An RGB frame, `height×width×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(Error::invalid(format!(
                "frame size {height}×{width} must be a non-zero multiple of 32"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(vec![self.height, self.width, 3], self.data.clone())
    }

    /// Embedding grid extent `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / EMBED_STRIDE, self.width / EMBED_STRIDE)
    }
}

/// Feature maps at strides 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn stride8(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn stride16(&self) -> &Tensor {
        &self.levels[1]
    }
}

/// Spatially flattened stride-8 embedding: row `r * w + c` is cell `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub h: usize,
    pub w: usize,
    pub e: Matrix,
}

impl Embedding {
    pub fn new(h: usize, w: usize, e: Matrix) -> Result<Self> {
        if e.rows() != h * w {
            return Err(Error::shape(format!("{} rows", h * w), e.rows()));
        }
        if e.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self { h, w, e })
    }

    pub fn channels(&self) -> usize {
        self.e.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// Per-frame convolution only; no cross-frame exchange.
    None,
    /// Dense attention over the tokens of both frames.
    Full,
    /// Sparse attention over `sample_points` learned offsets per head.
    Deformable,
}

impl std::str::FromStr for InteractionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "conv" => Ok(Self::None),
            "full" => Ok(Self::Full),
            "deformable" => Ok(Self::Deformable),
            _ => Err(Error::invalid(format!("unknown interaction mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for InteractionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Full => "full",
            Self::Deformable => "deformable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub mode: InteractionMode,
    pub heads: usize,
    pub sample_points: usize,
    pub layers: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            mode: InteractionMode::Deformable,
            heads: 2,
            sample_points: 4,
            layers: 1,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || self.sample_points == 0 || self.layers == 0 {
            return Err(Error::invalid(
                "heads, sample_points and layers must be at least 1",
            ));
        }
        if dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embedding dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}
