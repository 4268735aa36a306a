//! Dynamic-convolution instance masks: a per-instance three-layer `1×1`
//! network, its parameters predicted at the instance cell, applied to a
//! shared frame-resolution feature map plus relative coordinates.

use super::{Detection, HeadParams, HeadWeights};
use crate::embed::{Frame, EMBED_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numkit::layers::Linear;
use crate::numkit::{resize_bilinear, sigmoid, Matrix, Tensor};

pub const MASK_CHANNELS: usize = 8;
pub const DYN_WIDTH: usize = 8;
const DYN_IN: usize = MASK_CHANNELS + 2;
/// Weights and biases of the `10 → 8 → 8 → 1` dynamic layers.
pub const DYN_PARAMS: usize =
    DYN_IN * DYN_WIDTH + DYN_WIDTH + DYN_WIDTH * DYN_WIDTH + DYN_WIDTH + DYN_WIDTH + 1;

const W1: usize = 0;
const B1: usize = W1 + DYN_IN * DYN_WIDTH;
const W2: usize = B1 + DYN_WIDTH;
const B2: usize = W2 + DYN_WIDTH * DYN_WIDTH;
const W3: usize = B2 + DYN_WIDTH;
const B3: usize = W3 + DYN_WIDTH;

/// Binary per-pixel mask at frame resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl InstanceMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(h * w, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.w + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Tight pixel box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| {
            BBox::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            )
        })
    }

    /// Intersection over union; zero when both are empty.
    pub fn iou(&self, other: &InstanceMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Pixels whose centers fall inside the box.
    pub fn from_box(bbox: &BBox, h: usize, w: usize) -> Self {
        let mut m = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px >= bbox.x && px < bbox.x2() && py >= bbox.y && py < bbox.y2() {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// Stride-8 cells where more than half of the pixels are set.
    pub fn majority_cells(&self) -> Vec<f64> {
        let s = EMBED_STRIDE;
        let (rows, cols) = (self.h / s, self.w / s);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut n = 0;
                for y in r * s..(r + 1) * s {
                    for x in c * s..(c + 1) * s {
                        n += self.data[y * self.w + x] as usize;
                    }
                }
                if 2 * n > s * s {
                    out[r * cols + c] = 1.0;
                }
            }
        }
        out
    }
}

/// Mask features at frame resolution, with the branch input kept for
/// backward.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFeatures {
    pub map: Tensor,
    input: Tensor,
}

/// Upsamples stride-8 features to the frame, appends RGB and projects to
/// [`MASK_CHANNELS`].
pub fn mask_features(fused8: &Tensor, frame: &Frame, w: &HeadWeights) -> Result<MaskFeatures> {
    let (fh, fw) = (frame.height(), frame.width());
    let up = resize_bilinear(fused8, fh, fw)?;
    let c = up.shape()[2];
    let mut input = Vec::with_capacity(fh * fw * (c + 3));
    for (px, rgb) in up.data().chunks(c).zip(frame.data().chunks(3)) {
        input.extend_from_slice(px);
        input.extend_from_slice(rgb);
    }
    let input = Tensor::new(vec![fh, fw, c + 3], input)?;
    let map = w.mask_branch.forward_map(&input)?;
    Ok(MaskFeatures { map, input })
}

/// `((x + 0.5 - cx) / 8, (y + 0.5 - cy) / 8)` per pixel.
pub fn relative_coords(h: usize, w: usize, cx: f64, cy: f64) -> Tensor {
    let s = EMBED_STRIDE as f64;
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push((x as f64 + 0.5 - cx) / s);
            data.push((y as f64 + 0.5 - cy) / s);
        }
    }
    Tensor::from_raw(vec![h, w, 2], data)
}

/// Controller output at one stride-8 cell.
pub fn dynamic_params(fused8: &Tensor, cell: (usize, usize), w: &HeadWeights) -> Result<Vec<f64>> {
    let (h, wd, c) = fused8.hwc()?;
    if cell.0 >= h || cell.1 >= wd {
        return Err(Error::invalid(format!(
            "cell {cell:?} outside {h}×{wd} grid"
        )));
    }
    let row = &fused8.data()[(cell.0 * wd + cell.1) * c..][..c];
    Ok(w.controller
        .forward(&Matrix::new(1, c, row.to_vec())?)?
        .into_data())
}

/// Hidden activations of the dynamic layers.
pub struct MaskCache {
    coords: Tensor,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

pub fn mask_logits_cached(
    feat: &MaskFeatures,
    params: &[f64],
    cx: f64,
    cy: f64,
) -> Result<(Tensor, MaskCache)> {
    if params.len() != DYN_PARAMS {
        return Err(Error::shape(DYN_PARAMS, params.len()));
    }
    let (h, w, _) = feat.map.hwc()?;
    let coords = relative_coords(h, w, cx, cy);
    let n = h * w;
    let mut h1 = vec![0.0; n * DYN_WIDTH];
    let mut h2 = vec![0.0; n * DYN_WIDTH];
    let mut out = vec![0.0; n];
    let mut x = [0.0; DYN_IN];
    for i in 0..n {
        x[..MASK_CHANNELS].copy_from_slice(&feat.map.data()[i * MASK_CHANNELS..][..MASK_CHANNELS]);
        x[MASK_CHANNELS..].copy_from_slice(&coords.data()[i * 2..][..2]);
        let a = &mut h1[i * DYN_WIDTH..][..DYN_WIDTH];
        for (j, o) in a.iter_mut().enumerate() {
            let mut s = params[B1 + j];
            for (k, xv) in x.iter().enumerate() {
                s += xv * params[W1 + k * DYN_WIDTH + j];
            }
            *o = s.max(0.0);
        }
        let b = &mut h2[i * DYN_WIDTH..][..DYN_WIDTH];
        for (j, o) in b.iter_mut().enumerate() {
            let mut s = params[B2 + j];
            for (k, av) in a.iter().enumerate() {
                s += av * params[W2 + k * DYN_WIDTH + j];
            }
            *o = s.max(0.0);
        }
        let mut s = params[B3];
        for (k, bv) in b.iter().enumerate() {
            s += bv * params[W3 + k];
        }
        out[i] = s;
    }
    Ok((
        Tensor::from_raw(vec![h, w, 1], out),
        MaskCache { coords, h1, h2 },
    ))
}

pub fn mask_logits(feat: &MaskFeatures, params: &[f64], cx: f64, cy: f64) -> Result<Tensor> {
    Ok(mask_logits_cached(feat, params, cx, cy)?.0)
}

/// Binarized mask for one detection.
pub fn mask_head(
    fused8: &Tensor,
    frame: &Frame,
    det: &Detection,
    params: &HeadParams,
) -> Result<InstanceMask> {
    let feat = mask_features(fused8, frame, &params.weights)?;
    mask_from_features(&feat, fused8, det, params)
}

/// [`mask_head`] with precomputed frame features, for several detections
/// in one frame.
pub fn mask_from_features(
    feat: &MaskFeatures,
    fused8: &Tensor,
    det: &Detection,
    params: &HeadParams,
) -> Result<InstanceMask> {
    let dynp = dynamic_params(fused8, det.embedding_cell, &params.weights)?;
    let (cx, cy) = det.bbox.center();
    let logits = mask_logits(feat, &dynp, cx, cy)?;
    let t = params.thresholds.mask_binarize;
    let data = logits
        .data()
        .iter()
        .map(|&l| (sigmoid(l) >= t) as u8)
        .collect();
    let (h, w, _) = feat.map.hwc()?;
    InstanceMask::new(h, w, data)
}

/// Gradients of the mask branch and controller given `d logits`.
#[allow(clippy::too_many_arguments)]
pub fn mask_backward(
    fused8: &Tensor,
    feat: &MaskFeatures,
    cell: (usize, usize),
    params: &[f64],
    cache: &MaskCache,
    d_logits: &[f64],
    w: &HeadWeights,
) -> Result<(Linear, Linear)> {
    let (h, wd, _) = feat.map.hwc()?;
    let n = h * wd;
    if d_logits.len() != n {
        return Err(Error::shape(n, d_logits.len()));
    }
    let mut dp = vec![0.0; DYN_PARAMS];
    let mut dfeat = vec![0.0; n * MASK_CHANNELS];
    let mut x = [0.0; DYN_IN];
    for i in 0..n {
        let g = d_logits[i];
        if g == 0.0 {
            continue;
        }
        x[..MASK_CHANNELS].copy_from_slice(&feat.map.data()[i * MASK_CHANNELS..][..MASK_CHANNELS]);
        x[MASK_CHANNELS..].copy_from_slice(&cache.coords.data()[i * 2..][..2]);
        let a = &cache.h1[i * DYN_WIDTH..][..DYN_WIDTH];
        let b = &cache.h2[i * DYN_WIDTH..][..DYN_WIDTH];
        dp[B3] += g;
        let mut db = [0.0; DYN_WIDTH];
        for k in 0..DYN_WIDTH {
            dp[W3 + k] += g * b[k];
            if b[k] > 0.0 {
                db[k] = g * params[W3 + k];
            }
        }
        let mut da = [0.0; DYN_WIDTH];
        for j in 0..DYN_WIDTH {
            dp[B2 + j] += db[j];
            for k in 0..DYN_WIDTH {
                dp[W2 + k * DYN_WIDTH + j] += a[k] * db[j];
                da[k] += params[W2 + k * DYN_WIDTH + j] * db[j];
            }
        }
        for k in 0..DYN_WIDTH {
            if a[k] <= 0.0 {
                da[k] = 0.0;
            }
        }
        let df = &mut dfeat[i * MASK_CHANNELS..][..MASK_CHANNELS];
        for j in 0..DYN_WIDTH {
            dp[B1 + j] += da[j];
            for k in 0..DYN_IN {
                dp[W1 + k * DYN_WIDTH + j] += x[k] * da[j];
                if k < MASK_CHANNELS {
                    df[k] += params[W1 + k * DYN_WIDTH + j] * da[j];
                }
            }
        }
    }
    let (_, _, c) = fused8.hwc()?;
    let row = &fused8.data()[(cell.0 * fused8.shape()[1] + cell.1) * c..][..c];
    let (_, g_ctrl) = w.controller.backward(
        &Matrix::new(1, c, row.to_vec())?,
        &Matrix::new(1, DYN_PARAMS, dp)?,
    );
    let (_, g_branch) = w.mask_branch.backward_map(
        &feat.input,
        &Tensor::new(vec![h, wd, MASK_CHANNELS], dfeat)?,
    )?;
    Ok((g_branch, g_ctrl))
}
