//! Unified head: prior fusion, an anchor-free box branch shared across
//! pyramid levels, and a dynamic-convolution mask branch.

mod mask;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::TargetPrior;
use crate::embed::{FeaturePyramid, EMBED_STRIDE, STRIDES};
use crate::error::{Error, Result};
use crate::geometry::{cell_of, BBox};
use crate::numkit::layers::{
    add_scaled, flatten, join, relu_backward_in_place, relu_in_place, Conv, Linear, ParamSet,
};
use crate::numkit::{resize_bilinear, resize_bilinear_adjoint, sigmoid, Tensor};

pub use mask::{
    dynamic_params, mask_backward, mask_features, mask_from_features, mask_head, mask_logits,
    mask_logits_cached, relative_coords, InstanceMask, MaskCache, MaskFeatures, DYN_PARAMS,
    DYN_WIDTH, MASK_CHANNELS,
};

/// Raw log-size outputs are clamped to this magnitude before `exp`.
pub const LOG_SIZE_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadThresholds {
    pub score: f64,
    pub nms_iou: f64,
    pub mask_binarize: f64,
}

impl Default for HeadThresholds {
    fn default() -> Self {
        Self {
            score: 0.3,
            nms_iou: 0.65,
            mask_binarize: 0.5,
        }
    }
}

impl HeadThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score", self.score),
            ("nms_iou", self.nms_iou),
            ("mask_binarize", self.mask_binarize),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!(
                    "{name} threshold {v} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Per-level `1×1` stems into a shared `3×3` tower, then a `1×1` predictor
/// with channels `[class logits.., objectness, dx, dy, log w, log h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub num_classes: usize,
    pub stems: Vec<Linear>,
    pub tower: Conv,
    pub pred: Linear,
    /// Frame-resolution mask features from stride-8 features plus RGB.
    pub mask_branch: Linear,
    /// Dynamic mask-layer parameters from stride-8 features.
    pub controller: Linear,
}

impl HeadWeights {
    pub fn zeros(level_channels: [usize; 3], hidden: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            stems: level_channels
                .iter()
                .map(|&c| Linear::zeros(c, hidden))
                .collect(),
            tower: Conv::zeros(3, hidden, hidden, 1),
            pred: Linear::zeros(hidden, num_classes + 5),
            mask_branch: Linear::zeros(level_channels[0] + 3, MASK_CHANNELS),
            controller: Linear::zeros(level_channels[0], DYN_PARAMS),
        }
    }

    pub fn init<R: Rng>(
        level_channels: [usize; 3],
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut pred = Linear::init(hidden, num_classes + 5, rng);
        pred.weight.scale(0.1);
        pred.bias.data_mut()[num_classes] = -4.0;
        // boxes start about two cells wide
        pred.bias.data_mut()[num_classes + 3] = std::f64::consts::LN_2;
        pred.bias.data_mut()[num_classes + 4] = std::f64::consts::LN_2;
        let mut controller = Linear::init(level_channels[0], DYN_PARAMS, rng);
        controller.weight.scale(0.5);
        Self {
            num_classes,
            stems: level_channels
                .iter()
                .map(|&c| Linear::init(c, hidden, rng))
                .collect(),
            tower: Conv::init(3, hidden, hidden, 1, rng),
            pred,
            mask_branch: Linear::init(level_channels[0] + 3, MASK_CHANNELS, rng),
            controller,
        }
    }

    pub fn hidden(&self) -> usize {
        self.tower.cout()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.stems.iter().map(|s| s.fan_in()).collect()
    }

    /// Zeroed weights of the same shape.
    pub fn zeros_like(&self) -> Self {
        let lc = self.level_channels();
        Self::zeros([lc[0], lc[1], lc[2]], self.hidden(), self.num_classes)
    }
}

impl ParamSet for HeadWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, s) in self.stems.iter().enumerate() {
            s.visit(&join(prefix, &format!("stem{i}")), f);
        }
        self.tower.visit(&join(prefix, "tower"), f);
        self.pred.visit(&join(prefix, "pred"), f);
        self.mask_branch.visit(&join(prefix, "mask_branch"), f);
        self.controller.visit(&join(prefix, "controller"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, s) in self.stems.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stem{i}")), f);
        }
        self.tower.visit_mut(&join(prefix, "tower"), f);
        self.pred.visit_mut(&join(prefix, "pred"), f);
        self.mask_branch.visit_mut(&join(prefix, "mask_branch"), f);
        self.controller.visit_mut(&join(prefix, "controller"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weights: HeadWeights,
    pub thresholds: HeadThresholds,
}

/// One pyramid level after the prior has been added.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub f: Tensor,
    pub stride: usize,
}

/// `f + p` with `p` broadcast over channels. Zero prior entries leave the
/// feature untouched bit for bit.
pub fn fuse(f: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (h, w, c) = f.hwc()?;
    let (ph, pw, pc) = p.hwc()?;
    if (ph, pw, pc) != (h, w, 1) {
        return Err(Error::shape(
            format!("{h}×{w}×1 prior"),
            format!("{ph}×{pw}×{pc}"),
        ));
    }
    let mut out = f.clone();
    for (px, &pv) in out.data_mut().chunks_mut(c).zip(p.data()) {
        if pv != 0.0 {
            px.iter_mut().for_each(|v| *v += pv);
        }
    }
    Ok(out)
}

/// Resizes the prior to every level and fuses.
pub fn fuse_pyramid(pyramid: &FeaturePyramid, prior: &TargetPrior) -> Result<Vec<FusedFeature>> {
    pyramid
        .levels
        .iter()
        .zip(STRIDES)
        .map(|(f, stride)| {
            let (h, w, _) = f.hwc()?;
            let p = if prior.is_zero() {
                Tensor::zeros(&[h, w, 1])
            } else {
                resize_bilinear(&prior.p, h, w)?
            };
            Ok(FusedFeature {
                f: fuse(f, &p)?,
                stride,
            })
        })
        .collect()
}

/// The pyramid as head input without any prior.
pub fn unfused(pyramid: &FeaturePyramid) -> Vec<FusedFeature> {
    pyramid
        .levels
        .iter()
        .zip(STRIDES)
        .map(|(f, stride)| FusedFeature {
            f: f.clone(),
            stride,
        })
        .collect()
}

/// Gradient with respect to the `ph×pw×1` prior given gradients with
/// respect to each fused level.
pub fn fuse_backward(d_fused: &[Tensor], ph: usize, pw: usize) -> Result<Tensor> {
    let mut dp = Tensor::zeros(&[ph, pw, 1]);
    for d in d_fused {
        let (h, w, c) = d.hwc()?;
        let sums: Vec<f64> = d.data().chunks(c).map(|px| px.iter().sum()).collect();
        let back = resize_bilinear_adjoint(&Tensor::new(vec![h, w, 1], sums)?, ph, pw)?;
        dp.axpy(1.0, &back);
    }
    Ok(dp)
}

/// Raw predictor output for one level, `h×w×(classes + 5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub raw: Tensor,
}

impl LevelOutput {
    pub fn h(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let c = self.raw.shape()[2];
        &self.raw.data()[(row * self.w() + col) * c..][..c]
    }
}

pub struct HeadCache {
    inputs: Vec<Tensor>,
    stem: Vec<Tensor>,
    tower: Vec<Tensor>,
}

pub fn head_forward(
    levels: &[FusedFeature],
    w: &HeadWeights,
) -> Result<(Vec<LevelOutput>, HeadCache)> {
    if levels.len() != w.stems.len() {
        return Err(Error::shape(
            format!("{} levels", w.stems.len()),
            levels.len(),
        ));
    }
    let mut out = Vec::with_capacity(levels.len());
    let mut cache = HeadCache {
        inputs: Vec::new(),
        stem: Vec::new(),
        tower: Vec::new(),
    };
    for (lvl, stem) in levels.iter().zip(&w.stems) {
        let mut s = stem.forward_map(&lvl.f)?;
        relu_in_place(&mut s);
        let mut t = w.tower.forward(&s)?;
        relu_in_place(&mut t);
        let raw = w.pred.forward_map(&t)?;
        out.push(LevelOutput {
            stride: lvl.stride,
            raw,
        });
        cache.inputs.push(lvl.f.clone());
        cache.stem.push(s);
        cache.tower.push(t);
    }
    Ok((out, cache))
}

/// Returns `(weight gradients, d fused level)`; the mask entries of the
/// weight gradient stay zero.
pub fn head_backward(
    cache: &HeadCache,
    w: &HeadWeights,
    d_raw: &[Tensor],
) -> Result<(HeadWeights, Vec<Tensor>)> {
    let mut grads = w.zeros_like();
    let mut d_in = Vec::with_capacity(d_raw.len());
    for (l, d) in d_raw.iter().enumerate() {
        let (mut dt, gp) = w.pred.backward_map(&cache.tower[l], d)?;
        add_scaled(&mut grads.pred, &flatten(&gp), 1.0);
        relu_backward_in_place(&cache.tower[l], &mut dt);
        let (mut ds, gt) = w.tower.backward(&cache.stem[l], &dt)?;
        add_scaled(&mut grads.tower, &flatten(&gt), 1.0);
        relu_backward_in_place(&cache.stem[l], &mut ds);
        let (dx, gs) = w.stems[l].backward_map(&cache.inputs[l], &ds)?;
        add_scaled(&mut grads.stems[l], &flatten(&gs), 1.0);
        d_in.push(dx);
    }
    Ok((grads, d_in))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// 1-based class id.
    pub class_id: u32,
    /// Stride-8 cell holding the box center.
    pub embedding_cell: (usize, usize),
    /// Pyramid level and cell the box was decoded from.
    pub level: usize,
    pub origin_cell: (usize, usize),
    pub mask: Option<InstanceMask>,
}

impl Detection {
    /// `(cx, cy, w, h)`
    pub fn center_form(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.bbox.center();
        (cx, cy, self.bbox.w, self.bbox.h)
    }
}

/// `cx = (col + σ(dx))·s`, `w = exp(pw)·s` and likewise for rows.
pub fn decode_box(row: usize, col: usize, stride: usize, reg: [f64; 4]) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + sigmoid(reg[0])) * s;
    let cy = (row as f64 + sigmoid(reg[1])) * s;
    let w = reg[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    let h = reg[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    BBox::from_center(cx, cy, w, h)
}

/// Inverse of [`decode_box`]; `None` when the center is not strictly inside
/// the cell or the size is not positive.
pub fn encode_box(row: usize, col: usize, stride: usize, bbox: &BBox) -> Option<[f64; 4]> {
    let s = stride as f64;
    let (cx, cy) = bbox.center();
    let fx = cx / s - col as f64;
    let fy = cy / s - row as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0 && bbox.w > 0.0 && bbox.h > 0.0) {
        return None;
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    Some([logit(fx), logit(fy), (bbox.w / s).ln(), (bbox.h / s).ln()])
}

/// Every cell of every level as a candidate, before thresholding.
pub fn decode_all(
    outputs: &[LevelOutput],
    num_classes: usize,
    grid: (usize, usize),
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (level, out) in outputs.iter().enumerate() {
        for row in 0..out.h() {
            for col in 0..out.w() {
                let v = out.cell(row, col);
                let (mut best, mut best_logit) = (0, v[0]);
                for (k, &x) in v.iter().enumerate().take(num_classes).skip(1) {
                    if x > best_logit {
                        best = k;
                        best_logit = x;
                    }
                }
                let score = sigmoid(best_logit) * sigmoid(v[num_classes]);
                let r = &v[num_classes + 1..num_classes + 5];
                let bbox = decode_box(row, col, out.stride, [r[0], r[1], r[2], r[3]]);
                dets.push(Detection {
                    bbox,
                    score,
                    class_id: best as u32 + 1,
                    embedding_cell: embedding_cell(&bbox, grid),
                    level,
                    origin_cell: (row, col),
                    mask: None,
                });
            }
        }
    }
    dets
}

/// Stride-8 cell of the box center, clamped into the grid.
pub fn embedding_cell(bbox: &BBox, grid: (usize, usize)) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let s = EMBED_STRIDE as f64;
    let x = cx.clamp(0.0, grid.1 as f64 * s - 1e-9);
    let y = cy.clamp(0.0, grid.0 as f64 * s - 1e-9);
    cell_of(x, y, EMBED_STRIDE, grid.0, grid.1).unwrap_or((0, 0))
}

/// Class-aware greedy suppression; input order breaks score ties.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) < iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

/// Full detection pass over fused levels; level 0 must be stride 8.
pub fn detect(levels: &[FusedFeature], params: &HeadParams) -> Result<Vec<Detection>> {
    let (out, _) = head_forward(levels, &params.weights)?;
    let grid = (out[0].h(), out[0].w());
    let cands: Vec<Detection> = decode_all(&out, params.weights.num_classes, grid)
        .into_iter()
        .filter(|d| d.score >= params.thresholds.score)
        .collect();
    Ok(nms(cands, params.thresholds.nms_iou))
}

/// Highest score wins; ties go to the lower row-major embedding cell.
pub fn pick_top1(dets: &[Detection]) -> Result<&Detection> {
    dets.iter()
        .reduce(|best, d| {
            if d.score > best.score
                || (d.score == best.score && d.embedding_cell < best.embedding_cell)
            {
                d
            } else {
                best
            }
        })
        .ok_or_else(|| Error::NoTarget("no detection above threshold".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::layers::param_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(score: f64, cell: (usize, usize), bbox: BBox) -> Detection {
        Detection {
            bbox,
            score,
            class_id: 1,
            embedding_cell: cell,
            level: 0,
            origin_cell: cell,
            mask: None,
        }
    }

    #[test]
    fn fuse_examples() {
        let f = Tensor::full(&[2, 2, 3], 0.5);
        let p = Tensor::full(&[2, 2, 1], 0.25);
        assert!(fuse(&f, &p).unwrap().data().iter().all(|&v| v == 0.75));
        let z = Tensor::zeros(&[2, 2, 1]);
        let neg = Tensor::new(vec![1, 1, 2], vec![-0.0, 1.0]).unwrap();
        let out = fuse(&neg, &Tensor::zeros(&[1, 1, 1])).unwrap();
        assert_eq!(out.data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(fuse(&f, &z).unwrap(), f);
        assert!(fuse(&f, &Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn decode_example_and_round_trip() {
        let b = decode_box(2, 3, 8, [0.0; 4]);
        assert_eq!(b.center(), (28.0, 20.0));
        assert_eq!((b.w, b.h), (8.0, 8.0));
        let raw = [0.3, -1.2, 0.7, -0.4];
        let back = encode_box(5, 1, 16, &decode_box(5, 1, 16, raw)).unwrap();
        for (a, b) in raw.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_keeps_one_of_two_identical_boxes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(vec![det(0.8, (0, 0), b), det(0.9, (0, 1), b)], 0.65);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn pick_top1_examples() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        let d = vec![
            det(0.3, (0, 0), b),
            det(0.9, (1, 0), b),
            det(0.5, (2, 0), b),
        ];
        assert_eq!(pick_top1(&d).unwrap().score, 0.9);
        assert_eq!(pick_top1(&d[..1]).unwrap(), &d[0]);
        let tie = vec![det(0.7, (2, 0), b), det(0.7, (0, 1), b)];
        assert_eq!(pick_top1(&tie).unwrap().embedding_cell, (0, 1));
        assert!(matches!(pick_top1(&[]), Err(Error::NoTarget(_))));
    }

    fn levels(rng: &mut ChaCha8Rng) -> Vec<FusedFeature> {
        [(8, 8, 16, 8), (4, 4, 32, 16), (2, 2, 64, 32)]
            .iter()
            .map(|&(h, w, c, s)| FusedFeature {
                f: Tensor::new(
                    vec![h, w, c],
                    (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                stride: s,
            })
            .collect()
    }

    #[test]
    fn very_negative_logits_give_no_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = HeadWeights::init([16, 32, 64], 32, 1, &mut rng);
        w.pred.weight.fill(0.0);
        w.pred.bias.data_mut()[0] = -50.0;
        w.pred.bias.data_mut()[1] = -50.0;
        let params = HeadParams {
            weights: w,
            thresholds: HeadThresholds::default(),
        };
        assert!(detect(&levels(&mut rng), &params).unwrap().is_empty());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = HeadWeights::init([16, 32, 64], 8, 1, &mut rng);
        let lv = levels(&mut rng);
        let (out, cache) = head_forward(&lv, &w).unwrap();
        let probes: Vec<Tensor> = out
            .iter()
            .map(|o| {
                Tensor::new(
                    o.raw.shape().to_vec(),
                    (0..o.raw.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let loss = |w: &HeadWeights, lv: &[FusedFeature]| -> f64 {
            let (o, _) = head_forward(lv, w).unwrap();
            o.iter()
                .zip(&probes)
                .map(|(a, b)| {
                    a.raw
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                })
                .sum()
        };
        let (g, d_in) = head_backward(&cache, &w, &probes).unwrap();
        let gflat = flatten(&g);
        let base = flatten(&w);
        let eps = 1e-6;
        for idx in (0..param_count(&w)).step_by(37) {
            let mut wp = w.clone();
            let mut d = vec![0.0; base.len()];
            d[idx] = eps;
            add_scaled(&mut wp, &d, 1.0);
            let mut wm = w.clone();
            add_scaled(&mut wm, &d, -1.0);
            let fd = (loss(&wp, &lv) - loss(&wm, &lv)) / (2.0 * eps);
            assert!(
                (fd - gflat[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: {fd} vs {}",
                gflat[idx]
            );
        }
        for (l, d) in d_in.iter().enumerate() {
            for idx in (0..d.len()).step_by(29) {
                let mut lp = lv.clone();
                lp[l].f.data_mut()[idx] += eps;
                let mut lm = lv.clone();
                lm[l].f.data_mut()[idx] -= eps;
                let fd = (loss(&w, &lp) - loss(&w, &lm)) / (2.0 * eps);
                assert!((fd - d.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn fuse_backward_is_adjoint_of_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Tensor::new(
            vec![8, 8, 1],
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let grads: Vec<Tensor> = [(8, 16), (4, 32), (2, 64)]
            .iter()
            .map(|&(s, c)| {
                Tensor::new(
                    vec![s, s, c],
                    (0..s * s * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let dp = fuse_backward(&grads, 8, 8).unwrap();
        // <d, fuse(0, p)> == <fuse_backward(d), p>
        let lhs: f64 = grads
            .iter()
            .map(|g| {
                let (h, w, c) = g.hwc().unwrap();
                let pr = resize_bilinear(&p, h, w).unwrap();
                let fused = fuse(&Tensor::zeros(&[h, w, c]), &pr).unwrap();
                fused
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        let rhs: f64 = dp.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
