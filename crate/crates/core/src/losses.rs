//! Training losses with analytic gradients and a central-difference checker.

use crate::correspondence::{GroundTruthMatch, InstanceCorrespondence, TargetMap};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::{decode_box, InstanceMask, LevelOutput, LOG_SIZE_LIMIT};
use crate::numkit::{sigmoid, Tensor};

/// Smoothing term for Dice.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the loss had nothing to act on (no matched rows, no GT).
    pub flagged: bool,
}

impl LossResult {
    fn new(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grad,
            flagged: false,
        }
    }
}

/// `1 − (2Σpg + eps)/(Σp + Σg + eps)` on raw slices.
pub fn dice(p: &[f64], g: &[f64], eps: f64) -> Result<LossResult> {
    if p.len() != g.len() {
        return Err(Error::shape(g.len(), p.len()));
    }
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let num = 2.0 * inter + eps;
    let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + eps;
    if den == 0.0 {
        return Ok(LossResult::new(0.0, vec![0.0; p.len()]));
    }
    let grad = g
        .iter()
        .map(|&gi| -(2.0 * gi * den - num) / (den * den))
        .collect();
    Ok(LossResult::new(1.0 - num / den, grad))
}

/// Gradient with respect to `t_pred`.
pub fn dice_loss(t_pred: &TargetMap, t_gt: &TargetMap, eps: f64) -> Result<LossResult> {
    dice(t_pred.values(), t_gt.values(), eps)
}

/// Mean over matched rows of `−ln C_inst[i][j*]`. The gradient is with
/// respect to the raw logits `z`, where `C_inst = softmax(z / temperature)`.
pub fn contrastive_ce_loss(
    c_inst: &InstanceCorrespondence,
    g: &GroundTruthMatch,
    temperature: f64,
) -> Result<LossResult> {
    let (n, m) = (c_inst.c.rows(), c_inst.c.cols());
    if (g.g.rows(), g.g.cols()) != (n, m) {
        return Err(Error::shape(
            format!("{n}×{m}"),
            format!("{}×{}", g.g.rows(), g.g.cols()),
        ));
    }
    let rows: Vec<(usize, usize)> = (0..n)
        .filter_map(|i| g.g.row(i).iter().position(|&v| v == 1.0).map(|j| (i, j)))
        .collect();
    let mut grad = vec![0.0; n * m];
    if rows.is_empty() || c_inst.empty {
        return Ok(LossResult {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let k = rows.len() as f64;
    let mut value = 0.0;
    for &(i, j) in &rows {
        let c = c_inst.c.row(i);
        value -= c[j].max(f64::MIN_POSITIVE).ln();
        for (col, &cv) in c.iter().enumerate() {
            let onehot = if col == j { 1.0 } else { 0.0 };
            grad[i * m + col] = (cv - onehot) / (temperature * k);
        }
    }
    Ok(LossResult::new(value / k, grad))
}

/// Numerically stable `BCE(sigmoid(x), y)`.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Pyramid level for a ground-truth box by its longer side.
pub fn assign_level(b: &BBox) -> usize {
    let side = b.w.max(b.h);
    if side < 64.0 {
        0
    } else if side < 128.0 {
        1
    } else {
        2
    }
}

/// Ground-truth index per cell for each level. Positive cells have their
/// center inside the half-size box on the assigned level; a box covering no
/// cell center claims the cell under its center. Contested cells go to the
/// smaller box.
pub fn assign_targets(
    shapes: &[(usize, usize, usize)],
    gts: &[(BBox, u32)],
) -> Vec<Vec<Option<usize>>> {
    let mut out: Vec<Vec<Option<usize>>> =
        shapes.iter().map(|&(h, w, _)| vec![None; h * w]).collect();
    let claim = |lvl: usize, idx: usize, gi: usize, out: &mut Vec<Vec<Option<usize>>>| {
        let slot = &mut out[lvl][idx];
        match *slot {
            Some(other) if gts[other].0.area() <= gts[gi].0.area() => {}
            _ => *slot = Some(gi),
        }
    };
    for (gi, (b, _)) in gts.iter().enumerate() {
        let lvl = assign_level(b).min(shapes.len() - 1);
        let (h, w, s) = shapes[lvl];
        let s = s as f64;
        let inner = b.shrink(0.5);
        let mut any = false;
        for r in 0..h {
            for c in 0..w {
                let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                if cx >= inner.x && cx < inner.x2() && cy >= inner.y && cy < inner.y2() {
                    claim(lvl, r * w + c, gi, &mut out);
                    any = true;
                }
            }
        }
        if !any {
            let (cx, cy) = b.center();
            let c = ((cx / s).floor().max(0.0) as usize).min(w - 1);
            let r = ((cy / s).floor().max(0.0) as usize).min(h - 1);
            claim(lvl, r * w + c, gi, &mut out);
        }
    }
    out
}

/// IoU of `(cx, cy, w, h)` against `g` and its gradient with respect to
/// `(cx, cy, w, h)`.
fn iou_and_grad(cx: f64, cy: f64, w: f64, h: f64, g: &BBox) -> (f64, [f64; 4]) {
    let (x1, x2, y1, y2) = (cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0);
    let iw = x2.min(g.x2()) - x1.max(g.x);
    let ih = y2.min(g.y2()) - y1.max(g.y);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = w * h + g.area() - inter;
    let iou = inter / union;
    let d_inter = 1.0 / union + inter / (union * union);
    let d_area = -inter / (union * union);
    let (d_x1, d_x2) = (
        if x1 > g.x { -ih } else { 0.0 },
        if x2 < g.x2() { ih } else { 0.0 },
    );
    let (d_y1, d_y2) = (
        if y1 > g.y { -iw } else { 0.0 },
        if y2 < g.y2() { iw } else { 0.0 },
    );
    let grad = [
        d_inter * (d_x1 + d_x2),
        d_inter * (d_y1 + d_y2),
        d_inter * (d_x2 - d_x1) / 2.0 + d_area * h,
        d_inter * (d_y2 - d_y1) / 2.0 + d_area * w,
    ];
    (iou, grad)
}

/// Objectness BCE summed over all cells and divided by the positive count
/// (at least one), plus class BCE and `1 − IoU` averaged over positive
/// cells. The gradient is laid out as the concatenated raw
/// level outputs.
pub fn detection_loss(
    outputs: &[LevelOutput],
    gts: &[(BBox, u32)],
    num_classes: usize,
) -> Result<LossResult> {
    let nch = num_classes + 5;
    for o in outputs {
        if o.raw.shape()[2] != nch {
            return Err(Error::shape(format!("{nch} channels"), o.raw.shape()[2]));
        }
    }
    if let Some((_, c)) = gts
        .iter()
        .find(|(_, c)| *c == 0 || *c as usize > num_classes)
    {
        return Err(Error::invalid(format!(
            "class id {c} outside 1..={num_classes}"
        )));
    }
    let shapes: Vec<(usize, usize, usize)> =
        outputs.iter().map(|o| (o.h(), o.w(), o.stride)).collect();
    let assign = assign_targets(&shapes, gts);
    let total_cells: usize = shapes.iter().map(|&(h, w, _)| h * w).sum();
    let n_pos: usize = assign
        .iter()
        .map(|a| a.iter().filter(|v| v.is_some()).count())
        .sum();
    let obj_norm = n_pos.max(1) as f64;
    let mut grad = Vec::with_capacity(total_cells * nch);
    let (mut obj_sum, mut cls_sum, mut iou_sum) = (0.0, 0.0, 0.0);
    for (lvl, o) in outputs.iter().enumerate() {
        let mut g = vec![0.0; o.raw.len()];
        for r in 0..o.h() {
            for c in 0..o.w() {
                let v = o.cell(r, c);
                let gc = &mut g[(r * o.w() + c) * nch..][..nch];
                let pos = assign[lvl][r * o.w() + c];
                let y = pos.is_some() as u8 as f64;
                obj_sum += bce_with_logits(v[num_classes], y);
                gc[num_classes] = (sigmoid(v[num_classes]) - y) / obj_norm;
                let Some(gi) = pos else { continue };
                let (gt_box, class_id) = gts[gi];
                let np = n_pos as f64;
                for k in 0..num_classes {
                    let yk = (k + 1 == class_id as usize) as u8 as f64;
                    cls_sum += bce_with_logits(v[k], yk);
                    gc[k] = (sigmoid(v[k]) - yk) / np;
                }
                let reg = [
                    v[num_classes + 1],
                    v[num_classes + 2],
                    v[num_classes + 3],
                    v[num_classes + 4],
                ];
                let b = decode_box(r, c, o.stride, reg);
                let (cx, cy) = b.center();
                let (iou, d) = iou_and_grad(cx, cy, b.w, b.h, &gt_box);
                iou_sum += 1.0 - iou;
                let s = o.stride as f64;
                let chain = [
                    s * sigmoid(reg[0]) * (1.0 - sigmoid(reg[0])),
                    s * sigmoid(reg[1]) * (1.0 - sigmoid(reg[1])),
                    if reg[2].abs() < LOG_SIZE_LIMIT {
                        b.w
                    } else {
                        0.0
                    },
                    if reg[3].abs() < LOG_SIZE_LIMIT {
                        b.h
                    } else {
                        0.0
                    },
                ];
                for k in 0..4 {
                    gc[num_classes + 1 + k] = -d[k] * chain[k] / np;
                }
            }
        }
        grad.extend(g);
    }
    let mut value = obj_sum / obj_norm;
    if n_pos > 0 {
        value += (cls_sum + iou_sum) / n_pos as f64;
    }
    Ok(LossResult {
        value,
        grad,
        flagged: gts.is_empty(),
    })
}

/// Splits a flat detection gradient back into per-level tensors.
pub fn split_level_grads(outputs: &[LevelOutput], grad: &[f64]) -> Result<Vec<Tensor>> {
    let mut off = 0;
    let mut out = Vec::with_capacity(outputs.len());
    for o in outputs {
        let n = o.raw.len();
        if off + n > grad.len() {
            return Err(Error::shape(off + n, grad.len()));
        }
        out.push(Tensor::new(
            o.raw.shape().to_vec(),
            grad[off..off + n].to_vec(),
        )?);
        off += n;
    }
    Ok(out)
}

/// Dice on `sigmoid(logits)`; gradient with respect to the logits.
pub fn mask_loss(logits: &[f64], gt: &InstanceMask) -> Result<LossResult> {
    if logits.len() != gt.data.len() {
        return Err(Error::shape(gt.data.len(), logits.len()));
    }
    let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let g: Vec<f64> = gt.data.iter().map(|&v| v as f64).collect();
    let mut r = dice(&p, &g, DICE_EPS)?;
    for (d, pv) in r.grad.iter_mut().zip(&p) {
        *d *= pv * (1.0 - pv);
    }
    Ok(r)
}

/// Weighted sum; the gradient is `[w_corr·corr.grad, w_det·det.grad]`.
pub fn stage1_loss(corr: &LossResult, det: &LossResult, w_corr: f64, w_det: f64) -> LossResult {
    let grad = corr
        .grad
        .iter()
        .map(|g| w_corr * g)
        .chain(det.grad.iter().map(|g| w_det * g))
        .collect();
    LossResult {
        value: w_corr * corr.value + w_det * det.value,
        grad,
        flagged: corr.flagged && det.flagged,
    }
}

/// Largest relative deviation between the analytic gradient and central
/// differences, over coordinates whose analytic gradient exceeds `1e-8`.
pub fn finite_diff_check<F>(loss_fn: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<LossResult>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = loss_fn(point)?.grad;
    if analytic.len() != point.len() {
        return Err(Error::shape(point.len(), analytic.len()));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        if analytic[i].abs() <= 1e-8 {
            continue;
        }
        let x0 = x[i];
        x[i] = x0 + eps;
        let up = loss_fn(&x)?.value;
        x[i] = x0 - eps;
        let down = loss_fn(&x)?.value;
        x[i] = x0;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::encode_box;
    use crate::numkit::{softmax_rows, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_examples() {
        let g = TargetMap::binary(vec![1.0, 0.0, 1.0]).unwrap();
        assert!(dice_loss(&g, &g, DICE_EPS).unwrap().value <= 1e-9);
        assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap().value, 1.0);
        assert_eq!(dice(&[0.5, 0.5], &[1.0, 0.0], 0.0).unwrap().value, 0.5);
        assert!(dice(&[0.5], &[1.0, 0.0], 0.0).is_err());
    }

    fn inst(rows: &[&[f64]], t: f64) -> (Matrix, InstanceCorrespondence) {
        let z = Matrix::from_rows(rows).unwrap();
        let c = softmax_rows(&z, t).unwrap();
        (z, InstanceCorrespondence { c, empty: false })
    }

    #[test]
    fn contrastive_examples() {
        let g1 = GroundTruthMatch {
            g: Matrix::from_rows(&[[1.0]]).unwrap(),
        };
        let one = InstanceCorrespondence {
            c: Matrix::from_rows(&[[1.0]]).unwrap(),
            empty: false,
        };
        assert_eq!(contrastive_ce_loss(&one, &g1, 1.0).unwrap().value, 0.0);
        let c = InstanceCorrespondence {
            c: Matrix::from_rows(&[[0.73106, 0.26894]]).unwrap(),
            empty: false,
        };
        let g = GroundTruthMatch {
            g: Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
        };
        assert!((contrastive_ce_loss(&c, &g, 1.0).unwrap().value - 0.31326).abs() < 1e-5);
        let (_, u) = inst(&[&[0.0; 4]], 1.0);
        let g = GroundTruthMatch {
            g: Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0]]).unwrap(),
        };
        assert!((contrastive_ce_loss(&u, &g, 1.0).unwrap().value - 4f64.ln()).abs() < 1e-5);
        let none = GroundTruthMatch {
            g: Matrix::zeros(1, 4),
        };
        let r = contrastive_ce_loss(&u, &none, 1.0).unwrap();
        assert!(r.flagged && r.value == 0.0);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GroundTruthMatch {
            g: Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(),
        };
        let t = 1.7;
        let f = |z: &[f64]| {
            let c = softmax_rows(&Matrix::new(3, 3, z.to_vec()).unwrap(), t).unwrap();
            contrastive_ce_loss(&InstanceCorrespondence { c, empty: false }, &g, t)
        };
        let z: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        assert!(finite_diff_check(f, &z, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn finite_diff_is_exact_for_linear_functions() {
        let f = |x: &[f64]| -> Result<LossResult> {
            Ok(LossResult::new(3.0 * x[0] - 2.0 * x[1], vec![3.0, -2.0]))
        };
        assert!(finite_diff_check(f, &[0.3, 0.7], 1e-5).unwrap() < 1e-10);
        assert!(finite_diff_check(f, &[0.3, 0.7], 1e-2).is_err());
    }

    fn level(h: usize, w: usize, stride: usize, fill: f64) -> LevelOutput {
        LevelOutput {
            stride,
            raw: Tensor::full(&[h, w, 6], fill),
        }
    }

    #[test]
    fn hand_iou_term() {
        let (iou, _) = iou_and_grad(1.0, 1.0, 2.0, 2.0, &BBox::new(1.0, 0.0, 2.0, 2.0));
        assert!((1.0 - iou - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detection_has_near_zero_loss() {
        let gt = BBox::new(20.0, 22.0, 13.0, 15.0);
        let mut outs = vec![
            level(8, 8, 8, 0.0),
            level(4, 4, 16, 0.0),
            level(2, 2, 32, 0.0),
        ];
        for o in &mut outs {
            for v in o.raw.data_mut().chunks_mut(6) {
                v[1] = -40.0;
            }
        }
        let assign = assign_targets(&[(8, 8, 8), (4, 4, 16), (2, 2, 32)], &[(gt, 1)]);
        let pos: Vec<usize> = assign[0]
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
            .collect();
        assert_eq!(pos, vec![3 * 8 + 3]);
        let reg = encode_box(3, 3, 8, &gt).unwrap();
        let cell = &mut outs[0].raw.data_mut()[pos[0] * 6..][..6];
        cell[0] = 40.0;
        cell[1] = 40.0;
        cell[2..].copy_from_slice(&reg);
        let r = detection_loss(&outs, &[(gt, 1)], 1).unwrap();
        assert!(r.value < 1e-6, "{}", r.value);
    }

    #[test]
    fn detection_without_gt_is_objectness_only() {
        let outs = vec![level(2, 2, 8, 0.0)];
        let r = detection_loss(&outs, &[], 1).unwrap();
        assert!(r.flagged);
        // four negative cells, normalized by max(positives, 1)
        assert!((r.value - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smaller_box_wins_contested_cell() {
        let big = BBox::new(0.0, 0.0, 32.0, 32.0);
        let small = BBox::new(10.0, 10.0, 8.0, 8.0);
        let a = assign_targets(&[(4, 4, 8)], &[(big, 1), (small, 1)]);
        assert_eq!(a[0][5], Some(1));
        let a = assign_targets(&[(4, 4, 8)], &[(small, 1), (big, 1)]);
        assert_eq!(a[0][5], Some(0));
    }

    #[test]
    fn detection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts = [
            (BBox::new(5.0, 6.0, 14.0, 12.0), 1),
            (BBox::new(17.0, 15.0, 12.0, 15.0), 1),
        ];
        let shapes = [(4usize, 4usize, 8usize), (2, 2, 16), (1, 1, 32)];
        let f = |x: &[f64]| {
            let mut off = 0;
            let outs: Vec<LevelOutput> = shapes
                .iter()
                .map(|&(h, w, s)| {
                    let n = h * w * 6;
                    let o = LevelOutput {
                        stride: s,
                        raw: Tensor::new(vec![h, w, 6], x[off..off + n].to_vec()).unwrap(),
                    };
                    off += n;
                    o
                })
                .collect();
            detection_loss(&outs, &gts, 1)
        };
        let x: Vec<f64> = (0..(16 + 4 + 1) * 6)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn mask_loss_examples() {
        let gt = InstanceMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        assert!(mask_loss(&[20.0, 20.0, -20.0, -20.0], &gt).unwrap().value < 1e-6);
        assert!(mask_loss(&[-20.0, -20.0, 20.0, 20.0], &gt).unwrap().value > 1.0 - 1e-6);
        let half = InstanceMask::new(1, 2, vec![1, 0]).unwrap();
        assert!((mask_loss(&[0.0, 0.0], &half).unwrap().value - 0.5).abs() < 1e-6);
        assert!(mask_loss(&[0.0], &half).is_err());
    }

    #[test]
    fn stage1_examples() {
        let a = LossResult::new(0.5, vec![1.0]);
        let b = LossResult::new(0.3, vec![2.0]);
        assert!((stage1_loss(&a, &b, 1.0, 1.0).value - 0.8).abs() < 1e-15);
        assert!((stage1_loss(&a, &b, 2.0, 1.0).value - 1.3).abs() < 1e-15);
        assert_eq!(stage1_loss(&a, &b, 2.0, 1.0).grad, vec![2.0, 2.0]);
        let z = LossResult::new(0.0, vec![]);
        assert_eq!(stage1_loss(&z, &z, 1.0, 1.0).value, 0.0);
    }
}
