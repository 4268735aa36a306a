//! Two-stage toy trainer. The backbone stays frozen, so pyramids are
//! computed once per frame. Stage 1 fits the interaction and detection
//! weights on minibatches from a fixed pool of alternating SOT and MOT
//! pairs plus detection-only frames; stage 2 fits only the mask branch and
//! controller on a fixed pool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{generate_sequence, SequenceSpec, SyntheticSequence};
use crate::correspondence::{
    default_temperature, extract_instance_embeddings, ground_truth_match, instance_correspondence,
    make_target_prior, pixel_correspondence, propagate, propagate_backward_to_logits, TargetMap,
    TaskKind,
};
use crate::embed::{
    interact_backward, interact_cached, FeaturePyramid, InteractionWeights, EMBED_STRIDE,
};
use crate::error::{Error, Result};
use crate::geometry::{cell_of, BBox};
use crate::head::{
    dynamic_params, embedding_cell, fuse_backward, fuse_pyramid, head_backward, head_forward,
    mask_backward, mask_features, mask_logits_cached, unfused, HeadWeights, InstanceMask,
};
use crate::losses::{
    contrastive_ce_loss, detection_loss, dice_loss, mask_loss, split_level_grads, DICE_EPS,
};
use crate::model::{ModelSpec, ModelWeights};
use crate::numkit::layers::{add_scaled, flatten, Linear};
use crate::numkit::{gemm, gemm_tn};
use crate::numkit::{Matrix, Tensor};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub mask_lr: f64,
    /// Heavy-ball coefficient for stage 1.
    pub momentum: f64,
    pub steps: usize,
    pub mask_steps: usize,
    /// Pairs of each kind in the stage-1 pool.
    pub pairs_per_kind: usize,
    /// Frames in the stage-2 pool, half with a propagated prior.
    pub mask_items: usize,
    /// Single frames in the stage-1 pool trained for detection only.
    pub det_frames: usize,
    /// Pool items per stage-1 update, drawn without replacement per epoch.
    pub batch: usize,
    /// Leading pool items whose mean loss is the stage-1 trace.
    pub probe: usize,
    pub seed: u64,
    pub model: ModelSpec,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            mask_lr: 0.05,
            momentum: 0.9,
            steps: 1800,
            mask_steps: 200,
            pairs_per_kind: 192,
            mask_items: 16,
            det_frames: 768,
            batch: 48,
            probe: 16,
            seed: 0,
            model: ModelSpec::default(),
        }
    }
}

pub const MAX_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Stage 1: probe loss before each update. Stage 2: pool loss.
    pub trace: Vec<TraceEntry>,
    /// The same losses after the last update of each stage.
    pub stage1_final: f64,
    pub stage2_final: f64,
}

impl TrainOutcome {
    pub fn stage_losses(&self, stage: u8) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.loss)
            .collect()
    }
}

/// `count` two-object training specs with seeds derived from `seed`.
pub fn default_train_specs(seed: u64, count: usize) -> Vec<SequenceSpec> {
    (0..count as u64)
        .map(|i| SequenceSpec {
            seed: seed.wrapping_mul(1000).wrapping_add(i),
            ..Default::default()
        })
        .collect()
}

/// Clips in the default training set.
pub const TRAIN_SEQUENCES: usize = 384;
/// Frames per default training clip.
pub const TRAIN_FRAMES: usize = 3;

/// The default training set: many short clips, so that many object colors
/// are seen.
pub fn default_train_set(seed: u64) -> Vec<SequenceSpec> {
    train_set(seed, TRAIN_SEQUENCES)
}

/// `count` clips of `TRAIN_FRAMES` frames each.
pub fn train_set(seed: u64, count: usize) -> Vec<SequenceSpec> {
    default_train_specs(seed, count)
        .into_iter()
        .map(|s| SequenceSpec {
            frames: TRAIN_FRAMES,
            ..s
        })
        .collect()
}

struct Clip {
    pyramids: Vec<FeaturePyramid>,
}

#[derive(Clone, Copy, Debug)]
enum Pair {
    Sot {
        seq: usize,
        t0: usize,
        t1: usize,
        id: u64,
    },
    Mot {
        seq: usize,
        t0: usize,
        t1: usize,
    },
    /// Detection only, no prior.
    Det {
        seq: usize,
        t: usize,
    },
}

#[derive(Clone, Debug)]
struct MaskObject {
    cell: (usize, usize),
    center: (f64, f64),
    gt: InstanceMask,
}

struct MaskItem {
    seq: usize,
    t: usize,
    fused8: Tensor,
    objects: Vec<MaskObject>,
}

/// Gradient of the stage-1 parameters.
struct Stage1Grad {
    // `None` for detection-only items
    interaction: Option<InteractionWeights>,
    head: HeadWeights,
}

fn visible_ids(seq: &SyntheticSequence, t: usize) -> Vec<u64> {
    seq.gt[t].iter().map(|o| o.id).collect()
}

fn common_ids(seq: &SyntheticSequence, t0: usize, t1: usize) -> Vec<u64> {
    let b = visible_ids(seq, t1);
    visible_ids(seq, t0)
        .into_iter()
        .filter(|id| b.contains(id))
        .collect()
}

fn sample_pairs(
    seqs: &[SyntheticSequence],
    per_kind: usize,
    det_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(2 * per_kind + det_frames);
    let pick = |max_gap: usize, rng: &mut ChaCha8Rng| -> Result<(usize, usize, usize, Vec<u64>)> {
        for _ in 0..1000 {
            let s = rng.gen_range(0..seqs.len());
            let n = seqs[s].frames.len();
            if n < 2 {
                continue;
            }
            let gap = rng.gen_range(1..=max_gap.min(n - 1));
            let t0 = rng.gen_range(0..n - gap);
            let ids = common_ids(&seqs[s], t0, t0 + gap);
            if !ids.is_empty() {
                return Ok((s, t0, t0 + gap, ids));
            }
        }
        Err(Error::invalid(
            "training sequences have no frame pairs with shared objects",
        ))
    };
    for _ in 0..per_kind {
        let (seq, t0, t1, ids) = pick(8, rng)?;
        let id = ids[rng.gen_range(0..ids.len())];
        out.push(Pair::Sot { seq, t0, t1, id });
        let (seq, t0, t1, _) = pick(3, rng)?;
        out.push(Pair::Mot { seq, t0, t1 });
    }
    for k in 0..det_frames {
        let seq = k % seqs.len();
        let t = rng.gen_range(0..seqs[seq].frames.len());
        out.push(Pair::Det { seq, t });
    }
    Ok(out)
}

fn grid_of(p: &FeaturePyramid) -> (usize, usize) {
    let s = p.stride8().shape();
    (s[0], s[1])
}

/// `dL/dE_cur = dZ E_ref`, `dL/dE_ref = dZᵀ E_cur` for `Z = E_cur E_refᵀ`.
fn logits_backward(dz: &Matrix, e_cur: &Matrix, e_ref: &Matrix) -> (Matrix, Matrix) {
    let (n, m, d) = (dz.rows(), dz.cols(), e_cur.cols());
    let ex = Exec::default();
    let d_cur = gemm(ex, dz.data(), n, m, e_ref.data(), d);
    let d_ref = gemm_tn(ex, dz.data(), n, m, e_cur.data(), d);
    (
        Matrix::new(n, d, d_cur).expect("shape"),
        Matrix::new(m, d, d_ref).expect("shape"),
    )
}

fn pair_loss(
    w: &ModelWeights,
    seqs: &[SyntheticSequence],
    clips: &[Clip],
    pair: Pair,
    want_grad: bool,
) -> Result<(f64, Option<Stage1Grad>)> {
    let nc = w.spec.num_classes;
    let tau = default_temperature(w.spec.embed_dim);
    let (seq, t0, t1) = match pair {
        Pair::Sot { seq, t0, t1, .. } | Pair::Mot { seq, t0, t1 } => (seq, t0, t1),
        Pair::Det { seq, t } => {
            let gts: Vec<(BBox, u32)> = seqs[seq].gt[t]
                .iter()
                .map(|o| (o.bbox, o.class_id))
                .collect();
            let (out, hc) = head_forward(&unfused(&clips[seq].pyramids[t]), &w.head)?;
            let det = detection_loss(&out, &gts, nc)?;
            if !want_grad {
                return Ok((det.value, None));
            }
            let (g_head, _) = head_backward(&hc, &w.head, &split_level_grads(&out, &det.grad)?)?;
            return Ok((
                det.value,
                Some(Stage1Grad {
                    interaction: None,
                    head: g_head,
                }),
            ));
        }
    };
    let (pr, pc) = (&clips[seq].pyramids[t0], &clips[seq].pyramids[t1]);
    let s = &seqs[seq];
    let (rows, cols) = grid_of(pc);
    let (e_ref, e_cur, cache) = interact_cached(
        pr.stride16(),
        pc.stride16(),
        &w.spec.interaction,
        &w.interaction,
    )?;
    match pair {
        Pair::Sot { id, .. } => {
            let ref_box = s.object(t0, id).expect("sampled id").bbox;
            let cur_box = s.object(t1, id).expect("sampled id").bbox;
            let corr = pixel_correspondence(&e_cur, &e_ref, tau)?;
            let t_ref = TargetMap::from_box(&ref_box, rows, cols)?;
            let t_prop = propagate(&corr, &t_ref)?;
            let dice = dice_loss(
                &t_prop,
                &TargetMap::from_box(&cur_box, rows, cols)?,
                DICE_EPS,
            )?;
            let prior = make_target_prior(Some(&t_prop), TaskKind::Sot, rows, cols)?;
            let fused = fuse_pyramid(pc, &prior)?;
            let (out, hc) = head_forward(&fused, &w.head)?;
            let det = detection_loss(&out, &[(cur_box, 1)], nc)?;
            if !want_grad {
                return Ok((dice.value + det.value, None));
            }
            let (g_head, d_in) = head_backward(&hc, &w.head, &split_level_grads(&out, &det.grad)?)?;
            let d_prior = fuse_backward(&d_in, rows, cols)?;
            let d_prop: Vec<f64> = dice
                .grad
                .iter()
                .zip(d_prior.data())
                .map(|(a, b)| a + b)
                .collect();
            let dz = propagate_backward_to_logits(&corr, &t_ref, &d_prop);
            let (d_cur, d_ref) = logits_backward(&dz, &e_cur.e, &e_ref.e);
            let g_int = interact_backward(&cache, &w.interaction, &d_ref, &d_cur)?;
            Ok((
                dice.value + det.value,
                Some(Stage1Grad {
                    interaction: Some(g_int),
                    head: g_head,
                }),
            ))
        }
        Pair::Det { .. } => unreachable!("handled above"),
        Pair::Mot { .. } => {
            let ids = common_ids(s, t0, t1);
            let ref_boxes: Vec<BBox> = ids
                .iter()
                .map(|&i| s.object(t0, i).expect("common").bbox)
                .collect();
            let cur_boxes: Vec<BBox> = ids
                .iter()
                .map(|&i| s.object(t1, i).expect("common").bbox)
                .collect();
            let inst_ref = extract_instance_embeddings(&e_ref, &ref_boxes)?;
            let inst_cur = extract_instance_embeddings(&e_cur, &cur_boxes)?;
            let ci = instance_correspondence(&inst_cur, &inst_ref, tau)?;
            let ce = contrastive_ce_loss(&ci, &ground_truth_match(&ids, &ids)?, tau)?;
            let gts: Vec<(BBox, u32)> = s.gt[t1].iter().map(|o| (o.bbox, o.class_id)).collect();
            let (out, hc) = head_forward(&unfused(pc), &w.head)?;
            let det = detection_loss(&out, &gts, nc)?;
            if !want_grad {
                return Ok((ce.value + det.value, None));
            }
            let dz = Matrix::new(ids.len(), ids.len(), ce.grad.clone())?;
            let (di_cur, di_ref) = logits_backward(&dz, &inst_cur.e, &inst_ref.e);
            let d = e_cur.channels();
            let mut d_cur = Matrix::zeros(rows * cols, d);
            let mut d_ref = Matrix::zeros(rows * cols, d);
            for (k, (&(r, c), &(rr, rc))) in
                inst_cur.centers.iter().zip(&inst_ref.centers).enumerate()
            {
                for (o, v) in d_cur.row_mut(r * cols + c).iter_mut().zip(di_cur.row(k)) {
                    *o += v;
                }
                for (o, v) in d_ref.row_mut(rr * cols + rc).iter_mut().zip(di_ref.row(k)) {
                    *o += v;
                }
            }
            let g_int = interact_backward(&cache, &w.interaction, &d_ref, &d_cur)?;
            let (g_head, _) = head_backward(&hc, &w.head, &split_level_grads(&out, &det.grad)?)?;
            Ok((
                ce.value + det.value,
                Some(Stage1Grad {
                    interaction: Some(g_int),
                    head: g_head,
                }),
            ))
        }
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Mean loss over `items`; the reduction order is fixed.
fn stage1_loss_only(
    w: &ModelWeights,
    seqs: &[SyntheticSequence],
    clips: &[Clip],
    items: &[Pair],
) -> Result<f64> {
    let results = par::map_slice(Exec::default(), items, |p| {
        pair_loss(w, seqs, clips, *p, false)
    });
    let mut loss = 0.0;
    for r in results {
        loss += r?.0;
    }
    Ok(loss / items.len() as f64)
}

/// Mean loss and mean gradient over `items`; the reduction order is fixed.
fn stage1_eval(
    w: &ModelWeights,
    seqs: &[SyntheticSequence],
    clips: &[Clip],
    items: &[Pair],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let results = par::map_slice(Exec::default(), items, |p| {
        pair_loss(w, seqs, clips, *p, true)
    });
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut gi = vec![0.0; crate::numkit::layers::param_count(&w.interaction)];
    let mut gh = vec![0.0; crate::numkit::layers::param_count(&w.head)];
    for r in results {
        let (l, g) = r?;
        let g = g.expect("gradient requested");
        loss += l;
        if let Some(gint) = &g.interaction {
            for (a, b) in gi.iter_mut().zip(flatten(gint)) {
                *a += b;
            }
        }
        for (a, b) in gh.iter_mut().zip(flatten(&g.head)) {
            *a += b;
        }
    }
    gi.iter_mut().chain(gh.iter_mut()).for_each(|v| *v /= n);
    Ok((loss / n, gi, gh))
}

fn build_mask_items(
    w: &ModelWeights,
    seqs: &[SyntheticSequence],
    clips: &[Clip],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskItem>> {
    let tau = default_temperature(w.spec.embed_dim);
    let mut items = Vec::with_capacity(count);
    for k in 0..count {
        let s = rng.gen_range(0..seqs.len());
        let seq = &seqs[s];
        let n = seq.frames.len();
        let t1 = rng.gen_range(0..n);
        let pc = &clips[s].pyramids[t1];
        let grid = grid_of(pc);
        let to_obj = |o: &super::synth::GtObject| MaskObject {
            cell: embedding_cell(&o.bbox, grid),
            center: o.bbox.center(),
            gt: o.mask.clone(),
        };
        let vos = k % 2 == 0 && n > 1;
        let item = if vos {
            let t0 = if t1 == 0 { 1 } else { rng.gen_range(0..t1) };
            let ids = common_ids(seq, t0, t1);
            if ids.is_empty() {
                continue;
            }
            let id = ids[rng.gen_range(0..ids.len())];
            let ref_mask = &seq.object(t0, id).expect("common").mask;
            let mut cells = ref_mask.majority_cells();
            if cells.iter().all(|&v| v == 0.0) {
                let (cx, cy) = seq.object(t0, id).expect("common").bbox.center();
                let (r, c) = cell_of(cx, cy, EMBED_STRIDE, grid.0, grid.1).unwrap_or((0, 0));
                cells[r * grid.1 + c] = 1.0;
            }
            let (e_ref, e_cur) = w.embed_pair(&clips[s].pyramids[t0], pc)?;
            let corr = pixel_correspondence(&e_cur, &e_ref, tau)?;
            let t_prop = propagate(&corr, &TargetMap::binary(cells)?)?;
            let prior = make_target_prior(Some(&t_prop), TaskKind::Vos, grid.0, grid.1)?;
            MaskItem {
                seq: s,
                t: t1,
                fused8: fuse_pyramid(pc, &prior)?.swap_remove(0).f,
                objects: vec![to_obj(seq.object(t1, id).expect("common"))],
            }
        } else {
            if seq.gt[t1].is_empty() {
                continue;
            }
            MaskItem {
                seq: s,
                t: t1,
                fused8: pc.stride8().clone(),
                objects: seq.gt[t1].iter().map(to_obj).collect(),
            }
        };
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::invalid("no frames with objects for mask training"));
    }
    Ok(items)
}

/// Mean dice over all pool objects with gradients of `(mask_branch, controller)`.
fn stage2_eval(
    w: &HeadWeights,
    seqs: &[SyntheticSequence],
    items: &[MaskItem],
) -> Result<(f64, Vec<f64>)> {
    let per_item = par::map_slice(
        Exec::default(),
        items,
        |it| -> Result<(f64, usize, Vec<f64>)> {
            let frame = &seqs[it.seq].frames[it.t];
            let mf = mask_features(&it.fused8, frame, w)?;
            let mut loss = 0.0;
            let mut gb = Linear::zeros(w.mask_branch.fan_in(), w.mask_branch.fan_out());
            let mut gc = Linear::zeros(w.controller.fan_in(), w.controller.fan_out());
            for o in &it.objects {
                let dynp = dynamic_params(&it.fused8, o.cell, w)?;
                let (logits, cache) = mask_logits_cached(&mf, &dynp, o.center.0, o.center.1)?;
                let ml = mask_loss(logits.data(), &o.gt)?;
                let (db, dc) = mask_backward(&it.fused8, &mf, o.cell, &dynp, &cache, &ml.grad, w)?;
                loss += ml.value;
                add_scaled(&mut gb, &flatten(&db), 1.0);
                add_scaled(&mut gc, &flatten(&dc), 1.0);
            }
            let mut g = flatten(&gb);
            g.extend(flatten(&gc));
            Ok((loss, it.objects.len(), g))
        },
    );
    let mut loss = 0.0;
    let mut count = 0;
    let mut grad: Vec<f64> = Vec::new();
    for r in per_item {
        let (l, n, g) = r?;
        loss += l;
        count += n;
        if grad.is_empty() {
            grad = g;
        } else {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    let n = count.max(1) as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

fn apply_mask_step(w: &mut HeadWeights, grad: &[f64], lr: f64) {
    let nb = crate::numkit::layers::param_count(&w.mask_branch);
    add_scaled(&mut w.mask_branch, &grad[..nb], -lr);
    add_scaled(&mut w.controller, &grad[nb..], -lr);
}

/// Trains from a seeded initialization; backbone weights never change.
pub fn train_toy(specs: &[SequenceSpec], hyper: &TrainHyper) -> Result<TrainOutcome> {
    if !(0.0..1.0).contains(&hyper.momentum) {
        return Err(Error::invalid("momentum must lie in [0, 1)"));
    }
    if !(hyper.lr >= 0.0
        && hyper.mask_lr >= 0.0
        && hyper.lr.is_finite()
        && hyper.mask_lr.is_finite())
    {
        return Err(Error::invalid(
            "learning rates must be finite and non-negative",
        ));
    }
    if hyper.steps + hyper.mask_steps > MAX_STEPS {
        return Err(Error::invalid(format!(
            "step budget {} exceeds {MAX_STEPS}",
            hyper.steps + hyper.mask_steps
        )));
    }
    if specs.is_empty()
        || hyper.pairs_per_kind == 0
        || hyper.mask_items == 0
        || hyper.batch == 0
        || hyper.probe == 0
    {
        return Err(Error::invalid(
            "training needs sequences, pairs and mask items",
        ));
    }
    let mut w = ModelWeights::init(hyper.seed, hyper.model)?;
    let seqs = specs
        .iter()
        .map(generate_sequence)
        .collect::<Result<Vec<_>>>()?;
    let clips = seqs
        .iter()
        .map(|s| {
            let pyramids = par::map_slice(Exec::default(), &s.frames, |f| w.pyramid(f));
            Ok(Clip {
                pyramids: pyramids.into_iter().collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_7a1e);
    let mut pool = sample_pairs(&seqs, hyper.pairs_per_kind, hyper.det_frames, &mut rng)?;
    pool.shuffle(&mut rng);
    let probe = &pool[..hyper.probe.min(pool.len())];
    let batch = hyper.batch.min(pool.len());
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(hyper.steps + hyper.mask_steps);
    let (mut vel_i, mut vel_h) = (Vec::new(), Vec::new());

    for step in 0..hyper.steps {
        let loss = stage1_loss_only(&w, &seqs, &clips, probe)?;
        check_finite(loss, step)?;
        trace.push(TraceEntry {
            stage: 1,
            step,
            loss,
        });
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..pool.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let items: Vec<Pair> = order.drain(..batch).map(|i| pool[i]).collect();
        let (batch_loss, gi, gh) = stage1_eval(&w, &seqs, &clips, &items)?;
        check_finite(batch_loss, step)?;
        if vel_i.is_empty() {
            vel_i = vec![0.0; gi.len()];
            vel_h = vec![0.0; gh.len()];
        }
        for (v, g) in vel_i.iter_mut().zip(&gi) {
            *v = hyper.momentum * *v + g;
        }
        for (v, g) in vel_h.iter_mut().zip(&gh) {
            *v = hyper.momentum * *v + g;
        }
        add_scaled(&mut w.interaction, &vel_i, -hyper.lr);
        add_scaled(&mut w.head, &vel_h, -hyper.lr);
    }
    let stage1_final = stage1_loss_only(&w, &seqs, &clips, probe)?;
    check_finite(stage1_final, hyper.steps)?;

    let items = build_mask_items(&w, &seqs, &clips, hyper.mask_items, &mut rng)?;
    for step in 0..hyper.mask_steps {
        let (loss, g) = stage2_eval(&w.head, &seqs, &items)?;
        check_finite(loss, hyper.steps + step)?;
        trace.push(TraceEntry {
            stage: 2,
            step,
            loss,
        });
        apply_mask_step(&mut w.head, &g, hyper.mask_lr);
    }
    let stage2_final = stage2_eval(&w.head, &seqs, &items)?.0;
    Ok(TrainOutcome {
        weights: w,
        trace,
        stage1_final,
        stage2_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Vec<SequenceSpec>, TrainHyper) {
        let specs: Vec<SequenceSpec> = default_train_specs(1, 2)
            .into_iter()
            .map(|s| SequenceSpec { frames: 6, ..s })
            .collect();
        let hyper = TrainHyper {
            steps: 3,
            mask_steps: 3,
            pairs_per_kind: 2,
            mask_items: 2,
            det_frames: 4,
            ..Default::default()
        };
        (specs, hyper)
    }

    #[test]
    fn two_hundred_steps_lower_the_loss() {
        let (specs, hyper) = small();
        let out = train_toy(
            &specs,
            &TrainHyper {
                steps: 200,
                mask_steps: 0,
                lr: 0.05,
                batch: 8,
                probe: 8,
                ..hyper
            },
        )
        .unwrap();
        let first = out.stage_losses(1)[0];
        assert!(out.stage1_final < first, "{first} -> {}", out.stage1_final);
    }

    #[test]
    fn zero_lr_keeps_trace_constant() {
        let (specs, hyper) = small();
        let out = train_toy(
            &specs,
            &TrainHyper {
                lr: 0.0,
                mask_lr: 0.0,
                ..hyper
            },
        )
        .unwrap();
        for stage in [1, 2] {
            let l = out.stage_losses(stage);
            assert!(l.windows(2).all(|p| p[0] == p[1]), "{l:?}");
        }
    }

    #[test]
    fn stage_two_freezes_everything_but_the_mask_head() {
        let (specs, hyper) = small();
        let a = train_toy(
            &specs,
            &TrainHyper {
                mask_steps: 0,
                ..hyper.clone()
            },
        )
        .unwrap();
        let b = train_toy(&specs, &hyper).unwrap();
        let (mut wa, mut wb) = (a.weights.clone(), b.weights.clone());
        for w in [&mut wa, &mut wb] {
            w.head.mask_branch = Linear::zeros(1, 1);
            w.head.controller = Linear::zeros(1, 1);
        }
        let (fa, fb) = (flatten(&wa), flatten(&wb));
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(
            flatten(&a.weights.head.controller),
            flatten(&b.weights.head.controller)
        );
    }

    #[test]
    fn rejects_bad_hyper() {
        let (specs, hyper) = small();
        assert!(train_toy(
            &specs,
            &TrainHyper {
                lr: -1.0,
                ..hyper.clone()
            }
        )
        .is_err());
        assert!(train_toy(
            &specs,
            &TrainHyper {
                steps: 2001,
                ..hyper
            }
        )
        .is_err());
    }
}
