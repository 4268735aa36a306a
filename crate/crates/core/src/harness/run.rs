//! Sequence-level tracking and evaluation on [`SequenceData`].

use std::collections::BTreeMap;

use super::io::{records_at, sequence_records, MotRecord, SequenceData};
use super::synth::SyntheticSequence;
use crate::correspondence::TaskKind;
use crate::error::{Error, Result};
use crate::eval::{mot_clear, mots_smotsa, sot_success_auc, vos_jf_objects, MetricReport};
use crate::geometry::BBox;
use crate::head::InstanceMask;
use crate::model::ModelWeights;
use crate::tracker::{init_sot, step_mot, track_sot, TargetInit, TrackerConfig, TrackerState};

/// Tracker output for a whole sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultSet {
    pub records: Vec<MotRecord>,
    pub masks: BTreeMap<(usize, u64), InstanceMask>,
}

impl SequenceData {
    pub fn from_synthetic(seq: &SyntheticSequence) -> Self {
        let masks = seq
            .gt
            .iter()
            .enumerate()
            .flat_map(|(t, objs)| objs.iter().map(move |o| ((t + 1, o.id), o.mask.clone())))
            .collect();
        Self {
            spec: seq.spec.clone(),
            frames: seq.frames.clone(),
            gt: sequence_records(seq),
            masks,
        }
    }
}

fn record(frame: usize, id: u64, b: &BBox, conf: f64) -> MotRecord {
    MotRecord {
        frame,
        id,
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
        conf,
        class_id: 1,
        visibility: 1.0,
    }
}

/// Default targets: the lowest id for SOT, every object for VOS, all taken
/// from the first frame.
pub fn default_targets(task: TaskKind, data: &SequenceData) -> Vec<u64> {
    let ids: Vec<u64> = records_at(&data.gt, 1).iter().map(|r| r.id).collect();
    match task {
        TaskKind::Sot => ids.into_iter().take(1).collect(),
        _ => ids,
    }
}

/// Runs the tracker over every frame. SOT/VOS targets are initialized from
/// the first-frame ground truth, which is also written as their frame-1
/// output.
pub fn track_sequence(
    task: TaskKind,
    model: &ModelWeights,
    cfg: TrackerConfig,
    data: &SequenceData,
    targets: Option<&[u64]>,
) -> Result<ResultSet> {
    let mut out = ResultSet::default();
    if data.frames.is_empty() {
        return Ok(out);
    }
    if task.propagates() {
        let ids = targets
            .map(<[u64]>::to_vec)
            .unwrap_or_else(|| default_targets(task, data));
        if ids.is_empty() {
            return Err(Error::invalid("no target in the first frame"));
        }
        let first = records_at(&data.gt, 1);
        let mut inits = Vec::with_capacity(ids.len());
        for &id in &ids {
            let r = first
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Error::invalid(format!("target {id} is not in the first frame")))?;
            out.records.push(record(1, id, &r.bbox(), 1.0));
            if task.has_masks() {
                let m = data.masks.get(&(1, id)).ok_or_else(|| {
                    Error::invalid(format!("no first-frame mask for target {id}"))
                })?;
                out.masks.insert((1, id), m.clone());
                inits.push(TargetInit::Mask(m.clone()));
            } else {
                inits.push(TargetInit::Box(r.bbox()));
            }
        }
        let mut st = init_sot(model, cfg, &data.frames[0], &inits, task)?;
        for (t, frame) in data.frames.iter().enumerate().skip(1) {
            for (o, &id) in track_sot(&mut st, frame)?.into_iter().zip(&ids) {
                out.records.push(record(t + 1, id, &o.bbox, o.score));
                if let Some(m) = o.mask {
                    out.masks.insert((t + 1, id), m);
                }
            }
        }
    } else {
        let mut st = TrackerState::new_mot(model, cfg, task)?;
        for (t, frame) in data.frames.iter().enumerate() {
            for o in step_mot(&mut st, frame)? {
                out.records
                    .push(record(t + 1, o.id, &o.detection.bbox, o.detection.score));
                if let Some(m) = o.detection.mask {
                    out.masks.insert((t + 1, o.id), m);
                }
            }
        }
    }
    Ok(out)
}

fn frames_by_id(records: &[MotRecord], n: usize) -> Vec<Vec<(u64, BBox)>> {
    let mut v = vec![Vec::new(); n];
    for r in records {
        if (1..=n).contains(&r.frame) {
            v[r.frame - 1].push((r.id, r.bbox()));
        }
    }
    v
}

fn mask_frames(
    keys: impl Iterator<Item = (usize, u64)>,
    masks: &BTreeMap<(usize, u64), InstanceMask>,
    n: usize,
) -> Vec<Vec<(u64, InstanceMask)>> {
    let mut v = vec![Vec::new(); n];
    for (t, id) in keys {
        if let Some(m) = masks.get(&(t, id)) {
            if (1..=n).contains(&t) {
                v[t - 1].push((id, m.clone()));
            }
        }
    }
    v
}

/// Scores results against ground truth. For SOT/VOS the first frame is the
/// given annotation and is left out; a target with no output in a frame
/// scores zero there.
pub fn evaluate(task: TaskKind, gt: &SequenceData, res: &ResultSet) -> Result<MetricReport> {
    let n = gt
        .frames
        .len()
        .max(gt.gt.iter().map(|r| r.frame).max().unwrap_or(0));
    match task {
        TaskKind::Sot => {
            let ids: Vec<u64> = records_at(&res.records, 1).iter().map(|r| r.id).collect();
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for id in ids {
                for t in 2..=n {
                    let Some(g) = gt.gt.iter().find(|r| r.frame == t && r.id == id) else {
                        continue;
                    };
                    let p = res
                        .records
                        .iter()
                        .find(|r| r.frame == t && r.id == id)
                        .map(|r| r.bbox())
                        .unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
                    pred.push(p);
                    truth.push(g.bbox());
                }
            }
            sot_success_auc(&pred, &truth)
        }
        TaskKind::Vos => {
            let ids: Vec<u64> = res.masks.keys().filter(|k| k.0 == 1).map(|k| k.1).collect();
            let (h, w) = (gt.spec.height, gt.spec.width);
            let mut objects = Vec::new();
            for id in ids {
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for t in 2..=n {
                    let Some(gm) = gt.masks.get(&(t, id)) else {
                        continue;
                    };
                    g.push(gm.clone());
                    p.push(
                        res.masks
                            .get(&(t, id))
                            .cloned()
                            .unwrap_or_else(|| InstanceMask::zeros(h, w)),
                    );
                }
                if !g.is_empty() {
                    objects.push((p, g));
                }
            }
            vos_jf_objects(&objects)
        }
        TaskKind::Mot => mot_clear(
            &frames_by_id(&res.records, n),
            &frames_by_id(&gt.gt, n),
            0.5,
        ),
        TaskKind::Mots => {
            let pred = mask_frames(res.records.iter().map(|r| (r.frame, r.id)), &res.masks, n);
            let truth = mask_frames(gt.gt.iter().map(|r| (r.frame, r.id)), &gt.masks, n);
            mots_smotsa(&pred, &truth)
        }
    }
}
