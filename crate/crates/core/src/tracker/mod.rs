//! Online inference: propagate-and-pick for SOT/VOS, detect-embed-associate
//! for MOT/MOTS.

mod kalman;

use serde::{Deserialize, Serialize};

pub use kalman::{from_xyah, to_xyah, Cov, KalmanNoise, KalmanState, Mean};

use crate::assignment::{hungarian, SENTINEL};
use crate::correspondence::{
    default_temperature, make_target_prior, pixel_correspondence, propagate, TargetMap,
    TargetPrior, TaskKind,
};
use crate::embed::EMBED_STRIDE;
use crate::embed::{Embedding, FeaturePyramid, Frame};
use crate::error::{Error, Result};
use crate::geometry::{cell_of, BBox};
use crate::head::{
    detect, fuse_pyramid, mask_features, mask_from_features, pick_top1, Detection, HeadParams,
    HeadThresholds, InstanceMask,
};
use crate::model::ModelWeights;
use crate::numkit::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub thresholds: HeadThresholds,
    /// Softmax temperature; `None` uses `sqrt(embed_dim)`.
    pub temperature: Option<f64>,
    pub lambda_emb: f64,
    /// Pairs with zero IoU and cosine below this are gated out.
    pub gate_cos: f64,
    pub confirm_hits: u32,
    pub max_misses: u32,
    /// Unmatched detections overlapping a matched one above this IoU do not
    /// start tracks.
    pub birth_iou: f64,
    pub ema: f64,
    pub noise: KalmanNoise,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            thresholds: HeadThresholds::default(),
            temperature: None,
            lambda_emb: 0.7,
            gate_cos: 0.3,
            confirm_hits: 2,
            max_misses: 5,
            birth_iou: 0.3,
            ema: 0.9,
            noise: KalmanNoise::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetInit {
    Box(BBox),
    Mask(InstanceMask),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Lost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub kalman: KalmanState,
    /// Unit-length moving average of matched instance embeddings.
    pub embedding: Vec<f64>,
    pub hits: u32,
    pub misses: u32,
    pub status: TrackStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationCost {
    /// `N_det × M_track`, gated entries hold [`SENTINEL`].
    pub cost: Matrix,
    /// Row-major gate flags.
    pub gated: Vec<bool>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na.sqrt() * nb.sqrt())
    }
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// `λ(1 − cos) + (1 − λ)(1 − IoU)`
pub fn pair_cost(cos: f64, iou: f64, lambda_emb: f64) -> f64 {
    lambda_emb * (1.0 - cos) + (1.0 - lambda_emb) * (1.0 - iou)
}

/// Detections and tracks as `(box, embedding)`; track boxes should be the
/// motion-predicted ones.
pub fn build_cost(
    dets: &[(BBox, &[f64])],
    tracks: &[(BBox, &[f64])],
    lambda_emb: f64,
    gate_cos: f64,
) -> AssociationCost {
    let mut cost = Matrix::zeros(dets.len(), tracks.len());
    let mut gated = vec![false; dets.len() * tracks.len()];
    for (i, (db, de)) in dets.iter().enumerate() {
        for (j, (tb, te)) in tracks.iter().enumerate() {
            let cos = cosine(de, te);
            let iou = db.iou(tb);
            if iou == 0.0 && cos < gate_cos {
                gated[i * tracks.len() + j] = true;
                cost.set(i, j, SENTINEL);
            } else {
                cost.set(i, j, pair_cost(cos, iou, lambda_emb));
            }
        }
    }
    AssociationCost { cost, gated }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SotOutput {
    pub bbox: BBox,
    pub mask: Option<InstanceMask>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotOutput {
    pub id: u64,
    pub detection: Detection,
}

/// How often each stage ran, for sharing checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub backbone: usize,
    pub interaction: usize,
    pub head: usize,
}

#[derive(Clone, Debug)]
struct SotTarget {
    t_ref: TargetMap,
    last_box: BBox,
    last_mask: Option<InstanceMask>,
}

/// Per-sequence tracker. Calls must be made frame by frame from one owner.
pub struct TrackerState<'m> {
    model: &'m ModelWeights,
    params: HeadParams,
    cfg: TrackerConfig,
    task: TaskKind,
    frame_index: usize,
    frame_dims: Option<(usize, usize)>,
    ref_pyramid: Option<FeaturePyramid>,
    targets: Vec<SotTarget>,
    prev_pyramid: Option<FeaturePyramid>,
    tracks: Vec<Trajectory>,
    next_id: u64,
    counts: CallCounts,
}

impl<'m> TrackerState<'m> {
    fn blank(model: &'m ModelWeights, cfg: TrackerConfig, task: TaskKind) -> Result<Self> {
        cfg.thresholds.validate()?;
        Ok(Self {
            model,
            params: HeadParams {
                weights: model.head.clone(),
                thresholds: cfg.thresholds,
            },
            cfg,
            task,
            frame_index: 0,
            frame_dims: None,
            ref_pyramid: None,
            targets: Vec::new(),
            prev_pyramid: None,
            tracks: Vec::new(),
            next_id: 1,
            counts: CallCounts::default(),
        })
    }

    /// A MOT/MOTS tracker with no trajectories yet.
    pub fn new_mot(model: &'m ModelWeights, cfg: TrackerConfig, task: TaskKind) -> Result<Self> {
        if task.propagates() {
            return Err(Error::invalid(format!(
                "{task} is not a detect-and-associate task"
            )));
        }
        Self::blank(model, cfg, task)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn counts(&self) -> CallCounts {
        self.counts
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.tracks
    }

    /// Reference target maps, one per SOT/VOS target.
    pub fn reference_maps(&self) -> Vec<&TargetMap> {
        self.targets.iter().map(|t| &t.t_ref).collect()
    }

    /// Cached reference-frame features.
    pub fn reference_features(&self) -> Option<&FeaturePyramid> {
        self.ref_pyramid.as_ref()
    }

    fn temperature(&self) -> f64 {
        self.cfg
            .temperature
            .unwrap_or_else(|| default_temperature(self.model.spec.embed_dim))
    }

    fn check_dims(&mut self, frame: &Frame) -> Result<()> {
        let dims = (frame.height(), frame.width());
        match self.frame_dims {
            Some(d) if d != dims => Err(Error::shape(
                format!("{}×{} frame", d.0, d.1),
                format!("{}×{}", dims.0, dims.1),
            )),
            _ => {
                self.frame_dims = Some(dims);
                Ok(())
            }
        }
    }

    fn pyramid(&mut self, frame: &Frame) -> Result<FeaturePyramid> {
        self.counts.backbone += 1;
        self.model.pyramid(frame)
    }

    fn embed(&mut self, a: &FeaturePyramid, b: &FeaturePyramid) -> Result<(Embedding, Embedding)> {
        self.counts.interaction += 1;
        self.model.embed_pair(a, b)
    }
}

/// Builds the reference state from the first frame; one target per entry.
pub fn init_sot<'m>(
    model: &'m ModelWeights,
    cfg: TrackerConfig,
    ref_frame: &Frame,
    inits: &[TargetInit],
    task: TaskKind,
) -> Result<TrackerState<'m>> {
    if !task.propagates() {
        return Err(Error::invalid(format!("{task} has no reference target")));
    }
    if inits.is_empty() {
        return Err(Error::invalid("at least one target is required"));
    }
    let mut st = TrackerState::blank(model, cfg, task)?;
    st.check_dims(ref_frame)?;
    let (rows, cols) = ref_frame.grid();
    for init in inits {
        let target = match init {
            TargetInit::Box(b) => SotTarget {
                t_ref: TargetMap::from_box(b, rows, cols)?,
                last_box: *b,
                last_mask: None,
            },
            TargetInit::Mask(m) => {
                if (m.h, m.w) != (ref_frame.height(), ref_frame.width()) {
                    return Err(Error::shape(
                        format!("{}×{} mask", ref_frame.height(), ref_frame.width()),
                        format!("{}×{}", m.h, m.w),
                    ));
                }
                let b = m
                    .bbox()
                    .ok_or_else(|| Error::invalid("reference mask is empty"))?;
                let mut cells = m.majority_cells();
                if cells.iter().all(|&v| v == 0.0) {
                    let (cx, cy) = b.center();
                    let (r, c) = cell_of(cx, cy, EMBED_STRIDE, rows, cols).unwrap_or((0, 0));
                    cells[r * cols + c] = 1.0;
                }
                SotTarget {
                    t_ref: TargetMap::binary(cells)?,
                    last_box: b,
                    last_mask: Some(m.clone()),
                }
            }
        };
        st.targets.push(target);
    }
    st.ref_pyramid = Some(st.pyramid(ref_frame)?);
    Ok(st)
}

/// One frame for every SOT/VOS target. The backbone, interaction and
/// correspondence run once per frame; the head runs once per target.
pub fn track_sot(state: &mut TrackerState<'_>, frame: &Frame) -> Result<Vec<SotOutput>> {
    let ref_pyr = state
        .ref_pyramid
        .clone()
        .ok_or_else(|| Error::invalid("tracker is not initialized for SOT/VOS"))?;
    state.check_dims(frame)?;
    let pyr = state.pyramid(frame)?;
    let (e_ref, e_cur) = state.embed(&ref_pyr, &pyr)?;
    let corr = pixel_correspondence(&e_cur, &e_ref, state.temperature())?;
    let want_mask = state.task.has_masks();
    let mut out = Vec::with_capacity(state.targets.len());
    for ti in 0..state.targets.len() {
        let t_prop = propagate(&corr, &state.targets[ti].t_ref)?;
        let prior = make_target_prior(Some(&t_prop), state.task, e_cur.h, e_cur.w)?;
        let fused = fuse_pyramid(&pyr, &prior)?;
        state.counts.head += 1;
        let dets = detect(&fused, &state.params)?;
        let target = &mut state.targets[ti];
        let result = match pick_top1(&dets) {
            Ok(best) => {
                let mask = if want_mask {
                    let mf = mask_features(&fused[0].f, frame, &state.params.weights)?;
                    Some(mask_from_features(&mf, &fused[0].f, best, &state.params)?)
                } else {
                    None
                };
                SotOutput {
                    bbox: best.bbox,
                    mask,
                    score: best.score,
                }
            }
            Err(Error::NoTarget(_)) => SotOutput {
                bbox: target.last_box,
                mask: target.last_mask.clone(),
                score: 0.0,
            },
            Err(e) => return Err(e),
        };
        target.last_box = result.bbox;
        target.last_mask = result.mask.clone();
        out.push(result);
    }
    state.frame_index += 1;
    Ok(out)
}

/// One frame of detect, embed and associate. Emits confirmed tracks that
/// were matched in this frame, ordered by id.
/// Unmatched detections allowed to start a track: those not overlapping a
/// matched detection by more than `birth_iou`.
pub fn births(boxes: &[BBox], matched: &[bool], birth_iou: f64) -> Vec<usize> {
    (0..boxes.len())
        .filter(|&i| {
            !matched[i]
                && !boxes
                    .iter()
                    .zip(matched)
                    .any(|(b, &m)| m && b.iou(&boxes[i]) > birth_iou)
        })
        .collect()
}

pub fn step_mot(state: &mut TrackerState<'_>, frame: &Frame) -> Result<Vec<MotOutput>> {
    if state.task.propagates() {
        return Err(Error::invalid(format!(
            "{} tracker cannot run step_mot",
            state.task
        )));
    }
    state.check_dims(frame)?;
    let pyr = state.pyramid(frame)?;
    let prev = state.prev_pyramid.take().unwrap_or_else(|| pyr.clone());
    let (_, e_cur) = state.embed(&prev, &pyr)?;
    let prior = TargetPrior::zeros(e_cur.h, e_cur.w);
    let fused = fuse_pyramid(&pyr, &prior)?;
    state.counts.head += 1;
    let dets = detect(&fused, &state.params)?;
    let embs: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            let (r, c) = d.embedding_cell;
            normalized(e_cur.e.row(r * e_cur.w + c))
        })
        .collect();

    let noise = state.cfg.noise;
    for t in &mut state.tracks {
        t.kalman.predict(&noise)?;
    }
    let predicted: Vec<BBox> = state.tracks.iter().map(|t| t.kalman.bbox()).collect();
    let det_in: Vec<(BBox, &[f64])> = dets
        .iter()
        .zip(&embs)
        .map(|(d, e)| (d.bbox, e.as_slice()))
        .collect();
    let trk_in: Vec<(BBox, &[f64])> = state
        .tracks
        .iter()
        .zip(&predicted)
        .map(|(t, b)| (*b, t.embedding.as_slice()))
        .collect();
    let cost = build_cost(&det_in, &trk_in, state.cfg.lambda_emb, state.cfg.gate_cos);
    let pairs = hungarian(&cost.cost);

    let mut det_used = vec![false; dets.len()];
    let mut trk_used = vec![false; state.tracks.len()];
    let mut emitted = Vec::new();
    for &(di, ti) in &pairs {
        det_used[di] = true;
        trk_used[ti] = true;
        let cfg = state.cfg;
        let t = &mut state.tracks[ti];
        t.kalman.update(&dets[di].bbox, &noise)?;
        let mixed: Vec<f64> = t
            .embedding
            .iter()
            .zip(&embs[di])
            .map(|(a, b)| cfg.ema * a + (1.0 - cfg.ema) * b)
            .collect();
        t.embedding = normalized(&mixed);
        t.hits += 1;
        t.misses = 0;
        if t.status == TrackStatus::Tentative && t.hits >= cfg.confirm_hits {
            t.status = TrackStatus::Confirmed;
        } else if t.status == TrackStatus::Lost {
            t.status = TrackStatus::Confirmed;
        }
        if t.status == TrackStatus::Confirmed {
            emitted.push(MotOutput {
                id: t.id,
                detection: dets[di].clone(),
            });
        }
    }
    let max_misses = state.cfg.max_misses;
    let mut keep = Vec::with_capacity(state.tracks.len());
    for (t, used) in std::mem::take(&mut state.tracks).into_iter().zip(trk_used) {
        let mut t = t;
        if !used {
            t.misses += 1;
            if t.status == TrackStatus::Tentative || t.misses > max_misses {
                continue;
            }
            t.status = TrackStatus::Lost;
        }
        keep.push(t);
    }
    state.tracks = keep;
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    for di in births(&boxes, &det_used, state.cfg.birth_iou) {
        let d = &dets[di];
        let id = state.next_id;
        state.next_id += 1;
        let status = if state.cfg.confirm_hits <= 1 {
            TrackStatus::Confirmed
        } else {
            TrackStatus::Tentative
        };
        state.tracks.push(Trajectory {
            id,
            kalman: KalmanState::initiate(&d.bbox, &noise),
            embedding: embs[di].clone(),
            hits: 1,
            misses: 0,
            status,
        });
        if status == TrackStatus::Confirmed {
            emitted.push(MotOutput {
                id,
                detection: d.clone(),
            });
        }
    }
    emitted.sort_by_key(|o| o.id);
    if state.task.has_masks() && !emitted.is_empty() {
        let mf = mask_features(&fused[0].f, frame, &state.params.weights)?;
        for o in &mut emitted {
            o.detection.mask = Some(mask_from_features(
                &mf,
                &fused[0].f,
                &o.detection,
                &state.params,
            )?);
        }
    }
    state.prev_pyramid = Some(pyr);
    state.frame_index += 1;
    Ok(emitted)
}
