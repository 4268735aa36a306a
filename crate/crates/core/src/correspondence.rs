//! Pixel- and instance-level correspondence, target propagation and the
//! per-task target prior.
//!
//! Both correspondences come from the same dot-product kernel, so the
//! instance logits are exactly the pixel logits at the instance cells.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{Embedding, EMBED_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{cell_of, BBox};
use crate::numkit::{matmul_nt, softmax_rows, softmax_rows_backward, Matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sot,
    Mot,
    Vos,
    Mots,
}

impl TaskKind {
    /// SOT and VOS follow a user-given target through propagation.
    pub fn propagates(self) -> bool {
        matches!(self, TaskKind::Sot | TaskKind::Vos)
    }

    pub fn has_masks(self) -> bool {
        matches!(self, TaskKind::Vos | TaskKind::Mots)
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sot" => Ok(Self::Sot),
            "mot" => Ok(Self::Mot),
            "vos" => Ok(Self::Vos),
            "mots" => Ok(Self::Mots),
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sot => "sot",
            Self::Mot => "mot",
            Self::Vos => "vos",
            Self::Mots => "mots",
        })
    }
}

/// Default softmax temperature: `sqrt(c)`, i.e. logits scaled by `1/sqrt(c)`.
pub fn default_temperature(channels: usize) -> f64 {
    (channels as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelCorrespondence {
    /// `hw × hw`; row `i` is current cell `i`, column `k` reference cell `k`.
    pub c: Matrix,
    pub h: usize,
    pub w: usize,
    pub temperature: f64,
}

/// `hw × 1` occupancy on the stride-8 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub t: Matrix,
    pub binary: bool,
}

impl TargetMap {
    /// A reference map; values must be exactly 0 or 1.
    pub fn binary(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("reference target map must be binary"));
        }
        let n = values.len();
        Ok(Self {
            t: Matrix::new(n, 1, values)?,
            binary: true,
        })
    }

    pub fn soft(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("target map values must lie in [0, 1]"));
        }
        let n = values.len();
        Ok(Self {
            t: Matrix::new(n, 1, values)?,
            binary: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        self.t.data()
    }

    pub fn len(&self) -> usize {
        self.t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.t.rows() == 0
    }

    /// Binary map with ones on cells whose centers fall inside `bbox`
    /// (half-open on the right/bottom edges). A box that covers no cell
    /// center marks the cell holding its center instead.
    pub fn from_box(bbox: &BBox, rows: usize, cols: usize) -> Result<Self> {
        let s = EMBED_STRIDE as f64;
        let frame = BBox::new(0.0, 0.0, cols as f64 * s, rows as f64 * s);
        if !bbox.is_valid() || frame.intersection(bbox) <= 0.0 {
            return Err(Error::invalid(format!(
                "box {bbox:?} lies outside the frame"
            )));
        }
        let mut v = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                if cx >= bbox.x && cx < bbox.x2() && cy >= bbox.y && cy < bbox.y2() {
                    v[r * cols + c] = 1.0;
                }
            }
        }
        if v.iter().all(|&x| x == 0.0) {
            let (cx, cy) = bbox.center();
            let cx = cx.clamp(0.0, frame.w - 1e-9);
            let cy = cy.clamp(0.0, frame.h - 1e-9);
            let (r, c) = cell_of(cx, cy, EMBED_STRIDE, rows, cols).expect("clamped into frame");
            v[r * cols + c] = 1.0;
        }
        Self::binary(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEmbedding {
    /// `M × c`
    pub e: Matrix,
    /// Grid cell `(row, col)` each row was copied from.
    pub centers: Vec<(usize, usize)>,
}

impl InstanceEmbedding {
    pub fn len(&self) -> usize {
        self.e.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.e.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCorrespondence {
    /// `N × M`, rows sum to one unless `empty`.
    pub c: Matrix,
    /// Set when either side had no instances.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetPrior {
    /// `h × w × 1`
    pub p: Tensor,
}

impl TargetPrior {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            p: Tensor::zeros(&[h, w, 1]),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.p.data().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMatch {
    /// `N × M` of {0, 1}; at most one 1 per row.
    pub g: Matrix,
}

/// Raw similarities `E_cur E_refᵀ`.
pub fn pixel_logits(e_cur: &Embedding, e_ref: &Embedding) -> Result<Matrix> {
    if e_cur.channels() != e_ref.channels() {
        return Err(Error::shape(
            format!("{} channels", e_ref.channels()),
            e_cur.channels(),
        ));
    }
    if e_cur.e.rows() != e_ref.e.rows() {
        return Err(Error::shape(
            format!("{} cells", e_ref.e.rows()),
            e_cur.e.rows(),
        ));
    }
    matmul_nt(&e_cur.e, &e_ref.e)
}

pub fn pixel_correspondence(
    e_cur: &Embedding,
    e_ref: &Embedding,
    temperature: f64,
) -> Result<PixelCorrespondence> {
    let logits = pixel_logits(e_cur, e_ref)?;
    Ok(PixelCorrespondence {
        c: softmax_rows(&logits, temperature)?,
        h: e_cur.h,
        w: e_cur.w,
        temperature,
    })
}

/// Copies the embedding row under each box center.
pub fn extract_instance_embeddings(e: &Embedding, boxes: &[BBox]) -> Result<InstanceEmbedding> {
    let mut cells = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (cx, cy) = b.center();
        let cell = cell_of(cx, cy, EMBED_STRIDE, e.h, e.w)
            .ok_or_else(|| Error::invalid(format!("box center ({cx}, {cy}) outside the grid")))?;
        cells.push(cell);
    }
    extract_at_cells(e, &cells)
}

pub fn extract_at_cells(e: &Embedding, cells: &[(usize, usize)]) -> Result<InstanceEmbedding> {
    let mut idx = Vec::with_capacity(cells.len());
    for &(r, c) in cells {
        if r >= e.h || c >= e.w {
            return Err(Error::invalid(format!(
                "cell ({r}, {c}) outside {}×{} grid",
                e.h, e.w
            )));
        }
        idx.push(r * e.w + c);
    }
    Ok(InstanceEmbedding {
        e: e.e.select_rows(&idx),
        centers: cells.to_vec(),
    })
}

/// Raw similarities `e_cur e_refᵀ`.
pub fn instance_logits(e_cur: &InstanceEmbedding, e_ref: &InstanceEmbedding) -> Result<Matrix> {
    if e_cur.e.cols() != e_ref.e.cols() {
        return Err(Error::shape(
            format!("{} channels", e_ref.e.cols()),
            e_cur.e.cols(),
        ));
    }
    if e_cur.is_empty() || e_ref.is_empty() {
        return Ok(Matrix::zeros(e_cur.len(), e_ref.len()));
    }
    matmul_nt(&e_cur.e, &e_ref.e)
}

pub fn instance_correspondence(
    e_cur: &InstanceEmbedding,
    e_ref: &InstanceEmbedding,
    temperature: f64,
) -> Result<InstanceCorrespondence> {
    let logits = instance_logits(e_cur, e_ref)?;
    if e_cur.is_empty() || e_ref.is_empty() {
        return Ok(InstanceCorrespondence {
            c: logits,
            empty: true,
        });
    }
    Ok(InstanceCorrespondence {
        c: softmax_rows(&logits, temperature)?,
        empty: false,
    })
}

/// `T̃_cur = C_pix · T_ref`, normalized by the row mass of `C_pix` so that
/// constant maps are reproduced exactly, and clamped into the input range.
pub fn propagate(c: &PixelCorrespondence, t_ref: &TargetMap) -> Result<TargetMap> {
    let n = c.c.cols();
    if t_ref.len() != n {
        return Err(Error::shape(format!("{n} cells"), t_ref.len()));
    }
    let t = t_ref.values();
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let out: Vec<f64> = (0..c.c.rows())
        .map(|i| {
            let row = c.c.row(i);
            let mut num = 0.0;
            let mut den = 0.0;
            for (cv, tv) in row.iter().zip(t) {
                num += cv * tv;
                den += cv;
            }
            (num / den).clamp(lo, hi)
        })
        .collect();
    TargetMap::soft(out)
}

/// Backward of [`propagate`] followed by the row softmax: returns the
/// gradient with respect to the raw logits `E_cur E_refᵀ`.
pub(crate) fn propagate_backward_to_logits(
    c: &PixelCorrespondence,
    t_ref: &TargetMap,
    d_prop: &[f64],
) -> Matrix {
    let n = c.c.cols();
    let t = t_ref.values();
    let mut dc = Matrix::zeros(c.c.rows(), n);
    for i in 0..c.c.rows() {
        let row = c.c.row(i);
        let den: f64 = row.iter().sum();
        let num: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
        let ti = num / den;
        let g = d_prop[i] / den;
        for (k, o) in dc.row_mut(i).iter_mut().enumerate() {
            *o = g * (t[k] - ti);
        }
    }
    let mut dl = softmax_rows_backward(&c.c, &dc);
    dl.data_mut().iter_mut().for_each(|v| *v /= c.temperature);
    dl
}

/// Reshapes the propagated map for SOT/VOS; all zeros for MOT/MOTS.
pub fn make_target_prior(
    t_prop: Option<&TargetMap>,
    task: TaskKind,
    h: usize,
    w: usize,
) -> Result<TargetPrior> {
    if !task.propagates() {
        return Ok(TargetPrior::zeros(h, w));
    }
    let t =
        t_prop.ok_or_else(|| Error::invalid(format!("{task} needs a propagated target map")))?;
    if t.len() != h * w {
        return Err(Error::shape(format!("{} cells", h * w), t.len()));
    }
    Ok(TargetPrior {
        p: Tensor::new(vec![h, w, 1], t.values().to_vec())?,
    })
}

pub fn ground_truth_match<I: Eq + std::hash::Hash + Copy>(
    cur_ids: &[I],
    ref_ids: &[I],
) -> Result<GroundTruthMatch> {
    for ids in [cur_ids, ref_ids] {
        let mut seen = HashSet::new();
        if !ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::invalid("duplicate instance id"));
        }
    }
    let mut g = Matrix::zeros(cur_ids.len(), ref_ids.len());
    for (i, a) in cur_ids.iter().enumerate() {
        if let Some(k) = ref_ids.iter().position(|b| b == a) {
            g.set(i, k, 1.0);
        }
    }
    Ok(GroundTruthMatch { g })
}
