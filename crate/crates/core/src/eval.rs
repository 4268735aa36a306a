//! Task metrics: Success AUC, J&F, CLEAR MOT with IDF1, and sMOTSA.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::assignment::solve;
use crate::correspondence::TaskKind;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::InstanceMask;
use crate::numkit::Matrix;

/// Named scalar metrics plus integer counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
}

impl MetricReport {
    fn new(task: TaskKind) -> Self {
        Self {
            task,
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn count(&self, key: &str) -> Option<u64> {
        self.counts.get(key).copied()
    }

    /// Flat `key=value` lines, metrics then counts, each sorted by key.
    pub fn to_kv(&self) -> String {
        let mut s = format!("task={}\n", self.task);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.counts {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(
            format!("{}×{}", a.h, a.w),
            format!("{}×{}", b.h, b.w),
        ));
    }
    Ok(a.iou(b))
}

/// Success over IoU thresholds `0, 0.05, …, 1` (IoU ≥ t), its mean as AUC,
/// and precision at 20 px center distance.
pub fn sot_success_auc(pred: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let n = ious.len() as f64;
    let auc = (0..=20)
        .map(|k| {
            let t = k as f64 / 20.0;
            ious.iter().filter(|&&v| v >= t).count() as f64 / n
        })
        .sum::<f64>()
        / 21.0;
    let precision = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (a, b) = (p.center(), g.center());
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= 20.0
        })
        .count() as f64
        / n;
    let mut r = MetricReport::new(TaskKind::Sot);
    r.metrics.insert("auc".into(), auc);
    r.metrics.insert("precision".into(), precision);
    r.metrics
        .insert("mean_iou".into(), ious.iter().sum::<f64>() / n);
    r.counts.insert("frames".into(), pred.len() as u64);
    Ok(r)
}

/// Mask pixels with a 4-neighbour outside the mask (the frame border counts
/// as outside).
pub fn boundary(m: &InstanceMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == m.h
                || x + 1 == m.w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-measure with a one-pixel (Chebyshev) match tolerance.
pub fn boundary_f(pred: &InstanceMask, gt: &InstanceMask) -> f64 {
    let bp = boundary(pred);
    let bg = boundary(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let near = |set: &[(usize, usize)], h: usize, w: usize| {
        let mut grid = vec![false; h * w];
        for &(y, x) in set {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        grid[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
        grid
    };
    let near_g = near(&bg, gt.h, gt.w);
    let near_p = near(&bp, pred.h, pred.w);
    let precision =
        bp.iter().filter(|&&(y, x)| near_g[y * gt.w + x]).count() as f64 / bp.len() as f64;
    let recall =
        bg.iter().filter(|&&(y, x)| near_p[y * pred.w + x]).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Region similarity for one frame; two empty masks agree perfectly.
pub fn region_j(pred: &InstanceMask, gt: &InstanceMask) -> f64 {
    if pred.area() == 0 && gt.area() == 0 {
        1.0
    } else {
        pred.iou(gt)
    }
}

/// Mean J and F over frames of one object.
pub fn vos_jf(pred: &[InstanceMask], gt: &[InstanceMask]) -> Result<MetricReport> {
    vos_jf_objects(&[(pred.to_vec(), gt.to_vec())])
}

/// J and F averaged over frames, then over objects.
pub fn vos_jf_objects(objects: &[(Vec<InstanceMask>, Vec<InstanceMask>)]) -> Result<MetricReport> {
    if objects.is_empty() {
        return Err(Error::invalid("no objects to evaluate"));
    }
    let (mut j_sum, mut f_sum, mut frames) = (0.0, 0.0, 0u64);
    for (pred, gt) in objects {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::shape(gt.len(), pred.len()));
        }
        let (mut j, mut f) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            if (p.h, p.w) != (g.h, g.w) {
                return Err(Error::shape(
                    format!("{}×{}", g.h, g.w),
                    format!("{}×{}", p.h, p.w),
                ));
            }
            j += region_j(p, g);
            f += boundary_f(p, g);
        }
        j_sum += j / pred.len() as f64;
        f_sum += f / pred.len() as f64;
        frames += pred.len() as u64;
    }
    let n = objects.len() as f64;
    let (j, f) = (j_sum / n, f_sum / n);
    let mut r = MetricReport::new(TaskKind::Vos);
    r.metrics.insert("j".into(), j);
    r.metrics.insert("f".into(), f);
    r.metrics.insert("jf".into(), (j + f) / 2.0);
    r.counts.insert("frames".into(), frames);
    r.counts.insert("objects".into(), objects.len() as u64);
    Ok(r)
}

/// Raw CLEAR and identity counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClearCounts {
    pub gt: u64,
    pub fp: u64,
    pub fn_: u64,
    pub ids: u64,
    pub matches: u64,
    pub overlap_sum: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

impl ClearCounts {
    pub fn mota(&self) -> f64 {
        1.0 - (self.fp + self.fn_ + self.ids) as f64 / self.gt.max(1) as f64
    }

    pub fn idf1(&self) -> f64 {
        let den = 2 * self.idtp + self.idfp + self.idfn;
        if den == 0 {
            1.0
        } else {
            2.0 * self.idtp as f64 / den as f64
        }
    }
}

fn check_unique<T>(frames: &[Vec<(u64, T)>]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        let mut seen = HashSet::new();
        if !f.iter().all(|(id, _)| seen.insert(*id)) {
            return Err(Error::invalid(format!("duplicate id in frame {}", t + 1)));
        }
    }
    Ok(())
}

/// CLEAR matching: previous correspondences are kept while their overlap
/// stays at or above `thresh`, the rest is assigned by maximum overlap.
/// Identity counts come from a global one-to-one id matching.
pub fn clear_counts<T, F>(
    pred: &[Vec<(u64, T)>],
    gt: &[Vec<(u64, T)>],
    thresh: f64,
    sim: F,
) -> Result<ClearCounts>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} frames", gt.len()), pred.len()));
    }
    check_unique(pred)?;
    check_unique(gt)?;
    let mut c = ClearCounts::default();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut active: HashMap<u64, u64> = HashMap::new();
    let mut pair_hits: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut gt_total: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pred_total: BTreeMap<u64, u64> = BTreeMap::new();
    for (pf, gf) in pred.iter().zip(gt) {
        let mut pf: Vec<&(u64, T)> = pf.iter().collect();
        let mut gf: Vec<&(u64, T)> = gf.iter().collect();
        pf.sort_by_key(|p| p.0);
        gf.sort_by_key(|g| g.0);
        let mut s = Matrix::zeros(gf.len(), pf.len());
        for (i, g) in gf.iter().enumerate() {
            *gt_total.entry(g.0).or_default() += 1;
            for (j, p) in pf.iter().enumerate() {
                let v = sim(&p.1, &g.1)?;
                s.set(i, j, v);
                if v >= thresh {
                    *pair_hits.entry((g.0, p.0)).or_default() += 1;
                }
            }
        }
        for p in &pf {
            *pred_total.entry(p.0).or_default() += 1;
        }
        let mut g_used = vec![false; gf.len()];
        let mut p_used = vec![false; pf.len()];
        let mut matched: Vec<(usize, usize)> = Vec::new();
        for (i, g) in gf.iter().enumerate() {
            if let Some(&pid) = active.get(&g.0) {
                if let Some(j) = pf.iter().position(|p| p.0 == pid) {
                    if !p_used[j] && s.get(i, j) >= thresh {
                        g_used[i] = true;
                        p_used[j] = true;
                        matched.push((i, j));
                    }
                }
            }
        }
        let gi: Vec<usize> = (0..gf.len()).filter(|&i| !g_used[i]).collect();
        let pj: Vec<usize> = (0..pf.len()).filter(|&j| !p_used[j]).collect();
        let mut cost = Matrix::zeros(gi.len(), pj.len());
        for (a, &i) in gi.iter().enumerate() {
            for (b, &j) in pj.iter().enumerate() {
                let v = s.get(i, j);
                cost.set(
                    a,
                    b,
                    if v >= thresh {
                        1.0 - v
                    } else {
                        crate::assignment::SENTINEL
                    },
                );
            }
        }
        for (a, b) in crate::assignment::hungarian(&cost) {
            let (i, j) = (gi[a], pj[b]);
            if let Some(&prev) = last.get(&gf[i].0) {
                if prev != pf[j].0 {
                    c.ids += 1;
                }
            }
            matched.push((i, j));
        }
        c.gt += gf.len() as u64;
        c.matches += matched.len() as u64;
        c.fn_ += (gf.len() - matched.len()) as u64;
        c.fp += (pf.len() - matched.len()) as u64;
        active.clear();
        for &(i, j) in &matched {
            c.overlap_sum += s.get(i, j);
            last.insert(gf[i].0, pf[j].0);
            active.insert(gf[i].0, pf[j].0);
        }
    }
    // global id matching maximizing co-detections
    let gids: Vec<u64> = gt_total.keys().copied().collect();
    let pids: Vec<u64> = pred_total.keys().copied().collect();
    let mut m = Matrix::zeros(gids.len(), pids.len());
    for (i, g) in gids.iter().enumerate() {
        for (j, p) in pids.iter().enumerate() {
            m.set(
                i,
                j,
                -(pair_hits.get(&(*g, *p)).copied().unwrap_or(0) as f64),
            );
        }
    }
    c.idtp = solve(&m).iter().map(|&(i, j)| -m.get(i, j) as u64).sum();
    c.idfn = gt_total.values().sum::<u64>() - c.idtp;
    c.idfp = pred_total.values().sum::<u64>() - c.idtp;
    Ok(c)
}

fn clear_report(task: TaskKind, c: &ClearCounts) -> MetricReport {
    let mut r = MetricReport::new(task);
    r.metrics.insert("mota".into(), c.mota());
    r.metrics.insert("idf1".into(), c.idf1());
    r.metrics.insert(
        "motp".into(),
        if c.matches == 0 {
            0.0
        } else {
            c.overlap_sum / c.matches as f64
        },
    );
    for (k, v) in [
        ("gt", c.gt),
        ("fp", c.fp),
        ("fn", c.fn_),
        ("ids", c.ids),
        ("matches", c.matches),
    ] {
        r.counts.insert(k.into(), v);
    }
    r
}

/// CLEAR metrics and IDF1 on boxes.
pub fn mot_clear(
    pred: &[Vec<(u64, BBox)>],
    gt: &[Vec<(u64, BBox)>],
    iou_thresh: f64,
) -> Result<MetricReport> {
    let c = clear_counts(pred, gt, iou_thresh, |a, b| Ok(a.iou(b)))?;
    Ok(clear_report(TaskKind::Mot, &c))
}

/// `sMOTSA = (Σ matched mask IoU − FP − IDS) / GT` with mask IoU ≥ 0.5.
pub fn mots_smotsa(
    pred: &[Vec<(u64, InstanceMask)>],
    gt: &[Vec<(u64, InstanceMask)>],
) -> Result<MetricReport> {
    let c = clear_counts(pred, gt, 0.5, |a, b| mask_iou(a, b))?;
    let mut r = clear_report(TaskKind::Mots, &c);
    let g = c.gt.max(1) as f64;
    r.metrics.insert(
        "smotsa".into(),
        (c.overlap_sum - c.fp as f64 - c.ids as f64) / g,
    );
    r.metrics.insert("motsa".into(), c.mota());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64) -> BBox {
        BBox::new(x, y, 10.0, 10.0)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(3.0, 3.0, 1.0, 1.0)), 0.0);
        assert!((box_iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn success_examples() {
        let g = vec![b(0.0, 0.0); 4];
        let r = sot_success_auc(&g, &g).unwrap();
        assert_eq!(r.get("auc"), Some(1.0));
        assert_eq!(r.get("precision"), Some(1.0));
        let far = vec![b(50.0, 50.0); 4];
        assert!(
            (sot_success_auc(&far, &g).unwrap().get("auc").unwrap() - 1.0 / 21.0).abs() < 1e-12
        );
        // shifted by a third of the width: IoU exactly 0.5
        let half = vec![BBox::new(10.0 / 3.0, 0.0, 10.0, 10.0); 4];
        assert!((half[0].iou(&g[0]) - 0.5).abs() < 1e-15);
        assert!(sot_success_auc(&[], &[]).is_err());
    }

    #[test]
    fn jf_examples() {
        let gt = InstanceMask::from_box(&BBox::new(2.0, 2.0, 4.0, 4.0), 8, 8);
        let r = vos_jf(&[gt.clone()], &[gt.clone()]).unwrap();
        assert_eq!((r.get("j"), r.get("f")), (Some(1.0), Some(1.0)));
        let inv = InstanceMask::new(8, 8, gt.data.iter().map(|v| 1 - v).collect()).unwrap();
        assert_eq!(vos_jf(&[inv], &[gt]).unwrap().get("j"), Some(0.0));
        let a = InstanceMask::from_box(&BBox::new(2.0, 2.0, 2.0, 2.0), 8, 8);
        let s = InstanceMask::from_box(&BBox::new(3.0, 2.0, 2.0, 2.0), 8, 8);
        assert!((vos_jf(&[s], &[a]).unwrap().get("j").unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_tracking() {
        let gt: Vec<Vec<(u64, BBox)>> = (0..3)
            .map(|t| vec![(1, b(t as f64, 0.0)), (2, b(30.0, t as f64))])
            .collect();
        let r = mot_clear(&gt, &gt, 0.5).unwrap();
        assert_eq!(r.get("mota"), Some(1.0));
        assert_eq!(r.get("idf1"), Some(1.0));
        assert_eq!(r.count("ids"), Some(0));
    }

    #[test]
    fn identity_swap() {
        let gt: Vec<Vec<(u64, BBox)>> = (0..4)
            .map(|_| vec![(1, b(0.0, 0.0)), (2, b(30.0, 0.0))])
            .collect();
        let pred: Vec<Vec<(u64, BBox)>> = (0..4)
            .map(|t| {
                if t == 0 {
                    vec![(10, b(0.0, 0.0)), (20, b(30.0, 0.0))]
                } else {
                    vec![(20, b(0.0, 0.0)), (10, b(30.0, 0.0))]
                }
            })
            .collect();
        let r = mot_clear(&pred, &gt, 0.5).unwrap();
        assert_eq!(r.count("ids"), Some(2));
        assert!((r.get("idf1").unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_mask_smotsa() {
        let g = InstanceMask::from_box(&BBox::new(0.0, 0.0, 5.0, 2.0), 8, 8);
        let p = InstanceMask::from_box(&BBox::new(0.0, 0.0, 4.0, 2.0), 8, 8);
        let r = mots_smotsa(&[vec![(1, p)]], &[vec![(1, g.clone())]]).unwrap();
        assert!((r.get("smotsa").unwrap() - 0.8).abs() < 1e-12);
        let r = mots_smotsa(&[vec![]], &[vec![(1, g)]]).unwrap();
        assert_eq!(r.get("smotsa"), Some(0.0));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = vec![vec![(1, b(0.0, 0.0)), (1, b(20.0, 0.0))]];
        assert!(mot_clear(&f, &f, 0.5).is_err());
    }

    #[test]
    fn report_formats() {
        let g = vec![b(0.0, 0.0)];
        let r = sot_success_auc(&g, &g).unwrap();
        let kv = r.to_kv();
        assert!(kv.starts_with("task=sot\nauc=1\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
