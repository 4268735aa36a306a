//! Quick built-in checks run by `onetrack selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{format_mot_csv, parse_mot_csv, parse_rle, rle_decode, rle_encode, MotRecord};
use super::synth::{generate_sequence, ObjectInit, SequenceSpec, ShapeKind};
use crate::assignment::{hungarian, total_cost};
use crate::correspondence::{
    instance_correspondence, pixel_correspondence, propagate, InstanceEmbedding, TargetMap,
    TargetPrior,
};
use crate::embed::{Embedding, Frame};
use crate::error::Result;
use crate::eval::{mot_clear, mots_smotsa, sot_success_auc};
use crate::geometry::BBox;
use crate::head::{fuse_pyramid, head_forward, unfused, InstanceMask};
use crate::model::{ModelSpec, ModelWeights};
use crate::numkit::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self {
                name,
                passed,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::new(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("sized")
}

fn row_sum_error(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn correspondence_rows(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut constant = true;
    for _ in 0..50 {
        let (h, w, c) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..9),
        );
        let a = Embedding::new(h, w, random_matrix(&mut rng, h * w, c, 3.0))?;
        let b = Embedding::new(h, w, random_matrix(&mut rng, h * w, c, 3.0))?;
        let pc = pixel_correspondence(&a, &b, 1.0)?;
        worst = worst.max(row_sum_error(&pc.c));
        for v in [0.0, 1.0] {
            let t = TargetMap::binary(vec![v; h * w])?;
            constant &= propagate(&pc, &t)?
                .values()
                .iter()
                .all(|x| x.to_bits() == v.to_bits());
        }
        let n = rng.gen_range(1..5);
        let m = rng.gen_range(1..5);
        let ia = InstanceEmbedding {
            e: random_matrix(&mut rng, n, c, 3.0),
            centers: vec![(0, 0); n],
        };
        let ib = InstanceEmbedding {
            e: random_matrix(&mut rng, m, c, 3.0),
            centers: vec![(0, 0); m],
        };
        worst = worst.max(row_sum_error(&instance_correspondence(&ia, &ib, 1.0)?.c));
    }
    Ok((
        worst <= 1e-9 && constant,
        format!("max_row_error={worst:.3e} constant_maps={constant}"),
    ))
}

fn prior_zero(seed: u64) -> Result<(bool, String)> {
    let model = ModelWeights::init(seed, ModelSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (h, w) = (64, 96);
    let mut same = true;
    for _ in 0..3 {
        let frame = Frame::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())?;
        let pyr = model.pyramid(&frame)?;
        let (gh, gw) = frame.grid();
        let fused = fuse_pyramid(&pyr, &TargetPrior::zeros(gh, gw))?;
        let (a, _) = head_forward(&fused, &model.head)?;
        let (b, _) = head_forward(&unfused(&pyr), &model.head)?;
        same &= a == b;
    }
    Ok((same, format!("bitwise_equal={same}")))
}

fn brute(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let (r, c) = (cost.rows(), cost.cols());
        if row == r {
            *best = best.min(acc);
            return;
        }
        let remaining_rows = r - row;
        let free_cols = used.iter().filter(|u| !**u).count();
        if remaining_rows > free_cols {
            // more rows than columns: this row may stay unassigned
            go(cost, row + 1, used, acc, best);
        }
        for j in 0..c {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost.row(row)[j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
    best
}

fn hungarian_brute(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let m = Matrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.gen_range(0..20) as f64).collect(),
        )?;
        if total_cost(&m, &hungarian(&m)) != brute(&m) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("mismatches={bad}")))
}

fn metric_oracles() -> Result<(bool, String)> {
    let b = |x: f64| BBox::new(x, 0.0, 10.0, 10.0);
    // 1 FN, 1 FP, 1 IDS over 6 ground-truth boxes
    let gt: Vec<Vec<(u64, BBox)>> = (0..3).map(|_| vec![(1, b(0.0)), (2, b(40.0))]).collect();
    let pred = vec![
        vec![(1, b(0.0)), (2, b(40.0))],
        vec![(1, b(0.0)), (3, b(40.0))],
        vec![(1, b(0.0)), (5, b(80.0))],
    ];
    let mota = mot_clear(&pred, &gt, 0.5)?.get("mota").unwrap_or(f64::NAN);
    let g = vec![b(0.0); 5];
    let p = vec![BBox::new(0.0, 0.0, 10.0, 5.0); 5];
    let auc = sot_success_auc(&p, &g)?.get("auc").unwrap_or(f64::NAN);
    let gm = InstanceMask::from_box(&BBox::new(0.0, 0.0, 5.0, 2.0), 8, 8);
    let pm = InstanceMask::from_box(&BBox::new(0.0, 0.0, 4.0, 2.0), 8, 8);
    let smotsa = mots_smotsa(&[vec![(1, pm)]], &[vec![(1, gm)]])?
        .get("smotsa")
        .unwrap_or(f64::NAN);
    let ok = (mota - 0.5).abs() <= 1e-9
        && (auc - 11.0 / 21.0).abs() <= 1e-9
        && (smotsa - 0.8).abs() <= 1e-9;
    Ok((
        ok,
        format!("mota={mota:.6} auc={auc:.6} smotsa={smotsa:.6}"),
    ))
}

fn file_formats() -> Result<(bool, String)> {
    let rec = MotRecord {
        frame: 2,
        id: 7,
        x: 1.234,
        y: 5.0,
        w: 10.0,
        h: 12.5,
        conf: 0.9,
        class_id: 1,
        visibility: 1.0,
    };
    let text = format_mot_csv(&[rec.clone()]);
    let back = parse_mot_csv(&text, std::path::Path::new("selftest.csv"))?;
    let csv_ok = text == "2,7,1.23,5.00,10.00,12.50,0.90,1,1.00\n" && back == vec![rec.rounded()];
    let six = parse_mot_csv("1,1,0,0,5,5\n", std::path::Path::new("six.csv"));
    let six_ok = six
        .map_err(|e| e.to_string())
        .err()
        .is_some_and(|e| e.contains("line 1"));
    let m = InstanceMask::new(1, 5, vec![0, 0, 1, 1, 0])?;
    let rle = rle_encode(&m);
    let rle_ok = rle.counts == vec![2, 2, 1]
        && rle_decode(&rle)? == m
        && rle_encode(&InstanceMask::zeros(2, 2)).counts == vec![4]
        && parse_rle("2 2\n4\n", std::path::Path::new("z.rle"))?
            == rle_encode(&InstanceMask::zeros(2, 2));
    Ok((
        csv_ok && six_ok && rle_ok,
        format!("csv={csv_ok} short_line={six_ok} rle={rle_ok}"),
    ))
}

fn generator() -> Result<(bool, String)> {
    let spec = SequenceSpec {
        frames: 6,
        num_objects: 1,
        jitter: 0.0,
        objects: vec![ObjectInit {
            bbox: BBox::new(10.0, 20.0, 14.0, 14.0),
            velocity: (2.0, 0.0),
            shape: ShapeKind::Rectangle,
        }],
        ..Default::default()
    };
    let a = generate_sequence(&spec)?;
    let x5 = a.object(4, 1).map_or(f64::NAN, |o| o.bbox.x);
    let again = generate_sequence(&spec)? == a;
    let ok = (x5 - 18.0).abs() <= 0.5 && again;
    Ok((ok, format!("frame5_x={x5:.2} repeatable={again}")))
}

/// Runs every check; each gets its own seeded stream.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    vec![
        Check::new("correspondence_rows", correspondence_rows(seed)),
        Check::new("prior_zero", prior_zero(seed)),
        Check::new("hungarian_brute_force", hungarian_brute(seed)),
        Check::new("metric_oracles", metric_oracles()),
        Check::new("file_formats", file_formats()),
        Check::new("generator", generator()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest(3) {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn brute_force_handles_rectangles() {
        let m = Matrix::new(3, 1, vec![5.0, 1.0, 3.0]).unwrap();
        assert_eq!(brute(&m), 1.0);
        let m = Matrix::new(1, 3, vec![5.0, 1.0, 3.0]).unwrap();
        assert_eq!(brute(&m), 1.0);
    }
}
