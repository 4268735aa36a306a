use std::path::Path;

use onetrack::assignment::{hungarian, total_cost};
use onetrack::correspondence::{
    extract_at_cells, instance_logits, pixel_correspondence, pixel_logits, propagate, TargetMap,
};
use onetrack::embed::Embedding;
use onetrack::eval::box_iou;
use onetrack::geometry::BBox;
use onetrack::harness::io::{format_mot_csv, parse_mot_csv};
use onetrack::harness::{
    generate_sequence, rle_decode, rle_encode, MotRecord, SequenceSpec, ShapeKind,
};
use onetrack::head::{fuse, InstanceMask};
use onetrack::numkit::{Matrix, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn embedding_pair() -> impl Strategy<Value = (Embedding, Embedding)> {
    (1usize..5, 1usize..5, 1usize..7).prop_flat_map(|(h, w, c)| {
        (matrix(h * w, c), matrix(h * w, c)).prop_map(move |(a, b)| {
            (
                Embedding::new(h, w, a).unwrap(),
                Embedding::new(h, w, b).unwrap(),
            )
        })
    })
}

fn brute_min(cost: &Matrix) -> f64 {
    // the smaller side is fully assigned
    fn go(c: &Matrix, i: usize, used: &mut [bool], acc: f64, best: &mut f64, transpose: bool) {
        let (r, k) = if transpose {
            (c.cols(), c.rows())
        } else {
            (c.rows(), c.cols())
        };
        if i == r {
            *best = best.min(acc);
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                let v = if transpose { c.row(j)[i] } else { c.row(i)[j] };
                go(c, i + 1, used, acc + v, best, transpose);
                used[j] = false;
            }
        }
    }
    let transpose = cost.rows() > cost.cols();
    let k = cost.rows().max(cost.cols());
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; k], 0.0, &mut best, transpose);
    best
}

fn mask_extent(m: &InstanceMask) -> Option<(usize, usize, usize, usize)> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in 0..m.h {
        for x in 0..m.w {
            if m.get(y, x) {
                ext = Some(match ext {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    ext
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_rows_sum_to_one((a, b) in embedding_pair(), tau in 0.2f64..8.0) {
        let c = pixel_correspondence(&a, &b, tau).unwrap();
        for i in 0..c.c.rows() {
            let s: f64 = c.c.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(c.c.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn propagation_stays_in_range((a, b) in embedding_pair(), seed in 0u64..1000) {
        let c = pixel_correspondence(&a, &b, 1.0).unwrap();
        let n = a.e.rows();
        let vals: Vec<f64> = (0..n).map(|k| ((k as u64 * 31 + seed) % 7) as f64 / 6.0).collect();
        let (lo, hi) = vals.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        let out = propagate(&c, &TargetMap::soft(vals).unwrap()).unwrap();
        prop_assert!(out.values().iter().all(|v| *v >= lo && *v <= hi));
    }

    #[test]
    fn instance_logits_index_pixel_logits((a, b) in embedding_pair(), picks in prop::collection::vec((0usize..16, 0usize..16), 1..4)) {
        let (h, w) = (a.h, a.w);
        let cells: Vec<(usize, usize)> = picks.iter().map(|&(r, c)| (r % h, c % w)).collect();
        let full = pixel_logits(&a, &b).unwrap();
        let inst = instance_logits(&extract_at_cells(&a, &cells).unwrap(), &extract_at_cells(&b, &cells).unwrap()).unwrap();
        for (i, &(ri, ci)) in cells.iter().enumerate() {
            for (j, &(rj, cj)) in cells.iter().enumerate() {
                prop_assert_eq!(inst.row(i)[j].to_bits(), full.row(ri * w + ci)[rj * w + cj].to_bits());
            }
        }
    }

    #[test]
    fn hungarian_matches_brute_force(r in 1usize..6, c in 1usize..6, seed in prop::collection::vec(0u8..50, 36)) {
        let m = Matrix::new(r, c, seed[..r * c].iter().map(|&v| v as f64).collect()).unwrap();
        let pairs = hungarian(&m);
        prop_assert_eq!(pairs.len(), r.min(c));
        prop_assert_eq!(total_cost(&m, &pairs), brute_min(&m));
    }

    #[test]
    fn zero_prior_fuses_to_identity(h in 1usize..5, w in 1usize..5, c in 1usize..5, vals in prop::collection::vec(-3.0f64..3.0, 100)) {
        let f = Tensor::new(vec![h, w, c], vals[..h * w * c].to_vec()).unwrap();
        prop_assert_eq!(fuse(&f, &Tensor::zeros(&[h, w, 1])).unwrap(), f);
    }

    #[test]
    fn rle_round_trip(h in 1usize..9, w in 1usize..9, bits in prop::collection::vec(0u8..2, 64)) {
        let m = InstanceMask::new(h, w, bits[..h * w].to_vec()).unwrap();
        let rle = rle_encode(&m);
        prop_assert_eq!(rle.counts.iter().sum::<usize>(), h * w);
        prop_assert_eq!(rle_decode(&rle).unwrap(), m);
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec((1usize..20, 1u64..9, 0.0f64..90.0, 0.0f64..60.0, 1.0f64..30.0, 1.0f64..30.0), 1..12)) {
        let mut recs: Vec<MotRecord> = rows.iter().map(|&(frame, id, x, y, w, h)| MotRecord {
            frame, id, x, y, w, h, conf: 1.0, class_id: 1, visibility: 1.0,
        }).collect();
        recs.sort_by_key(|r| (r.frame, r.id));
        recs.dedup_by_key(|r| (r.frame, r.id));
        let text = format_mot_csv(&recs);
        let back = parse_mot_csv(&text, Path::new("p.csv")).unwrap();
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            prop_assert_eq!((a.frame, a.id), (b.frame, b.id));
            prop_assert!((a.x - b.x).abs() <= 0.005 + 1e-9 && (a.w - b.w).abs() <= 0.005 + 1e-9);
        }
        prop_assert_eq!(format_mot_csv(&back), text);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0), b in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0)) {
        let (p, q) = (BBox::new(a.0, a.1, a.2, a.3), BBox::new(b.0, b.1, b.2, b.3));
        let (x, y) = (box_iou(&p, &q), box_iou(&q, &p));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((box_iou(&p, &p) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_masks_match_boxes(seed in 0u64..10_000, n in 1usize..4, ellipse in any::<bool>()) {
        let spec = SequenceSpec {
            frames: 8,
            num_objects: n,
            max_size: 18.0,
            shapes: if ellipse { vec![ShapeKind::Ellipse] } else { vec![ShapeKind::Rectangle, ShapeKind::Ellipse] },
            seed,
            ..Default::default()
        };
        let seq = generate_sequence(&spec).unwrap();
        for objs in &seq.gt {
            for o in objs {
                let (x0, y0, x1, y1) = mask_extent(&o.mask).expect("visible object has pixels");
                let b = o.bbox;
                prop_assert!((x0 as f64 - b.x).abs() <= 1.0);
                prop_assert!((y0 as f64 - b.y).abs() <= 1.0);
                prop_assert!(((x1 + 1) as f64 - (b.x + b.w)).abs() <= 1.0);
                prop_assert!(((y1 + 1) as f64 - (b.y + b.h)).abs() <= 1.0);
            }
        }
    }
}
