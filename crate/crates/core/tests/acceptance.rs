//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use onetrack::assignment::{hungarian, total_cost};
use onetrack::correspondence::{
    extract_at_cells, instance_correspondence, instance_logits, pixel_correspondence, pixel_logits,
    propagate, GroundTruthMatch, InstanceCorrespondence, InstanceEmbedding, TargetMap, TargetPrior,
    TaskKind,
};
use onetrack::embed::{Embedding, FeaturePyramid};
use onetrack::eval::{mot_clear, mots_smotsa, sot_success_auc};
use onetrack::geometry::BBox;
use onetrack::harness::train::default_train_set;
use onetrack::harness::{
    evaluate, generate_sequence, track_sequence, train_toy, SequenceData, SequenceSpec, TrainHyper,
    TrainOutcome,
};
use onetrack::head::{
    detect, fuse_pyramid, unfused, HeadParams, HeadThresholds, HeadWeights, InstanceMask,
    LevelOutput,
};
use onetrack::losses::{
    contrastive_ce_loss, detection_loss, dice, mask_loss, LossResult, DICE_EPS,
};
use onetrack::model::ModelWeights;
use onetrack::numkit::layers::flatten;
use onetrack::numkit::{softmax_rows, Matrix, Tensor};
use onetrack::tracker::TrackerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Held-out sequences, disjoint from the training seeds.
const HELD_OUT: [u64; 3] = [900, 901, 902];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::new(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn max_row_error(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn c1_correspondence_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for _ in 0..1000 {
        let (h, w, c) = (
            rng.gen_range(1..7),
            rng.gen_range(1..7),
            rng.gen_range(1..17),
        );
        let scale = rng.gen_range(0.1..6.0);
        let a = Embedding::new(h, w, random_matrix(&mut rng, h * w, c, scale)).unwrap();
        let b = Embedding::new(h, w, random_matrix(&mut rng, h * w, c, scale)).unwrap();
        let tau = rng.gen_range(0.25..8.0);
        let pc = pixel_correspondence(&a, &b, tau).unwrap();
        worst = worst.max(max_row_error(&pc.c));
        for v in [0.0, 1.0] {
            let out = propagate(&pc, &TargetMap::binary(vec![v; h * w]).unwrap()).unwrap();
            bitwise &= out.values().iter().all(|x| x.to_bits() == v.to_bits());
        }
        let (n, m) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let ia = InstanceEmbedding {
            e: random_matrix(&mut rng, n, c, scale),
            centers: vec![(0, 0); n],
        };
        let ib = InstanceEmbedding {
            e: random_matrix(&mut rng, m, c, scale),
            centers: vec![(0, 0); m],
        };
        worst = worst.max(max_row_error(
            &instance_correspondence(&ia, &ib, tau).unwrap().c,
        ));
    }
    verdict(
        worst <= 1e-9 && bitwise,
        format!("max |row sum - 1| = {worst:.2e}, constant maps bitwise = {bitwise}"),
    )
}

fn c2_submatrix() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = rng.gen_range(1..17);
        let a = Embedding::new(4, 4, random_matrix(&mut rng, 16, c, 3.0)).unwrap();
        let b = Embedding::new(4, 4, random_matrix(&mut rng, 16, c, 3.0)).unwrap();
        let pick = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
            (0..rng.gen_range(1..6))
                .map(|_| (rng.gen_range(0..4), rng.gen_range(0..4)))
                .collect()
        };
        let (cur, refs) = (pick(&mut rng), pick(&mut rng));
        let full = pixel_logits(&a, &b).unwrap();
        let inst = instance_logits(
            &extract_at_cells(&a, &cur).unwrap(),
            &extract_at_cells(&b, &refs).unwrap(),
        )
        .unwrap();
        for (i, &(ri, ci)) in cur.iter().enumerate() {
            for (j, &(rj, cj)) in refs.iter().enumerate() {
                if inst.row(i)[j].to_bits() != full.row(ri * 4 + ci)[rj * 4 + cj].to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} mismatching entries over 100 cases"),
    )
}

fn c3_prior_zero() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut differing = 0;
    let mut with_dets = 0;
    for _ in 0..100 {
        let chans = [
            rng.gen_range(2..9),
            rng.gen_range(2..9),
            rng.gen_range(2..9),
        ];
        let (h, w) = (rng.gen_range(1..4) * 4, rng.gen_range(1..4) * 4);
        let levels = [(h, 0), (h / 2, 1), (h / 4, 2)]
            .iter()
            .map(|&(lh, k)| {
                let lw = w >> k;
                Tensor::new(
                    vec![lh, lw, chans[k]],
                    (0..lh * lw * chans[k])
                        .map(|_| rng.gen_range(0.0..2.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let pyr = FeaturePyramid { levels };
        let params = HeadParams {
            weights: HeadWeights::init(chans, 8, 1, &mut rng),
            thresholds: HeadThresholds {
                score: 0.001,
                ..Default::default()
            },
        };
        let fused = fuse_pyramid(&pyr, &TargetPrior::zeros(h, w)).unwrap();
        let a = detect(&fused, &params).unwrap();
        let b = detect(&unfused(&pyr), &params).unwrap();
        with_dets += usize::from(!b.is_empty());
        // derived PartialEq on f64 fields; compare bits to rule out -0.0 == 0.0
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.score.to_bits() == y.score.to_bits()
                    && [x.bbox.x, x.bbox.y, x.bbox.w, x.bbox.h]
                        .iter()
                        .zip([y.bbox.x, y.bbox.y, y.bbox.w, y.bbox.h])
                        .all(|(p, q)| p.to_bits() == q.to_bits())
                    && x == y
            });
        differing += usize::from(!same);
    }
    verdict(
        differing == 0 && with_dets > 0,
        format!("{differing} differing cases of 100 ({with_dets} produced detections)"),
    )
}

/// Central differences, computed here independently of the library checker.
fn fd_worst<F: Fn(&[f64]) -> LossResult>(f: F, x: &[f64]) -> f64 {
    const H: f64 = 1e-6;
    let analytic = f(x).grad;
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        p[i] = x[i] + H;
        let up = f(&p).value;
        p[i] = x[i] - H;
        let down = f(&p).value;
        p[i] = x[i];
        let numeric = (up - down) / (2.0 * H);
        let scale = analytic[i].abs().max(numeric.abs());
        // coordinates whose gradient is at round-off level carry no relative information
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

fn c4_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let n = rng.gen_range(2..30);
        let g: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        worst[0] = worst[0].max(fd_worst(|x| dice(x, &g, DICE_EPS).unwrap(), &p));

        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut gm = Matrix::zeros(r, c);
        for i in 0..r.min(c) {
            if rng.gen_bool(0.8) {
                gm.set(i, (i + 1) % c, 1.0);
            }
        }
        if (0..r).all(|i| gm.row(i).iter().all(|&v| v == 0.0)) {
            gm.set(0, 0, 1.0);
        }
        let gt = GroundTruthMatch { g: gm };
        let tau = rng.gen_range(0.5..6.0);
        let z: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        worst[1] = worst[1].max(fd_worst(
            |x| {
                let cm = softmax_rows(&Matrix::new(r, c, x.to_vec()).unwrap(), tau).unwrap();
                contrastive_ce_loss(
                    &InstanceCorrespondence {
                        c: cm,
                        empty: false,
                    },
                    &gt,
                    tau,
                )
                .unwrap()
            },
            &z,
        ));

        let shapes = [(4usize, 4usize, 8usize), (2, 2, 16), (1, 1, 32)];
        let gts: Vec<(BBox, u32)> = (0..rng.gen_range(1..3))
            .map(|_| {
                let (w, h) = (rng.gen_range(6.0..20.0), rng.gen_range(6.0..20.0));
                (
                    BBox::new(
                        rng.gen_range(0.0..32.0 - w),
                        rng.gen_range(0.0..32.0 - h),
                        w,
                        h,
                    ),
                    1,
                )
            })
            .collect();
        let raw: Vec<f64> = (0..21 * 6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        worst[2] = worst[2].max(fd_worst(
            |x| {
                let mut off = 0;
                let outs: Vec<LevelOutput> = shapes
                    .iter()
                    .map(|&(h, w, s)| {
                        let k = h * w * 6;
                        let o = LevelOutput {
                            stride: s,
                            raw: Tensor::new(vec![h, w, 6], x[off..off + k].to_vec()).unwrap(),
                        };
                        off += k;
                        o
                    })
                    .collect();
                detection_loss(&outs, &gts, 1).unwrap()
            },
            &raw,
        ));

        let (mh, mw) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let mut bits: Vec<u8> = (0..mh * mw).map(|_| rng.gen_range(0..2)).collect();
        bits[0] = 1;
        let mask = InstanceMask::new(mh, mw, bits).unwrap();
        let logits: Vec<f64> = (0..mh * mw).map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst[3] = worst[3].max(fd_worst(|x| mask_loss(x, &mask).unwrap(), &logits));
    }
    verdict(
        worst.iter().all(|&w| w <= 1e-4),
        format!(
            "max relative error dice {:.1e}, contrastive {:.1e}, detection {:.1e}, mask {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn brute(cost: &Matrix) -> f64 {
    fn go(c: &Matrix, i: usize, used: &mut [bool], acc: f64, best: &mut f64, t: bool) {
        let (r, k) = if t {
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
                go(
                    c,
                    i + 1,
                    used,
                    acc + if t { c.row(j)[i] } else { c.row(i)[j] },
                    best,
                    t,
                );
                used[j] = false;
            }
        }
    }
    let t = cost.rows() > cost.cols();
    let mut best = f64::INFINITY;
    go(
        cost,
        0,
        &mut vec![false; cost.rows().max(cost.cols())],
        0.0,
        &mut best,
        t,
    );
    best
}

fn c5_hungarian() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut bad = 0;
    for k in 0..200 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..8));
        // integer costs so sums are exact regardless of order
        let m = if k % 2 == 0 {
            Matrix::new(
                r,
                c,
                (0..r * c)
                    .map(|_| f64::from(rng.gen_range(0..100u32)))
                    .collect(),
            )
            .unwrap()
        } else {
            Matrix::new(
                r,
                c,
                (0..r * c)
                    .map(|_| f64::from(rng.gen_range(0..4u32)))
                    .collect(),
            )
            .unwrap()
        };
        let pairs = hungarian(&m);
        if pairs.len() != r.min(c) || total_cost(&m, &pairs) != brute(&m) {
            bad += 1;
        }
    }
    verdict(
        bad == 0,
        format!("{bad} of 200 differ from the brute-force minimum"),
    )
}

fn c6_metric_oracles() -> Verdict {
    let b = |x: f64| BBox::new(x, 10.0, 12.0, 12.0);
    let gt: Vec<Vec<(u64, BBox)>> = (0..3).map(|_| vec![(1, b(0.0)), (2, b(50.0))]).collect();
    // frame 2: object 2 changes identity; frame 3: object 2 missed, one spurious box
    let pred = vec![
        vec![(11, b(0.0)), (12, b(50.0))],
        vec![(11, b(0.0)), (13, b(50.0))],
        vec![(11, b(0.0)), (14, b(100.0))],
    ];
    let r = mot_clear(&pred, &gt, 0.5).unwrap();
    let mota = r.get("mota").unwrap();
    let counts = (r.count("fp"), r.count("fn"), r.count("ids"));

    let g = vec![BBox::new(4.0, 4.0, 20.0, 10.0); 12];
    let p = vec![BBox::new(4.0, 4.0, 10.0, 10.0); 12];
    let auc = sot_success_auc(&p, &g).unwrap().get("auc").unwrap();

    let gm = InstanceMask::from_box(&BBox::new(1.0, 1.0, 5.0, 4.0), 10, 10);
    let pm = InstanceMask::from_box(&BBox::new(1.0, 1.0, 4.0, 4.0), 10, 10);
    let smotsa = mots_smotsa(&[vec![(7, pm)]], &[vec![(7, gm)]])
        .unwrap()
        .get("smotsa")
        .unwrap();

    let ok = (mota - 0.5).abs() <= 1e-9
        && counts == (Some(1), Some(1), Some(1))
        && (auc - 11.0 / 21.0).abs() <= 1e-9
        && (smotsa - 0.8).abs() <= 1e-9;
    verdict(
        ok,
        format!("MOTA {mota} (fp, fn, ids) {counts:?}, AUC {auc:.12}, sMOTSA {smotsa:.12}"),
    )
}

fn held_out(seed: u64) -> SequenceData {
    SequenceData::from_synthetic(
        &generate_sequence(&SequenceSpec {
            seed,
            ..Default::default()
        })
        .unwrap(),
    )
}

fn report(task: TaskKind, w: &ModelWeights, data: &SequenceData) -> onetrack::eval::MetricReport {
    let res = track_sequence(task, w, TrackerConfig::default(), data, None).unwrap();
    evaluate(task, data, &res).unwrap()
}

fn c7_sot(out: &TrainOutcome, steps: usize, train_time: Duration) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = steps <= 2000 && train_time < Duration::from_secs(600);
    for seed in HELD_OUT {
        let r = report(TaskKind::Sot, &out.weights, &held_out(seed));
        let (iou, auc) = (r.get("mean_iou").unwrap(), r.get("auc").unwrap());
        ok &= iou >= 0.5 && auc >= 0.5;
        lines.push(format!("seq {seed}: mean IoU {iou:.3} AUC {auc:.3}"));
    }
    verdict(
        ok,
        format!(
            "{}; {steps} steps in {:.0} s",
            lines.join(", "),
            train_time.as_secs_f64()
        ),
    )
}

fn c8_mot(out: &TrainOutcome) -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in HELD_OUT {
        let data = held_out(seed);
        assert_eq!(data.spec.num_objects, 2);
        let r = report(TaskKind::Mot, &out.weights, &data);
        let (mota, ids) = (r.get("mota").unwrap(), r.count("ids").unwrap());
        ok &= mota >= 0.9 && ids == 0;
        lines.push(format!("seq {seed}: MOTA {mota:.3} IDS {ids}"));
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(120);
    verdict(
        ok,
        format!("{} in {:.1} s", lines.join(", "), t.as_secs_f64()),
    )
}

fn c9_masks(out: &TrainOutcome, init: &ModelWeights) -> Verdict {
    let s2 = out.stage_losses(2);
    let first = s2.first().copied().unwrap_or(f64::NAN);
    let reduction = 1.0 - out.stage2_final / first;
    let mut ok = reduction >= 0.5;
    let mut js = Vec::new();
    for seed in HELD_OUT {
        let j = report(TaskKind::Vos, &out.weights, &held_out(seed))
            .get("j")
            .unwrap();
        ok &= j >= 0.6;
        js.push(format!("{j:.3}"));
    }
    // stage 2 alone, starting from fixed stage-1 weights
    let hyper = TrainHyper {
        steps: 0,
        mask_steps: 5,
        ..TrainHyper::default()
    };
    let specs: Vec<SequenceSpec> = default_train_set(1).into_iter().take(2).collect();
    let only2 = train_toy(&specs, &hyper).unwrap();
    let w = &only2.weights;
    let untouched = flatten(&w.backbone) == flatten(&init.backbone)
        && bits(&flatten(&w.interaction)) == bits(&flatten(&init.interaction))
        && bits(&head_non_mask(&w.head)) == bits(&head_non_mask(&init.head))
        && bits(&flatten(&w.head.mask_branch)) != bits(&flatten(&init.head.mask_branch));
    ok &= untouched;
    verdict(
        ok,
        format!(
            "L_mask {first:.4} -> {:.4} ({:.0}% lower), held-out J [{}], non-mask weights unchanged = {untouched}",
            out.stage2_final,
            reduction * 100.0,
            js.join(", ")
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn head_non_mask(h: &HeadWeights) -> Vec<f64> {
    let mut rest = h.clone();
    rest.mask_branch = h.zeros_like().mask_branch;
    rest.controller = h.zeros_like().controller;
    flatten(&rest)
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_onetrack"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn pipeline(dir: &Path) -> bool {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let mut ok = cli(&[
        "selftest",
        "--deterministic",
        "--seed",
        "5",
        "--out",
        &p("selftest.txt"),
    ]);
    ok &= cli(&[
        "simulate",
        "--deterministic",
        "--out",
        &p("seq"),
        "--seed",
        "77",
        "--frames",
        "8",
    ]);
    ok &= cli(&[
        "train-toy",
        "--deterministic",
        "--out",
        &p("w.bin"),
        "--seed",
        "3",
        "--steps",
        "3",
        "--mask-steps",
        "3",
        "--sequences",
        "2",
    ]);
    for task in ["sot", "mot", "vos", "mots"] {
        ok &= cli(&[
            "track",
            "--deterministic",
            "--task",
            task,
            "--weights",
            &p("w.bin"),
            "--input",
            &p("seq"),
            "--out",
            &p(task),
        ]);
        ok &= cli(&[
            "eval",
            "--deterministic",
            "--task",
            task,
            "--gt",
            &p("seq"),
            "--pred",
            &p(task),
            "--out",
            &p(task),
        ]);
    }
    ok
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ran = pipeline(a.path()) && pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    let same = fa == fb;
    verdict(
        ran && same && !fa.is_empty(),
        format!(
            "runs succeeded = {ran}, {} artifacts, identical = {same}",
            fa.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run for real invocations
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let mut show = |n: u32, name: &str, t: Instant, v: Verdict| {
        all &= v.passed;
        println!(
            "{} criterion {n:>2}: {name}: {} [{:.1} s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    };
    let timed = |limit: u64, f: fn() -> Verdict| -> (Instant, Verdict) {
        let t = Instant::now();
        let mut v = f();
        if t.elapsed() > Duration::from_secs(limit) {
            v.passed = false;
            v.detail.push_str(&format!(" (over the {limit} s budget)"));
        }
        (t, v)
    };
    let (t, v) = timed(5, c1_correspondence_algebra);
    show(1, "correspondence algebra", t, v);
    let (t, v) = timed(5, c2_submatrix);
    show(2, "instance logits index pixel logits", t, v);
    let (t, v) = timed(10, c3_prior_zero);
    show(3, "zero prior leaves detection unchanged", t, v);
    let (t, v) = timed(30, c4_gradients);
    show(4, "gradient fidelity", t, v);
    let (t, v) = timed(10, c5_hungarian);
    show(5, "assignment optimality", t, v);
    let (t, v) = timed(1, c6_metric_oracles);
    show(6, "metric oracles", t, v);

    let hyper = TrainHyper::default();
    let init = ModelWeights::init(hyper.seed, hyper.model).unwrap();
    let t = Instant::now();
    let trained = train_toy(&default_train_set(1), &hyper);
    let train_time = t.elapsed();
    match trained {
        Ok(out) => {
            show(
                7,
                "synthetic SOT",
                t,
                c7_sot(&out, hyper.steps + hyper.mask_steps, train_time),
            );
            let t = Instant::now();
            show(8, "synthetic MOT", t, c8_mot(&out));
            let t = Instant::now();
            show(9, "synthetic VOS/MOTS masks", t, c9_masks(&out, &init));
        }
        Err(e) => {
            for (n, name) in [
                (7, "synthetic SOT"),
                (8, "synthetic MOT"),
                (9, "synthetic VOS/MOTS masks"),
            ] {
                show(n, name, t, verdict(false, format!("training failed: {e}")));
            }
        }
    }
    let t = Instant::now();
    show(10, "deterministic artifacts", t, c10_determinism());
    if !all {
        std::process::exit(1);
    }
}
