//! The `onetrack` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::config::read_tracker_config;
use super::io::{
    load_weights, read_kv, read_masks, read_mot_csv, read_sequence, save_weights, spec_from_kv,
    write_masks, write_mot_csv, write_sequence,
};
use super::run::{evaluate, track_sequence, ResultSet};
use super::selftest::run_selftest;
use super::synth::{generate_sequence, SequenceSpec};
use super::train::{train_set, train_toy, TrainHyper, TRAIN_SEQUENCES};
use crate::correspondence::TaskKind;
use crate::error::{Error, Result};
use crate::tracker::TrackerConfig;

#[derive(Debug, Parser)]
#[command(
    name = "onetrack",
    version,
    about = "Unified object tracking and segmentation on synthetic clips"
)]
struct Cli {
    /// Run single-threaded and leave timings out of every artifact.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Simulate(SimulateArgs),
    /// Run the tracker over a sequence directory.
    Track(TrackArgs),
    /// Score tracker output against ground truth.
    Eval(EvalArgs),
    /// Train a small model on generated clips.
    TrainToy(TrainArgs),
    /// Run the built-in checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// key=value sequence spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    weights: PathBuf,
    /// Sequence directory written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value tracker settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated first-frame ids to follow (SOT/VOS).
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    task: TaskKind,
    /// Sequence directory with ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Directory written by `track`.
    #[arg(long)]
    pred: PathBuf,
    /// Where to write `metrics.json` and `metrics.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Weights file to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace as CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mask_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mask_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Number of generated training clips.
    #[arg(long, default_value_t = TRAIN_SEQUENCES)]
    sequences: usize,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn simulate(a: &SimulateArgs) -> Result<String> {
    let mut spec = match &a.spec {
        Some(p) => spec_from_kv(read_kv(p)?, p)?,
        None => SequenceSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(n) = a.objects {
        spec.num_objects = n;
    }
    let seq = generate_sequence(&spec)?;
    write_sequence(&a.out, &seq)?;
    Ok(format!(
        "wrote {} frames to {}\n",
        seq.frames.len(),
        a.out.display()
    ))
}

fn track(a: &TrackArgs) -> Result<String> {
    let (model, _) = load_weights(&a.weights)?;
    let cfg = match &a.config {
        Some(p) => read_tracker_config(p)?,
        None => TrackerConfig::default(),
    };
    let data = read_sequence(&a.input)?;
    let res = track_sequence(a.task, &model, cfg, &data, a.targets.as_deref())?;
    write_mot_csv(&res.records, &a.out.join("results.txt"))?;
    write_masks(&a.out, &res.masks)?;
    Ok(format!(
        "{} records, {} masks\n",
        res.records.len(),
        res.masks.len()
    ))
}

fn eval(a: &EvalArgs) -> Result<String> {
    let gt = read_sequence(&a.gt)?;
    let res = ResultSet {
        records: read_mot_csv(&a.pred.join("results.txt"))?,
        masks: read_masks(&a.pred)?,
    };
    let report = evaluate(a.task, &gt, &res)?;
    let kv = report.to_kv();
    if let Some(dir) = &a.out {
        write_text(&dir.join("metrics.json"), &(report.to_json()? + "\n"))?;
        write_text(&dir.join("metrics.txt"), &kv)?;
    }
    Ok(kv)
}

fn train(a: &TrainArgs, deterministic: bool) -> Result<String> {
    let d = TrainHyper::default();
    let hyper = TrainHyper {
        lr: a.lr.unwrap_or(d.lr),
        mask_lr: a.mask_lr.unwrap_or(d.mask_lr),
        momentum: a.momentum.unwrap_or(d.momentum),
        steps: a.steps.unwrap_or(d.steps),
        mask_steps: a.mask_steps.unwrap_or(d.mask_steps),
        seed: a.seed,
        ..d
    };
    let start = Instant::now();
    let out = train_toy(&train_set(a.seed + 1, a.sequences), &hyper)?;
    save_weights(&out.weights, Some(a.seed), &a.out)?;
    let mut trace = String::from("stage,step,loss\n");
    for e in &out.trace {
        let _ = writeln!(trace, "{},{},{:.17e}", e.stage, e.step, e.loss);
    }
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.csv");
        p.into()
    });
    write_text(&trace_path, &trace)?;
    let mut msg = format!(
        "stage1_final={:.6}\nstage2_final={:.6}\n",
        out.stage1_final, out.stage2_final
    );
    if !deterministic {
        let _ = writeln!(msg, "seconds={:.1}", start.elapsed().as_secs_f64());
    }
    Ok(msg)
}

/// Returns the report and whether every check passed.
fn selftest(a: &SelftestArgs) -> Result<(String, bool)> {
    let checks = run_selftest(a.seed);
    let mut text = String::new();
    for c in &checks {
        text.push_str(&c.line());
        text.push('\n');
    }
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    Ok((text, checks.iter().all(|c| c.passed)))
}

#[cfg(feature = "parallel")]
fn single_thread() {
    // fails only when a pool already exists, which is fine for repeated runs
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global();
}

#[cfg(not(feature = "parallel"))]
fn single_thread() {}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on failure, 2 on bad usage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if cli.deterministic {
        single_thread();
    }
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(a).map(|m| (m, true)),
        Command::Track(a) => track(a).map(|m| (m, true)),
        Command::Eval(a) => eval(a).map(|m| (m, true)),
        Command::TrainToy(a) => train(a, cli.deterministic).map(|m| (m, true)),
        Command::Selftest(a) => selftest(a),
    };
    match outcome {
        Ok((msg, ok)) => {
            print!("{msg}");
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
