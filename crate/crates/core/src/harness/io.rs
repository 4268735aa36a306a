//! On-disk formats: MOT CSV, RLE masks, PPM frames, weight files, key=value
//! text and sequence directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{ObjectInit, Occlusion, SequenceSpec, ShapeKind, SyntheticSequence};
use crate::embed::Frame;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::InstanceMask;
use crate::model::{ModelSpec, ModelWeights};
use crate::numkit::layers::{flatten, ParamSet};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotRecord {
    pub frame: usize,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub class_id: u32,
    pub visibility: f64,
}

impl MotRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }

    /// Values as they read back after a write.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| format!("{v:.2}").parse::<f64>().unwrap_or(v);
        Self {
            x: r(self.x),
            y: r(self.y),
            w: r(self.w),
            h: r(self.h),
            conf: r(self.conf),
            visibility: r(self.visibility),
            ..*self
        }
    }
}

pub fn format_mot_csv(records: &[MotRecord]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut s = String::new();
    for r in sorted {
        s.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{},{:.2}\n",
            r.frame, r.id, r.x, r.y, r.w, r.h, r.conf, r.class_id, r.visibility
        ));
    }
    s
}

pub fn parse_mot_csv(text: &str, path: &Path) -> Result<Vec<MotRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(parse_err(
                path,
                n,
                format!("expected 9 fields, found {}", f.len()),
            ));
        }
        let num = |k: usize| {
            f[k].parse::<f64>().map_err(|_| {
                parse_err(
                    path,
                    n,
                    format!("field {} `{}` is not a number", k + 1, f[k]),
                )
            })
        };
        let int = |k: usize| {
            f[k].parse::<u64>().map_err(|_| {
                parse_err(
                    path,
                    n,
                    format!("field {} `{}` is not an integer", k + 1, f[k]),
                )
            })
        };
        let r = MotRecord {
            frame: int(0)? as usize,
            id: int(1)?,
            x: num(2)?,
            y: num(3)?,
            w: num(4)?,
            h: num(5)?,
            conf: num(6)?,
            class_id: int(7)? as u32,
            visibility: num(8)?,
        };
        if r.frame == 0 {
            return Err(parse_err(path, n, "frame numbers start at 1"));
        }
        if !(r.w > 0.0 && r.h > 0.0) {
            return Err(parse_err(path, n, "box width and height must be positive"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_mot_csv(path: &Path) -> Result<Vec<MotRecord>> {
    parse_mot_csv(&read_text(path)?, path)
}

pub fn write_mot_csv(records: &[MotRecord], path: &Path) -> Result<()> {
    write_bytes(path, format_mot_csv(records).as_bytes())
}

/// Row-major run lengths starting with a (possibly empty) zero run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &InstanceMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0;
    for &v in &mask.data {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        height: mask.h,
        width: mask.w,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<InstanceMask> {
    let total: usize = rle.counts.iter().sum();
    if total != rle.height * rle.width {
        return Err(Error::invalid(format!(
            "run lengths sum to {total}, expected {}",
            rle.height * rle.width
        )));
    }
    let mut data = Vec::with_capacity(total);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat((i % 2) as u8).take(c));
    }
    InstanceMask::new(rle.height, rle.width, data)
}

pub fn format_rle(rle: &RleMask) -> String {
    let counts: Vec<String> = rle.counts.iter().map(|c| c.to_string()).collect();
    format!("{} {}\n{}\n", rle.height, rle.width, counts.join(" "))
}

pub fn parse_rle(text: &str, path: &Path) -> Result<RleMask> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing `height width` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(path, 1, format!("bad dimension `{t}`")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(parse_err(path, 1, "header must be `height width`"));
    }
    let counts = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(path, 2, format!("bad run length `{t}`")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let rle = RleMask {
        height: dims[0],
        width: dims[1],
        counts,
    };
    let total: usize = rle.counts.iter().sum();
    if total != rle.height * rle.width {
        return Err(parse_err(
            path,
            2,
            format!(
                "run lengths sum to {total}, expected {}",
                rle.height * rle.width
            ),
        ));
    }
    Ok(rle)
}

pub fn read_mask(path: &Path) -> Result<InstanceMask> {
    rle_decode(&parse_rle(&read_text(path)?, path)?)
}

pub fn write_mask(mask: &InstanceMask, path: &Path) -> Result<()> {
    write_bytes(path, format_rle(&rle_encode(mask)).as_bytes())
}

/// Plain-text PPM (P3, maxval 255); values are rounded to the nearest level.
pub fn format_ppm(frame: &Frame) -> String {
    let (h, w) = (frame.height(), frame.width());
    let mut s = format!("P3\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .flat_map(|x| frame.pixel(y, x))
            .map(|v| ((v * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_ppm(text: &str, path: &Path) -> Result<Frame> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    if tokens.len() < 4 || tokens[0] != "P3" {
        return Err(parse_err(path, 1, "not a P3 image"));
    }
    let num = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| parse_err(path, 2, format!("bad number `{t}`")))
    };
    let (w, h, max) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if max == 0 || max > 65535 {
        return Err(parse_err(path, 3, format!("bad maxval {max}")));
    }
    let values = &tokens[4..];
    if values.len() != w * h * 3 {
        return Err(parse_err(
            path,
            4,
            format!("expected {} samples, found {}", w * h * 3, values.len()),
        ));
    }
    let data = values
        .iter()
        .map(|t| num(t).map(|v| v.min(max) as f64 / max as f64))
        .collect::<Result<Vec<f64>>>()?;
    Frame::new(h, w, data)
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    parse_ppm(&read_text(path)?, path)
}

pub fn write_ppm(frame: &Frame, path: &Path) -> Result<()> {
    write_bytes(path, format_ppm(frame).as_bytes())
}

const WEIGHTS_FORMAT: &str = "onetrack-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Vec<usize>)>,
}

/// One JSON header line, then every parameter as little-endian `f64`.
pub fn encode_weights(w: &ModelWeights, seed: Option<u64>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    w.visit("", &mut |name, t| tensors.push((name, t.shape().to_vec())));
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        seed,
        spec: w.spec,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in flatten(w) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<(ModelWeights, WeightsHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(path, 1, "missing header line"))?;
    let header: WeightsHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.format != WEIGHTS_FORMAT || header.version != WEIGHTS_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut w = ModelWeights::zeros(header.spec)?;
    let mut expected = Vec::new();
    w.visit("", &mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected != header.tensors {
        return Err(parse_err(
            path,
            1,
            "tensor layout does not match the model spec",
        ));
    }
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(parse_err(
            path,
            2,
            "payload is not a whole number of f64 values",
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    crate::numkit::layers::assign(&mut w, &values)?;
    Ok((w, header))
}

pub fn save_weights(w: &ModelWeights, seed: Option<u64>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_weights(w, seed)?)
}

pub fn load_weights(path: &Path) -> Result<(ModelWeights, WeightsHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Flat `key=value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, format!("expected key=value, found `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(parse_err(path, i + 1, "empty key"));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate key `{k}`")));
        }
    }
    Ok(map)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_kv(&read_text(path)?, path)
}

/// Typed access to a parsed key=value map; every key must be consumed.
pub struct KvReader<'a> {
    map: BTreeMap<String, String>,
    path: &'a Path,
}

impl<'a> KvReader<'a> {
    pub fn new(map: BTreeMap<String, String>, path: &'a Path) -> Self {
        Self { map, path }
    }

    fn err(&self, key: &str, msg: String) -> Error {
        Error::invalid(format!("{}: key `{key}`: {msg}", self.path.display()))
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *into = v
                .parse()
                .map_err(|_| self.err(key, format!("cannot parse `{v}`")))?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(k, "unknown key".into())),
            None => Ok(()),
        }
    }
}

fn parse_rgb(s: &str) -> Option<[u8; 3]> {
    let v: Vec<u8> = s
        .split(',')
        .map(|t| t.trim().parse().ok())
        .collect::<Option<_>>()?;
    v.try_into().ok()
}

fn list<T, F: Fn(&str) -> Option<T>>(s: &str, sep: char, f: F) -> Option<Vec<T>> {
    s.split(sep)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(f)
        .collect()
}

pub fn spec_from_kv(map: BTreeMap<String, String>, path: &Path) -> Result<SequenceSpec> {
    let mut s = SequenceSpec::default();
    let mut r = KvReader::new(map, path);
    r.take("frames", &mut s.frames)?;
    r.take("height", &mut s.height)?;
    r.take("width", &mut s.width)?;
    r.take("num_objects", &mut s.num_objects)?;
    r.take("min_size", &mut s.min_size)?;
    r.take("max_size", &mut s.max_size)?;
    r.take("min_speed", &mut s.min_speed)?;
    r.take("max_speed", &mut s.max_speed)?;
    r.take("jitter", &mut s.jitter)?;
    r.take("seed", &mut s.seed)?;
    let bad = |k: &str, v: &str| {
        Error::invalid(format!("{}: key `{k}`: cannot parse `{v}`", path.display()))
    };
    if let Some(v) = r.take_raw("shapes") {
        s.shapes =
            list(&v, ',', |t| t.parse::<ShapeKind>().ok()).ok_or_else(|| bad("shapes", &v))?;
    }
    if let Some(v) = r.take_raw("background") {
        s.background = parse_rgb(&v).ok_or_else(|| bad("background", &v))?;
    }
    if let Some(v) = r.take_raw("colors") {
        s.colors = list(&v, ';', parse_rgb).ok_or_else(|| bad("colors", &v))?;
    }
    if let Some(v) = r.take_raw("occlusions") {
        s.occlusions = list(&v, ';', |t| {
            let (id, range) = t.split_once(':')?;
            let (a, b) = range.split_once('-')?;
            Some(Occlusion {
                id: id.trim().parse().ok()?,
                start: a.trim().parse().ok()?,
                end: b.trim().parse().ok()?,
            })
        })
        .ok_or_else(|| bad("occlusions", &v))?;
    }
    if let Some(v) = r.take_raw("objects") {
        s.objects = list(&v, ';', |t| {
            let f: Vec<&str> = t.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return None;
            }
            let n: Vec<f64> = f[..6]
                .iter()
                .map(|x| x.parse().ok())
                .collect::<Option<_>>()?;
            Some(ObjectInit {
                bbox: BBox::new(n[0], n[1], n[2], n[3]),
                velocity: (n[4], n[5]),
                shape: f[6].parse().ok()?,
            })
        })
        .ok_or_else(|| bad("objects", &v))?;
    }
    r.finish()?;
    Ok(s)
}

pub fn spec_to_kv(s: &SequenceSpec) -> String {
    let rgb = |c: &[u8; 3]| format!("{},{},{}", c[0], c[1], c[2]);
    let mut p: Vec<(String, String)> = vec![
        ("frames".into(), s.frames.to_string()),
        ("height".into(), s.height.to_string()),
        ("width".into(), s.width.to_string()),
        ("num_objects".into(), s.num_objects.to_string()),
        (
            "shapes".into(),
            s.shapes
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("min_size".into(), s.min_size.to_string()),
        ("max_size".into(), s.max_size.to_string()),
        ("min_speed".into(), s.min_speed.to_string()),
        ("max_speed".into(), s.max_speed.to_string()),
        ("jitter".into(), s.jitter.to_string()),
        ("background".into(), rgb(&s.background)),
        ("seed".into(), s.seed.to_string()),
    ];
    if !s.colors.is_empty() {
        p.push((
            "colors".into(),
            s.colors.iter().map(rgb).collect::<Vec<_>>().join(";"),
        ));
    }
    if !s.occlusions.is_empty() {
        let v: Vec<String> = s
            .occlusions
            .iter()
            .map(|o| format!("{}:{}-{}", o.id, o.start, o.end))
            .collect();
        p.push(("occlusions".into(), v.join(";")));
    }
    if !s.objects.is_empty() {
        let v: Vec<String> = s
            .objects
            .iter()
            .map(|o| {
                let b = o.bbox;
                format!(
                    "{},{},{},{},{},{},{}",
                    b.x, b.y, b.w, b.h, o.velocity.0, o.velocity.1, o.shape
                )
            })
            .collect();
        p.push(("objects".into(), v.join(";")));
    }
    format_kv(&p)
}

/// A sequence as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub spec: SequenceSpec,
    pub frames: Vec<Frame>,
    pub gt: Vec<MotRecord>,
    /// Keyed by `(frame, id)`, frames 1-based.
    pub masks: BTreeMap<(usize, u64), InstanceMask>,
}

impl SequenceData {
    /// Records of frame `t` (1-based), ordered by id.
    pub fn records_at(&self, t: usize) -> Vec<MotRecord> {
        records_at(&self.gt, t)
    }
}

pub fn records_at(records: &[MotRecord], t: usize) -> Vec<MotRecord> {
    let mut v: Vec<MotRecord> = records.iter().filter(|r| r.frame == t).copied().collect();
    v.sort_by_key(|r| r.id);
    v
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:06}.ppm"))
}

pub fn mask_path(dir: &Path, t: usize, id: u64) -> PathBuf {
    dir.join("masks").join(format!("{t:06}_{id}.rle"))
}

pub fn write_masks(dir: &Path, masks: &BTreeMap<(usize, u64), InstanceMask>) -> Result<()> {
    for (&(t, id), m) in masks {
        write_mask(m, &mask_path(dir, t, id))?;
    }
    Ok(())
}

/// Reads every `masks/<frame>_<id>.rle` under `dir`; a missing directory is
/// an empty set.
pub fn read_masks(dir: &Path) -> Result<BTreeMap<(usize, u64), InstanceMask>> {
    let mdir = dir.join("masks");
    let mut out = BTreeMap::new();
    if !mdir.is_dir() {
        return Ok(out);
    }
    let entries = fs::read_dir(&mdir).map_err(|e| Error::io(&mdir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&mdir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("rle") {
            continue;
        }
        let key = stem
            .split_once('_')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| parse_err(&path, 0, "file name must be <frame>_<id>.rle"))?;
        out.insert(key, read_mask(&path)?);
    }
    Ok(out)
}

pub fn sequence_records(seq: &SyntheticSequence) -> Vec<MotRecord> {
    seq.gt
        .iter()
        .enumerate()
        .flat_map(|(t, objs)| {
            objs.iter().map(move |o| MotRecord {
                frame: t + 1,
                id: o.id,
                x: o.bbox.x,
                y: o.bbox.y,
                w: o.bbox.w,
                h: o.bbox.h,
                conf: 1.0,
                class_id: o.class_id,
                visibility: 1.0,
            })
        })
        .collect()
}

/// `seq.txt`, `frames/NNNNNN.ppm`, `gt.txt` and `masks/<frame>_<id>.rle`.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    write_bytes(&dir.join("seq.txt"), spec_to_kv(&seq.spec).as_bytes())?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_ppm(f, &frame_path(dir, t + 1))?;
    }
    write_mot_csv(&sequence_records(seq), &dir.join("gt.txt"))?;
    let masks: BTreeMap<(usize, u64), InstanceMask> = seq
        .gt
        .iter()
        .enumerate()
        .flat_map(|(t, objs)| objs.iter().map(move |o| ((t + 1, o.id), o.mask.clone())))
        .collect();
    write_masks(dir, &masks)
}

pub fn read_sequence(dir: &Path) -> Result<SequenceData> {
    let seq_path = dir.join("seq.txt");
    let spec = spec_from_kv(read_kv(&seq_path)?, &seq_path)?;
    let frames = (1..=spec.frames)
        .map(|t| read_ppm(&frame_path(dir, t)))
        .collect::<Result<Vec<_>>>()?;
    let gt = read_mot_csv(&dir.join("gt.txt"))?;
    let masks = read_masks(dir)?;
    Ok(SequenceData {
        spec,
        frames,
        gt,
        masks,
    })
}
