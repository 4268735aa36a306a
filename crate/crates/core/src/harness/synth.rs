//! Seeded synthetic sequences: flat-colored shapes moving at constant
//! velocity in horizontal lanes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Frame;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::InstanceMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(ShapeKind::Rectangle),
            "ellipse" => Ok(ShapeKind::Ellipse),
            _ => Err(Error::invalid(format!("unknown shape `{s}`"))),
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
        })
    }
}

/// Object `id` is hidden for frames `start..=end` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub id: u64,
    pub start: usize,
    pub end: usize,
}

/// Explicit start state for one object, bypassing the lane sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInit {
    pub bbox: BBox,
    pub velocity: (f64, f64),
    pub shape: ShapeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub shapes: Vec<ShapeKind>,
    pub min_size: f64,
    pub max_size: f64,
    /// Speed range per axis in px/frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per-frame positional noise bound, not accumulated.
    pub jitter: f64,
    pub occlusions: Vec<Occlusion>,
    /// Fill colors in 0..=255; generated when empty.
    pub colors: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub objects: Vec<ObjectInit>,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            frames: 30,
            height: 64,
            width: 96,
            num_objects: 2,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            min_size: 12.0,
            max_size: 20.0,
            min_speed: 0.5,
            max_speed: 2.0,
            jitter: 0.5,
            occlusions: Vec::new(),
            colors: Vec::new(),
            background: [20, 20, 20],
            objects: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub id: u64,
    pub bbox: BBox,
    pub mask: InstanceMask,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SequenceSpec,
    pub frames: Vec<Frame>,
    pub gt: Vec<Vec<GtObject>>,
}

impl SyntheticSequence {
    /// Ground truth of object `id` in frame `t` (0-based).
    pub fn object(&self, t: usize, id: u64) -> Option<&GtObject> {
        self.gt.get(t)?.iter().find(|o| o.id == id)
    }
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Folds `p` back into `[lo, hi]` as if bouncing off both ends.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

fn validate(spec: &SequenceSpec) -> Result<()> {
    if spec.frames == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    if spec.height == 0 || spec.width == 0 || spec.height % 32 != 0 || spec.width % 32 != 0 {
        return Err(Error::invalid(format!(
            "frame size {}×{} must be a non-zero multiple of 32",
            spec.height, spec.width
        )));
    }
    if !(spec.min_size >= 2.0 && spec.min_size <= spec.max_size) {
        return Err(Error::invalid(
            "object size range must satisfy 2 ≤ min ≤ max",
        ));
    }
    if !(spec.min_speed >= 0.0 && spec.min_speed <= spec.max_speed) {
        return Err(Error::invalid("speed range must satisfy 0 ≤ min ≤ max"));
    }
    if !(0.0..=0.5).contains(&spec.jitter) {
        return Err(Error::invalid("jitter must lie in [0, 0.5]"));
    }
    if spec.shapes.is_empty() {
        return Err(Error::invalid("at least one shape kind is required"));
    }
    if !spec.objects.is_empty() && spec.objects.len() != spec.num_objects {
        return Err(Error::invalid("explicit objects must match num_objects"));
    }
    if !spec.colors.is_empty() && spec.colors.len() != spec.num_objects {
        return Err(Error::invalid("colors must match num_objects"));
    }
    let mut all = spec.colors.clone();
    all.push(spec.background);
    all.sort();
    all.dedup();
    if !spec.colors.is_empty() && all.len() != spec.num_objects + 1 {
        return Err(Error::invalid(
            "object colors must be distinct from each other and the background",
        ));
    }
    if spec.objects.is_empty() && spec.num_objects > 0 {
        let lane = spec.height as f64 / spec.num_objects as f64;
        if lane < spec.max_size + 2.0 || (spec.width as f64) < spec.max_size + 2.0 {
            return Err(Error::invalid(format!(
                "{} objects of size up to {} do not fit a {}×{} frame",
                spec.num_objects, spec.max_size, spec.height, spec.width
            )));
        }
    }
    for o in &spec.objects {
        let b = o.bbox;
        if !(b.is_valid()
            && b.x >= 0.0
            && b.y >= 0.0
            && b.x2() <= spec.width as f64
            && b.y2() <= spec.height as f64)
        {
            return Err(Error::invalid(format!(
                "object box {b:?} is not inside the frame"
            )));
        }
    }
    for oc in &spec.occlusions {
        if oc.id == 0 || oc.id as usize > spec.num_objects || oc.start == 0 || oc.start > oc.end {
            return Err(Error::invalid(format!("bad occlusion window {oc:?}")));
        }
    }
    Ok(())
}

struct Track {
    init: ObjectInit,
    lo: (f64, f64),
    hi: (f64, f64),
}

/// Pixels whose centers fall inside the shape.
pub fn render_mask(shape: ShapeKind, b: &BBox, h: usize, w: usize) -> InstanceMask {
    match shape {
        ShapeKind::Rectangle => InstanceMask::from_box(b, h, w),
        ShapeKind::Ellipse => {
            let mut m = InstanceMask::zeros(h, w);
            let (cx, cy) = b.center();
            let (rx, ry) = (b.w / 2.0, b.h / 2.0);
            let y0 = b.y.floor().max(0.0) as usize;
            let x0 = b.x.floor().max(0.0) as usize;
            for y in y0..(b.y2().ceil() as usize).min(h) {
                for x in x0..(b.x2().ceil() as usize).min(w) {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        m.set(y, x, true);
                    }
                }
            }
            m
        }
    }
}

pub fn generate_sequence(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fh, fw) = (spec.height as f64, spec.width as f64);
    let colors: Vec<[u8; 3]> = if spec.colors.is_empty() {
        let offset: f64 = rng.gen();
        (0..spec.num_objects)
            .map(|i| {
                hsv_to_rgb(
                    (offset + i as f64 / spec.num_objects.max(1) as f64).fract(),
                    0.85,
                    0.95,
                )
            })
            .collect()
    } else {
        spec.colors.clone()
    };
    let mut tracks = Vec::with_capacity(spec.num_objects);
    for i in 0..spec.num_objects {
        let track = if let Some(init) = spec.objects.get(i) {
            Track {
                init: *init,
                lo: (0.0, 0.0),
                hi: (fw - init.bbox.w, fh - init.bbox.h),
            }
        } else {
            let lane = fh / spec.num_objects as f64;
            let w = rng.gen_range(spec.min_size..=spec.max_size);
            let h = rng.gen_range(spec.min_size..=spec.max_size);
            let lo = (0.0, i as f64 * lane);
            let hi = (fw - w, (i + 1) as f64 * lane - h);
            let x = rng.gen_range(lo.0..=hi.0);
            let y = rng.gen_range(lo.1..=hi.1);
            let mut speed = || {
                let s = rng.gen_range(spec.min_speed..=spec.max_speed);
                if rng.gen::<bool>() {
                    s
                } else {
                    -s
                }
            };
            let (vx, vy) = (speed(), speed() * 0.25);
            let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
            Track {
                init: ObjectInit {
                    bbox: BBox::new(x, y, w, h),
                    velocity: (vx, vy),
                    shape,
                },
                lo,
                hi,
            }
        };
        tracks.push(track);
    }
    let bg = rgb(spec.background);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::filled(spec.height, spec.width, bg)?;
        let mut objs = Vec::new();
        for (i, tr) in tracks.iter().enumerate() {
            let id = i as u64 + 1;
            let (jx, jy): (f64, f64) = if spec.jitter > 0.0 {
                (
                    rng.gen_range(-spec.jitter..=spec.jitter),
                    rng.gen_range(-spec.jitter..=spec.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            let b0 = tr.init.bbox;
            let x = reflect(b0.x + tr.init.velocity.0 * t as f64, tr.lo.0, tr.hi.0);
            let y = reflect(b0.y + tr.init.velocity.1 * t as f64, tr.lo.1, tr.hi.1);
            let x = (x + jx).clamp(tr.lo.0, tr.hi.0);
            let y = (y + jy).clamp(tr.lo.1, tr.hi.1);
            let hidden = spec
                .occlusions
                .iter()
                .any(|o| o.id == id && (o.start..=o.end).contains(&(t + 1)));
            if hidden {
                continue;
            }
            let bbox = BBox::new(x, y, b0.w, b0.h);
            let mask = render_mask(tr.init.shape, &bbox, spec.height, spec.width);
            let color = rgb(colors[i]);
            for (k, &v) in mask.data.iter().enumerate() {
                if v == 1 {
                    frame.set_pixel(k / spec.width, k % spec.width, color);
                }
            }
            objs.push(GtObject {
                id,
                bbox,
                mask,
                class_id: 1,
            });
        }
        frames.push(frame);
        gt.push(objs);
    }
    Ok(SyntheticSequence {
        spec: spec.clone(),
        frames,
        gt,
    })
}
