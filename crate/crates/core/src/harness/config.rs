//! Tracker settings as key=value files.

use std::collections::BTreeMap;
use std::path::Path;

use super::io::{format_kv, read_kv, KvReader};
use crate::error::{Error, Result};
use crate::tracker::TrackerConfig;

pub fn tracker_config_from_kv(map: BTreeMap<String, String>, path: &Path) -> Result<TrackerConfig> {
    let mut c = TrackerConfig::default();
    let mut r = KvReader::new(map, path);
    r.take("score_threshold", &mut c.thresholds.score)?;
    r.take("nms_iou", &mut c.thresholds.nms_iou)?;
    r.take("mask_binarize", &mut c.thresholds.mask_binarize)?;
    if let Some(v) = r.take_raw("temperature") {
        c.temperature = match v.trim() {
            "auto" => None,
            t => Some(t.parse().map_err(|_| {
                Error::invalid(format!(
                    "{}: key `temperature`: cannot parse `{v}`",
                    path.display()
                ))
            })?),
        };
    }
    r.take("lambda_emb", &mut c.lambda_emb)?;
    r.take("gate_cos", &mut c.gate_cos)?;
    r.take("confirm_hits", &mut c.confirm_hits)?;
    r.take("max_misses", &mut c.max_misses)?;
    r.take("birth_iou", &mut c.birth_iou)?;
    r.take("ema", &mut c.ema)?;
    r.take("kalman_position", &mut c.noise.position)?;
    r.take("kalman_velocity", &mut c.noise.velocity)?;
    r.finish()?;
    validate(&c).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(c)
}

pub fn validate(c: &TrackerConfig) -> Result<()> {
    c.thresholds.validate()?;
    if let Some(t) = c.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("temperature {t} must be positive")));
        }
    }
    if !(0.0..=1.0).contains(&c.lambda_emb) {
        return Err(Error::invalid("lambda_emb must lie in [0, 1]"));
    }
    if !(-1.0..=1.0).contains(&c.gate_cos) {
        return Err(Error::invalid("gate_cos must lie in [-1, 1]"));
    }
    if !(0.0..=1.0).contains(&c.birth_iou) {
        return Err(Error::invalid("birth_iou must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&c.ema) {
        return Err(Error::invalid("ema must lie in [0, 1)"));
    }
    if c.confirm_hits == 0 {
        return Err(Error::invalid("confirm_hits must be at least 1"));
    }
    if !(c.noise.position > 0.0 && c.noise.velocity > 0.0) {
        return Err(Error::invalid("kalman noise weights must be positive"));
    }
    Ok(())
}

pub fn read_tracker_config(path: &Path) -> Result<TrackerConfig> {
    tracker_config_from_kv(read_kv(path)?, path)
}

pub fn tracker_config_to_kv(c: &TrackerConfig) -> String {
    let pairs = [
        ("score_threshold", c.thresholds.score.to_string()),
        ("nms_iou", c.thresholds.nms_iou.to_string()),
        ("mask_binarize", c.thresholds.mask_binarize.to_string()),
        (
            "temperature",
            c.temperature.map_or("auto".into(), |t| t.to_string()),
        ),
        ("lambda_emb", c.lambda_emb.to_string()),
        ("gate_cos", c.gate_cos.to_string()),
        ("confirm_hits", c.confirm_hits.to_string()),
        ("max_misses", c.max_misses.to_string()),
        ("birth_iou", c.birth_iou.to_string()),
        ("ema", c.ema.to_string()),
        ("kalman_position", c.noise.position.to_string()),
        ("kalman_velocity", c.noise.velocity.to_string()),
    ];
    format_kv(&pairs.map(|(k, v)| (k.to_string(), v)))
}
