use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Attribute, Image, SequenceRecord, XModality, EVENT_NONE};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    LowIllumination,
    HighIllumination,
    Occlusion,
    ThermalCrossover,
    FastMotion,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::LowIllumination,
        DegradationKind::HighIllumination,
        DegradationKind::Occlusion,
        DegradationKind::ThermalCrossover,
        DegradationKind::FastMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::LowIllumination => "low_illumination",
            DegradationKind::HighIllumination => "high_illumination",
            DegradationKind::Occlusion => "occlusion",
            DegradationKind::ThermalCrossover => "thermal_crossover",
            DegradationKind::FastMotion => "fast_motion",
        }
    }
}

impl FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown degradation kind {s:?}")))
    }
}

/// A degradation applied to frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub kind: DegradationKind,
    pub severity: f64,
    pub start: usize,
    pub end: usize,
    /// Seeds the noise of noisy degradations.
    #[serde(default)]
    pub seed: u64,
}

/// Standard deviation of sensor noise at full low-light severity (8-bit units).
const LOW_LIGHT_NOISE: f64 = 10.0;

/// Returns a degraded copy of `record`. Severity 0 returns an exact copy.
pub fn apply_degradation(record: &SequenceRecord, d: &Degradation) -> Result<SequenceRecord> {
    record.validate()?;
    if d.start > d.end || d.end > record.len() {
        return Err(Error::Input(format!(
            "degradation span [{}, {}) outside a {}-frame sequence",
            d.start,
            d.end,
            record.len()
        )));
    }
    if !(0.0..=1.0).contains(&d.severity) {
        return Err(Error::Input(format!("severity {} outside [0, 1]", d.severity)));
    }
    if d.kind == DegradationKind::ThermalCrossover && record.modality != XModality::Thermal {
        return Err(Error::Input(format!(
            "thermal crossover needs a thermal X stream, sequence {} is {}",
            record.name,
            record.modality.name()
        )));
    }
    let mut out = record.clone();
    if d.severity == 0.0 {
        return Ok(out);
    }
    let s = d.severity;
    for t in d.start..d.end {
        let tags = &mut out.attributes[t];
        match d.kind {
            DegradationKind::LowIllumination => {
                let mut rng = Rng::derive(d.seed, t as u64);
                for v in out.rgb[t].data.iter_mut() {
                    // sensor noise before the exposure gain, so it dims with the scene
                    let n = rng.normal() * LOW_LIGHT_NOISE * s;
                    *v = ((*v as f64 + n) * (1.0 - 0.9 * s)).round().clamp(0.0, 255.0) as u8;
                }
                tags.insert(Attribute::LI);
            }
            DegradationKind::HighIllumination => {
                for v in out.rgb[t].data.iter_mut() {
                    *v = (*v as f64 + (255.0 - *v as f64) * 0.9 * s).round().min(255.0) as u8;
                }
                tags.insert(Attribute::HI);
            }
            DegradationKind::FastMotion => {
                let radius = (3.0 * s).round() as usize;
                out.rgb[t] = box_blur_x(&out.rgb[t], radius);
                tags.insert(Attribute::FM);
            }
            DegradationKind::ThermalCrossover => {
                let mask = record.target_mask(t);
                let bg = ring_mean(&record.x[t], &record.gt[t], &mask);
                for (v, &m) in out.x[t].data.iter_mut().zip(&mask) {
                    if m {
                        *v = (*v as f64 + s * (bg - *v as f64)).round().clamp(0.0, 255.0) as u8;
                    }
                }
                tags.insert(Attribute::TC);
            }
            DegradationKind::Occlusion => {
                let mask = record.target_mask(t);
                let r = record.gt[t];
                let img = &out.rgb[t];
                let (h, w) = (img.height, img.width);
                let x_end = r.x + s * r.w;
                let covered = |k: usize| {
                    let (y, x) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
                    x >= r.x && x < x_end && y >= r.y && y < r.y + r.h
                };
                let total = mask.iter().filter(|&&m| m).count();
                let hidden = mask.iter().enumerate().filter(|&(k, &m)| m && covered(k)).count();
                let coverage = if total == 0 { 0.0 } else { hidden as f64 / total as f64 };
                for k in (0..h * w).filter(|&k| covered(k)) {
                    let stripe = if (k % w) % 6 < 3 { 80 } else { 110 };
                    for c in 0..3 {
                        out.rgb[t].data[c * h * w + k] = stripe;
                    }
                    out.x[t].data[k] = match record.modality {
                        XModality::Thermal => 90,
                        XModality::Depth => 150,
                        XModality::Event => EVENT_NONE,
                    };
                }
                tags.remove(&Attribute::NO);
                if coverage > 0.9 {
                    tags.insert(Attribute::TO);
                    out.visible[t] = false;
                } else if coverage > 0.0 {
                    tags.insert(Attribute::PO);
                } else {
                    tags.insert(Attribute::NO);
                }
            }
        }
    }
    Ok(out)
}

fn box_blur_x(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let mut out = img.clone();
    let (h, w) = (img.height, img.width);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                let sum: u32 = (lo..=hi).map(|xx| img.get(c, y, xx) as u32).sum();
                out.set(c, y, x, (sum as f64 / (hi - lo + 1) as f64).round() as u8);
            }
        }
    }
    out
}

/// Mean of non-target pixels inside the box grown by half its size per side.
fn ring_mean(img: &Image, r: &crate::geometry::Rect, mask: &[bool]) -> f64 {
    let (h, w) = (img.height, img.width);
    let (x0, x1) = ((r.x - r.w / 2.0).max(0.0) as usize, ((r.x + 1.5 * r.w) as usize).min(w));
    let (y0, y1) = ((r.y - r.h / 2.0).max(0.0) as usize, ((r.y + 1.5 * r.h) as usize).min(h));
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if !mask[y * w + x] {
                sum += img.get(0, y, x) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64
    } else {
        sum / n as f64
    }
}
