//! Deterministic RGB + thermal/depth/event sequence generator.
//!
//! Every sequence is a pure function of its [`SceneSpec`] and seed. The RGB
//! stream renders textured background, distractors and the target; the X
//! stream renders the same scene through a modality-specific lens
//! (temperature, inverse distance, or thresholded luminance change).

mod degrade;
mod io;
mod suite;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Rng;

pub use degrade::{apply_degradation, Degradation, DegradationKind};
pub use io::{decode_pnm, encode_pnm, read_dataset, read_sequence, write_dataset, write_sequence};
pub use suite::{gen_suite, split_names, write_suite, SplitDegradation, SuiteConfig, SuiteSequence};

/// Planar 8-bit image, `data[c·H·W + y·W + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// 8-bit luminance plane; single-channel images are returned as is.
    /// RGB uses the (0.299, 0.587, 0.114) weights, truncated.
    pub fn luminance(&self) -> Vec<u8> {
        if self.channels != 3 {
            return self.plane(0).to_vec();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.height * self.width)
            .map(|i| (0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64) as u8)
            .collect()
    }
}

/// Per-frame attribute tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    /// No occlusion.
    NO,
    /// Partial occlusion.
    PO,
    /// Total occlusion.
    TO,
    /// Low illumination.
    LI,
    /// High illumination.
    HI,
    /// Thermal crossover.
    TC,
    /// Fast motion.
    FM,
    /// Scale variation.
    SV,
    /// Background clutter.
    BC,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::NO,
        Attribute::PO,
        Attribute::TO,
        Attribute::LI,
        Attribute::HI,
        Attribute::TC,
        Attribute::FM,
        Attribute::SV,
        Attribute::BC,
    ];
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XModality {
    Thermal,
    Depth,
    Event,
}

impl XModality {
    pub const ALL: [XModality; 3] = [XModality::Thermal, XModality::Depth, XModality::Event];

    pub fn name(self) -> &'static str {
        match self {
            XModality::Thermal => "thermal",
            XModality::Depth => "depth",
            XModality::Event => "event",
        }
    }
}

impl FromStr for XModality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thermal" => Ok(Self::Thermal),
            "depth" => Ok(Self::Depth),
            "event" => Ok(Self::Event),
            other => Err(Error::Config(format!(
                "unknown modality {other:?} (expected thermal, depth or event)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Rect,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// Center offset `amp · sin(2π t / period + phase)` per axis, in pixels.
    Sinusoidal {
        amp_x: f64,
        amp_y: f64,
        period: f64,
        phase: f64,
    },
    /// Constant velocity in pixels per frame, reflecting at the borders.
    Linear { vx: f64, vy: f64 },
}

/// Scene description for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub shape: TargetShape,
    pub target_w: f64,
    pub target_h: f64,
    /// Target start center in pixels.
    pub start: (f64, f64),
    /// Target RGB color.
    pub color: [u8; 3],
    /// Target temperature / inverse-depth intensity in [0, 1].
    pub intensity: f64,
    pub trajectory: Trajectory,
    /// Relative amplitude of the periodic size change (0 = rigid).
    pub scale_amp: f64,
    /// Background texture amplitude in [0, 1].
    pub clutter: f64,
    pub distractors: usize,
    pub modality: XModality,
}

impl SceneSpec {
    /// A varied scene drawn from `rng`.
    pub fn random(rng: &mut Rng, width: usize, height: usize, frames: usize, modality: XModality) -> Self {
        let side = (width.min(height) as f64) * rng.uniform(0.12, 0.2);
        let aspect = rng.uniform(0.7, 1.4);
        let (tw, th) = (side * aspect.sqrt(), side / aspect.sqrt());
        let shape = if rng.bernoulli(0.5) {
            TargetShape::Rect
        } else {
            TargetShape::Disc
        };
        let (tw, th) = if shape == TargetShape::Disc { (side, side) } else { (tw, th) };
        let margin_x = width as f64 * 0.3;
        let margin_y = height as f64 * 0.3;
        let trajectory = if rng.bernoulli(0.6) {
            Trajectory::Sinusoidal {
                amp_x: rng.uniform(0.05, 0.25) * width as f64,
                amp_y: rng.uniform(0.05, 0.25) * height as f64,
                period: rng.uniform(20.0, 60.0),
                phase: rng.uniform(0.0, std::f64::consts::TAU),
            }
        } else {
            Trajectory::Linear {
                vx: rng.uniform(-2.5, 2.5),
                vy: rng.uniform(-2.5, 2.5),
            }
        };
        Self {
            width,
            height,
            frames,
            shape,
            target_w: tw,
            target_h: th,
            start: (
                rng.uniform(margin_x, width as f64 - margin_x),
                rng.uniform(margin_y, height as f64 - margin_y),
            ),
            color: [
                rng.uniform(30.0, 225.0) as u8,
                rng.uniform(30.0, 225.0) as u8,
                rng.uniform(30.0, 225.0) as u8,
            ],
            intensity: rng.uniform(0.8, 1.0),
            trajectory,
            scale_amp: rng.uniform(0.0, 0.3),
            clutter: rng.uniform(0.4, 0.9),
            distractors: rng.below(4),
            modality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config("scene extents and frame count must be positive".into()));
        }
        let grow = 1.0 + self.scale_amp.max(0.0);
        if self.target_w <= 0.0
            || self.target_h <= 0.0
            || self.target_w * grow > self.width as f64
            || self.target_h * grow > self.height as f64
        {
            return Err(Error::Config(format!(
                "target {}×{} does not fit a {}×{} frame",
                self.target_w, self.target_h, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config("clutter and intensity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Paired RGB + X frames with annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub modality: XModality,
    pub rgb: Vec<Image>,
    pub x: Vec<Image>,
    pub gt: Vec<Rect>,
    pub visible: Vec<bool>,
    pub attributes: Vec<BTreeSet<Attribute>>,
    /// Per-frame target pixel masks when known (not persisted; readers fall
    /// back to the gt box).
    pub masks: Option<Vec<Vec<bool>>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rgb.len();
        if [self.x.len(), self.gt.len(), self.visible.len(), self.attributes.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Input(format!("sequence {} has ragged fields", self.name)));
        }
        Ok(())
    }

    /// Target mask of frame `t`: the rendered mask if present, else the gt box.
    pub fn target_mask(&self, t: usize) -> Vec<bool> {
        if let Some(m) = &self.masks {
            return m[t].clone();
        }
        let img = &self.rgb[t];
        let r = self.gt[t];
        (0..img.height * img.width)
            .map(|k| {
                let (y, x) = ((k / img.width) as f64 + 0.5, (k % img.width) as f64 + 0.5);
                x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Object {
    shape: TargetShape,
    w: f64,
    h: f64,
    start: (f64, f64),
    trajectory: Trajectory,
    scale_amp: f64,
    scale_period: f64,
    color: [u8; 3],
    /// Temperature / inverse-depth intensity in [0, 1].
    intensity: f64,
}

impl Object {
    fn size_at(&self, t: usize) -> (f64, f64) {
        let s = 1.0 + self.scale_amp * (std::f64::consts::TAU * t as f64 / self.scale_period).sin();
        (self.w * s, self.h * s)
    }

    fn center_at(&self, t: usize, width: usize, height: usize) -> (f64, f64) {
        let (w, h) = self.size_at(t);
        let (lo_x, hi_x) = (w / 2.0, width as f64 - w / 2.0);
        let (lo_y, hi_y) = (h / 2.0, height as f64 - h / 2.0);
        let (cx, cy) = match self.trajectory {
            Trajectory::Static => self.start,
            Trajectory::Sinusoidal {
                amp_x,
                amp_y,
                period,
                phase,
            } => {
                let a = std::f64::consts::TAU * t as f64 / period + phase;
                (
                    self.start.0 + amp_x * (a.sin() - phase.sin()),
                    self.start.1 + amp_y * (a.cos() - phase.cos()),
                )
            }
            Trajectory::Linear { vx, vy } => (
                reflect(self.start.0 + vx * t as f64, lo_x, hi_x),
                reflect(self.start.1 + vy * t as f64, lo_y, hi_y),
            ),
        };
        (cx.clamp(lo_x, hi_x.max(lo_x)), cy.clamp(lo_y, hi_y.max(lo_y)))
    }

    fn rect_at(&self, t: usize, width: usize, height: usize) -> Rect {
        let (w, h) = self.size_at(t);
        let (cx, cy) = self.center_at(t, width, height);
        Rect::from_center(cx, cy, w, h)
    }

    fn covers(&self, r: &Rect, px: f64, py: f64) -> bool {
        match self.shape {
            TargetShape::Rect => px >= r.x && px < r.x + r.w && py >= r.y && py < r.y + r.h,
            TargetShape::Disc => {
                let (cx, cy) = r.center();
                let rad = r.w.min(r.h) / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= rad * rad
            }
        }
    }
}

/// Folds `v` back into `[lo, hi]` as a bouncing coordinate.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (v - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

/// Static background planes: RGB texture, thermal field and depth plane.
struct Background {
    rgb: Image,
    thermal: Vec<f64>,
    depth: Vec<f64>,
}

fn render_background(spec: &SceneSpec, rng: &mut Rng) -> Background {
    let (w, h) = (spec.width, spec.height);
    let mut rgb = Image::new(3, h, w);
    // a few low-frequency waves per channel plus fixed per-pixel grain
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.uniform(0.02, 0.15),
                rng.uniform(0.02, 0.15),
                rng.uniform(0.0, std::f64::consts::TAU),
                rng.uniform(20.0, 45.0),
                rng.uniform(0.0, 1.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.uniform(70.0, 180.0), rng.uniform(70.0, 180.0), rng.uniform(70.0, 180.0)];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = base[c];
                for wv in &waves[c * 3..c * 3 + 3] {
                    v += wv[3] * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin();
                }
                v += spec.clutter * rng.uniform(-70.0, 70.0);
                rgb.set(c, y, x, v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    let (tx, ty, tp) = (rng.uniform(0.01, 0.05), rng.uniform(0.01, 0.05), rng.uniform(0.0, 6.0));
    let thermal = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64, (k % w) as f64);
            0.3 + 0.12 * (tx * x + ty * y + tp).sin() + rng.uniform(-0.06, 0.06)
        })
        .collect();
    let depth = (0..h * w)
        .map(|k| 0.15 + 0.12 * (k / w) as f64 / h as f64)
        .collect();
    Background { rgb, thermal, depth }
}

fn make_distractor(spec: &SceneSpec, rng: &mut Rng) -> Object {
    let s = spec.target_w.max(spec.target_h) * rng.uniform(0.6, 1.2);
    Object {
        shape: if rng.bernoulli(0.5) {
            TargetShape::Rect
        } else {
            TargetShape::Disc
        },
        w: s,
        h: s * rng.uniform(0.7, 1.3),
        start: (
            rng.uniform(0.0, spec.width as f64),
            rng.uniform(0.0, spec.height as f64),
        ),
        trajectory: Trajectory::Sinusoidal {
            amp_x: rng.uniform(0.1, 0.3) * spec.width as f64,
            amp_y: rng.uniform(0.1, 0.3) * spec.height as f64,
            period: rng.uniform(25.0, 70.0),
            phase: rng.uniform(0.0, std::f64::consts::TAU),
        },
        scale_amp: 0.0,
        scale_period: 1.0,
        color: [
            rng.uniform(30.0, 225.0) as u8,
            rng.uniform(30.0, 225.0) as u8,
            rng.uniform(30.0, 225.0) as u8,
        ],
        intensity: rng.uniform(0.45, 0.65),
    }
}

/// Event threshold on 8-bit luminance change.
pub const EVENT_THRESHOLD: i32 = 15;
/// Event-map pixel codes.
pub const EVENT_NONE: u8 = 0;
pub const EVENT_NEG: u8 = 128;
pub const EVENT_POS: u8 = 255;

/// Thresholded luminance difference between consecutive frames.
pub fn event_map(prev: Option<&Image>, cur: &Image) -> Image {
    let mut out = Image::new(1, cur.height, cur.width);
    if let Some(p) = prev {
        let (a, b) = (p.luminance(), cur.luminance());
        for (o, (&pa, &cb)) in out.data.iter_mut().zip(a.iter().zip(&b)) {
            let d = cb as i32 - pa as i32;
            *o = if d > EVENT_THRESHOLD {
                EVENT_POS
            } else if d < -EVENT_THRESHOLD {
                EVENT_NEG
            } else {
                EVENT_NONE
            };
        }
    }
    out
}

pub fn gen_sequence(spec: &SceneSpec, seed: u64) -> Result<SequenceRecord> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let bg = render_background(spec, &mut Rng::derive(seed, 1));
    let target = Object {
        shape: spec.shape,
        w: spec.target_w,
        h: spec.target_h,
        start: spec.start,
        trajectory: spec.trajectory,
        scale_amp: spec.scale_amp,
        scale_period: rng.uniform(30.0, 80.0),
        color: spec.color,
        intensity: spec.intensity,
    };
    let mut drng = Rng::derive(seed, 2);
    let distractors: Vec<Object> = (0..spec.distractors).map(|_| make_distractor(spec, &mut drng)).collect();
    let (w, h) = (spec.width, spec.height);
    let mut rec = SequenceRecord {
        name: format!("seq_{seed:016x}"),
        modality: spec.modality,
        rgb: Vec::with_capacity(spec.frames),
        x: Vec::with_capacity(spec.frames),
        gt: Vec::with_capacity(spec.frames),
        visible: vec![true; spec.frames],
        attributes: Vec::with_capacity(spec.frames),
        masks: Some(Vec::with_capacity(spec.frames)),
    };
    let first_area = target.rect_at(0, w, h).area();
    for t in 0..spec.frames {
        let mut rgb = bg.rgb.clone();
        let mut thermal = bg.thermal.clone();
        let mut depth = bg.depth.clone();
        let mut mask = vec![false; w * h];
        // the target is drawn last, over any distractor
        let objects = distractors.iter().map(|d| (d, false)).chain([(&target, true)]);
        let mut clutter_near = false;
        let t_rect = target.rect_at(t, w, h);
        for (obj, is_target) in objects {
            let r = obj.rect_at(t, w, h);
            if !is_target && r.center_distance(&t_rect) < 2.0 * t_rect.w.max(t_rect.h) {
                clutter_near = true;
            }
            let (x0, x1) = (r.x.floor().max(0.0) as usize, (r.x + r.w).ceil().min(w as f64) as usize);
            let (y0, y1) = (r.y.floor().max(0.0) as usize, (r.y + r.h).ceil().min(h as f64) as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    if !obj.covers(&r, x as f64 + 0.5, y as f64 + 0.5) {
                        continue;
                    }
                    for c in 0..3 {
                        // mild shading keeps the object textured
                        let shade = ((x + y) % 4) as i32 * 4 - 6;
                        rgb.set(c, y, x, (obj.color[c] as i32 + shade).clamp(0, 255) as u8);
                    }
                    let k = y * w + x;
                    thermal[k] = obj.intensity;
                    depth[k] = obj.intensity;
                    mask[k] = is_target;
                }
            }
        }
        let x = match spec.modality {
            XModality::Thermal => plane_to_image(&thermal, h, w),
            XModality::Depth => plane_to_image(&depth, h, w),
            XModality::Event => event_map(rec.rgb.last(), &rgb),
        };
        let mut tags = BTreeSet::from([Attribute::NO]);
        if t > 0 && t_rect.center_distance(&rec.gt[t - 1]) > 0.25 * t_rect.area().sqrt() {
            tags.insert(Attribute::FM);
        }
        let ratio = t_rect.area() / first_area;
        if !(0.75..=1.33).contains(&ratio) {
            tags.insert(Attribute::SV);
        }
        if clutter_near {
            tags.insert(Attribute::BC);
        }
        rec.rgb.push(rgb);
        rec.x.push(x);
        rec.gt.push(t_rect);
        rec.attributes.push(tags);
        rec.masks.as_mut().expect("masks present").push(mask);
    }
    Ok(rec)
}

fn plane_to_image(p: &[f64], h: usize, w: usize) -> Image {
    Image {
        channels: 1,
        height: h,
        width: w,
        data: p.iter().map(|v| (v * 255.0).clamp(0.0, 255.0) as u8).collect(),
    }
}
