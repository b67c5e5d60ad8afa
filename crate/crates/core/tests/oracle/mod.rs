//! Brute-force metric references on integer boxes.
#![allow(dead_code)]

use std::collections::BTreeSet;

use patrack_core::geometry::Rect;
use patrack_core::metrics::{Prediction, TrackResult};
use patrack_core::synth::{Attribute, Image, SequenceRecord, XModality};
use patrack_core::tensor::Rng;

/// Integer box; every metric on these reduces to integer comparisons.
#[derive(Clone, Copy)]
pub struct IBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl IBox {
    pub fn random(rng: &mut Rng) -> Self {
        IBox {
            x: rng.below(40) as i64,
            y: rng.below(40) as i64,
            w: 1 + rng.below(20) as i64,
            h: 1 + rng.below(20) as i64,
        }
    }

    pub fn rect(self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }

    /// Area of overlap by counting unit cells.
    pub fn cells_shared(self, o: IBox) -> i64 {
        let mut n = 0;
        for y in self.y..self.y + self.h {
            for x in self.x..self.x + self.w {
                if x >= o.x && x < o.x + o.w && y >= o.y && y < o.y + o.h {
                    n += 1;
                }
            }
        }
        n
    }

    /// IoU as the exact fraction (numerator, denominator).
    pub fn iou_frac(self, o: IBox) -> (i64, i64) {
        let i = self.cells_shared(o);
        (i, self.w * self.h + o.w * o.h - i)
    }

    /// Doubled center offsets, integers.
    pub fn center_delta2(self, gt: IBox) -> (i64, i64) {
        ((2 * self.x + self.w) - (2 * gt.x + gt.w), (2 * self.y + self.h) - (2 * gt.y + gt.h))
    }
}

pub struct Instance {
    pub pred: Vec<IBox>,
    pub gt: Vec<IBox>,
    /// Confidence in hundredths.
    pub conf: Vec<i64>,
    pub visible: Vec<bool>,
    pub reported: Vec<bool>,
}

pub fn instance(seed: u64, frames: usize) -> Instance {
    let mut rng = Rng::new(seed);
    let mut inst = Instance {
        pred: vec![],
        gt: vec![],
        conf: vec![],
        visible: vec![],
        reported: vec![],
    };
    for _ in 0..frames {
        let gt = IBox::random(&mut rng);
        // half the predictions sit near the target so the curves are non-trivial
        let pred = if rng.bernoulli(0.5) {
            IBox {
                x: gt.x + rng.below(7) as i64 - 3,
                y: gt.y + rng.below(7) as i64 - 3,
                w: (gt.w + rng.below(5) as i64 - 2).max(1),
                h: (gt.h + rng.below(5) as i64 - 2).max(1),
            }
        } else {
            IBox::random(&mut rng)
        };
        inst.gt.push(gt);
        inst.pred.push(pred);
        inst.conf.push(rng.below(101) as i64);
        inst.visible.push(rng.bernoulli(0.9));
        inst.reported.push(rng.bernoulli(0.95));
    }
    inst
}

pub fn brute_success(fracs: &[(i64, i64)]) -> f64 {
    let n = fracs.len() as f64;
    let vals: Vec<f64> = (0..=20)
        .map(|i| fracs.iter().filter(|&&(p, q)| 20 * p >= i * q).count() as f64 / n)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Fraction of doubled offsets with distance ≤ `t` pixels; `None` never passes.
pub fn brute_precision(deltas: &[Option<(i64, i64)>], t: i64) -> f64 {
    deltas
        .iter()
        .filter(|d| matches!(d, Some((dx, dy)) if dx * dx + dy * dy <= 4 * t * t))
        .count() as f64
        / deltas.len() as f64
}

pub fn brute_npr(pairs: &[(IBox, IBox)]) -> f64 {
    let n = pairs.len() as f64;
    let vals: Vec<f64> = (0..=100i128)
        .map(|i| {
            pairs
                .iter()
                .filter(|(p, g)| {
                    let (dx, dy) = p.center_delta2(*g);
                    let (dx, dy, w, h) = (dx as i128, dy as i128, g.w as i128, g.h as i128);
                    // (dx/2w)² + (dy/2h)² ≤ (i/200)²
                    (dx * h).pow(2) * 10000 + (dy * w).pow(2) * 10000 <= i * i * w * w * h * h
                })
                .count() as f64
                / n
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn brute_pr_re(inst: &Instance) -> Vec<(f64, f64)> {
    let n_vis = inst.visible.iter().filter(|&&v| v).count();
    (0..=100)
        .map(|k| {
            let (mut sum, mut count) = (0.0, 0usize);
            for t in 0..inst.gt.len() {
                if inst.reported[t] && inst.conf[t] >= k {
                    if inst.visible[t] {
                        let (p, q) = inst.pred[t].iou_frac(inst.gt[t]);
                        sum += p as f64 / q as f64;
                    }
                    count += 1;
                }
            }
            let pr = if count == 0 { 0.0 } else { sum / count as f64 };
            let re = if n_vis == 0 { 0.0 } else { sum / n_vis as f64 };
            (pr, re)
        })
        .collect()
}

pub fn brute_best(points: &[(f64, f64)]) -> (usize, f64) {
    let f = |(pr, re): (f64, f64)| if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
    let mut best = (0, f(points[0]));
    for (k, &p) in points.iter().enumerate() {
        if f(p) > best.1 {
            best = (k, f(p));
        }
    }
    best
}

pub fn record(name: &str, gt: Vec<Rect>, visible: Vec<bool>, attributes: Vec<BTreeSet<Attribute>>) -> SequenceRecord {
    let n = gt.len();
    SequenceRecord {
        name: name.into(),
        modality: XModality::Thermal,
        rgb: vec![Image::new(3, 1, 1); n],
        x: vec![Image::new(1, 1, 1); n],
        gt,
        visible,
        attributes,
        masks: None,
    }
}

pub fn result_of(inst: &Instance, name: &str) -> (SequenceRecord, TrackResult) {
    let n = inst.gt.len();
    let rec = record(
        name,
        inst.gt.iter().map(|b| b.rect()).collect(),
        inst.visible.clone(),
        vec![BTreeSet::new(); n],
    );
    let predictions = (0..n)
        .map(|t| Prediction {
            rect: inst.reported[t].then(|| inst.pred[t].rect()),
            confidence: inst.conf[t] as f64 / 100.0,
        })
        .collect();
    (
        rec,
        TrackResult {
            name: name.into(),
            predictions,
        },
    )
}
