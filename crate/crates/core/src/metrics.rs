//! Tracking metrics: PR, SR, NPR, long-term Pr/Re/F, attribute breakdown and
//! single-modality entropy.
//!
//! Threshold comparisons allow [`METRIC_EPS`] of slack so boxes that went
//! through a coordinate round trip still count as exact hits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Rect};
use crate::synth::{Attribute, Image, SequenceRecord};

/// Slack on every threshold comparison.
pub const METRIC_EPS: f64 = 1e-9;
/// Center-error threshold of the precision rate, pixels.
pub const PR_THRESHOLD: f64 = 20.0;

/// Success thresholds `0, 0.05, …, 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Precision-curve thresholds `0, 1, …, 50` pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

/// Normalized-precision thresholds `0, 0.005, …, 0.5`.
pub fn normalized_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 200.0).collect()
}

/// Confidence sweep `0, 0.01, …, 1`.
pub fn confidence_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Mean of the sampled values.
    pub fn auc(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `threshold,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,value\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }

    fn mean_of(curves: &[Curve]) -> Option<Curve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let values = (0..first.values.len())
            .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
            .collect();
        Some(Curve {
            thresholds: first.thresholds.clone(),
            values,
        })
    }
}

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Undefined(format!("{what} over zero frames")));
    }
    Ok(())
}

/// Fraction of values `v` with `pass(v, τ)` for each threshold.
fn fraction_curve(xs: &[f64], thresholds: Vec<f64>, pass: impl Fn(f64, f64) -> bool) -> Curve {
    let n = xs.len() as f64;
    let values = thresholds
        .iter()
        .map(|&t| xs.iter().filter(|&&x| pass(x, t)).count() as f64 / n)
        .collect();
    Curve { thresholds, values }
}

pub fn center_error(pred: &Rect, gt: &Rect) -> f64 {
    pred.center_distance(gt)
}

/// Center error normalized per axis by the gt extent.
pub fn normalized_center_error(pred: &Rect, gt: &Rect) -> Result<f64> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Input(format!("gt box {gt:?} has zero extent")));
    }
    let (p, g) = (pred.center(), gt.center());
    Ok((((p.0 - g.0) / gt.w).powi(2) + ((p.1 - g.1) / gt.h).powi(2)).sqrt())
}

/// Fraction of center errors `≤ threshold`.
pub fn precision_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    nonempty(errors, "precision rate")?;
    Ok(errors.iter().filter(|&&e| e <= threshold + METRIC_EPS).count() as f64 / errors.len() as f64)
}

pub fn precision_curve(errors: &[f64]) -> Result<Curve> {
    nonempty(errors, "precision curve")?;
    Ok(fraction_curve(errors, precision_thresholds(), |e, t| e <= t + METRIC_EPS))
}

/// SR (mean of the 21-point success curve) and the curve.
pub fn success_rate(ious: &[f64]) -> Result<(f64, Curve)> {
    nonempty(ious, "success rate")?;
    let c = fraction_curve(ious, success_thresholds(), |v, t| v >= t - METRIC_EPS);
    Ok((c.auc(), c))
}

/// NPR (mean of the 101-point curve) and the curve.
pub fn normalized_precision(pred: &[Rect], gt: &[Rect]) -> Result<(f64, Curve)> {
    nonempty(gt, "normalized precision")?;
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predictions for {} gt boxes", pred.len(), gt.len())));
    }
    let errs = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| normalized_center_error(p, g))
        .collect::<Result<Vec<_>>>()?;
    let c = fraction_curve(&errs, normalized_thresholds(), |e, t| e <= t + METRIC_EPS);
    Ok((c.auc(), c))
}

pub fn f_score(pr: f64, re: f64) -> f64 {
    if pr + re > 0.0 {
        2.0 * pr * re / (pr + re)
    } else {
        0.0
    }
}

/// Long-term precision/recall at one confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrRePoint {
    pub threshold: f64,
    pub pr: f64,
    pub re: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrReF {
    /// The sweep point maximizing F (lowest threshold on ties).
    pub best: PrRePoint,
    pub sweep: Vec<PrRePoint>,
}

/// One frame of tracker output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `None` when the tracker reports no box.
    pub rect: Option<Rect>,
    pub confidence: f64,
}

/// Pr(θ) and Re(θ) of one sequence over the confidence sweep.
fn pr_re_sweep(preds: &[Prediction], gt: &[Rect], visible: &[bool]) -> Result<Vec<(f64, f64)>> {
    nonempty(preds, "Pr/Re")?;
    if preds.len() != gt.len() || gt.len() != visible.len() {
        return Err(Error::Input(format!(
            "Pr/Re needs aligned lists, got {} / {} / {}",
            preds.len(),
            gt.len(),
            visible.len()
        )));
    }
    let overlap: Vec<f64> = preds
        .iter()
        .zip(gt.iter().zip(visible))
        .map(|(p, (g, &v))| match p.rect {
            Some(r) if v => iou(&r, g),
            _ => 0.0,
        })
        .collect();
    let n_vis = visible.iter().filter(|&&v| v).count();
    Ok(confidence_thresholds()
        .into_iter()
        .map(|th| {
            let mut sum = 0.0;
            let mut reported = 0usize;
            for (p, &o) in preds.iter().zip(&overlap) {
                if p.rect.is_some() && p.confidence >= th - METRIC_EPS {
                    sum += o;
                    reported += 1;
                }
            }
            let pr = if reported == 0 { 0.0 } else { sum / reported as f64 };
            let re = if n_vis == 0 { 0.0 } else { sum / n_vis as f64 };
            (pr, re)
        })
        .collect())
}

fn best_of(points: Vec<(f64, f64)>) -> PrReF {
    let sweep: Vec<PrRePoint> = confidence_thresholds()
        .into_iter()
        .zip(points)
        .map(|(threshold, (pr, re))| PrRePoint {
            threshold,
            pr,
            re,
            f: f_score(pr, re),
        })
        .collect();
    let mut best = sweep[0];
    for p in &sweep[1..] {
        if p.f > best.f {
            best = *p;
        }
    }
    PrReF { best, sweep }
}

pub fn pr_re_f(preds: &[Prediction], gt: &[Rect], visible: &[bool]) -> Result<PrReF> {
    Ok(best_of(pr_re_sweep(preds, gt, visible)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub frames: usize,
    pub pr: f64,
    pub sr: f64,
}

/// One scored frame: IoU, center error and attribute tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFrame {
    pub iou: f64,
    pub center_error: f64,
    pub attributes: BTreeSet<Attribute>,
}

/// PR and SR over the frames carrying each attribute; absent attributes are omitted.
pub fn attribute_breakdown(frames: &[ScoredFrame]) -> BTreeMap<Attribute, AttributeMetrics> {
    attribute_breakdown_at(frames, PR_THRESHOLD)
}

pub fn attribute_breakdown_at(frames: &[ScoredFrame], pr_threshold: f64) -> BTreeMap<Attribute, AttributeMetrics> {
    let mut out = BTreeMap::new();
    for a in Attribute::ALL {
        let sel: Vec<&ScoredFrame> = frames.iter().filter(|f| f.attributes.contains(&a)).collect();
        if sel.is_empty() {
            continue;
        }
        let ious: Vec<f64> = sel.iter().map(|f| f.iou).collect();
        let errs: Vec<f64> = sel.iter().map(|f| f.center_error).collect();
        out.insert(
            a,
            AttributeMetrics {
                frames: sel.len(),
                pr: precision_rate(&errs, pr_threshold).expect("non-empty"),
                sr: success_rate(&ious).expect("non-empty").0,
            },
        );
    }
    out
}

/// Shannon entropy in bits of the 256-bin histogram of the luminance plane.
pub fn image_entropy(img: &Image) -> f64 {
    let lum = img.luminance();
    let mut hist = [0usize; 256];
    for &v in &lum {
        hist[v as usize] += 1;
    }
    let n = lum.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean entropy of one modality over every frame that carries it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntropy {
    pub frames: usize,
    pub mean_bits: f64,
}

/// Per-modality mean entropy: `rgb` over every sequence, each X modality
/// over the sequences that carry it.
pub fn modality_entropy(records: &[SequenceRecord]) -> BTreeMap<String, ModalityEntropy> {
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for rec in records {
        for (key, frames) in [("rgb", &rec.rgb), (rec.modality.name(), &rec.x)] {
            let e = acc.entry(key.to_string()).or_default();
            for img in frames.iter() {
                e.0 += 1;
                e.1 += image_entropy(img);
            }
        }
    }
    acc.into_iter()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(k, (n, sum))| {
            (
                k,
                ModalityEntropy {
                    frames: n,
                    mean_bits: sum / n as f64,
                },
            )
        })
        .collect()
}

/// Absolute difference of mean luminance inside and outside `mask`.
pub fn contrast(img: &Image, mask: &[bool]) -> Result<f64> {
    let lum = img.luminance();
    if mask.len() != lum.len() {
        return Err(Error::Input(format!("mask of {} pixels for a {}-pixel image", mask.len(), lum.len())));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in lum.iter().zip(mask) {
        if m {
            si += v as f64;
            ni += 1;
        } else {
            so += v as f64;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Undefined("contrast needs pixels on both sides of the mask".into()));
    }
    Ok((si / ni as f64 - so / no as f64).abs())
}

/// Tracker output for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub name: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub pr: f64,
    pub sr: f64,
    pub npr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub sequences: usize,
    pub frames: usize,
    pub pr: f64,
    pub sr: f64,
    pub npr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub f_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub aggregate: AggregateMetrics,
    pub sequences: Vec<SequenceMetrics>,
    pub success_curve: Curve,
    pub precision_curve: Curve,
    pub normalized_precision_curve: Curve,
    pub attributes: BTreeMap<Attribute, AttributeMetrics>,
}

struct SequenceEval {
    metrics: SequenceMetrics,
    success: Curve,
    precision: Curve,
    normalized: Curve,
    sweep: Vec<(f64, f64)>,
    frames: Vec<ScoredFrame>,
}

/// PR/SR/NPR use visible frames; Pr/Re/F uses every frame.
fn eval_sequence(rec: &SequenceRecord, res: &TrackResult, opts: &EvalOptions) -> Result<SequenceEval> {
    if res.predictions.len() != rec.len() {
        return Err(Error::Input(format!(
            "{}: {} predictions for {} frames",
            rec.name,
            res.predictions.len(),
            rec.len()
        )));
    }
    let mut frames = Vec::new();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for t in (0..rec.len()).filter(|&t| rec.visible[t]) {
        // a missing box scores as a miss at infinite distance
        let p = res.predictions[t].rect;
        let g = rec.gt[t];
        frames.push(ScoredFrame {
            iou: p.map_or(0.0, |p| iou(&p, &g)),
            center_error: p.map_or(f64::INFINITY, |p| center_error(&p, &g)),
            attributes: rec.attributes[t].clone(),
        });
        preds.push(p.unwrap_or(Rect::new(f64::INFINITY, f64::INFINITY, 0.0, 0.0)));
        gts.push(g);
    }
    if frames.is_empty() {
        return Err(Error::Undefined(format!("{} has no visible frames", rec.name)));
    }
    let ious: Vec<f64> = frames.iter().map(|f| f.iou).collect();
    let errs: Vec<f64> = frames.iter().map(|f| f.center_error).collect();
    let (sr, success) = success_rate(&ious)?;
    let precision = precision_curve(&errs)?;
    let (npr, normalized) = normalized_precision(&preds, &gts)?;
    let sweep = pr_re_sweep(&res.predictions, &rec.gt, &rec.visible)?;
    let best = best_of(sweep.clone()).best;
    Ok(SequenceEval {
        metrics: SequenceMetrics {
            name: rec.name.clone(),
            frames: rec.len(),
            pr: precision_rate(&errs, opts.pr_threshold)?,
            sr,
            npr,
            precision: best.pr,
            recall: best.re,
            f_score: best.f,
        },
        success,
        precision,
        normalized,
        sweep,
        frames,
    })
}

/// Scores every sequence. Aggregates average per-sequence curves; Pr/Re are
/// averaged per threshold before F is maximized; attributes pool frames.
pub fn evaluate(records: &[SequenceRecord], results: &[TrackResult]) -> Result<EvalResult> {
    evaluate_with(records, results, &EvalOptions::default())
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Center-error threshold of PR, pixels.
    pub pr_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pr_threshold: PR_THRESHOLD,
        }
    }
}

pub fn evaluate_with(records: &[SequenceRecord], results: &[TrackResult], opts: &EvalOptions) -> Result<EvalResult> {
    nonempty(records, "evaluation")?;
    if records.len() != results.len() {
        return Err(Error::Input(format!("{} results for {} sequences", results.len(), records.len())));
    }
    let evals = records
        .iter()
        .zip(results)
        .map(|(r, t)| eval_sequence(r, t, opts))
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&SequenceEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    let sweep: Vec<(f64, f64)> = (0..evals[0].sweep.len())
        .map(|i| (mean(&|e| e.sweep[i].0), mean(&|e| e.sweep[i].1)))
        .collect();
    let best = best_of(sweep).best;
    let all_frames: Vec<ScoredFrame> = evals.iter().flat_map(|e| e.frames.iter().cloned()).collect();
    let collect = |f: &dyn Fn(&SequenceEval) -> Curve| evals.iter().map(f).collect::<Vec<_>>();
    Ok(EvalResult {
        aggregate: AggregateMetrics {
            sequences: evals.len(),
            frames: records.iter().map(|r| r.len()).sum(),
            pr: mean(&|e| e.metrics.pr),
            sr: mean(&|e| e.metrics.sr),
            npr: mean(&|e| e.metrics.npr),
            precision: best.pr,
            recall: best.re,
            f_score: best.f,
            f_threshold: best.threshold,
        },
        success_curve: Curve::mean_of(&collect(&|e| e.success.clone())).expect("non-empty"),
        precision_curve: Curve::mean_of(&collect(&|e| e.precision.clone())).expect("non-empty"),
        normalized_precision_curve: Curve::mean_of(&collect(&|e| e.normalized.clone())).expect("non-empty"),
        attributes: attribute_breakdown_at(&all_frames, opts.pr_threshold),
        sequences: evals.into_iter().map(|e| e.metrics).collect(),
    })
}
