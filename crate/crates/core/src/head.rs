//! Center-based prediction head, box coding and the training loss.

use serde::{Deserialize, Serialize};

use crate::adapters::lecun;
use crate::backbone::region_tokens_to_grid;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Axis-aligned box in center form, normalized to the search region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            confidence: None,
        }
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = Some(c);
        self
    }

    /// From corner form `(x, y, w, h)`.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// `(x, y, w, h)` corner form.
    pub fn corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two center-form boxes.
pub fn iou_boxes(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax, ay, aw, ah] = a.corner();
    let [bx, by, bw, bh] = b.corner();
    let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
    let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (enclosing − union) / enclosing`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax, ay, aw, ah] = a.corner();
    let [bx, by, bw, bh] = b.corner();
    let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
    let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    let ew = (ax + aw).max(bx + bw) - ax.min(bx);
    let eh = (ay + ah).max(by + bh) - ay.min(by);
    let enclosing = ew * eh;
    inter / union - (enclosing - union) / enclosing
}

/// Head outputs read back from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    /// `[h × w]`, sigmoid-activated.
    pub score: Tensor<f64>,
    /// `[2 × h × w]`, sub-cell (x, y) offsets in (0, 1).
    pub offset: Tensor<f64>,
    /// `[2 × h × w]`, normalized (w, h).
    pub size: Tensor<f64>,
}

impl HeadMaps {
    pub fn grid(&self) -> (usize, usize) {
        (self.score.shape()[0], self.score.shape()[1])
    }
}

/// Head outputs as tape variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadVars {
    /// `[1 × h × w]` pre-sigmoid scores.
    pub score_logits: Var,
    pub score: Var,
    pub offset: Var,
    pub size: Var,
    pub grid: (usize, usize),
}

impl HeadVars {
    pub fn maps<T: Scalar>(&self, tape: &Tape<T>) -> HeadMaps {
        let (h, w) = self.grid;
        HeadMaps {
            score: tape.value(self.score).cast::<f64>().reshape(&[h, w]).expect("score shape"),
            offset: tape.value(self.offset).cast(),
            size: tape.value(self.size).cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadBranch {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadWeights {
    pub score: HeadBranch,
    pub offset: HeadBranch,
    pub size: HeadBranch,
}

impl HeadWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        [&self.score, &self.offset, &self.size]
            .iter()
            .flat_map(|b| [b.w1, b.b1, b.w2, b.b2])
            .collect()
    }
}

/// Prior probability encoded in the initial score bias.
const SCORE_PRIOR: f64 = 0.1;

pub fn init_head<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    embed_dim: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<HeadWeights> {
    if hidden == 0 {
        return Err(Error::Config("head hidden width must be positive".into()));
    }
    let mut branch = |name: &str, out: usize, bias: f64, rng: &mut Rng| HeadBranch {
        w1: store.add(
            format!("{prefix}.{name}.conv1.w"),
            lecun(&[hidden, embed_dim, 3, 3], embed_dim * 9, rng),
        ),
        b1: store.add(format!("{prefix}.{name}.conv1.b"), Tensor::zeros(&[hidden])),
        w2: store.add(
            format!("{prefix}.{name}.conv2.w"),
            lecun(&[out, hidden, 3, 3], hidden * 9, rng),
        ),
        b2: store.add(format!("{prefix}.{name}.conv2.b"), Tensor::full(&[out], T::lit(bias))),
    };
    let prior_logit = (SCORE_PRIOR / (1.0 - SCORE_PRIOR)).ln();
    Ok(HeadWeights {
        score: branch("score", 1, prior_logit, rng),
        offset: branch("offset", 2, 0.0, rng),
        size: branch("size", 2, 0.0, rng),
    })
}

pub fn head_param_count(embed_dim: usize, hidden: usize) -> usize {
    let first = 9 * embed_dim * hidden + hidden;
    3 * first + [1, 2, 2].iter().map(|&o| 9 * hidden * o + o).sum::<usize>()
}

fn branch_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, b: &HeadBranch, x: Var) -> Result<Var> {
    let (w1, b1) = (tape.param(store, b.w1), tape.param(store, b.b1));
    let (w2, b2) = (tape.param(store, b.w2), tape.param(store, b.b2));
    let z = tape.conv2d(x, w1, Some(b1), 1, 1, 1)?;
    let z = tape.relu(z);
    tape.conv2d(z, w2, Some(b2), 1, 1, 1)
}

/// Search tokens `[h·w × C]` → score / offset / size maps.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &HeadWeights,
    search_tokens: Var,
    grid: (usize, usize),
) -> Result<HeadVars> {
    let shape = tape.shape(search_tokens).to_vec();
    if shape.len() != 2 || shape[0] != grid.0 * grid.1 {
        return Err(Error::Usage(format!(
            "head expects {}×C search tokens for grid {grid:?}, got {shape:?}",
            grid.0 * grid.1
        )));
    }
    let x = region_tokens_to_grid(tape, search_tokens, grid)?;
    let score_logits = branch_forward(tape, store, &w.score, x)?;
    let score = tape.sigmoid(score_logits);
    let off = branch_forward(tape, store, &w.offset, x)?;
    let offset = tape.sigmoid(off);
    let sz = branch_forward(tape, store, &w.size, x)?;
    let size = tape.sigmoid(sz);
    Ok(HeadVars {
        score_logits,
        score,
        offset,
        size,
        grid,
    })
}

/// Peak cell (row, col) of a score map; ties go to the smallest row-major index.
pub fn argmax_cell(score: &Tensor<f64>) -> (usize, usize) {
    let w = score.shape()[1];
    let mut best = 0;
    for (k, &v) in score.data().iter().enumerate() {
        if v > score.data()[best] {
            best = k;
        }
    }
    (best / w, best % w)
}

pub fn decode_box(maps: &HeadMaps) -> BoundingBox {
    let (h, w) = maps.grid();
    let (i, j) = argmax_cell(&maps.score);
    let at = |t: &Tensor<f64>, c: usize| t.data()[c * h * w + i * w + j];
    BoundingBox::new(
        (j as f64 + at(&maps.offset, 0)) / w as f64,
        (i as f64 + at(&maps.offset, 1)) / h as f64,
        at(&maps.size, 0),
        at(&maps.size, 1),
    )
    .with_confidence(maps.score.data()[i * w + j])
}

/// Grid cell containing the box center, clamped to the grid.
pub fn center_cell(b: &BoundingBox, grid: (usize, usize)) -> (usize, usize) {
    let (h, w) = grid;
    let i = ((b.cy * h as f64).floor().max(0.0) as usize).min(h - 1);
    let j = ((b.cx * w as f64).floor().max(0.0) as usize).min(w - 1);
    (i, j)
}

/// Gaussian heatmap peaking at exactly 1 on the center cell, with
/// σ = diameter / 6 where the diameter is `2·⌊min(w, h in cells)/2⌋ + 1`.
pub fn gaussian_target(gt: &BoundingBox, grid: (usize, usize)) -> Tensor<f64> {
    let (h, w) = grid;
    let (ci, cj) = center_cell(gt, grid);
    let cells = (gt.w * w as f64).min(gt.h * h as f64);
    let radius = (cells / 2.0).floor().max(0.0);
    let sigma = (2.0 * radius + 1.0) / 6.0;
    Tensor::from_fn(&[1, h, w], |k| {
        let (i, j) = ((k / w) as f64, (k % w) as f64);
        let d2 = (i - ci as f64).powi(2) + (j - cj as f64).powi(2);
        if d2 == 0.0 {
            1.0
        } else {
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
    })
}

/// Maps that decode exactly to `gt`: the Gaussian target as score, and the
/// gt offset and size written on every cell.
pub fn encode(gt: &BoundingBox, grid: (usize, usize)) -> Result<HeadMaps> {
    gt.validate()?;
    let (h, w) = grid;
    let (i, j) = center_cell(gt, grid);
    let off = [gt.cx * w as f64 - j as f64, gt.cy * h as f64 - i as f64];
    let size = [gt.w, gt.h];
    Ok(HeadMaps {
        score: gaussian_target(gt, grid).reshape(&[h, w])?,
        offset: Tensor::from_fn(&[2, h, w], |k| off[k / (h * w)]),
        size: Tensor::from_fn(&[2, h, w], |k| size[k / (h * w)]),
    })
}

/// Loss weights (classification, L1, GIoU).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;

/// Unweighted loss terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub focal: f64,
    pub l1: f64,
    /// `1 − GIoU`.
    pub giou: f64,
    pub total: f64,
}

/// Predicted `[cx, cy, w, h]` read at the gt-center cell.
fn box_at_cell<T: Scalar>(tape: &mut Tape<T>, vars: &HeadVars, cell: (usize, usize)) -> Result<Var> {
    let (h, w) = vars.grid;
    let at = cell.0 * w + cell.1;
    let off = tape.gather(vars.offset, &[at, h * w + at])?;
    let base = tape.constant(Tensor::<T>::from_f64(&[2], &[cell.1 as f64, cell.0 as f64])?);
    let inv = tape.constant(Tensor::<T>::from_f64(&[2], &[1.0 / w as f64, 1.0 / h as f64])?);
    let c = tape.add(off, base)?;
    let center = tape.mul(c, inv)?;
    let size = tape.gather(vars.size, &[at, h * w + at])?;
    tape.concat(&[center, size])
}

/// GIoU between a tape box `[cx, cy, w, h]` and a constant box.
pub fn giou_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &BoundingBox) -> Result<Var> {
    let p: Vec<Var> = (0..4).map(|k| tape.gather(pred, &[k])).collect::<Result<_>>()?;
    let (px1, py1) = {
        let hw = tape.scale(p[2], 0.5);
        let hh = tape.scale(p[3], 0.5);
        (tape.sub(p[0], hw)?, tape.sub(p[1], hh)?)
    };
    let px2 = tape.add(px1, p[2])?;
    let py2 = tape.add(py1, p[3])?;
    let [gx, gy, gw, gh] = gt.corner();
    let mut k = |v: f64| tape.constant(Tensor::scalar(T::lit(v)));
    let (gx1, gy1, gx2, gy2) = (k(gx), k(gy), k(gx + gw), k(gy + gh));
    let zero = k(0.0);
    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;
    let pa = tape.mul(p[2], p[3])?;
    let pa_plus_g = tape.add_scalar(pa, gw * gh);
    let union = tape.sub(pa_plus_g, inter)?;
    let iou = tape.div(inter, union)?;
    let ex1 = tape.minimum(px1, gx1)?;
    let ey1 = tape.minimum(py1, gy1)?;
    let ex2 = tape.maximum(px2, gx2)?;
    let ey2 = tape.maximum(py2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;
    let gap = tape.sub(enclosing, union)?;
    let frac = tape.div(gap, enclosing)?;
    tape.sub(iou, frac)
}

/// `λ_cls·focal + λ_l1·L1 + λ_iou·(1 − GIoU)`, box terms at the gt-center cell.
pub fn head_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &HeadVars,
    gt: &BoundingBox,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    gt.validate()?;
    let target = gaussian_target(gt, vars.grid).cast::<T>();
    let focal = tape.focal_loss(vars.score_logits, &target, FOCAL_ALPHA, FOCAL_BETA)?;
    let cell = center_cell(gt, vars.grid);
    let pred = box_at_cell(tape, vars, cell)?;
    let gt_vec = tape.constant(Tensor::<T>::from_f64(&[4], &[gt.cx, gt.cy, gt.w, gt.h])?);
    let diff = tape.sub(pred, gt_vec)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);
    let g = giou_var(tape, pred, gt)?;
    let neg = tape.scale(g, -1.0);
    let giou_term = tape.add_scalar(neg, 1.0);
    let f = tape.scale(focal, weights.cls);
    let l = tape.scale(l1, weights.l1);
    let i = tape.scale(giou_term, weights.giou);
    let fl = tape.add(f, l)?;
    let total = tape.add(fl, i)?;
    let read = |v: Var| tape.value(v).data()[0].as_f64();
    let parts = LossParts {
        focal: read(focal),
        l1: read(l1),
        giou: read(giou_term),
        total: read(total),
    };
    Ok((total, parts))
}
