use serde::{Deserialize, Serialize};

use super::crop::{crop_regions, image_to_tensor, CropGeom, CropParams};
use super::model::{PatrackModel, TrainMode};
use crate::error::{Error, Result};
use crate::head::{head_loss, BoundingBox, LossParts, LossWeights};
use crate::synth::SequenceRecord;
use crate::tensor::{AdamW, AdamWConfig, Rng, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay_ratio: f64,
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Search-window center jitter per axis, in units of √(w·h).
    pub center_jitter: f64,
    /// Search-window log-scale jitter.
    pub scale_jitter: f64,
    /// Largest frame gap between template and search frames.
    pub max_gap: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            weight_decay: 1e-4,
            lr_decay_ratio: 0.8,
            epochs: 10,
            batch: 8,
            steps_per_epoch: 25,
            seed: 0,
            mode: TrainMode::PretrainRgb,
            center_jitter: 0.5,
            scale_jitter: 0.15,
            max_gap: 40,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a no-op run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be a finite non-negative number", self.lr)));
        }
        if !(self.lr_decay_ratio > 0.0 && self.lr_decay_ratio <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay_ratio {} outside (0, 1]", self.lr_decay_ratio)));
        }
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("train.batch, epochs and steps_per_epoch must be positive".into()));
        }
        if self.center_jitter < 0.0 || self.scale_jitter < 0.0 {
            return Err(Error::Config("train jitters must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_ratio.powi(epoch as i32)
    }
}

/// One training pair: template and search crops of both modalities and the
/// target in search-crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub t_rgb: Tensor<T>,
    pub t_x: Tensor<T>,
    pub s_rgb: Tensor<T>,
    pub s_x: Tensor<T>,
    pub gt: BoundingBox,
}

/// Draws a template/search pair from the visible frames of `rec`.
pub fn make_sample<T: Scalar>(rec: &SequenceRecord, rng: &mut Rng, crop: &CropParams, cfg: &TrainConfig) -> Result<Sample<T>> {
    let vis: Vec<usize> = (0..rec.len()).filter(|&t| rec.visible[t]).collect();
    if vis.is_empty() {
        return Err(Error::Input(format!("{} has no visible frames", rec.name)));
    }
    let t0 = vis[rng.below(vis.len())];
    let near: Vec<usize> = vis.iter().copied().filter(|&t| t.abs_diff(t0) <= cfg.max_gap).collect();
    let t1 = near[rng.below(near.len())];
    let (tr, tx, _) = crop_regions(&rec.rgb[t0], &rec.x[t0], &rec.gt[t0], crop.template_factor, crop.template_size)?;
    let g = rec.gt[t1];
    let (cx, cy) = g.center();
    let unit = g.area().sqrt();
    let jx = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * unit;
    let jy = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * unit;
    let s = rng.uniform(-cfg.scale_jitter, cfg.scale_jitter).exp();
    let geom = CropGeom::around(cx + jx, cy + jy, g.w * s, g.h * s, crop.search_factor, crop.search_size);
    let sr = super::crop::crop_image(&rec.rgb[t1], &geom);
    let sx = super::crop::crop_image(&rec.x[t1], &geom);
    Ok(Sample {
        t_rgb: image_to_tensor(&tr)?,
        t_x: image_to_tensor(&tx)?,
        s_rgb: image_to_tensor(&sr)?,
        s_x: image_to_tensor(&sx)?,
        gt: geom.to_crop(&g),
    })
}

fn check_mode<T: Scalar>(model: &PatrackModel<T>, mode: TrainMode) -> Result<()> {
    if mode == TrainMode::AdapterTune && !model.has_adapters() {
        return Err(Error::Config("adapter tuning needs at least one adapter component".into()));
    }
    let base_on = mode == TrainMode::PretrainRgb;
    let ok = model
        .backbone_ids()
        .iter()
        .chain(&model.head_ids())
        .all(|&id| model.store.get(id).requires_grad == base_on)
        && model.adapter_ids().iter().all(|&id| model.store.get(id).requires_grad != base_on);
    if !ok {
        return Err(Error::Usage(format!("model trainable set does not match mode {mode:?}")));
    }
    Ok(())
}

/// Forward, loss, backward over `batch` and one AdamW step on the trainable
/// parameters. Returns the batch-mean loss terms.
pub fn train_step<T: Scalar>(
    model: &mut PatrackModel<T>,
    opt: &mut AdamW<T>,
    batch: &[Sample<T>],
    mode: TrainMode,
    weights: &LossWeights,
) -> Result<LossParts> {
    check_mode(model, mode)?;
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    model.store.zero_grad();
    let mut mean = LossParts::default();
    let inv = 1.0 / batch.len() as f64;
    for (i, s) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let t = tape.constant(s.t_rgb.clone());
        let sr = tape.constant(s.s_rgb.clone());
        let vars = match mode {
            TrainMode::PretrainRgb => model.base_forward(&mut tape, t, sr)?,
            TrainMode::AdapterTune => {
                let tx = tape.constant(s.t_x.clone());
                let sx = tape.constant(s.s_x.clone());
                model.dual_forward(&mut tape, t, tx, sr, sx, None)?
            }
        };
        let (loss, parts) = head_loss(&mut tape, &vars, &s.gt, weights)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on sample {i}: focal {} l1 {} giou {} total {}",
                parts.focal, parts.l1, parts.giou, parts.total
            )));
        }
        mean.focal += parts.focal * inv;
        mean.l1 += parts.l1 * inv;
        mean.giou += parts.giou * inv;
        mean.total += parts.total * inv;
        let scaled = tape.scale(loss, inv);
        let grads = tape.backward(scaled)?;
        model.store.accumulate(&grads);
    }
    opt.step(&mut model.store)?;
    model.store.zero_grad();
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Runs `cfg.epochs` epochs in `cfg.mode` over samples drawn from `data`.
pub fn train<T: Scalar>(
    model: &mut PatrackModel<T>,
    data: &[SequenceRecord],
    cfg: &TrainConfig,
    crop: &CropParams,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    crop.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    model.set_mode(cfg.mode);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = Rng::new(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let mut acc = LossParts::default();
        for _ in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.batch)
                .map(|_| make_sample(&data[rng.below(data.len())], &mut rng, crop, cfg))
                .collect::<Result<Vec<_>>>()?;
            let p = train_step(model, &mut opt, &batch, cfg.mode, &cfg.loss)?;
            acc.focal += p.focal;
            acc.l1 += p.l1;
            acc.giou += p.giou;
            acc.total += p.total;
        }
        let n = cfg.steps_per_epoch as f64;
        let s = EpochStats {
            epoch: epoch + 1,
            lr,
            loss: acc.total / n,
            focal: acc.focal / n,
            l1: acc.l1 / n,
            giou: acc.giou / n,
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Trains backbone and head jointly on RGB pairs.
pub fn pretrain_rgb<T: Scalar>(
    model: &mut PatrackModel<T>,
    data: &[SequenceRecord],
    cfg: &TrainConfig,
    crop: &CropParams,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let cfg = TrainConfig {
        mode: TrainMode::PretrainRgb,
        ..cfg.clone()
    };
    train(model, data, &cfg, crop, on_epoch)
}
