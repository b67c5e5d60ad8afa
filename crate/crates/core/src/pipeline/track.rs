use super::crop::{crop_image, crop_regions, image_to_tensor, CropGeom, CropParams};
use super::model::PatrackModel;
use crate::error::Result;
use crate::geometry::Rect;
use crate::head::{decode_box, encode, BoundingBox};
use crate::metrics::{Prediction, TrackResult};
use crate::synth::{Image, SequenceRecord};
use crate::tensor::{Scalar, Tensor};

/// Smallest box side the tracker will carry between frames, pixels.
const MIN_SIDE: f64 = 2.0;

/// What a tracker sees of the frame being searched.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext {
    pub index: usize,
    pub geom: CropGeom,
}

/// Anything that maps template and search crops to a crop-normalized box.
pub trait Predictor {
    fn set_template(&mut self, rgb: &Image, x: &Image) -> Result<()>;
    fn predict(&mut self, rgb: &Image, x: &Image, ctx: &FrameContext) -> Result<BoundingBox>;
}

/// Which streams the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Base model on RGB only.
    RgbOnly,
    /// Adapted dual-stream model.
    Dual,
}

pub struct ModelPredictor<'a, T> {
    model: &'a PatrackModel<T>,
    mode: StreamMode,
    template: Option<(Tensor<T>, Tensor<T>)>,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    pub fn new(model: &'a PatrackModel<T>, mode: StreamMode) -> Self {
        Self {
            model,
            mode,
            template: None,
        }
    }
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn set_template(&mut self, rgb: &Image, x: &Image) -> Result<()> {
        self.template = Some((image_to_tensor(rgb)?, image_to_tensor(x)?));
        Ok(())
    }

    fn predict(&mut self, rgb: &Image, x: &Image, _ctx: &FrameContext) -> Result<BoundingBox> {
        let (t_rgb, t_x) = self
            .template
            .as_ref()
            .ok_or_else(|| crate::Error::Usage("predict before set_template".into()))?;
        let s_rgb = image_to_tensor(rgb)?;
        let (b, _) = match self.mode {
            StreamMode::RgbOnly => self.model.predict(t_rgb, &s_rgb, None)?,
            StreamMode::Dual => {
                let s_x = image_to_tensor(x)?;
                self.model.predict(t_rgb, &s_rgb, Some((t_x, &s_x)))?
            }
        };
        Ok(b)
    }
}

/// Stub predictor that encodes the ground truth into head maps and decodes
/// them, exercising the full coordinate plumbing.
pub struct OraclePredictor {
    gt: Vec<Rect>,
    grid: (usize, usize),
}

impl OraclePredictor {
    pub fn new(rec: &SequenceRecord, grid: (usize, usize)) -> Self {
        Self { gt: rec.gt.clone(), grid }
    }
}

impl Predictor for OraclePredictor {
    fn set_template(&mut self, _rgb: &Image, _x: &Image) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, _rgb: &Image, _x: &Image, ctx: &FrameContext) -> Result<BoundingBox> {
        let b = ctx.geom.to_crop(&self.gt[ctx.index]);
        Ok(decode_box(&encode(&b, self.grid)?))
    }
}

/// Fixed-template tracking: frame 0 returns the initial box, every later
/// search window is centered on the previous prediction.
pub fn track_sequence(p: &mut dyn Predictor, rec: &SequenceRecord, crop: &CropParams) -> Result<Vec<Prediction>> {
    rec.validate()?;
    let mut out = Vec::with_capacity(rec.len());
    let Some(&init) = rec.gt.first() else {
        return Ok(out);
    };
    let (t_rgb, t_x, _) = crop_regions(&rec.rgb[0], &rec.x[0], &init, crop.template_factor, crop.template_size)?;
    p.set_template(&t_rgb, &t_x)?;
    out.push(Prediction {
        rect: Some(init),
        confidence: 1.0,
    });
    let mut prev = init;
    for t in 1..rec.len() {
        let (fw, fh) = (rec.rgb[t].width as f64, rec.rgb[t].height as f64);
        let (cx, cy) = prev.center();
        let geom = CropGeom::around(cx, cy, prev.w, prev.h, crop.search_factor, crop.search_size);
        let s_rgb = crop_image(&rec.rgb[t], &geom);
        let s_x = crop_image(&rec.x[t], &geom);
        let b = p.predict(&s_rgb, &s_x, &FrameContext { index: t, geom })?;
        let r = geom.to_frame(&b);
        // keep the carried state inside the frame with a usable size
        let w = r.w.clamp(MIN_SIDE, fw);
        let h = r.h.clamp(MIN_SIDE, fh);
        let (rx, ry) = r.center();
        let next = Rect::from_center(rx.clamp(0.0, fw), ry.clamp(0.0, fh), w, h);
        out.push(Prediction {
            rect: Some(r),
            confidence: b.confidence.unwrap_or(0.0),
        });
        prev = next;
    }
    Ok(out)
}

/// Tracks every record on up to `threads` workers. Results come back in
/// input order whatever the thread count.
pub fn track_all<P, F>(records: &[SequenceRecord], crop: &CropParams, threads: usize, make: F) -> Result<Vec<TrackResult>>
where
    P: Predictor,
    F: Fn(&SequenceRecord) -> P + Sync,
{
    let run = |r: &SequenceRecord| -> Result<TrackResult> {
        Ok(TrackResult {
            name: r.name.clone(),
            predictions: track_sequence(&mut make(r), r, crop)?,
        })
    };
    let threads = threads.clamp(1, records.len().max(1));
    if threads == 1 {
        return records.iter().map(run).collect();
    }
    let mut slots: Vec<Option<Result<TrackResult>>> = (0..records.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = records.len().div_ceil(threads);
        for (recs, out) in records.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let run = &run;
            s.spawn(move || {
                for (r, o) in recs.iter().zip(out.iter_mut()) {
                    *o = Some(run(r));
                }
            });
        }
    });
    slots.into_iter().map(|o| o.expect("every slot filled")).collect()
}
