use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::head::BoundingBox;
use crate::synth::Image;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropParams {
    /// Template side = factor · √(w·h).
    pub template_factor: f64,
    pub search_factor: f64,
    pub template_size: usize,
    pub search_size: usize,
}

impl CropParams {
    pub fn new(template_size: usize, search_size: usize) -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            template_size,
            search_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.template_factor >= 1.0 && self.search_factor >= 1.0) {
            return Err(Error::Config("crop context factors must be ≥ 1".into()));
        }
        if self.template_size == 0 || self.search_size == 0 {
            return Err(Error::Config("crop output sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A square window of the frame mapped onto an `out × out` crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeom {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropGeom {
    /// Window of side `factor·√(w·h)` centered at `(cx, cy)`.
    pub fn around(cx: f64, cy: f64, w: f64, h: f64, factor: f64, out: usize) -> Self {
        let side = factor * (w * h).sqrt();
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out,
        }
    }

    /// Frame rect → box normalized to the crop.
    pub fn to_crop(&self, r: &Rect) -> BoundingBox {
        let (cx, cy) = r.center();
        BoundingBox::new(
            (cx - self.x0) / self.side,
            (cy - self.y0) / self.side,
            r.w / self.side,
            r.h / self.side,
        )
    }

    /// Crop-normalized box → frame rect.
    pub fn to_frame(&self, b: &BoundingBox) -> Rect {
        Rect::from_center(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// Nearest-neighbour resample of the window; out-of-frame pixels take the
/// channel mean of the frame.
pub fn crop_image(img: &Image, g: &CropGeom) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(img.channels, g.out, g.out);
    let step = g.side / g.out as f64;
    let src = |o: f64, u: usize, n: usize| {
        let v = (o + (u as f64 + 0.5) * step).floor();
        (v >= 0.0 && v < n as f64).then_some(v as usize)
    };
    let xs: Vec<Option<usize>> = (0..g.out).map(|u| src(g.x0, u, w)).collect();
    let ys: Vec<Option<usize>> = (0..g.out).map(|u| src(g.y0, u, h)).collect();
    for c in 0..img.channels {
        let plane = img.plane(c);
        let mean = (plane.iter().map(|&v| v as u64).sum::<u64>() as f64 / plane.len() as f64).round() as u8;
        for (v, sy) in ys.iter().enumerate() {
            for (u, sx) in xs.iter().enumerate() {
                let val = match (sy, sx) {
                    (Some(y), Some(x)) => plane[y * w + x],
                    _ => mean,
                };
                out.set(c, v, u, val);
            }
        }
    }
    out
}

/// Crops both modalities with one geometry centered on `box_`.
pub fn crop_regions(rgb: &Image, x: &Image, box_: &Rect, factor: f64, out: usize) -> Result<(Image, Image, CropGeom)> {
    box_.validate()?;
    let frame = Rect::new(0.0, 0.0, rgb.width as f64, rgb.height as f64);
    if box_.intersection(&frame) <= 0.0 {
        return Err(Error::Input(format!("box {box_:?} lies outside the {}×{} frame", rgb.width, rgb.height)));
    }
    if (x.height, x.width) != (rgb.height, rgb.width) {
        return Err(Error::Input(format!(
            "X frame {}×{} not aligned with RGB {}×{}",
            x.width, x.height, rgb.width, rgb.height
        )));
    }
    let (cx, cy) = box_.center();
    let g = CropGeom::around(cx, cy, box_.w, box_.h, factor, out);
    Ok((crop_image(rgb, &g), crop_image(x, &g), g))
}

/// `3×H×W` tensor with pixels mapped to `v/127.5 − 1`; single-channel
/// images are replicated across the three channels.
pub fn image_to_tensor<T: Scalar>(img: &Image) -> Result<Tensor<T>> {
    let n = img.height * img.width;
    let data: Vec<T> = match img.channels {
        3 => img.data.iter().map(|&v| T::lit(v as f64 / 127.5 - 1.0)).collect(),
        1 => (0..3 * n).map(|k| T::lit(img.data[k % n] as f64 / 127.5 - 1.0)).collect(),
        c => return Err(Error::Input(format!("cannot feed a {c}-channel image"))),
    };
    Tensor::new(&[3, img.height, img.width], data)
}
