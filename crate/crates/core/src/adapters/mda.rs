//! Modality-dependent adapter.
//!
//! `Down` reduces tokens to C′ channels, which split into a high-frequency
//! half and a low-frequency half. The high half splits again: one quarter
//! goes through max-pool + 1×1 conv (FC1), the other through 1×1 conv (FC2)
//! + depthwise 3×3. The low half is average-pooled to half resolution and
//! upsampled back. The three C′/2-wide results are concatenated and `U`
//! projects them back to C. Template and search regions are processed as
//! separate grids.

use super::{lecun, AdapterAblationFlags};
use crate::backbone::{per_region, Region, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, PoolKind, Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MdaWeights {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub fc1_w: Option<(ParamId, ParamId)>,
    pub fc2_w: Option<(ParamId, ParamId)>,
    pub dw: Option<(ParamId, ParamId)>,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub hidden: usize,
    pub flags: AdapterAblationFlags,
}

impl MdaWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.down_w, self.down_b];
        for (a, b) in [self.fc1_w, self.fc2_w, self.dw].into_iter().flatten() {
            v.extend([a, b]);
        }
        v.extend([self.up_w, self.up_b]);
        v
    }

    pub fn up_ids(&self) -> [ParamId; 2] {
        [self.up_w, self.up_b]
    }
}

/// Channel widths at each stage for a given C′ and branch selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MdaWidths {
    pub down: usize,
    pub high: usize,
    pub low: usize,
    pub hm: usize,
    pub hd: usize,
    pub hm_out: usize,
    pub hd_out: usize,
    pub low_out: usize,
    pub branches: usize,
    pub concat: usize,
}

impl MdaWidths {
    pub fn new(hidden: usize, flags: &AdapterAblationFlags) -> Result<Self> {
        if hidden == 0 || hidden % 4 != 0 {
            return Err(Error::Config(format!(
                "MDA hidden width {hidden} must be a positive multiple of 4"
            )));
        }
        let branches = flags.mda_branch_count();
        if branches == 0 {
            return Err(Error::Config(
                "MDA scheduled with every branch disabled".into(),
            ));
        }
        Ok(Self {
            down: hidden,
            high: hidden / 2,
            low: hidden / 2,
            hm: hidden / 4,
            hd: hidden / 4,
            hm_out: hidden / 2,
            hd_out: hidden / 2,
            low_out: hidden / 2,
            branches,
            concat: branches * hidden / 2,
        })
    }
}

pub fn init_mda<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    embed_dim: usize,
    hidden: usize,
    flags: AdapterAblationFlags,
    rng: &mut Rng,
) -> Result<MdaWeights> {
    let w = MdaWidths::new(hidden, &flags)?;
    let c = embed_dim;
    let p = |s: &str| format!("{prefix}.{s}");
    let down_w = store.add(p("down.w"), lecun(&[c, w.down], c, rng));
    let down_b = store.add(p("down.b"), Tensor::zeros(&[w.down]));
    let fc1_w = flags.mda_use_max.then(|| {
        (
            store.add(p("fc1.w"), lecun(&[w.hm_out, w.hm, 1, 1], w.hm, rng)),
            store.add(p("fc1.b"), Tensor::zeros(&[w.hm_out])),
        )
    });
    let (fc2_w, dw) = if flags.mda_use_dwconv {
        (
            Some((
                store.add(p("fc2.w"), lecun(&[w.hd_out, w.hd, 1, 1], w.hd, rng)),
                store.add(p("fc2.b"), Tensor::zeros(&[w.hd_out])),
            )),
            Some((
                store.add(p("dw.w"), lecun(&[w.hd_out, 1, 3, 3], 9, rng)),
                store.add(p("dw.b"), Tensor::zeros(&[w.hd_out])),
            )),
        )
    } else {
        (None, None)
    };
    let up_w = store.add(p("up.w"), Tensor::zeros(&[w.concat, c]));
    let up_b = store.add(p("up.b"), Tensor::zeros(&[c]));
    Ok(MdaWeights {
        down_w,
        down_b,
        fc1_w,
        fc2_w,
        dw,
        up_w,
        up_b,
        hidden,
        flags,
    })
}

/// Closed-form parameter count of one MDA instance.
pub fn mda_param_count(embed_dim: usize, hidden: usize, flags: &AdapterAblationFlags) -> Result<usize> {
    let w = MdaWidths::new(hidden, flags)?;
    let c = embed_dim;
    let mut n = c * w.down + w.down;
    if flags.mda_use_max {
        n += w.hm * w.hm_out + w.hm_out;
    }
    if flags.mda_use_dwconv {
        n += w.hd * w.hd_out + w.hd_out + 9 * w.hd_out + w.hd_out;
    }
    n += w.concat * c + c;
    Ok(n)
}

/// Intermediate activations recorded by [`mda_forward`].
#[derive(Debug, Clone, Default)]
pub struct MdaTrace {
    pub down: Option<Var>,
    /// Per-region `(Y_hm, Y_hd, Y_l, concat)` feature maps; absent branches are `None`.
    pub regions: Vec<(Region, Option<Var>, Option<Var>, Option<Var>, Var)>,
}

/// Returns the `(n_t+n_s)×C` delta produced from `source` tokens.
pub fn mda_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &MdaWeights,
    source: &TokenBatch,
    mut trace: Option<&mut MdaTrace>,
) -> Result<Var> {
    let widths = MdaWidths::new(w.hidden, &w.flags)?;
    let layout = source.layout;
    for region in [Region::Template, Region::Search] {
        let (h, wd) = layout.grid(region);
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(Error::Config(format!(
                "MDA needs even grids; {region:?} grid is {h}×{wd}"
            )));
        }
    }
    let (dw_, db) = (tape.param(store, w.down_w), tape.param(store, w.down_b));
    let down = tape.linear(source.tokens, dw_, db)?;
    let hm = tape.slice_cols(down, 0, widths.hm)?;
    let hd = tape.slice_cols(down, widths.hm, widths.high)?;
    let low = tape.slice_cols(down, widths.high, widths.down)?;
    if let Some(t) = trace.as_deref_mut() {
        t.down = Some(down);
    }
    let fused = per_region(tape, layout, &[hm, hd, low], |tape, region, g| {
        let mut parts = Vec::with_capacity(3);
        let y_hm = match w.fc1_w {
            Some((fw, fb)) if w.flags.mda_use_max => {
                let p = tape.pool2d(g[0], PoolKind::Max, 3, 1, 1)?;
                let (fw, fb) = (tape.param(store, fw), tape.param(store, fb));
                Some(tape.conv2d(p, fw, Some(fb), 1, 0, 1)?)
            }
            _ => None,
        };
        let y_hd = match (w.fc2_w, w.dw) {
            (Some((fw, fb)), Some((kw, kb))) if w.flags.mda_use_dwconv => {
                let (fw, fb) = (tape.param(store, fw), tape.param(store, fb));
                let e = tape.conv2d(g[1], fw, Some(fb), 1, 0, 1)?;
                let (kw, kb) = (tape.param(store, kw), tape.param(store, kb));
                Some(tape.conv2d(e, kw, Some(kb), 1, 1, widths.hd_out)?)
            }
            _ => None,
        };
        let y_l = if w.flags.mda_use_avg {
            let p = tape.pool2d(g[2], PoolKind::Avg, 2, 2, 0)?;
            Some(tape.upsample_nearest2d(p, 2)?)
        } else {
            None
        };
        parts.extend(y_hm);
        parts.extend(y_hd);
        parts.extend(y_l);
        let cat = tape.concat(&parts)?;
        if let Some(t) = trace.as_deref_mut() {
            t.regions.push((region, y_hm, y_hd, y_l, cat));
        }
        Ok(cat)
    })?;
    let (uw, ub) = (tape.param(store, w.up_w), tape.param(store, w.up_b));
    tape.linear(fused, uw, ub)
}
