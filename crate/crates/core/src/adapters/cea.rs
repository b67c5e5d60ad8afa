//! Cross-modality entangled adapter.
//!
//! One weight set serves both branches. Each branch is reduced by `Down`;
//! the channel concatenation of the two reduced maps goes through a 3×3
//! conv to form the fused query. Each branch then attends with that query
//! over keys/values taken from the *other* branch, adds its own reduced
//! features back, and `U` restores the embedding width.

use super::{lecun, AdapterAblationFlags};
use crate::backbone::{per_region, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CeaWeights {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub conv_q: Option<(ParamId, ParamId)>,
    pub conv_k: Option<(ParamId, ParamId)>,
    pub conv_v: Option<(ParamId, ParamId)>,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub hidden: usize,
    pub heads: usize,
    pub flags: AdapterAblationFlags,
}

impl CeaWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.down_w, self.down_b];
        for (a, b) in [self.conv_q, self.conv_k, self.conv_v].into_iter().flatten() {
            v.extend([a, b]);
        }
        v.extend([self.up_w, self.up_b]);
        v
    }

    pub fn up_ids(&self) -> [ParamId; 2] {
        [self.up_w, self.up_b]
    }
}

fn check_dims(hidden: usize, heads: usize) -> Result<()> {
    if hidden == 0 || heads == 0 || hidden % heads != 0 {
        return Err(Error::Config(format!(
            "CEA hidden width {hidden} must be divisible by its {heads} heads"
        )));
    }
    Ok(())
}

pub fn init_cea<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    embed_dim: usize,
    hidden: usize,
    heads: usize,
    flags: AdapterAblationFlags,
    rng: &mut Rng,
) -> Result<CeaWeights> {
    check_dims(hidden, heads)?;
    let (c, h) = (embed_dim, hidden);
    let p = |s: &str| format!("{prefix}.{s}");
    let down_w = store.add(p("down.w"), lecun(&[c, h], c, rng));
    let down_b = store.add(p("down.b"), Tensor::zeros(&[h]));
    let mut conv = |name: &str, cin: usize, rng: &mut Rng| {
        (
            store.add(p(&format!("{name}.w")), lecun(&[h, cin, 3, 3], cin * 9, rng)),
            store.add(p(&format!("{name}.b")), Tensor::zeros(&[h])),
        )
    };
    let (conv_q, conv_k, conv_v) = if flags.cea_use_conv {
        (
            Some(conv("conv_q", 2 * h, rng)),
            Some(conv("conv_k", h, rng)),
            Some(conv("conv_v", h, rng)),
        )
    } else {
        (None, None, None)
    };
    let up_w = store.add(p("up.w"), Tensor::zeros(&[h, c]));
    let up_b = store.add(p("up.b"), Tensor::zeros(&[c]));
    Ok(CeaWeights {
        down_w,
        down_b,
        conv_q,
        conv_k,
        conv_v,
        up_w,
        up_b,
        hidden,
        heads,
        flags,
    })
}

/// Closed-form parameter count of one CEA instance.
pub fn cea_param_count(embed_dim: usize, hidden: usize, flags: &AdapterAblationFlags) -> usize {
    let (c, h) = (embed_dim, hidden);
    let mut n = c * h + h + h * c + c;
    if flags.cea_use_conv {
        n += (2 * h * h * 9 + h) + 2 * (h * h * 9 + h);
    }
    n
}

/// Activations recorded by [`cea_forward`].
#[derive(Debug, Clone, Default)]
pub struct CeaTrace {
    pub hat_rgb: Option<Var>,
    pub hat_x: Option<Var>,
    pub fus: Option<Var>,
    pub q_rgb: Option<Var>,
    pub q_x: Option<Var>,
    pub attn_rgb: Vec<Var>,
    pub attn_x: Vec<Var>,
}

/// Multi-head scaled dot-product attention over flattened tokens, no
/// projections. Probabilities are appended to `capture`.
fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    capture: &mut Vec<Var>,
) -> Result<Var> {
    let c = tape.shape(q)[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d, (h + 1) * d)?,
                tape.slice_cols(k, h * d, (h + 1) * d)?,
                tape.slice_cols(v, h * d, (h + 1) * d)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1)?;
        capture.push(a);
        outs.push(tape.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Returns `(delta_rgb, delta_x)`, each added to its own branch.
pub fn cea_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &CeaWeights,
    h_rgb: &TokenBatch,
    h_x: &TokenBatch,
    trace: Option<&mut CeaTrace>,
) -> Result<(Var, Var)> {
    check_dims(w.hidden, w.heads)?;
    if h_rgb.layout != h_x.layout || tape.shape(h_rgb.tokens) != tape.shape(h_x.tokens) {
        return Err(Error::Usage(format!(
            "CEA branches disagree: {:?} {:?} vs {:?} {:?}",
            h_rgb.layout,
            tape.shape(h_rgb.tokens),
            h_x.layout,
            tape.shape(h_x.tokens)
        )));
    }
    let hc = w.hidden;
    let (dw, db) = (tape.param(store, w.down_w), tape.param(store, w.down_b));
    let hat_rgb = tape.linear(h_rgb.tokens, dw, db)?;
    let hat_x = tape.linear(h_x.tokens, dw, db)?;

    let (fus, k_rgb, v_rgb, k_x, v_x) = match (w.conv_q, w.conv_k, w.conv_v) {
        (Some(q), Some(k), Some(v)) if w.flags.cea_use_conv => {
            let bind = |tape: &mut Tape<T>, (a, b): (ParamId, ParamId)| {
                (tape.param(store, a), tape.param(store, b))
            };
            let (qw, qb) = bind(tape, q);
            let (kw, kb) = bind(tape, k);
            let (vw, vb) = bind(tape, v);
            let all = per_region(tape, h_rgb.layout, &[hat_rgb, hat_x], |tape, _, g| {
                let cat = tape.concat(&[g[0], g[1]])?;
                let fus = tape.conv2d(cat, qw, Some(qb), 1, 1, 1)?;
                let k_rgb = tape.conv2d(g[0], kw, Some(kb), 1, 1, 1)?;
                let v_rgb = tape.conv2d(g[0], vw, Some(vb), 1, 1, 1)?;
                let k_x = tape.conv2d(g[1], kw, Some(kb), 1, 1, 1)?;
                let v_x = tape.conv2d(g[1], vw, Some(vb), 1, 1, 1)?;
                tape.concat(&[fus, k_rgb, v_rgb, k_x, v_x])
            })?;
            let col = |tape: &mut Tape<T>, i: usize| tape.slice_cols(all, i * hc, (i + 1) * hc);
            (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?, col(tape, 4)?)
        }
        _ => {
            // parameter-free stand-ins: mean of the two branches as query,
            // reduced features directly as keys and values
            let s = tape.add(hat_rgb, hat_x)?;
            let fus = tape.scale(s, 0.5);
            (fus, hat_rgb, hat_rgb, hat_x, hat_x)
        }
    };

    let (q_rgb, q_x) = if w.flags.cea_fusion_guided {
        (fus, fus)
    } else {
        (hat_rgb, hat_x)
    };
    let mut attn_rgb = Vec::new();
    let mut attn_x = Vec::new();
    let ca_rgb = cross_attention(tape, q_rgb, k_x, v_x, w.heads, &mut attn_rgb)?;
    let ca_x = cross_attention(tape, q_x, k_rgb, v_rgb, w.heads, &mut attn_x)?;
    let (pre_rgb, pre_x) = if w.flags.cea_use_skip {
        (tape.add(hat_rgb, ca_rgb)?, tape.add(hat_x, ca_x)?)
    } else {
        (ca_rgb, ca_x)
    };
    let (uw, ub) = (tape.param(store, w.up_w), tape.param(store, w.up_b));
    let delta_rgb = tape.linear(pre_rgb, uw, ub)?;
    let delta_x = tape.linear(pre_x, uw, ub)?;
    if let Some(t) = trace {
        *t = CeaTrace {
            hat_rgb: Some(hat_rgb),
            hat_x: Some(hat_x),
            fus: Some(fus),
            q_rgb: Some(q_rgb),
            q_x: Some(q_x),
            attn_rgb,
            attn_x,
        };
    }
    Ok((delta_rgb, delta_x))
}
