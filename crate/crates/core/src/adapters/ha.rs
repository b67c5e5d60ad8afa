use super::lecun;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Bottleneck on the fused search tokens: `S′ = S + Up(GELU(Down(S)))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaWeights {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub hidden: usize,
}

impl HaWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.down_w, self.down_b, self.up_w, self.up_b]
    }

    pub fn up_ids(&self) -> [ParamId; 2] {
        [self.up_w, self.up_b]
    }
}

pub fn init_ha<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    embed_dim: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<HaWeights> {
    if hidden == 0 {
        return Err(Error::Config("HA hidden width must be positive".into()));
    }
    let c = embed_dim;
    let p = |s: &str| format!("{prefix}.{s}");
    Ok(HaWeights {
        down_w: store.add(p("down.w"), lecun(&[c, hidden], c, rng)),
        down_b: store.add(p("down.b"), Tensor::zeros(&[hidden])),
        up_w: store.add(p("up.w"), Tensor::zeros(&[hidden, c])),
        up_b: store.add(p("up.b"), Tensor::zeros(&[c])),
        hidden,
    })
}

pub fn ha_param_count(embed_dim: usize, hidden: usize) -> usize {
    2 * embed_dim * hidden + hidden + embed_dim
}

pub fn ha_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &HaWeights,
    search_tokens: Var,
) -> Result<Var> {
    let c = store.value(w.up_b).numel();
    if tape.shape(search_tokens).get(1) != Some(&c) {
        return Err(Error::dim(
            "ha_forward",
            format!("tokens {:?}, embed dim {c}", tape.shape(search_tokens)),
        ));
    }
    let (dw, db) = (tape.param(store, w.down_w), tape.param(store, w.down_b));
    let (uw, ub) = (tape.param(store, w.up_w), tape.param(store, w.up_b));
    let z = tape.linear(search_tokens, dw, db)?;
    let z = tape.gelu(z);
    let z = tape.linear(z, uw, ub)?;
    tape.add(search_tokens, z)
}
