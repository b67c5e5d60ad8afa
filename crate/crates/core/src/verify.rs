//! Finite-difference verification of every trainable component.

use serde::{Deserialize, Serialize};

use crate::adapters::{cea_forward, ha_forward, init_cea, init_ha, init_mda, mda_forward};
use crate::backbone::{TokenBatch, TokenLayout};
use crate::error::Result;
use crate::head::{head_forward, head_loss, init_head, BoundingBox, LossWeights};
use crate::pipeline::{ModelConfig, PatrackModel};
use crate::tensor::{check_param_gradients, weighted_sum, GradReport, ParamId, ParamStore, Rng, Tensor};

/// Tolerance for each isolated component.
pub const COMPONENT_TOL: f64 = 1e-4;
/// Tolerance for the assembled model.
pub const ASSEMBLED_TOL: f64 = 1e-3;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Small token layout for the component checks.
const LAYOUT: TokenLayout = TokenLayout {
    template_grid: (2, 2),
    search_grid: (4, 4),
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub pass: bool,
}

impl GradRow {
    fn new(component: &str, tolerance: f64, r: GradReport) -> Self {
        Self {
            component: component.into(),
            max_rel_err: r.max_rel_err,
            tolerance,
            checked: r.checked,
            worst: r.worst,
            pass: r.max_rel_err < tolerance,
        }
    }
}

fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], scale: f64, rng: &mut Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::from_fn(&shape, |_| rng.uniform(-scale, scale));
    }
}

fn tokens(store: &mut ParamStore<f64>, name: &str, n: usize, c: usize, rng: &mut Rng) -> ParamId {
    store.add(name, Tensor::from_fn(&[n, c], |_| rng.uniform(-1.0, 1.0)))
}

/// Checks MDA, CEA, HA and the head in isolation over every coordinate, then
/// the assembled dual-stream model at `samples` random coordinates.
/// `corrupt` scales the analytic gradients; 1.0 is a real check.
pub fn gradcheck_suite(cfg: &ModelConfig, samples: usize, corrupt: f64, seed: u64) -> Result<Vec<GradRow>> {
    let c = cfg.backbone.embed_dim;
    let dims = cfg.adapters.preset.dims();
    let flags = cfg.adapters.flags;
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();

    let mut store = ParamStore::new();
    let w = init_mda(&mut store, "mda", c, dims.mda, flags, &mut rng)?;
    randomize(&mut store, &w.ids(), 0.5, &mut rng);
    let x = tokens(&mut store, "input", LAYOUT.len(), c, &mut rng);
    let mut ids = w.ids();
    ids.push(x);
    let r = check_param_gradients(&mut store, &ids, None, FD_STEP, corrupt, |tape, st| {
        let v = tape.param(st, x);
        let batch = TokenBatch::new(tape, v, LAYOUT)?;
        let d = mda_forward(tape, st, &w, &batch, None)?;
        weighted_sum(tape, d, seed + 1)
    })?;
    rows.push(GradRow::new("MDA", COMPONENT_TOL, r));

    let mut store = ParamStore::new();
    let w = init_cea(&mut store, "cea", c, dims.cea, cfg.backbone.heads, flags, &mut rng)?;
    randomize(&mut store, &w.ids(), 0.5, &mut rng);
    let a = tokens(&mut store, "rgb", LAYOUT.len(), c, &mut rng);
    let b = tokens(&mut store, "x", LAYOUT.len(), c, &mut rng);
    let mut ids = w.ids();
    ids.extend([a, b]);
    let r = check_param_gradients(&mut store, &ids, None, FD_STEP, corrupt, |tape, st| {
        let (va, vb) = (tape.param(st, a), tape.param(st, b));
        let ba = TokenBatch::new(tape, va, LAYOUT)?;
        let bb = TokenBatch::new(tape, vb, LAYOUT)?;
        let (dr, dx) = cea_forward(tape, st, &w, &ba, &bb, None)?;
        let both = tape.concat(&[dr, dx])?;
        weighted_sum(tape, both, seed + 2)
    })?;
    rows.push(GradRow::new("CEA", COMPONENT_TOL, r));

    let n_s = LAYOUT.n_s();
    let mut store = ParamStore::new();
    let w = init_ha(&mut store, "ha", c, dims.ha, &mut rng)?;
    randomize(&mut store, &w.ids(), 0.5, &mut rng);
    let s = tokens(&mut store, "search", n_s, c, &mut rng);
    let mut ids = w.ids();
    ids.push(s);
    let r = check_param_gradients(&mut store, &ids, None, FD_STEP, corrupt, |tape, st| {
        let v = tape.param(st, s);
        let y = ha_forward(tape, st, &w, v)?;
        weighted_sum(tape, y, seed + 3)
    })?;
    rows.push(GradRow::new("HA", COMPONENT_TOL, r));

    let mut store = ParamStore::new();
    let w = init_head(&mut store, "head", c, cfg.head_hidden, &mut rng)?;
    let s = tokens(&mut store, "search", n_s, c, &mut rng);
    let mut ids = w.ids();
    ids.push(s);
    let gt = BoundingBox::new(0.4, 0.6, 0.3, 0.2);
    let r = check_param_gradients(&mut store, &ids, None, FD_STEP, corrupt, |tape, st| {
        let v = tape.param(st, s);
        let vars = head_forward(tape, st, &w, v, LAYOUT.search_grid)?;
        Ok(head_loss(tape, &vars, &gt, &LossWeights::default())?.0)
    })?;
    rows.push(GradRow::new("head", COMPONENT_TOL, r));

    let mut model = PatrackModel::<f64>::new(cfg, seed)?;
    // live up-projections so every adapter carries gradient
    let adapters = model.adapter_ids();
    randomize(&mut model.store, &adapters, 0.1, &mut rng);
    let b = cfg.backbone;
    let imgs: Vec<Tensor<f64>> = [b.template_size, b.template_size, b.search_size, b.search_size]
        .iter()
        .map(|&n| Tensor::from_fn(&[3, n, n], |_| rng.uniform(-1.0, 1.0)))
        .collect();
    let gt = BoundingBox::new(0.45, 0.55, 0.3, 0.25);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut store = std::mem::replace(&mut model.store, ParamStore::new());
    let mut pick = Rng::derive(seed, 7);
    let r = check_param_gradients(&mut store, &ids, Some((samples, &mut pick)), FD_STEP, corrupt, |tape, st| {
        model.store = st.clone();
        let v: Vec<_> = imgs.iter().map(|t| tape.constant(t.clone())).collect();
        let vars = if model.has_adapters() {
            model.dual_forward(tape, v[0], v[1], v[2], v[3], None)?
        } else {
            model.base_forward(tape, v[0], v[2])?
        };
        Ok(head_loss(tape, &vars, &gt, &LossWeights::default())?.0)
    })?;
    rows.push(GradRow::new("assembled", ASSEMBLED_TOL, r));
    Ok(rows)
}
