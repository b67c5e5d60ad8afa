use serde::{Deserialize, Serialize};

use crate::adapters::{
    cea_forward, cea_param_count, ha_forward, ha_param_count, init_cea, init_ha, init_mda, make_schedule,
    mda_forward, mda_param_count, AdapterAblationFlags, AdapterKind, CeaWeights, ComponentToggles, DimPreset,
    HaWeights, MdaWeights, PlacementSchedule,
};
use crate::backbone::{
    attn_residual, backbone_param_count, embed_pair, encode, final_norm, init_backbone, mlp_residual,
    split_search, BackboneConfig, BackboneWeights, TokenBatch,
};
use crate::error::{Error, Result};
use crate::head::{decode_box, head_forward, head_param_count, init_head, BoundingBox, HeadMaps, HeadVars, HeadWeights};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Adapter section of the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub preset: DimPreset,
    /// Explicit per-layer kinds; `None` uses the default placement.
    pub schedule: Option<Vec<AdapterKind>>,
    pub flags: AdapterAblationFlags,
    pub components: ComponentToggles,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            preset: DimPreset::Tiny,
            schedule: None,
            flags: AdapterAblationFlags::default(),
            components: ComponentToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub adapters: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head_hidden: 32,
            adapters: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The same backbone and head with every adapter removed.
    pub fn base(&self) -> Self {
        let mut c = self.clone();
        c.adapters.components = ComponentToggles::NONE;
        c
    }
}

/// Adapters attached to one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterLayer {
    None,
    /// Four instances: `x_to_rgb_*` read the X stream and write into the RGB
    /// stream, `rgb_to_x_*` the reverse, at the attention and MLP positions.
    Mda {
        x_to_rgb_attn: MdaWeights,
        rgb_to_x_attn: MdaWeights,
        x_to_rgb_mlp: MdaWeights,
        rgb_to_x_mlp: MdaWeights,
    },
    /// One shared instance per position.
    Cea { attn: CeaWeights, mlp: CeaWeights },
}

impl AdapterLayer {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            AdapterLayer::None => vec![],
            AdapterLayer::Mda {
                x_to_rgb_attn,
                rgb_to_x_attn,
                x_to_rgb_mlp,
                rgb_to_x_mlp,
            } => [x_to_rgb_attn, rgb_to_x_attn, x_to_rgb_mlp, rgb_to_x_mlp]
                .iter()
                .flat_map(|w| w.ids())
                .collect(),
            AdapterLayer::Cea { attn, mlp } => attn.ids().into_iter().chain(mlp.ids()).collect(),
        }
    }
}

/// Which parameter groups a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone and head on RGB only; adapters untouched.
    #[default]
    PretrainRgb,
    /// Adapters only; backbone and head frozen.
    AdapterTune,
}

/// Per-layer token batches of both streams, recorded by [`PatrackModel::dual_forward`].
#[derive(Debug, Clone, Default)]
pub struct StreamTrace {
    pub rgb: Vec<Var>,
    pub x: Vec<Var>,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    pub mda: usize,
    pub cea: usize,
    pub ha: usize,
}

impl ParamCounts {
    pub fn adapters(&self) -> usize {
        self.mda + self.cea + self.ha
    }

    pub fn total(&self) -> usize {
        self.backbone + self.head + self.adapters()
    }
}

/// The full tracker: one backbone shared by both streams, adapters per the
/// placement schedule, the head adapter and the prediction head.
#[derive(Debug, Clone)]
pub struct PatrackModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: BackboneWeights,
    pub head: HeadWeights,
    pub layers: Vec<AdapterLayer>,
    pub ha: Option<HaWeights>,
    pub schedule: PlacementSchedule,
}

impl<T: Scalar> PatrackModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let cfg = &config.backbone;
        cfg.validate()?;
        let schedule = make_schedule(cfg.layers, config.adapters.schedule.as_deref())?;
        let mut store = ParamStore::new();
        let backbone = init_backbone(cfg, &mut store, "backbone", seed)?;
        let head = init_head(&mut store, "head", cfg.embed_dim, config.head_hidden, &mut Rng::derive(seed, 1))?;
        let dims = config.adapters.preset.dims();
        let flags = config.adapters.flags;
        let comp = config.adapters.components;
        let mut rng = Rng::derive(seed, 2);
        let c = cfg.embed_dim;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = |s: &str| format!("adapters.layer{l}.{s}");
            layers.push(match schedule.kind(l) {
                AdapterKind::Mda if comp.mda => {
                    let mut mk = |s: &str| init_mda(&mut store, &p(s), c, dims.mda, flags, &mut rng);
                    AdapterLayer::Mda {
                        x_to_rgb_attn: mk("mda.x_to_rgb_attn")?,
                        rgb_to_x_attn: mk("mda.rgb_to_x_attn")?,
                        x_to_rgb_mlp: mk("mda.x_to_rgb_mlp")?,
                        rgb_to_x_mlp: mk("mda.rgb_to_x_mlp")?,
                    }
                }
                AdapterKind::Cea if comp.cea => {
                    let mut mk = |s: &str| init_cea(&mut store, &p(s), c, dims.cea, cfg.heads, flags, &mut rng);
                    AdapterLayer::Cea {
                        attn: mk("cea.attn")?,
                        mlp: mk("cea.mlp")?,
                    }
                }
                _ => AdapterLayer::None,
            });
        }
        let ha = if comp.ha {
            Some(init_ha(&mut store, "adapters.ha", c, dims.ha, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            layers,
            ha,
            schedule,
        })
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.ids()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids()
    }

    pub fn mda_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter(|l| matches!(l, AdapterLayer::Mda { .. }))
            .flat_map(|l| l.ids())
            .collect()
    }

    pub fn cea_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter(|l| matches!(l, AdapterLayer::Cea { .. }))
            .flat_map(|l| l.ids())
            .collect()
    }

    pub fn ha_ids(&self) -> Vec<ParamId> {
        self.ha.as_ref().map(|h| h.ids()).unwrap_or_default()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        let mut v = self.mda_ids();
        v.extend(self.cea_ids());
        v.extend(self.ha_ids());
        v
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapter_ids().is_empty()
    }

    /// Sets `requires_grad` so exactly the groups of `mode` are trainable.
    pub fn set_mode(&mut self, mode: TrainMode) {
        let base_on = mode == TrainMode::PretrainRgb;
        for id in self.backbone_ids().into_iter().chain(self.head_ids()) {
            self.store.set_requires_grad(id, base_on);
        }
        for id in self.adapter_ids() {
            self.store.set_requires_grad(id, !base_on);
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            backbone: self.store.num_elements(self.backbone_ids()),
            head: self.store.num_elements(self.head_ids()),
            mda: self.store.num_elements(self.mda_ids()),
            cea: self.store.num_elements(self.cea_ids()),
            ha: self.store.num_elements(self.ha_ids()),
        }
    }

    /// Copies every tensor of `base` whose name exists here. Every backbone
    /// and head tensor must be present with a matching shape.
    pub fn load_base<U: Scalar>(&mut self, base: &ParamStore<U>) -> Result<()> {
        let required: Vec<ParamId> = self.backbone_ids().into_iter().chain(self.head_ids()).collect();
        for id in required {
            let name = self.store.get(id).name.clone();
            let Some(src) = base.find(&name) else {
                return Err(Error::Config(format!("base checkpoint lacks tensor {name}")));
            };
            self.store.assign(id, base.value(src).cast())?;
        }
        Ok(())
    }

    /// Zeroes the up-projections of every `x_to_rgb` MDA instance.
    pub fn zero_x_to_rgb_mda(&mut self) {
        let mut ids = Vec::new();
        for l in &self.layers {
            if let AdapterLayer::Mda {
                x_to_rgb_attn,
                x_to_rgb_mlp,
                ..
            } = l
            {
                ids.extend(x_to_rgb_attn.up_ids());
                ids.extend(x_to_rgb_mlp.up_ids());
            }
        }
        for id in ids {
            let shape = self.store.value(id).shape().to_vec();
            *self.store.value_mut(id) = Tensor::zeros(&shape);
        }
    }

    /// Single-stream base model on RGB: encoder, search tokens, head.
    pub fn base_forward(&self, tape: &mut Tape<T>, template: Var, search: Var) -> Result<HeadVars> {
        let cfg = &self.config.backbone;
        let batch = encode(tape, &self.store, &self.backbone, cfg, template, search)?;
        let s = split_search(tape, &batch)?;
        head_forward(tape, &self.store, &self.head, s, batch.layout.search_grid)
    }

    /// Dual-stream forward with adapters; `trace` records each layer's outputs.
    pub fn dual_forward(
        &self,
        tape: &mut Tape<T>,
        t_rgb: Var,
        t_x: Var,
        s_rgb: Var,
        s_x: Var,
        mut trace: Option<&mut StreamTrace>,
    ) -> Result<HeadVars> {
        let cfg = &self.config.backbone;
        let store = &self.store;
        for (v, what) in [(t_x, "template"), (s_x, "search")] {
            let rgb = if what == "template" { t_rgb } else { s_rgb };
            if tape.shape(v) != tape.shape(rgb) {
                return Err(Error::Input(format!(
                    "{what} X image {:?} differs from RGB {:?}",
                    tape.shape(v),
                    tape.shape(rgb)
                )));
            }
        }
        let mut hr = embed_pair(tape, store, &self.backbone, cfg, t_rgb, s_rgb)?;
        let mut hx = embed_pair(tape, store, &self.backbone, cfg, t_x, s_x)?;
        for (lw, adapters) in self.backbone.layers.iter().zip(&self.layers) {
            let mut mid_r = attn_residual(tape, store, lw, cfg.heads, hr.tokens, None)?;
            let mut mid_x = attn_residual(tape, store, lw, cfg.heads, hx.tokens, None)?;
            match adapters {
                AdapterLayer::None => {}
                AdapterLayer::Mda {
                    x_to_rgb_attn,
                    rgb_to_x_attn,
                    ..
                } => {
                    let dr = mda_forward(tape, store, x_to_rgb_attn, &hx, None)?;
                    let dx = mda_forward(tape, store, rgb_to_x_attn, &hr, None)?;
                    mid_r = tape.add(mid_r, dr)?;
                    mid_x = tape.add(mid_x, dx)?;
                }
                AdapterLayer::Cea { attn, .. } => {
                    let (dr, dx) = cea_forward(tape, store, attn, &hr, &hx, None)?;
                    mid_r = tape.add(mid_r, dr)?;
                    mid_x = tape.add(mid_x, dx)?;
                }
            }
            let (br, bx) = (hr.with_tokens(mid_r), hx.with_tokens(mid_x));
            let mut out_r = mlp_residual(tape, store, lw, mid_r)?;
            let mut out_x = mlp_residual(tape, store, lw, mid_x)?;
            match adapters {
                AdapterLayer::None => {}
                AdapterLayer::Mda {
                    x_to_rgb_mlp,
                    rgb_to_x_mlp,
                    ..
                } => {
                    let dr = mda_forward(tape, store, x_to_rgb_mlp, &bx, None)?;
                    let dx = mda_forward(tape, store, rgb_to_x_mlp, &br, None)?;
                    out_r = tape.add(out_r, dr)?;
                    out_x = tape.add(out_x, dx)?;
                }
                AdapterLayer::Cea { mlp, .. } => {
                    let (dr, dx) = cea_forward(tape, store, mlp, &br, &bx, None)?;
                    out_r = tape.add(out_r, dr)?;
                    out_x = tape.add(out_x, dx)?;
                }
            }
            hr = hr.with_tokens(out_r);
            hx = hx.with_tokens(out_x);
            if let Some(t) = trace.as_deref_mut() {
                t.rgb.push(out_r);
                t.x.push(out_x);
            }
        }
        let fused = self.fuse(tape, &hr, &hx)?;
        head_forward(tape, store, &self.head, fused, hr.layout.search_grid)
    }

    /// Final norm of both streams, mean of the search tokens, then HA.
    fn fuse(&self, tape: &mut Tape<T>, hr: &TokenBatch, hx: &TokenBatch) -> Result<Var> {
        let nr = final_norm(tape, &self.store, &self.backbone, hr.tokens)?;
        let nx = final_norm(tape, &self.store, &self.backbone, hx.tokens)?;
        let sr = split_search(tape, &hr.with_tokens(nr))?;
        let sx = split_search(tape, &hx.with_tokens(nx))?;
        let sum = tape.add(sr, sx)?;
        let fused = tape.scale(sum, 0.5);
        match &self.ha {
            Some(ha) => ha_forward(tape, &self.store, ha, fused),
            None => Ok(fused),
        }
    }

    /// Inference on image tensors; `x = None` runs the RGB base model.
    pub fn predict(
        &self,
        t_rgb: &Tensor<T>,
        s_rgb: &Tensor<T>,
        x: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(BoundingBox, HeadMaps)> {
        let mut tape = Tape::new();
        let t = tape.constant(t_rgb.clone());
        let s = tape.constant(s_rgb.clone());
        let vars = match x {
            Some((tx, sx)) => {
                let tx = tape.constant(tx.clone());
                let sx = tape.constant(sx.clone());
                self.dual_forward(&mut tape, t, tx, s, sx, None)?
            }
            None => self.base_forward(&mut tape, t, s)?,
        };
        let maps = vars.maps(&tape);
        Ok((decode_box(&maps), maps))
    }
}

/// Closed-form parameter counts for a configuration.
pub fn count_params(config: &ModelConfig) -> Result<ParamCounts> {
    let cfg = &config.backbone;
    cfg.validate()?;
    let schedule = make_schedule(cfg.layers, config.adapters.schedule.as_deref())?;
    let dims = config.adapters.preset.dims();
    let flags = &config.adapters.flags;
    let comp = config.adapters.components;
    let c = cfg.embed_dim;
    let n_mda = if comp.mda { schedule.layers_of(AdapterKind::Mda).len() } else { 0 };
    let n_cea = if comp.cea { schedule.layers_of(AdapterKind::Cea).len() } else { 0 };
    Ok(ParamCounts {
        backbone: backbone_param_count(cfg),
        head: head_param_count(c, config.head_hidden),
        mda: if n_mda > 0 { 4 * n_mda * mda_param_count(c, dims.mda, flags)? } else { 0 },
        cea: 2 * n_cea * cea_param_count(c, dims.cea, flags),
        ha: if comp.ha { ha_param_count(c, dims.ha) } else { 0 },
    })
}
