//! Patch embedding, positional tables and the pre-LN transformer encoder
//! shared by both modality streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    /// Template crop side in pixels (square).
    pub template_size: usize,
    /// Search crop side in pixels (square).
    pub search_size: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 12,
            heads: 4,
            patch: 8,
            template_size: 32,
            search_size: 64,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.patch == 0 {
            return bad("backbone extents must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        for (name, side) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if side == 0 || side % self.patch != 0 {
                return bad(format!("{name} {side} not divisible by patch {}", self.patch));
            }
            if (side / self.patch) % 2 != 0 {
                return bad(format!(
                    "{name} {side} gives an odd token grid {}",
                    side / self.patch
                ));
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        let t = self.template_size / self.patch;
        let s = self.search_size / self.patch;
        TokenLayout {
            template_grid: (t, t),
            search_grid: (s, s),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
}

/// Grid extents of the template and search regions of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub template_grid: (usize, usize),
    pub search_grid: (usize, usize),
}

impl TokenLayout {
    pub fn n_t(&self) -> usize {
        self.template_grid.0 * self.template_grid.1
    }

    pub fn n_s(&self) -> usize {
        self.search_grid.0 * self.search_grid.1
    }

    pub fn len(&self) -> usize {
        self.n_t() + self.n_s()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self, region: Region) -> (usize, usize) {
        match region {
            Region::Template => self.template_grid,
            Region::Search => self.search_grid,
        }
    }

    /// Token row range of a region.
    pub fn rows(&self, region: Region) -> std::ops::Range<usize> {
        match region {
            Region::Template => 0..self.n_t(),
            Region::Search => self.n_t()..self.len(),
        }
    }
}

/// Template tokens followed by search tokens, each in row-major grid order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Var,
    pub layout: TokenLayout,
}

impl TokenBatch {
    pub fn new<T: Scalar>(tape: &Tape<T>, tokens: Var, layout: TokenLayout) -> Result<Self> {
        match tape.shape(tokens) {
            [n, _] if *n == layout.len() => Ok(Self { tokens, layout }),
            s => Err(Error::dim(
                "token_batch",
                format!("{s:?} for layout with {} tokens", layout.len()),
            )),
        }
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            layout: self.layout,
        }
    }
}

/// `[h·w × C]` region tokens → `[C × h × w]` feature map.
pub fn tokens_to_grid<T: Scalar>(tape: &mut Tape<T>, batch: &TokenBatch, region: Region) -> Result<Var> {
    let r = batch.layout.rows(region);
    let rows = tape.narrow(batch.tokens, r.start, r.end)?;
    region_tokens_to_grid(tape, rows, batch.layout.grid(region))
}

pub fn region_tokens_to_grid<T: Scalar>(tape: &mut Tape<T>, rows: Var, grid: (usize, usize)) -> Result<Var> {
    let c = tape.shape(rows)[1];
    let t = tape.transpose(rows)?;
    tape.reshape(t, &[c, grid.0, grid.1])
}

/// Inverse of [`region_tokens_to_grid`].
pub fn grid_to_tokens<T: Scalar>(tape: &mut Tape<T>, grid: Var) -> Result<Var> {
    let (c, h, w) = match tape.shape(grid) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim("grid_to_tokens", format!("{s:?}"))),
    };
    let flat = tape.reshape(grid, &[c, h * w])?;
    tape.transpose(flat)
}

/// Applies `f` to each region's feature map and re-joins the results as
/// tokens in the original order.
pub fn per_region<T: Scalar>(
    tape: &mut Tape<T>,
    layout: TokenLayout,
    inputs: &[Var],
    mut f: impl FnMut(&mut Tape<T>, Region, &[Var]) -> Result<Var>,
) -> Result<Var> {
    let mut joined = Vec::with_capacity(2);
    for region in [Region::Template, Region::Search] {
        let r = layout.rows(region);
        if r.is_empty() {
            continue;
        }
        let grids = inputs
            .iter()
            .map(|&v| {
                let rows = tape.narrow(v, r.start, r.end)?;
                region_tokens_to_grid(tape, rows, layout.grid(region))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(tape, region, &grids)?;
        joined.push(grid_to_tokens(tape, out)?);
    }
    tape.concat(&joined)
}

/// Search-region slice of a batch.
pub fn split_search<T: Scalar>(tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
    let r = batch.layout.rows(Region::Search);
    tape.narrow(batch.tokens, r.start, r.end)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerWeights {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl EncoderLayerWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.proj_w, self.proj_b, self.ln2_g,
            self.ln2_b, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneWeights {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub layers: Vec<EncoderLayerWeights>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

impl BackboneWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.patch_w, self.patch_b, self.pos_template, self.pos_search];
        for l in &self.layers {
            v.extend(l.ids());
        }
        v.extend([self.norm_g, self.norm_b]);
        v
    }
}

pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.trunc_normal(INIT_STD)))
}

/// Registers freshly initialized backbone weights under `prefix`.
pub fn init_backbone<T: Scalar>(
    cfg: &BackboneConfig,
    store: &mut ParamStore<T>,
    prefix: &str,
    seed: u64,
) -> Result<BackboneWeights> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let c = cfg.embed_dim;
    let hidden = c * cfg.mlp_ratio;
    let lay = cfg.layout();
    let p = |s: &str| format!("{prefix}.{s}");
    let patch_w = store.add(p("patch.w"), trunc_normal(&[c, 3, cfg.patch, cfg.patch], &mut rng));
    let patch_b = store.add(p("patch.b"), Tensor::zeros(&[c]));
    let pos_template = store.add(p("pos.template"), trunc_normal(&[lay.n_t(), c], &mut rng));
    let pos_search = store.add(p("pos.search"), trunc_normal(&[lay.n_s(), c], &mut rng));
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let q = |s: &str| format!("{prefix}.layer{}.{s}", l + 1);
        layers.push(EncoderLayerWeights {
            ln1_g: store.add(q("ln1.g"), Tensor::ones(&[c])),
            ln1_b: store.add(q("ln1.b"), Tensor::zeros(&[c])),
            qkv_w: store.add(q("attn.qkv.w"), trunc_normal(&[c, 3 * c], &mut rng)),
            qkv_b: store.add(q("attn.qkv.b"), Tensor::zeros(&[3 * c])),
            proj_w: store.add(q("attn.proj.w"), trunc_normal(&[c, c], &mut rng)),
            proj_b: store.add(q("attn.proj.b"), Tensor::zeros(&[c])),
            ln2_g: store.add(q("ln2.g"), Tensor::ones(&[c])),
            ln2_b: store.add(q("ln2.b"), Tensor::zeros(&[c])),
            fc1_w: store.add(q("mlp.fc1.w"), trunc_normal(&[c, hidden], &mut rng)),
            fc1_b: store.add(q("mlp.fc1.b"), Tensor::zeros(&[hidden])),
            fc2_w: store.add(q("mlp.fc2.w"), trunc_normal(&[hidden, c], &mut rng)),
            fc2_b: store.add(q("mlp.fc2.b"), Tensor::zeros(&[c])),
        });
    }
    let norm_g = store.add(p("norm.g"), Tensor::ones(&[c]));
    let norm_b = store.add(p("norm.b"), Tensor::zeros(&[c]));
    Ok(BackboneWeights {
        patch_w,
        patch_b,
        pos_template,
        pos_search,
        layers,
        norm_g,
        norm_b,
    })
}

/// Closed-form parameter count of [`init_backbone`].
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let c = cfg.embed_dim;
    let h = c * cfg.mlp_ratio;
    let per_layer = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * h + h) + (h * c + c);
    let lay = cfg.layout();
    3 * cfg.patch * cfg.patch * c + c + lay.len() * c + cfg.layers * per_layer + 2 * c
}

/// Strided P×P projection of a `3×H×W` image plus the region's positional table.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &BackboneWeights,
    cfg: &BackboneConfig,
    image: Var,
    region: Region,
) -> Result<Var> {
    let (ch, h, wd) = match tape.shape(image) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Input(format!("image must be 3×H×W, got {s:?}"))),
    };
    let expect = match region {
        Region::Template => cfg.template_size,
        Region::Search => cfg.search_size,
    };
    if ch != 3 || h % cfg.patch != 0 || wd % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "image {ch}×{h}×{wd} incompatible with patch {}",
            cfg.patch
        )));
    }
    if h != expect || wd != expect {
        return Err(Error::Input(format!(
            "{region:?} image is {h}×{wd}, expected {expect}×{expect}"
        )));
    }
    let pw = tape.param(store, w.patch_w);
    let pb = tape.param(store, w.patch_b);
    let feat = tape.conv2d(image, pw, Some(pb), cfg.patch, 0, 1)?;
    let tokens = grid_to_tokens(tape, feat)?;
    let pos = tape.param(
        store,
        match region {
            Region::Template => w.pos_template,
            Region::Search => w.pos_search,
        },
    );
    tape.add(tokens, pos)
}

/// Embeds a template/search image pair into one token batch.
pub fn embed_pair<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &BackboneWeights,
    cfg: &BackboneConfig,
    template: Var,
    search: Var,
) -> Result<TokenBatch> {
    let t = patch_embed(tape, store, w, cfg, template, Region::Template)?;
    let s = patch_embed(tape, store, w, cfg, search, Region::Search)?;
    let tokens = tape.concat(&[t, s])?;
    TokenBatch::new(tape, tokens, cfg.layout())
}

/// Multi-head self-attention of already-normalized tokens. Attention
/// probabilities per head are appended to `capture` when given.
pub fn msa<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lw: &EncoderLayerWeights,
    heads: usize,
    x: Var,
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let c = tape.shape(x)[1];
    let d = c / heads;
    let (qw, qb) = (tape.param(store, lw.qkv_w), tape.param(store, lw.qkv_b));
    let qkv = tape.linear(x, qw, qb)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * d, (h + 1) * d)?;
        let k = tape.slice_cols(qkv, c + h * d, c + (h + 1) * d)?;
        let v = tape.slice_cols(qkv, 2 * c + h * d, 2 * c + (h + 1) * d)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(a);
        }
        outs.push(tape.matmul(a, v)?);
    }
    let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let (pw, pb) = (tape.param(store, lw.proj_w), tape.param(store, lw.proj_b));
    tape.linear(o, pw, pb)
}

/// `h + MSA(LN(h))`
pub fn attn_residual<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lw: &EncoderLayerWeights,
    heads: usize,
    h: Var,
    capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (g, b) = (tape.param(store, lw.ln1_g), tape.param(store, lw.ln1_b));
    let n = tape.layer_norm(h, g, b, LN_EPS)?;
    let a = msa(tape, store, lw, heads, n, capture)?;
    tape.add(h, a)
}

/// `h + MLP(LN(h))`
pub fn mlp_residual<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lw: &EncoderLayerWeights,
    h: Var,
) -> Result<Var> {
    let (g, b) = (tape.param(store, lw.ln2_g), tape.param(store, lw.ln2_b));
    let n = tape.layer_norm(h, g, b, LN_EPS)?;
    let (w1, b1) = (tape.param(store, lw.fc1_w), tape.param(store, lw.fc1_b));
    let (w2, b2) = (tape.param(store, lw.fc2_w), tape.param(store, lw.fc2_b));
    let z = tape.linear(n, w1, b1)?;
    let z = tape.gelu(z);
    let z = tape.linear(z, w2, b2)?;
    tape.add(h, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookSite {
    Attention,
    Mlp,
}

/// One encoder layer with additive adapter hooks:
/// `H′ = H + MSA(LN(H)) + hook(Attention, H)`,
/// `H_out = H′ + MLP(LN(H′)) + hook(Mlp, H′)`.
/// A hook returning `None` contributes nothing.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lw: &EncoderLayerWeights,
    heads: usize,
    batch: &TokenBatch,
    hook: &mut dyn FnMut(&mut Tape<T>, HookSite, &TokenBatch) -> Result<Option<Var>>,
) -> Result<TokenBatch> {
    let h = batch.tokens;
    if tape.shape(h)[1] != store.value(lw.ln1_g).numel() {
        return Err(Error::dim(
            "encoder_layer",
            format!("token dim {} vs embed dim {}", tape.shape(h)[1], store.value(lw.ln1_g).numel()),
        ));
    }
    let mut mid = attn_residual(tape, store, lw, heads, h, None)?;
    if let Some(d) = hook(tape, HookSite::Attention, batch)? {
        mid = tape.add(mid, d)?;
    }
    let mid_batch = batch.with_tokens(mid);
    let mut out = mlp_residual(tape, store, lw, mid)?;
    if let Some(d) = hook(tape, HookSite::Mlp, &mid_batch)? {
        out = tape.add(out, d)?;
    }
    Ok(batch.with_tokens(out))
}

/// Final LayerNorm applied after the last encoder layer.
pub fn final_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &BackboneWeights,
    h: Var,
) -> Result<Var> {
    let (g, b) = (tape.param(store, w.norm_g), tape.param(store, w.norm_b));
    tape.layer_norm(h, g, b, LN_EPS)
}

/// Single-stream encoder: embed, N plain layers, final norm.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &BackboneWeights,
    cfg: &BackboneConfig,
    template: Var,
    search: Var,
) -> Result<TokenBatch> {
    let mut batch = embed_pair(tape, store, w, cfg, template, search)?;
    for lw in &w.layers {
        let mid = attn_residual(tape, store, lw, cfg.heads, batch.tokens, None)?;
        let out = mlp_residual(tape, store, lw, mid)?;
        batch = batch.with_tokens(out);
    }
    let normed = final_norm(tape, store, w, batch.tokens)?;
    Ok(batch.with_tokens(normed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.layout().template_grid, (4, 4));
        assert_eq!(cfg.layout().search_grid, (8, 8));
    }

    #[test]
    fn odd_grid_rejected() {
        let cfg = BackboneConfig {
            template_size: 24,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = BackboneConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn row_major_token_to_grid_position() {
        let layout = TokenLayout {
            template_grid: (0, 0),
            search_grid: (2, 2),
        };
        let mut tape = Tape::<f64>::new();
        let toks = tape.constant(Tensor::from_fn(&[4, 2], |i| (i / 2) as f64 + 1.0));
        let batch = TokenBatch::new(&tape, toks, layout).unwrap();
        let grid = tokens_to_grid(&mut tape, &batch, Region::Search).unwrap();
        let g = tape.value(grid);
        assert_eq!(g.shape(), &[2, 2, 2]);
        assert_eq!(&g.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.at(&[0, 1, 1]), 4.0);
    }
}
