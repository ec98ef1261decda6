//! Patch embedding and the mixed template/search attention backbone.
//!
//! Template and search tokens are stacked into one sequence, so every query
//! attends over the concatenated keys and values of both streams. Each layer is
//! a pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.

use crate::error::{Error, Result};
use crate::numerics::{Array, Broadcast, Graph, Init, ParamSpec, ParamStore, Var};

const LN_EPS: f64 = 1e-5;
/// Half-range of the positional embedding initialization.
const POS_INIT: f64 = 0.02;

/// Maps `[0, 1]` intensities to roughly zero mean and unit spread before
/// the patch projection.
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 0.5) * 4.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Patch side `S`.
    pub patch: usize,
    /// Token width `d`.
    pub width: usize,
    /// Layer count `N`.
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `width`.
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 16,
            width: 64,
            layers: 4,
            heads: 2,
            mlp_ratio: 2,
            template_size: 32,
            search_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        for (what, side) in [("template", self.template_size), ("search", self.search_size)] {
            if side == 0 || side % self.patch != 0 {
                return Err(Error::Config(format!(
                    "{what} side {side} is not a multiple of patch size {}",
                    self.patch
                )));
            }
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn template_grid(&self) -> (usize, usize) {
        let n = self.template_size / self.patch;
        (n, n)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        let n = self.search_size / self.patch;
        (n, n)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, dh, hid) = (self.width, self.head_width(), self.width * self.mlp_ratio);
        let patch_len = 3 * self.patch * self.patch;
        let (tr, tc) = self.template_grid();
        let (sr, sc) = self.search_grid();
        let mut specs = vec![
            ParamSpec::new("enc.embed.w", &[patch_len, d], Init::Glorot),
            ParamSpec::new("enc.embed.b", &[d], Init::Zeros),
            ParamSpec::new("enc.pos_t", &[tr * tc, d], Init::Uniform(POS_INIT)),
            ParamSpec::new("enc.pos_s", &[sr * sc, d], Init::Uniform(POS_INIT)),
        ];
        for l in 0..self.layers {
            let p = format!("enc.l{l}");
            specs.push(ParamSpec::new(format!("{p}.ln1.g"), &[d], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.ln1.b"), &[d], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.ln2.g"), &[d], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.ln2.b"), &[d], Init::Zeros));
            for h in 0..self.heads {
                for m in ["wq", "wk", "wv"] {
                    specs.push(ParamSpec::new(format!("{p}.attn.h{h}.{m}"), &[d, dh], Init::Glorot));
                }
                specs.push(ParamSpec::new(format!("{p}.attn.h{h}.wo"), &[dh, d], Init::Glorot));
            }
            specs.push(ParamSpec::new(format!("{p}.attn.bo"), &[d], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.mlp.w1"), &[d, hid], Init::Glorot));
            specs.push(ParamSpec::new(format!("{p}.mlp.b1"), &[hid], Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.mlp.w2"), &[hid, d], Init::Glorot));
            specs.push(ParamSpec::new(format!("{p}.mlp.b2"), &[d], Init::Zeros));
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Template,
    Search,
}

/// Tokens of one stream laid out on their patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    /// `N_tok × d`, row-major over the grid.
    pub tokens: Array,
    pub origin: Origin,
    pub grid: (usize, usize),
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a `3×H×W` image into flattened `S×S×3` patches, one row per patch.
///
/// Each row is laid out channel-major: `c·S² + dy·S + dx`.
pub fn patchify(image: &Array, patch: usize) -> Result<(Array, (usize, usize))> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c}")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let plen = 3 * patch * patch;
    let d = image.data();
    let mut out = Vec::with_capacity(rows * cols * plen);
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..3 {
                for dy in 0..patch {
                    let y = r * patch + dy;
                    let start = (ch * h + y) * w + q * patch;
                    out.extend_from_slice(&d[start..start + patch]);
                }
            }
        }
    }
    Ok((Array::new(vec![rows * cols, plen], out)?, (rows, cols)))
}

/// Records the patch embedding of `image` and returns the `N×d` token node.
pub fn embed(g: &mut Graph, image: &Array, cfg: &EncoderConfig, origin: Origin) -> Result<Var> {
    let (patches, grid) = patchify(image, cfg.patch)?;
    let expected = match origin {
        Origin::Template => cfg.template_grid(),
        Origin::Search => cfg.search_grid(),
    };
    if grid != expected {
        return Err(Error::Config(format!(
            "{origin:?} image yields a {grid:?} patch grid, configuration expects {expected:?}"
        )));
    }
    let x = g.leaf(patches.map(normalize_pixel));
    let w = g.param("enc.embed.w")?;
    let b = g.param("enc.embed.b")?;
    let pos = g.param(match origin {
        Origin::Template => "enc.pos_t",
        Origin::Search => "enc.pos_s",
    })?;
    let t = g.matmul(x, w)?;
    let t = g.add_broadcast(t, b, Broadcast::Trailing)?;
    g.add(t, pos)
}

pub fn patchify_embed(
    image: &Array,
    cfg: &EncoderConfig,
    params: &ParamStore,
    origin: Origin,
) -> Result<TokenSet> {
    let mut g = Graph::new(params);
    let v = embed(&mut g, image, cfg, origin)?;
    let grid = match origin {
        Origin::Template => cfg.template_grid(),
        Origin::Search => cfg.search_grid(),
    };
    Ok(TokenSet {
        tokens: g.value(v).clone(),
        origin,
        grid,
    })
}

fn affine_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let gamma = g.param(&format!("{prefix}.g"))?;
    let beta = g.param(&format!("{prefix}.b"))?;
    let n = g.mul_broadcast(n, gamma, Broadcast::Trailing)?;
    g.add_broadcast(n, beta, Broadcast::Trailing)
}

/// Output of one recorded layer.
pub struct LayerVars {
    pub template: Var,
    pub search: Var,
    /// Attention weights per head, `(N_t+N_s) × (N_t+N_s)`; rows are queries.
    pub attention: Vec<Var>,
}

/// Records mixed attention layer `layer` on `N_t×d` and `N_s×d` token nodes.
pub fn attention_layer(
    g: &mut Graph,
    template: Var,
    search: Var,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<LayerVars> {
    let (nt, dt) = g.value(template).dims2()?;
    let (ns, ds) = g.value(search).dims2()?;
    if dt != ds || dt != cfg.width {
        return Err(Error::Dimension {
            op: "mixed_attention_layer",
            lhs: vec![nt, dt],
            rhs: vec![ns, ds],
        });
    }
    let p = format!("enc.l{layer}");
    let x = g.concat(&[template, search])?;
    let xn = affine_norm(g, x, &format!("{p}.ln1"))?;
    let scale = 1.0 / (cfg.head_width() as f64).sqrt();

    let mut attention = Vec::with_capacity(cfg.heads);
    let mut mixed: Option<Var> = None;
    for h in 0..cfg.heads {
        let wq = g.param(&format!("{p}.attn.h{h}.wq"))?;
        let wk = g.param(&format!("{p}.attn.h{h}.wk"))?;
        let wv = g.param(&format!("{p}.attn.h{h}.wv"))?;
        let wo = g.param(&format!("{p}.attn.h{h}.wo"))?;
        let q = g.matmul(xn, wq)?;
        let k = g.matmul(xn, wk)?;
        let v = g.matmul(xn, wv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax(logits, 1)?;
        attention.push(a);
        let heads_out = g.matmul(a, v)?;
        // Concatenating heads then projecting equals summing per-head projections.
        let proj = g.matmul(heads_out, wo)?;
        mixed = Some(match mixed {
            None => proj,
            Some(acc) => g.add(acc, proj)?,
        });
    }
    let mixed = mixed.expect("heads > 0");
    let bo = g.param(&format!("{p}.attn.bo"))?;
    let mixed = g.add_broadcast(mixed, bo, Broadcast::Trailing)?;
    let x = g.add(x, mixed)?;

    let xn = affine_norm(g, x, &format!("{p}.ln2"))?;
    let w1 = g.param(&format!("{p}.mlp.w1"))?;
    let b1 = g.param(&format!("{p}.mlp.b1"))?;
    let w2 = g.param(&format!("{p}.mlp.w2"))?;
    let b2 = g.param(&format!("{p}.mlp.b2"))?;
    let hdn = g.matmul(xn, w1)?;
    let hdn = g.add_broadcast(hdn, b1, Broadcast::Trailing)?;
    let hdn = g.relu(hdn)?;
    let out = g.matmul(hdn, w2)?;
    let out = g.add_broadcast(out, b2, Broadcast::Trailing)?;
    let x = g.add(x, out)?;

    Ok(LayerVars {
        template: g.slice(x, 0, nt)?,
        search: g.slice(x, nt, nt + ns)?,
        attention,
    })
}

/// Applies layer `layer` to concrete token sets.
pub fn mixed_attention_layer(
    t: &TokenSet,
    s: &TokenSet,
    layer: usize,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<(TokenSet, TokenSet, Vec<Array>)> {
    let mut g = Graph::new(params);
    let tv = g.leaf(t.tokens.clone());
    let sv = g.leaf(s.tokens.clone());
    let out = attention_layer(&mut g, tv, sv, layer, cfg)?;
    let weights = out.attention.iter().map(|&a| g.value(a).clone()).collect();
    Ok((
        TokenSet {
            tokens: g.value(out.template).clone(),
            origin: t.origin,
            grid: t.grid,
        },
        TokenSet {
            tokens: g.value(out.search).clone(),
            origin: s.origin,
            grid: s.grid,
        },
        weights,
    ))
}

/// Reshapes `N×d` tokens on a `rows×cols` grid into a `d×rows×cols` map.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let (_, d) = g.value(tokens).dims2()?;
    let t = g.transpose(tokens)?;
    g.reshape(t, &[d, grid.0, grid.1])
}

/// Feature maps `(F_t, F_s)` recorded on `g`.
pub struct EncodedVars {
    pub template: Var,
    pub search: Var,
}

pub fn encode_graph(
    g: &mut Graph,
    template: &Array,
    search: &Array,
    cfg: &EncoderConfig,
) -> Result<EncodedVars> {
    cfg.validate()?;
    let mut t = embed(g, template, cfg, Origin::Template)?;
    let mut s = embed(g, search, cfg, Origin::Search)?;
    for l in 0..cfg.layers {
        let out = attention_layer(g, t, s, l, cfg)?;
        t = out.template;
        s = out.search;
    }
    Ok(EncodedVars {
        template: tokens_to_map(g, t, cfg.template_grid())?,
        search: tokens_to_map(g, s, cfg.search_grid())?,
    })
}

/// Encodes a template/search pair into channel-first maps `(F_t, F_s)`.
pub fn encode(
    template: &Array,
    search: &Array,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<(Array, Array)> {
    let mut g = Graph::new(params);
    let out = encode_graph(&mut g, template, search, cfg)?;
    Ok((g.value(out.template).clone(), g.value(out.search).clone()))
}
