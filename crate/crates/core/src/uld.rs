//! Uncertainty-aware localization decoder.
//!
//! The search feature map is upsampled, passed through a shared 3×3
//! conv-affine-ReLU neck and split into two branches: a corner probability
//! branch (`2×H×W`, softmax over space) and an uncertainty branch (`4×H×W`,
//! `σ = softplus(raw) + floor`). Corners are read out by soft-argmax and each
//! coordinate's σ is a bilinear sample of its channel at the predicted corner.
//!
//! Inside the graph every coordinate and σ is expressed as a fraction of the
//! search side; [`CornerPrediction`] converts to search pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Array, Broadcast, Graph, Init, ParamSpec, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl BoundingBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        let b = BoundingBox { x_tl, y_tl, x_br, y_br };
        if ![x_tl, y_tl, x_br, y_br].iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("non-finite box {b:?}")));
        }
        if x_tl > x_br || y_tl > y_br {
            return Err(Error::Input(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x_tl: cx - w / 2.0,
            y_tl: cy - h / 2.0,
            x_br: cx + w / 2.0,
            y_br: cy + h / 2.0,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoundingBox {
            x_tl: v[0],
            y_tl: v[1],
            x_br: v[2],
            y_br: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn width(&self) -> f64 {
        (self.x_br - self.x_tl).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_br - self.y_tl).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_tl + self.x_br) / 2.0, (self.y_tl + self.y_br) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x_tl: self.x_tl + dx,
            y_tl: self.y_tl + dy,
            x_br: self.x_br + dx,
            y_br: self.y_br + dy,
        }
    }

    /// Multiplies every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        BoundingBox::from_array(self.to_array().map(|v| v * s))
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_br.min(other.x_br) - self.x_tl.max(other.x_tl)).max(0.0);
        let h = (self.y_br.min(other.y_br) - self.y_tl.max(other.y_tl)).max(0.0);
        w * h
    }

    /// Intersection over union; zero when both boxes are empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips to `[0, w] × [0, h]`.
    pub fn clamp_to(&self, w: f64, h: f64) -> Self {
        BoundingBox {
            x_tl: self.x_tl.clamp(0.0, w),
            y_tl: self.y_tl.clamp(0.0, h),
            x_br: self.x_br.clamp(0.0, w),
            y_br: self.y_br.clamp(0.0, h),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UldConfig {
    pub upsample: usize,
    pub head_channels: usize,
    /// Lower bound added to the softplus of the raw uncertainty.
    pub sigma_floor: f64,
}

impl Default for UldConfig {
    fn default() -> Self {
        UldConfig {
            upsample: 2,
            head_channels: 32,
            sigma_floor: 1e-3,
        }
    }
}

impl UldConfig {
    pub fn param_specs(&self, in_channels: usize) -> Vec<ParamSpec> {
        let c = self.head_channels;
        vec![
            ParamSpec::new("uld.neck.w", &[c, in_channels, 3, 3], Init::Glorot),
            ParamSpec::new("uld.neck.scale", &[c], Init::Ones),
            ParamSpec::new("uld.neck.shift", &[c], Init::Zeros),
            ParamSpec::new("uld.prob.c1.w", &[c, c, 3, 3], Init::Glorot),
            ParamSpec::new("uld.prob.c1.scale", &[c], Init::Ones),
            ParamSpec::new("uld.prob.c1.shift", &[c], Init::Zeros),
            ParamSpec::new("uld.prob.out.w", &[2, c, 1, 1], Init::Glorot),
            ParamSpec::new("uld.prob.out.b", &[2], Init::Zeros),
            ParamSpec::new("uld.unc.c1.w", &[c, c, 3, 3], Init::Glorot),
            ParamSpec::new("uld.unc.c1.scale", &[c], Init::Ones),
            ParamSpec::new("uld.unc.c1.shift", &[c], Init::Zeros),
            ParamSpec::new("uld.unc.out.w", &[4, c, 1, 1], Init::Glorot),
            ParamSpec::new("uld.unc.out.b", &[4], Init::Zeros),
        ]
    }
}

/// Conv → per-channel affine → ReLU, with "same" padding.
pub(crate) fn conv_affine_relu(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let k = g.value(w).shape()[2];
    let y = g.conv2d(x, w, 1, k / 2)?;
    let s = g.param(&format!("{prefix}.scale"))?;
    let b = g.param(&format!("{prefix}.shift"))?;
    let y = g.mul_broadcast(y, s, Broadcast::Leading)?;
    let y = g.add_broadcast(y, b, Broadcast::Leading)?;
    g.relu(y)
}

/// 1×1 convolution with bias.
pub(crate) fn conv1x1(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, 1, 0)?;
    g.add_broadcast(y, b, Broadcast::Leading)
}

pub struct HeadVars {
    /// `2×H×W`, each channel a distribution over the grid.
    pub prob: Var,
    /// `4×H×W` σ in fractions of the search side.
    pub sigma: Var,
}

pub fn decode_heads_graph(g: &mut Graph, f_s: Var, cfg: &UldConfig) -> Result<HeadVars> {
    let up = g.upsample(f_s, cfg.upsample)?;
    let neck = conv_affine_relu(g, up, "uld.neck")?;
    let (_, h, w) = g.value(neck).dims3()?;

    let p = conv_affine_relu(g, neck, "uld.prob.c1")?;
    let logits = conv1x1(g, p, "uld.prob.out")?;
    let flat = g.reshape(logits, &[2, h * w])?;
    let prob = g.softmax(flat, 1)?;
    let prob = g.reshape(prob, &[2, h, w])?;

    let u = conv_affine_relu(g, neck, "uld.unc.c1")?;
    let raw = conv1x1(g, u, "uld.unc.out")?;
    let sp = g.softplus(raw)?;
    let sigma = g.offset(sp, cfg.sigma_floor)?;
    Ok(HeadVars { prob, sigma })
}

/// Runs both heads on a concrete feature map.
pub fn decode_heads(f_s: &Array, cfg: &UldConfig, params: &ParamStore) -> Result<(Array, Array)> {
    let mut g = Graph::new(params);
    let x = g.leaf(f_s.clone());
    let out = decode_heads_graph(&mut g, x, cfg)?;
    Ok((g.value(out.prob).clone(), g.value(out.sigma).clone()))
}

fn check_distribution(channel: &Array) -> Result<()> {
    if channel.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract("soft-argmax input has negative or non-finite mass".into()));
    }
    let total = channel.sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "soft-argmax input must sum to 1, sums to {total}"
        )));
    }
    Ok(())
}

/// Expected `(x, y)` grid position under an `H×W` distribution, in grid units
/// (cell `(row, col)` sits at `x = col`, `y = row`).
pub fn soft_argmax(channel: &Array) -> Result<(f64, f64)> {
    let (h, w) = channel.dims2()?;
    check_distribution(channel)?;
    let mut x = 0.0;
    let mut y = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = channel.data()[r * w + c];
            x += p * c as f64;
            y += p * r as f64;
        }
    }
    Ok((x, y))
}

/// Bilinear taps `(flat index, weight)` at continuous grid position `(x, y)`,
/// clamped into the grid. The flag reports whether clamping happened.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> ([(usize, f64); 4], bool) {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let clamped = cx != x || cy != y;
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    (
        [
            (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
            (y0 * w + x1, (1.0 - fy) * fx),
            (y1 * w + x0, fy * (1.0 - fx)),
            (y1 * w + x1, fy * fx),
        ],
        clamped,
    )
}

/// Samples channel `c` of a `4×H×W` map at its corner: channels 0,1 at the
/// top-left point, 2,3 at the bottom-right point (grid units).
pub fn read_sigma(unc_map: &Array, corners: [(f64, f64); 2]) -> Result<[f64; 4]> {
    let (c, h, w) = unc_map.dims3()?;
    if c != 4 {
        return Err(Error::Shape(format!("uncertainty map needs 4 channels, got {c}")));
    }
    let mut out = [0.0; 4];
    for (ch, slot) in out.iter_mut().enumerate() {
        let (x, y) = corners[ch / 2];
        let (taps, clamped) = bilinear_taps(x, y, h, w);
        if clamped {
            log::warn!("corner ({x:.3}, {y:.3}) outside the {h}x{w} uncertainty grid; clamped");
        }
        *slot = taps
            .iter()
            .map(|&(i, wt)| wt * unc_map.data()[ch * h * w + i])
            .sum();
    }
    Ok(out)
}

/// Normalized corners `[x_tl, y_tl, x_br, y_br]` recorded as soft-argmax of `prob`.
pub fn corners_graph(g: &mut Graph, prob: Var) -> Result<Var> {
    let (_, h, w) = g.value(prob).dims3()?;
    let gx = g.leaf(Array::from_fn(&[1, h, w], |i| ((i % w) as f64 + 0.5) / w as f64));
    let gy = g.leaf(Array::from_fn(&[1, h, w], |i| ((i / w) as f64 + 0.5) / h as f64));
    let mut coords = Vec::with_capacity(4);
    for ch in 0..2 {
        let p = g.slice(prob, ch, ch + 1)?;
        for grid in [gx, gy] {
            let m = g.mul(p, grid)?;
            coords.push(g.sum(m)?);
        }
    }
    g.concat(&coords)
}

/// σ for each coordinate, read from `sigma` at the (detached) corner location.
pub fn read_sigma_graph(g: &mut Graph, sigma: Var, mu: Var) -> Result<Var> {
    let (_, h, w) = g.value(sigma).dims3()?;
    let m = g.value(mu).data().to_vec();
    let mut idx = Vec::with_capacity(16);
    let mut wts = Vec::with_capacity(16);
    for ch in 0..4 {
        let (nx, ny) = if ch < 2 { (m[0], m[1]) } else { (m[2], m[3]) };
        let (x, y) = (nx * w as f64 - 0.5, ny * h as f64 - 0.5);
        let (taps, clamped) = bilinear_taps(x, y, h, w);
        if clamped {
            log::warn!("corner ({x:.3}, {y:.3}) outside the {h}x{w} uncertainty grid; clamped");
        }
        for (i, wt) in taps {
            idx.push(ch * h * w + i);
            wts.push(wt);
        }
    }
    let taps = g.gather(sigma, &idx)?;
    let wv = g.leaf(Array::vector(&wts));
    let weighted = g.mul(taps, wv)?;
    let grid = g.reshape(weighted, &[4, 4])?;
    let ones = g.leaf(Array::full(&[4, 1], 1.0));
    let s = g.matmul(grid, ones)?;
    g.reshape(s, &[4])
}

/// Normalized view `σ / (1 + σ)` in `(0, 1)`, fed to the confidence inversion.
pub fn normalized_uncertainty(sigma: &Array) -> Array {
    sigma.map(|s| s / (1.0 + s))
}

pub fn normalized_uncertainty_graph(g: &mut Graph, sigma: Var) -> Result<Var> {
    let one_plus = g.offset(sigma, 1.0)?;
    g.div(sigma, one_plus)
}

/// Localization output for one search image.
#[derive(Clone, Debug)]
pub struct CornerPrediction {
    /// Corners in search-image pixels.
    pub bbox: BoundingBox,
    /// σ per coordinate in search-image pixels, ordered `x_tl, y_tl, x_br, y_br`.
    pub sigma: [f64; 4],
    pub prob_map: Array,
    /// σ map in fractions of the search side.
    pub unc_map: Array,
    pub search_size: f64,
}

impl CornerPrediction {
    /// Builds a prediction from normalized graph outputs.
    pub fn from_normalized(mu: &[f64], sigma: &[f64], prob_map: Array, unc_map: Array, search_size: f64) -> Self {
        CornerPrediction {
            bbox: BoundingBox::from_array([mu[0], mu[1], mu[2], mu[3]]).scaled(search_size),
            sigma: [sigma[0], sigma[1], sigma[2], sigma[3]].map(|s| s * search_size),
            prob_map,
            unc_map,
            search_size,
        }
    }

    pub fn normalized_box(&self) -> BoundingBox {
        self.bbox.scaled(1.0 / self.search_size)
    }

    pub fn normalized_sigma(&self) -> [f64; 4] {
        self.sigma.map(|s| s / self.search_size)
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma.iter().sum::<f64>() / 4.0
    }
}

/// Recorded localization: corners, σ and the raw maps.
pub struct LocalizationVars {
    pub mu: Var,
    pub sigma_at_corners: Var,
    pub prob: Var,
    pub sigma_map: Var,
}

pub fn localize_graph(g: &mut Graph, f_s: Var, cfg: &UldConfig) -> Result<LocalizationVars> {
    let heads = decode_heads_graph(g, f_s, cfg)?;
    let mu = corners_graph(g, heads.prob)?;
    let sigma_at_corners = read_sigma_graph(g, heads.sigma, mu)?;
    Ok(LocalizationVars {
        mu,
        sigma_at_corners,
        prob: heads.prob,
        sigma_map: heads.sigma,
    })
}

/// Builds the prediction for concrete heads, mirroring [`localize_graph`].
pub fn predict_from_maps(prob_map: Array, unc_map: Array, search_size: f64) -> Result<CornerPrediction> {
    let (c, h, w) = prob_map.dims3()?;
    if c != 2 {
        return Err(Error::Shape(format!("probability map needs 2 channels, got {c}")));
    }
    let mut mu = [0.0; 4];
    for ch in 0..2 {
        let plane = ops::slice0(&prob_map, ch, ch + 1)?.reshape(&[h, w])?;
        let (x, y) = soft_argmax(&plane)?;
        mu[2 * ch] = (x + 0.5) / w as f64;
        mu[2 * ch + 1] = (y + 0.5) / h as f64;
    }
    let grid_pt = |nx: f64, ny: f64| (nx * w as f64 - 0.5, ny * h as f64 - 0.5);
    let sigma = read_sigma(&unc_map, [grid_pt(mu[0], mu[1]), grid_pt(mu[2], mu[3])])?;
    Ok(CornerPrediction::from_normalized(&mu, &sigma, prob_map, unc_map, search_size))
}
