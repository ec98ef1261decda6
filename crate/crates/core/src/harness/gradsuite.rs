//! Finite-difference checks of every differentiable primitive, the losses and
//! the encoder-to-decoder pipeline at seeded random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{encode_graph, EncoderConfig};
use crate::error::Result;
use crate::losses::{ciou_loss_graph, stage1_loss_graph, uncertainty_loss_graph, LossWeights};
use crate::numerics::gradcheck::{compare_gradient, evaluate, gradient, DEFAULT_EPS};
use crate::numerics::ops::MASK_NEG;
use crate::numerics::{grad_check_param, grad_check_recorded, Array, Broadcast, Graph, ParamStore, Tape, Var};
use crate::pmn::prototype_loss_graph;
use crate::uld::{localize_graph, BoundingBox, UldConfig};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Scalar = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// How random inputs are drawn.
#[derive(Clone, Copy)]
enum Domain {
    /// Magnitude in `[0.2, 1.5]` with random sign; keeps away from kinks at 0.
    Signed,
    Positive,
}

struct Primitive {
    name: &'static str,
    len: usize,
    domain: Domain,
    f: Scalar,
}

/// Fixed, input-independent weights to reduce an output to a scalar.
fn weights(n: usize) -> Array {
    Array::from_fn(&[n], |i| (1.3 * i as f64 + 0.7).sin() + 0.25)
}

fn reduce(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let flat = t.reshape(y, &[n])?;
    let w = t.leaf(weights(n));
    let p = t.mul(flat, w)?;
    t.sum(p)
}

/// First `n` entries of `x` reshaped to `shape`, starting at `at`.
fn part(t: &mut Tape, x: Var, at: usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let idx: Vec<usize> = (at..at + n).collect();
    let g = t.gather(x, &idx)?;
    t.reshape(g, shape)
}

fn unary(name: &'static str, domain: Domain, op: fn(&mut Tape, Var) -> Result<Var>) -> Primitive {
    Primitive {
        name,
        len: 6,
        domain,
        f: Box::new(move |t, x| {
            let y = op(t, x)?;
            reduce(t, y)
        }),
    }
}

fn binary(name: &'static str, domain: Domain, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Primitive {
    Primitive {
        name,
        len: 12,
        domain,
        f: Box::new(move |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[2, 3])?;
            let y = op(t, a, b)?;
            reduce(t, y)
        }),
    }
}

fn shaped(name: &'static str, len: usize, domain: Domain, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Primitive {
    Primitive {
        name,
        len,
        domain,
        f: Box::new(move |t, x| {
            let y = f(t, x)?;
            reduce(t, y)
        }),
    }
}

fn primitives() -> Vec<Primitive> {
    use Domain::*;
    vec![
        binary("add", Signed, |t, a, b| t.add(a, b)),
        binary("sub", Signed, |t, a, b| t.sub(a, b)),
        binary("mul", Signed, |t, a, b| t.mul(a, b)),
        binary("div", Positive, |t, a, b| t.div(a, b)),
        binary("maximum", Signed, |t, a, b| t.maximum(a, b)),
        binary("minimum", Signed, |t, a, b| t.minimum(a, b)),
        shaped("add_broadcast_trailing", 9, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[3])?;
            t.add_broadcast(a, b, Broadcast::Trailing)
        }),
        shaped("add_broadcast_leading", 8, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[2])?;
            t.add_broadcast(a, b, Broadcast::Leading)
        }),
        shaped("mul_broadcast_trailing", 9, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[3])?;
            t.mul_broadcast(a, b, Broadcast::Trailing)
        }),
        shaped("mul_broadcast_leading", 8, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[2])?;
            t.mul_broadcast(a, b, Broadcast::Leading)
        }),
        unary("scale", Signed, |t, x| t.scale(x, -1.7)),
        unary("offset", Signed, |t, x| t.offset(x, 0.3)),
        unary("relu", Signed, |t, x| t.relu(x)),
        unary("sigmoid", Signed, |t, x| t.sigmoid(x)),
        unary("softplus", Signed, |t, x| t.softplus(x)),
        unary("exp", Signed, |t, x| t.exp(x)),
        unary("log", Positive, |t, x| t.log(x)),
        unary("abs", Signed, |t, x| t.abs(x)),
        unary("square", Signed, |t, x| t.square(x)),
        unary("sqrt", Positive, |t, x| t.sqrt(x)),
        unary("atan", Signed, |t, x| t.atan(x)),
        unary("neg", Signed, |t, x| t.neg(x)),
        unary("clamp", Signed, |t, x| t.clamp(x, -0.9, 0.8)),
        shaped("matmul", 14, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[3, 2])?;
            let y = t.matmul(a, b)?;
            t.square(y)
        }),
        shaped("transpose", 6, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let y = t.transpose(a)?;
            t.square(y)
        }),
        shaped("reshape", 6, Signed, |t, x| {
            let y = t.reshape(x, &[3, 2])?;
            t.square(y)
        }),
        shaped("softmax", 6, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            t.softmax(a, 1)
        }),
        shaped("masked_softmax", 6, Signed, |t, x| {
            let a = part(t, x, 0, &[3, 2])?;
            let mask = Array::new(vec![3, 2], vec![0.0, 0.0, MASK_NEG, 0.0, 0.0, 0.0])?;
            t.masked_softmax(a, 0, Some(mask))
        }),
        shaped("conv2d", 2 * 4 * 4 + 3 * 2 * 9, Signed, |t, x| {
            let img = part(t, x, 0, &[2, 4, 4])?;
            let k = part(t, x, 32, &[3, 2, 3, 3])?;
            t.conv2d(img, k, 1, 1)
        }),
        shaped("conv2d_strided", 2 * 5 * 5 + 2 * 2 * 9, Signed, |t, x| {
            let img = part(t, x, 0, &[2, 5, 5])?;
            let k = part(t, x, 50, &[2, 2, 3, 3])?;
            t.conv2d(img, k, 2, 1)
        }),
        shaped("global_avg_pool", 18, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 3, 3])?;
            let y = t.global_avg_pool(a)?;
            t.square(y)
        }),
        shaped("upsample", 12, Signed, |t, x| {
            let a = part(t, x, 0, &[3, 2, 2])?;
            t.upsample(a, 2)
        }),
        shaped("layer_norm", 8, Signed, |t, x| {
            let a = part(t, x, 0, &[2, 4])?;
            t.layer_norm(a, 1e-5)
        }),
        shaped("sum", 6, Signed, |t, x| {
            let s = t.sum(x)?;
            t.square(s)
        }),
        shaped("mean", 6, Signed, |t, x| {
            let s = t.mean(x)?;
            t.square(s)
        }),
        shaped("concat", 10, Signed, |t, x| {
            let a = part(t, x, 0, &[1, 4])?;
            let b = part(t, x, 4, &[3, 2])?;
            let b = t.reshape(b, &[6])?;
            let a = t.reshape(a, &[4])?;
            let y = t.concat(&[a, b])?;
            t.square(y)
        }),
        shaped("slice", 6, Signed, |t, x| {
            let a = part(t, x, 0, &[3, 2])?;
            let y = t.slice(a, 1, 3)?;
            t.square(y)
        }),
        shaped("gather", 6, Signed, |t, x| {
            let y = t.gather(x, &[4, 0, 4, 2])?;
            t.square(y)
        }),
    ]
}

fn draw(len: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Array {
    Array::from_fn(&[len], |_| match domain {
        Domain::Signed => {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }
        Domain::Positive => rng.gen_range(0.2..2.0),
    })
}

fn check_tape(f: &Scalar, point: &Array) -> Result<f64> {
    let r = compare_gradient(|p| evaluate(f, p), |p| gradient(f, p), point, DEFAULT_EPS, None)?;
    Ok(r.max_rel_error)
}

/// Records `f` once at `point` and checks its reverse sweep against replays;
/// coefficients the losses hold constant stay at their recorded values.
fn check_recorded(f: &Scalar, point: &Array) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    Ok(grad_check_recorded(&tape, x, y, DEFAULT_EPS, None)?.max_rel_error)
}

/// Random box in normalized coordinates with sides in `[0.15, 0.5]`.
pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(0.15..0.5);
    let h = rng.gen_range(0.15..0.5);
    let x = rng.gen_range(0.05..0.95 - w);
    let y = rng.gen_range(0.05..0.95 - h);
    BoundingBox::from_array([x, y, x + w, y + h])
}

/// The small pipeline configuration used for end-to-end checks.
pub fn pipeline_config() -> (EncoderConfig, UldConfig) {
    (
        EncoderConfig {
            patch: 4,
            width: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            template_size: 8,
            search_size: 16,
        },
        UldConfig {
            upsample: 2,
            head_channels: 4,
            sigma_floor: 1e-3,
        },
    )
}

/// Runs all checks with `points` random points each.
pub fn gradient_suite(seed: u64, points: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in primitives() {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let x = draw(p.len, p.domain, &mut rng);
            worst = worst.max(check_tape(&p.f, &x)?);
        }
        out.push(CheckResult {
            name: p.name.to_string(),
            points,
            max_rel_error: worst,
            tolerance: PRIMITIVE_TOL,
        });
    }
    out.extend(composite_checks(&mut rng, points)?);
    Ok(out)
}

fn composite_checks(rng: &mut ChaCha8Rng, points: usize) -> Result<Vec<CheckResult>> {
    let mut worst = [0.0f64; 5];
    let w = LossWeights::default();
    for _ in 0..points {
        // Predicted box near the target keeps CIoU away from its clamps.
        let gt = random_box(rng);
        let mu = gt.to_array().map(|v| v + rng.gen_range(-0.04..0.04));
        let mut x = mu.to_vec();
        x.extend((0..4).map(|_| rng.gen_range(0.05..0.5)));
        let x = Array::vector(&x);

        let gt_unc = gt.to_array();
        let unc: Scalar = Box::new(move |t, x| {
            let m = t.slice(x, 0, 4)?;
            let s = t.slice(x, 4, 8)?;
            let g = t.leaf(Array::vector(&gt_unc));
            uncertainty_loss_graph(t, m, s, g)
        });
        worst[0] = worst[0].max(check_recorded(&unc, &x)?);

        let b = Array::vector(&mu);
        let ciou: Scalar = Box::new(move |t, x| ciou_loss_graph(t, x, &gt));
        worst[1] = worst[1].max(check_recorded(&ciou, &b)?);

        let wc = w;
        let stage1: Scalar = Box::new(move |t, x| {
            let m = t.slice(x, 0, 4)?;
            let s = t.slice(x, 4, 8)?;
            Ok(stage1_loss_graph(t, m, s, &gt, &wc)?.total)
        });
        worst[2] = worst[2].max(check_recorded(&stage1, &x)?);

        let mut store = ParamStore::new();
        store.insert("p", Array::from_fn(&[4], |_| rng.gen_range(0.05..0.95)))?;
        let y: Vec<f64> = (0..4).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let r = grad_check_param(&store, "p", DEFAULT_EPS, None, |g| {
            let p = g.param("p")?;
            prototype_loss_graph(g, p, &y)
        })?;
        worst[3] = worst[3].max(r.max_rel_error);
    }
    worst[4] = pipeline_check(rng, points)?;
    let names = ["uncertainty_loss", "ciou_loss", "stage1_loss", "prototype_loss", "encoder_uld_pipeline"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckResult {
            name: n.to_string(),
            points,
            max_rel_error: e,
            tolerance: COMPOSITE_TOL,
        })
        .collect())
}

/// Stage-1 objective of the full encoder and decoder, checked against a few
/// coordinates of a random parameter per point.
fn pipeline_check(rng: &mut ChaCha8Rng, points: usize) -> Result<f64> {
    let (enc, uld) = pipeline_config();
    let mut specs = enc.param_specs();
    specs.extend(uld.param_specs(enc.width));
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let params = ParamStore::initialize(&specs, rng)?;
        let template = Array::uniform(&[3, 8, 8], 0.0, 1.0, rng);
        let search = Array::uniform(&[3, 16, 16], 0.0, 1.0, rng);
        let gt = random_box(rng);
        let mut g = Graph::new(&params);
        let e = encode_graph(&mut g, &template, &search, &enc)?;
        let l = localize_graph(&mut g, e.search, &uld)?;
        let loss = stage1_loss_graph(&mut g, l.mu, l.sigma_at_corners, &gt, &w)?.total;
        let spec = &specs[rng.gen_range(0..specs.len())];
        let input = g.param(&spec.name)?;
        let n: usize = spec.shape.iter().product();
        let coords: Vec<usize> = (0..3).map(|_| rng.gen_range(0..n)).collect();
        let r = grad_check_recorded(g.tape(), input, loss, DEFAULT_EPS, Some(&coords))?;
        worst = worst.max(r.max_rel_error);

    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        let results = gradient_suite(3, 2).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
        assert!(results.len() > 40);
    }
}
