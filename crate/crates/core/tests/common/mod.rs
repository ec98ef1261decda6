//! Naive reference implementations and scripted models shared by the
//! integration targets.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unctrack::numerics::{ops, Array};
use unctrack::pmn::{reweight_prototype, retrieve_group, Prototype, PrototypeBank, TargetMask};
use unctrack::runtime::{
    init, kalman_predict, kalman_step, kalman_update, step, Assessment, FrameReport, KalmanConfig, KalmanState,
    Localization, SearchContext, TrackerConfig, TrackerModel, TrackerState, Variant,
};
use unctrack::uld::{BoundingBox, CornerPrediction};

pub fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    Array::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn naive_matmul(a: &Array, b: &Array) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

/// Worst deviation from the triple loop; a shape mismatch counts as infinite.
pub fn matmul_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = rand_array(&[m, k], &mut rng);
        let b = rand_array(&[k, n], &mut rng);
        let got = ops::matmul(&a, &b).unwrap();
        if got.shape() != [m, n] {
            return f64::INFINITY;
        }
        worst = worst.max(max_diff(got.data(), &naive_matmul(&a, &b)));
    }
    worst
}

pub fn naive_conv(x: &Array, k: &Array, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (cin, h, w) = x.dims3().unwrap();
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.at(&[ci, iy as usize, ix as usize]) * k.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (vec![cout, oh, ow], out)
}

pub fn conv_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < instances {
        let ks = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=ks / 2);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(ks..ks + 5), rng.gen_range(ks..ks + 5));
        if (h + 2 * pad - ks) % stride != 0 || (w + 2 * pad - ks) % stride != 0 {
            continue;
        }
        let x = rand_array(&[cin, h, w], &mut rng);
        let k = rand_array(&[cout, cin, ks, ks], &mut rng);
        let got = ops::conv2d(&x, &k, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &k, stride, pad);
        if got.shape() != &shape[..] {
            return f64::INFINITY;
        }
        worst = worst.max(max_diff(got.data(), &want));
        checked += 1;
    }
    worst
}

pub fn pool_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = rand_array(&[c, h, w], &mut rng);
        let got = ops::global_avg_pool(&x).unwrap();
        if got.shape() != [c, 1, 1] {
            return f64::INFINITY;
        }
        for ch in 0..c {
            let mut s = 0.0;
            for r in 0..h {
                for q in 0..w {
                    s += x.at(&[ch, r, q]);
                }
            }
            worst = worst.max((got.data()[ch] - s / (h * w) as f64).abs());
        }
    }
    worst
}

/// Softmax over the open cells of `p·F`, then the weighted mean of `F`'s columns.
pub fn naive_reweight(p: &[f64], f: &Array, open: &[bool]) -> Vec<f64> {
    let (c, h, w) = f.dims3().unwrap();
    let scores: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| p[ch] * f.data()[ch * h * w + i]).sum())
        .collect();
    let top = (0..h * w)
        .filter(|&i| open[i])
        .map(|i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..h * w)
        .map(|i| if open[i] { (scores[i] - top).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    (0..c)
        .map(|ch| (0..h * w).map(|i| e[i] / z * f.data()[ch * h * w + i]).sum())
        .collect()
}

pub fn reweight_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let f = rand_array(&[c, h, w], &mut rng);
        let p = rand_array(&[c], &mut rng);
        let mut open: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.6)).collect();
        let forced = rng.gen_range(0..h * w);
        open[forced] = true;
        let values = Array::from_fn(&[1, h, w], |i| if open[i] { 0.0 } else { ops::MASK_NEG });
        let mask = TargetMask::new(values).unwrap();
        let proto = Prototype::new(p.clone(), 3, 0.7).unwrap();
        let got = reweight_prototype(&proto, &f, &mask).unwrap();
        if got.source_frame != 3 {
            return f64::INFINITY;
        }
        worst = worst.max(max_diff(got.vector.data(), &naive_reweight(p.data(), &f, &open)));
    }
    worst
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Repeated selection of the best remaining entry; ties go to the newer one.
pub fn naive_top_k(sims: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; sims.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(sims.len()) {
        let mut best: Option<usize> = None;
        for i in 0..sims.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                Some(b) if sims[b] > sims[i] => Some(b),
                _ => Some(i),
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Worst row deviation of the retrieved group; a wrong selection is infinite.
pub fn top_k_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = rng.gen_range(1..6);
        let capacity = rng.gen_range(1..8);
        let mut bank = PrototypeBank::new(capacity).unwrap();
        for t in 0..rng.gen_range(1..12) {
            // Occasional duplicates exercise the tie rule.
            let v = if t > 0 && rng.gen_bool(0.2) {
                bank.get(bank.len() - 1).unwrap().vector.clone()
            } else {
                rand_array(&[c], &mut rng)
            };
            bank.push(Prototype::new(v, t, 1.0).unwrap());
        }
        let k = rng.gen_range(1..8);
        let q = rand_array(&[c], &mut rng);
        let (group, picked) = retrieve_group(q.data(), &bank, k).unwrap();
        let sims: Vec<f64> = bank.entries().map(|e| cosine(q.data(), e.vector.data())).collect();
        let want = naive_top_k(&sims, k);
        if picked != want || group.shape() != [want.len(), c] {
            return f64::INFINITY;
        }
        for (row, &i) in want.iter().enumerate() {
            worst = worst.max(max_diff(group.row(row), bank.get(i).unwrap().vector.data()));
        }
    }
    worst
}

/// Reports the true box with a fixed σ and plays back a confidence script.
pub struct Scripted {
    pub truth: Vec<BoundingBox>,
    pub confidences: Vec<f64>,
    pub sigma_px: f64,
    pub search_size: usize,
    pub seen_templates: RefCell<Vec<Array>>,
}

impl Scripted {
    pub fn new(truth: Vec<BoundingBox>, confidences: Vec<f64>) -> Self {
        Scripted {
            truth,
            confidences,
            sigma_px: 0.5,
            search_size: 16,
            seen_templates: RefCell::new(Vec::new()),
        }
    }
}

impl TrackerModel for Scripted {
    fn localize(&self, template: &Array, _search: &Array, ctx: &SearchContext) -> unctrack::Result<Localization> {
        self.seen_templates.borrow_mut().push(template.clone());
        let s = self.search_size as f64;
        let b = ctx.mapping.box_to_patch(&self.truth[ctx.frame_index]).scaled(1.0 / s);
        let pred = CornerPrediction::from_normalized(
            &b.to_array(),
            &[self.sigma_px / s; 4],
            Array::full(&[2, 4, 4], 1.0 / 16.0),
            Array::full(&[4, 4, 4], self.sigma_px / s),
            s,
        );
        Ok(Localization { pred, features: None })
    }

    fn assess(&self, _loc: &Localization, _bank: &PrototypeBank, frame: usize) -> unctrack::Result<Assessment> {
        let p = self.confidences[frame];
        Ok(Assessment {
            confidence: p,
            prototype: Prototype::new(Array::vector(&[frame as f64]), frame, p)?,
        })
    }

    fn bootstrap(&self, _t: &Array, _s: &Array, _b: &BoundingBox) -> unctrack::Result<Prototype> {
        Prototype::new(Array::vector(&[0.0]), 0, 1.0)
    }
}

pub fn tracker_config(variant: Variant) -> TrackerConfig {
    TrackerConfig {
        template_size: 8,
        search_size: 16,
        variant,
        ..TrackerConfig::default()
    }
}

/// A textured frame so that template crops differ between frames.
pub fn frame(t: usize) -> Array {
    Array::from_fn(&[3, 32, 32], |i| ((i * 7 + t * 13) % 29) as f64 / 29.0)
}

pub fn truth(n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|t| BoundingBox::from_center(10.0 + t as f64, 12.0 + 0.5 * t as f64, 6.0, 5.0))
        .collect()
}

pub fn bank_frames(bank: &PrototypeBank) -> Vec<usize> {
    bank.entries().map(|p| p.source_frame).collect()
}

/// (state before, state after, report) for every frame after the first.
pub fn run(model: &Scripted, variant: Variant) -> Vec<(TrackerState, TrackerState, FrameReport)> {
    let mut state = init(&frame(0), &model.truth[0], &tracker_config(variant), model).unwrap();
    let mut out = Vec::new();
    for t in 1..model.truth.len() {
        let (next, report) = step(&state, &frame(t), model).unwrap();
        out.push((state, next.clone(), report));
        state = next;
    }
    out
}

/// Replays every confidence script over `levels` for `steps` frames after
/// the first against a hand-rolled FIFO of capacity 6. Returns the number
/// of traces checked or the first disagreement.
pub fn exhaustive_gating(levels: &[f64], steps: usize) -> Result<usize, String> {
    let frames = steps + 1;
    let total = levels.len().pow((frames - 1) as u32);
    for code in 0..total {
        let mut c = code;
        let mut conf = vec![1.0];
        for _ in 1..frames {
            conf.push(levels[c % levels.len()]);
            c /= levels.len();
        }
        let model = Scripted::new(truth(frames), conf.clone());
        let mut expected: VecDeque<usize> = VecDeque::from([0]);
        let mut last_template_frame = 0;
        for (before, after, report) in run(&model, Variant::FULL) {
            let t = report.frame;
            let fail = |what: &str| Err(format!("script {conf:?}, frame {t}: {what}"));
            let accept = conf[t] > 0.5;
            if report.accepted != accept || report.resampled != accept {
                return fail("gate decision");
            }
            if accept {
                expected.push_back(t);
                if expected.len() > 6 {
                    expected.pop_front();
                }
                last_template_frame = t;
                if after.search_scale != 1.0 || after.last_confident_frame != t {
                    return fail("accept branch state");
                }
            } else {
                let predicted = kalman_predict(&before.kalman, &before.config.kalman).unwrap();
                let unchanged = after.bank == before.bank
                    && after.template == before.template
                    && after.template_frame == before.template_frame
                    && after.last_confident_frame == before.last_confident_frame;
                if !unchanged {
                    return fail("reject branch mutated state");
                }
                if after.search_scale != 2.0 || after.kalman != predicted || report.bbox != predicted.bbox() {
                    return fail("reject branch motion");
                }
            }
            if bank_frames(&after.bank) != Vec::from(expected.clone()) {
                return fail("bank order");
            }
            if after.template_frame != last_template_frame {
                return fail("template provenance");
            }
        }
    }
    Ok(total)
}

/// Center error of the one-step-ahead prediction after 30 updates on a
/// target moving 2 px per frame along both axes.
pub fn kalman_lead_error() -> f64 {
    let cfg = KalmanConfig::default();
    let at = |t: usize| BoundingBox::from_center(20.0 + 2.0 * t as f64, 30.0 + 2.0 * t as f64, 10.0, 8.0);
    let mut k = KalmanState::from_box(&at(0), &cfg);
    for t in 1..=30 {
        let predicted = kalman_predict(&k, &cfg).unwrap();
        k = kalman_update(&predicted, &at(t), &cfg).unwrap();
    }
    let ahead = kalman_predict(&k, &cfg).unwrap();
    let (cx, cy) = ahead.center();
    let (gx, gy) = at(31).center();
    ((cx - gx).powi(2) + (cy - gy).powi(2)).sqrt()
}

/// Largest asymmetry and smallest eigenvalue seen over 1000 mixed
/// predict/update steps.
pub fn kalman_covariance_extremes() -> (f64, f64) {
    let cfg = KalmanConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut k = KalmanState::from_box(&BoundingBox::from_center(32.0, 32.0, 10.0, 10.0), &cfg);
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for t in 0..1000 {
        let obs = rng.gen_bool(0.7).then(|| {
            BoundingBox::from_center(
                32.0 + 3.0 * (t as f64 * 0.05).sin() + rng.gen_range(-2.0..2.0),
                32.0 + rng.gen_range(-2.0..2.0),
                10.0 + rng.gen_range(-1.0..1.0),
                10.0,
            )
        });
        k = kalman_step(&k, obs.as_ref(), &cfg).unwrap();
        k.check().unwrap();
        asym = asym.max(k.asymmetry());
        min_eig = min_eig.min(k.min_eigenvalue());
    }
    (asym, min_eig)
}

/// Confidences below, at and just above the threshold, and well above it.
pub const GATE_LEVELS: [f64; 4] = [0.2, 0.5, 0.5 + 1e-12, 0.9];

/// Both sweeps: every level over short scripts, and the two values either
/// side of the threshold over scripts long enough to evict.
pub fn gating_sweeps() -> Result<usize, String> {
    Ok(exhaustive_gating(&GATE_LEVELS, 5)? + exhaustive_gating(&GATE_LEVELS[1..3], 8)?)
}
