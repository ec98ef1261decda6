//! Two-stage training on synthetic corpora: encoder and decoder first, then
//! the prototype network over frozen features.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, OptimizerKind, RunConfig, Schedule};
use super::synth::{gen_synthetic, EventSpan, EventTag, Motion, SequenceSpec, SyntheticSequence};
use crate::encoder::encode_graph;
use crate::error::{Error, Result};
use crate::losses::stage1_loss_graph;
use crate::model::{self, is_pmn_param, Features};
use crate::numerics::{Array, Graph, ParamStore};
use crate::pmn::{assess_graph, prototype_loss_graph, Prototype, PrototypeBank, TargetMask};
use crate::runtime::{crop_square, RECOVERY_SCALE};
use crate::uld::{localize_graph, normalized_uncertainty, BoundingBox};

/// Seed offsets separating the random streams of one run.
const TRAIN_CORPUS: u64 = 0x7261_696e;
const EVAL_CORPUS: u64 = 0x6576_616c;
const HOLDOUT_CORPUS: u64 = 0x686f_6c64;

/// Share of training crops taken at the tracker's recovery scale.
const WIDE_SEARCH_SHARE: f64 = 0.2;

/// Random sequence spec with one occlusion span and sometimes a deformation.
pub fn corpus_spec(data: &DataConfig, rng: &mut ChaCha8Rng) -> SequenceSpec {
    let len = data.length;
    let occ_len = (len / 5).max(1) + rng.gen_range(0..=len / 8);
    let occ_start = rng.gen_range(len / 4..=len / 2).max(1);
    let occ_end = (occ_start + occ_len - 1).min(len - 1);
    let mut events = vec![EventSpan {
        tag: EventTag::Occluded,
        start: occ_start,
        end: occ_end,
    }];
    if rng.gen_bool(0.5) && occ_end + 4 < len - 2 {
        let start = rng.gen_range(occ_end + 2..len - 2);
        let end = (start + len / 6).min(len - 1);
        events.push(EventSpan {
            tag: EventTag::Deformed,
            start,
            end,
        });
    }
    SequenceSpec {
        length: len,
        frame_size: data.frame_size,
        min_size: data.min_size,
        max_size: data.max_size,
        speed: data.speed,
        motion: if rng.gen_bool(data.wander_rate) {
            Motion::Wander
        } else {
            Motion::Linear { bounce: true }
        },
        distractor: rng.gen_bool(data.distractor_rate),
        events,
        occlusion_fraction: data.occlusion_fraction,
        noise: data.noise,
        ..SequenceSpec::default()
    }
}

fn corpus(data: &DataConfig, seed: u64, count: usize) -> Result<Vec<SyntheticSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = corpus_spec(data, &mut rng);
            gen_synthetic(&spec, rng.gen())
        })
        .collect()
}

pub fn train_corpus(cfg: &RunConfig) -> Result<Vec<SyntheticSequence>> {
    corpus(&cfg.data, cfg.seed ^ TRAIN_CORPUS, cfg.data.train_sequences)
}

pub fn eval_corpus(cfg: &RunConfig) -> Result<Vec<SyntheticSequence>> {
    corpus(&cfg.data, cfg.seed ^ EVAL_CORPUS, cfg.data.eval_sequences)
}

/// Sequences never seen in training, for held-out measurements.
pub fn holdout_corpus(cfg: &RunConfig, count: usize) -> Result<Vec<SyntheticSequence>> {
    corpus(&cfg.data, cfg.seed ^ HOLDOUT_CORPUS, count)
}

/// Fresh parameters for the whole network.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore> {
    cfg.net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ParamStore::initialize(&cfg.net.param_specs(), &mut rng)
}

fn extent(b: &BoundingBox, cfg: &RunConfig) -> f64 {
    b.width().max(b.height()).max(cfg.min_extent)
}

pub fn template_crop(frame: &Array, b: &BoundingBox, cfg: &RunConfig) -> Result<Array> {
    let (cx, cy) = b.center();
    let side = cfg.template_context * extent(b, cfg);
    Ok(crop_square(frame, cx, cy, side, cfg.net.encoder.template_size)?.0)
}

/// Search crop around `b` shifted by `(dx, dy)` target extents; returns the
/// patch and the target box in normalized search coordinates.
pub fn search_crop(
    frame: &Array,
    b: &BoundingBox,
    dx: f64,
    dy: f64,
    scale: f64,
    cfg: &RunConfig,
) -> Result<(Array, BoundingBox)> {
    let (cx, cy) = b.center();
    let e = extent(b, cfg);
    let side = cfg.base_context * e * scale;
    let (patch, mapping) = crop_square(frame, cx + dx * e, cy + dy * e, side, cfg.net.encoder.search_size)?;
    let target = mapping
        .box_to_patch(b)
        .scaled(1.0 / cfg.net.encoder.search_size as f64);
    Ok((patch, target))
}

/// One paired crop with its supervision.
#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub template: Array,
    pub search: Array,
    /// Normalized target box; corrupted on occluded frames.
    pub target: BoundingBox,
    /// Uncorrupted normalized target box.
    pub clean_target: BoundingBox,
    pub tag: EventTag,
}

fn clean_frames(seq: &SyntheticSequence) -> Vec<usize> {
    (0..seq.len()).filter(|&t| seq.events[t] == EventTag::Clean).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Crops frame `b` of `seq` against a template from frame `a`. Occluded
/// frames get Gaussian corner noise of `label_noise` normalized units.
pub fn stage1_sample(
    seq: &SyntheticSequence,
    a: usize,
    b: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Sample> {
    let template = template_crop(&seq.frames[a], &seq.gt[a], cfg)?;
    let j = cfg.data.jitter;
    let dx = rng.gen_range(-j..=j);
    let dy = rng.gen_range(-j..=j);
    let scale = if rng.gen_bool(WIDE_SEARCH_SHARE) { RECOVERY_SCALE } else { rng.gen_range(0.9..1.1) };
    let (search, clean_target) = search_crop(&seq.frames[b], &seq.gt[b], dx, dy, scale, cfg)?;
    let tag = seq.events[b];
    let target = if tag == EventTag::Occluded && cfg.data.label_noise > 0.0 {
        let mut v = clean_target.to_array();
        for x in v.iter_mut() {
            *x += cfg.data.label_noise * gaussian(rng);
        }
        let (x1, x2) = (v[0].min(v[2]), v[0].max(v[2]).max(v[0].min(v[2]) + 1e-3));
        let (y1, y2) = (v[1].min(v[3]), v[1].max(v[3]).max(v[1].min(v[3]) + 1e-3));
        BoundingBox::new(x1, y1, x2, y2)?
    } else {
        clean_target
    };
    Ok(Stage1Sample {
        template,
        search,
        target,
        clean_target,
        tag,
    })
}

/// Draws a training sample; about a third come from occluded frames.
pub fn draw_stage1_sample(data: &[SyntheticSequence], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Stage1Sample> {
    let seq = data
        .choose(rng)
        .ok_or_else(|| Error::Input("empty training corpus".into()))?;
    let clean = clean_frames(seq);
    let occluded: Vec<usize> = (0..seq.len()).filter(|&t| seq.events[t] == EventTag::Occluded).collect();
    let usable: Vec<usize> = (0..seq.len()).filter(|&t| seq.events[t] != EventTag::OutOfView).collect();
    let a = *clean
        .choose(rng)
        .ok_or_else(|| Error::Input(format!("sequence {} has no clean frame", seq.seed)))?;
    let b = if !occluded.is_empty() && rng.gen_bool(1.0 / 3.0) {
        *occluded.choose(rng).unwrap()
    } else {
        *usable.choose(rng).unwrap()
    };
    stage1_sample(seq, a, b, cfg, rng)
}

/// Stage-1 objective for one sample and the gradients of every parameter it
/// touches.
pub fn stage1_sample_loss(
    params: &ParamStore,
    cfg: &RunConfig,
    sample: &Stage1Sample,
) -> Result<(f64, BTreeMap<String, Array>)> {
    let mut g = Graph::new(params);
    let enc = encode_graph(&mut g, &sample.template, &sample.search, &cfg.net.encoder)?;
    let loc = localize_graph(&mut g, enc.search, &cfg.net.uld)?;
    if !g.value(loc.mu).is_finite() || !g.value(loc.sigma_at_corners).is_finite() {
        return Ok((f64::NAN, BTreeMap::new()));
    }
    let loss = stage1_loss_graph(&mut g, loc.mu, loc.sigma_at_corners, &sample.target, &cfg.loss)?;
    let value = g.value(loss.total).item()?;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = g.backward(loss.total)?;
    Ok((value, g.param_grads(&grads)))
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    steps: i32,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies `grads` to `params` with step size `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            let p = params.get(name)?;
            let m = self.first.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let updated = match self.kind {
                OptimizerKind::Sgd => {
                    *m = m.zip_map(g, "momentum", |m, g| self.momentum * m + g)?;
                    p.zip_map(m, "sgd", |p, m| p - lr * m)?
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    *m = m.zip_map(g, "adam m", |m, g| b1 * m + (1.0 - b1) * g)?;
                    let v = self.second.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
                    *v = v.zip_map(g, "adam v", |v, g| b2 * v + (1.0 - b2) * g * g)?;
                    let c1 = 1.0 - b1.powi(self.steps);
                    let c2 = 1.0 - b2.powi(self.steps);
                    let dir = m.zip_map(v, "adam", |m, v| (m / c1) / ((v / c2).sqrt() + eps))?;
                    p.zip_map(&dir, "adam step", |p, d| p - lr * d)?
                }
            };
            params.set(name, updated)?;
        }
        Ok(())
    }
}

fn accumulate(total: &mut BTreeMap<String, Array>, grads: BTreeMap<String, Array>, weight: f64) -> Result<()> {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => *t = t.zip_map(&g, "accumulate", |a, b| a + weight * b)?,
            None => {
                total.insert(name, g.map(|v| weight * v));
            }
        }
    }
    Ok(())
}

fn clip(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

fn learning_rate(s: &Schedule, step: usize) -> f64 {
    let thirds = if s.steps == 0 { 0 } else { 3 * step / s.steps };
    s.lr * s.decay.powi(thirds as i32)
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training diverged.
    pub params: ParamStore,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Loss on the fixed probe batch before and after training.
    pub probe_initial: f64,
    pub probe_final: f64,
    /// Held-out pair accuracy (second stage only).
    pub accuracy: Option<f64>,
    /// Step and loss at which training stopped on a non-finite loss.
    pub diverged: Option<(usize, f64)>,
}

fn mean_stage1_loss(params: &ParamStore, cfg: &RunConfig, samples: &[Stage1Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += stage1_sample_loss(params, cfg, s)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Fixed stage-1 probe batch drawn from its own stream.
pub fn stage1_probe(cfg: &RunConfig, data: &[SyntheticSequence], size: usize) -> Result<Vec<Stage1Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6f62);
    (0..size).map(|_| draw_stage1_sample(data, cfg, &mut rng)).collect()
}

fn diverged(params: ParamStore, losses: Vec<f64>, probe_initial: f64, step: usize, loss: f64) -> TrainOutcome {
    TrainOutcome {
        params,
        losses,
        probe_initial,
        probe_final: f64::NAN,
        accuracy: None,
        diverged: Some((step, loss)),
    }
}

/// Trains the encoder and decoder from a fresh initialization.
pub fn train_stage1(cfg: &RunConfig, data: &[SyntheticSequence]) -> Result<TrainOutcome> {
    train_stage1_from(cfg, init_params(cfg)?, data)
}

/// Trains the encoder and decoder starting from `params`.
pub fn train_stage1_from(cfg: &RunConfig, mut params: ParamStore, data: &[SyntheticSequence]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("stage 1 needs at least one sequence".into()));
    }
    let s = &cfg.stage1;
    let probe = stage1_probe(cfg, data, 8)?;
    let probe_initial = mean_stage1_loss(&params, cfg, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_CORPUS ^ 1);
    let mut opt = Optimizer::new(s.optimizer, s.momentum);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..s.batch {
            let sample = draw_stage1_sample(data, cfg, &mut rng)?;
            let (l, g) = stage1_sample_loss(&params, cfg, &sample)?;
            loss += l / s.batch as f64;
            if !l.is_finite() {
                break;
            }
            accumulate(&mut grads, g, 1.0 / s.batch as f64)?;
        }
        grads.retain(|name, _| !is_pmn_param(name));
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            log::error!("stage 1 diverged at step {step} (loss {loss})");
            return Ok(diverged(params, losses, probe_initial, step, loss));
        }
        let norm = clip(&mut grads, s.clip);
        let previous = params.clone();
        opt.step(&mut params, &grads, learning_rate(s, step))?;
        if params.iter().any(|(_, a)| !a.is_finite()) {
            log::error!("stage 1 parameters overflowed at step {step}");
            return Ok(diverged(previous, losses, probe_initial, step, f64::INFINITY));
        }
        losses.push(loss);
        if step % 25 == 0 || step + 1 == s.steps {
            info!("stage1 step {step}: loss {loss:.5} grad norm {norm:.4}");
        }
    }
    let probe_final = mean_stage1_loss(&params, cfg, &probe)?;
    info!("stage1 probe loss {probe_initial:.5} -> {probe_final:.5}");
    Ok(TrainOutcome {
        params,
        losses,
        probe_initial,
        probe_final,
        accuracy: None,
        diverged: None,
    })
}

/// Mean predicted σ (normalized units) per event tag over `per_sequence`
/// random search crops of every sequence, with uncorrupted crops.
pub fn sigma_by_tag(
    cfg: &RunConfig,
    params: &ParamStore,
    data: &[SyntheticSequence],
    per_sequence: usize,
    seed: u64,
) -> Result<BTreeMap<EventTag, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums: BTreeMap<EventTag, (f64, usize)> = BTreeMap::new();
    for seq in data {
        let clean = clean_frames(seq);
        let Some(&a) = clean.first() else { continue };
        for _ in 0..per_sequence {
            let b = rng.gen_range(0..seq.len());
            if seq.events[b] == EventTag::OutOfView {
                continue;
            }
            let s = stage1_sample(seq, a, b, cfg, &mut rng)?;
            let (pred, _) = model::localize(&s.template, &s.search, &cfg.net, params)?;
            let e = sums.entry(s.tag).or_default();
            e.0 += pred.normalized_sigma().iter().sum::<f64>() / 4.0;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Frozen encoder and decoder outputs for one template/search pair.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub features: Features,
    pub unc_map: Array,
    /// Box behind the prototype mask, normalized.
    pub target: BoundingBox,
}

/// Runs the frozen part of the network on a pair.
pub fn pair_features(template: &Array, search: &Array, cfg: &RunConfig, params: &ParamStore) -> Result<PairFeatures> {
    let (pred, features) = model::localize(template, search, &cfg.net, params)?;
    Ok(PairFeatures {
        target: pred.normalized_box(),
        unc_map: pred.unc_map,
        features,
    })
}

/// Precomputed frozen features grouped by the template's video.
#[derive(Clone, Debug)]
pub struct PairPool {
    /// Per video: search frames of the same video.
    pub positives: Vec<Vec<PairFeatures>>,
    /// Per video: search frames of other videos.
    pub negatives: Vec<Vec<PairFeatures>>,
}

/// Frames whose target is fully visible, deformed or not.
fn search_frames(seq: &SyntheticSequence) -> Vec<usize> {
    (1..seq.len())
        .filter(|&t| matches!(seq.events[t], EventTag::Clean | EventTag::Deformed))
        .collect()
}

/// Builds `per_video` positive and negative pairs for every video. The
/// template is the first frame's target.
pub fn build_pair_pool(
    data: &[SyntheticSequence],
    per_video: usize,
    cfg: &RunConfig,
    params: &ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<PairPool> {
    if data.len() < 2 {
        return Err(Error::Input("pair training needs at least two sequences".into()));
    }
    let j = cfg.data.jitter / 2.0;
    // The mask comes from the ground-truth box during training.
    let pair = |template: &Array, seq: &SyntheticSequence, t: usize, rng: &mut ChaCha8Rng| -> Result<PairFeatures> {
        let (dx, dy) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
        let scale = if rng.gen_bool(WIDE_SEARCH_SHARE) { RECOVERY_SCALE } else { 1.0 };
        let (search, target) = search_crop(&seq.frames[t], &seq.gt[t], dx, dy, scale, cfg)?;
        Ok(PairFeatures {
            target,
            ..pair_features(template, &search, cfg, params)?
        })
    };
    let mut pool = PairPool {
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (v, seq) in data.iter().enumerate() {
        let template = template_crop(&seq.frames[0], &seq.gt[0], cfg)?;
        let own = search_frames(seq);
        let mut pos = Vec::with_capacity(per_video);
        let mut neg = Vec::with_capacity(per_video);
        for _ in 0..per_video {
            let t = *own
                .choose(rng)
                .ok_or_else(|| Error::Input("sequence without clean frames".into()))?;
            pos.push(pair(&template, seq, t, rng)?);

            let mut other = rng.gen_range(0..data.len() - 1);
            if other >= v {
                other += 1;
            }
            let oseq = &data[other];
            let frames = search_frames(oseq);
            let t = *frames
                .choose(rng)
                .ok_or_else(|| Error::Input("sequence without clean frames".into()))?;
            neg.push(pair(&template, oseq, t, rng)?);
        }
        pool.positives.push(pos);
        pool.negatives.push(neg);
    }
    Ok(pool)
}

/// One labeled draw: video, pair index and whether it is positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub video: usize,
    pub index: usize,
    pub positive: bool,
}

/// Draws positives and negatives with equal probability.
pub fn sample_pair(videos: usize, per_video: usize, rng: &mut ChaCha8Rng) -> PairDraw {
    PairDraw {
        video: rng.gen_range(0..videos),
        index: rng.gen_range(0..per_video),
        positive: rng.gen_bool(0.5),
    }
}

/// Reweighted prototype of a pair under the current parameters.
fn pair_prototype(pair: &PairFeatures, cfg: &RunConfig, params: &ParamStore, frame: usize) -> Result<Prototype> {
    let empty = PrototypeBank::new(1)?;
    Ok(model::assess(&pair.features, &pair.unc_map, &pair.target, &empty, frame, &cfg.net, params)?.1)
}

/// Memory for a query on `video`: prototypes of that video's other positives.
fn pair_bank(pool: &PairPool, draw: &PairDraw, cfg: &RunConfig, params: &ParamStore) -> Result<PrototypeBank> {
    let mut bank = PrototypeBank::new(cfg.net.pmn.capacity)?;
    let own = &pool.positives[draw.video];
    for (i, pair) in own.iter().enumerate() {
        if draw.positive && i == draw.index {
            continue;
        }
        if bank.len() == bank.capacity() {
            break;
        }
        bank.push(pair_prototype(pair, cfg, params, i)?);
    }
    Ok(bank)
}

fn pair_of<'a>(pool: &'a PairPool, d: &PairDraw) -> &'a PairFeatures {
    if d.positive {
        &pool.positives[d.video][d.index]
    } else {
        &pool.negatives[d.video][d.index]
    }
}

/// Classifier loss and PMN gradients for one draw.
fn stage2_sample_loss(
    pool: &PairPool,
    draw: &PairDraw,
    cfg: &RunConfig,
    params: &ParamStore,
) -> Result<(f64, f64, BTreeMap<String, Array>)> {
    let bank = pair_bank(pool, draw, cfg, params)?;
    let pair = pair_of(pool, draw);
    let (_, h, w) = pair.unc_map.dims3()?;
    let mask = TargetMask::from_box(&pair.target, h, w);
    let mut g = Graph::new(params);
    let ft = g.leaf(pair.features.f_t.clone());
    let fs = g.leaf(pair.features.f_s.clone());
    let u = g.leaf(normalized_uncertainty(&pair.unc_map));
    let out = assess_graph(&mut g, ft, fs, u, cfg.net.uld.upsample, &mask, &bank, &cfg.net.pmn)?;
    let p = g.value(out.probs).data()[1];
    let p1 = g.gather(out.probs, &[1])?;
    let y = if draw.positive { 1.0 } else { 0.0 };
    let loss = prototype_loss_graph(&mut g, p1, &[y])?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, p, BTreeMap::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, p, g.param_grads(&grads)))
}

/// Reliability score of every draw under the current parameters.
pub fn pair_scores(pool: &PairPool, draws: &[PairDraw], cfg: &RunConfig, params: &ParamStore) -> Result<Vec<f64>> {
    draws
        .iter()
        .map(|d| {
            let bank = pair_bank(pool, d, cfg, params)?;
            let pair = pair_of(pool, d);
            Ok(model::assess(&pair.features, &pair.unc_map, &pair.target, &bank, 0, &cfg.net, params)?.0)
        })
        .collect()
}

/// Fraction of `draws` classified correctly at threshold `T`.
pub fn pair_accuracy(pool: &PairPool, draws: &[PairDraw], cfg: &RunConfig, params: &ParamStore) -> Result<f64> {
    let scores = pair_scores(pool, draws, cfg, params)?;
    let correct = scores
        .iter()
        .zip(draws)
        .filter(|(&p, d)| (p > cfg.net.pmn.threshold) == d.positive)
        .count();
    Ok(correct as f64 / draws.len().max(1) as f64)
}

/// Every positive and negative of `pool` exactly once.
pub fn exhaustive_draws(pool: &PairPool) -> Vec<PairDraw> {
    let mut out = Vec::new();
    for video in 0..pool.positives.len() {
        for index in 0..pool.positives[video].len() {
            for positive in [true, false] {
                out.push(PairDraw { video, index, positive });
            }
        }
    }
    out
}

/// Trains the prototype network with everything else frozen.
pub fn train_stage2(cfg: &RunConfig, params: &ParamStore, data: &[SyntheticSequence]) -> Result<TrainOutcome> {
    cfg.validate()?;
    for spec in cfg.net.param_specs() {
        match params.get(&spec.name) {
            Err(_) => return Err(Error::Input(format!("stage-1 parameters lack `{}`", spec.name))),
            Ok(a) if a.shape() != spec.shape => {
                return Err(Error::Input(format!(
                    "`{}` has shape {:?}, the configuration expects {:?}",
                    spec.name,
                    a.shape(),
                    spec.shape
                )))
            }
            Ok(_) => {}
        }
    }
    let s = &cfg.stage2;
    let per_video = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_CORPUS ^ 2);
    let pool = build_pair_pool(data, per_video, cfg, params, &mut rng)?;
    let holdout_videos = (cfg.holdout_pairs / 8).max(2);
    let holdout_data = holdout_corpus(cfg, holdout_videos)?;
    let holdout = build_pair_pool(&holdout_data, 4, cfg, params, &mut rng)?;
    let holdout_draws = exhaustive_draws(&holdout);

    let mut params = params.clone();
    let probe: Vec<PairDraw> = exhaustive_draws(&pool).into_iter().step_by(3).collect();
    let probe_loss = |params: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for d in &probe {
            total += stage2_sample_loss(&pool, d, cfg, params)?.0;
        }
        Ok(total / probe.len() as f64)
    };
    let probe_initial = probe_loss(&params)?;
    let mut opt = Optimizer::new(s.optimizer, s.momentum);
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..s.batch {
            let draw = sample_pair(pool.positives.len(), per_video, &mut rng);
            let (l, _, g) = stage2_sample_loss(&pool, &draw, cfg, &params)?;
            loss += l / s.batch as f64;
            if !l.is_finite() {
                break;
            }
            accumulate(&mut grads, g, 1.0 / s.batch as f64)?;
        }
        grads.retain(|name, _| is_pmn_param(name));
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            log::error!("stage 2 diverged at step {step} (loss {loss})");
            return Ok(diverged(params, losses, probe_initial, step, loss));
        }
        clip(&mut grads, s.clip);
        let previous = params.clone();
        opt.step(&mut params, &grads, learning_rate(s, step))?;
        if params.iter().any(|(_, a)| !a.is_finite()) {
            log::error!("stage 2 parameters overflowed at step {step}");
            return Ok(diverged(previous, losses, probe_initial, step, f64::INFINITY));
        }
        losses.push(loss);
        if step % 25 == 0 || step + 1 == s.steps {
            info!("stage2 step {step}: loss {loss:.5}");
        }
    }
    let probe_final = probe_loss(&params)?;
    let accuracy = pair_accuracy(&holdout, &holdout_draws, cfg, &params)?;
    info!("stage2 probe loss {probe_initial:.5} -> {probe_final:.5}, held-out accuracy {accuracy:.3}");
    debug!("stage2 held-out pairs: {}", holdout_draws.len());
    Ok(TrainOutcome {
        params,
        losses,
        probe_initial,
        probe_final,
        accuracy: Some(accuracy),
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::preset("fast").unwrap();
        cfg.net.encoder.width = 8;
        cfg.net.encoder.layers = 1;
        cfg.net.uld.head_channels = 4;
        cfg.net.pmn.key_width = 4;
        cfg.net.pmn.hidden = 8;
        cfg.data.train_sequences = 3;
        cfg.data.length = 12;
        cfg
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = tiny();
        cfg.stage1.steps = 0;
        let data = train_corpus(&cfg).unwrap();
        let out = train_stage1(&cfg, &data).unwrap();
        assert_eq!(out.params, init_params(&cfg).unwrap());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn occluded_samples_carry_corrupted_labels() {
        let cfg = tiny();
        let data = train_corpus(&cfg).unwrap();
        let seq = &data[0];
        let occ = seq.events.iter().position(|&t| t == EventTag::Occluded).unwrap();
        let clean = seq.events.iter().position(|&t| t == EventTag::Clean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = stage1_sample(seq, clean, occ, &cfg, &mut rng).unwrap();
        assert_ne!(s.target, s.clean_target);
        let s = stage1_sample(seq, clean, clean, &cfg, &mut rng).unwrap();
        assert_eq!(s.target, s.clean_target);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut params = ParamStore::new();
        params.insert("w", Array::vector(&[1.0, 2.0])).unwrap();
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::vector(&[0.5, -1.0]))].into();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.9);
        opt.step(&mut params, &grads, 0.1).unwrap();
        opt.step(&mut params, &grads, 0.1).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.1 * 0.5 - 0.1 * (0.9 * 0.5 + 0.5))).abs() < 1e-15);
        assert!((w[1] - (2.0 + 0.1 + 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Array::vector(&[0.0, 0.0])).unwrap();
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::vector(&[3.0, -0.01]))].into();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.9);
        opt.step(&mut params, &grads, 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-8 && (w[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn learning_rate_decays_by_thirds() {
        let s = RunConfig::default().stage1;
        let s = Schedule { steps: 9, lr: 1.0, decay: 0.5, ..s };
        let lrs: Vec<f64> = (0..9).map(|i| learning_rate(&s, i)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25]);
    }
}
