//! Prototype memory network.
//!
//! A pooled template prototype is reweighted over the in-box pixels of a
//! fused search/certainty map, compared against a FIFO bank of accepted
//! prototypes, aggregated with the top-k matches by a single cross-attention
//! step and finally classified as reliable or not.
//!
//! Prototypes travel through graphs as `1×C` rows.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{ops, Array, Broadcast, Graph, Init, ParamSpec, ParamStore, Var};
use crate::uld::BoundingBox;

/// Floor and ceiling applied to probabilities inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PmnConfig {
    pub top_k: usize,
    pub capacity: usize,
    /// Acceptance requires `p > threshold`.
    pub threshold: f64,
    pub key_width: usize,
    pub hidden: usize,
    /// Project values from the retrieved group rather than from `P*`.
    pub value_from_group: bool,
}

impl Default for PmnConfig {
    fn default() -> Self {
        PmnConfig {
            top_k: 3,
            capacity: 6,
            threshold: 0.5,
            key_width: 16,
            hidden: 32,
            value_from_group: false,
        }
    }
}

impl PmnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.capacity == 0 || self.key_width == 0 || self.hidden == 0 {
            return Err(Error::Config("prototype network extents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn param_specs(&self, c: usize) -> Vec<ParamSpec> {
        let mut specs = vec![
            ParamSpec::new("pmn.cim.w", &[1, 4, 1, 1], Init::Glorot),
            ParamSpec::new("pmn.cim.b", &[1], Init::Zeros),
            ParamSpec::new("pmn.fuse.w", &[c, c + 1, 1, 1], Init::Glorot),
            ParamSpec::new("pmn.fuse.b", &[c], Init::Zeros),
            ParamSpec::new("pmn.read.wq", &[c, self.key_width], Init::Glorot),
            ParamSpec::new("pmn.read.wk", &[c, self.key_width], Init::Glorot),
            ParamSpec::new("pmn.cls.w1", &[c, self.hidden], Init::Glorot),
            ParamSpec::new("pmn.cls.b1", &[self.hidden], Init::Zeros),
            ParamSpec::new("pmn.cls.w2", &[self.hidden, 2], Init::Glorot),
            ParamSpec::new("pmn.cls.b2", &[2], Init::Zeros),
        ];
        if self.value_from_group {
            specs.push(ParamSpec::new("pmn.read.wv", &[c, c], Init::Glorot));
        } else {
            specs.push(ParamSpec::new("pmn.read.wv", &[c, self.top_k * c], Init::Glorot));
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    /// Length-`C` vector.
    pub vector: Array,
    pub source_frame: usize,
    pub confidence: f64,
}

impl Prototype {
    pub fn new(vector: Array, source_frame: usize, confidence: f64) -> Result<Self> {
        if vector.ndim() != 1 || !vector.is_finite() {
            return Err(Error::Shape(format!(
                "prototype must be a finite vector, got {vector:?}"
            )));
        }
        Ok(Prototype {
            vector,
            source_frame,
            confidence,
        })
    }

    pub fn width(&self) -> usize {
        self.vector.len()
    }
}

/// Capacity-bounded prototypes, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    entries: VecDeque<Prototype>,
    capacity: usize,
}

impl PrototypeBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("bank capacity must be positive".into()));
        }
        Ok(PrototypeBank {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Prototype> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Prototype> {
        self.entries.get(i)
    }

    /// Appends unconditionally, evicting the oldest entry when full.
    pub fn push(&mut self, proto: Prototype) {
        self.entries.push_back(proto);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }
}

/// Returns the bank after offering `proto` with confidence `p`; only
/// `p > threshold` inserts.
pub fn memory_update(bank: &PrototypeBank, proto: Prototype, p: f64, threshold: f64) -> PrototypeBank {
    let mut next = bank.clone();
    if p > threshold {
        next.push(proto);
    }
    next
}

/// Per-pixel `{0, MASK_NEG}` map over the head grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    values: Array,
}

impl TargetMask {
    pub fn new(values: Array) -> Result<Self> {
        let (c, _, _) = values.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("mask must have one channel, got {c}")));
        }
        if values.data().iter().any(|&v| v != 0.0 && !ops::is_masked(v)) {
            return Err(Error::Input("mask entries must be 0 or the mask sentinel".into()));
        }
        if values.data().iter().all(|&v| ops::is_masked(v)) {
            return Err(Error::DegenerateMask);
        }
        Ok(TargetMask { values })
    }

    /// Opens every cell whose center lies inside `bbox` (normalized search
    /// coordinates). When no center is covered the cell holding the box center
    /// is opened so the mask is never empty.
    pub fn from_box(bbox: &BoundingBox, h: usize, w: usize) -> Self {
        let mut values = Array::full(&[1, h, w], ops::MASK_NEG);
        let mut any = false;
        for r in 0..h {
            let cy = (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let cx = (c as f64 + 0.5) / w as f64;
                if cx >= bbox.x_tl && cx <= bbox.x_br && cy >= bbox.y_tl && cy <= bbox.y_br {
                    values.data_mut()[r * w + c] = 0.0;
                    any = true;
                }
            }
        }
        if !any {
            let (cx, cy) = bbox.center();
            let c = ((cx * w as f64).floor().max(0.0) as usize).min(w - 1);
            let r = ((cy * h as f64).floor().max(0.0) as usize).min(h - 1);
            values.data_mut()[r * w + c] = 0.0;
        }
        TargetMask { values }
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn open_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }
}

/// Global average pool of `F_t` as a prototype vector.
pub fn extract_prototype(f_t: &Array, source_frame: usize) -> Result<Prototype> {
    let pooled = ops::global_avg_pool(f_t)?;
    Prototype::new(Array::vector(pooled.data()), source_frame, 1.0)
}

fn check_unit_interval(unc_norm: &Array) -> Result<()> {
    if unc_norm.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("normalized uncertainty must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `sigmoid(conv1x1(1 − û))`, `4×H×W → 1×H×W`.
pub fn confidence_inversion_graph(g: &mut Graph, unc_norm: Var) -> Result<Var> {
    check_unit_interval(g.value(unc_norm))?;
    let inv = g.neg(unc_norm)?;
    let inv = g.offset(inv, 1.0)?;
    let w = g.param("pmn.cim.w")?;
    let b = g.param("pmn.cim.b")?;
    let y = g.conv2d(inv, w, 1, 0)?;
    let y = g.add_broadcast(y, b, Broadcast::Leading)?;
    g.sigmoid(y)
}

pub fn confidence_inversion(unc_norm: &Array, params: &ParamStore) -> Result<Array> {
    let mut g = Graph::new(params);
    let u = g.leaf(unc_norm.clone());
    let y = confidence_inversion_graph(&mut g, u)?;
    Ok(g.value(y).clone())
}

/// 1×1 projection of `concat(F_c, F_s)` back to `C` channels.
pub fn fuse_features_graph(g: &mut Graph, f_c: Var, f_s: Var) -> Result<Var> {
    let (_, hc, wc) = g.value(f_c).dims3()?;
    let (_, hs, ws) = g.value(f_s).dims3()?;
    if (hc, wc) != (hs, ws) {
        return Err(Error::Shape(format!(
            "certainty map {hc}x{wc} does not match search features {hs}x{ws}"
        )));
    }
    let x = g.concat(&[f_c, f_s])?;
    let w = g.param("pmn.fuse.w")?;
    let b = g.param("pmn.fuse.b")?;
    let y = g.conv2d(x, w, 1, 0)?;
    g.add_broadcast(y, b, Broadcast::Leading)
}

pub fn fuse_features(f_c: &Array, f_s: &Array, params: &ParamStore) -> Result<Array> {
    let mut g = Graph::new(params);
    let c = g.leaf(f_c.clone());
    let s = g.leaf(f_s.clone());
    let y = fuse_features_graph(&mut g, c, s)?;
    Ok(g.value(y).clone())
}

/// Masked spatial attention of a `1×C` prototype over `F`; returns `1×C`.
pub fn reweight_prototype_graph(g: &mut Graph, proto: Var, f: Var, mask: &TargetMask) -> Result<Var> {
    let (c, h, w) = g.value(f).dims3()?;
    if mask.values.shape() != [1, h, w] {
        return Err(Error::Dimension {
            op: "reweight_prototype",
            lhs: vec![c, h, w],
            rhs: mask.values.shape().to_vec(),
        });
    }
    let f2 = g.reshape(f, &[c, h * w])?;
    let scores = g.matmul(proto, f2)?;
    let m = mask.values.reshape(&[1, h * w])?;
    let weights = g.masked_softmax(scores, 1, Some(m))?;
    let ft = g.transpose(f2)?;
    g.matmul(weights, ft)
}

pub fn reweight_prototype(proto: &Prototype, f: &Array, mask: &TargetMask) -> Result<Prototype> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.leaf(proto.vector.reshape(&[1, proto.width()])?);
    let fv = g.leaf(f.clone());
    let y = reweight_prototype_graph(&mut g, p, fv, mask)?;
    Prototype::new(Array::vector(g.value(y).data()), proto.source_frame, proto.confidence)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Indices of the `min(k, len)` largest similarities, best first; equal
/// similarities prefer the newer (higher-index) entry.
pub fn select_top_k(similarities: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..similarities.len()).collect();
    idx.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    idx.truncate(k);
    idx
}

/// Similarities of `p_star` against every bank entry, oldest first.
pub fn bank_similarities(p_star: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    bank.entries()
        .map(|e| cosine_similarity(p_star, e.vector.data()))
        .collect()
}

/// Retrieved group `P_g` (rows best first) and the indices it came from.
pub fn retrieve_group(p_star: &[f64], bank: &PrototypeBank, k: usize) -> Result<(Array, Vec<usize>)> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let picked = select_top_k(&bank_similarities(p_star, bank), k);
    let c = p_star.len();
    let mut data = Vec::with_capacity(picked.len() * c);
    for &i in &picked {
        let v = &bank.get(i).expect("selected index in range").vector;
        if v.len() != c {
            return Err(Error::Dimension {
                op: "memory_read",
                lhs: vec![c],
                rhs: v.shape().to_vec(),
            });
        }
        data.extend_from_slice(v.data());
    }
    Ok((Array::new(vec![picked.len(), c], data)?, picked))
}

/// `P̂ = P* + softmax(φq(P*) φk(P_g)ᵀ) · V` where `V` is `φv(P*)` reshaped to
/// `k×C` (or `φv(P_g)` in the group-value variant).
pub fn memory_read_graph(g: &mut Graph, p_star: Var, group: &Array, cfg: &PmnConfig) -> Result<Var> {
    let (_, c) = g.value(p_star).dims2()?;
    let (k, _) = group.dims2()?;
    let pg = g.leaf(group.clone());
    let wq = g.param("pmn.read.wq")?;
    let wk = g.param("pmn.read.wk")?;
    let wv = g.param("pmn.read.wv")?;
    let q = g.matmul(p_star, wq)?;
    let keys = g.matmul(pg, wk)?;
    let kt = g.transpose(keys)?;
    let logits = g.matmul(q, kt)?;
    let attn = g.softmax(logits, 1)?;
    let values = if cfg.value_from_group {
        g.matmul(pg, wv)?
    } else {
        let v = g.matmul(p_star, wv)?;
        let v = g.reshape(v, &[cfg.top_k, c])?;
        g.slice(v, 0, k)?
    };
    let read = g.matmul(attn, values)?;
    g.add(p_star, read)
}

pub fn memory_read(
    p_star: &Prototype,
    bank: &PrototypeBank,
    cfg: &PmnConfig,
    params: &ParamStore,
) -> Result<Prototype> {
    let (group, _) = retrieve_group(p_star.vector.data(), bank, cfg.top_k)?;
    let mut g = Graph::new(params);
    let p = g.leaf(p_star.vector.reshape(&[1, p_star.width()])?);
    let y = memory_read_graph(&mut g, p, &group, cfg)?;
    Prototype::new(Array::vector(g.value(y).data()), p_star.source_frame, p_star.confidence)
}

/// Two-layer classifier; returns the `1×2` class distribution, reliable last.
pub fn confidence_graph(g: &mut Graph, p_hat: Var) -> Result<Var> {
    let w1 = g.param("pmn.cls.w1")?;
    let b1 = g.param("pmn.cls.b1")?;
    let w2 = g.param("pmn.cls.w2")?;
    let b2 = g.param("pmn.cls.b2")?;
    let h = g.matmul(p_hat, w1)?;
    let h = g.add_broadcast(h, b1, Broadcast::Trailing)?;
    let h = g.relu(h)?;
    let logits = g.matmul(h, w2)?;
    let logits = g.add_broadcast(logits, b2, Broadcast::Trailing)?;
    g.softmax(logits, 1)
}

/// Probability that `p_hat` is reliable.
pub fn confidence_score(p_hat: &Prototype, params: &ParamStore) -> Result<f64> {
    let mut g = Graph::new(params);
    let p = g.leaf(p_hat.vector.reshape(&[1, p_hat.width()])?);
    let probs = confidence_graph(&mut g, p)?;
    Ok(g.value(probs).data()[1])
}

/// Binary cross-entropy with probabilities clamped to `[ε, 1 − ε]`.
pub fn prototype_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "prototype loss needs equal non-empty batches, got {} and {}",
            p.len(),
            y.len()
        )));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / p.len() as f64)
}

pub fn prototype_loss_graph(g: &mut Graph, p: Var, y: &[f64]) -> Result<Var> {
    if g.value(p).len() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "prototype loss needs equal non-empty batches, got {} and {}",
            g.value(p).len(),
            y.len()
        )));
    }
    let p = g.reshape(p, &[y.len()])?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let labels = g.leaf(Array::vector(y));
    let log_p = g.log(p)?;
    let pos = g.mul(labels, log_p)?;
    let q = g.neg(p)?;
    let q = g.offset(q, 1.0)?;
    let log_q = g.log(q)?;
    let inv = g.neg(labels)?;
    let inv = g.offset(inv, 1.0)?;
    let neg = g.mul(inv, log_q)?;
    let s = g.add(pos, neg)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// Nodes produced by a full reliability assessment.
pub struct AssessVars {
    /// Reweighted prototype `P*`, `1×C`.
    pub p_star: Var,
    /// Aggregated prototype `P̂`, `1×C`.
    pub p_hat: Var,
    /// Class distribution `1×2`.
    pub probs: Var,
}

/// Records the network from encoder/decoder outputs to the confidence.
///
/// `f_s` lives on the encoder grid and is upsampled by `upsample` to the head
/// grid of `unc_norm`. An empty bank skips the read and uses `P̂ = P*`.
pub fn assess_graph(
    g: &mut Graph,
    f_t: Var,
    f_s: Var,
    unc_norm: Var,
    upsample: usize,
    mask: &TargetMask,
    bank: &PrototypeBank,
    cfg: &PmnConfig,
) -> Result<AssessVars> {
    let (c, _, _) = g.value(f_t).dims3()?;
    let pooled = g.global_avg_pool(f_t)?;
    let proto = g.reshape(pooled, &[1, c])?;
    let f_c = confidence_inversion_graph(g, unc_norm)?;
    let f_s_up = g.upsample(f_s, upsample)?;
    let f = fuse_features_graph(g, f_c, f_s_up)?;
    let p_star = reweight_prototype_graph(g, proto, f, mask)?;
    let p_hat = if bank.is_empty() {
        p_star
    } else {
        let (group, _) = retrieve_group(g.value(p_star).data(), bank, cfg.top_k)?;
        memory_read_graph(g, p_star, &group, cfg)?
    };
    let probs = confidence_graph(g, p_hat)?;
    Ok(AssessVars { p_star, p_hat, probs })
}
