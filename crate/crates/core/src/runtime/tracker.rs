//! The online tracking loop.

use crate::error::{Error, Result};
use crate::model::{self, Features, NetConfig};
use crate::numerics::{Array, ParamStore};
use crate::pmn::{memory_update, Prototype, PrototypeBank};
use crate::uld::{BoundingBox, CornerPrediction};

use super::crop::{crop_square, CropMapping};
use super::kalman::{kalman_predict, kalman_update, KalmanConfig, KalmanState};

/// Search-region multiplier used after a rejected frame.
pub const RECOVERY_SCALE: f64 = 2.0;

/// Which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// When off, σ is forced to one pixel and every frame is accepted.
    pub uld: bool,
    /// When off, the confidence is forced to one.
    pub pmn: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { uld: true, pmn: true };

    /// The four rows of the ablation grid, full system first.
    pub fn grid() -> [Variant; 4] {
        [
            Variant::FULL,
            Variant { uld: false, pmn: true },
            Variant { uld: true, pmn: false },
            Variant { uld: false, pmn: false },
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.uld, self.pmn) {
            (true, true) => "full",
            (false, true) => "no-uld",
            (true, false) => "no-pmn",
            (false, false) => "neither",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub template_size: usize,
    pub search_size: usize,
    /// Search side as a multiple of the target's larger extent.
    pub base_context: f64,
    /// Template side as a multiple of the target's larger extent.
    pub template_context: f64,
    /// Smallest target extent used when sizing crops, in frame pixels.
    pub min_extent: f64,
    pub threshold: f64,
    pub capacity: usize,
    pub kalman: KalmanConfig,
    pub variant: Variant,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            template_size: 32,
            search_size: 64,
            base_context: 2.0,
            template_context: 1.0,
            min_extent: 4.0,
            threshold: 0.5,
            capacity: 6,
            kalman: KalmanConfig::default(),
            variant: Variant::FULL,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.kalman.validate()?;
        if self.template_size == 0 || self.search_size == 0 || self.capacity == 0 {
            return Err(Error::Config("tracker sizes and capacity must be positive".into()));
        }
        for (name, v) in [
            ("base_context", self.base_context),
            ("template_context", self.template_context),
            ("min_extent", self.min_extent),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Where the search patch came from.
#[derive(Clone, Copy, Debug)]
pub struct SearchContext {
    pub frame_index: usize,
    pub mapping: CropMapping,
}

/// Output of the localization stage on one search patch.
#[derive(Clone, Debug)]
pub struct Localization {
    /// Prediction in search-patch pixels.
    pub pred: CornerPrediction,
    pub features: Option<Features>,
}

#[derive(Clone, Debug)]
pub struct Assessment {
    pub confidence: f64,
    /// Candidate for the bank if the frame is accepted.
    pub prototype: Prototype,
}

/// The network as seen by the tracker.
pub trait TrackerModel {
    fn localize(&self, template: &Array, search: &Array, ctx: &SearchContext) -> Result<Localization>;

    fn assess(&self, loc: &Localization, bank: &PrototypeBank, frame_index: usize) -> Result<Assessment>;

    /// Prototype for the first frame, where the target box is known.
    fn bootstrap(&self, template: &Array, search: &Array, target: &BoundingBox) -> Result<Prototype>;
}

/// The trained network.
pub struct UncTrackModel<'p> {
    pub cfg: NetConfig,
    pub params: &'p ParamStore,
}

impl<'p> UncTrackModel<'p> {
    pub fn new(cfg: NetConfig, params: &'p ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(UncTrackModel { cfg, params })
    }
}

impl TrackerModel for UncTrackModel<'_> {
    fn localize(&self, template: &Array, search: &Array, _ctx: &SearchContext) -> Result<Localization> {
        let (pred, features) = model::localize(template, search, &self.cfg, self.params)?;
        Ok(Localization {
            pred,
            features: Some(features),
        })
    }

    fn assess(&self, loc: &Localization, bank: &PrototypeBank, frame_index: usize) -> Result<Assessment> {
        let features = loc
            .features
            .as_ref()
            .ok_or_else(|| Error::Contract("localization carries no features".into()))?;
        let (confidence, prototype) = model::assess(
            features,
            &loc.pred.unc_map,
            &loc.pred.normalized_box(),
            bank,
            frame_index,
            &self.cfg,
            self.params,
        )?;
        Ok(Assessment { confidence, prototype })
    }

    fn bootstrap(&self, template: &Array, search: &Array, target: &BoundingBox) -> Result<Prototype> {
        let (pred, features) = model::localize(template, search, &self.cfg, self.params)?;
        let empty = PrototypeBank::new(1)?;
        let norm = target.scaled(1.0 / self.cfg.encoder.search_size as f64);
        let (_, proto) = model::assess(&features, &pred.unc_map, &norm, &empty, 0, &self.cfg, self.params)?;
        Ok(Prototype { confidence: 1.0, ..proto })
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub template: Array,
    pub template_frame: usize,
    pub bank: PrototypeBank,
    pub kalman: KalmanState,
    pub search_scale: f64,
    pub last_confident_frame: usize,
    /// Index of the frame the next step consumes.
    pub next_frame: usize,
    pub config: TrackerConfig,
}

/// Per-frame record produced by [`step`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    /// Reported box in frame pixels.
    pub bbox: BoundingBox,
    /// σ per coordinate in frame pixels.
    pub sigma: [f64; 4],
    pub confidence: f64,
    pub accepted: bool,
    pub resampled: bool,
}

fn check_finite(values: &[f64], stage: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into() })
    }
}

fn crop_template(frame: &Array, bbox: &BoundingBox, cfg: &TrackerConfig) -> Result<Array> {
    let (cx, cy) = bbox.center();
    let extent = bbox.width().max(bbox.height()).max(cfg.min_extent);
    Ok(crop_square(frame, cx, cy, cfg.template_context * extent, cfg.template_size)?.0)
}

/// Search patch around the filter's current mean.
pub fn crop_search(frame: &Array, kalman: &KalmanState, search_scale: f64, cfg: &TrackerConfig) -> Result<(Array, CropMapping)> {
    let (_, h, w) = frame.dims3()?;
    let cx = kalman.mean[0].clamp(0.0, w as f64);
    let cy = kalman.mean[1].clamp(0.0, h as f64);
    let extent = kalman.mean[2].max(kalman.mean[3]).max(cfg.min_extent);
    crop_square(frame, cx, cy, cfg.base_context * extent * search_scale, cfg.search_size)
}

/// Starts tracking `bbox` in `frame`.
pub fn init(frame: &Array, bbox: &BoundingBox, cfg: &TrackerConfig, model: &dyn TrackerModel) -> Result<TrackerState> {
    cfg.validate()?;
    let (_, h, w) = frame.dims3()?;
    let inside = bbox.x_tl >= 0.0 && bbox.y_tl >= 0.0 && bbox.x_br <= w as f64 && bbox.y_br <= h as f64;
    if !inside || !(bbox.area() > 0.0) {
        return Err(Error::Input(format!("initial box {bbox:?} is empty or outside the {w}x{h} frame")));
    }
    let kalman = KalmanState::from_box(bbox, &cfg.kalman);
    let template = crop_template(frame, bbox, cfg)?;
    let (search, mapping) = crop_search(frame, &kalman, 1.0, cfg)?;
    let mut bank = PrototypeBank::new(cfg.capacity)?;
    bank.push(model.bootstrap(&template, &search, &mapping.box_to_patch(bbox))?);
    Ok(TrackerState {
        template,
        template_frame: 0,
        bank,
        kalman,
        search_scale: 1.0,
        last_confident_frame: 0,
        next_frame: 1,
        config: cfg.clone(),
    })
}

/// Processes the next frame.
pub fn step(state: &TrackerState, frame: &Array, model: &dyn TrackerModel) -> Result<(TrackerState, FrameReport)> {
    let cfg = &state.config;
    let index = state.next_frame;
    let predicted = kalman_predict(&state.kalman, &cfg.kalman)?;
    let (search, mapping) = crop_search(frame, &predicted, state.search_scale, cfg)?;
    let ctx = SearchContext {
        frame_index: index,
        mapping,
    };

    let mut loc = model.localize(&state.template, &search, &ctx)?;
    check_finite(&loc.pred.bbox.to_array(), "localize")?;
    check_finite(&loc.pred.sigma, "localize")?;
    if !cfg.variant.uld {
        let unit = 1.0 / loc.pred.search_size;
        loc.pred.sigma = [1.0 / mapping.scale; 4];
        loc.pred.unc_map = loc.pred.unc_map.map(|_| unit);
    }

    let assessment = model.assess(&loc, &state.bank, index)?;
    let confidence = if cfg.variant.pmn { assessment.confidence } else { 1.0 };
    check_finite(&[confidence], "assess")?;
    let accepted = !cfg.variant.uld || confidence > cfg.threshold;

    let observed = mapping.box_to_frame(&loc.pred.bbox);
    let sigma = loc.pred.sigma.map(|s| s * mapping.scale);
    let mut next = state.clone();
    next.next_frame = index + 1;
    let bbox = if accepted {
        next.kalman = kalman_update(&predicted, &observed, &cfg.kalman)?;
        next.bank = if cfg.variant.uld {
            memory_update(&state.bank, assessment.prototype, confidence, cfg.threshold)
        } else {
            // The open gate admits every frame to memory.
            let mut bank = state.bank.clone();
            bank.push(assessment.prototype);
            bank
        };
        next.search_scale = 1.0;
        next.last_confident_frame = index;
        next.template = crop_template(frame, &observed, cfg)?;
        next.template_frame = index;
        observed
    } else {
        next.kalman = predicted.clone();
        next.search_scale = RECOVERY_SCALE;
        predicted.bbox()
    };
    check_finite(&next.kalman.mean, "kalman")?;

    Ok((
        next,
        FrameReport {
            frame: index,
            bbox,
            sigma,
            confidence,
            accepted,
            resampled: accepted,
        },
    ))
}
