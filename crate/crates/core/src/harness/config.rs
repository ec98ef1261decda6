//! Run configuration: line-oriented `key = value` files with dotted keys,
//! named presets and command-line overrides.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::NetConfig;
use crate::pmn::PmnConfig;
use crate::runtime::{KalmanConfig, TrackerConfig, Variant};
use crate::uld::UldConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd or adam)"))),
        }
    }
}

impl Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip: f64,
    /// Learning rate is multiplied by `decay` at each third of the schedule.
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frame_size: usize,
    pub length: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub speed: f64,
    pub occlusion_fraction: f64,
    pub noise: f64,
    /// Standard deviation of the corner corruption applied to occluded
    /// training frames, as a fraction of the search side.
    pub label_noise: f64,
    /// Random search-center offset during training, as a fraction of the
    /// target extent.
    pub jitter: f64,
    /// Probability that a sequence carries a second, target-like object.
    pub distractor_rate: f64,
    /// Probability that a sequence uses random-walk rather than linear motion.
    pub wander_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub kalman: KalmanConfig,
    pub base_context: f64,
    pub template_context: f64,
    pub min_extent: f64,
    pub data: DataConfig,
    pub stage1: Schedule,
    pub stage2: Schedule,
    /// Fixed pairs held out for stage-2 accuracy.
    pub holdout_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            net: NetConfig {
                encoder: EncoderConfig {
                    patch: 8,
                    width: 32,
                    layers: 4,
                    heads: 2,
                    mlp_ratio: 2,
                    template_size: 32,
                    search_size: 64,
                },
                uld: UldConfig {
                    upsample: 2,
                    head_channels: 16,
                    sigma_floor: 1e-3,
                },
                pmn: PmnConfig {
                    value_from_group: true,
                    ..PmnConfig::default()
                },
            },
            loss: LossWeights::default(),
            kalman: KalmanConfig::default(),
            base_context: 2.0,
            template_context: 1.0,
            min_extent: 4.0,
            data: DataConfig {
                frame_size: 64,
                length: 40,
                train_sequences: 300,
                eval_sequences: 20,
                min_size: 12.0,
                max_size: 18.0,
                speed: 1.5,
                occlusion_fraction: 1.0,
                noise: 0.02,
                label_noise: 0.08,
                jitter: 0.5,
                distractor_rate: 0.3,
                wander_rate: 0.5,
            },
            stage1: Schedule {
                steps: 5000,
                lr: 1e-3,
                batch: 4,
                optimizer: OptimizerKind::Adam,
                momentum: 0.9,
                clip: 5.0,
                decay: 0.5,
            },
            stage2: Schedule {
                steps: 1500,
                lr: 2e-3,
                batch: 8,
                optimizer: OptimizerKind::Adam,
                momentum: 0.9,
                clip: 5.0,
                decay: 0.5,
            },
            holdout_pairs: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let items: Vec<f64> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values")))
}

fn list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Named starting points: `default`, `fast` and `large`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        match name {
            "default" => {}
            "fast" => {
                cfg.data.train_sequences = 8;
                cfg.data.eval_sequences = 6;
                cfg.data.length = 24;
                cfg.stage1.steps = 40;
                cfg.stage2.steps = 30;
                cfg.holdout_pairs = 40;
            }
            "large" => {
                let e = &mut cfg.net.encoder;
                e.patch = 16;
                e.width = 64;
                e.layers = 4;
                e.template_size = 128;
                e.search_size = 288;
                cfg.net.uld.head_channels = 32;
                cfg.data.frame_size = 256;
                cfg.data.min_size = 40.0;
                cfg.data.max_size = 64.0;
                cfg.data.speed = 4.0;
            }
            _ => return Err(Error::Config(format!("unknown preset `{name}` (default, fast, large)"))),
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.net.encoder;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "encoder.patch" => e.patch = parse(key, v)?,
            "encoder.width" => e.width = parse(key, v)?,
            "encoder.layers" => e.layers = parse(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "encoder.template_size" => e.template_size = parse(key, v)?,
            "encoder.search_size" => e.search_size = parse(key, v)?,
            "uld.upsample" => self.net.uld.upsample = parse(key, v)?,
            "uld.head_channels" => self.net.uld.head_channels = parse(key, v)?,
            "uld.sigma_floor" => self.net.uld.sigma_floor = parse(key, v)?,
            "pmn.top_k" => self.net.pmn.top_k = parse(key, v)?,
            "pmn.capacity" => self.net.pmn.capacity = parse(key, v)?,
            "pmn.threshold" => self.net.pmn.threshold = parse(key, v)?,
            "pmn.key_width" => self.net.pmn.key_width = parse(key, v)?,
            "pmn.hidden" => self.net.pmn.hidden = parse(key, v)?,
            "pmn.value_from_group" => self.net.pmn.value_from_group = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "kalman.process" => self.kalman.process = parse_list(key, v)?,
            "kalman.measurement" => self.kalman.measurement = parse_list(key, v)?,
            "kalman.initial_velocity_var" => self.kalman.initial_velocity_var = parse(key, v)?,
            "tracker.base_context" => self.base_context = parse(key, v)?,
            "tracker.template_context" => self.template_context = parse(key, v)?,
            "tracker.min_extent" => self.min_extent = parse(key, v)?,
            "data.frame_size" => d.frame_size = parse(key, v)?,
            "data.length" => d.length = parse(key, v)?,
            "data.train_sequences" => d.train_sequences = parse(key, v)?,
            "data.eval_sequences" => d.eval_sequences = parse(key, v)?,
            "data.min_size" => d.min_size = parse(key, v)?,
            "data.max_size" => d.max_size = parse(key, v)?,
            "data.speed" => d.speed = parse(key, v)?,
            "data.occlusion_fraction" => d.occlusion_fraction = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.label_noise" => d.label_noise = parse(key, v)?,
            "data.jitter" => d.jitter = parse(key, v)?,
            "data.distractor_rate" => d.distractor_rate = parse(key, v)?,
            "data.wander_rate" => d.wander_rate = parse(key, v)?,
            "stage2.holdout_pairs" => self.holdout_pairs = parse(key, v)?,
            _ => {
                let (stage, field) = match key.split_once('.') {
                    Some(("stage1", f)) => (&mut self.stage1, f),
                    Some(("stage2", f)) => (&mut self.stage2, f),
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                };
                match field {
                    "steps" => stage.steps = parse(key, v)?,
                    "lr" => stage.lr = parse(key, v)?,
                    "batch" => stage.batch = parse(key, v)?,
                    "optimizer" => stage.optimizer = v.parse()?,
                    "momentum" => stage.momentum = parse(key, v)?,
                    "clip" => stage.clip = parse(key, v)?,
                    "decay" => stage.decay = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.net.encoder;
        let d = &self.data;
        let out: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("encoder.patch", e.patch.to_string()),
            ("encoder.width", e.width.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.template_size", e.template_size.to_string()),
            ("encoder.search_size", e.search_size.to_string()),
            ("uld.upsample", self.net.uld.upsample.to_string()),
            ("uld.head_channels", self.net.uld.head_channels.to_string()),
            ("uld.sigma_floor", self.net.uld.sigma_floor.to_string()),
            ("pmn.top_k", self.net.pmn.top_k.to_string()),
            ("pmn.capacity", self.net.pmn.capacity.to_string()),
            ("pmn.threshold", self.net.pmn.threshold.to_string()),
            ("pmn.key_width", self.net.pmn.key_width.to_string()),
            ("pmn.hidden", self.net.pmn.hidden.to_string()),
            ("pmn.value_from_group", self.net.pmn.value_from_group.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.gamma", self.loss.gamma.to_string()),
            ("kalman.process", list(&self.kalman.process)),
            ("kalman.measurement", list(&self.kalman.measurement)),
            ("kalman.initial_velocity_var", self.kalman.initial_velocity_var.to_string()),
            ("tracker.base_context", self.base_context.to_string()),
            ("tracker.template_context", self.template_context.to_string()),
            ("tracker.min_extent", self.min_extent.to_string()),
            ("data.frame_size", d.frame_size.to_string()),
            ("data.length", d.length.to_string()),
            ("data.train_sequences", d.train_sequences.to_string()),
            ("data.eval_sequences", d.eval_sequences.to_string()),
            ("data.min_size", d.min_size.to_string()),
            ("data.max_size", d.max_size.to_string()),
            ("data.speed", d.speed.to_string()),
            ("data.occlusion_fraction", d.occlusion_fraction.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.label_noise", d.label_noise.to_string()),
            ("data.jitter", d.jitter.to_string()),
            ("data.distractor_rate", d.distractor_rate.to_string()),
            ("data.wander_rate", d.wander_rate.to_string()),
        ];
        let mut out: Vec<(String, String)> = out.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (prefix, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let fields = [
                ("steps", s.steps.to_string()),
                ("lr", s.lr.to_string()),
                ("batch", s.batch.to_string()),
                ("optimizer", s.optimizer.to_string()),
                ("momentum", s.momentum.to_string()),
                ("clip", s.clip.to_string()),
                ("decay", s.decay.to_string()),
            ];
            for (f, v) in fields {
                out.push((format!("{prefix}.{f}"), v));
            }
        }
        out.push(("stage2.holdout_pairs".into(), self.holdout_pairs.to_string()));
        out
    }

    /// Renders the configuration in the file format.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies every assignment in `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k.trim(), v)
    }

    /// Preset, then file, then overrides.
    pub fn load(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::preset(preset)?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.kalman.validate()?;
        self.tracker(Variant::FULL).validate()?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch == 0 || !(s.lr.is_finite() && s.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch and learning rate must be positive")));
            }
            if !(0.0..1.0).contains(&s.momentum) || !(s.clip >= 0.0) || !(s.decay > 0.0 && s.decay <= 1.0) {
                return Err(Error::Config(format!("{name}: momentum, clip or decay out of range")));
            }
        }
        let d = &self.data;
        if d.length < 2 || d.frame_size == 0 {
            return Err(Error::Config("data.length must be at least 2".into()));
        }
        if !(d.label_noise >= 0.0 && d.jitter >= 0.0) {
            return Err(Error::Config("label noise and jitter must be non-negative".into()));
        }
        for (name, rate) in [("distractor", d.distractor_rate), ("wander", d.wander_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} rate {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn tracker(&self, variant: Variant) -> TrackerConfig {
        TrackerConfig {
            template_size: self.net.encoder.template_size,
            search_size: self.net.encoder.search_size,
            base_context: self.base_context,
            template_context: self.template_context,
            min_extent: self.min_extent,
            threshold: self.net.pmn.threshold,
            capacity: self.net.pmn.capacity,
            kalman: self.kalman.clone(),
            variant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::preset("fast").unwrap();
        cfg.set("kalman.process", "1,2,3,4,5,6,7,8").unwrap();
        cfg.set("stage1.optimizer", "sgd").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("loss.delta", "1"), Err(Error::Config(_))));
        assert!(cfg.set("stage3.steps", "1").is_err());
        assert!(cfg.set("stage1.steps", "many").is_err());
        assert!(cfg.apply_text("seed 3").is_err());
        cfg.apply_text("# comment\n\nloss.alpha = 3 # trailing\n").unwrap();
        assert_eq!(cfg.loss.alpha, 3.0);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed = 5\npmn.threshold = 0.6\n").unwrap();
        let cfg = RunConfig::load("default", Some(&path), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.net.pmn.threshold, 0.6);
        assert!(RunConfig::load("default", None, &["pmn.threshold=2".into()]).is_err());
    }
}
