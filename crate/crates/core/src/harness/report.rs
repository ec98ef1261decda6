//! Tracking runs over synthetic sequences, per-frame CSV traces and JSON
//! summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use super::synth::{EventTag, SyntheticSequence};
use crate::error::{Error, Result};
use crate::runtime::{init, step, TrackerModel, Variant};

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub frame: usize,
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
    pub sigma_xtl: f64,
    pub sigma_ytl: f64,
    pub sigma_xbr: f64,
    pub sigma_ybr: f64,
    pub confidence: f64,
    pub accepted: bool,
    pub resampled: bool,
    pub event_tag: EventTag,
    pub iou_gt: f64,
}

impl FrameRow {
    pub fn mean_sigma(&self) -> f64 {
        (self.sigma_xtl + self.sigma_ytl + self.sigma_xbr + self.sigma_ybr) / 4.0
    }
}

/// Runs the tracker over `seq`, starting from the first ground-truth box.
/// The first row echoes that box with zero σ.
pub fn track_sequence(
    seq: &SyntheticSequence,
    cfg: &RunConfig,
    variant: Variant,
    model: &dyn TrackerModel,
) -> Result<Vec<FrameRow>> {
    let (first, gt0) = match (seq.frames.first(), seq.gt.first()) {
        (Some(f), Some(b)) => (f, b),
        _ => return Err(Error::Input("cannot track an empty sequence".into())),
    };
    let mut state = init(first, gt0, &cfg.tracker(variant), model)?;
    let mut rows = Vec::with_capacity(seq.len());
    rows.push(FrameRow {
        frame: 0,
        x_tl: gt0.x_tl,
        y_tl: gt0.y_tl,
        x_br: gt0.x_br,
        y_br: gt0.y_br,
        sigma_xtl: 0.0,
        sigma_ytl: 0.0,
        sigma_xbr: 0.0,
        sigma_ybr: 0.0,
        confidence: 1.0,
        accepted: true,
        resampled: false,
        event_tag: seq.events[0],
        iou_gt: 1.0,
    });
    for t in 1..seq.len() {
        let (next, r) = step(&state, &seq.frames[t], model)?;
        state = next;
        rows.push(FrameRow {
            frame: r.frame,
            x_tl: r.bbox.x_tl,
            y_tl: r.bbox.y_tl,
            x_br: r.bbox.x_br,
            y_br: r.bbox.y_br,
            sigma_xtl: r.sigma[0],
            sigma_ytl: r.sigma[1],
            sigma_xbr: r.sigma[2],
            sigma_ybr: r.sigma[3],
            confidence: r.confidence,
            accepted: r.accepted,
            resampled: r.resampled,
            event_tag: seq.events[t],
            iou_gt: r.bbox.iou(&seq.gt[t]),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackSummary {
    pub frames: usize,
    pub mean_iou: f64,
    /// Share of frames after the first that passed the gate.
    pub acceptance_rate: f64,
    /// Mean σ (frame pixels) per event tag over frames after the first.
    pub sigma_by_tag: BTreeMap<String, f64>,
}

/// Acceptance rate and per-tag mean σ over tracked frames.
fn tracked_stats(tracked: &[FrameRow]) -> (f64, BTreeMap<String, f64>) {
    let rate = if tracked.is_empty() {
        0.0
    } else {
        tracked.iter().filter(|r| r.accepted).count() as f64 / tracked.len() as f64
    };
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in tracked {
        let e = sums.entry(r.event_tag.to_string()).or_default();
        e.0 += r.mean_sigma();
        e.1 += 1;
    }
    (rate, sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect())
}

pub fn summarize(rows: &[FrameRow]) -> TrackSummary {
    let n = rows.len();
    let mean_iou = if n == 0 { 0.0 } else { rows.iter().map(|r| r.iou_gt).sum::<f64>() / n as f64 };
    let (acceptance_rate, sigma_by_tag) = tracked_stats(&rows[n.min(1)..]);
    TrackSummary {
        frames: n,
        mean_iou,
        acceptance_rate,
        sigma_by_tag,
    }
}

pub fn rows_to_csv(rows: &[FrameRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Evaluation(format!("CSV encoding failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Evaluation(format!("CSV encoding failed: {e}")))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Evaluation(format!("JSON encoding failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Aggregates for one variant of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub uld: bool,
    pub pmn: bool,
    /// Frame-weighted mean over sequences.
    pub mean_iou: f64,
    pub acceptance_rate: f64,
    pub sigma_by_tag: BTreeMap<String, f64>,
    pub sequences: Vec<SequenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceRow {
    pub seed: u64,
    pub frames: usize,
    pub mean_iou: f64,
    pub acceptance_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub variants: Vec<VariantRow>,
}

/// Tracks every sequence under each variant.
pub fn evaluate(
    corpus: &[SyntheticSequence],
    cfg: &RunConfig,
    variants: &[Variant],
    model: &dyn TrackerModel,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut sequences = Vec::with_capacity(corpus.len());
        let mut all_rows = Vec::new();
        for seq in corpus {
            let rows = track_sequence(seq, cfg, variant, model)?;
            let s = summarize(&rows);
            sequences.push(SequenceRow {
                seed: seq.seed,
                frames: s.frames,
                mean_iou: s.mean_iou,
                acceptance_rate: s.acceptance_rate,
            });
            all_rows.extend(rows.into_iter().skip(1));
        }
        let frames: usize = sequences.iter().map(|s| s.frames).sum();
        let mean_iou = sequences.iter().map(|s| s.mean_iou * s.frames as f64).sum::<f64>() / frames as f64;
        let pooled = tracked_stats(&all_rows);
        log::info!("{}: mean IoU {mean_iou:.4}, acceptance {:.3}", variant.label(), pooled.0);
        out.push(VariantRow {
            variant: variant.label().to_string(),
            uld: variant.uld,
            pmn: variant.pmn,
            mean_iou,
            acceptance_rate: pooled.0,
            sigma_by_tag: pooled.1,
            sequences,
        });
    }
    Ok(EvalReport {
        sequences: corpus.len(),
        variants: out,
    })
}
