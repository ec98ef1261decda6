//! Synthetic data, weight files, evaluation bookkeeping and the two training
//! stages at toy scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unctrack::harness::report::{evaluate, rows_to_csv, summarize, track_sequence};
use unctrack::harness::store::{decode_params, encode_params};
use unctrack::harness::synth::{gen_synthetic, EventSpan, EventTag, SequenceSpec};
use unctrack::harness::train::{init_params, sample_pair, train_corpus, train_stage1, train_stage2};
use unctrack::harness::RunConfig;
use unctrack::model::is_pmn_param;
use unctrack::numerics::Array;
use unctrack::pmn::{Prototype, PrototypeBank};
use unctrack::runtime::{Assessment, Localization, SearchContext, TrackerModel, Variant};
use unctrack::uld::{BoundingBox, CornerPrediction};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::preset("fast").unwrap();
    cfg.net.encoder.width = 8;
    cfg.net.encoder.layers = 1;
    cfg.net.uld.head_channels = 4;
    cfg.net.pmn.key_width = 4;
    cfg.net.pmn.hidden = 8;
    cfg.data.train_sequences = 3;
    cfg.data.eval_sequences = 2;
    cfg.data.length = 12;
    cfg.stage1.steps = 3;
    cfg.stage1.batch = 2;
    cfg.stage2.steps = 3;
    cfg.stage2.batch = 2;
    cfg.holdout_pairs = 16;
    cfg
}

#[test]
fn scripted_events_land_on_their_frames() {
    let spec = SequenceSpec {
        length: 20,
        events: vec![
            EventSpan {
                tag: EventTag::Occluded,
                start: 4,
                end: 7,
            },
            EventSpan {
                tag: EventTag::Deformed,
                start: 12,
                end: 14,
            },
        ],
        ..SequenceSpec::default()
    };
    let seq = gen_synthetic(&spec, 9).unwrap();
    assert_eq!(seq.len(), 20);
    for (t, tag) in seq.events.iter().enumerate() {
        let want = match t {
            4..=7 => EventTag::Occluded,
            12..=14 => EventTag::Deformed,
            _ => EventTag::Clean,
        };
        assert_eq!(*tag, want, "frame {t}");
    }
    assert_eq!(seq.frames[0].shape(), [3, 64, 64]);
    assert_eq!(gen_synthetic(&spec, 9).unwrap().frames, seq.frames);
    assert_ne!(gen_synthetic(&spec, 10).unwrap().frames, seq.frames);
}

#[test]
fn weights_round_trip_byte_identically() {
    let params = init_params(&tiny()).unwrap();
    let bytes = encode_params(&params).unwrap();
    let back = decode_params(&bytes).unwrap();
    assert_eq!(back, params);
    assert_eq!(encode_params(&back).unwrap(), bytes);
}

#[test]
fn pair_sampler_is_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10_000;
    let positives = (0..n).filter(|_| sample_pair(5, 8, &mut rng).positive).count();
    let share = positives as f64 / n as f64;
    assert!((share - 0.5).abs() <= 0.02, "positive share {share}");
}

#[test]
fn stage_two_leaves_stage_one_weights_bit_identical() {
    let cfg = tiny();
    let data = train_corpus(&cfg).unwrap();
    let s1 = train_stage1(&cfg, &data).unwrap();
    assert!(s1.diverged.is_none());
    let init = init_params(&cfg).unwrap();
    for (name, a) in s1.params.iter() {
        if is_pmn_param(name) {
            assert_eq!(a, init.get(name).unwrap(), "{name} moved in stage 1");
        }
    }
    let s2 = train_stage2(&cfg, &s1.params, &data).unwrap();
    let acc = s2.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let mut moved = 0;
    for (name, a) in s2.params.iter() {
        let before = s1.params.get(name).unwrap();
        if is_pmn_param(name) {
            moved += usize::from(a != before);
        } else {
            let same = a.data().iter().zip(before.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{name} changed in stage 2");
        }
    }
    assert!(moved > 0);
}

/// Predicts a fixed patch box, so IoU against ground truth is known in
/// closed form for static targets.
struct Fixed;

impl TrackerModel for Fixed {
    fn localize(&self, _t: &Array, _s: &Array, ctx: &SearchContext) -> unctrack::Result<Localization> {
        let _ = ctx;
        let pred = CornerPrediction::from_normalized(
            &[0.25, 0.25, 0.75, 0.75],
            &[0.01; 4],
            Array::full(&[2, 2, 2], 0.25),
            Array::full(&[4, 2, 2], 0.01),
            64.0,
        );
        Ok(Localization { pred, features: None })
    }

    fn assess(&self, _l: &Localization, _b: &PrototypeBank, frame: usize) -> unctrack::Result<Assessment> {
        Ok(Assessment {
            confidence: 0.9,
            prototype: Prototype::new(Array::vector(&[1.0]), frame, 0.9)?,
        })
    }

    fn bootstrap(&self, _t: &Array, _s: &Array, _b: &BoundingBox) -> unctrack::Result<Prototype> {
        Prototype::new(Array::vector(&[1.0]), 0, 1.0)
    }
}

#[test]
fn evaluation_aggregates_are_frame_weighted() {
    let cfg = tiny();
    let mk = |length, seed| {
        let spec = SequenceSpec {
            length,
            speed: 0.0,
            ..SequenceSpec::default()
        };
        gen_synthetic(&spec, seed).unwrap()
    };
    let corpus = vec![mk(5, 1), mk(11, 2)];
    let report = evaluate(&corpus, &cfg, &[Variant::FULL], &Fixed).unwrap();
    let row = &report.variants[0];
    let mut iou_sum = 0.0;
    let mut frames = 0;
    for (seq, srow) in corpus.iter().zip(&row.sequences) {
        let rows = track_sequence(seq, &cfg, Variant::FULL, &Fixed).unwrap();
        assert_eq!(rows.len(), seq.len());
        let mean = rows.iter().map(|r| r.iou_gt).sum::<f64>() / rows.len() as f64;
        assert!((srow.mean_iou - mean).abs() < 1e-12);
        assert_eq!(srow.frames, seq.len());
        assert_eq!(summarize(&rows).mean_iou, srow.mean_iou);
        iou_sum += mean * seq.len() as f64;
        frames += seq.len();
    }
    assert!((row.mean_iou - iou_sum / frames as f64).abs() < 1e-12);
    assert_eq!(row.acceptance_rate, 1.0);
    assert!(evaluate(&[], &cfg, &[Variant::FULL], &Fixed).is_err());
}

#[test]
fn csv_has_one_row_per_frame_and_fixed_columns() {
    let cfg = tiny();
    let seq = gen_synthetic(&SequenceSpec { length: 7, ..SequenceSpec::default() }, 4).unwrap();
    let rows = track_sequence(&seq, &cfg, Variant::FULL, &Fixed).unwrap();
    let text = String::from_utf8(rows_to_csv(&rows).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(
        lines[0],
        "frame,x_tl,y_tl,x_br,y_br,sigma_xtl,sigma_ytl,sigma_xbr,sigma_ybr,confidence,accepted,resampled,event_tag,iou_gt"
    );
    assert!(lines[1].starts_with("0,"));
    assert!(lines[1].ends_with(",true,false,clean,1.0"));
}
