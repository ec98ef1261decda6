use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use unctrack::harness::gradsuite::gradient_suite;
use unctrack::harness::report::{evaluate, rows_to_csv, summarize, to_json, track_sequence, write_file};
use unctrack::harness::synth::{gen_synthetic, load_sequence, save_sequence, EventSpan, EventTag, Motion, SequenceSpec};
use unctrack::harness::train::{eval_corpus, train_corpus, train_stage1, train_stage2, TrainOutcome};
use unctrack::harness::{load_params, save_params, RunConfig};
use unctrack::runtime::{UncTrackModel, Variant};
use unctrack::{Error, Result};

/// Uncertainty-aware single-object tracking on synthetic video.
#[derive(Parser)]
#[command(name = "unctrack", version)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting preset: default, fast or large.
    #[arg(long, default_value = "default", global = true)]
    preset: String,
    /// Config file of `key = value` lines applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage1.steps=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoUld,
    NoPmn,
    Neither,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::FULL,
            VariantArg::NoUld => Variant { uld: false, pmn: true },
            VariantArg::NoPmn => Variant { uld: true, pmn: false },
            VariantArg::Neither => Variant { uld: false, pmn: false },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Linear,
    Bounce,
    Wander,
}

#[derive(Subcommand)]
enum Command {
    /// Render one synthetic sequence to a file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame count; defaults to `data.length`.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, value_enum, default_value = "bounce")]
        motion: MotionArg,
        #[arg(long)]
        distractor: bool,
        /// Occluded frame span `START-END` (inclusive); repeatable.
        #[arg(long, value_name = "START-END")]
        occlude: Vec<String>,
        /// Deformed frame span; repeatable.
        #[arg(long, value_name = "START-END")]
        deform: Vec<String>,
        /// Out-of-view frame span; repeatable.
        #[arg(long, value_name = "START-END")]
        out_of_view: Vec<String>,
    },
    /// Train the encoder and decoder on the synthetic training corpus.
    TrainStage1 {
        /// Output weights file.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of per-step losses.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the prototype network with the stage-1 weights frozen.
    TrainStage2 {
        /// Stage-1 weights.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track one sequence and write the per-frame trace and a summary.
    Track {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Evaluate the four-variant ablation grid on the evaluation corpus.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate only these variants; defaults to all four.
        #[arg(long, value_enum)]
        variant: Vec<VariantArg>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_span(tag: EventTag, s: &str) -> Result<EventSpan> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::Input(format!("span `{s}` is not START-END")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Input(format!("span `{s}` has a bad bound `{v}`")))
    };
    Ok(EventSpan {
        tag,
        start: parse(a)?,
        end: parse(b)?,
    })
}

fn losses_csv(out: &TrainOutcome) -> Vec<u8> {
    let mut s = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s.into_bytes()
}

/// Saves the outcome; divergence still writes the last finite weights.
fn finish_training(out: &TrainOutcome, path: &Path, log: Option<&Path>) -> Result<()> {
    save_params(path, &out.params)?;
    if let Some(log) = log {
        write_file(log, &losses_csv(out))?;
    }
    if let Some((step, loss)) = out.diverged {
        return Err(Error::Divergence { step, loss });
    }
    info!("probe loss {} -> {}", out.probe_initial, out.probe_final);
    println!("probe_loss_initial {}", out.probe_initial);
    println!("probe_loss_final {}", out.probe_final);
    if let Some(acc) = out.accuracy {
        println!("holdout_accuracy {acc}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.config;
    let cfg = RunConfig::load(&c.preset, c.config.as_deref(), &c.overrides)?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            length,
            motion,
            distractor,
            occlude,
            deform,
            out_of_view,
        } => {
            let mut events = Vec::new();
            for (tag, spans) in [
                (EventTag::Occluded, &occlude),
                (EventTag::Deformed, &deform),
                (EventTag::OutOfView, &out_of_view),
            ] {
                for s in spans {
                    events.push(parse_span(tag, s)?);
                }
            }
            let d = &cfg.data;
            let spec = SequenceSpec {
                length: length.unwrap_or(d.length),
                frame_size: d.frame_size,
                min_size: d.min_size,
                max_size: d.max_size,
                speed: d.speed,
                motion: match motion {
                    MotionArg::Linear => Motion::Linear { bounce: false },
                    MotionArg::Bounce => Motion::Linear { bounce: true },
                    MotionArg::Wander => Motion::Wander,
                },
                distractor,
                events,
                occlusion_fraction: d.occlusion_fraction,
                noise: d.noise,
                ..SequenceSpec::default()
            };
            let seq = gen_synthetic(&spec, seed)?;
            save_sequence(&out, &seq)?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::TrainStage1 { out, log } => {
            let data = train_corpus(&cfg)?;
            let outcome = train_stage1(&cfg, &data)?;
            finish_training(&outcome, &out, log.as_deref())?;
        }
        Command::TrainStage2 { weights, out, log } => {
            let params = load_params(&weights)?;
            let data = train_corpus(&cfg)?;
            let outcome = train_stage2(&cfg, &params, &data)?;
            finish_training(&outcome, &out, log.as_deref())?;
        }
        Command::Track {
            weights,
            sequence,
            csv,
            summary,
            variant,
        } => {
            let params = load_params(&weights)?;
            let model = UncTrackModel::new(cfg.net.clone(), &params)?;
            let seq = load_sequence(&sequence)?;
            let rows = track_sequence(&seq, &cfg, variant.into(), &model)?;
            write_file(&csv, &rows_to_csv(&rows)?)?;
            let s = summarize(&rows);
            write_file(&summary, &to_json(&s)?)?;
            println!("mean_iou {} acceptance_rate {}", s.mean_iou, s.acceptance_rate);
        }
        Command::Eval { weights, out, variant } => {
            let params = load_params(&weights)?;
            let model = UncTrackModel::new(cfg.net.clone(), &params)?;
            let corpus = eval_corpus(&cfg)?;
            let variants: Vec<Variant> = if variant.is_empty() {
                Variant::grid().to_vec()
            } else {
                variant.into_iter().map(Variant::from).collect()
            };
            let report = evaluate(&corpus, &cfg, &variants, &model)?;
            write_file(&out, &to_json(&report)?)?;
            for row in &report.variants {
                println!("{} mean_iou {} acceptance_rate {}", row.variant, row.mean_iou, row.acceptance_rate);
            }
        }
        Command::Gradcheck { points, seed, out } => {
            let results = gradient_suite(seed, points)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:28} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if let Some(path) = out {
                write_file(&path, &to_json(&results)?)?;
            }
            if failed > 0 {
                return Err(Error::NumericalState(format!("{failed} gradient checks exceeded tolerance")));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
