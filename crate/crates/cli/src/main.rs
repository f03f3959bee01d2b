//! `talkhead`: synthetic data, two-stage training, inference, evaluation,
//! ablation and wireframe rendering from the command line.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing
//! inputs, invalid configuration) and 1 for failures while running.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use talkhead::audio::{fbank, read_wav, FbankConfig};
use talkhead::data::{
    generate_synthetic, load_dataset, read_landmarks, write_dataset, write_landmarks,
    SyntheticSpec, Utterance, FBANK_PER_VISUAL,
};
use talkhead::geometry::LandmarkFrame;
use talkhead::metrics::track_metrics;
use talkhead::render::{rasterize, write_pgm, RenderSpec};
use talkhead::trainer::{
    component_trend, config_split, memory_trend, parse_metric_log, parse_pairs, regression_trend,
    render_report, run_ablation, train, AblationGrid, Checkpoint, InferenceRule, MetricRecord,
    Predictor, Stage, TrainConfig, TrainOptions, TrainOutcome, METRIC_LOG_HEADER,
};

/// Environment variable holding the log filter.
const LOG_ENV: &str = "TALKHEAD_LOG";

/// A problem with how the tool was invoked rather than with running it.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Configuration errors from the core library count as usage errors.
fn config_err(e: talkhead::Error) -> anyhow::Error {
    match e {
        talkhead::Error::Config(m) => usage(m),
        other => other.into(),
    }
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(
    name = "talkhead",
    version,
    about = "Speech-driven facial landmark generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (wav files, landmark tracks, manifest).
    SynthData(SynthArgs),
    /// Train the speech feature extractor.
    TrainSfe(TrainCmd),
    /// Train the mixture density network on frozen speech features.
    TrainMdn(TrainMdnCmd),
    /// Predict a landmark track from audio and one reference frame.
    Infer(InferArgs),
    /// Compare a generated track with a reference track.
    Eval(EvalArgs),
    /// Train every cell of a components x memory x regression grid.
    Ablate(AblateArgs),
    /// Rasterize a landmark track into numbered PGM images.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticSpec::default().n_utterances)]
    utterances: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_speakers)]
    speakers: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_phones)]
    phones: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().frames_per_utterance)]
    frames: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().modes_per_phone)]
    modes_per_phone: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().mode_spread)]
    mode_spread: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().cue_reliability)]
    cue_reliability: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().head_motion)]
    head_motion: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().identity_jitter)]
    identity_jitter: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().audio_noise)]
    audio_noise: f64,
}

fn defaults() -> TrainConfig {
    TrainConfig::new(Stage::Sfe, 0)
}

/// Training hyperparameters. Each flag overrides the same key in
/// `--config`; unset flags fall back to the file, then to the default.
#[derive(Args, Debug)]
struct TrainFlags {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; required here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = defaults().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = defaults().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = defaults().lr)]
    lr: f64,
    #[arg(long, default_value_t = defaults().val_fraction)]
    val_fraction: f64,
    /// Memory variant: wo, w or cs.
    #[arg(long, default_value_t = defaults().memory.to_string())]
    memory: String,
    #[arg(long, default_value_t = defaults().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = defaults().feature_dim)]
    feature_dim: usize,
    #[arg(long, default_value_t = defaults().content_slots)]
    content_slots: usize,
    #[arg(long, default_value_t = defaults().identity_slots)]
    identity_slots: usize,
    #[arg(long, default_value_t = defaults().addresser_hidden)]
    addresser_hidden: usize,
    #[arg(long, default_value_t = defaults().target_hidden)]
    target_hidden: usize,
    /// Mixture components.
    #[arg(long, default_value_t = defaults().components)]
    components: usize,
    #[arg(long, default_value_t = defaults().mdn_hidden)]
    mdn_hidden: usize,
    #[arg(long, default_value_t = defaults().context_frames)]
    context_frames: usize,
    /// Landmark regression target: f_a or f_tt.
    #[arg(long, default_value_t = defaults().regression.to_string())]
    regression: String,
    /// Update the feature extractor during the MDN stage.
    #[arg(long, action = ArgAction::Set, default_value_t = defaults().finetune_sfe)]
    finetune_sfe: bool,
    /// Feed pooled filterbank frames to the MDN instead of learned features.
    #[arg(long, action = ArgAction::Set, default_value_t = defaults().sfe_bypass)]
    sfe_bypass: bool,
}

#[derive(Args, Debug)]
struct RunFlags {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metric log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; its config must match.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs, as if interrupted.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct TrainMdnCmd {
    #[command(flatten)]
    run: RunFlags,
    /// Feature-extractor checkpoint (not needed with `--sfe-bypass true`).
    #[arg(long)]
    sfe: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// MDN checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input audio (16 kHz mono PCM).
    #[arg(long)]
    wav: PathBuf,
    /// Landmark file whose first frame is the reference.
    #[arg(long)]
    reference: PathBuf,
    /// Output landmark track.
    #[arg(long)]
    out: PathBuf,
    /// Frames to generate; 0 derives the count from the audio length.
    #[arg(long, default_value_t = 0)]
    frames: usize,
    /// Mixture summary: max or mixture.
    #[arg(long, default_value_t = InferenceRule::default().to_string())]
    rule: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Generated landmark track.
    #[arg(long)]
    generated: PathBuf,
    /// Reference landmark track.
    #[arg(long)]
    reference: PathBuf,
    /// Write machine-readable records here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tag records with this checkpoint's config hash.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also compute wireframe SSIM and PSNR.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    wireframe: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated component counts.
    #[arg(long, default_value = "1,2,3,5,8")]
    grid_components: String,
    /// Comma-separated memory variants.
    #[arg(long, default_value = "wo,w,cs")]
    grid_memory: String,
    /// Comma-separated regression targets.
    #[arg(long, default_value = "f_a,f_tt")]
    grid_regression: String,
    /// Feature-extractor epochs; 0 uses `--epochs`.
    #[arg(long, default_value_t = 0)]
    sfe_epochs: usize,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Landmark track to draw.
    #[arg(long)]
    landmarks: PathBuf,
    /// Output directory; frames are written as frame_00000.pgm onward.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = RenderSpec::default().width)]
    width: usize,
    #[arg(long, default_value_t = RenderSpec::default().height)]
    height: usize,
    /// Fraction of each side left blank.
    #[arg(long, default_value_t = RenderSpec::default().margin)]
    margin: f64,
}

/// Resolves the config for `stage`: defaults, then `--config`, then flags
/// given explicitly on the command line.
fn resolve_config(stage: Stage, flags: &TrainFlags, m: &ArgMatches) -> Result<TrainConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &flags.config {
        existing(path, "config file")?;
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let pairs = parse_pairs(&text).map_err(config_err)?;
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "stage") {
            if v != &stage.to_string() {
                return Err(usage(format!(
                    "config file is for stage `{v}`, this command trains `{stage}`"
                )));
            }
        }
        layers.push(pairs);
    }
    let mut cli = Vec::new();
    for key in TrainConfig::KEYS.iter().filter(|k| **k != "stage") {
        if m.value_source(key) != Some(ValueSource::CommandLine) {
            continue;
        }
        if let Some(raw) = m.get_raw(key).and_then(|mut v| v.next()) {
            cli.push((key.to_string(), raw.to_string_lossy().into_owned()));
        }
    }
    layers.push(cli);
    let mut cfg = TrainConfig::resolve(stage, &layers).map_err(config_err)?;
    cfg.stage = stage;
    Ok(cfg)
}

fn load(manifest: &Path) -> Result<Vec<Utterance>> {
    existing(manifest, "manifest")?;
    let report = load_dataset(manifest)?;
    for e in &report.errors {
        log::warn!("skipping {e}");
    }
    if report.utterances.is_empty() {
        bail!("no usable utterances in {}", manifest.display());
    }
    log::info!("loaded {} utterances", report.utterances.len());
    Ok(report.utterances)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_speakers: a.speakers,
        n_utterances: a.utterances,
        modes_per_phone: a.modes_per_phone,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        n_phones: a.phones,
        frames_per_utterance: a.frames,
        head_motion: a.head_motion,
        mode_spread: a.mode_spread,
        cue_reliability: a.cue_reliability,
        identity_jitter: a.identity_jitter,
        audio_noise: a.audio_noise,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let utts = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &utts)?;
    println!("wrote {} utterances to {}", utts.len(), manifest.display());
    Ok(())
}

/// Writes `best.ckpt` (when this run improved), `last.ckpt`, `metrics.tsv`,
/// `config.txt` and `split.tsv` under `out`. A resumed run appends to an
/// existing metric log.
fn save_run(
    out: &Path,
    cfg: &TrainConfig,
    data: &[Utterance],
    outcome: &TrainOutcome,
    resumed: bool,
) -> Result<()> {
    create_dir(out)?;
    if let Some(best) = &outcome.best {
        best.save(&out.join("best.ckpt"))?;
    }
    outcome.last.save(&out.join("last.ckpt"))?;
    let log_path = out.join("metrics.tsv");
    let mut records: Vec<MetricRecord> = Vec::new();
    if resumed && log_path.exists() {
        let text = std::fs::read_to_string(&log_path)
            .with_context(|| format!("reading {}", log_path.display()))?;
        records = parse_metric_log(&text)?;
    }
    records.extend(outcome.log.iter().cloned());
    let mut text = format!("{METRIC_LOG_HEADER}\n");
    for r in &records {
        let _ = writeln!(text, "{r}");
    }
    write_file(&log_path, &text)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let split = config_split(cfg, data);
    let mut s = String::from("# id\tsplit\n");
    for (name, idx) in [("train", &split.train), ("val", &split.val)] {
        for &i in idx.iter() {
            let _ = writeln!(s, "{}\t{name}", data[i].id);
        }
    }
    write_file(&out.join("split.tsv"), &s)?;
    println!(
        "config {} best epoch {} selection metric {:.6}; wrote {}",
        &cfg.hash()[..16],
        outcome.best_epoch,
        outcome.best_metric,
        out.display()
    );
    Ok(())
}

fn run_training(
    stage: Stage,
    run: &RunFlags,
    flags: &TrainFlags,
    m: &ArgMatches,
    sfe: Option<&PathBuf>,
) -> Result<()> {
    let cfg = resolve_config(stage, flags, m)?;
    let mut opts = TrainOptions {
        stop_after: run.stop_after,
        ..TrainOptions::default()
    };
    if let Some(p) = &run.resume {
        existing(p, "resume checkpoint")?;
        opts.resume = Some(Checkpoint::load(p)?);
    }
    if stage == Stage::Mdn && !cfg.sfe_bypass {
        let p = sfe
            .ok_or_else(|| usage("train-mdn needs --sfe <checkpoint> unless --sfe-bypass true"))?;
        existing(p, "feature-extractor checkpoint")?;
        opts.sfe = Some(Checkpoint::load(p)?);
    }
    let data = load(&run.data)?;
    let outcome = train(&cfg, &data, &opts).map_err(config_err)?;
    save_run(&run.out, &cfg, &data, &outcome, run.resume.is_some())
}

fn infer(a: &InferArgs) -> Result<()> {
    for (p, what) in [
        (&a.checkpoint, "checkpoint"),
        (&a.wav, "audio file"),
        (&a.reference, "reference track"),
    ] {
        existing(p, what)?;
    }
    let rule: InferenceRule = a.rule.parse().map_err(config_err)?;
    let predictor = Predictor::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let wave = read_wav(&a.wav)?;
    let fb = fbank(&wave, &FbankConfig::default())?;
    let frames = if a.frames > 0 {
        a.frames
    } else {
        fb.len().div_ceil(FBANK_PER_VISUAL)
    };
    let reference = read_landmarks(&a.reference)?;
    let first = reference.first().ok_or_else(|| {
        usage(format!(
            "reference track `{}` has no frames",
            a.reference.display()
        ))
    })?;
    let track = predictor.predict(&fb, frames, first, rule)?;
    write_landmarks(&a.out, &track)?;
    println!("wrote {} frames to {}", track.len(), a.out.display());
    Ok(())
}

/// Mean wireframe SSIM and PSNR over frame pairs.
fn wireframe_scores(gen: &[LandmarkFrame], reference: &[LandmarkFrame]) -> Result<(f64, f64)> {
    let spec = RenderSpec::default();
    let (mut s, mut p) = (0.0, 0.0);
    for (g, r) in gen.iter().zip(reference) {
        let (gi, ri) = (rasterize(g, &spec)?, rasterize(r, &spec)?);
        s += talkhead::metrics::ssim(&gi, &ri)?;
        p += talkhead::metrics::psnr(&gi, &ri)?;
    }
    let n = gen.len() as f64;
    Ok((s / n, p / n))
}

fn eval(a: &EvalArgs) -> Result<()> {
    existing(&a.generated, "generated track")?;
    existing(&a.reference, "reference track")?;
    let gen = read_landmarks(&a.generated)?;
    let reference = read_landmarks(&a.reference)?;
    let hash = match &a.checkpoint {
        Some(p) => {
            existing(p, "checkpoint")?;
            Checkpoint::load(p)?.config()?.hash()
        }
        None => "-".to_string(),
    };
    let m = track_metrics(&gen, &reference).map_err(|e| usage(e.to_string()))?;
    let mut rows = vec![("lmd", m.lmd), ("rd", m.rd)];
    if a.wireframe {
        let (s, p) = wireframe_scores(&gen, &reference)?;
        rows.push(("wireframe-ssim", s));
        rows.push(("wireframe-psnr", p));
    }
    println!("{:<16} {:>14}", "metric", "value");
    for (k, v) in &rows {
        println!("{k:<16} {v:>14.6}");
    }
    if let Some(out) = &a.out {
        let mut text = String::from("# metric\tvalue\tconfig_hash\n");
        for (k, v) in &rows {
            let _ = writeln!(text, "{k}\t{v}\t{hash}");
        }
        write_file(out, &text)?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("--{flag}: cannot parse `{x}`")))
        })
        .collect()
}

fn ablate(a: &AblateArgs, m: &ArgMatches) -> Result<()> {
    let mdn = resolve_config(Stage::Mdn, &a.train, m)?;
    let mut sfe = TrainConfig {
        stage: Stage::Sfe,
        ..mdn.clone()
    };
    if a.sfe_epochs > 0 {
        sfe.epochs = a.sfe_epochs;
    }
    sfe.validate().map_err(config_err)?;
    let grid = AblationGrid {
        components: parse_list("grid-components", &a.grid_components)?,
        memory: parse_list("grid-memory", &a.grid_memory)?,
        regression: parse_list("grid-regression", &a.grid_regression)?,
    };
    let data = load(&a.data)?;
    let rows = run_ablation(&sfe, &mdn, &data, &grid);
    let mut checks = component_trend(&rows);
    checks.extend(memory_trend(&rows));
    checks.extend(regression_trend(&rows));
    let report = render_report(&sfe, &mdn, &rows, &checks);
    create_dir(&a.out)?;
    write_file(&a.out.join("ablation.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    existing(&a.landmarks, "landmark track")?;
    let spec = RenderSpec {
        width: a.width,
        height: a.height,
        margin: a.margin,
        ..RenderSpec::default()
    };
    let frames = read_landmarks(&a.landmarks)?;
    create_dir(&a.out)?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(
            &a.out.join(format!("frame_{i:05}.pgm")),
            &rasterize(f, &spec)?,
        )?;
    }
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand is required");
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainSfe(c) => run_training(Stage::Sfe, &c.run, &c.train, sub, None),
        Command::TrainMdn(c) => run_training(Stage::Mdn, &c.run, &c.train, sub, c.sfe.as_ref()),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, sub),
        Command::Render(a) => render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
