use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use refertrack::checkpoint::{self, Checkpoint, CheckpointError};
use refertrack::config::{Config, CONFIG_ENV};
use refertrack::domain::{TrajectorySet, VideoClip};
use refertrack::encoders::FreezeSelector;
use refertrack::evalkit::{assemble_tracks, evaluate_scenes, score_all, write_referred_tracks, EvalConfig, VariantReport};
use refertrack::ingest::{parse_expressions, parse_tracker_file, words, Vocab};
use refertrack::model::{ModelConfig, Scorer, TemporalMode};
use refertrack::synthdata::{generate_scene, load_scenes, read_frames, scenes_vocab, write_scene, SceneConfig};
use refertrack::trainer::{train, TrainOptions, FINAL_CHECKPOINT};

#[derive(Parser)]
#[command(name = "refertrack", version, about = "Score natural-language expressions against tracker trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
#[allow(clippy::enum_variant_names)]
enum Ablation {
    /// Mean-pool sampled target features over time instead of temporal integration.
    NoTi,
    /// Replace the pairwise decoder with pooled cosine similarity.
    NoPcd,
    /// Drop language-conditioned reference points.
    NoConditioning,
}

impl Ablation {
    fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        match self {
            Ablation::NoTi => cfg.temporal = TemporalMode::MeanPool,
            Ablation::NoPcd => cfg.scorer = Scorer::Cosine,
            Ablation::NoConditioning => cfg.ref_points = 0,
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Cosine,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    SynthData {
        /// Output directory; one `scene_NNNN` folder per scene plus `manifest.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Seed of the first scene; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Objects per scene.
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Frames per scene.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Expressions per scene.
        #[arg(long, default_value_t = 12)]
        expressions: usize,
        /// Configuration used to check the segment length (defaults to $REFERTRACK_CONFIG or configs/default.toml).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a directory of scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `synth-data`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, `config.toml` and `train_log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Encoders to exclude from optimisation: visual, text, both or none (overrides the config).
        #[arg(long)]
        freeze: Option<FreezeSelector>,
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overwrite a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `synth-data`.
        #[arg(long)]
        data: PathBuf,
        /// Path of the JSON report.
        #[arg(long)]
        report: PathBuf,
        /// Also evaluate a baseline model and report it alongside.
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Checkpoint of the baseline model (required with --baseline).
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        /// Variant the checkpoint was trained as.
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Model and eval settings (defaults to $REFERTRACK_CONFIG or configs/default.toml).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default configuration file.
    DefaultConfig,
    /// Score tracker output against an expression file and write referred tracks.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PNG frames, read in file-name order.
        #[arg(long)]
        frames: PathBuf,
        /// Tracker output, `frame,id,x,y,w,h,conf,...` with 1-based frames.
        #[arg(long)]
        tracks: PathBuf,
        /// JSON expressions file.
        #[arg(long)]
        expressions: PathBuf,
        /// Output directory; one `expr_NNNN.txt` tracker file per expression.
        #[arg(long)]
        out: PathBuf,
        /// Model and eval settings (defaults to $REFERTRACK_CONFIG or configs/default.toml).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

/// Create `dir`, refusing a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty (use --force to write into it)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Explicit config, else the environment/default path when it exists, else defaults.
fn optional_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => {
            let p = Config::default_path();
            if p.exists() {
                Ok(Config::load(&p)?)
            } else {
                if std::env::var_os(CONFIG_ENV).is_some() {
                    bail!("{CONFIG_ENV} points to missing file {}", p.display());
                }
                Ok(Config::default())
            }
        }
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    dir: String,
    seed: u64,
    objects: usize,
    frames: usize,
    expressions: usize,
    referring_expressions: usize,
}

#[derive(Serialize)]
struct Manifest {
    scenes: Vec<ManifestEntry>,
    vocabulary: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn synth_data(
    out: &Path,
    scenes: usize,
    seed: u64,
    objects: usize,
    frames: usize,
    expressions: usize,
    config: Option<&Path>,
    force: bool,
) -> Result<()> {
    let cfg = optional_config(config)?;
    if frames < cfg.train.p {
        log::warn!("--frames {frames} is shorter than the configured segment length p={}", cfg.train.p);
    }
    prepare_out_dir(out, force)?;
    let vocab = refertrack::synthdata::grammar_vocab();
    let mut entries = Vec::with_capacity(scenes);
    let mut generated = Vec::with_capacity(scenes);
    for i in 0..scenes as u64 {
        let sc = SceneConfig { n_objects: objects, n_frames: frames, n_expressions: expressions, seed: seed + i, ..Default::default() };
        let scene = generate_scene(&sc, &vocab, cfg.train.max_tokens)?;
        let dir = out.join(&scene.clip.video_id);
        write_scene(&scene, &dir)?;
        let referring: BTreeSet<u32> = scene.relation.records.iter().map(|r| r.expr_id).collect();
        entries.push(ManifestEntry {
            dir: scene.clip.video_id.clone(),
            seed: sc.seed,
            objects: scene.tracks.trajectories.len(),
            frames,
            expressions: scene.expressions.len(),
            referring_expressions: referring.len(),
        });
        generated.push(scene);
    }
    let manifest = Manifest { scenes: entries, vocabulary: scenes_vocab(&generated).words().to_vec() };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let exprs: usize = manifest.scenes.iter().map(|e| e.expressions).sum();
    let referring: usize = manifest.scenes.iter().map(|e| e.referring_expressions).sum();
    println!(
        "wrote {} scenes to {} (seeds {}..{}): {} expressions, {} referring, vocabulary of {} words",
        scenes,
        out.display(),
        seed,
        seed + scenes as u64,
        exprs,
        referring,
        manifest.vocabulary.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: &Path,
    data: &Path,
    out: &Path,
    freeze: Option<FreezeSelector>,
    ablate: Option<Ablation>,
    seed: Option<u64>,
    epochs: Option<usize>,
    force: bool,
) -> Result<()> {
    let mut cfg = Config::load(config)?;
    if let Some(f) = freeze {
        cfg.train.freeze = f;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if ablate == Some(Ablation::NoConditioning) {
        cfg.train.ref_points = 0;
    }
    cfg.validate()?;
    let probe = refertrack::synthdata::grammar_vocab();
    let scenes = load_scenes(data, &probe, cfg.train.max_tokens).with_context(|| format!("loading scenes from {}", data.display()))?;
    if scenes.is_empty() {
        bail!("no scenes found under {}", data.display());
    }
    let vocab = scenes_vocab(&scenes);
    let scenes = load_scenes(data, &vocab, cfg.train.max_tokens)?;
    let mut model_cfg = cfg.model_config(vocab.size());
    if let Some(a) = ablate {
        model_cfg = a.apply(model_cfg);
    }
    prepare_out_dir(out, force)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let (model, mut params) = refertrack::model::Model::new(model_cfg, cfg.train.seed)?;
    log::info!("training on {} scenes, {} parameter values", scenes.len(), params.numel(false));
    let report = train(
        &scenes,
        &model,
        &mut params,
        &vocab,
        &cfg.train,
        &cfg.augment,
        &cfg.objective,
        &TrainOptions { out_dir: Some(out.to_path_buf()), max_steps: None },
    )?;
    if report.frozen_tensors > 0 {
        log::info!("frozen parameter tensors: {}", report.frozen_tensors);
    }
    let last = report.log.last();
    println!(
        "trained {} steps; final loss {:.5}, accuracy {:.4}; frozen tensors {}; checkpoint {}",
        report.log.len(),
        last.map_or(f64::NAN, |r| r.total),
        last.map_or(f64::NAN, |r| r.accuracy),
        report.frozen_tensors,
        out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn variant_name(cfg: &ModelConfig) -> &'static str {
    match (cfg.scorer, cfg.temporal, cfg.ref_points) {
        (Scorer::Cosine, _, _) => "no-pcd",
        (_, TemporalMode::MeanPool, _) => "no-ti",
        (_, _, 0) => "no-conditioning",
        _ => "full",
    }
}

/// Load a checkpoint and confirm it matches the requested ablation and configuration.
fn load_checked(path: &Path, ablate: Option<Ablation>, config: Option<&Config>) -> Result<Checkpoint> {
    let ck = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(cfg) = config {
        if cfg.model.channels != ck.header.channels as usize {
            return Err(CheckpointError::Incompatible(format!(
                "checkpoint has C={}, configuration has C={}",
                ck.header.channels, cfg.model.channels
            ))
            .into());
        }
    }
    if let Some(a) = ablate {
        if a.apply(ck.model.config.clone()) != ck.model.config {
            return Err(CheckpointError::Incompatible(format!(
                "checkpoint {} was trained as variant '{}'; train with --ablate {} to evaluate that ablation",
                path.display(),
                variant_name(&ck.model.config),
                serde_json::to_value(a)?.as_str().unwrap_or_default()
            ))
            .into());
        }
    }
    Ok(ck)
}

fn check_vocab(vocab: &Vocab, texts: impl IntoIterator<Item = String>) -> Result<()> {
    let unknown: BTreeSet<String> = texts.into_iter().flat_map(|t| words(&t)).filter(|w| vocab.id(w) == refertrack::ingest::UNK_ID).collect();
    if !unknown.is_empty() {
        return Err(CheckpointError::Incompatible(format!(
            "vocabulary hash {:016x} does not cover words: {}",
            vocab.hash(),
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    variant: &'static str,
    model: &'a ModelConfig,
    eval: &'a EvalConfig,
}

#[derive(Serialize)]
struct BaselineSection<'a> {
    kind: &'static str,
    checkpoint: String,
    config: ConfigEcho<'a>,
    report: VariantReport,
}

#[derive(Serialize)]
struct Report<'a> {
    checkpoint: String,
    data: String,
    config: ConfigEcho<'a>,
    report: VariantReport,
    baseline: Option<BaselineSection<'a>>,
}

fn summary(name: &str, r: &VariantReport) {
    let auc = r.pairs.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    let f1 = r.macro_pair_f1.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    println!(
        "{name}: HOTA {:.4} DetA {:.4} AssA {:.4} | pairs {} accuracy {:.4} F1 {:.4} AUC {auc} macro-F1 {f1}",
        r.macro_hota, r.macro_deta, r.macro_assa, r.pairs.count, r.pairs.accuracy, r.pairs.f1
    );
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    data: &Path,
    report: &Path,
    baseline: Option<Baseline>,
    baseline_checkpoint: Option<&Path>,
    ablate: Option<Ablation>,
    config: Option<&Path>,
) -> Result<()> {
    let explicit = config.map(Config::load).transpose()?;
    let cfg = match &explicit {
        Some(c) => c.clone(),
        None => optional_config(None)?,
    };
    let ck = load_checked(checkpoint, ablate, explicit.as_ref())?;
    let scenes = load_scenes(data, &ck.vocab, ck.model.config.max_tokens)?;
    check_vocab(&ck.vocab, scenes.iter().flat_map(|s| s.records.iter().map(|r| r.text.clone())))?;
    let main = evaluate_scenes(&ck.model, &ck.params, &scenes, &cfg.eval)?;
    summary(variant_name(&ck.model.config), &main);

    let base_ck = match baseline {
        Some(Baseline::Cosine) => {
            let path = baseline_checkpoint.context("--baseline cosine needs --baseline-checkpoint")?;
            let b = load_checked(path, Some(Ablation::NoPcd), explicit.as_ref())?;
            check_vocab(&b.vocab, scenes.iter().flat_map(|s| s.records.iter().map(|r| r.text.clone())))?;
            Some((path, b))
        }
        None => None,
    };
    let base_report = match &base_ck {
        Some((_, b)) => {
            let scenes = load_scenes(data, &b.vocab, b.model.config.max_tokens)?;
            let r = evaluate_scenes(&b.model, &b.params, &scenes, &cfg.eval)?;
            summary("cosine baseline", &r);
            Some(r)
        }
        None => None,
    };
    let out = Report {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        config: ConfigEcho { variant: variant_name(&ck.model.config), model: &ck.model.config, eval: &cfg.eval },
        report: main,
        baseline: base_ck.as_ref().zip(base_report).map(|((path, b), report)| BaselineSection {
            kind: "cosine",
            checkpoint: path.display().to_string(),
            config: ConfigEcho { variant: variant_name(&b.model.config), model: &b.model.config, eval: &cfg.eval },
            report,
        }),
    };
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(report, serde_json::to_string_pretty(&out)?)?;
    println!("report written to {}", report.display());
    Ok(())
}

/// Resize frames to `size` (h, w) when they differ and return the scale applied to x and y.
fn fit_frames(frames: Vec<Vec<u8>>, h: usize, w: usize, size: (usize, usize)) -> Result<(Vec<Vec<u8>>, f64, f64)> {
    if (h, w) == size {
        return Ok((frames, 1.0, 1.0));
    }
    let resized = frames
        .into_iter()
        .map(|f| {
            let img = image::RgbImage::from_raw(w as u32, h as u32, f).context("frame buffer size")?;
            Ok(image::imageops::resize(&img, size.1 as u32, size.0 as u32, image::imageops::FilterType::Triangle).into_raw())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((resized, size.1 as f64 / w as f64, size.0 as f64 / h as f64))
}

fn scale_tracks(set: &TrajectorySet, sx: f64, sy: f64) -> TrajectorySet {
    let mut out = set.clone();
    for t in &mut out.trajectories {
        for b in t.boxes.values_mut() {
            b.x0 *= sx;
            b.w *= sx;
            b.y0 *= sy;
            b.h *= sy;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    checkpoint: &Path,
    frames_dir: &Path,
    tracks: &Path,
    expressions: &Path,
    out: &Path,
    config: Option<&Path>,
    force: bool,
) -> Result<()> {
    let cfg = optional_config(config)?;
    let ck = checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (frames, h, w) = read_frames(frames_dir)?;
    if frames.is_empty() {
        bail!("no PNG frames found in {}", frames_dir.display());
    }
    let (source_tracks, warnings) = parse_tracker_file(tracks, (h, w))?;
    if warnings.dropped_boxes + warnings.duplicates > 0 {
        log::warn!("tracker file: {} boxes dropped, {} duplicates resolved", warnings.dropped_boxes, warnings.duplicates);
    }
    if let Some(last) = source_tracks.trajectories.iter().filter_map(|t| t.last_frame()).max() {
        if last as usize >= frames.len() {
            bail!("tracker file references frame {} but only {} frames were found", last + 1, frames.len());
        }
    }
    let (exprs, _, _) = parse_expressions(expressions, &ck.vocab, ck.model.config.max_tokens)?;
    check_vocab(&ck.vocab, exprs.iter().map(|e| e.text.clone()))?;
    prepare_out_dir(out, force)?;

    let size = ck.model.config.image_size;
    let (frames, sx, sy) = fit_frames(frames, h, w, size)?;
    let scaled = scale_tracks(&source_tracks, sx, sy);
    let clip = VideoClip { video_id: source_tracks.video_id.clone(), height: size.0, width: size.1, frames };
    let scores = score_all(&ck.model, &ck.params, &clip, &scaled, &exprs, cfg.eval.window_stride)?;
    let referred = assemble_tracks(
        &scores,
        &source_tracks,
        exprs.iter().map(|e| e.expr_id),
        ck.model.config.p,
        cfg.eval.threshold,
        cfg.eval.aggregation,
    );
    let written = write_referred_tracks(out, &referred)?;
    let boxes: usize = referred.values().flat_map(|s| s.trajectories.iter().map(|t| t.boxes.len())).sum();
    println!("scored {} pairs; wrote {} files with {} referred boxes to {}", scores.len(), written.len(), boxes, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, scenes, seed, objects, frames, expressions, config, force } => {
            synth_data(&out, scenes, seed, objects, frames, expressions, config.as_deref(), force)
        }
        Command::Train { config, data, out, freeze, ablate, seed, epochs, force } => {
            train_cmd(&config, &data, &out, freeze, ablate, seed, epochs, force)
        }
        Command::Eval { checkpoint, data, report, baseline, baseline_checkpoint, ablate, config } => eval_cmd(
            &checkpoint,
            &data,
            &report,
            baseline,
            baseline_checkpoint.as_deref(),
            ablate,
            config.as_deref(),
        ),
        Command::DefaultConfig => {
            print!("{}", Config::default().to_toml());
            Ok(())
        }
        Command::Infer { checkpoint, frames, tracks, expressions, out, config, force } => {
            infer_cmd(&checkpoint, &frames, &tracks, &expressions, &out, config.as_deref(), force)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
