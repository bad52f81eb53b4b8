use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use volseg::encoding::EncoderMode;
use volseg::features::{pca_rgb, FeatureMap};
use volseg::objective::LossWeights;
use volseg::scene::{
    encode_gray_png, encode_rgb_png, export_segmentation, load_annotations, load_checkpoint, load_scene,
    prepare_feature_targets, read_class_map, save_annotations, save_checkpoint, SceneDataset,
};
use volseg::trainer::hitl::{run_hitl, HitlConfig};
use volseg::trainer::metrics::{MetricsLog, MetricsRecord};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg::trainer::{evaluate_iou, evaluate_psnr, render_frame, RenderOptions, TrainConfig, Trainer};
use volseg_service::{serve, ServiceConfig, Session};

#[derive(Parser)]
#[command(name = "volseg", version, about = "Scribble-supervised segmentation with a semantic radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an analytic RGB-D scene with labels and features.
    Synth(SynthArgs),
    /// Train a field on a scene.
    Train(TrainArgs),
    /// Score segmentations: two label directories, or a checkpoint on a scene.
    Eval(EvalArgs),
    /// Simulate an annotator that labels misclassified pixels.
    Hitl(HitlArgs),
    /// Render color, depth, segmentation and feature views.
    Render(RenderArgs),
    /// Host a training session over HTTP.
    Serve(ServeArgs),
}

/// Settings file shared by all subcommands; every section is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    hitl: HitlConfig,
    service: ServiceConfig,
    synth: Option<SyntheticSceneSpec>,
}

#[derive(Args)]
struct Common {
    /// JSON settings file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<FileConfig> {
        let Some(path) = &self.config else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoder {
    Freq,
    Hashgrid,
    Hybrid,
}

impl From<Encoder> for EncoderMode {
    fn from(e: Encoder) -> Self {
        match e {
            Encoder::Freq => EncoderMode::Freq,
            Encoder::Hashgrid => EncoderMode::HashGrid,
            Encoder::Hybrid => EncoderMode::Hybrid,
        }
    }
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long, value_enum)]
    encoder: Option<Encoder>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_semantic: Option<f64>,
    #[arg(long)]
    lambda_feature: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.samples_per_ray {
            c.samples_per_ray = v;
        }
        if let Some(v) = self.encoder {
            c.set_encoder(v.into());
        }
        if let Some(v) = self.lambda_depth {
            c.loss_weights.depth = v;
        }
        if let Some(v) = self.lambda_semantic {
            c.loss_weights.semantic = v;
        }
        if let Some(v) = self.lambda_feature {
            c.loss_weights.feature = v;
        }
        if let Some(v) = self.log_every {
            c.log_every = v;
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Scene spec JSON; overrides the `synth` section of the config.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Skip synthetic feature maps.
    #[arg(long)]
    no_features: bool,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for checkpoint, metrics and resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Annotation strokes (JSONL).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of predicted class PNGs.
    #[arg(long, requires = "reference")]
    pred: Option<PathBuf>,
    /// Directory of reference class PNGs with matching file names.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Class count; defaults to the largest id seen plus one.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, conflicts_with = "pred", requires = "checkpoint")]
    scene: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct HitlArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "hitl")]
    out: PathBuf,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    pretrain: Option<u64>,
    #[arg(long)]
    clicks: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    /// Stop once the evaluation mIoU reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frame indices; all frames when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    /// Scene loaded at startup; clients may load another via the API.
    #[arg(long, env = "VOLSEG_SCENE")]
    scene: Option<PathBuf>,
    #[arg(long, env = "VOLSEG_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "VOLSEG_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    refresh_every: Option<u64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Hitl(a) => hitl(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let file = a.common.load()?;
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => file.synth.unwrap_or_else(SyntheticSceneSpec::standard),
    };
    if a.no_features {
        spec.features = None;
    }
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    generate_synthetic_scene(&spec, &a.out)?;
    println!("wrote {} views to {}", spec.train_views.count + spec.test_views.count, a.out.display());
    Ok(())
}

/// Loads a scene and fits `config` to it; disables the feature loss when the
/// scene has no feature maps.
fn prepare(scene: &Path, config: &mut TrainConfig) -> anyhow::Result<SceneDataset> {
    let mut dataset = load_scene(scene)?;
    config.field.num_classes = dataset.num_classes();
    if config.loss_weights.feature > 0.0 {
        prepare_feature_targets(&mut dataset, &config.autoencoder)?;
        if !dataset.has_targets() {
            log::warn!("scene has no feature maps; feature loss disabled");
            config.loss_weights = LossWeights {
                feature: 0.0,
                ..config.loss_weights
            };
        }
    }
    Ok(dataset)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = a.common.load()?.train;
    a.overrides.apply(&mut config);
    let dataset = prepare(&a.scene, &mut config)?;
    let annotations = match &a.annotations {
        Some(p) => load_annotations(p, dataset.classes.clone(), dataset.frame_sizes())?,
        None => dataset.empty_annotations(),
    };
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(config.clone(), &load_checkpoint(p)?)?,
        None => Trainer::new(config.clone())?,
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &config)?;
    let index = annotations.index();
    let test = dataset.test_frames();
    let options = RenderOptions::from_config(&config);
    let mut log = MetricsLog::default();
    let start = Instant::now();
    let steps = config.iterations.saturating_sub(trainer.iteration());
    trainer.train(&dataset, &index, steps, |t, losses| {
        let psnr = if test.is_empty() {
            None
        } else {
            Some(evaluate_psnr(t.field(), &dataset, &test, &options)?)
        };
        log::info!(
            "iteration {} loss {:.5} psnr {}",
            t.iteration(),
            losses.total,
            psnr.map_or("-".into(), |p| format!("{p:.2}"))
        );
        log.push(MetricsRecord {
            round: None,
            iteration: t.iteration(),
            labels: annotations.labeled_pixel_count(),
            per_class_iou: Vec::new(),
            miou: None,
            psnr,
            losses: *losses,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    })?;
    save_checkpoint(&a.out.join("checkpoint.vsck"), &trainer.checkpoint())?;
    log.write(&a.out.join("metrics"))?;
    println!("checkpoint: {}", a.out.join("checkpoint.vsck").display());
    Ok(())
}

/// The training config stored in the checkpoint, else `fallback` with the
/// checkpoint's field layout.
fn checkpoint_config(fallback: TrainConfig, ckpt: &volseg::scene::Checkpoint) -> TrainConfig {
    let mut config = serde_json::from_value(ckpt.train_config.clone()).unwrap_or(fallback);
    config.field = ckpt.field_config.clone();
    config
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut config = a.common.load()?.train;
    let (pairs, classes) = if let (Some(pred), Some(reference)) = (&a.pred, &a.reference) {
        let names = png_names(reference)?;
        anyhow::ensure!(!names.is_empty(), "no PNG files in {}", reference.display());
        let mut pairs = Vec::new();
        for n in &names {
            let (pw, ph, p) = read_class_map(&pred.join(n))?;
            let (rw, rh, r) = read_class_map(&reference.join(n))?;
            anyhow::ensure!((pw, ph) == (rw, rh), "{n}: prediction is {pw}x{ph}, reference is {rw}x{rh}");
            pairs.push((p, r));
        }
        let seen = pairs.iter().flat_map(|(p, r)| p.iter().chain(r)).copied().max().unwrap_or(0) as usize + 1;
        (pairs, a.classes.unwrap_or(seen))
    } else if let (Some(scene), Some(ckpt)) = (&a.scene, &a.checkpoint) {
        let ckpt = load_checkpoint(ckpt)?;
        config = checkpoint_config(config, &ckpt);
        let dataset = load_scene(scene)?;
        let trainer = Trainer::from_checkpoint(config.clone(), &ckpt)?;
        let options = RenderOptions::from_config(&config);
        let mut pairs = Vec::new();
        for f in dataset.test_frames() {
            let frame = &dataset.frames[f];
            let labels = frame
                .labels
                .clone()
                .ok_or_else(|| anyhow::anyhow!("frame {} has no reference labels", frame.id))?;
            let r = render_frame(trainer.field(), &frame.camera, dataset.near, dataset.far, &options)?;
            pairs.push((r.classes, labels));
        }
        (pairs, dataset.num_classes())
    } else {
        anyhow::bail!("eval needs --pred and --ref, or --scene and --checkpoint");
    };
    let refs: Vec<(&[u16], &[u16])> = pairs.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
    let report = evaluate_iou(&refs, classes)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn hitl(a: HitlArgs) -> anyhow::Result<()> {
    let file = a.common.load()?;
    let mut config = file.train;
    a.overrides.apply(&mut config);
    let mut h = file.hitl;
    h.rounds = a.rounds.unwrap_or(h.rounds);
    h.pretrain_iterations = a.pretrain.unwrap_or(h.pretrain_iterations);
    h.clicks_per_round = a.clicks.unwrap_or(h.clicks_per_round);
    h.steps_per_round = a.steps.unwrap_or(h.steps_per_round);
    h.stop_at = a.stop_at.or(h.stop_at);
    if let Some(seed) = a.overrides.seed {
        h.seed = seed;
    }
    let dataset = prepare(&a.scene, &mut config)?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut annotations = dataset.empty_annotations();
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &serde_json::json!({ "train": config, "hitl": h }))?;
    let outcome = run_hitl(&dataset, &mut trainer, &mut annotations, &h, |r| {
        log::info!("round {} labels {} miou {:.4}", r.round.unwrap_or(0), r.labels, r.miou.unwrap_or(0.0));
    })?;
    outcome.log.write(&a.out.join("metrics"))?;
    save_annotations(&a.out.join("annotations.jsonl"), &annotations)?;
    save_checkpoint(&a.out.join("checkpoint.vsck"), &trainer.checkpoint())?;
    println!(
        "{} rounds, final mIoU {:.4}{}",
        outcome.log.records.len().saturating_sub(1),
        outcome.log.records.last().and_then(|r| r.miou).unwrap_or(0.0),
        if outcome.success { ", no errors left" } else { "" }
    );
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let config = checkpoint_config(a.common.load()?.train, &ckpt);
    let dataset = load_scene(&a.scene)?;
    let trainer = Trainer::from_checkpoint(config.clone(), &ckpt)?;
    let options = RenderOptions::from_config(&config);
    let frames = a.frames.clone().unwrap_or_else(|| (0..dataset.frames.len()).collect());
    let mut segmentations = Vec::new();
    for dir in ["color", "depth", "features"] {
        std::fs::create_dir_all(a.out.join(dir))?;
    }
    for f in frames {
        let frame = dataset
            .frames
            .get(f)
            .ok_or_else(|| anyhow::anyhow!("frame {f} out of range"))?;
        let r = render_frame(trainer.field(), &frame.camera, dataset.near, dataset.far, &options)?;
        let name = format!("{}.png", frame.id);
        std::fs::write(a.out.join("color").join(&name), encode_rgb_png(r.width, r.height, &r.rgb))?;
        let depth: Vec<u8> = r
            .depth
            .iter()
            .map(|&d| (d as f64 / dataset.far * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        std::fs::write(a.out.join("depth").join(&name), encode_gray_png(r.width, r.height, &depth))?;
        let map = FeatureMap::new(r.height, r.width, r.feature_dim as u32, r.features.clone())?;
        std::fs::write(a.out.join("features").join(&name), encode_rgb_png(r.width, r.height, &pca_rgb(&map, 4096)))?;
        segmentations.push((frame.id.clone(), r.width, r.height, r.classes));
    }
    export_segmentation(&a.out.join("segmentation"), &segmentations, &dataset.classes)?;
    println!("rendered {} frames to {}", segmentations.len(), a.out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> anyhow::Result<()> {
    let file = a.common.load()?;
    let mut config = file.service;
    config.train = file.train;
    a.overrides.apply(&mut config.train);
    config.checkpoint = a.checkpoint.or(config.checkpoint);
    config.refresh_every = a.refresh_every.unwrap_or(config.refresh_every);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let session = Session::start(config);
        if let Some(scene) = a.scene {
            session.load_scene(scene).await.map_err(|e| anyhow::anyhow!("{e}"))?;
        }
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        serve(listener, session, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
