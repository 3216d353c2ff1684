//! Command-line front end. Exit codes: 0 success, 2 usage, 3 data/config, 4 numerical.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::codec::{reconstruction_loss, train_codec, FeatureCodec};
use crate::dataset::{Frame, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckConfig, ParamClass};
use crate::guidance::{adaptive_lambda, texture_density};
use crate::image::{Image, Mask};
use crate::metrics::{iou, masked_metrics, miou, psnr, ssim};
use crate::model::Camera;
use crate::raster::RenderConfig;
use crate::real::Precision;
use crate::semantics::{
    edit, prompt_latent, relevance_map, render_checkpoint, segment, select_gaussians, topk_deformation, DeformNorm,
    EditAction, QueryContext, RecolorTarget,
};
use crate::synth::{generate_scene, SceneSpec};
use crate::train::{TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "splat4d", version, long_version = LONG_VERSION, arg_required_else_help = true)]
#[command(about = "Semantic dynamic Gaussian splatting on synthetic scenes")]
pub struct Cli {
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Accumulate in 64-bit floats when rendering.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("CARGO_PKG_NAME"),
    ", checkpoint format v1)"
);

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene to a dataset directory.
    GenerateScene(GenerateArgs),
    /// Train the feature autoencoder on a scene codebook.
    TrainCodec(TrainCodecArgs),
    /// Two-stage training.
    Train(TrainArgs),
    /// Render a checkpoint from a dataset view.
    Render(RenderArgs),
    /// Relevance map for a class prompt.
    Query(QueryArgs),
    /// Thresholded relevance mask (IoU against ground truth when available).
    Segment(SegmentArgs),
    /// Remove or recolor semantically selected Gaussians.
    Edit(EditArgs),
    /// Render the Gaussians with the largest deformation.
    TopkDeform(TopkArgs),
    /// Metrics report as JSON.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient class.
    CheckGradients(GradArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Bundled scene name.
    #[arg(long, conflicts_with = "spec")]
    pub name: Option<String>,
    /// Scene specification as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Replace the background with flat gray.
    #[arg(long)]
    pub flat_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainCodecArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained codec (trained inline otherwise).
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Config override `key=value`; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Write a checkpoint every N iterations as well as at the end.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = 0.0)]
    pub time: f64,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ActionArg {
    Remove,
    Recolor,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub prompt: String,
    /// Cosine-similarity threshold for selecting Gaussians.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long, value_enum)]
    pub action: ActionArg,
    /// Target image for recoloring, seen from `--view` at `--time`.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Edited checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional render of the edited checkpoint.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TopkArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub k: usize,
    /// Rank by position offset only.
    #[arg(long)]
    pub position_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Only compute the texture density of this scene directory.
    #[arg(long, value_name = "SCENE_DIR", conflicts_with_all = ["checkpoint", "scene"])]
    pub texture_density: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Prompt for segmentation mIoU against the dynamic mask.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long, default_value_t = 20)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 16)]
    pub size: u32,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scale one class's analytic gradient by 1.01 to show the check failing.
    #[arg(long)]
    pub corrupt: Option<String>,
}

/// Parse `argv` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 3;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn render_cfg(cli: &Cli) -> RenderConfig {
    RenderConfig::default().with_precision(if cli.f64 { Precision::F64 } else { Precision::F32 })
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenerateScene(a) => generate(cli, a),
        Command::TrainCodec(a) => cmd_train_codec(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Query(a) => cmd_query(cli, a),
        Command::Segment(a) => cmd_segment(cli, a),
        Command::Edit(a) => cmd_edit(cli, a),
        Command::TopkDeform(a) => cmd_topk(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::CheckGradients(a) => cmd_gradcheck(cli, a),
    }
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<i32> {
    let mut spec = match (&a.name, &a.spec) {
        (Some(n), None) => SceneSpec::bundled(n)?,
        (None, Some(p)) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::format(p, e.to_string()))?
        }
        _ => return Err(Error::Config("give exactly one of --name or --spec".into())),
    };
    if a.flat_background {
        spec.background = crate::synth::Background::Flat([0.5, 0.5, 0.5]);
    }
    let ds = generate_scene(&spec, cli.seed.unwrap_or(0), &a.out)?;
    eprintln!(
        "wrote {} frames ({} classes) to {}",
        ds.frames.len(),
        ds.classes.len(),
        a.out.display()
    );
    Ok(0)
}

/// Resolved config: defaults, then the file, then `--set`, then global flags.
pub fn resolve_config(path: Option<&Path>, sets: &[String], seed: Option<u64>, f64: bool) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut table: toml::Table = toml::from_str(&base.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        let k = k.trim();
        if !table.contains_key(k) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.to_string(), parsed);
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if f64 {
        table.insert("precision".into(), toml::Value::String("f64".into()));
    }
    TrainConfig::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
}

fn cmd_train_codec(cli: &Cli, a: &TrainCodecArgs) -> Result<i32> {
    let ds = SceneDataset::load(&a.scene)?;
    let cfg = resolve_config(a.config.as_deref(), &[], cli.seed, false)?;
    let ccfg = cfg.codec(ds.feature_dim());
    eprintln!("codec config: {}", serde_json::to_string(&ccfg).expect("config json"));
    let (codec, loss) = train_codec(&ds.codebook, &ccfg)?;
    let check = reconstruction_loss(&codec, &ds.codebook, ccfg.loss)?;
    let nn = nearest_neighbor_roundtrip(&codec, &ds.codebook)?;
    codec.save(&a.out)?;
    println!("{}", json!({"final_loss": loss, "reconstruction_loss": check, "roundtrip_correct": nn, "rows": ds.codebook.len()}));
    Ok(0)
}

/// Number of codebook rows that decode∘encode maps back to themselves under nearest neighbor.
pub fn nearest_neighbor_roundtrip(codec: &FeatureCodec, rows: &[Vec<f64>]) -> Result<usize> {
    let mut ok = 0;
    for (i, r) in rows.iter().enumerate() {
        let y = codec.decode(&codec.encode(r)?)?;
        let d = |q: &Vec<f64>| q.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..rows.len()).min_by(|&a, &b| d(&rows[a]).total_cmp(&d(&rows[b])).then(a.cmp(&b)));
        ok += usize::from(best == Some(i));
    }
    Ok(ok)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let cfg = resolve_config(a.config.as_deref(), &a.set, cli.seed, cli.f64)?;
    let ds = SceneDataset::load(&a.scene)?;
    let codec = a.codec.as_deref().map(FeatureCodec::load).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let resolved = cfg.to_toml();
    eprintln!("resolved config:\n{resolved}");
    std::fs::write(a.out.join("config.toml"), &resolved).map_err(|e| Error::io(a.out.join("config.toml"), e))?;
    let mut trainer = Trainer::new(&ds, cfg, codec)?;
    trainer.codec.save(&a.out.join("codec.json"))?;
    let log_path = a.out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let ck_path = a.out.join("checkpoint.bin");
    trainer.run(|t, rec| {
        serde_json::to_writer(&mut log, rec).expect("log record");
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if let Some(p) = rec.psnr {
            eprintln!("iter {:>6} {:?} loss {:.5} gaussians {} held-out PSNR {p:.2}", rec.iteration, rec.stage, rec.total, rec.gaussians);
        }
        if a.checkpoint_every > 0 && rec.iteration % a.checkpoint_every == 0 {
            t.checkpoint().save(&ck_path)?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint().save(&ck_path)?;
    let psnr = trainer.evaluate()?;
    println!(
        "{}",
        json!({"iterations": trainer.state.iteration, "gaussians": trainer.cloud.len(), "held_out_psnr": psnr, "counters": trainer.state.counters})
    );
    Ok(0)
}

/// Camera of `view` at time `t`, plus the dataset frame when one matches exactly.
pub fn view_camera(ds: &SceneDataset, view: usize, t: f64) -> Result<(Camera, Option<&Frame>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("time {t} outside [0, 1]")));
    }
    let frames: Vec<&Frame> = ds.frames.iter().filter(|f| f.view == view).collect();
    let nearest = frames
        .iter()
        .min_by(|a, b| (a.time() - t).abs().total_cmp(&(b.time() - t).abs()))
        .ok_or_else(|| Error::Config(format!("scene has no view {view}")))?;
    let exact = ((nearest.time() - t).abs() < 1e-9).then_some(*nearest);
    Ok((nearest.camera.clone().with_time(t), exact))
}

fn load_view(a: &ViewArgs) -> Result<(Checkpoint, SceneDataset)> {
    Ok((Checkpoint::load(&a.checkpoint)?, SceneDataset::load(&a.scene)?))
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<i32> {
    let (ck, ds) = load_view(&a.view)?;
    let (cam, frame) = view_camera(&ds, a.view.view, a.view.time)?;
    let out = render_checkpoint(&ck, &cam, a.view.time, &render_cfg(cli))?;
    out.color.save_png(&a.out)?;
    if let Some(f) = frame {
        println!("{}", json!({"psnr": psnr(&out.color, &f.image)?}));
    }
    Ok(0)
}

fn gray_to_rgb(img: &Image) -> Image {
    let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    Image::from_data(img.width, img.height, 3, data).expect("gray image")
}

fn cmd_query(cli: &Cli, a: &QueryArgs) -> Result<i32> {
    let (ck, ds) = load_view(&a.view)?;
    let ctx = QueryContext::from_dataset(&ds, &a.prompt, 0.6)?;
    let (cam, _) = view_camera(&ds, a.view.view, a.view.time)?;
    let map = relevance_map(&ck, &cam, a.view.time, &ctx, &render_cfg(cli))?;
    gray_to_rgb(&map.to_image()).save_png(&a.out)?;
    let (lo, hi) = map.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!("{}", json!({"min": lo, "max": hi}));
    Ok(0)
}

fn cmd_segment(cli: &Cli, a: &SegmentArgs) -> Result<i32> {
    let (ck, ds) = load_view(&a.view)?;
    let ctx = QueryContext::from_dataset(&ds, &a.prompt, a.threshold)?;
    let (cam, frame) = view_camera(&ds, a.view.view, a.view.time)?;
    let map = relevance_map(&ck, &cam, a.view.time, &ctx, &render_cfg(cli))?;
    let mask = segment(&map, a.threshold);
    mask.save_png(&a.out)?;
    let score = match frame {
        Some(f) => Some(iou(&mask, &f.mask)?),
        None => None,
    };
    println!("{}", json!({"pixels": mask.count(), "iou": score}));
    Ok(0)
}

fn cmd_edit(cli: &Cli, a: &EditArgs) -> Result<i32> {
    let (ck, ds) = load_view(&a.view)?;
    let id = ds.class_id(&a.prompt)?;
    let latent = prompt_latent(&ck, &ds.codebook[id])?;
    let sel = select_gaussians(&ck.cloud, &latent, a.threshold)?;
    let (cam, _) = view_camera(&ds, a.view.view, a.view.time)?;
    let rc = render_cfg(cli);
    let action = match a.action {
        ActionArg::Remove => EditAction::Remove,
        ActionArg::Recolor => {
            let path = a
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("--action recolor needs --target".into()))?;
            let image = Image::load_png_rgb(path)?;
            EditAction::Recolor {
                targets: vec![RecolorTarget { camera: cam.clone(), image }],
                iters: a.iters,
                lr: a.lr,
            }
        }
    };
    let edited = edit(&ck, &sel, &action, &rc)?;
    edited.save(&a.out)?;
    if let Some(p) = &a.render {
        render_checkpoint(&edited, &cam, a.view.time, &rc)?.color.save_png(p)?;
    }
    println!("{}", json!({"selected": sel.len(), "gaussians_before": ck.cloud.len(), "gaussians_after": edited.cloud.len()}));
    Ok(0)
}

fn cmd_topk(cli: &Cli, a: &TopkArgs) -> Result<i32> {
    let (ck, ds) = load_view(&a.view)?;
    let (cam, _) = view_camera(&ds, a.view.view, a.view.time)?;
    let which = if a.position_only { DeformNorm::PositionOnly } else { DeformNorm::Full };
    let top = topk_deformation(&ck, &cam, a.view.time, a.k, which, &render_cfg(cli))?;
    top.image.save_png(&a.out)?;
    println!("{}", json!({"k": top.indices.len(), "max_norm": top.norms.first(), "min_norm": top.norms.last()}));
    Ok(0)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let report = if let Some(dir) = &a.texture_density {
        let ds = SceneDataset::load(dir)?;
        let images: Vec<Image> = ds.frames.iter().map(|f| f.image.clone()).collect();
        let g = TrainConfig::default().guidance();
        let d = texture_density(&images, &g.sobel())?;
        json!({"scene": ds.name, "texture_density": d, "adaptive_lambda": adaptive_lambda(d, &g)})
    } else {
        let (Some(ckp), Some(scene)) = (&a.checkpoint, &a.scene) else {
            return Err(Error::Config("eval needs --checkpoint and --scene, or --texture-density".into()));
        };
        let ck = Checkpoint::load(ckp)?;
        let ds = SceneDataset::load(scene)?;
        evaluate(&ck, &ds, a.prompt.as_deref(), a.threshold, &render_cfg(cli))?
    };
    let text = serde_json::to_string_pretty(&report).expect("report json");
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => println!("{text}"),
    }
    Ok(0)
}

/// Held-out metrics of a checkpoint: global and foreground PSNR/SSIM, optional mIoU.
pub fn evaluate(
    ck: &Checkpoint,
    ds: &SceneDataset,
    prompt: Option<&str>,
    threshold: f64,
    rc: &RenderConfig,
) -> Result<serde_json::Value> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyList);
    }
    let ctx = prompt.map(|p| QueryContext::from_dataset(ds, p, threshold)).transpose()?;
    let (mut ps, mut ss, mut fps, mut fss) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut pred, mut gt): (Vec<Mask>, Vec<Mask>) = (Vec::new(), Vec::new());
    for f in &test {
        let out = render_checkpoint(ck, &f.camera, f.time(), rc)?;
        ps.push(psnr(&out.color, &f.image)?);
        ss.push(ssim(&out.color, &f.image)?);
        if f.mask.count() > 0 {
            if let Ok(m) = masked_metrics(&out.color, &f.image, &f.mask) {
                fps.push(m.psnr);
                fss.push(m.ssim);
            }
        }
        if let Some(ctx) = &ctx {
            let map = relevance_map(ck, &f.camera, f.time(), ctx, rc)?;
            pred.push(segment(&map, threshold));
            gt.push(f.mask.clone());
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let m_iou = if ctx.is_some() { Some(miou(&pred, &gt)?) } else { None };
    Ok(json!({
        "scene": ds.name,
        "frames": test.len(),
        "psnr": mean(&ps),
        "psnr_min": ps.iter().cloned().fold(f64::INFINITY, f64::min),
        "ssim": mean(&ss),
        "foreground_psnr": mean(&fps),
        "foreground_ssim": mean(&fss),
        "miou": m_iou,
    }))
}

fn cmd_gradcheck(cli: &Cli, a: &GradArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        scenes: a.scenes,
        gaussians: a.gaussians,
        size: a.size,
        tolerance: a.tolerance,
        seed: cli.seed.unwrap_or(0),
        ..GradCheckConfig::default()
    };
    let target = match &a.corrupt {
        Some(name) => Some(ParamClass::parse(name).ok_or_else(|| Error::Config(format!("unknown gradient class `{name}`")))?),
        None => None,
    };
    let hook = move |c: ParamClass, g: &mut [f64]| {
        if Some(c) == target {
            g.iter_mut().for_each(|v| *v *= 1.01);
        }
    };
    let report = check_gradients(&cfg, Some(&hook))?;
    println!("{:<18} {:>8} {:>14}  result", "class", "checked", "max rel err");
    for c in &report.classes {
        println!(
            "{:<18} {:>8} {:>14.3e}  {}",
            c.class.name(),
            c.checked,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(if report.passed { 0 } else { 4 })
}
