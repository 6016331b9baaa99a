//! Command-line front end: `gen-data`, `train`, `eval`, `infer` and `viz`.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unreadable or
//! invalid config), 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{generate_synth, read_ppm, write_pgm, DatasetIndex};
use crate::decoders::DecoderKind;
use crate::eval::{
    argmax_map, compute_miou, default_stride, evaluate, multi_scale_logits, per_class_csv, Averaging, MultiScaleConfig,
    Sample, SIZE_MULTIPLE,
};
use crate::model::Setr;
use crate::tensor::{read_sttn, write_sttn, SttnPayload, Tensor};
use crate::training::{channel_stats, train_loop};
use crate::viz::{
    attention_rollout, capture, point_attention_map, pos_embed_similarity, render_feature, rollout_point_map,
    FeatureRef, Reduction,
};

#[derive(Debug, Parser)]
#[command(name = "seq2seg", version, about = "Transformer semantic segmentation on a small autodiff engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Report mIoU of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a label map for one image.
    Infer(InferArgs),
    /// Render attention, rollout, position-similarity and feature images.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config file; only `synth.*` keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training images.
    #[arg(long)]
    images: Option<usize>,
    /// Validation images.
    #[arg(long)]
    val: Option<usize>,
    /// Height and width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    shapes_min: Option<usize>,
    #[arg(long)]
    shapes_max: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Metrics CSV path; standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    decoder: Option<DecoderKind>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct InferenceArgs {
    /// Comma-separated scale factors.
    #[arg(long, default_value = "1.0", value_delimiter = ',')]
    scales: Vec<f32>,
    /// Also average horizontally flipped inputs.
    #[arg(long)]
    flip: bool,
    /// Sliding-window size; defaults to the training crop.
    #[arg(long)]
    window: Option<usize>,
    /// Window stride; defaults to two thirds of the window.
    #[arg(long)]
    stride: Option<usize>,
    /// Average softmax probabilities instead of logits.
    #[arg(long)]
    probabilities: bool,
}

impl InferenceArgs {
    fn config(&self, model: &Setr) -> MultiScaleConfig {
        let crop = model.config.grid.0.max(model.config.grid.1) * model.config.patch;
        let window = self.window.unwrap_or(crop);
        MultiScaleConfig {
            scales: self.scales.clone(),
            flip: self.flip,
            window,
            stride: self.stride.unwrap_or_else(|| default_stride(window)),
            averaging: if self.probabilities { Averaging::Probabilities } else { Averaging::Logits },
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    inference: InferenceArgs,
    #[arg(long, default_value_t = crate::training::IGNORE_INDEX)]
    ignore_index: u16,
    /// Also write the overall metrics CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the per-class CSV here.
    #[arg(long)]
    per_class: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// P6 image, or an `STTN` float tensor `[H, W, 3]` of 8-bit-scale values.
    #[arg(long)]
    input: PathBuf,
    /// Predicted classes: binary PGM, or `STTN` uint16 above 256 classes.
    #[arg(long)]
    out: PathBuf,
    /// Optional `STTN` dump of the `[H, W, K]` logits.
    #[arg(long)]
    logits: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to run; required for everything except `--pos-sim`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory receiving the PGM files.
    #[arg(long)]
    out: PathBuf,
    /// Encoder layer (1-based) of the point attention map.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Query patch as `row,col` in the patch grid.
    #[arg(long, value_parser = parse_point)]
    point: Option<(usize, usize)>,
    /// Emit the attention rollout map of the query point.
    #[arg(long)]
    rollout: bool,
    /// Emit the position-embedding similarity tiles.
    #[arg(long)]
    pos_sim: bool,
    /// Feature map to render, `zN` (encoder) or `uN` (decoder); repeatable.
    #[arg(long)]
    feature: Vec<FeatureRef>,
    #[arg(long, default_value = "pca1")]
    reduction: Reduction,
    /// Nearest-neighbour enlargement of patch-grid images.
    #[arg(long, default_value_t = 16)]
    zoom: usize,
}

fn parse_point(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Self::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Viz(a) => viz(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut spec = load_config(a.config.as_deref())?.synth;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.images {
        spec.train = v;
    }
    if let Some(v) = a.val {
        spec.val = v;
    }
    if let Some(v) = a.size {
        spec.height = v;
        spec.width = v;
    }
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.shapes_min {
        spec.shapes.0 = v;
    }
    if let Some(v) = a.shapes_max {
        spec.shapes.1 = v;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    generate_synth(&spec, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} train and {} val images to {}", spec.train, spec.val, a.out.display());
    Ok(())
}

fn load_split(root: &Path, split: &str, mean: [f32; 3], std: [f32; 3]) -> anyhow::Result<Vec<Sample>> {
    let index =
        DatasetIndex::open(root, split).with_context(|| format!("opening split `{split}` of {}", root.display()))?;
    (0..index.len()).map(|i| Ok(index.load_pair(i, mean, std)?)).collect()
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::Usage(format!("--set `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(v) = a.iters {
        cfg.train.total_iters = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.decoder {
        cfg.model.decoder = v;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = a.data.ok_or_else(|| Failure::Usage("--data is required".into()))?;

    let index = DatasetIndex::open(&data, "train").with_context(|| format!("opening {}", data.display()))?;
    let raw = index.load_all_raw()?;
    let (mean, std) = channel_stats(raw.iter().map(|p| p.rgb.as_slice()));
    let train_set = raw.iter().map(|p| p.to_sample(mean, std)).collect::<crate::Result<Vec<_>>>()?;
    let val_set = if data.join("val").is_dir() { load_split(&data, "val", mean, std)? } else { Vec::new() };

    let model_cfg = cfg.model.build(index.classes, cfg.train.crop_size).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init_rng.set_stream(1);
    let mut model = Setr::new(model_cfg, &mut init_rng)?;
    model.set_normalization(mean, std)?;

    match &a.log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(fs::File::create(path)?);
            train_loop(&mut model, &train_set, &val_set, &cfg.train, &mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            train_loop(&mut model, &train_set, &val_set, &cfg.train, &mut stdout.lock())?;
        }
    }
    model.save(&a.out).with_context(|| format!("saving {}", a.out.display()))?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Setr> {
    Setr::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let (mean, std) = model.normalization();
    let samples = load_split(&a.data, &a.split, mean, std)?;
    let ms = a.inference.config(&model);
    let cm = evaluate(&model, &samples, &ms, a.ignore_index)?;
    let report = compute_miou(&cm);
    let metrics = format!("miou,pixel_acc,pixels\n{:.6},{:.6},{}\n", report.miou, report.pixel_acc, cm.total());
    let classes = per_class_csv(&report);
    print!("{metrics}\n{classes}");
    if let Some(p) = &a.csv {
        fs::write(p, &metrics)?;
    }
    if let Some(p) = &a.per_class {
        fs::write(p, &classes)?;
    }
    Ok(())
}

/// Reads a P6 image or an `[H, W, 3]` float `STTN` tensor and normalizes it
/// with the model's statistics.
fn load_image(path: &Path, model: &Setr) -> anyhow::Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"STTN") {
        let t = read_sttn(&mut bytes.as_slice())?.into_f32()?;
        let [h, w, 3] = t.shape()[..] else {
            bail!("{}: expected an [H, W, 3] tensor, got {:?}", path.display(), t.shape())
        };
        let (mean, std) = model.normalization();
        let data = t.data().iter().enumerate().map(|(i, &v)| (v - mean[i % 3]) / std[i % 3]).collect();
        return Ok(Tensor::new(&[h, w, 3], data)?);
    }
    let (w, h, rgb) = read_ppm(bytes.as_slice()).with_context(|| format!("decoding {}", path.display()))?;
    Ok(model.normalize_rgb(&rgb, h, w)?)
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let image = load_image(&a.input, &model)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let logits = multi_scale_logits(&model, &image, &a.inference.config(&model))?;
    let pred = argmax_map(&logits)?;
    if model.classes() <= 256 {
        let gray: Vec<u8> = pred.iter().map(|&c| c as u8).collect();
        write_pgm(std::io::BufWriter::new(fs::File::create(&a.out)?), w, h, &gray)?;
    } else {
        write_sttn(&mut fs::File::create(&a.out)?, &SttnPayload::U16 { shape: vec![h, w], data: pred })?;
    }
    if let Some(p) = &a.logits {
        write_sttn(&mut std::io::BufWriter::new(fs::File::create(p)?), &SttnPayload::F32(logits))?;
    }
    Ok(())
}

fn viz(a: VizArgs) -> Result<(), Failure> {
    if !a.pos_sim && a.point.is_none() && !a.rollout && a.feature.is_empty() {
        return Err(Failure::Usage("nothing to render: pass --point, --rollout, --pos-sim or --feature".into()));
    }
    let model = load_model(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    let mut save = |name: String, img: crate::viz::GrayImage| -> Result<(), Failure> {
        let path = a.out.join(name);
        img.save(&path)?;
        written.push(path);
        Ok(())
    };
    if a.pos_sim {
        save("pos_sim.pgm".into(), pos_embed_similarity(&model.position_embedding()?))?;
    }
    if a.point.is_some() || a.rollout || !a.feature.is_empty() {
        let Some(input) = &a.input else {
            return Err(Failure::Usage("--input is required for --point, --rollout and --feature".into()));
        };
        let image = load_image(input, &model)?;
        let cap = capture(&model, &image)?;
        let point = a.point.unwrap_or((cap.grid.0 / 2, cap.grid.1 / 2));
        let zoom = if a.zoom == 0 { SIZE_MULTIPLE } else { a.zoom };
        if a.point.is_some() {
            let img = point_attention_map(&cap.attention, a.layer, point, cap.grid)?;
            save(format!("attn_l{}_r{}_c{}.pgm", a.layer, point.0, point.1), img.upscale(zoom))?;
        }
        if a.rollout {
            let r = attention_rollout(&cap.attention)?;
            save(
                format!("rollout_r{}_c{}.pgm", point.0, point.1),
                rollout_point_map(&r, point, cap.grid)?.upscale(zoom),
            )?;
        }
        for &f in &a.feature {
            let map = cap.feature(f)?;
            let img = render_feature(map, a.reduction)?;
            let img = if matches!(f, FeatureRef::Z(_)) { img.upscale(zoom) } else { img };
            let tag = match a.reduction {
                Reduction::Mean => "mean",
                Reduction::Pca1 => "pca1",
            };
            save(format!("feature_{f}_{tag}.pgm"), img)?;
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
