//! `pixmatch` command line: synthetic data, training, mask propagation, evaluation and the
//! embedding analyses. [`run`] is the whole program minus process exit.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pixmatch::autograd::Graph;
use pixmatch::inference::{MaskResolution, Propagator};
use pixmatch::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta};
use pixmatch::io::codec::{read_mask, write_mask};
use pixmatch::io::config::train_config_from_text;
use pixmatch::io::dataset::{
    indexed_files, indexed_name, read_attributes, read_dataset, read_sequence, write_attributes, write_sequence, ATTRIBUTES, MASKS,
};
use pixmatch::io::viz::{emit_offset_viz, emit_pca_image};
use pixmatch::metrics::{evaluate, mean_rf_similarity, pca_project, EvalOptions, EvalReport};
use pixmatch::model::{Pass, DOWNSCALE};
use pixmatch::synth::{gen_corpus, CorpusConfig, Motion};
use pixmatch::trainer::{format_log, train_with, TrainConfig};
use pixmatch::{ModelParams, SegmentationMask, Variant, VideoSequence};

#[derive(Debug, Parser)]
#[command(name = "pixmatch", version, about = "Self-supervised pixel matching for video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus with masks, flows and an attribute table.
    GenData(GenDataArgs),
    /// Train a matching model from unlabeled frames.
    Train(TrainArgs),
    /// Propagate a first-frame mask through a sequence.
    Infer(InferArgs),
    /// Score predicted masks against ground truth (J and F).
    Eval(EvalArgs),
    /// Embedding and offset analyses for one frame pair.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    num_sequences: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// static | slow | moderate | fast | pan | shake
    #[arg(long, default_value = "moderate")]
    motion: String,
    /// Per-pixel color noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root with one folder per sequence.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// deform | conv1 | conv3 | conv5 | dilation3 | dilation6 | dilation9
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss log path; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Resolution {
    Quarter,
    Full,
}

impl From<Resolution> for MaskResolution {
    fn from(r: Resolution) -> Self {
        match r {
            Resolution::Quarter => MaskResolution::Quarter,
            Resolution::Full => MaskResolution::Full,
        }
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sequence folder with `frames/`.
    #[arg(long)]
    video: PathBuf,
    /// Mask PNG for frame 0.
    #[arg(long)]
    first_mask: PathBuf,
    /// Output folder; masks go to `<out>/masks/`.
    #[arg(long)]
    out: PathBuf,
    /// Report mean wall-clock time per propagated frame.
    #[arg(long)]
    time: bool,
    /// Grid the mask is propagated on.
    #[arg(long, value_enum, default_value = "quarter")]
    resolution: Resolution,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions: one sequence folder (or its `masks/`), or a root of such folders.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth: one sequence folder or a dataset root.
    #[arg(long)]
    gt: PathBuf,
    /// Attribute table; defaults to `<gt>/attributes.txt` when present.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Also write per-object records as TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Analysis {
    RfSim,
    Pca,
    Offsets,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    analysis: Analysis,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    video: PathBuf,
    /// Target frame; the reference is the frame before it.
    #[arg(long, default_value_t = 1)]
    frame: usize,
    /// Output file (text for rf-sim, PNG otherwise).
    #[arg(long)]
    out: PathBuf,
    /// Target pixel `y,x` in frame coordinates for `offsets`; defaults to the center.
    #[arg(long, value_parser = parse_pixel)]
    pixel: Option<(usize, usize)>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    match (h.trim().parse(), w.trim().parse()) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(format!("expected positive HxW, got `{s}`")),
    }
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or_else(|| format!("expected y,x, got `{s}`"))?;
    match (y.trim().parse(), x.trim().parse()) {
        (Ok(y), Ok(x)) => Ok((y, x)),
        _ => Err(format!("expected y,x, got `{s}`")),
    }
}

/// Parses `args` (including the program name) and runs the subcommand. Returns the process exit
/// code; diagnostics go to stderr and results to stdout.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
        Command::Analyze(a) => analyze(&a),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<String> {
    let motion: Motion = a.motion.parse()?;
    let cfg = CorpusConfig {
        height: a.size.0,
        width: a.size.1,
        frames: a.frames,
        motion,
        noise: a.noise,
        ..CorpusConfig::default()
    };
    let corpus = gen_corpus(&cfg, a.num_sequences, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut attrs = BTreeMap::new();
    for video in &corpus {
        write_sequence(&a.out, video)?;
        let objects = video.masks.as_ref().map_or(0, |m| m[0].classes().len() - 1);
        let mut tags = vec![a.motion.clone()];
        if objects > 1 {
            tags.push("multi-object".into());
        }
        attrs.insert(video.name.clone(), tags);
    }
    write_attributes(&a.out.join(ATTRIBUTES), &attrs)?;
    Ok(format!("wrote {} sequences to {}\n", corpus.len(), a.out.display()))
}

fn train_config(a: &TrainArgs, dims: (usize, usize)) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            train_config_from_text(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    // The network is fully convolutional; its nominal size follows the data.
    cfg.model.height = dims.0;
    cfg.model.width = dims.1;
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse::<Variant>().with_context(|| format!("--variant `{v}`"))?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<String> {
    let dataset: Vec<VideoSequence> = read_dataset(&a.data)?.into_iter().map(|v| v.frames_only()).collect();
    let dims = dataset[0].dims().context("empty sequence")?;
    if let Some(v) = dataset.iter().find(|v| v.dims() != Some(dims)) {
        bail!("sequence `{}` is {:?}, expected {dims:?} like the first one", v.name, v.dims());
    }
    let cfg = train_config(a, dims)?;
    let outcome = train_with(&dataset, &cfg, |r| {
        if r.step % 50 == 0 {
            eprintln!("epoch {} step {} lr {:.3e} loss {:.5}", r.epoch, r.step, r.lr, r.loss);
        }
    })?;
    let meta = TrainMeta {
        epoch: cfg.epochs,
        step: outcome.optimizer.step,
        seed: cfg.seed,
        loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&a.out, &Checkpoint::from_params(&outcome.params, Some(&outcome.optimizer), meta))?;
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    fs::write(&log, format_log(&outcome.log)).with_context(|| format!("writing {}", log.display()))?;

    let mut s = String::new();
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "epoch {e} mean loss {l:.6}");
    }
    if let Some(d) = outcome.loss_drop() {
        let _ = writeln!(s, "loss drop {:.1}%", 100.0 * d);
    }
    let _ = writeln!(s, "checkpoint {}", a.out.display());
    Ok(s)
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(path)?.to_params()?)
}

fn infer(a: &InferArgs) -> Result<String> {
    let params = load_model(&a.ckpt)?;
    let video = read_sequence(&a.video)?;
    let first = read_mask(&a.first_mask)?;
    if Some(first.dims()) != video.dims() {
        bail!("first mask is {:?} but frames are {:?}", first.dims(), video.dims());
    }
    let mask_dir = a.out.join(MASKS);
    fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
    write_mask(&mask_dir.join(indexed_name(0, "png")), &first)?;

    let mut prop = Propagator::new(&params, &first, a.resolution.into())?;
    let mut prev = video.frame_batch(0)?;
    let mut elapsed = 0.0;
    for t in 1..video.len() {
        let cur = video.frame_batch(t)?;
        let start = Instant::now();
        let mask = prop.step(&prev, &cur)?;
        elapsed += start.elapsed().as_secs_f64();
        write_mask(&mask_dir.join(indexed_name(t, "png")), &mask)?;
        prev = cur;
    }
    let steps = video.len().saturating_sub(1);
    let mut s = format!("wrote {} masks to {}\n", video.len(), mask_dir.display());
    if a.time && steps > 0 {
        let _ = writeln!(s, "frames {steps} mean {:.2} ms/frame", 1e3 * elapsed / steps as f64);
    }
    Ok(s)
}

fn read_masks(dir: &Path) -> Result<Vec<SegmentationMask>> {
    let dir = if dir.join(MASKS).is_dir() { dir.join(MASKS) } else { dir.to_path_buf() };
    let files = indexed_files(&dir, "png")?;
    if files.is_empty() {
        bail!("{}: no mask files", dir.display());
    }
    files.iter().map(|(_, p)| Ok(read_mask(p)?)).collect()
}

fn eval(a: &EvalArgs) -> Result<String> {
    let single = a.gt.join(MASKS).is_dir();
    let pairs: Vec<(String, Vec<SegmentationMask>, Vec<SegmentationMask>)> = if single {
        let name = a.gt.file_name().and_then(|n| n.to_str()).unwrap_or("sequence").to_string();
        vec![(name, read_masks(&a.pred)?, read_masks(&a.gt)?)]
    } else {
        let gt = read_dataset(&a.gt)?;
        gt.into_iter()
            .map(|v| {
                let masks = v.masks.with_context(|| format!("ground truth `{}` has no masks", v.name))?;
                let pred = read_masks(&a.pred.join(&v.name)).with_context(|| format!("predictions for `{}`", v.name))?;
                Ok((v.name, pred, masks))
            })
            .collect::<Result<_>>()?
    };
    let scores = pairs
        .iter()
        .map(|(name, pred, gt)| Ok(evaluate(name, pred, gt, &EvalOptions::default())?))
        .collect::<Result<Vec<_>>>()?;
    let attr_path = a.attributes.clone().or_else(|| {
        let p = a.gt.join(ATTRIBUTES);
        (!single && p.is_file()).then_some(p)
    });
    let attrs = attr_path.as_deref().map(read_attributes).transpose()?;
    let report = EvalReport::new(scores, attrs.as_ref());
    if let Some(out) = &a.out {
        fs::write(out, report.records()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(report.summary())
}

fn analyze(a: &AnalyzeArgs) -> Result<String> {
    let params = load_model(&a.ckpt)?;
    let video = read_sequence(&a.video)?;
    if a.frame == 0 || a.frame >= video.len() {
        bail!("--frame must be in 1..{} (the reference is the previous frame)", video.len());
    }
    let reference = video.frame_batch(a.frame - 1)?;
    let target = video.frame_batch(a.frame)?;
    match a.analysis {
        Analysis::RfSim => {
            let features = params.infer_features(&reference, &target)?;
            let sampling = params.first_layer_sampling(&features)?;
            let sim = mean_rf_similarity(&features, &sampling)?;
            let text = format!(
                "variant {}\nframe {}\nmean_cosine_similarity {:.6}\nzero_norm_samples {}\n",
                params.config.variant, a.frame, sim.mean, sim.zero_norm
            );
            fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(text)
        }
        Analysis::Pca => {
            let mut g = Graph::new();
            let t = g.input(target);
            let e = params.embed(&mut g, t, &mut Pass::eval())?;
            let pca = pca_project(g.value(e), 3)?;
            emit_pca_image(&a.out, &pca.unit_range(), DOWNSCALE)?;
            let explained: f64 = pca.eigenvalues.iter().sum::<f64>() / pca.total_variance.max(f64::MIN_POSITIVE);
            Ok(format!("wrote {} (3 components, {:.1}% of variance)\n", a.out.display(), 100.0 * explained))
        }
        Analysis::Offsets => {
            let (h, w) = video.dims().context("empty sequence")?;
            let (y, x) = a.pixel.unwrap_or((h / 2, w / 2));
            if y >= h || x >= w {
                bail!("pixel ({y}, {x}) outside the {h}x{w} frame");
            }
            let offsets = params.infer_offsets(&reference, &target)?;
            let cell = (y / DOWNSCALE, x / DOWNSCALE);
            emit_offset_viz(&a.out, &reference, &target, &offsets, cell)?;
            let (dy, dx) = (offsets.at4(0, 0, cell.0, cell.1), offsets.at4(0, 1, cell.0, cell.1));
            Ok(format!("cell {cell:?} offset ({dy:.3}, {dx:.3}) grid cells; wrote {}\n", a.out.display()))
        }
    }
}
