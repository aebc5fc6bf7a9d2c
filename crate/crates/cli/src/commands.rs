use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};

use depthsr_core::checkpoint;
use depthsr_core::data::{
    load_depth_png, load_entries, load_image, prepare_sample, read_manifest, read_split_manifest, save_depth_png, save_image_png,
    scan_directory, split, write_manifest, ManifestEntry, RGBDSample, SplitSpec,
};
use depthsr_core::edges::{binary_edges, sobel_magnitude};
use depthsr_core::export::{grid_mesh, write_mesh, Intrinsics, DEFAULT_DISCONTINUITY};
use depthsr_core::losses::LossTerm;
use depthsr_core::maps::{to_grayscale, DepthMap, GuidanceImage};
use depthsr_core::metrics::{aggregate, evaluate, format_table, report_json, MetricReport};
use depthsr_core::model::{network_forward, Guidance};
use depthsr_core::synth::{benchmark_suite, make_benchmark_case, SceneKind, SceneSpec};
use depthsr_core::train::{self, run_ablation, zero_shot_refine, IterationLog, Mode, TrainConfig, TrainSample};

use crate::SceneChoice;

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Directory with `images/` and `depth/` holding matching stems.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    data: Option<PathBuf>,

    /// Manifest of `<id> <image> <depth> [fx fy cx cy]` lines.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Quantization step in meters applied before downsampling.
    #[arg(long)]
    quantize: Option<f64>,
}

impl DatasetArgs {
    fn entries(&self) -> Result<Vec<ManifestEntry>> {
        Ok(match (&self.data, &self.manifest) {
            (Some(dir), _) => scan_directory(dir)?,
            (None, Some(path)) => read_manifest(path)?,
            (None, None) => unreachable!("clap requires one of --data and --manifest"),
        })
    }

    fn load(&self, cfg: &TrainConfig) -> Result<Vec<RGBDSample>> {
        let samples = load_entries(&self.entries()?)?;
        let factor = 1 << cfg.n_stages;
        Ok(samples
            .iter()
            .map(|s| prepare_sample(s, factor, self.quantize))
            .collect::<depthsr_core::Result<_>>()?)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => ensure_dir(dir),
        None => Ok(()),
    }
}

fn create_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| {
        ensure_parent(p)?;
        let f = File::create(p).map_err(|e| depthsr_core::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
        Ok(BufWriter::new(f))
    })
    .transpose()
}

fn log_observer<'a>(sink: &'a mut Option<BufWriter<File>>, every: usize) -> impl FnMut(&IterationLog) + 'a {
    move |entry: &IterationLog| {
        if let Some(w) = sink.as_mut() {
            let _ = writeln!(w, "{}", entry.to_json_line());
        }
        if entry.iteration.is_multiple_of(every) {
            info!("iteration {} epoch {} lr {:.3e} loss {:.6}", entry.iteration, entry.epoch, entry.lr, entry.loss.total);
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        depthsr_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// Explicit `<id> <train|test>` split; otherwise a seeded random split.
    #[arg(long)]
    split: Option<PathBuf>,

    /// Fraction of samples used for training in the random split.
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,

    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
}

pub fn train(cfg: &TrainConfig, args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        mode: Mode::Train,
        ..cfg.clone()
    };
    let samples = args.dataset.load(&cfg)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train_ids, test_ids) = match &args.split {
        Some(path) => read_split_manifest(path)?,
        None => split(
            &ids,
            SplitSpec {
                seed: cfg.seed,
                train_fraction: args.train_fraction,
            },
        )?,
    };
    let pick = |wanted: &[String]| -> Result<Vec<&RGBDSample>> {
        wanted
            .iter()
            .map(|id| samples.iter().find(|s| &s.id == id).with_context(|| format!("split names unknown sample {id:?}")))
            .collect()
    };
    let train_set = pick(&train_ids)?;
    let test_set = pick(&test_ids)?;
    info!("training on {} samples, {} held out", train_set.len(), test_set.len());
    let stripped = train_set
        .iter()
        .map(|s| TrainSample::try_from(&s.without_ground_truth()))
        .collect::<depthsr_core::Result<Vec<_>>>()?;
    ensure_dir(&args.out)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    let mut sink = create_log(Some(&args.out.join("train_log.jsonl")))?;
    let outcome = train::train(&cfg, &stripped, Some(&args.out), &mut log_observer(&mut sink, 10))?;
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    let final_path = args.out.join("model.safetensors");
    checkpoint::save(&outcome.params, &cfg, &final_path)?;
    info!("wrote {}", final_path.display());
    if !test_set.is_empty() {
        let mut rows = Vec::new();
        for s in test_set {
            let guidance = Guidance::new(&s.image, cfg.n_stages, cfg.edge_percentile)?;
            let pred = network_forward(&outcome.params, &guidance, s.depth_lr.as_ref().expect("prepared"))?.depth;
            rows.push((s.id.clone(), evaluate(&pred, s.depth_hr.as_ref().expect("loaded"))?));
        }
        print_reports(rows, false)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Guidance image (gray or RGB).
    #[arg(long)]
    image: PathBuf,

    /// Low-resolution depth PNG, or full-resolution depth with `--degrade`.
    #[arg(long)]
    depth: PathBuf,

    /// Treat `--depth` as image-resolution depth and downsample it first.
    #[arg(long)]
    degrade: bool,

    /// Quantization step applied before downsampling (with `--degrade`).
    #[arg(long, requires = "degrade")]
    quantize: Option<f64>,

    /// Refined depth PNG.
    #[arg(long)]
    out: PathBuf,

    /// Line-delimited JSON loss log.
    #[arg(long)]
    log: Option<PathBuf>,

    /// Run a trained checkpoint forward instead of optimizing.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Where to store the optimized parameters.
    #[arg(long, conflicts_with = "weights")]
    save_weights: Option<PathBuf>,
}

pub fn refine(cfg: &TrainConfig, args: RefineArgs) -> Result<()> {
    let image = load_image(&args.image)?;
    let depth = load_depth_png(&args.depth)?;
    let (image, depth_lr) = if args.degrade {
        let sample = RGBDSample {
            id: "input".into(),
            image,
            depth_hr: Some(depth),
            depth_lr: None,
            meta: Default::default(),
        };
        let prepared = prepare_sample(&sample, 1 << cfg.n_stages, args.quantize)?;
        (prepared.image, prepared.depth_lr.expect("prepared"))
    } else {
        (image, depth)
    };
    if let Some(path) = &args.weights {
        let (params, meta) = checkpoint::load(path)?;
        info!("loaded {} (config digest {})", path.display(), meta.config_digest);
        let guidance = Guidance::new(&image, params.n_stages(), meta.config.edge_percentile)?;
        let out = network_forward(&params, &guidance, &depth_lr)?;
        ensure_parent(&args.out)?;
        save_depth_png(&out.depth, &args.out)?;
        info!("wrote {}", args.out.display());
        return Ok(());
    }
    let mut sink = create_log(args.log.as_deref())?;
    let outcome = zero_shot_refine(&image, &depth_lr, cfg, &mut log_observer(&mut sink, 50))?;
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    ensure_parent(&args.out)?;
    save_depth_png(&outcome.depth, &args.out)?;
    info!("wrote {}", args.out.display());
    if let Some(path) = &args.save_weights {
        checkpoint::save(&outcome.params, cfg, path)?;
    }
    match outcome.diverged {
        Some(e) => {
            warn!("stopped early; {} holds the last finite prediction", args.out.display());
            Err(e.into())
        }
        None => Ok(()),
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted depth PNG or directory of PNGs.
    #[arg(long)]
    pred: PathBuf,

    /// Ground-truth depth PNG or directory with matching file names.
    #[arg(long)]
    gt: PathBuf,

    /// Print one JSON object per case instead of a table.
    #[arg(long)]
    json: bool,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| depthsr_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn print_reports(rows: Vec<(String, MetricReport)>, json: bool) -> Result<()> {
    let mean = aggregate(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>())?;
    let mut rows = rows;
    rows.push(("mean".into(), mean));
    if json {
        for (label, r) in &rows {
            println!("{}", report_json(label, r));
        }
    } else {
        print!("{}", format_table(&rows));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if args.pred.is_dir() {
        png_files(&args.pred)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("file name").to_owned();
                (p.file_stem().expect("stem").to_string_lossy().into_owned(), p, args.gt.join(name))
            })
            .collect()
    } else {
        let stem = args.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(stem, args.pred.clone(), args.gt.clone())]
    };
    if pairs.is_empty() {
        bail!(depthsr_core::Error::Contract(format!("no PNG files in {}", args.pred.display())));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, pred, gt) in pairs {
        rows.push((id, evaluate(&load_depth_png(&pred)?, &load_depth_png(&gt)?)?));
    }
    print_reports(rows, args.json)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, value_enum, default_value = "ramp")]
    scene: SceneChoice,

    /// Image side in pixels.
    #[arg(long, default_value_t = 512)]
    size: usize,

    /// Quantization step in meters.
    #[arg(long, default_value_t = depthsr_core::synth::DEFAULT_STEP)]
    step: f64,

    /// Number of cases for `--scene suite`.
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

pub fn synth(cfg: &TrainConfig, args: SynthArgs) -> Result<()> {
    let specs = match args.scene {
        SceneChoice::Suite => benchmark_suite(cfg.seed, args.cases, args.size),
        single => {
            let kind = match single {
                SceneChoice::Ramp => SceneKind::Ramp,
                SceneChoice::Box => SceneKind::BoxOnPlane,
                _ => SceneKind::Curved,
            };
            vec![SceneSpec {
                seed: cfg.seed,
                ..SceneSpec::new(kind, args.size, args.size)
            }]
        }
    };
    let dirs = ["images", "depth", "truth", "lr"].map(|d| args.out.join(d));
    for d in &dirs {
        ensure_dir(d)?;
    }
    let [images, depth, truth, lr] = &dirs;
    let factor = 1 << cfg.n_stages;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in &specs {
        let case = make_benchmark_case(spec, args.step, factor)?;
        let name = format!("{}.png", case.id);
        let gt = case.depth_hr.as_ref().expect("benchmark keeps truth");
        save_image_png(&case.image, &images.join(&name))?;
        save_depth_png(&depthsr_core::synth::quantize(gt, args.step)?, &depth.join(&name))?;
        save_depth_png(gt, &truth.join(&name))?;
        save_depth_png(case.depth_lr.as_ref().expect("benchmark has input"), &lr.join(&name))?;
        entries.push(ManifestEntry {
            id: case.id.clone(),
            image: images.join(&name),
            depth: depth.join(&name),
            intrinsics: case.meta.intrinsics,
        });
    }
    write_manifest(&args.out.join("manifest.txt"), &entries)?;
    let scenes = serde_json::to_string_pretty(&specs).expect("specs serialize");
    fs::write(args.out.join("scenes.json"), scenes).context("writing scenes.json")?;
    info!("wrote {} cases to {}", specs.len(), args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Depth PNG to export.
    #[arg(long)]
    depth: PathBuf,

    /// PLY output path.
    #[arg(long)]
    out: PathBuf,

    /// Normalized 8-bit preview of the depth map.
    #[arg(long)]
    preview: Option<PathBuf>,

    /// Pinhole intrinsics `fx fy cx cy` in pixels; a generic camera otherwise.
    #[arg(long, num_args = 4, value_names = ["FX", "FY", "CX", "CY"])]
    intrinsics: Option<Vec<f64>>,

    /// Triangles spanning a larger depth jump (meters) are dropped.
    #[arg(long, default_value_t = DEFAULT_DISCONTINUITY)]
    max_jump: f64,
}

fn depth_preview(d: &DepthMap) -> depthsr_core::Result<GuidanceImage> {
    let valid: Vec<f64> = d.values().iter().zip(d.valid()).filter(|(_, ok)| **ok).map(|(v, _)| *v).collect();
    let lo = valid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(&v, &ok)| if ok { 1.0 - (v - lo) / span } else { 0.0 })
        .collect();
    GuidanceImage::gray(d.height(), d.width(), data)
}

pub fn export(args: ExportArgs) -> Result<()> {
    let depth = load_depth_png(&args.depth)?;
    let k = match &args.intrinsics {
        Some(v) => Intrinsics::new(v[0], v[1], v[2], v[3])?,
        None => Intrinsics::generic(depth.height(), depth.width()),
    };
    let mesh = grid_mesh(&depth, &k, args.max_jump);
    ensure_parent(&args.out)?;
    write_mesh(&mesh, &args.out)?;
    info!("wrote {} ({} vertices, {} faces)", args.out.display(), mesh.vertices.len(), mesh.faces.len());
    if let Some(path) = &args.preview {
        ensure_parent(path)?;
        save_image_png(&depth_preview(&depth)?, path)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EdgesArgs {
    #[arg(long)]
    image: PathBuf,

    /// Directory for `magnitude.png` and `edges.png`.
    #[arg(long)]
    out: PathBuf,

    /// Threshold percentile; the config value otherwise.
    #[arg(long)]
    percentile: Option<f64>,
}

pub fn edges(cfg: &TrainConfig, args: EdgesArgs) -> Result<()> {
    let gray = to_grayscale(&load_image(&args.image)?)?;
    let p = args.percentile.unwrap_or(cfg.edge_percentile);
    let mag = sobel_magnitude(&gray)?;
    let peak = mag.values.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mag_img = GuidanceImage::gray(mag.height, mag.width, mag.values.iter().map(|v| v * scale).collect())?;
    let edges = binary_edges(&gray, p)?;
    let edge_img = GuidanceImage::gray(edges.height, edges.width, edges.as_f64())?;
    ensure_dir(&args.out)?;
    save_image_png(&mag_img, &args.out.join("magnitude.png"))?;
    save_image_png(&edge_img, &args.out.join("edges.png"))?;
    info!("edge threshold {:.6} at p{p}, {:.1}% edge pixels", edges.threshold, 100.0 * edges.fraction());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// Directory of ground-truth PNGs named by sample id; the loaded depth
    /// otherwise.
    #[arg(long)]
    truth: Option<PathBuf>,

    /// Loss term to remove: sleeve, cycle, false_edge, tv, or none.
    #[arg(long, default_value = "none")]
    leave_out: String,
}

pub fn ablate(cfg: &TrainConfig, args: AblateArgs) -> Result<()> {
    let leave_out = match args.leave_out.as_str() {
        "none" => None,
        name => Some(name.parse::<LossTerm>()?),
    };
    let mut samples = args.dataset.load(cfg)?;
    if let Some(dir) = &args.truth {
        for s in &mut samples {
            let gt = load_depth_png(&dir.join(format!("{}.png", s.id)))?;
            let lr = s.depth_lr.as_ref().expect("prepared");
            let (h, w) = (lr.height() << cfg.n_stages, lr.width() << cfg.n_stages);
            let (top, left) = ((gt.height() - h) / 2, (gt.width() - w) / 2);
            s.depth_hr = Some(gt.crop(top, left, h, w)?);
        }
    }
    let (train_set, test_set): (Vec<RGBDSample>, Vec<RGBDSample>) = match cfg.mode {
        Mode::ZeroShot => (Vec::new(), samples),
        Mode::Train => {
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let (train_ids, _) = split(
                &ids,
                SplitSpec {
                    seed: cfg.seed,
                    ..SplitSpec::default()
                },
            )?;
            samples.into_iter().partition(|s| train_ids.contains(&s.id))
        }
    };
    let train_set: Vec<RGBDSample> = train_set.iter().map(RGBDSample::without_ground_truth).collect();
    let result = run_ablation(cfg, &train_set, &test_set, leave_out)?;
    info!("ablated config:\n{}", result.effective.to_toml());
    print_reports(result.reports, false)
}
