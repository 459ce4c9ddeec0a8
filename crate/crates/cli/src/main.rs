use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lesionseg::appearance::{AppearanceModel, FeatureConfig, TrainParams};
use lesionseg::enhance::{self, DegradeParams};
use lesionseg::grabcut::GrabCutParams;
use lesionseg::harness::{self, ExperimentConfig, PhantomShape, PhantomSpec};
use lesionseg::metrics::{self, SegmentationScores};
use lesionseg::selfpaced::{self, BeyondExtent, Lesion, SelfPacedConfig};
use lesionseg::trimap::{build_trimap, TrimapMode};
use lesionseg::volume_io::{
    crop_and_window, read_annotations, read_lesion_records, read_mask, read_volume, write_json, write_label_raster,
    write_mask, write_volume, write_volume_with_channels, LesionRecord, Mask, RecistAnnotation, Volume, VoxelData,
    DEFAULT_WINDOW,
};
use lesionseg::{recist3d, Grid};

#[derive(Parser, Debug)]
#[command(name = "lesionseg", version, about = "Weakly supervised lesion segmentation from RECIST marks")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-lesion fan-out (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export the trimap of one annotation as a label raster.
    Trimap(TrimapArgs),
    /// GrabCut on the RECIST slice of one annotation.
    Segment2d(Segment2dArgs),
    /// Self-paced volumetric segmentation of every lesion in a record file.
    Segment3d(Segment3dArgs),
    /// Train the appearance model on RECIST-slice pseudo-labels.
    TrainAppearance(TrainArgs),
    /// Estimate per-slice RECIST marks around an annotation.
    EstimateRecist(EstimateArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Make degraded/clean training pairs from one slice.
    Degrade(DegradeArgs),
    /// Write the (original, denoised, enhanced) stack of a volume.
    Enhance(EnhanceArgs),
    /// Generate synthetic lesion volumes with masks and annotations.
    Phantom(PhantomArgs),
    /// Assign patient-level cross-validation folds to a record file.
    Split(SplitArgs),
    /// Run a named experiment and write its reports.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct AnnotationArgs {
    /// Volume header (`.vol.json`).
    #[arg(long)]
    volume: PathBuf,
    /// Annotation list (`.recist.json`).
    #[arg(long)]
    recist: PathBuf,
    /// Which annotation of the list to use.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args, Debug, Clone)]
struct GrabCutArgs {
    #[arg(long, default_value_t = 50.0)]
    gamma: f64,
    #[arg(long = "gmm-k", default_value_t = 5)]
    gmm_k: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    conn: u8,
}

impl GrabCutArgs {
    fn params(&self, seed: u64) -> GrabCutParams {
        GrabCutParams {
            gamma: self.gamma,
            k_components: self.gmm_k,
            max_iters: self.iters,
            connectivity: self.conn,
            seed,
            ..GrabCutParams::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4096)]
    batch: usize,
}

impl TrainFlags {
    fn params(&self, seed: u64) -> TrainParams {
        TrainParams {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed,
            ..TrainParams::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrimapArgs {
    #[command(flatten)]
    input: AnnotationArgs,
    #[arg(long, default_value = "recist-r")]
    mode: TrimapMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Segment2dArgs {
    #[command(flatten)]
    input: AnnotationArgs,
    #[arg(long, default_value = "recist-r")]
    mode: TrimapMode,
    #[command(flatten)]
    grabcut: GrabCutArgs,
    /// Segment the enhanced 3-channel stack instead of the raw slice.
    #[arg(long)]
    enhance: bool,
    /// Output mask (`.vol.json`); the RECIST slice carries the segmentation.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfPacedFlags {
    /// Self-paced rounds.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long = "beyond-extent", default_value = "skip")]
    beyond_extent: BeyondExtent,
    /// Threshold the model output instead of running GrabCut at inference.
    #[arg(long = "no-gc")]
    no_gc: bool,
    #[arg(long)]
    enhance: bool,
    #[arg(long = "p-bg", default_value_t = lesionseg::trimap::DEFAULT_P_BG)]
    p_bg: f64,
    #[command(flatten)]
    grabcut: GrabCutArgs,
    #[command(flatten)]
    train: TrainFlags,
}

impl SelfPacedFlags {
    fn config(&self, seed: u64) -> SelfPacedConfig {
        SelfPacedConfig {
            rounds: self.k,
            features: FeatureConfig::default(),
            train: self.train.params(seed),
            grabcut: self.grabcut.params(seed),
            p_bg: self.p_bg,
            beyond_extent: self.beyond_extent,
            no_gc: self.no_gc,
            enhance: self.enhance,
            seed,
            ..SelfPacedConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Self-paced appearance model followed by GrabCut.
    Wsss,
    /// Per-slice GrabCut from geometric RECIST estimates.
    Grabcut3de,
}

#[derive(Args, Debug)]
struct Segment3dArgs {
    /// Lesion record file (JSON list).
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "wsss")]
    method: Method,
    /// Use this trained model instead of running self-paced training.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    flags: SelfPacedFlags,
    /// Output directory for masks and the harvest log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    records: PathBuf,
    #[command(flatten)]
    flags: SelfPacedFlags,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    input: AnnotationArgs,
    #[arg(long = "max-offset", default_value_t = 6)]
    max_offset: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted masks, paired in order with `--gt`.
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    gt: Vec<PathBuf>,
    /// Output directory for `scores.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DegradeMode {
    Denoise,
    Enhance,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Source slice.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    #[arg(long, value_enum, default_value = "enhance")]
    mode: DegradeMode,
    /// HU window `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = DEFAULT_WINDOW)]
    window: Vec<f64>,
    /// Noise std on the 0-255 scale.
    #[arg(long = "noise-sigma", default_value_t = 10.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long = "blur-sigma", default_value_t = 1.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 1.5)]
    kappa: f64,
    /// Number of pairs.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Output directory for `input.vol.json` and `target.vol.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = DEFAULT_WINDOW)]
    window: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ShapeArg {
    Ellipsoid,
    Superellipsoid,
    Blob,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom spec JSON (one object or a list); overrides `--count`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_enum, default_value = "ellipsoid")]
    shape: ShapeArg,
    /// Output directory; also receives `records.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Output record file with folds filled in.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// One of trimap-modes, offsets, volume-change.
    name: String,
    /// Experiment config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lesions: Option<usize>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Trimap(a) => trimap(a),
        Command::Segment2d(a) => segment2d(a, seed),
        Command::Segment3d(a) => segment3d(a, seed),
        Command::TrainAppearance(a) => train_appearance(a, seed),
        Command::EstimateRecist(a) => estimate_recist(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Degrade(a) => degrade(a, seed),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Phantom(a) => phantom(a, seed),
        Command::Split(a) => split(a, seed),
        Command::Experiment(a) => experiment(a, seed),
    }
}

fn load_annotation(a: &AnnotationArgs) -> Result<(Volume, RecistAnnotation)> {
    let volume = read_volume(&a.volume)?;
    let list = read_annotations(&a.recist)?;
    let ann = list.get(a.index).cloned().ok_or_else(|| {
        usage(format!(
            "annotation index {} out of range ({} in {})",
            a.index,
            list.len(),
            a.recist.display()
        ))
    })?;
    ann.validate(volume.dims(), volume.spacing_mm())?;
    Ok((volume, ann))
}

fn trimap(a: TrimapArgs) -> Result<()> {
    let (volume, ann) = load_annotation(&a.input)?;
    let roi = crop_and_window(&volume, &ann)?;
    let t = build_trimap(&roi.annotation, (roi.width(), roi.height()), a.mode)?;
    let raster = t.to_raster();
    // place the ROI trimap in a full slice; outside the ROI is background
    let [nx, ny, _] = volume.dims();
    let [x0, y0] = roi.origin;
    let full = Grid::from_fn(nx, ny, |x, y| {
        if x >= x0 && y >= y0 && x - x0 < roi.width() && y - y0 < roi.height() {
            *raster.get(x - x0, y - y0)
        } else {
            0
        }
    });
    write_label_raster([nx, ny, 1], volume.spacing_mm(), full.as_slice(), &a.out)?;
    Ok(())
}

fn segment2d(a: Segment2dArgs, seed: u64) -> Result<()> {
    let (volume, ann) = load_annotation(&a.input)?;
    let params = a.grabcut.params(seed);
    let (roi, result) = selfpaced::segment_recist_slice(&volume, &ann, a.mode, &params, a.enhance)?;
    let mut mask = Mask::empty(volume.dims(), volume.spacing_mm())?;
    roi.paste(&mut mask, ann.slice_index, &result.mask)?;
    write_mask(&mask, &a.out)?;
    Ok(())
}

fn load_all(records: &Path) -> Result<Vec<Lesion>> {
    let records = read_lesion_records(records)?;
    records
        .iter()
        .map(|r| Lesion::from_record(r).with_context(|| format!("loading {}", r.volume.display())))
        .collect()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn segment3d(a: Segment3dArgs, seed: u64) -> Result<()> {
    let cfg = a.flags.config(seed);
    let lesions = load_all(&a.records)?;
    let model = match (a.method, &a.model) {
        (Method::Grabcut3de, _) => None,
        (Method::Wsss, Some(p)) => Some(AppearanceModel::load(p)?),
        (Method::Wsss, None) => {
            let result = selfpaced::run(&lesions, &cfg)?;
            write_json(&result.log, a.out.join("harvest_log.json"))?;
            Some(result.final_model().clone())
        }
    };
    for l in &lesions {
        let mask = match &model {
            Some(m) => selfpaced::segment_volume(l, m, &cfg)?,
            None => selfpaced::grabcut_3de(l, &cfg)?,
        };
        write_mask(&mask, a.out.join(format!("{}.mask.vol.json", file_stem(&l.id))))?;
    }
    Ok(())
}

fn train_appearance(a: TrainArgs, seed: u64) -> Result<()> {
    let cfg = a.flags.config(seed);
    let lesions = load_all(&a.records)?;
    let result = selfpaced::run(&lesions, &cfg)?;
    result.final_model().save(&a.out)?;
    Ok(())
}

fn estimate_recist(a: EstimateArgs) -> Result<()> {
    let (volume, ann) = load_annotation(&a.input)?;
    let est = recist3d::estimate(&ann, volume.spacing_mm(), a.max_offset)?;
    write_json(&est.report(volume.spacing_mm()), &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationSummary {
    cases: usize,
    summary: metrics::ScoreSummary,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() {
        return Err(usage(format!(
            "{} --pred masks but {} --gt masks",
            a.pred.len(),
            a.gt.len()
        )));
    }
    let mut scores: Vec<SegmentationScores> = Vec::new();
    let mut csv = String::from("case,pred,dice,precision,recall,volumetric_similarity,avd_mm\n");
    for (i, (p, g)) in a.pred.iter().zip(&a.gt).enumerate() {
        let pred = read_mask(p)?;
        let gt = read_mask(g)?;
        let s = metrics::score(&pred, &gt).with_context(|| format!("scoring {}", p.display()))?;
        let avd = s.avd_mm.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv += &format!(
            "{i},{},{:.6},{:.6},{:.6},{:.6},{avd}\n",
            p.display(),
            s.dice,
            s.precision,
            s.recall,
            s.volumetric_similarity
        );
        scores.push(s);
    }
    write_text(&a.out.join("scores.csv"), &csv)?;
    let summary = EvaluationSummary {
        cases: scores.len(),
        summary: metrics::summarize(&scores),
    };
    write_json(&summary, a.out.join("summary.json"))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn window_arg(w: &[f64]) -> [f64; 2] {
    [w[0], w[1]]
}

fn stack_volume(slices: &[Grid<f64>], spacing: [f64; 3]) -> Result<Volume> {
    let (w, h) = slices[0].dims();
    let data: Vec<f32> = slices.iter().flat_map(|s| s.as_slice().iter().map(|&v| v as f32)).collect();
    Ok(Volume::new([w, h, slices.len()], spacing, VoxelData::Float32(data))?)
}

fn degrade(a: DegradeArgs, seed: u64) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let volume = read_volume(&a.volume)?;
    if a.slice >= volume.dims()[2] {
        return Err(usage(format!("slice {} out of range (nz = {})", a.slice, volume.dims()[2])));
    }
    let windowed = enhance::window_volume(&volume, window_arg(&a.window))?;
    let image = windowed.slice(a.slice);
    let mut inputs = Vec::with_capacity(a.count);
    let mut targets = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let params = DegradeParams {
            noise_sigma: a.noise_sigma,
            scale: a.scale,
            blur_sigma: a.blur_sigma,
            contrast_kappa: a.kappa,
            seed: seed.wrapping_add(i as u64),
        };
        let (x, y) = match a.mode {
            DegradeMode::Denoise => enhance::make_denoise_pair(&image, &params)?,
            DegradeMode::Enhance => enhance::make_enhance_pair(&image, &params)?,
        };
        inputs.push(x);
        targets.push(y);
    }
    let spacing = volume.spacing_mm();
    write_volume(&stack_volume(&inputs, spacing)?, a.out.join("input.vol.json"))?;
    write_volume(&stack_volume(&targets, spacing)?, a.out.join("target.vol.json"))?;
    Ok(())
}

fn enhance_cmd(a: EnhanceArgs) -> Result<()> {
    let volume = read_volume(&a.volume)?;
    let windowed = enhance::window_volume(&volume, window_arg(&a.window))?;
    let stack = enhance::enhance_volume(&windowed)?;
    write_volume_with_channels(&stack, &a.out, Some(3))?;
    Ok(())
}

fn read_specs(path: &Path) -> Result<Vec<PhantomSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let specs = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    Ok(specs)
}

fn phantom(a: PhantomArgs, seed: u64) -> Result<()> {
    let specs = match &a.spec {
        Some(p) => read_specs(p)?,
        None => {
            let shape = match a.shape {
                ShapeArg::Ellipsoid => PhantomShape::Ellipsoid,
                ShapeArg::Superellipsoid => PhantomShape::Superellipsoid { exponent: 4.0 },
                ShapeArg::Blob => PhantomShape::Blob {
                    amplitude: 0.2,
                    lobes: 3,
                },
            };
            (0..a.count).map(|i| harness::random_spec(shape.clone(), i, seed)).collect()
        }
    };
    let mut records = Vec::with_capacity(specs.len());
    for spec in &specs {
        let p = harness::generate_phantom(spec)?;
        let stem = file_stem(&spec.lesion_id);
        let vol_name = format!("{stem}.vol.json");
        let gt_name = format!("{stem}.mask.vol.json");
        write_volume(&p.volume, a.out.join(&vol_name))?;
        write_mask(&p.ground_truth, a.out.join(&gt_name))?;
        write_json(&[&p.annotation], a.out.join(format!("{stem}.recist.json")))?;
        records.push(LesionRecord {
            volume: vol_name.into(),
            annotation: p.annotation,
            ground_truth: Some(gt_name.into()),
            fold: None,
        });
    }
    write_json(&records, a.out.join("records.json"))?;
    Ok(())
}

fn split(a: SplitArgs, seed: u64) -> Result<()> {
    let text = fs::read_to_string(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    // keep paths exactly as written so the output sits next to the input
    let mut records: Vec<LesionRecord> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.records.display()))?;
    let patients: Vec<String> = records.iter().map(|r| r.annotation.patient_id.clone()).collect();
    let folds = harness::kfold_split(&patients, a.folds, seed)?;
    for (r, f) in records.iter_mut().zip(folds) {
        r.fold = Some(f);
    }
    write_json(&records, &a.out)?;
    Ok(())
}

fn experiment(a: ExperimentArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if !harness::EXPERIMENTS.contains(&a.name.as_str()) {
        return Err(usage(format!(
            "unknown experiment {:?}; expected one of {}",
            a.name,
            harness::EXPERIMENTS.join(", ")
        )));
    }
    cfg.experiment = a.name;
    cfg.seed = seed;
    if a.lesions.is_some() {
        cfg.lesions = a.lesions;
    }
    if a.records.is_some() {
        cfg.records = a.records;
    }
    let files = harness::run_experiment(&cfg, &a.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
