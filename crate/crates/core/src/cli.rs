//! `piqa prepare|train|eval|predict|export-maps`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime error.

use crate::aggregation::ScoreForm;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    load_manifest, make_synthetic_with, rescale_mos, resize_half, split, write_manifest,
    write_split_file, write_synthetic, DatasetError, DatasetRecord, SplitSpec, SyntheticConfig,
    RESIZE_KERNEL,
};
use crate::floatmap::{FloatMapError, FloatMapFile};
use crate::image::{ImageError, ImageTensor};
use crate::maps::ScalarMap;
use crate::metrics::EvalReport;
use crate::model::{ForwardOptions, ModelError, PiqaNet};
use crate::roi_head::RoiNormalizer;
use crate::trainer::{evaluate_net, history_csv, DiskSource, TrainError, Trainer};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const RUNS_DIR_ENV: &str = "PIQA_RUNS_DIR";

#[derive(Debug, Parser)]
#[command(name = "piqa", version, about = "Pixel-by-pixel no-reference image quality assessment")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Image-level score form: ms or plain.
    #[arg(long, global = true)]
    pub score_form: Option<ScoreForm>,
    /// Zero the high-level embedding at inference; trains without the context branch.
    #[arg(long, global = true)]
    pub local_only: bool,
    /// ROI normalisation: linear or softmax.
    #[arg(long, global = true)]
    pub roi_normalize: Option<RoiNormalizer>,
    /// Replace the dilated DIM branches by rate-1 convolutions.
    #[arg(long, global = true)]
    pub no_dim: bool,
    /// Training loss form: ms or plain.
    #[arg(long, global = true)]
    pub loss_form: Option<ScoreForm>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic set, or split/rescale/downsize an existing manifest.
    Prepare(PrepareArgs),
    /// Train a model; writes checkpoints and metric history under the runs root.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest, or score a `pred,gt` CSV.
    Eval(EvalArgs),
    /// Score one image and write its pMOS/ROI maps and heatmaps.
    Predict(PredictArgs),
    /// Write per-image maps for a manifest, or their pixelwise mean ROI.
    ExportMaps(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate this many synthetic images instead of reading a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side of the synthetic images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Halve image dims (writes resized PNGs into the output directory).
    #[arg(long)]
    pub resize_half: bool,
    /// Reflect-pad odd dims before halving.
    #[arg(long)]
    pub pad_first: bool,
    /// Rescale MOS to this mean (requires --rescale-std).
    #[arg(long, requires = "rescale_std")]
    pub rescale_mean: Option<f64>,
    #[arg(long, requires = "rescale_mean")]
    pub rescale_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest to split into train/test (overrides the config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Separate test manifest; the training manifest is then used whole.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Run name under the runs root.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// CSV of `pred,gt` rows to score directly.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Where to write the report JSON (default: stdout only).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for maps (default: current directory).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Write only the pixelwise mean of the ROI maps.
    #[arg(long)]
    pub mean_roi: bool,
    /// Centre-crop every map to the smallest common dims instead of failing.
    #[arg(long)]
    pub crop_to_common: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    BadData(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    FloatMap(#[from] FloatMapError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d),
            TrainError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            TrainError::EmptySplit(_) | TrainError::BatchTooLarge { .. } | TrainError::MixedDims { .. } => {
                CliError::BadData(e.to_string())
            }
            other => CliError::Train(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Image(_) | CliError::BadData(_) => 2,
            CliError::Checkpoint(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let flags = cli.common;
    match cli.command {
        Command::Prepare(a) => prepare(&flags, a),
        Command::Train(a) => train(&flags, a),
        Command::Eval(a) => eval(&flags, a),
        Command::Predict(a) => predict(&flags, a),
        Command::ExportMaps(a) => export_maps(&flags, a),
    }
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Config file (if any) with command-line overrides applied.
pub fn effective_config(flags: &CommonFlags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(s) = flags.seed {
        t.seed = s;
        cfg.data.split_seed = s;
    }
    if let Some(f) = flags.loss_form {
        t.loss_form = f;
    }
    if let Some(n) = flags.roi_normalize {
        t.roi_normalize = n;
    }
    if flags.no_dim {
        t.use_dim = false;
    }
    if flags.local_only {
        t.use_highlevel = false;
        t.use_dim = false;
    }
    if let Some(f) = flags.score_form {
        cfg.score_form = Some(f);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serialises");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn prepare(flags: &CommonFlags, a: PrepareArgs) -> Result<(), CliError> {
    let seed = flags.seed.unwrap_or(0);
    create_dir(&a.out)?;
    let records = match (a.synthetic, &a.manifest) {
        (Some(n), None) => {
            let cfg = SyntheticConfig {
                width: a.size,
                height: a.size,
                ..SyntheticConfig::default()
            };
            let samples = make_synthetic_with(&cfg, n, seed)?;
            let recs = write_synthetic(&a.out, &samples)?;
            write_json(
                &a.out.join("synthetic.json"),
                &json!({ "seed": seed, "n": n, "config": cfg }),
            )?;
            recs
        }
        (None, Some(m)) => {
            let manifest = load_manifest(m)?;
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            let mut recs = manifest.records;
            if a.resize_half {
                recs = downsize_all(&recs, &a.out, a.pad_first)?;
            }
            recs
        }
        _ => {
            return Err(CliError::Usage(
                "prepare needs exactly one of --synthetic N or --manifest PATH".into(),
            ))
        }
    };
    let records = match (a.rescale_mean, a.rescale_std) {
        (Some(m), Some(s)) => rescale_mos(&records, m, s)?,
        _ => records,
    };
    let spec = SplitSpec {
        seed,
        train_fraction: a.train_fraction,
    };
    let (train, test) = split(&records, spec)?;
    write_manifest(&a.out.join("train.csv"), &train)?;
    write_manifest(&a.out.join("test.csv"), &test)?;
    write_split_file(&a.out.join("split.csv"), &train, &test)?;
    write_json(
        &a.out.join("prepare.json"),
        &json!({
            "seed": seed,
            "train_fraction": a.train_fraction,
            "train": train.len(),
            "test": test.len(),
            "resize_kernel": a.resize_half.then_some(RESIZE_KERNEL),
            "rescale": a.rescale_mean.zip(a.rescale_std),
        }),
    )?;
    println!("{} train / {} test records in {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn downsize_all(
    records: &[DatasetRecord],
    out: &Path,
    pad_first: bool,
) -> Result<Vec<DatasetRecord>, CliError> {
    let dir = out.join("images");
    create_dir(&dir)?;
    records
        .iter()
        .map(|r| {
            let img = ImageTensor::load(&r.image_path)?;
            let small = resize_half(&img, pad_first)?;
            let path = dir.join(format!("{}.png", r.image_id));
            small.save_png(&path)?;
            Ok(DatasetRecord {
                image_path: path,
                ..r.clone()
            })
        })
        .collect()
}

fn train(flags: &CommonFlags, a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = effective_config(flags)?;
    if let Some(m) = a.manifest {
        cfg.data.manifest = Some(m);
    }
    if let Some(m) = a.test_manifest {
        cfg.data.test_manifest = Some(m);
    }
    if let Some(n) = a.name {
        cfg.run_name = n;
    }
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("no training manifest (data.manifest or --manifest)".into()))?;
    let mut records = read_records(&manifest_path)?;
    let mut test_records = match &cfg.data.test_manifest {
        Some(p) => Some(read_records(p)?),
        None => None,
    };
    if let Some((m, s)) = cfg.data.rescale {
        records = rescale_mos(&records, m, s)?;
        if let Some(t) = test_records.take() {
            test_records = Some(rescale_mos(&t, m, s)?);
        }
    }
    let (train_set, test_set) = match test_records {
        Some(t) => (records, t),
        None => split(
            &records,
            SplitSpec {
                seed: cfg.data.split_seed,
                train_fraction: cfg.data.train_fraction,
            },
        )?,
    };
    let run_dir = runs_root().join(&cfg.run_name);
    create_dir(&run_dir)?;
    let snapshot = serde_json::to_value(&cfg).expect("config serialises");
    write_json(&run_dir.join("config.json"), &snapshot)?;
    write_split_file(&run_dir.join("split.csv"), &train_set, &test_set)?;
    eprintln!("effective config: {}", serde_json::to_string(&snapshot).unwrap());

    let train_src = DiskSource { records: train_set };
    let test_src = DiskSource { records: test_set };
    let mut trainer = Trainer::new(cfg.train.clone())?.with_run_dir(&run_dir);
    let eval = trainer.fit(&train_src, &test_src)?;
    std::fs::write(run_dir.join("history.csv"), history_csv(&trainer.history))
        .map_err(io_err(&run_dir.join("history.csv")))?;
    let report = report_json(eval.report.as_ref(), eval.rmse, eval.predictions.len(), &cfg);
    write_json(&run_dir.join("report.json"), &report)?;
    if let Some(r) = &eval.report {
        println!("{r}");
    }
    println!("run written to {}", run_dir.display());
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let m = load_manifest(path)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(u) = m.unreadable.first() {
        return Err(CliError::BadData(format!(
            "{}: row {}: unreadable image {}: {}",
            path.display(),
            u.row,
            u.path.display(),
            u.reason
        )));
    }
    Ok(m.records)
}

fn report_json(
    report: Option<&EvalReport>,
    rmse: f64,
    n: usize,
    cfg: &RunConfig,
) -> serde_json::Value {
    json!({
        "plcc": report.map(|r| r.plcc),
        "srcc": report.map(|r| r.srcc),
        "rmse": rmse,
        "n": n,
        "mos_range": report.map(|r| [r.mos_min, r.mos_max]),
        "score_form": cfg.score_form().to_string(),
        "seed": cfg.train.seed,
        "config": cfg,
    })
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, PiqaNet<f32>), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.build_net()?;
    Ok((ckpt, net))
}

/// Score form for inference: flag, then config file, then the form the
/// checkpoint was trained with.
fn inference_form(flags: &CommonFlags, ckpt: &Checkpoint) -> Result<ScoreForm, CliError> {
    if let Some(f) = flags.score_form {
        return Ok(f);
    }
    if flags.config.is_some() {
        let cfg = effective_config(flags)?;
        if let Some(f) = cfg.score_form {
            return Ok(f);
        }
    }
    Ok(ckpt
        .train
        .as_ref()
        .map_or(ScoreForm::MeanShifted, |t| t.effective_loss_form()))
}

fn eval(flags: &CommonFlags, a: EvalArgs) -> Result<(), CliError> {
    let seed = flags.seed.unwrap_or(0);
    let (pred, gt, extra) = match (&a.predictions, &a.checkpoint, &a.manifest) {
        (Some(p), None, None) => {
            let (pred, gt) = read_prediction_pairs(p)?;
            (pred, gt, json!({ "source": p }))
        }
        (None, Some(c), Some(m)) => {
            let (ckpt, mut net) = load_checkpoint(c)?;
            let form = inference_form(flags, &ckpt)?;
            let records = read_records(m)?;
            let opts = ForwardOptions {
                zero_highlevel: flags.local_only,
            };
            let e = evaluate_net(&mut net, &DiskSource { records }, form, opts)?;
            (
                e.predictions,
                e.targets,
                json!({ "checkpoint": c, "manifest": m, "score_form": form.to_string(),
                        "local_only": flags.local_only, "net": ckpt.net }),
            )
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs --predictions CSV, or --checkpoint DIR with --manifest CSV".into(),
            ))
        }
    };
    let report = EvalReport::compute(&pred, &gt).map_err(|e| CliError::BadData(e.to_string()))?;
    let out = json!({
        "plcc": report.plcc,
        "srcc": report.srcc,
        "rmse": report.rmse,
        "n": report.n,
        "mos_range": [report.mos_min, report.mos_max],
        "seed": seed,
        "inputs": extra,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    eprintln!("{report}");
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    Ok(())
}

/// Reads `pred,gt` rows; a non-numeric first row is taken as a header.
pub fn read_prediction_pairs(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    if !path.exists() {
        return Err(CliError::Data(DatasetError::MissingFile(path.to_path_buf())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::BadData(format!("{}: {e}", path.display())))?;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::BadData(format!("{}: {e}", path.display())))?;
        let parsed: Option<(f64, f64)> = (row.len() == 2)
            .then(|| Some((row[0].parse().ok()?, row[1].parse().ok()?)))
            .flatten();
        match parsed {
            Some((p, g)) => {
                pred.push(p);
                gt.push(g);
            }
            None if i == 0 => continue,
            None => {
                return Err(CliError::Data(DatasetError::MalformedRow {
                    path: path.to_path_buf(),
                    row: i as u64 + 1,
                    reason: "expected `pred,gt`".into(),
                }))
            }
        }
    }
    Ok((pred, gt))
}

/// Min-max normalised grayscale PNG plus a JSON sidecar holding the range.
pub fn write_heatmap(map: &ScalarMap<f32>, png: &Path) -> Result<(f32, f32), CliError> {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    let img = image::GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.get(x as usize, y as usize);
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Luma([(t * 255.0).round() as u8])
    });
    img.save_with_format(png, image::ImageFormat::Png)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", png.display())))?;
    write_json(
        &png.with_extension("json"),
        &json!({ "min": lo, "max": hi, "width": map.width(), "height": map.height() }),
    )?;
    Ok((lo, hi))
}

fn predict(flags: &CommonFlags, a: PredictArgs) -> Result<(), CliError> {
    let (ckpt, mut net) = load_checkpoint(&a.checkpoint)?;
    let form = inference_form(flags, &ckpt)?;
    let img = ImageTensor::load(&a.image)?;
    let opts = ForwardOptions {
        zero_highlevel: flags.local_only,
    };
    let pred = net.predict(&img, form, opts)?;
    create_dir(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let pmos_path = a.out.join(format!("{stem}_pmos.pmap"));
    let roi_path = a.out.join(format!("{stem}_roi.pmap"));
    FloatMapFile::from_map(&pred.pmos).write(&pmos_path)?;
    FloatMapFile::from_map(pred.roi.map()).write(&roi_path)?;
    let pmos_png = a.out.join(format!("{stem}_pmos.png"));
    let roi_png = a.out.join(format!("{stem}_roi.png"));
    let pmos_range = write_heatmap(&pred.pmos, &pmos_png)?;
    let roi_range = write_heatmap(pred.roi.map(), &roi_png)?;
    let out = json!({
        "image": a.image,
        "score": pred.score.value,
        "score_form": form.to_string(),
        "local_only": flags.local_only,
        "width": img.width(),
        "height": img.height(),
        "pmos": pmos_path,
        "roi": roi_path,
        "pmos_heatmap": { "path": pmos_png, "min": pmos_range.0, "max": pmos_range.1 },
        "roi_heatmap": { "path": roi_png, "min": roi_range.0, "max": roi_range.1 },
        "seed": flags.seed.unwrap_or(0),
        "net": ckpt.net,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

/// Pixelwise mean of equally sized ROI maps.
pub fn mean_map(maps: &[ScalarMap<f32>]) -> Option<ScalarMap<f32>> {
    let first = maps.first()?;
    let (w, h) = first.dims();
    let mut acc = vec![0.0f64; w * h];
    for m in maps {
        assert_eq!(m.dims(), (w, h), "maps must share dims");
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += *v as f64;
        }
    }
    let n = maps.len() as f64;
    Some(ScalarMap::new(w, h, acc.into_iter().map(|v| (v / n) as f32).collect()))
}

/// Centre crop, renormalised to sum to one.
fn center_crop_weights(m: &ScalarMap<f32>, w: usize, h: usize) -> ScalarMap<f32> {
    let (x0, y0) = ((m.width() - w) / 2, (m.height() - h) / 2);
    let vals: Vec<f32> = (0..h)
        .flat_map(|y| (0..w).map(move |x| m.get(x0 + x, y0 + y)))
        .collect();
    let total: f64 = vals.iter().map(|&v| v as f64).sum();
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    ScalarMap::new(w, h, vals.iter().map(|&v| (v as f64 * scale) as f32).collect())
}

fn export_maps(flags: &CommonFlags, a: ExportArgs) -> Result<(), CliError> {
    let (ckpt, mut net) = load_checkpoint(&a.checkpoint)?;
    let form = inference_form(flags, &ckpt)?;
    let records = read_records(&a.manifest)?;
    if records.is_empty() {
        return Err(CliError::BadData(format!("{}: manifest is empty", a.manifest.display())));
    }
    create_dir(&a.out)?;
    let opts = ForwardOptions {
        zero_highlevel: flags.local_only,
    };
    let mut rois = Vec::new();
    for r in &records {
        let img = ImageTensor::load(&r.image_path)?;
        let pred = net.predict(&img, form, opts)?;
        if a.mean_roi {
            rois.push(pred.roi.into_map());
            continue;
        }
        let stem = &r.image_id;
        FloatMapFile::from_map(&pred.pmos).write(&a.out.join(format!("{stem}_pmos.pmap")))?;
        FloatMapFile::from_map(pred.roi.map()).write(&a.out.join(format!("{stem}_roi.pmap")))?;
        write_heatmap(&pred.pmos, &a.out.join(format!("{stem}_pmos.png")))?;
        write_heatmap(pred.roi.map(), &a.out.join(format!("{stem}_roi.png")))?;
        println!(
            "{}",
            json!({ "image_id": stem, "score": pred.score.value, "score_form": form.to_string() })
        );
    }
    if a.mean_roi {
        let (w, h) = rois[0].dims();
        if rois.iter().any(|m| m.dims() != (w, h)) {
            if !a.crop_to_common {
                return Err(CliError::BadData(format!(
                    "{}: images differ in size; pass --crop-to-common",
                    a.manifest.display()
                )));
            }
            let cw = rois.iter().map(|m| m.width()).min().unwrap();
            let ch = rois.iter().map(|m| m.height()).min().unwrap();
            rois = rois.iter().map(|m| center_crop_weights(m, cw, ch)).collect();
        }
        let mean = mean_map(&rois).expect("non-empty");
        FloatMapFile::from_map(&mean).write(&a.out.join("mean_roi.pmap"))?;
        let range = write_heatmap(&mean, &a.out.join("mean_roi.png"))?;
        let out = json!({
            "images": rois.len(),
            "width": mean.width(),
            "height": mean.height(),
            "sum": mean.values().iter().map(|&v| v as f64).sum::<f64>(),
            "center_share": center_share(&mean),
            "min": range.0,
            "max": range.1,
            "seed": flags.seed.unwrap_or(0),
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    }
    Ok(())
}

/// Weight inside the central region covering 25% of the area (half of each side).
pub fn center_share(m: &ScalarMap<f32>) -> f64 {
    let (w, h) = m.dims();
    let (x0, x1) = (w / 4, w - w / 4);
    let (y0, y1) = (h / 4, h - h / 4);
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = m.get(x, y) as f64;
            total += v;
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}
