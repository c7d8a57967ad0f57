//! The `mirrorscope` command line.
//!
//! Exit codes: 0 success, 1 internal failure (including failed gradient
//! checks), 2 bad input.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::gradcheck::{self, GradCheckOptions};
use crate::image::{read_mask, read_prediction, resize_bilinear};
use crate::metrics::{
    dataset_similarity, evaluate_image, EvalConfig, ImageRecord, MetricReport, PredictionMap,
    Threshold,
};
use crate::neck::{assemble_neck, parse_upsample, AttentionKind, NeckConfig, NeckParams, Placement, PyramidInput};
use crate::polygon::{
    decode_vertices, encode_mask_to_polygon, format_labels, head_parameter_overhead,
    polygon_iou, rasterize_polygon,
};
use crate::tensor::{read_manifest, FeatureMap, ParamStore, TensorFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mirrorscope", version, about = "Attention-gated neck, polygon labels and saliency metrics")]
pub struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MAE / F-beta / E-measure / S-measure of predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Mean pairwise SSIM of a directory of images.
    Similarity(SimilarityArgs),
    /// Forward pass of the fusion neck over backbone tensors.
    NeckRun(NeckRunArgs),
    /// Finite-difference check of every differentiable block.
    Gradcheck(GradcheckArgs),
    /// Mask -> polygon label -> raster round trip.
    Polygon(PolygonArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output path; the JSON document goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_BETA2)]
    pub beta2: f64,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// `adaptive` or a fixed threshold in [0, 1].
    #[arg(long, default_value = "adaptive")]
    pub threshold: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Number of distinct pairs to sample; all pairs when it covers them.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    /// Side length images are resized to before comparison.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct NeckRunArgs {
    /// Backbone level tensors, highest resolution first.
    #[arg(long = "level")]
    pub level: Vec<PathBuf>,
    /// Manifest (`name path` lines) listing the levels in order.
    #[arg(long)]
    pub levels: Option<PathBuf>,
    /// `key=value` neck configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameter manifest; parameters are drawn from `--seed` when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Also write the parameters used, with a manifest, into this directory.
    #[arg(long)]
    pub save_params: Option<PathBuf>,
    #[arg(long)]
    pub placement: Option<String>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub upsample: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random configurations per op.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PolygonArgs {
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = crate::polygon::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::polygon::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Where `<stem>.poly.txt` label files go; defaults to the mask directory.
    #[arg(long)]
    pub labels_dir: Option<PathBuf>,
    /// Feature width of the detection layer, for the parameter-overhead line.
    #[arg(long, default_value_t = 128)]
    pub head_channels: usize,
    #[arg(long, default_value_t = 3)]
    pub anchors: usize,
    #[command(flatten)]
    pub common: Common,
}

/// Provenance echoed into every output document.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub config: Option<String>,
    pub output: Option<String>,
    pub seed: u64,
    pub flags: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, common: &Common) -> Self {
        Self {
            command: command.to_string(),
            inputs: Vec::new(),
            config: None,
            output: common.out.as_ref().map(|p| p.display().to_string()),
            seed: common.seed,
            flags: BTreeMap::new(),
        }
    }

    fn flag(mut self, k: &str, v: impl ToString) -> Self {
        self.flags.insert(k.to_string(), v.to_string());
        self
    }

    fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn bad_input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_BAD_INPUT,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::bad_input(e.to_string())
    }
}

type CmdResult = std::result::Result<Outcome, Failure>;

/// What a command produced: text for stdout and its exit code.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

/// Parses `args` (including the program name), runs, prints, returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{}", out.stdout);
            out.code
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::internal(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Eval(a) => cmd_eval(&a),
        Command::Similarity(a) => cmd_similarity(&a),
        Command::NeckRun(a) => cmd_neck_run(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Polygon(a) => cmd_polygon(&a),
    })
}

/// Emits `doc` to `--out` (stdout gets a one-line summary) or to stdout.
fn emit(doc: &impl Serialize, out: Option<&Path>, summary: String) -> std::result::Result<String, Failure> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| Failure::internal(e.to_string()))? + "\n";
    match out {
        Some(path) => {
            fs::write(path, &text)
                .map_err(|e| Failure::internal(format!("{}: {e}", path.display())))?;
            Ok(summary)
        }
        None => Ok(text),
    }
}

/// Regular files in `dir` with one of `exts`, keyed by stem, sorted.
fn files_by_stem(dir: &Path, exts: &[&str]) -> std::result::Result<BTreeMap<String, PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::bad_input(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Failure::bad_input(format!("{}: {e}", dir.display())))?
            .path();
        let ext = path.extension().and_then(OsStr::to_str).unwrap_or("");
        if !path.is_file() || !exts.contains(&ext) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(OsStr::to_str) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_prediction_any(path: &Path) -> crate::Result<PredictionMap> {
    if path.extension() == Some(OsStr::new("fmap")) {
        let t = TensorFile::read(path)?;
        let (h, w) = match t.dims.as_slice() {
            [h, w] | [1, 1, h, w] => (*h, *w),
            _ => {
                return Err(Error::Shape(format!(
                    "{}: prediction tensor must be (h, w) or (1, 1, h, w), got {:?}",
                    path.display(),
                    t.dims
                )))
            }
        };
        PredictionMap::new(h, w, t.data)
    } else {
        read_prediction(path)
    }
}

#[derive(Serialize)]
struct Warnings {
    count: usize,
    unmatched: Vec<String>,
}

#[derive(Serialize)]
struct EvalDocument {
    manifest: RunManifest,
    report: MetricReport,
    warnings: Warnings,
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let threshold = match a.threshold.as_str() {
        "adaptive" => Threshold::Adaptive,
        s => Threshold::Fixed(
            s.parse::<f64>()
                .ok()
                .filter(|t| (0.0..=1.0).contains(t))
                .ok_or_else(|| Failure::bad_input(format!("bad threshold `{s}`")))?,
        ),
    };
    let cfg = EvalConfig {
        beta2: a.beta2,
        alpha: a.alpha,
        threshold,
    };
    let preds = files_by_stem(&a.pred, &["pgm", "fmap"])?;
    let gts = files_by_stem(&a.gt, &["pgm"])?;
    let mut unmatched: Vec<String> = preds
        .iter()
        .filter(|(k, _)| !gts.contains_key(*k))
        .chain(gts.iter().filter(|(k, _)| !preds.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    unmatched.sort();
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (k, p, g)))
        .collect();
    if pairs.is_empty() {
        return Err(Failure::bad_input(format!(
            "no matching filenames between {} and {}",
            a.pred.display(),
            a.gt.display()
        )));
    }
    let records = pairs
        .par_iter()
        .map(|(id, p, g)| {
            let pred = read_prediction_any(p)?;
            let gt = read_mask(g)?;
            evaluate_image(id, &pred, &gt, &cfg)
        })
        .collect::<crate::Result<Vec<ImageRecord>>>()?;
    let report = MetricReport::from_records(records, cfg)?;
    let manifest = RunManifest::new("eval", &a.common)
        .input(&a.pred)
        .input(&a.gt)
        .flag("beta2", a.beta2)
        .flag("alpha", a.alpha)
        .flag("threshold", &a.threshold);
    let agg = &report.aggregate;
    let summary = format!(
        "images {} mae {:.6} f_beta {} e_measure {:.6} s_measure {:.6} warnings {}\n",
        agg.images,
        agg.mae,
        agg.f_beta.map_or("undefined".to_string(), |f| format!("{f:.6}")),
        agg.e_measure,
        agg.s_measure,
        unmatched.len() + report.undefined_f_beta
    );
    let doc = EvalDocument {
        manifest,
        warnings: Warnings {
            count: unmatched.len() + report.undefined_f_beta,
            unmatched,
        },
        report,
    };
    Ok(Outcome {
        stdout: emit(&doc, a.common.out.as_deref(), summary)?,
        code: EXIT_OK,
    })
}

#[derive(Serialize)]
struct SimilarityDocument {
    manifest: RunManifest,
    images: usize,
    score: f64,
    pairs: usize,
    exhaustive: bool,
}

pub fn cmd_similarity(a: &SimilarityArgs) -> CmdResult {
    if a.size < crate::metrics::SSIM_WINDOW {
        return Err(Failure::bad_input(format!("--size must be at least {}", crate::metrics::SSIM_WINDOW)));
    }
    let files = files_by_stem(&a.images, &["pgm"])?;
    let images = files
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| read_prediction(p).map(|m| resize_bilinear(&m, a.size, a.size)))
        .collect::<crate::Result<Vec<_>>>()?;
    if images.len() < 2 {
        return Err(Failure::bad_input(format!(
            "{} holds {} readable images, need at least 2",
            a.images.display(),
            images.len()
        )));
    }
    let r = dataset_similarity(&images, a.pairs, a.common.seed)?;
    let doc = SimilarityDocument {
        manifest: RunManifest::new("similarity", &a.common)
            .input(&a.images)
            .flag("pairs", a.pairs)
            .flag("size", a.size),
        images: images.len(),
        score: r.score,
        pairs: r.pairs,
        exhaustive: r.exhaustive,
    };
    let summary = format!("ssim {:.6} pairs {}\n", r.score, r.pairs);
    Ok(Outcome {
        stdout: emit(&doc, a.common.out.as_deref(), summary)?,
        code: EXIT_OK,
    })
}

#[derive(Serialize)]
struct NeckDocument<'a> {
    manifest: RunManifest,
    config: &'a NeckConfig,
    output_dims: [usize; 4],
}

pub fn cmd_neck_run(a: &NeckRunArgs) -> CmdResult {
    let out = a
        .common
        .out
        .as_ref()
        .ok_or_else(|| Failure::bad_input("neck-run needs --out"))?;
    let mut level_paths = a.level.clone();
    if let Some(m) = &a.levels {
        level_paths.extend(read_manifest(m)?.into_iter().map(|(_, p)| p));
    }
    if level_paths.is_empty() {
        return Err(Failure::bad_input("no pyramid levels given (--level or --levels)"));
    }
    let levels = level_paths
        .iter()
        .map(|p| TensorFile::read(p)?.to_feature_map())
        .collect::<crate::Result<Vec<FeatureMap>>>()?;
    let pyramid = PyramidInput::new(levels)?;

    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::bad_input(format!("{}: {e}", p.display())))?;
            NeckConfig::parse(&text)?
        }
        None => NeckConfig {
            level_channels: pyramid.levels().iter().map(|l| l.channels()).collect(),
            ..NeckConfig::default()
        },
    };
    if let Some(p) = &a.placement {
        cfg.placement = p.parse::<Placement>()?;
    }
    if let Some(s) = &a.attention {
        cfg.attention = s.parse::<AttentionKind>()?;
    }
    if let Some(u) = &a.upsample {
        cfg.upsample = parse_upsample(u)?;
    }
    cfg.validate()?;

    let params = match &a.params {
        Some(m) => NeckParams::from_store(&cfg, &ParamStore::load(m)?)?,
        None => NeckParams::random(&cfg, &mut crate::seeded_rng(a.common.seed))?,
    };
    let fused = assemble_neck(&pyramid, &cfg, &params)?;
    TensorFile::from(&fused)
        .write(out)
        .map_err(|e| Failure::internal(e.to_string()))?;
    if let Some(dir) = &a.save_params {
        params
            .to_store()
            .save(dir, "params.txt")
            .map_err(|e| Failure::internal(e.to_string()))?;
    }

    let mut manifest = RunManifest::new("neck-run", &a.common);
    for p in &level_paths {
        manifest = manifest.input(p);
    }
    manifest.config = a.config.as_ref().map(|p| p.display().to_string());
    if let Some(p) = &a.params {
        manifest = manifest.flag("params", p.display());
    }
    for (k, v) in [("placement", &a.placement), ("attention", &a.attention), ("upsample", &a.upsample)] {
        if let Some(v) = v {
            manifest = manifest.flag(k, v);
        }
    }
    let doc = NeckDocument {
        manifest,
        config: &cfg,
        output_dims: fused.dims(),
    };
    let sidecar = out.with_extension("json");
    let summary = emit(&doc, Some(&sidecar), format!("wrote {} {:?}\n", out.display(), fused.dims()))?;
    Ok(Outcome {
        stdout: summary,
        code: EXIT_OK,
    })
}

#[derive(Serialize)]
struct GradcheckDocument {
    manifest: RunManifest,
    report: gradcheck::GradCheckReport,
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let opts = GradCheckOptions {
        cases: a.cases,
        seed: a.common.seed,
        inject_fault: a.inject_fault,
        ..GradCheckOptions::default()
    };
    let report = gradcheck::run(&opts).map_err(|e| Failure::internal(e.to_string()))?;
    let code = if report.passed { EXIT_OK } else { EXIT_INTERNAL };
    let table = report.table();
    let mut stdout = table.clone();
    if let Some(path) = &a.common.out {
        let doc = GradcheckDocument {
            manifest: RunManifest::new("gradcheck", &a.common).flag("cases", a.cases),
            report,
        };
        emit(&doc, Some(path), String::new())?;
    }
    stdout.push_str(if code == EXIT_OK { "all gradients match\n" } else { "gradient mismatch\n" });
    Ok(Outcome { stdout, code })
}

#[derive(Serialize)]
struct PolygonRecord {
    id: String,
    vertices: usize,
    iou: f64,
}

#[derive(Serialize)]
struct PolygonDocument {
    manifest: RunManifest,
    masks: Vec<PolygonRecord>,
    mean_iou: Option<f64>,
    head_parameter_overhead: usize,
    warnings: Vec<String>,
}

pub fn cmd_polygon(a: &PolygonArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::bad_input("--threshold must be in [0, 1]"));
    }
    if a.bins < 3 {
        return Err(Failure::bad_input("--bins must be at least 3"));
    }
    let files = files_by_stem(&a.masks, &["pgm"])?;
    let labels_dir = a.labels_dir.clone().unwrap_or_else(|| a.masks.clone());
    fs::create_dir_all(&labels_dir).map_err(|e| Failure::internal(format!("{}: {e}", labels_dir.display())))?;

    let entries: Vec<(&String, &PathBuf)> = files.iter().collect();
    let results = entries
        .par_iter()
        .map(|(id, path)| -> std::result::Result<Result<PolygonRecord, String>, Failure> {
            let mask = read_mask(path)?;
            let raw = match encode_mask_to_polygon(&mask, a.bins) {
                Ok(p) => p,
                Err(Error::EmptyMask) => return Ok(Err(format!("{id}: empty mask, skipped"))),
                Err(e) => return Err(e.into()),
            };
            let poly = decode_vertices(&raw, a.threshold);
            let raster = rasterize_polygon(&poly, mask.height(), mask.width());
            if raster.degenerate {
                return Ok(Err(format!(
                    "{id}: {} vertices survive, polygon is degenerate, skipped",
                    poly.vertices.len()
                )));
            }
            let label = labels_dir.join(format!("{id}.poly.txt"));
            fs::write(&label, format_labels(std::slice::from_ref(&poly)))
                .map_err(|e| Failure::internal(format!("{}: {e}", label.display())))?;
            Ok(Ok(PolygonRecord {
                id: id.to_string(),
                vertices: poly.vertices.len(),
                iou: polygon_iou(&mask, &raster.mask)?,
            }))
        })
        .collect::<std::result::Result<Vec<_>, Failure>>()?;
    let mut masks = Vec::new();
    let mut warnings = Vec::new();
    for r in results {
        match r {
            Ok(rec) => masks.push(rec),
            Err(w) => warnings.push(w),
        }
    }
    let mean_iou = if masks.is_empty() {
        None
    } else {
        Some(masks.iter().map(|m| m.iou).sum::<f64>() / masks.len() as f64)
    };
    let mut summary = String::new();
    for m in &masks {
        summary.push_str(&format!("{} iou {:.6}\n", m.id, m.iou));
    }
    for w in &warnings {
        summary.push_str(&format!("warning: {w}\n"));
    }
    summary.push_str(&format!(
        "mean_iou {} masks {} warnings {}\n",
        mean_iou.map_or("undefined".into(), |v| format!("{v:.6}")),
        masks.len(),
        warnings.len()
    ));
    let doc = PolygonDocument {
        manifest: RunManifest::new("polygon", &a.common)
            .input(&a.masks)
            .flag("bins", a.bins)
            .flag("threshold", a.threshold)
            .flag("labels_dir", labels_dir.display()),
        masks,
        mean_iou,
        head_parameter_overhead: head_parameter_overhead(a.head_channels, a.anchors, a.bins),
        warnings,
    };
    let stdout = match &a.common.out {
        Some(p) => emit(&doc, Some(p), summary)?,
        None => summary,
    };
    Ok(Outcome {
        stdout,
        code: EXIT_OK,
    })
}
