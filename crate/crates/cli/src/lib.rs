//! The `ugs` command line. [`run`] does all the work so tests can drive it
//! in-process; `main` only forwards the exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use ugs_core::conquer::ThresholdSchedule;
use ugs_core::decoder::{
    area_monotonicity, grad_check, load_checkpoint, nested_squares_corpus, save_checkpoint, train_toy, DecoderParams,
    DecoderSegmenter, ImageInput, TrainConfig,
};
use ugs_core::eval::{
    load_dataset, run_ar, run_benchmark, BenchmarkConfig, GranularityMode, LabelSegmenter, Segmenter,
    SweepScope, DEFAULT_MAX_CLICKS, DEFAULT_MAX_DETS,
};
use ugs_core::fixtures::{many_parts_spec, nested_scene_spec, scene_labels};
use ugs_core::hierarchy::{aggregate_proposals, build_pseudolabels, PipelineConfig, PseudoLabelSet};
use ugs_core::{read_features, write_features};

pub const DATA_DIR_ENV: &str = "UGS_DATA_DIR";

/// Everything a run can be tuned by. A `--config` file may hold any subset;
/// flags win over the file, the file wins over defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub pipeline: PipelineConfig,
    pub eval: EvalSettings,
    pub toy: TrainConfig,
    pub gradcheck: GradCheckSettings,
    pub serve: ServeSettings,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            pipeline: PipelineConfig::default(),
            eval: EvalSettings::default(),
            toy: TrainConfig::default(),
            gradcheck: GradCheckSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Granularity grid for sweeps and proposal aggregation.
    pub sweep: Vec<f64>,
    /// Use each ground-truth mask's own granularity instead of sweeping.
    pub from_gt: bool,
    pub per_dataset: bool,
    pub targets: Option<Vec<f64>>,
    pub max_clicks: usize,
    pub max_dets: usize,
    /// Proposals below this confidence are dropped before AR.
    pub conf_floor: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sweep: ugs_core::eval::default_grid(),
            from_gt: false,
            per_dataset: false,
            targets: None,
            max_clicks: DEFAULT_MAX_CLICKS,
            max_dets: DEFAULT_MAX_DETS,
            conf_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub count: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { eps: 1e-4, count: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub host: String,
    pub port: u16,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ugs", version, about = "Granularity-scored mask hierarchies: labels, evaluation, toy decoder, serving")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// JSON file overriding defaults; flags override the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build pseudo-labels for every feature file in a directory.
    GenLabels(GenLabelsArgs),
    /// Click-simulation benchmark (NoC and 1-IoU).
    EvalNoc(EvalNocArgs),
    /// Average recall of aggregated label proposals.
    EvalAr(EvalArArgs),
    /// Train the toy decoder on the nested-squares corpus.
    TrainToy(TrainToyArgs),
    /// Compare decoder backprop with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset: features, ground truth and a manifest.
    Synth(SynthArgs),
    /// Serve label files over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Default)]
pub struct PipelineFlags {
    #[arg(long)]
    pub tau_conf: Option<f64>,
    #[arg(long)]
    pub tau_overlap: Option<f64>,
    #[arg(long)]
    pub tau_area: Option<f64>,
    #[arg(long)]
    pub tau_sim: Option<f64>,
    /// Comma-separated, strictly decreasing, e.g. 0.9,0.8,0.7
    #[arg(long)]
    pub thetas: Option<String>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<u32>,
}

#[derive(Debug, Args)]
pub struct GenLabelsArgs {
    /// Directory of `.ugf` feature files; defaults to $UGS_DATA_DIR/features.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Output directory; defaults to $UGS_DATA_DIR/labels.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Adapter {
    /// Answers from the ground truth itself.
    Oracle,
    /// Answers from a directory of pseudo-labels.
    Labels,
    /// Toy decoder checkpoint.
    Decoder,
}

#[derive(Debug, Args)]
pub struct EvalNocArgs {
    /// Dataset manifest; defaults to $UGS_DATA_DIR/manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Adapter::Labels)]
    pub adapter: Adapter,
    /// Label directory for the `labels` adapter; defaults to $UGS_DATA_DIR/labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// start:stop:step, inclusive.
    #[arg(long, conflicts_with = "from_gt")]
    pub sweep: Option<String>,
    #[arg(long)]
    pub from_gt: bool,
    /// Pick one granularity for the whole dataset instead of per instance.
    #[arg(long)]
    pub per_dataset: bool,
    /// Comma-separated IoU targets.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub max_clicks: Option<usize>,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub max_dets: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint path.
    #[arg(long, default_value = "toy.ugtd")]
    pub out: PathBuf,
    /// Per-epoch metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check a trained checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Nested,
    ManyParts,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; defaults to $UGS_DATA_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SynthKind::Nested)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long)]
    pub patch_size: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Label directory; defaults to $UGS_DATA_DIR/labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// A failure reported as `{"error":{"kind","message"}}` on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"error": {"kind": self.kind, "message": self.message}}).to_string()
    }
}

macro_rules! error_kind {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($kind, e)
            }
        })*
    };
}

error_kind! {
    std::io::Error => "io",
    serde_json::Error => "json",
    ugs_core::hierarchy::HierarchyError => "pipeline",
    ugs_core::features::FeatureError => "features",
    ugs_core::conquer::ConquerError => "config",
    ugs_core::eval::EvalError => "eval",
    ugs_core::decoder::DecoderError => "decoder",
    ugs_serve::ServeError => "serve",
}

type CliResult<T> = Result<T, CliError>;

/// Parse `start:stop:step` (inclusive) or a single value.
pub fn parse_sweep(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::new("usage", format!("bad sweep {spec:?}, expected start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match parts[..] {
        [v] => Ok(vec![v]),
        [start, stop, step] if step > 0.0 && stop >= start => {
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=n)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(bad()),
    }
}

pub fn parse_list(spec: &str, what: &str) -> CliResult<Vec<f64>> {
    spec.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::new("usage", format!("bad {what} list {spec:?}")))
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Explicit path, else `$UGS_DATA_DIR/<sub>`.
fn resolve(path: &Option<PathBuf>, sub: &str, flag: &str) -> CliResult<PathBuf> {
    if let Some(p) = path {
        return Ok(p.clone());
    }
    match data_dir() {
        Some(d) if sub.is_empty() => Ok(d),
        Some(d) => Ok(d.join(sub)),
        None => Err(CliError::new(
            "usage",
            format!("--{flag} not given and {DATA_DIR_ENV} is not set"),
        )),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ResolvedConfig> {
    match path {
        None => Ok(ResolvedConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))
        }
    }
}

fn apply_pipeline_flags(cfg: &mut PipelineConfig, f: &PipelineFlags) -> CliResult<()> {
    if let Some(v) = f.tau_conf {
        cfg.divide.tau_conf = v;
    }
    if let Some(v) = f.tau_sim {
        cfg.divide.tau_sim = v;
    }
    if let Some(v) = f.max_instances {
        cfg.divide.max_instances = v;
    }
    if let Some(v) = f.tau_overlap {
        cfg.hierarchy.tau_overlap = v;
    }
    if let Some(v) = f.tau_area {
        cfg.hierarchy.tau_area = v;
    }
    if let Some(v) = f.nms_iou {
        cfg.hierarchy.nms_iou = v;
    }
    if let Some(v) = f.patch_size {
        cfg.patch_size = v;
    }
    if let Some(t) = &f.thetas {
        cfg.thetas = ThresholdSchedule::new(parse_list(t, "theta")?)?;
    }
    Ok(())
}

/// Fold the config file and every flag into one config. Pure apart from
/// reading the config file.
pub fn resolve_config(cli: &Cli) -> CliResult<ResolvedConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    // the run seed drives every seeded component
    cfg.pipeline.divide.eigen.seed = cfg.seed;
    cfg.toy.seed = cfg.seed;
    match &cli.command {
        Command::GenLabels(a) => apply_pipeline_flags(&mut cfg.pipeline, &a.pipeline)?,
        Command::EvalNoc(a) => {
            if let Some(s) = &a.sweep {
                cfg.eval.sweep = parse_sweep(s)?;
            }
            if a.from_gt {
                cfg.eval.from_gt = true;
            }
            if a.per_dataset {
                cfg.eval.per_dataset = true;
            }
            if let Some(t) = &a.targets {
                cfg.eval.targets = Some(parse_list(t, "target")?);
            }
            if let Some(m) = a.max_clicks {
                cfg.eval.max_clicks = m;
            }
        }
        Command::EvalAr(a) => {
            if let Some(s) = &a.sweep {
                cfg.eval.sweep = parse_sweep(s)?;
            }
            if let Some(m) = a.max_dets {
                cfg.eval.max_dets = m;
            }
        }
        Command::TrainToy(a) => {
            if let Some(e) = a.epochs {
                cfg.toy.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.toy.lr = lr;
            }
        }
        Command::Gradcheck(a) => {
            if let Some(e) = a.eps {
                cfg.gradcheck.eps = e;
            }
            if let Some(c) = a.count {
                cfg.gradcheck.count = c;
            }
        }
        Command::Synth(a) => {
            if let Some(p) = a.patch_size {
                cfg.pipeline.patch_size = p;
            }
        }
        Command::Serve(a) => {
            if let Some(p) = a.port {
                cfg.serve.port = p;
            }
        }
    }
    if cfg.eval.sweep.is_empty() || cfg.eval.sweep.iter().any(|g| !(0.1..=1.0).contains(g)) {
        return Err(CliError::new("config", format!("sweep {:?} must be nonempty within [0.1, 1.0]", cfg.eval.sweep)));
    }
    if cfg.jobs == Some(0) {
        return Err(CliError::new("config", "--jobs must be at least 1"));
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenLabels(_) => "gen-labels",
        Command::EvalNoc(_) => "eval-noc",
        Command::EvalAr(_) => "eval-ar",
        Command::TrainToy(_) => "train-toy",
        Command::Gradcheck(_) => "gradcheck",
        Command::Synth(_) => "synth",
        Command::Serve(_) => "serve",
    }
}

/// The reproducibility header printed first by every run.
pub fn config_echo(command: &str, cfg: &ResolvedConfig) -> String {
    let v = serde_json::json!({"command": command, "config": cfg});
    format!("config {v}")
}

/// Parse `argv` (program name first) and run. Returns the process exit
/// code: 0 on success, 2 for usage errors, 1 for anything else.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            return match e.kind() {
                DisplayHelp | DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
                _ => {
                    let kind = match e.kind() {
                        ArgumentConflict => "conflicting-flags",
                        UnknownArgument => "unknown-flag",
                        _ => "usage",
                    };
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
                    let _ = writeln!(err, "{}", CliError::new(kind, first).to_json());
                    2
                }
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json());
            if e.kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    writeln!(out, "{}", config_echo(command_name(&cli.command), &cfg))?;
    if let Some(j) = cfg.jobs {
        // fails harmlessly when a pool already exists (in-process tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match &cli.command {
        Command::GenLabels(a) => gen_labels(a, &cfg, out),
        Command::EvalNoc(a) => eval_noc(a, &cfg, out),
        Command::EvalAr(a) => eval_ar(a, &cfg, out),
        Command::TrainToy(a) => train(a, &cfg, out),
        Command::Gradcheck(a) => gradcheck(a, &cfg, out),
        Command::Synth(a) => synth(a, &cfg, out),
        Command::Serve(a) => serve(a, &cfg, out),
    }
}

fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_labels(a: &GenLabelsArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    use rayon::prelude::*;
    let src = resolve(&a.features_dir, "features", "features-dir")?;
    let dst = resolve(&a.out, "labels", "out")?;
    let inputs = files_with_ext(&src, "ugf")?;
    if inputs.is_empty() {
        return Err(CliError::new("io", format!("no .ugf files in {}", src.display())));
    }
    std::fs::create_dir_all(&dst)?;
    let results: Vec<CliResult<(String, PseudoLabelSet)>> = inputs
        .par_iter()
        .map(|p| {
            let map = read_features(p).map_err(|e| CliError::new("features", format!("{}: {e}", p.display())))?;
            let id = stem(p);
            let (labels, status) = build_pseudolabels(&id, &map, &cfg.pipeline)?;
            log::info!("{id}: {status:?}");
            Ok((id, labels))
        })
        .collect();
    let (mut hierarchies, mut masks) = (0, 0);
    for r in results {
        let (id, labels) = r?;
        hierarchies += labels.hierarchies.len();
        masks += labels.mask_count();
        std::fs::write(dst.join(format!("{id}.json")), labels.to_json())?;
    }
    writeln!(out, "{hierarchies} hierarchies, {masks} masks")?;
    Ok(())
}

fn read_label_dir(dir: &Path) -> CliResult<Vec<PseudoLabelSet>> {
    files_with_ext(dir, "json")?
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            PseudoLabelSet::from_json(&text).map_err(|e| CliError::new("pipeline", format!("{}: {e}", p.display())))
        })
        .collect()
}

fn eval_noc(a: &EvalNocArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    let manifest = resolve(&a.manifest, "manifest.json", "manifest")?;
    let dataset = load_dataset(&manifest)?;
    let (seg, name): (Box<dyn Segmenter>, &str) = match a.adapter {
        Adapter::Oracle => (
            Box::new(LabelSegmenter::new(dataset.items.iter().map(|i| i.gt.clone()))?),
            "oracle",
        ),
        Adapter::Labels => {
            let dir = resolve(&a.labels, "labels", "labels")?;
            (Box::new(LabelSegmenter::new(read_label_dir(&dir)?)?), "labels")
        }
        Adapter::Decoder => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::new("usage", "--adapter decoder needs --checkpoint"))?;
            let params = load_checkpoint(path)?;
            let maps = dataset
                .items
                .iter()
                .map(|i| Ok((i.image_id.clone(), read_features(&i.features)?)))
                .collect::<CliResult<Vec<_>>>()?;
            (
                Box::new(DecoderSegmenter::new(params, maps, cfg.pipeline.patch_size)?),
                "decoder",
            )
        }
    };
    let bench = BenchmarkConfig {
        mode: if cfg.eval.from_gt {
            GranularityMode::FromGt
        } else {
            GranularityMode::Sweep(cfg.eval.sweep.clone())
        },
        scope: if cfg.eval.per_dataset {
            SweepScope::PerDataset
        } else {
            SweepScope::PerInstance
        },
        max_clicks: cfg.eval.max_clicks,
        targets: cfg.eval.targets.clone(),
    };
    let report = run_benchmark(seg.as_ref(), name, &dataset, &bench)?;
    write!(out, "{}", report.table())?;
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn grid_step(grid: &[f64]) -> f64 {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 1e-12)
        .fold(f64::INFINITY, f64::min)
        .min(0.1)
}

fn eval_ar(a: &EvalArArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    let manifest = resolve(&a.manifest, "manifest.json", "manifest")?;
    let dataset = load_dataset(&manifest)?;
    let dir = resolve(&a.labels, "labels", "labels")?;
    let labels: std::collections::HashMap<String, PseudoLabelSet> = read_label_dir(&dir)?
        .into_iter()
        .map(|l| (l.image_id.clone(), l))
        .collect();
    let grid = cfg.eval.sweep.clone();
    let step = grid_step(&grid);
    let report = run_ar(&dataset, cfg.eval.max_dets, |item| {
        let Some(set) = labels.get(&item.image_id) else {
            return Ok(Vec::new());
        };
        aggregate_proposals(set, &grid, step, cfg.eval.conf_floor).map_err(Into::into)
    })?;
    write!(out, "{}", report.table())?;
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn train(a: &TrainToyArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    let toy = &cfg.toy;
    let train_set = nested_squares_corpus(&toy.train_corpus_spec())?;
    let heldout = nested_squares_corpus(&toy.heldout_corpus_spec())?;
    let mut metrics_file = match &a.metrics {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    let mut lines = Vec::new();
    let outcome = train_toy(&train_set, &heldout, toy, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Some(f) = metrics_file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
        lines.push(line);
    });
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    let outcome = outcome?;
    save_checkpoint(&a.out, &outcome.params)?;
    let last = outcome.metrics.last().map(|m| m.val_one_iou).unwrap_or(0.0);
    let inputs = heldout
        .maps
        .iter()
        .map(|m| ImageInput::new(m, &outcome.params))
        .collect::<Result<Vec<_>, _>>()?;
    let mono = area_monotonicity(&outcome.params, &inputs, &heldout)?;
    writeln!(
        out,
        "held-out 1-IoU {last:.4}, area monotone in {:.1}% of sweep pairs, checkpoint {}",
        100.0 * mono,
        a.out.display()
    )?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    let toy = &cfg.toy;
    let params = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => DecoderParams::init(toy.shape(), toy.sigma_f, toy.sigma_pe, cfg.seed)?,
    };
    let mut spec = toy.train_corpus_spec();
    spec.images = 1;
    spec.seed = cfg.seed;
    let corpus = nested_squares_corpus(&spec)?;
    let sample = corpus
        .eval_samples()
        .into_iter()
        .next()
        .ok_or_else(|| CliError::new("decoder", "empty corpus"))?;
    let report = grad_check(
        &params,
        &corpus.maps[0],
        &sample,
        &toy.loss,
        cfg.gradcheck.eps,
        cfg.gradcheck.count,
        cfg.seed,
    )?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn synth(a: &SynthArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    use ugs_core::eval::{Manifest, ManifestItem};
    let root = resolve(&a.out, "", "out")?;
    let patch = cfg.pipeline.patch_size;
    std::fs::create_dir_all(root.join("features"))?;
    std::fs::create_dir_all(root.join("gt"))?;
    let mut items = Vec::new();
    for k in 0..a.count {
        let seed = cfg.seed.wrapping_add(k as u64);
        let (prefix, spec) = match a.kind {
            SynthKind::Nested => ("nested", nested_scene_spec(seed)),
            SynthKind::ManyParts => ("parts", many_parts_spec(seed)),
        };
        let id = format!("{prefix}-{k:03}");
        let scene = ugs_core::features::synth_features(&spec)?;
        let labels = scene_labels(&id, &scene, patch)?;
        let features = PathBuf::from(format!("features/{id}.ugf"));
        let gt = PathBuf::from(format!("gt/{id}.json"));
        write_features(&scene.features, root.join(&features))?;
        std::fs::write(root.join(&gt), labels.to_json())?;
        write_preview(&scene.features, patch, &root.join(format!("gt/{id}.ppm")))?;
        items.push(ManifestItem {
            image_id: id,
            features,
            gt_labels: gt,
        });
    }
    let manifest = Manifest {
        name: format!("synth-{}", match a.kind {
            SynthKind::Nested => "nested",
            SynthKind::ManyParts => "many-parts",
        }),
        items,
        targets: None,
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    writeln!(out, "wrote {} scenes to {}", a.count, root.display())?;
    Ok(())
}

/// False-colour preview: the first three feature channels scaled to bytes,
/// one block of `patch` pixels per patch, as binary PPM.
fn write_preview(map: &ugs_core::PatchFeatureMap, patch: u32, path: &Path) -> CliResult<()> {
    let (h, w) = (map.height() * patch, map.width() * patch);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for row in 0..h {
        for col in 0..w {
            let v = map.vector(map.index(row / patch, col / patch));
            for c in 0..3 {
                let x = v.get(c).copied().unwrap_or(0.0);
                bytes.push(((x.clamp(-1.0, 1.0) + 1.0) * 127.5) as u8);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn serve(a: &ServeArgs, cfg: &ResolvedConfig, out: &mut dyn Write) -> CliResult<()> {
    let dir = resolve(&a.labels, "labels", "labels")?;
    let state = ugs_serve::load_state(&dir)?;
    let addr: std::net::SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port)
        .parse()
        .map_err(|e| CliError::new("config", format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime
        .block_on(ugs_serve::serve(state, addr, |a| {
            let _ = writeln!(out, "listening on http://{a}");
            let _ = out.flush();
        }))
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        let g = parse_sweep("0.1:1.0:0.1").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[2], 0.3);
        assert_eq!(g[9], 1.0);
        assert_eq!(parse_sweep("0.5").unwrap(), vec![0.5]);
        assert_eq!(parse_sweep("0.2:0.5:0.15").unwrap(), vec![0.2, 0.35, 0.5]);
        assert!(parse_sweep("0.5:0.1:0.1").is_err());
        assert!(parse_sweep("a:b").is_err());
    }

    #[test]
    fn grid_step_is_smallest_gap() {
        assert!((grid_step(&ugs_core::eval::default_grid()) - 0.1).abs() < 1e-12);
        assert!((grid_step(&[0.1, 0.15, 0.5]) - 0.05).abs() < 1e-12);
        assert_eq!(grid_step(&[0.4]), 0.1);
    }
}
