//! Interactive click simulation (NoC, 1-IoU) with a granularity sweep, and
//! whole-image average recall, against anything implementing [`Segmenter`].

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::hierarchy::Click;
use crate::hierarchy::{HierarchyError, PseudoLabelSet, QueryIndex};
use crate::mask::{priority_order, BinaryMask, Connectivity, MaskError, ScoredMask};

pub const DEFAULT_MAX_CLICKS: usize = 20;
pub const DEFAULT_MAX_DETS: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth mask is empty")]
    EmptyGt,
    #[error("prediction already equals the ground truth")]
    PredEqualsGt,
    #[error("granularity grid is empty")]
    EmptyGrid,
    #[error("iou target {0} outside (0, 1]")]
    BadTarget(f64),
    #[error("segmenter failed on {image_id}: {message}")]
    Segmenter { image_id: String, message: String },
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("manifest {0} lists no items")]
    EmptyManifest(String),
    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// A promptable model: clicks plus granularity in, binary mask out.
/// Implementations must be deterministic.
pub trait Segmenter: Sync {
    fn predict(&self, image_id: &str, clicks: &[Click], g: f64) -> Result<BinaryMask, EvalError>;
}

impl<F> Segmenter for F
where
    F: Fn(&str, &[Click], f64) -> Result<BinaryMask, EvalError> + Sync,
{
    fn predict(&self, image_id: &str, clicks: &[Click], g: f64) -> Result<BinaryMask, EvalError> {
        self(image_id, clicks, g)
    }
}

/// City-block distance from each pixel of `mask` to the nearest pixel outside
/// it, counting the area beyond the image border as outside. Zero off-mask.
pub fn distance_transform(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.height() as usize, mask.width() as usize);
    let mut dist = vec![0u32; h * w];
    let mut queue = VecDeque::new();
    for p in mask.indices() {
        let (r, c) = (p / w, p % w);
        let edge = r == 0
            || c == 0
            || r + 1 == h
            || c + 1 == w
            || !mask.get_index(p - w)
            || !mask.get_index(p - 1)
            || !mask.get_index(p + 1)
            || !mask.get_index(p + w);
        if edge {
            dist[p] = 1;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        let mut visit = |q: usize| {
            if mask.get_index(q) && dist[q] == 0 {
                dist[q] = dist[p] + 1;
                queue.push_back(q);
            }
        };
        if r > 0 {
            visit(p - w);
        }
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < w {
            visit(p + 1);
        }
        if r + 1 < h {
            visit(p + w);
        }
    }
    dist
}

fn deepest_pixel(mask: &BinaryMask) -> Option<(u32, u32)> {
    let dist = distance_transform(mask);
    let mut best: Option<(usize, u32)> = None;
    for p in mask.indices() {
        if best.is_none_or(|(_, d)| dist[p] > d) {
            best = Some((p, dist[p]));
        }
    }
    best.map(|(p, _)| {
        let w = mask.width() as usize;
        ((p % w) as u32, (p / w) as u32)
    })
}

/// Interior point of `gt` farthest from its complement, first in scan order
/// on ties. Returns `(x, y)`.
pub fn initial_click(gt: &BinaryMask) -> Result<(u32, u32), EvalError> {
    deepest_pixel(gt).ok_or(EvalError::EmptyGt)
}

/// Corrective click at the deepest point of the largest error region.
/// False negatives give positive clicks and win ties against false positives.
pub fn next_click(pred: &BinaryMask, gt: &BinaryMask) -> Result<Click, EvalError> {
    let fn_region = gt.and_not(pred)?;
    let fp_region = pred.and_not(gt)?;
    let mut best: Option<(BinaryMask, bool)> = None;
    for (region, positive) in [(fn_region, true), (fp_region, false)] {
        for comp in region.connected_components(Connectivity::Four) {
            if best.as_ref().is_none_or(|(b, _)| comp.area() > b.area()) {
                best = Some((comp, positive));
            }
        }
    }
    let (region, positive) = best.ok_or(EvalError::PredEqualsGt)?;
    let (x, y) = deepest_pixel(&region).expect("components are nonempty");
    Ok(Click { x, y, positive })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickSession {
    pub clicks: Vec<Click>,
    pub ious: Vec<f64>,
    /// Clicks used; `max_clicks` when the target was never reached.
    pub noc: usize,
    pub failed: bool,
    pub g_used: f64,
}

impl ClickSession {
    pub fn final_iou(&self) -> f64 {
        self.ious.last().copied().unwrap_or(0.0)
    }
}

fn predict_checked(
    seg: &dyn Segmenter,
    image_id: &str,
    clicks: &[Click],
    g: f64,
    gt: &BinaryMask,
) -> Result<BinaryMask, EvalError> {
    let pred = seg.predict(image_id, clicks, g)?;
    if !pred.same_shape(gt) {
        return Err(EvalError::Segmenter {
            image_id: image_id.to_string(),
            message: format!(
                "predicted {}x{} mask for a {}x{} image",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        });
    }
    Ok(pred)
}

/// Click until IoU reaches `iou_target` or `max_clicks` clicks are spent.
/// IoUs are recomputed here, never taken from the segmenter.
pub fn simulate_session(
    seg: &dyn Segmenter,
    image_id: &str,
    gt: &BinaryMask,
    g: f64,
    iou_target: f64,
    max_clicks: usize,
) -> Result<ClickSession, EvalError> {
    if !(iou_target > 0.0 && iou_target <= 1.0) {
        return Err(EvalError::BadTarget(iou_target));
    }
    let (x, y) = initial_click(gt)?;
    let mut session = ClickSession {
        clicks: vec![Click::positive(x, y)],
        ious: Vec::new(),
        noc: max_clicks,
        failed: true,
        g_used: g,
    };
    loop {
        let pred = predict_checked(seg, image_id, &session.clicks, g, gt)?;
        let iou = pred.iou(gt)?;
        session.ious.push(iou);
        if iou >= iou_target {
            session.noc = session.clicks.len();
            session.failed = false;
            return Ok(session);
        }
        if session.clicks.len() >= max_clicks {
            return Ok(session);
        }
        session.clicks.push(next_click(&pred, gt)?);
    }
}

/// Best session over a granularity grid: fewest clicks, then higher final
/// IoU, then lower g.
pub fn sweep_best(
    seg: &dyn Segmenter,
    image_id: &str,
    gt: &BinaryMask,
    grid: &[f64],
    iou_target: f64,
    max_clicks: usize,
) -> Result<ClickSession, EvalError> {
    let mut best: Option<ClickSession> = None;
    for &g in grid {
        let s = simulate_session(seg, image_id, gt, g, iou_target, max_clicks)?;
        let better = match &best {
            None => true,
            Some(b) => s
                .noc
                .cmp(&b.noc)
                .then(b.final_iou().total_cmp(&s.final_iou()))
                .then(s.g_used.total_cmp(&b.g_used))
                .is_lt(),
        };
        if better {
            best = Some(s);
        }
    }
    best.ok_or(EvalError::EmptyGrid)
}

/// Highest single-click IoU over the grid, with the (lowest) g achieving it.
pub fn one_click_iou(
    seg: &dyn Segmenter,
    image_id: &str,
    gt: &BinaryMask,
    grid: &[f64],
) -> Result<(f64, f64), EvalError> {
    let (x, y) = initial_click(gt)?;
    let clicks = [Click::positive(x, y)];
    let mut best: Option<(f64, f64)> = None;
    for &g in grid {
        let iou = predict_checked(seg, image_id, &clicks, g, gt)?.iou(gt)?;
        let better = match best {
            None => true,
            Some((bi, bg)) => iou > bi || (iou == bi && g < bg),
        };
        if better {
            best = Some((iou, g));
        }
    }
    best.ok_or(EvalError::EmptyGrid)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn recall_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Matched ground truths per threshold under greedy matching: proposals in
/// confidence order each take the unmatched ground truth of highest IoU.
pub fn greedy_matches(
    proposals: &[ScoredMask],
    gts: &[BinaryMask],
    max_dets: usize,
) -> Result<[usize; 10], EvalError> {
    let order: Vec<usize> = priority_order(proposals).into_iter().take(max_dets).collect();
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&p| gts.iter().map(|g| proposals[p].mask.iou(g)).collect())
        .collect::<Result<_, _>>()?;
    let mut out = [0usize; 10];
    for (k, t) in recall_thresholds().into_iter().enumerate() {
        let mut taken = vec![false; gts.len()];
        for row in &ious {
            let mut best: Option<(usize, f64)> = None;
            for (j, &iou) in row.iter().enumerate() {
                if !taken[j] && iou >= t && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                out[k] += 1;
            }
        }
    }
    Ok(out)
}

/// Mean recall over the ten IoU thresholds using the top `max_dets`
/// proposals.
pub fn average_recall(
    proposals: &[ScoredMask],
    gts: &[BinaryMask],
    max_dets: usize,
) -> Result<f64, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyGt);
    }
    let matched = greedy_matches(proposals, gts, max_dets)?;
    let n = gts.len() as f64;
    Ok(matched.iter().map(|&m| m as f64 / n).sum::<f64>() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_id: String,
    pub features: PathBuf,
    pub gt_labels: PathBuf,
}

/// Dataset description. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub items: Vec<ManifestItem>,
    /// IoU targets for NoC; part datasets use `[0.8, 0.85]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image_id: String,
    pub features: PathBuf,
    pub gt: PseudoLabelSet,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub targets: Vec<f64>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn item(&self, image_id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.image_id == image_id)
    }
}

fn read_text(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a manifest and every ground-truth label file it lists. All missing
/// files are reported together.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, EvalError> {
    let text = read_text(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.items.is_empty() {
        return Err(EvalError::EmptyManifest(manifest.name));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let missing: Vec<String> = manifest
        .items
        .iter()
        .flat_map(|i| [resolve(&i.features), resolve(&i.gt_labels)])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingFiles(missing));
    }
    let mut items = Vec::with_capacity(manifest.items.len());
    for it in &manifest.items {
        let path = resolve(&it.gt_labels);
        let gt = PseudoLabelSet::from_json(&read_text(&path)?).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        items.push(DatasetItem {
            image_id: it.image_id.clone(),
            features: resolve(&it.features),
            gt,
        });
    }
    let targets = manifest.targets.unwrap_or_else(|| vec![0.8, 0.9]);
    for &t in &targets {
        if !(t > 0.0 && t <= 1.0) {
            return Err(EvalError::BadTarget(t));
        }
    }
    Ok(Dataset {
        name: manifest.name,
        targets,
        items,
    })
}

/// Answers prompts from stored hierarchies. Over ground-truth labels this is
/// the oracle; over predicted labels it is the deterministic baseline.
#[derive(Debug)]
pub struct LabelSegmenter {
    indices: HashMap<String, QueryIndex>,
}

impl LabelSegmenter {
    pub fn new(sets: impl IntoIterator<Item = PseudoLabelSet>) -> Result<Self, EvalError> {
        let mut indices = HashMap::new();
        for set in sets {
            indices.insert(set.image_id.clone(), QueryIndex::new(set)?);
        }
        Ok(Self { indices })
    }
}

impl Segmenter for LabelSegmenter {
    fn predict(&self, image_id: &str, clicks: &[Click], g: f64) -> Result<BinaryMask, EvalError> {
        let index = self
            .indices
            .get(image_id)
            .ok_or_else(|| EvalError::UnknownImage(image_id.to_string()))?;
        let labels = index.labels();
        match index.query(clicks, g)? {
            Some(hit) => Ok(hit.binary.clone()),
            None => Ok(BinaryMask::new(labels.height, labels.width)?),
        }
    }
}

/// How the granularity of each prompt is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityMode {
    /// Try every grid value, keep the best.
    Sweep(Vec<f64>),
    /// Use the granularity stored with each ground-truth mask.
    FromGt,
}

/// Whether the sweep picks g per instance or once for the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepScope {
    PerInstance,
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub mode: GranularityMode,
    pub scope: SweepScope,
    pub max_clicks: usize,
    /// Overrides the manifest's targets when set.
    pub targets: Option<Vec<f64>>,
}

/// 0.1, 0.2, ..., 1.0.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            mode: GranularityMode::Sweep(default_grid()),
            scope: SweepScope::PerInstance,
            max_clicks: DEFAULT_MAX_CLICKS,
            targets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub image_id: String,
    pub instance_id: u32,
    /// Index of the mask within its hierarchy, 0 for the root.
    pub mask_index: usize,
    pub noc: Vec<usize>,
    pub failed: Vec<bool>,
    pub g_used: Vec<f64>,
    pub one_iou: f64,
    pub one_iou_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub segmenter: String,
    pub images: usize,
    pub instances: usize,
    pub targets: Vec<f64>,
    pub noc: Vec<f64>,
    pub failures: Vec<usize>,
    pub one_iou: f64,
    pub config: BenchmarkConfig,
    pub per_instance: Vec<InstanceResult>,
}

fn noc_label(t: f64) -> String {
    format!("NoC{}", (t * 100.0).round() as u32)
}

impl BenchmarkReport {
    /// Aligned text table, one row per dataset.
    pub fn table(&self) -> String {
        let mut head = vec!["dataset".to_string(), "segmenter".into(), "instances".into()];
        let mut row = vec![self.dataset.clone(), self.segmenter.clone(), self.instances.to_string()];
        for (t, v) in self.targets.iter().zip(&self.noc) {
            head.push(noc_label(*t));
            row.push(format!("{v:.3}"));
        }
        head.push("1-IoU".into());
        row.push(format!("{:.4}", self.one_iou));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let mut out = String::new();
        for line in [&head, &row] {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }
}

struct GtInstance<'a> {
    image_id: &'a str,
    instance_id: u32,
    mask_index: usize,
    mask: BinaryMask,
    granularity: f64,
}

fn gt_instances(dataset: &Dataset) -> Result<Vec<GtInstance<'_>>, EvalError> {
    let mut out = Vec::new();
    for item in &dataset.items {
        for h in &item.gt.hierarchies {
            for (k, gm) in h.masks().enumerate() {
                out.push(GtInstance {
                    image_id: &item.image_id,
                    instance_id: h.instance_id,
                    mask_index: k,
                    mask: gm.mask.decode()?,
                    granularity: gm.granularity,
                });
            }
        }
    }
    Ok(out)
}

fn evaluate_instance(
    seg: &dyn Segmenter,
    inst: &GtInstance<'_>,
    grid: &[f64],
    targets: &[f64],
    max_clicks: usize,
) -> Result<InstanceResult, EvalError> {
    let mut result = InstanceResult {
        image_id: inst.image_id.to_string(),
        instance_id: inst.instance_id,
        mask_index: inst.mask_index,
        noc: Vec::new(),
        failed: Vec::new(),
        g_used: Vec::new(),
        one_iou: 0.0,
        one_iou_g: 0.0,
    };
    for &t in targets {
        let s = sweep_best(seg, inst.image_id, &inst.mask, grid, t, max_clicks)?;
        result.noc.push(s.noc);
        result.failed.push(s.failed);
        result.g_used.push(s.g_used);
    }
    (result.one_iou, result.one_iou_g) = one_click_iou(seg, inst.image_id, &inst.mask, grid)?;
    Ok(result)
}

fn mean_noc(results: &[InstanceResult], k: usize) -> f64 {
    results.iter().map(|r| r.noc[k] as f64).sum::<f64>() / results.len() as f64
}

fn mean_one_iou(results: &[InstanceResult]) -> f64 {
    results.iter().map(|r| r.one_iou).sum::<f64>() / results.len() as f64
}

/// NoC per target and 1-IoU over every ground-truth mask of the dataset.
/// Instances are evaluated in parallel; results keep dataset order.
pub fn run_benchmark(
    seg: &dyn Segmenter,
    segmenter_name: &str,
    dataset: &Dataset,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError> {
    let targets = cfg.targets.clone().unwrap_or_else(|| dataset.targets.clone());
    for &t in &targets {
        if !(t > 0.0 && t <= 1.0) {
            return Err(EvalError::BadTarget(t));
        }
    }
    let instances = gt_instances(dataset)?;
    if instances.is_empty() {
        return Err(EvalError::EmptyManifest(dataset.name.clone()));
    }
    let run = |grid_of: &(dyn Fn(&GtInstance<'_>) -> Vec<f64> + Sync)| {
        instances
            .par_iter()
            .map(|inst| evaluate_instance(seg, inst, &grid_of(inst), &targets, cfg.max_clicks))
            .collect::<Result<Vec<_>, _>>()
    };
    let per_instance = match (&cfg.mode, cfg.scope) {
        (GranularityMode::FromGt, _) => run(&|i| vec![i.granularity])?,
        (GranularityMode::Sweep(grid), _) if grid.is_empty() => return Err(EvalError::EmptyGrid),
        (GranularityMode::Sweep(grid), SweepScope::PerInstance) => run(&|_| grid.clone())?,
        (GranularityMode::Sweep(grid), SweepScope::PerDataset) => {
            let mut best: Option<(f64, f64, Vec<InstanceResult>)> = None;
            for &g in grid {
                let results = run(&|_| vec![g])?;
                let score = (mean_noc(&results, 0), mean_one_iou(&results));
                let better = match &best {
                    None => true,
                    Some((n, i, _)) => score.0 < *n || (score.0 == *n && score.1 > *i),
                };
                if better {
                    best = Some((score.0, score.1, results));
                }
            }
            best.expect("grid is nonempty").2
        }
    };
    let noc = (0..targets.len()).map(|k| mean_noc(&per_instance, k)).collect();
    let failures = (0..targets.len())
        .map(|k| per_instance.iter().filter(|r| r.failed[k]).count())
        .collect();
    Ok(BenchmarkReport {
        dataset: dataset.name.clone(),
        segmenter: segmenter_name.to_string(),
        images: dataset.items.len(),
        instances: per_instance.len(),
        one_iou: mean_one_iou(&per_instance),
        targets,
        noc,
        failures,
        config: cfg.clone(),
        per_instance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArReport {
    pub dataset: String,
    pub images: usize,
    pub gts: usize,
    pub max_dets: usize,
    /// Recall per threshold, pooled over the dataset.
    pub recall: Vec<f64>,
    pub ar: f64,
}

impl ArReport {
    pub fn table(&self) -> String {
        let label = format!("AR{}", self.max_dets);
        let head = ["dataset", "images", "gts", label.as_str()];
        let row = [
            self.dataset.clone(),
            self.images.to_string(),
            self.gts.to_string(),
            format!("{:.4}", self.ar),
        ];
        let mut out = String::new();
        let widths: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        for line in [head.map(String::from).to_vec(), row.to_vec()] {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }
}

/// Pooled average recall: proposals come from `proposals_for(image_id)`,
/// ground truths are every mask of each item's label set.
pub fn run_ar<F>(dataset: &Dataset, max_dets: usize, proposals_for: F) -> Result<ArReport, EvalError>
where
    F: Fn(&DatasetItem) -> Result<Vec<ScoredMask>, EvalError> + Sync,
{
    let counts = dataset
        .items
        .par_iter()
        .map(|item| {
            let gts: Vec<BinaryMask> = item
                .gt
                .masks()
                .map(|m| m.mask.decode())
                .collect::<Result<_, _>>()?;
            let props = proposals_for(item)?;
            Ok((gts.len(), greedy_matches(&props, &gts, max_dets)?))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let total: usize = counts.iter().map(|c| c.0).sum();
    if total == 0 {
        return Err(EvalError::EmptyGt);
    }
    let recall: Vec<f64> = (0..10)
        .map(|k| counts.iter().map(|c| c.1[k]).sum::<usize>() as f64 / total as f64)
        .collect();
    Ok(ArReport {
        dataset: dataset.name.clone(),
        images: dataset.items.len(),
        gts: total,
        max_dets,
        ar: recall.iter().sum::<f64>() / 10.0,
        recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: u32, w: u32, t: u32, l: u32, b: u32, r: u32) -> BinaryMask {
        BinaryMask::rect(h, w, t, l, b, r).unwrap()
    }

    #[test]
    fn initial_click_examples() {
        assert_eq!(initial_click(&rect(7, 7, 1, 1, 6, 6)).unwrap(), (3, 3));
        assert_eq!(initial_click(&rect(5, 5, 2, 3, 3, 4)).unwrap(), (3, 2));
        assert_eq!(initial_click(&rect(5, 5, 2, 0, 3, 5)).unwrap(), (0, 2));
        assert!(matches!(
            initial_click(&BinaryMask::new(3, 3).unwrap()),
            Err(EvalError::EmptyGt)
        ));
        // the image border counts as background
        assert_eq!(initial_click(&BinaryMask::full(5, 5).unwrap()).unwrap(), (2, 2));
    }

    #[test]
    fn next_click_examples() {
        let gt = rect(8, 8, 1, 1, 6, 6);
        let empty = BinaryMask::new(8, 8).unwrap();
        let c = next_click(&empty, &gt).unwrap();
        assert_eq!((c.x, c.y, c.positive), (3, 3, true));

        let mut over = gt.clone();
        for r in 6..8 {
            for col in 6..8 {
                over.set(r, col, true);
            }
        }
        let c = next_click(&over, &gt).unwrap();
        assert!(!c.positive && !gt.get(c.y, c.x) && over.get(c.y, c.x));

        // FN 30 px vs FP 20 px
        let gt = rect(20, 20, 0, 0, 5, 10);
        let mut pred = rect(20, 20, 0, 0, 2, 10);
        for col in 0..10 {
            pred.set(10, col, true);
            pred.set(11, col, true);
        }
        let c = next_click(&pred, &gt).unwrap();
        assert!(c.positive && gt.get(c.y, c.x) && !pred.get(c.y, c.x));
        assert!(matches!(next_click(&gt, &gt), Err(EvalError::PredEqualsGt)));
    }

    #[test]
    fn sessions() {
        let gt = rect(10, 10, 2, 2, 8, 8);
        let oracle = |_: &str, _: &[Click], _: f64| Ok(rect(10, 10, 2, 2, 8, 8));
        let s = simulate_session(&oracle, "a", &gt, 0.5, 0.9, 20).unwrap();
        assert_eq!((s.noc, s.failed, s.ious.clone()), (1, false, vec![1.0]));
        let nothing = |_: &str, _: &[Click], _: f64| Ok(BinaryMask::new(10, 10).unwrap());
        let s = simulate_session(&nothing, "a", &gt, 0.5, 0.9, 20).unwrap();
        assert_eq!((s.noc, s.failed, s.clicks.len(), s.ious.len()), (20, true, 20, 20));
        let wrong = |_: &str, _: &[Click], _: f64| Ok(BinaryMask::new(3, 3).unwrap());
        assert!(simulate_session(&wrong, "a", &gt, 0.5, 0.9, 20).is_err());
    }

    #[test]
    fn sweep_rules() {
        let gt = rect(10, 10, 2, 2, 8, 8);
        let only_half = |_: &str, _: &[Click], g: f64| {
            Ok(if g == 0.5 { rect(10, 10, 2, 2, 8, 8) } else { BinaryMask::new(10, 10).unwrap() })
        };
        let grid = default_grid();
        let s = sweep_best(&only_half, "a", &gt, &grid, 0.9, 20).unwrap();
        assert_eq!((s.noc, s.g_used), (1, 0.5));
        let always = |_: &str, _: &[Click], _: f64| Ok(rect(10, 10, 2, 2, 8, 8));
        let s = sweep_best(&always, "a", &gt, &[0.7, 0.3, 0.9], 0.9, 20).unwrap();
        assert_eq!(s.g_used, 0.3);
        assert!(matches!(
            sweep_best(&always, "a", &gt, &[], 0.9, 20),
            Err(EvalError::EmptyGrid)
        ));
        assert_eq!(one_click_iou(&always, "a", &gt, &grid).unwrap(), (1.0, 0.1));
        let nothing = |_: &str, _: &[Click], _: f64| Ok(BinaryMask::new(10, 10).unwrap());
        assert_eq!(one_click_iou(&nothing, "a", &gt, &grid).unwrap().0, 0.0);
    }

    #[test]
    fn ar_examples() {
        let gt = rect(10, 10, 0, 0, 5, 2);
        let gts = vec![gt.clone()];
        assert_eq!(average_recall(&[], &gts, 1000).unwrap(), 0.0);
        let exact = ScoredMask::new(gt.clone(), 0.5).unwrap();
        assert_eq!(average_recall(&[exact], &gts, 1000).unwrap(), 1.0);
        // 6 of a 10-pixel union: IoU 0.6
        let p = ScoredMask::new(rect(10, 10, 0, 0, 3, 2), 0.9).unwrap();
        assert_eq!(p.mask.iou(&gt).unwrap(), 0.6);
        assert_eq!(average_recall(&[p], &gts, 1000).unwrap(), 0.3);
        assert!(matches!(average_recall(&[], &[], 10), Err(EvalError::EmptyGt)));
        assert_eq!(recall_thresholds()[2], 0.6);
    }

    #[test]
    fn max_dets_truncates_by_confidence() {
        let gts = vec![rect(4, 4, 0, 0, 2, 2), rect(4, 4, 2, 2, 4, 4)];
        let props = vec![
            ScoredMask::new(gts[0].clone(), 0.1).unwrap(),
            ScoredMask::new(gts[1].clone(), 0.9).unwrap(),
        ];
        assert_eq!(average_recall(&props, &gts, 1).unwrap(), 0.5);
        assert_eq!(average_recall(&props, &gts, 2).unwrap(), 1.0);
    }

    #[test]
    fn distance_transform_line() {
        let line = rect(3, 5, 1, 0, 2, 5);
        assert_eq!(&distance_transform(&line)[5..10], &[1, 1, 1, 1, 1]);
        let sq = rect(7, 7, 1, 1, 6, 6);
        assert_eq!(distance_transform(&sq)[3 * 7 + 3], 3);
    }
}
