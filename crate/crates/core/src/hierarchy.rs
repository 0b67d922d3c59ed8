//! Instance/part hierarchies with continuous granularity.
//!
//! Confident divide masks are split into instances (large, and at least as
//! large as anything they heavily overlap) and the rest, which attach to the
//! instance that contains them. Each instance is decomposed further by
//! [`crate::conquer`], fused with its parts through NMS, and every surviving
//! mask receives
//!
//! ```text
//! g = (sqrt(A) - sqrt(A_min)) / (sqrt(A_max) - sqrt(A_min)) * 0.9 + 0.1
//! ```
//!
//! with areas taken over that instance's final mask set. The root therefore
//! always sits at 1.0 and the smallest mask at 0.1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conquer::{conquer_masks, ConquerError, ThresholdSchedule};
use crate::divide::{filter_confident, maskcut, DivideConfig, DivideError};
use crate::features::{FeatureError, PatchFeatureMap};
use crate::mask::{nms_in_order, priority_order, BinaryMask, MaskError, RleMask, ScoredMask};

pub const G_MIN: f64 = 0.1;
pub const G_MAX: f64 = 1.0;
/// Most proposals kept by [`aggregate_proposals`].
pub const MAX_PROPOSALS: usize = 1000;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("invalid hierarchy configuration: {0}")]
    Config(String),
    #[error("mask {0} has zero area")]
    ZeroArea(usize),
    #[error("granularity needs at least one mask")]
    NoMasks,
    #[error("ground-truth mask {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    Resolution {
        index: usize,
        got_h: u32,
        got_w: u32,
        want_h: u32,
        want_w: u32,
    },
    #[error("point ({x}, {y}) is outside the {width}x{height} image")]
    PointOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("granularity {0} is outside [0.1, 1.0]")]
    GranularityOutOfRange(f64),
    #[error("query needs at least one positive click")]
    NoPositiveClick,
    #[error("invalid label set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Divide(#[from] DivideError),
    #[error(transparent)]
    Conquer(#[from] ConquerError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How part candidates are matched against instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartRule {
    /// `|part ∩ instance| / |part|`
    Containment,
    /// Plain IoU, which rarely lets a strict part attach.
    Iou,
}

/// Which masks an instance candidate has to dominate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceScope {
    /// Every confident mask.
    AllMasks,
    /// Only masks that also pass the area criterion.
    Candidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    /// Minimum instance area as a fraction of the image.
    pub tau_area: f64,
    /// Dominance IoU and part-attachment threshold.
    pub tau_overlap: f64,
    /// NMS IoU when fusing parts with conquer masks.
    pub nms_iou: f64,
    pub g_floor: f64,
    pub g_span: f64,
    pub part_rule: PartRule,
    pub dominance: DominanceScope,
    /// Smallest conquer component kept, in patches.
    pub min_patches: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            tau_area: 0.02,
            tau_overlap: 0.8,
            nms_iou: 0.9,
            g_floor: G_MIN,
            g_span: G_MAX - G_MIN,
            part_rule: PartRule::Containment,
            dominance: DominanceScope::AllMasks,
            min_patches: 2,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), HierarchyError> {
        for (name, v) in [
            ("tau_area", self.tau_area),
            ("tau_overlap", self.tau_overlap),
            ("nms_iou", self.nms_iou),
            ("g_floor", self.g_floor),
            ("g_span", self.g_span),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(HierarchyError::Config(format!("{name} = {v} not in (0, 1]")));
            }
        }
        if (self.g_floor + self.g_span - 1.0).abs() > 1e-12 {
            return Err(HierarchyError::Config(format!(
                "g_floor + g_span must be 1, got {}",
                self.g_floor + self.g_span
            )));
        }
        Ok(())
    }
}

/// Everything [`build_pseudolabels`] needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub divide: DivideConfig,
    pub thetas: ThresholdSchedule,
    pub hierarchy: HierarchyConfig,
    /// Pixels per patch side; label masks are `patch_size` times the grid.
    pub patch_size: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            divide: DivideConfig::default(),
            thetas: ThresholdSchedule::default(),
            hierarchy: HierarchyConfig::default(),
            patch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Instance,
    Part,
    Conquer,
    Gt,
}

/// A stored mask with its granularity. Serialized as
/// `{"mask","granularity","confidence","level"}`; the owning hierarchy
/// carries the instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularMask {
    pub mask: RleMask,
    pub granularity: f64,
    pub confidence: f64,
    pub level: Level,
    #[serde(skip)]
    pub instance_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHierarchy {
    pub instance_id: u32,
    pub root: GranularMask,
    pub children: Vec<GranularMask>,
}

impl MaskHierarchy {
    pub fn masks(&self) -> impl Iterator<Item = &GranularMask> {
        std::iter::once(&self.root).chain(&self.children)
    }
}

/// All hierarchies of one image; the label interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub hierarchies: Vec<MaskHierarchy>,
}

impl PseudoLabelSet {
    pub fn empty(image_id: impl Into<String>, height: u32, width: u32) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            hierarchies: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("label sets always serialize")
    }

    /// Parse and fill in per-mask instance ids. Does not validate; see
    /// [`PseudoLabelSet::validate`].
    pub fn from_json(text: &str) -> Result<Self, HierarchyError> {
        let mut set: Self = serde_json::from_str(text)?;
        set.link_instance_ids();
        Ok(set)
    }

    fn link_instance_ids(&mut self) {
        for h in &mut self.hierarchies {
            h.root.instance_id = h.instance_id;
            for c in &mut h.children {
                c.instance_id = h.instance_id;
            }
        }
    }

    pub fn mask_count(&self) -> usize {
        self.hierarchies.iter().map(|h| 1 + h.children.len()).sum()
    }

    pub fn masks(&self) -> impl Iterator<Item = &GranularMask> {
        self.hierarchies.iter().flat_map(|h| h.masks())
    }

    /// Structural checks: mask sizes and RLE sums, granularity range, root at
    /// 1.0 with maximal area, child containment in the root at least
    /// `tau_overlap`, granularity ordered by area, unique instance ids.
    pub fn validate(&self, tau_overlap: f64) -> Result<(), HierarchyError> {
        let bad = |m: String| Err(HierarchyError::Invalid(m));
        let mut ids = std::collections::HashSet::new();
        for h in &self.hierarchies {
            let id = h.instance_id;
            if !ids.insert(id) {
                return bad(format!("duplicate instance_id {id}"));
            }
            let mut decoded = Vec::new();
            for (k, gm) in h.masks().enumerate() {
                if gm.mask.size != [self.height, self.width] {
                    return bad(format!(
                        "instance {id} mask {k} has size {:?}, image is [{}, {}]",
                        gm.mask.size, self.height, self.width
                    ));
                }
                let m = gm
                    .mask
                    .decode()
                    .map_err(|e| HierarchyError::Invalid(format!("instance {id} mask {k}: {e}")))?;
                if !(G_MIN..=G_MAX).contains(&gm.granularity) {
                    return bad(format!(
                        "instance {id} mask {k} granularity {} outside [0.1, 1.0]",
                        gm.granularity
                    ));
                }
                if !(0.0..=1.0).contains(&gm.confidence) {
                    return bad(format!(
                        "instance {id} mask {k} confidence {} outside [0, 1]",
                        gm.confidence
                    ));
                }
                if m.is_empty() {
                    return bad(format!("instance {id} mask {k} is empty"));
                }
                decoded.push(m);
            }
            if h.root.granularity != G_MAX {
                return bad(format!("instance {id} root granularity {} != 1.0", h.root.granularity));
            }
            let root_area = decoded[0].area();
            for (k, m) in decoded.iter().enumerate().skip(1) {
                if m.area() > root_area {
                    return bad(format!("instance {id} child {k} is larger than its root"));
                }
                let c = m.containment_in(&decoded[0])?;
                if c < tau_overlap {
                    return bad(format!(
                        "instance {id} child {k} containment {c:.4} below {tau_overlap}"
                    ));
                }
            }
            let all: Vec<(u64, f64)> = decoded
                .iter()
                .zip(h.masks())
                .map(|(m, gm)| (m.area(), gm.granularity))
                .collect();
            for a in &all {
                for b in &all {
                    if a.0 < b.0 && a.1 > b.1 {
                        return bad(format!(
                            "instance {id}: area {} has granularity {} above area {} at {}",
                            a.0, a.1, b.0, b.1
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of the instance/rest split, as indices into the input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstanceSplit {
    pub instances: Vec<usize>,
    pub rest: Vec<usize>,
}

/// Instances are masks whose area ratio reaches `tau_area` and which are at
/// least as large as every mask they overlap with IoU `>= tau_overlap`.
pub fn select_instances(
    masks: &[ScoredMask],
    image_area: u64,
    cfg: &HierarchyConfig,
) -> Result<InstanceSplit, HierarchyError> {
    let areas: Vec<u64> = masks.iter().map(|m| m.mask.area()).collect();
    let large: Vec<bool> = areas
        .iter()
        .map(|&a| a as f64 / image_area as f64 >= cfg.tau_area)
        .collect();
    let mut split = InstanceSplit::default();
    for i in 0..masks.len() {
        let mut dominant = large[i];
        if dominant {
            for j in 0..masks.len() {
                if j == i || (cfg.dominance == DominanceScope::Candidates && !large[j]) {
                    continue;
                }
                if masks[i].mask.iou(&masks[j].mask)? >= cfg.tau_overlap && areas[i] < areas[j] {
                    dominant = false;
                    break;
                }
            }
        }
        if dominant {
            split.instances.push(i);
        } else {
            split.rest.push(i);
        }
    }
    Ok(split)
}

fn overlap_score(part: &BinaryMask, whole: &BinaryMask, rule: PartRule) -> Result<f64, MaskError> {
    match rule {
        PartRule::Containment => part.containment_in(whole),
        PartRule::Iou => part.iou(whole),
    }
}

/// Attach each rest mask to the instance it overlaps most, when that score
/// exceeds `tau_overlap`. Returns rest indices per instance.
pub fn assign_parts(
    rest: &[ScoredMask],
    instances: &[ScoredMask],
    cfg: &HierarchyConfig,
) -> Result<Vec<Vec<usize>>, HierarchyError> {
    let mut parts = vec![Vec::new(); instances.len()];
    for (r, m) in rest.iter().enumerate() {
        if m.mask.is_empty() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, inst) in instances.iter().enumerate() {
            let s = overlap_score(&m.mask, &inst.mask, cfg.part_rule)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if let Some((i, s)) = best {
            if s > cfg.tau_overlap {
                parts[i].push(r);
            }
        }
    }
    Ok(parts)
}

/// Where a fused mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Root,
    Part(usize),
    Conquer(usize),
}

/// NMS over root, parts and conquer masks with the root forced to the front.
/// Returns survivors in priority order, root first.
pub fn fuse_masks(
    root: &ScoredMask,
    parts: &[ScoredMask],
    conquer: &[ScoredMask],
    nms_iou: f64,
) -> Vec<Origin> {
    let mut pool: Vec<ScoredMask> = Vec::with_capacity(1 + parts.len() + conquer.len());
    pool.push(root.clone());
    pool.extend(parts.iter().cloned());
    pool.extend(conquer.iter().cloned());
    let rest_order = priority_order(&pool[1..]);
    let order: Vec<usize> = std::iter::once(0)
        .chain(rest_order.into_iter().map(|i| i + 1))
        .collect();
    nms_in_order(&pool, &order, nms_iou)
        .into_iter()
        .map(|k| match k {
            0 => Origin::Root,
            k if k <= parts.len() => Origin::Part(k - 1),
            k => Origin::Conquer(k - 1 - parts.len()),
        })
        .collect()
}

/// Granularity of one area given the extremes of its hierarchy. A degenerate
/// hierarchy (`a_min == a_max`) maps to 1.0.
pub fn granularity(area: u64, a_min: u64, a_max: u64) -> f64 {
    granularity_with(area, a_min, a_max, G_MIN, G_MAX - G_MIN)
}

fn granularity_with(area: u64, a_min: u64, a_max: u64, floor: f64, span: f64) -> f64 {
    if a_min == a_max || area >= a_max {
        return floor + span;
    }
    if area <= a_min {
        return floor;
    }
    let (s, lo, hi) = ((area as f64).sqrt(), (a_min as f64).sqrt(), (a_max as f64).sqrt());
    (s - lo) / (hi - lo) * span + floor
}

/// Granularity for every mask of one hierarchy's final set.
pub fn assign_granularity(
    masks: &[BinaryMask],
    cfg: &HierarchyConfig,
) -> Result<Vec<f64>, HierarchyError> {
    if masks.is_empty() {
        return Err(HierarchyError::NoMasks);
    }
    let areas: Vec<u64> = masks.iter().map(|m| m.area()).collect();
    if let Some(i) = areas.iter().position(|&a| a == 0) {
        return Err(HierarchyError::ZeroArea(i));
    }
    let (lo, hi) = (*areas.iter().min().unwrap(), *areas.iter().max().unwrap());
    Ok(areas
        .iter()
        .map(|&a| granularity_with(a, lo, hi, cfg.g_floor, cfg.g_span))
        .collect())
}

/// A divide-stage mask tagged with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedMask {
    pub scored: ScoredMask,
    pub level: Level,
}

/// Union of discovered masks with ground-truth masks at confidence 1.0.
/// Bit-identical masks collapse into one entry tagged `gt`.
pub fn merge_gt(
    divide: &[ScoredMask],
    gt: &[BinaryMask],
) -> Result<Vec<SourcedMask>, HierarchyError> {
    if let Some(first) = divide.first().map(|m| &m.mask).or(gt.first()) {
        let (h, w) = (first.height(), first.width());
        for (index, m) in gt.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(HierarchyError::Resolution {
                    index,
                    got_h: m.height(),
                    got_w: m.width(),
                    want_h: h,
                    want_w: w,
                });
            }
        }
    }
    let mut out: Vec<SourcedMask> = Vec::with_capacity(divide.len() + gt.len());
    let mut slot: HashMap<&BinaryMask, usize> = HashMap::new();
    for m in divide {
        if let Some(&k) = slot.get(&m.mask) {
            if m.confidence > out[k].scored.confidence {
                out[k].scored.confidence = m.confidence;
            }
            continue;
        }
        slot.insert(&m.mask, out.len());
        out.push(SourcedMask {
            scored: m.clone(),
            level: Level::Part,
        });
    }
    for m in gt {
        let entry = SourcedMask {
            scored: ScoredMask {
                mask: m.clone(),
                confidence: 1.0,
            },
            level: Level::Gt,
        };
        match slot.get(m) {
            Some(&k) => out[k] = entry,
            None => {
                slot.insert(m, out.len());
                out.push(entry);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildStatus {
    Ok,
    /// No mask qualified as an instance; the label set is empty.
    NoInstances,
}

/// Full pseudo-label pipeline for one image.
pub fn build_pseudolabels(
    image_id: &str,
    map: &PatchFeatureMap,
    cfg: &PipelineConfig,
) -> Result<(PseudoLabelSet, BuildStatus), HierarchyError> {
    build_pseudolabels_with_gt(image_id, map, &[], cfg)
}

/// Pipeline with ground-truth masks (pixel resolution) fused into the divide
/// output before filtering.
pub fn build_pseudolabels_with_gt(
    image_id: &str,
    map: &PatchFeatureMap,
    gt: &[BinaryMask],
    cfg: &PipelineConfig,
) -> Result<(PseudoLabelSet, BuildStatus), HierarchyError> {
    cfg.hierarchy.validate()?;
    cfg.divide.validate()?;
    if cfg.patch_size == 0 {
        return Err(HierarchyError::Config("patch_size must be positive".into()));
    }
    let map = if map.is_normalized() {
        map.clone()
    } else {
        map.l2_normalized()?
    };
    let ps = cfg.patch_size;
    let (height, width) = (map.height() * ps, map.width() * ps);
    for (index, m) in gt.iter().enumerate() {
        if m.height() != height || m.width() != width {
            return Err(HierarchyError::Resolution {
                index,
                got_h: m.height(),
                got_w: m.width(),
                want_h: height,
                want_w: width,
            });
        }
    }

    let discovered: Vec<ScoredMask> = maskcut(&map, &cfg.divide)?
        .into_iter()
        .map(|m| ScoredMask {
            mask: m.mask.upsample(ps),
            confidence: m.confidence,
        })
        .collect();
    let sourced = merge_gt(&discovered, gt)?;
    let keep = filter_confident(
        &sourced.iter().map(|s| s.scored.clone()).collect::<Vec<_>>(),
        cfg.divide.tau_conf,
    );
    let high: Vec<&SourcedMask> = keep.iter().map(|&i| &sourced[i]).collect();
    let high_masks: Vec<ScoredMask> = high.iter().map(|s| s.scored.clone()).collect();
    let image_area = height as u64 * width as u64;
    let split = select_instances(&high_masks, image_area, &cfg.hierarchy)?;
    let mut labels = PseudoLabelSet::empty(image_id, height, width);
    if split.instances.is_empty() {
        log::warn!("{image_id}: no instance-level mask survived selection");
        return Ok((labels, BuildStatus::NoInstances));
    }
    let instances: Vec<ScoredMask> = split.instances.iter().map(|&i| high_masks[i].clone()).collect();
    let rest: Vec<ScoredMask> = split.rest.iter().map(|&i| high_masks[i].clone()).collect();
    let rest_levels: Vec<Level> = split.rest.iter().map(|&i| high[i].level).collect();
    let parts_of = assign_parts(&rest, &instances, &cfg.hierarchy)?;

    for (id, (root, part_idx)) in instances.iter().zip(&parts_of).enumerate() {
        let parts: Vec<ScoredMask> = part_idx.iter().map(|&r| rest[r].clone()).collect();
        let region = root.mask.downsample(ps);
        let conquer: Vec<ScoredMask> =
            conquer_masks(&map, &region, &cfg.thetas, cfg.hierarchy.min_patches)?
                .into_iter()
                .filter_map(|m| {
                    let px = m.mask.upsample(ps).and(&root.mask).expect("same size");
                    (!px.is_empty()).then_some(ScoredMask {
                        mask: px,
                        confidence: m.confidence,
                    })
                })
                .collect();
        let fused = fuse_masks(root, &parts, &conquer, cfg.hierarchy.nms_iou);
        let mut members: Vec<(&ScoredMask, Level)> = fused
            .iter()
            .map(|o| match *o {
                Origin::Root => (root, Level::Instance),
                Origin::Part(k) => (&parts[k], rest_levels[part_idx[k]]),
                Origin::Conquer(k) => (&conquer[k], Level::Conquer),
            })
            .collect();
        // root first, then children by area, largest first
        let root_entry = members.remove(0);
        members.sort_by_key(|(m, _)| std::cmp::Reverse(m.mask.area()));
        members.insert(0, root_entry);
        let binaries: Vec<BinaryMask> = members.iter().map(|(m, _)| m.mask.clone()).collect();
        let gs = assign_granularity(&binaries, &cfg.hierarchy)?;
        let instance_id = id as u32;
        let mut entries = members.iter().zip(gs).map(|((m, level), g)| GranularMask {
            mask: m.mask.to_rle(),
            granularity: g,
            confidence: m.confidence,
            level: *level,
            instance_id,
        });
        let root_gm = entries.next().expect("root present");
        labels.hierarchies.push(MaskHierarchy {
            instance_id,
            root: root_gm,
            children: entries.collect(),
        });
    }
    Ok((labels, BuildStatus::Ok))
}

/// One prompt point. `x` is the column, `y` the row, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub x: u32,
    pub y: u32,
    pub positive: bool,
}

impl Click {
    pub fn positive(x: u32, y: u32) -> Self {
        Self { x, y, positive: true }
    }

    pub fn negative(x: u32, y: u32) -> Self {
        Self {
            x,
            y,
            positive: false,
        }
    }
}

#[derive(Debug)]
struct IndexEntry {
    instance_id: u32,
    hierarchy: usize,
    slot: usize,
    mask: BinaryMask,
    area: u64,
    granularity: f64,
}

/// Decoded masks of a label set, ready for repeated queries.
#[derive(Debug)]
pub struct QueryIndex {
    labels: PseudoLabelSet,
    entries: Vec<IndexEntry>,
}

/// A query answer, borrowing from the label set and its index.
#[derive(Debug, Clone, Copy)]
pub struct QueryHit<'a> {
    pub instance_id: u32,
    pub mask: &'a GranularMask,
    pub binary: &'a BinaryMask,
}

impl QueryIndex {
    pub fn new(labels: PseudoLabelSet) -> Result<Self, HierarchyError> {
        let mut entries = Vec::new();
        for (hi, h) in labels.hierarchies.iter().enumerate() {
            for (slot, gm) in h.masks().enumerate() {
                let mask = gm.mask.decode()?;
                entries.push(IndexEntry {
                    instance_id: h.instance_id,
                    hierarchy: hi,
                    slot,
                    area: mask.area(),
                    mask,
                    granularity: gm.granularity,
                });
            }
        }
        Ok(Self { labels, entries })
    }

    pub fn labels(&self) -> &PseudoLabelSet {
        &self.labels
    }

    fn granular(&self, e: &IndexEntry) -> &GranularMask {
        let h = &self.labels.hierarchies[e.hierarchy];
        if e.slot == 0 {
            &h.root
        } else {
            &h.children[e.slot - 1]
        }
    }

    fn check_point(&self, x: u32, y: u32) -> Result<(), HierarchyError> {
        if x >= self.labels.width || y >= self.labels.height {
            return Err(HierarchyError::PointOutOfBounds {
                x,
                y,
                width: self.labels.width,
                height: self.labels.height,
            });
        }
        Ok(())
    }

    /// Answer a click set at granularity `g`. The first positive click is the
    /// anchor: only masks containing it are eligible. Among those, masks that
    /// respect every click win; otherwise the ones with the fewest violated
    /// clicks. The winner minimises `|g - granularity|`, then area, then
    /// instance id.
    pub fn query(&self, clicks: &[Click], g: f64) -> Result<Option<QueryHit<'_>>, HierarchyError> {
        if !(G_MIN..=G_MAX).contains(&g) {
            return Err(HierarchyError::GranularityOutOfRange(g));
        }
        for c in clicks {
            self.check_point(c.x, c.y)?;
        }
        let anchor = clicks
            .iter()
            .find(|c| c.positive)
            .ok_or(HierarchyError::NoPositiveClick)?;
        let contains = |e: &IndexEntry, c: &Click| e.mask.get(c.y, c.x);
        let mut scored: Vec<(usize, &IndexEntry)> = self
            .entries
            .iter()
            .filter(|e| contains(e, anchor))
            .map(|e| {
                let violations = clicks
                    .iter()
                    .filter(|c| contains(e, c) != c.positive)
                    .count();
                (violations, e)
            })
            .collect();
        let Some(fewest) = scored.iter().map(|(v, _)| *v).min() else {
            return Ok(None);
        };
        scored.retain(|(v, _)| *v == fewest);
        let best = scored
            .into_iter()
            .map(|(_, e)| e)
            .min_by(|a, b| {
                (g - a.granularity)
                    .abs()
                    .total_cmp(&(g - b.granularity).abs())
                    .then(a.area.cmp(&b.area))
                    .then(a.instance_id.cmp(&b.instance_id))
            })
            .expect("nonempty candidate list");
        Ok(Some(QueryHit {
            instance_id: best.instance_id,
            mask: self.granular(best),
            binary: &best.mask,
        }))
    }
}

/// One-shot query: `(x, y)` is the anchor, `extra` are further clicks.
pub fn query_mask<'a>(
    index: &'a QueryIndex,
    x: u32,
    y: u32,
    g: f64,
    extra: &[Click],
) -> Result<Option<QueryHit<'a>>, HierarchyError> {
    let mut clicks = Vec::with_capacity(1 + extra.len());
    clicks.push(Click::positive(x, y));
    clicks.extend_from_slice(extra);
    index.query(&clicks, g)
}

/// Whole-image proposals: every stored mask whose granularity lies within
/// half a grid step of some grid value, bit-identical masks merged, masks
/// under `conf_floor` dropped, and at most [`MAX_PROPOSALS`] kept by
/// confidence.
pub fn aggregate_proposals(
    labels: &PseudoLabelSet,
    grid: &[f64],
    step: f64,
    conf_floor: f64,
) -> Result<Vec<ScoredMask>, HierarchyError> {
    let half = step / 2.0 + 1e-9;
    let mut picked: Vec<ScoredMask> = Vec::new();
    for gm in labels.masks() {
        if gm.confidence < conf_floor {
            continue;
        }
        if !grid.iter().any(|&g| (gm.granularity - g).abs() <= half) {
            continue;
        }
        picked.push(ScoredMask {
            mask: gm.mask.decode()?,
            confidence: gm.confidence,
        });
    }
    let mut order: Vec<usize> = (0..picked.len()).collect();
    order.sort_by(|&a, &b| picked[b].confidence.total_cmp(&picked[a].confidence));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for i in order {
        if out.len() == MAX_PROPOSALS {
            break;
        }
        if seen.insert(picked[i].mask.clone()) {
            out.push(picked[i].clone());
        }
    }
    Ok(out)
}
