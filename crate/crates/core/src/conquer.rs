//! Fine-grained decomposition of an instance: union-find merging of
//! 4-adjacent patches whose cosine clears each threshold of a descending
//! schedule. Lower thresholds only add edges, so every level coarsens the
//! previous one.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::PatchFeatureMap;
use crate::mask::{BinaryMask, ScoredMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConquerError {
    #[error("threshold schedule must be nonempty, strictly decreasing and inside (0,1): {0:?}")]
    BadSchedule(Vec<f64>),
    #[error("region is empty")]
    EmptyRegion,
    #[error("region is {region_h}x{region_w} but the feature grid is {grid_h}x{grid_w}")]
    ShapeMismatch {
        region_h: u32,
        region_w: u32,
        grid_h: u32,
        grid_w: u32,
    },
}

/// Strictly decreasing cosine thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSchedule(Vec<f64>);

impl ThresholdSchedule {
    pub fn new(thetas: Vec<f64>) -> Result<Self, ConquerError> {
        let in_range = thetas.iter().all(|&t| t > 0.0 && t < 1.0);
        let decreasing = thetas.windows(2).all(|w| w[0] > w[1]);
        if thetas.is_empty() || !in_range || !decreasing {
            return Err(ConquerError::BadSchedule(thetas));
        }
        Ok(Self(thetas))
    }

    pub fn thetas(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self(vec![0.9, 0.8, 0.7, 0.6, 0.5])
    }
}

impl TryFrom<Vec<f64>> for ThresholdSchedule {
    type Error = ConquerError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ThresholdSchedule> for Vec<f64> {
    fn from(s: ThresholdSchedule) -> Self {
        s.0
    }
}

/// Components of one region at one threshold, at patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPartition {
    pub theta: f64,
    pub components: Vec<BinaryMask>,
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Right and down neighbours inside `region`, with their cosine.
fn region_edges(map: &PatchFeatureMap, region: &BinaryMask) -> Vec<(usize, usize, f64)> {
    let (h, w) = (region.height(), region.width());
    let mut edges = Vec::new();
    for (r, c) in region.pixels() {
        let p = map.index(r, c);
        if c + 1 < w && region.get(r, c + 1) {
            let q = p + 1;
            edges.push((p, q, map.cosine_unchecked(p, q)));
        }
        if r + 1 < h && region.get(r + 1, c) {
            let q = p + w as usize;
            edges.push((p, q, map.cosine_unchecked(p, q)));
        }
    }
    edges
}

fn check_region(map: &PatchFeatureMap, region: &BinaryMask) -> Result<(), ConquerError> {
    if region.height() != map.height() || region.width() != map.width() {
        return Err(ConquerError::ShapeMismatch {
            region_h: region.height(),
            region_w: region.width(),
            grid_h: map.height(),
            grid_w: map.width(),
        });
    }
    Ok(())
}

fn partition_from_edges(
    region: &BinaryMask,
    edges: &[(usize, usize, f64)],
    theta: f64,
) -> LevelPartition {
    let n = region.len();
    let mut sets = DisjointSet::new(n);
    for &(p, q, cos) in edges {
        if cos >= theta {
            sets.union(p, q);
        }
    }
    let mut slot = vec![usize::MAX; n];
    let mut components: Vec<BinaryMask> = Vec::new();
    for p in region.indices() {
        let root = sets.find(p);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(BinaryMask::new(region.height(), region.width()).expect("nonzero"));
        }
        components[slot[root]].set_index(p, true);
    }
    LevelPartition { theta, components }
}

/// Union-find over 4-adjacent patch pairs of `region` with cosine `>= theta`.
/// Components come out in scan order of their first patch.
pub fn merge_at_threshold(
    map: &PatchFeatureMap,
    region: &BinaryMask,
    theta: f64,
) -> Result<LevelPartition, ConquerError> {
    check_region(map, region)?;
    if region.is_empty() {
        return Err(ConquerError::EmptyRegion);
    }
    let edges = region_edges(map, region);
    Ok(partition_from_edges(region, &edges, theta))
}

/// All levels of `schedule` for one region.
pub fn merge_levels(
    map: &PatchFeatureMap,
    region: &BinaryMask,
    schedule: &ThresholdSchedule,
) -> Result<Vec<LevelPartition>, ConquerError> {
    check_region(map, region)?;
    if region.is_empty() {
        return Err(ConquerError::EmptyRegion);
    }
    let edges = region_edges(map, region);
    Ok(schedule
        .thetas()
        .iter()
        .map(|&t| partition_from_edges(region, &edges, t))
        .collect())
}

/// Fine-grained masks of one instance: every component of every level with at
/// least `min_patches` patches, exact duplicates collapsed onto their
/// highest-threshold occurrence. Confidence is the mean cosine over adjacent
/// patch pairs inside the component, clamped to `[0, 1]`.
pub fn conquer_masks(
    map: &PatchFeatureMap,
    instance: &BinaryMask,
    schedule: &ThresholdSchedule,
    min_patches: usize,
) -> Result<Vec<ScoredMask>, ConquerError> {
    check_region(map, instance)?;
    if instance.is_empty() {
        return Ok(Vec::new());
    }
    let edges = region_edges(map, instance);
    let mut seen: HashSet<BinaryMask> = HashSet::new();
    let mut out = Vec::new();
    for &theta in schedule.thetas() {
        let level = partition_from_edges(instance, &edges, theta);
        for comp in level.components {
            if (comp.area() as usize) < min_patches || seen.contains(&comp) {
                continue;
            }
            let (sum, count) = edges
                .iter()
                .filter(|(p, q, _)| comp.get_index(*p) && comp.get_index(*q))
                .fold((0.0, 0usize), |(s, n), (_, _, c)| (s + c, n + 1));
            let confidence = if count == 0 {
                1.0
            } else {
                (sum / count as f64).clamp(0.0, 1.0)
            };
            seen.insert(comp.clone());
            out.push(ScoredMask {
                mask: comp,
                confidence,
            });
        }
    }
    Ok(out)
}
