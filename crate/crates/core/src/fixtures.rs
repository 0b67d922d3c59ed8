//! Seeded synthetic scenes used by tests, the CLI `synth` command and the
//! demo data set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{synth_features, FeatureError, SynthRegion, SynthScene, SynthSpec};
use crate::hierarchy::{granularity, GranularMask, HierarchyError, Level, MaskHierarchy, PseudoLabelSet};

/// Pixels per patch for fixture scenes.
pub const FIXTURE_PATCH: u32 = 4;

/// Three instances on a 32x32 grid, each holding two parts whose directions
/// sit at cosine 0.75..0.8 from the instance.
pub fn nested_scene_spec(seed: u64) -> SynthSpec {
    let r = SynthRegion::rect;
    let regions = vec![
        r(2, 2, 14, 14),
        r(2, 18, 14, 30),
        r(18, 4, 30, 28),
        r(3, 3, 8, 8).within(0, Some(0.78)),
        r(9, 8, 13, 13).within(0, Some(0.75)),
        r(4, 20, 8, 28).within(1, Some(0.8)),
        r(10, 20, 13, 24).within(1, Some(0.76)),
        r(20, 6, 28, 12).within(2, Some(0.77)),
        r(20, 16, 26, 26).within(2, Some(0.75)),
    ];
    SynthSpec {
        height: 32,
        width: 32,
        dim: 32,
        regions,
        noise_sigma: 0.02,
        seed,
        min_separation_deg: 30.0,
        max_cross_cosine: Some(0.1),
    }
}

pub fn nested_scene(seed: u64) -> Result<SynthScene, FeatureError> {
    synth_features(&nested_scene_spec(seed))
}

/// One scene of the many-parts corpus: one or two instances, each with a
/// mid-level part holding small leaves plus several loose leaves, so most
/// masks are small relative to their instance.
pub fn many_parts_spec(seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regions = Vec::new();
    let two = rng.random_bool(0.5);
    let boxes: Vec<(u32, u32)> = if two { vec![(1, 1), (1, 17)] } else { vec![(4, 4)] };
    let cells = if two { 4 } else { 7 };
    for (top, left) in boxes {
        // lattice of 3x3 cells inside a one-patch border
        let side = cells * 3 + 2;
        let root = regions.len();
        regions.push(SynthRegion::rect(top, left, top + side, left + side));
        let cell = |i: u32, j: u32| (top + 1 + 3 * i, left + 1 + 3 * j);
        let mi = rng.random_range(0..cells - 1);
        let mj = rng.random_range(0..cells - 1);
        let (mt, ml) = cell(mi, mj);
        let mid = regions.len();
        regions.push(SynthRegion::rect(mt, ml, mt + 6, ml + 6).within(root, Some(0.75)));
        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if rng.random_bool(0.75) {
                let (t, l) = cell(mi + di, mj + dj);
                regions.push(SynthRegion::rect(t, l, t + 2, l + 2).within(mid, Some(0.75)));
            }
        }
        for i in 0..cells {
            for j in 0..cells {
                let in_mid = (mi..mi + 2).contains(&i) && (mj..mj + 2).contains(&j);
                if !in_mid && rng.random_bool(0.35) {
                    let (t, l) = cell(i, j);
                    regions.push(SynthRegion::rect(t, l, t + 2, l + 2).within(root, Some(0.75)));
                }
            }
        }
    }
    SynthSpec {
        height: 32,
        width: 32,
        dim: 64,
        regions,
        noise_sigma: 0.02,
        seed,
        min_separation_deg: 30.0,
        max_cross_cosine: Some(0.1),
    }
}

/// Twenty many-parts scenes with seeds `base_seed..base_seed + 20`.
pub fn many_parts_corpus(base_seed: u64) -> Result<Vec<SynthScene>, FeatureError> {
    (0..20)
        .map(|k| synth_features(&many_parts_spec(base_seed + k)))
        .collect()
}

/// Ground-truth labels of a synthetic scene at pixel resolution: one
/// hierarchy per top-level region holding all of its descendants, children
/// ordered by area, largest first.
pub fn scene_labels(image_id: &str, scene: &SynthScene, patch: u32) -> Result<PseudoLabelSet, HierarchyError> {
    let map = &scene.features;
    let (height, width) = (map.height() * patch, map.width() * patch);
    let mut hierarchies = Vec::new();
    for (id, root) in scene.roots().into_iter().enumerate() {
        let mut members: Vec<_> = (0..scene.parents.len())
            .filter(|&i| i != root && scene.root_of(i) == root)
            .map(|i| scene.masks[i].upsample(patch))
            .collect();
        members.sort_by_key(|m| std::cmp::Reverse(m.area()));
        let whole = scene.masks[root].upsample(patch);
        let a_max = whole.area();
        let a_min = members.iter().map(|m| m.area()).min().unwrap_or(a_max);
        let entry = |m: &crate::BinaryMask| GranularMask {
            mask: m.to_rle(),
            granularity: granularity(m.area(), a_min, a_max),
            confidence: 1.0,
            level: Level::Gt,
            instance_id: id as u32,
        };
        hierarchies.push(MaskHierarchy {
            instance_id: id as u32,
            root: entry(&whole),
            children: members.iter().map(entry).collect(),
        });
    }
    let labels = PseudoLabelSet {
        image_id: image_id.to_string(),
        height,
        width,
        hierarchies,
    };
    labels.validate(0.8)?;
    Ok(labels)
}
