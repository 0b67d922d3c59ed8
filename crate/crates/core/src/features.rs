//! Patch-feature maps: the binary `UGF1` file format, validation, cosine
//! similarity and a seeded synthetic generator for region-structured scenes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

pub const MAGIC: &[u8; 4] = b"UGF1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u32 = 1;
/// Allowed deviation of a patch norm from 1 for maps flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad magic {0:?}, expected \"UGF1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated feature file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature map has {got} values, expected {height}x{width}x{dim}")]
    Shape {
        height: u32,
        width: u32,
        dim: u32,
        got: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("patch {patch} has norm {norm}, but the map is flagged as normalized")]
    NotNormalized { patch: usize, norm: f64 },
    #[error("patch {0} is the zero vector and cannot be normalized")]
    ZeroVector(usize),
    #[error("patch index {index} out of range for {count} patches")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid synthetic scene: {0}")]
    Synth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `height x width` grid of `dim`-dimensional patch vectors, patch-major in row
/// order with channels contiguous per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    height: u32,
    width: u32,
    dim: u32,
    data: Vec<f32>,
    normalized: bool,
}

impl PatchFeatureMap {
    /// Validates shape and finiteness. `normalized` is only set after the
    /// norms have been checked.
    pub fn new(height: u32, width: u32, dim: u32, data: Vec<f32>) -> Result<Self, FeatureError> {
        Self::with_flag(height, width, dim, data, false)
    }

    fn with_flag(
        height: u32,
        width: u32,
        dim: u32,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, FeatureError> {
        let expected = height as usize * width as usize * dim as usize;
        if height == 0 || width == 0 || dim == 0 || data.len() != expected {
            return Err(FeatureError::Shape {
                height,
                width,
                dim,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(i));
        }
        let map = Self {
            height,
            width,
            dim,
            data,
            normalized,
        };
        if normalized {
            for p in 0..map.len() {
                let norm = map.norm(p);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(FeatureError::NotNormalized { patch: p, norm });
                }
            }
        }
        Ok(map)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Number of patches.
    pub fn len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of the patch at flat index `p` (row-major).
    pub fn vector(&self, p: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.data[p * d..(p + 1) * d]
    }

    pub fn index(&self, row: u32, col: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    fn norm(&self, p: usize) -> f64 {
        self.vector(p)
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy with every patch scaled to unit L2 norm.
    pub fn l2_normalized(&self) -> Result<Self, FeatureError> {
        let d = self.dim as usize;
        let mut data = self.data.clone();
        for p in 0..self.len() {
            let norm = self.norm(p);
            if norm == 0.0 {
                return Err(FeatureError::ZeroVector(p));
            }
            for v in &mut data[p * d..(p + 1) * d] {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Self::with_flag(self.height, self.width, self.dim, data, true)
    }

    /// Cosine similarity between patches `p` and `q`, clamped to `[-1, 1]`.
    pub fn cosine(&self, p: usize, q: usize) -> Result<f64, FeatureError> {
        let n = self.len();
        for index in [p, q] {
            if index >= n {
                return Err(FeatureError::IndexOutOfRange { index, count: n });
            }
        }
        Ok(self.cosine_unchecked(p, q))
    }

    #[inline]
    pub(crate) fn cosine_unchecked(&self, p: usize, q: usize) -> f64 {
        let (a, b) = (self.vector(p), self.vector(q));
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let denom = (na * nb).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Write `map` in the `UGF1` layout, creating parent directories as needed.
pub fn write_features(map: &PatchFeatureMap, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    let flags = if map.normalized { FLAG_NORMALIZED } else { 0 };
    for v in [VERSION, map.height, map.width, map.dim, flags] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<PatchFeatureMap, FeatureError> {
    decode_features(&fs::read(path)?)
}

/// Parse an in-memory `UGF1` buffer.
pub fn decode_features(bytes: &[u8]) -> Result<PatchFeatureMap, FeatureError> {
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, height, width, dim, flags) = (word(0), word(1), word(2), word(3), word(4));
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let count = height as usize * width as usize * dim as usize;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() != expected {
        return Err(FeatureError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PatchFeatureMap::with_flag(height, width, dim, data, flags & FLAG_NORMALIZED != 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Half-open patch rectangle `[top, bottom) x [left, right)`.
    Rect {
        top: u32,
        left: u32,
        bottom: u32,
        right: u32,
    },
    /// Patch centres `(r + 0.5, c + 0.5)` inside the ellipse belong to the region.
    Ellipse {
        center_row: f64,
        center_col: f64,
        radius_rows: f64,
        radius_cols: f64,
    },
}

impl Shape {
    fn contains(&self, row: u32, col: u32) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => row >= top && row < bottom && col >= left && col < right,
            Shape::Ellipse {
                center_row,
                center_col,
                radius_rows,
                radius_cols,
            } => {
                let dr = (row as f64 + 0.5 - center_row) / radius_rows;
                let dc = (col as f64 + 0.5 - center_col) / radius_cols;
                dr * dr + dc * dc <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRegion {
    pub shape: Shape,
    /// Enclosing region; must precede this one in the region list.
    #[serde(default)]
    pub parent: Option<usize>,
    /// Fixes the cosine between this region's direction and its parent's.
    /// Without it the direction is drawn independently.
    #[serde(default)]
    pub parent_cosine: Option<f64>,
}

impl SynthRegion {
    pub fn rect(top: u32, left: u32, bottom: u32, right: u32) -> Self {
        Self {
            shape: Shape::Rect {
                top,
                left,
                bottom,
                right,
            },
            parent: None,
            parent_cosine: None,
        }
    }

    pub fn within(mut self, parent: usize, cosine: Option<f64>) -> Self {
        self.parent = Some(parent);
        self.parent_cosine = cosine;
        self
    }
}

/// Recipe for a synthetic scene. Regions are nested or disjoint; every patch
/// takes the direction of the innermost region covering it, or the background
/// direction when uncovered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub regions: Vec<SynthRegion>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Minimum pairwise angle between directions not tied by `parent_cosine`.
    #[serde(default = "default_separation")]
    pub min_separation_deg: f64,
    /// Optional cap on the cosine between directions in different top-level
    /// trees (the background is its own tree).
    #[serde(default)]
    pub max_cross_cosine: Option<f64>,
}

fn default_separation() -> f64 {
    30.0
}

/// Output of [`synth_features`].
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub features: PatchFeatureMap,
    /// Ground-truth mask per region at patch resolution, descendants included.
    pub masks: Vec<BinaryMask>,
    pub parents: Vec<Option<usize>>,
    /// Unit direction per region; the background direction is last.
    pub directions: Vec<Vec<f64>>,
    /// Innermost region per patch, `None` for background.
    pub owner: Vec<Option<usize>>,
}

impl SynthScene {
    /// Indices of regions without a parent.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.parents.len())
            .filter(|&i| self.parents[i].is_none())
            .collect()
    }

    /// Region indices whose parent is `i`.
    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.parents.len())
            .filter(|&j| self.parents[j] == Some(i))
            .collect()
    }

    pub fn root_of(&self, mut i: usize) -> usize {
        while let Some(p) = self.parents[i] {
            i = p;
        }
        i
    }
}

const MAX_DIRECTION_ATTEMPTS: usize = 10_000;

pub fn synth_features(spec: &SynthSpec) -> Result<SynthScene, FeatureError> {
    let bad = |msg: String| Err(FeatureError::Synth(msg));
    if spec.height == 0 || spec.width == 0 || spec.dim < 2 {
        return bad(format!(
            "need a nonempty grid and dim >= 2, got {}x{}x{}",
            spec.height, spec.width, spec.dim
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return bad(format!("noise_sigma must be >= 0, got {}", spec.noise_sigma));
    }
    let max_cos = spec.min_separation_deg.to_radians().cos();
    let n = spec.regions.len();
    let (h, w) = (spec.height, spec.width);

    let mut masks = Vec::with_capacity(n);
    for (i, region) in spec.regions.iter().enumerate() {
        let m = BinaryMask::from_fn(h, w, |r, c| region.shape.contains(r, c))
            .expect("nonzero grid");
        if m.is_empty() {
            return bad(format!("region {i} covers no patch"));
        }
        if let Some(p) = region.parent {
            if p >= i {
                return bad(format!("region {i} lists parent {p}, parents must come first"));
            }
        }
        if let Some(c) = region.parent_cosine {
            if region.parent.is_none() {
                return bad(format!("region {i} has parent_cosine but no parent"));
            }
            if !(c > -1.0 && c <= max_cos) {
                return bad(format!(
                    "region {i}: parent_cosine {c} violates the {}° separation",
                    spec.min_separation_deg
                ));
            }
        }
        masks.push(m);
    }
    let parents: Vec<Option<usize>> = spec.regions.iter().map(|r| r.parent).collect();
    let is_ancestor = |a: usize, mut b: usize| {
        while let Some(p) = parents[b] {
            if p == a {
                return true;
            }
            b = p;
        }
        false
    };
    for i in 0..n {
        if let Some(p) = parents[i] {
            if !masks[i].is_subset_of(&masks[p]).expect("same grid") {
                return bad(format!("region {i} is not contained in its parent {p}"));
            }
        }
        for j in 0..i {
            if is_ancestor(j, i) {
                continue;
            }
            if masks[i].intersection_area(&masks[j]).expect("same grid") > 0 {
                return bad(format!("regions {j} and {i} overlap without nesting"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim as usize;
    let tree_of = |i: usize| {
        let mut r = i;
        while let Some(p) = parents[r] {
            r = p;
        }
        r
    };
    // Sampling order: background, then regions in list order.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut trees: Vec<usize> = Vec::with_capacity(n + 1);
    let background_tree = usize::MAX;
    directions.push(random_unit(&mut rng, dim));
    trees.push(background_tree);
    for i in 0..n {
        let region = &spec.regions[i];
        let tree = tree_of(i);
        let mut accepted = None;
        for _ in 0..MAX_DIRECTION_ATTEMPTS {
            let candidate = match (region.parent, region.parent_cosine) {
                (Some(p), Some(c)) => tilted(&mut rng, &directions[p + 1], c),
                _ => random_unit(&mut rng, dim),
            };
            let ok = directions.iter().enumerate().all(|(k, d)| {
                // slot 0 is the background, slot k > 0 is region k - 1
                let tied = k > 0 && region.parent == Some(k - 1) && region.parent_cosine.is_some();
                if tied {
                    return true;
                }
                let cos = dot(&candidate, d);
                if cos > max_cos {
                    return false;
                }
                match spec.max_cross_cosine {
                    Some(limit) if trees[k] != tree => cos <= limit,
                    _ => true,
                }
            });
            if ok {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(d) => {
                directions.push(d);
                trees.push(tree);
            }
            None => {
                return bad(format!(
                    "could not place a direction for region {i} within the separation constraints"
                ))
            }
        }
    }

    let mut owner = vec![None; (h * w) as usize];
    for (i, m) in masks.iter().enumerate() {
        // children follow parents, so later regions are deeper
        for p in m.indices() {
            owner[p] = Some(i);
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(owner.len() * dim);
    for o in &owner {
        let base = &directions[o.map_or(0, |i| i + 1)];
        let mut v: Vec<f64> = base.clone();
        if spec.noise_sigma > 0.0 {
            for x in &mut v {
                *x += noise.sample(&mut rng);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / norm) as f32));
    }
    let features = PatchFeatureMap::new(h, w, spec.dim, data)?.l2_normalized()?;
    let background = directions.remove(0);
    directions.push(background);
    Ok(SynthScene {
        features,
        masks,
        parents,
        directions,
        owner,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector at cosine `c` from `base`, in a random direction orthogonal to it.
fn tilted(rng: &mut impl Rng, base: &[f64], c: f64) -> Vec<f64> {
    loop {
        let mut u = random_unit(rng, base.len());
        let proj = dot(&u, base);
        u.iter_mut().zip(base).for_each(|(x, b)| *x -= proj * b);
        let norm = dot(&u, &u).sqrt();
        if norm < 1e-6 {
            continue;
        }
        let s = (1.0 - c * c).sqrt();
        return base
            .iter()
            .zip(&u)
            .map(|(b, x)| c * b + s * x / norm)
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_map(vectors: &[&[f32]]) -> PatchFeatureMap {
        let dim = vectors[0].len() as u32;
        let data = vectors.iter().flat_map(|v| v.iter().copied()).collect();
        PatchFeatureMap::new(1, vectors.len() as u32, dim, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let m = unit_map(&[&[1.0, 0.0], &[0.0, 1.0], &[s, s]])
            .l2_normalized()
            .unwrap();
        assert_eq!(m.cosine(0, 0).unwrap(), 1.0);
        assert_eq!(m.cosine(0, 1).unwrap(), 0.0);
        assert!((m.cosine(0, 2).unwrap() - 0.7071067811865476).abs() < 1e-7);
        assert_eq!(m.cosine(0, 2).unwrap(), m.cosine(2, 0).unwrap());
        assert!(matches!(
            m.cosine(0, 3),
            Err(FeatureError::IndexOutOfRange { index: 3, count: 3 })
        ));
    }

    #[test]
    fn header_size_arithmetic() {
        let map = PatchFeatureMap::new(2, 2, 3, (0..12).map(|i| i as f32).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/dir/f.ugf");
        write_features(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 48);
        let back = read_features(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back, map);
        // overwrite in place
        let other = PatchFeatureMap::new(1, 1, 1, vec![2.5]).unwrap();
        write_features(&other, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), other);
    }

    #[test]
    fn decode_errors() {
        let map = PatchFeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0])
            .unwrap()
            .l2_normalized()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ugf");
        write_features(&map, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        assert!(decode_features(&bytes).unwrap().is_normalized());

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_features(&wrong), Err(FeatureError::BadMagic(_))));
        assert!(matches!(
            decode_features(&bytes[..bytes.len() - 2]),
            Err(FeatureError::Truncated { .. })
        ));
        let nan = f32::NAN.to_le_bytes();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&nan);
        assert!(matches!(decode_features(&bytes), Err(FeatureError::NonFinite(0))));

        let two = 2.0f32.to_le_bytes();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&two);
        assert!(matches!(
            decode_features(&bytes),
            Err(FeatureError::NotNormalized { patch: 0, .. })
        ));
    }

    fn two_regions(sigma: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            height: 8,
            width: 8,
            dim: 8,
            regions: vec![SynthRegion::rect(0, 0, 4, 4), SynthRegion::rect(4, 4, 8, 8)],
            noise_sigma: sigma,
            seed,
            min_separation_deg: 30.0,
            max_cross_cosine: None,
        }
    }

    #[test]
    fn synth_one_region_noiseless() {
        let mut spec = two_regions(0.0, 3);
        spec.regions.truncate(1);
        let scene = synth_features(&spec).unwrap();
        let m = &scene.features;
        let inside: Vec<usize> = scene.masks[0].indices().collect();
        for &p in &inside {
            assert_eq!(m.vector(p), m.vector(inside[0]));
        }
        let out = m.index(7, 7);
        assert!(m.cosine(inside[0], out).unwrap() < 1.0);
    }

    #[test]
    fn synth_two_regions_noiseless_cosines() {
        let scene = synth_features(&two_regions(0.0, 11)).unwrap();
        let m = &scene.features;
        let (a, a2, b) = (m.index(0, 0), m.index(3, 3), m.index(7, 7));
        assert_eq!(m.cosine(a, a2).unwrap(), 1.0);
        let expected = dot(&scene.directions[0], &scene.directions[1]);
        assert!((m.cosine(a, b).unwrap() - expected).abs() < 1e-6);
        assert!(expected <= 30f64.to_radians().cos() + 1e-12);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = two_regions(0.3, 5);
        let a = synth_features(&spec).unwrap();
        let b = synth_features(&spec).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        let c = synth_features(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn synth_parent_cosine_and_nesting() {
        let spec = SynthSpec {
            height: 10,
            width: 10,
            dim: 16,
            regions: vec![
                SynthRegion::rect(1, 1, 9, 9),
                SynthRegion::rect(2, 2, 5, 5).within(0, Some(0.6)),
            ],
            noise_sigma: 0.0,
            seed: 1,
            min_separation_deg: 30.0,
            max_cross_cosine: Some(0.1),
        };
        let scene = synth_features(&spec).unwrap();
        let c = dot(&scene.directions[0], &scene.directions[1]);
        assert!((c - 0.6).abs() < 1e-12);
        assert!(scene.masks[1].is_subset_of(&scene.masks[0]).unwrap());
        let bg = scene.directions.last().unwrap();
        assert!(dot(bg, &scene.directions[0]) <= 0.1);
        assert_eq!(scene.owner[scene.features.index(3, 3)], Some(1));
        assert_eq!(scene.owner[scene.features.index(0, 0)], None);
    }

    #[test]
    fn synth_rejects_overlap() {
        let mut spec = two_regions(0.0, 1);
        spec.regions[1] = SynthRegion::rect(2, 2, 6, 6);
        assert!(matches!(synth_features(&spec), Err(FeatureError::Synth(_))));
        let mut spec = two_regions(0.0, 1);
        spec.regions[1] = SynthRegion::rect(2, 2, 6, 6).within(0, None);
        assert!(matches!(synth_features(&spec), Err(FeatureError::Synth(_))));
    }
}
