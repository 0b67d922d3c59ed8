//! Binary masks, run-length encoding and the set-algebra kernels used by every
//! other stage: area, IoU, containment, connected components and mask NMS.
//!
//! Pixels are stored row-major, packed 64 per word. Bits past `height * width`
//! in the last word are always zero, so equality and popcounts work directly on
//! the word buffer.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {height}x{width}")]
    ZeroSize { height: u32, width: u32 },
    #[error("dimension mismatch: {a_height}x{a_width} vs {b_height}x{b_width}")]
    DimensionMismatch {
        a_height: u32,
        a_width: u32,
        b_height: u32,
        b_width: u32,
    },
    #[error("containment is undefined for an empty part mask")]
    EmptyPart,
    #[error("RLE counts sum to {sum}, expected {expected}")]
    RleSumMismatch { sum: u64, expected: u64 },
    #[error("pixel buffer has {got} entries, expected {expected}")]
    BufferLength { got: usize, expected: usize },
    #[error("confidence {0} is not a finite value in [0, 1]")]
    BadConfidence(f64),
}

/// Dense single-channel binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, area={})",
            self.height,
            self.width,
            self.area()
        )
    }
}

impl BinaryMask {
    /// All-zero mask.
    pub fn new(height: u32, width: u32) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::ZeroSize { height, width });
        }
        let n = height as usize * width as usize;
        Ok(Self {
            height,
            width,
            words: vec![0; n.div_ceil(64)],
        })
    }

    pub fn full(height: u32, width: u32) -> Result<Self, MaskError> {
        let mut m = Self::new(height, width)?;
        m.words.iter_mut().for_each(|w| *w = u64::MAX);
        m.clear_tail();
        Ok(m)
    }

    /// Build a mask from a `(row, col) -> bool` predicate.
    pub fn from_fn(
        height: u32,
        width: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        let mut m = Self::new(height, width)?;
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        Ok(m)
    }

    /// Row-major boolean buffer of length `height * width`.
    pub fn from_bools(height: u32, width: u32, pixels: &[bool]) -> Result<Self, MaskError> {
        let mut m = Self::new(height, width)?;
        if pixels.len() != m.len() {
            return Err(MaskError::BufferLength {
                got: pixels.len(),
                expected: m.len(),
            });
        }
        for (i, &p) in pixels.iter().enumerate() {
            if p {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    /// Axis-aligned filled rectangle `[top, bottom) x [left, right)`, clipped to the mask.
    pub fn rect(
        height: u32,
        width: u32,
        top: u32,
        left: u32,
        bottom: u32,
        right: u32,
    ) -> Result<Self, MaskError> {
        Self::from_fn(height, width, |r, c| {
            r >= top && r < bottom && c >= left && c < right
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Number of pixels (`height * width`).
    pub fn len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        debug_assert!(row < self.height && col < self.width);
        let i = row as usize * self.width as usize + col as usize;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        assert!(row < self.height && col < self.width, "pixel out of range");
        let i = row as usize * self.width as usize + col as usize;
        self.set_index(i, value);
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Count of set pixels.
    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Self) -> Result<(), MaskError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch {
                a_height: self.height,
                a_width: self.width,
                b_height: other.height,
                b_width: other.width,
            })
        }
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum())
    }

    pub fn union_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as u64)
            .sum())
    }

    /// Intersection over union. Two empty masks have IoU 0.
    pub fn iou(&self, other: &Self) -> Result<f64, MaskError> {
        self.check_shape(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += (a & b).count_ones() as u64;
            union += (a | b).count_ones() as u64;
        }
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Fraction of `self` that lies inside `whole`: `|self ∩ whole| / |self|`.
    pub fn containment_in(&self, whole: &Self) -> Result<f64, MaskError> {
        let inter = self.intersection_area(whole)?;
        let area = self.area();
        if area == 0 {
            return Err(MaskError::EmptyPart);
        }
        Ok(inter as f64 / area as f64)
    }

    pub fn is_subset_of(&self, other: &Self) -> Result<bool, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0))
    }

    fn zip_with(&self, other: &Self, op: impl Fn(u64, u64) -> u64) -> Result<Self, MaskError> {
        self.check_shape(other)?;
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| op(a, b))
            .collect();
        let mut m = Self {
            height: self.height,
            width: self.width,
            words,
        };
        m.clear_tail();
        Ok(m)
    }

    pub fn and(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a | b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn and_not(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn not(&self) -> Self {
        let mut m = Self {
            height: self.height,
            width: self.width,
            words: self.words.iter().map(|w| !w).collect(),
        };
        m.clear_tail();
        m
    }

    fn clear_tail(&mut self) {
        let n = self.len();
        let rem = n % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    /// Row-major indices of set pixels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        self.words.iter().enumerate().flat_map(move |(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + b)
            })
            .take_while(move |&i| i < n)
        })
    }

    /// Set pixels as `(row, col)`, in scan order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.indices().map(move |i| ((i / w) as u32, (i % w) as u32))
    }

    /// Nearest-neighbour upsampling: every pixel becomes a `factor x factor` block.
    pub fn upsample(&self, factor: u32) -> Self {
        assert!(factor >= 1, "upsampling factor must be positive");
        if factor == 1 {
            return self.clone();
        }
        let mut out = Self::new(self.height * factor, self.width * factor)
            .expect("nonzero dimensions");
        let ow = out.width as usize;
        for (r, c) in self.pixels() {
            for dr in 0..factor {
                let row = (r * factor + dr) as usize;
                for dc in 0..factor {
                    out.set_index(row * ow + (c * factor + dc) as usize, true);
                }
            }
        }
        out
    }

    /// Block downsampling: an output cell is set when at least half of its
    /// `factor x factor` footprint is set. Dimensions must be divisible by `factor`.
    pub fn downsample(&self, factor: u32) -> Self {
        assert!(factor >= 1, "downsampling factor must be positive");
        assert!(
            self.height % factor == 0 && self.width % factor == 0,
            "mask size {}x{} not divisible by {factor}",
            self.height,
            self.width
        );
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut counts = vec![0u32; h as usize * w as usize];
        for (r, c) in self.pixels() {
            counts[(r / factor) as usize * w as usize + (c / factor) as usize] += 1;
        }
        let need = (factor * factor).div_ceil(2);
        let mut out = Self::new(h, w).expect("nonzero dimensions");
        for (i, &n) in counts.iter().enumerate() {
            if n >= need {
                out.set_index(i, true);
            }
        }
        out
    }

    /// Connected components in scan order of their first pixel.
    pub fn connected_components(&self, connectivity: Connectivity) -> Vec<BinaryMask> {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut label = vec![u32::MAX; self.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        let offsets: &[(i64, i64)] = match connectivity {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        };
        for start in self.indices() {
            if label[start] != u32::MAX {
                continue;
            }
            let id = out.len() as u32;
            let mut comp = Self::new(self.height, self.width).expect("nonzero dimensions");
            label[start] = id;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                comp.set_index(i, true);
                let (r, c) = ((i as i64) / w, (i as i64) % w);
                for &(dr, dc) in offsets {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let j = (nr * w + nc) as usize;
                    if label[j] == u32::MAX && self.get_index(j) {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Largest connected component; ties go to the earlier one in scan order.
    pub fn largest_component(&self, connectivity: Connectivity) -> Option<BinaryMask> {
        let mut best: Option<(u64, BinaryMask)> = None;
        for comp in self.connected_components(connectivity) {
            let a = comp.area();
            if best.as_ref().is_none_or(|(ba, _)| a > *ba) {
                best = Some((a, comp));
            }
        }
        best.map(|(_, m)| m)
    }

    pub fn to_rle(&self) -> RleMask {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for c in 0..w {
            for r in 0..h {
                let v = self.get_index(r * w + c);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        RleMask {
            size: [self.height, self.width],
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Column-major run-length encoding with a leading (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    /// Area straight from the runs; odd-indexed runs are foreground.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn decode(&self) -> Result<BinaryMask, MaskError> {
        let [h, w] = self.size;
        let mut m = BinaryMask::new(h, w)?;
        let expected = h as u64 * w as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != expected {
            return Err(MaskError::RleSumMismatch { sum, expected });
        }
        let (h, w) = (h as usize, w as usize);
        let mut pos = 0usize;
        for (k, &run) in self.counts.iter().enumerate() {
            let run = run as usize;
            if k % 2 == 1 {
                for p in pos..pos + run {
                    let (c, r) = (p / h, p % h);
                    m.set_index(r * w + c, true);
                }
            }
            pos += run;
        }
        Ok(m)
    }
}

impl From<&BinaryMask> for RleMask {
    fn from(m: &BinaryMask) -> Self {
        m.to_rle()
    }
}

impl TryFrom<&RleMask> for BinaryMask {
    type Error = MaskError;

    fn try_from(r: &RleMask) -> Result<Self, Self::Error> {
        r.decode()
    }
}

/// A mask with a detection confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub confidence: f64,
}

impl ScoredMask {
    pub fn new(mask: BinaryMask, confidence: f64) -> Result<Self, MaskError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(MaskError::BadConfidence(confidence));
        }
        Ok(Self { mask, confidence })
    }
}

/// Priority order used by NMS: confidence desc, area desc, index asc.
pub fn priority_order(masks: &[ScoredMask]) -> Vec<usize> {
    let areas: Vec<u64> = masks.iter().map(|m| m.mask.area()).collect();
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .confidence
            .total_cmp(&masks[a].confidence)
            .then(areas[b].cmp(&areas[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy mask NMS. Returns kept indices in priority order; a mask is dropped
/// when its IoU with an already kept mask reaches `iou_threshold`.
pub fn nms(masks: &[ScoredMask], iou_threshold: f64) -> Vec<usize> {
    let order = priority_order(masks);
    nms_in_order(masks, &order, iou_threshold)
}

/// NMS over an explicit priority order.
pub fn nms_in_order(masks: &[ScoredMask], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        let suppressed = kept.iter().any(|&k| {
            masks[i]
                .mask
                .iou(&masks[k].mask)
                .map(|v| v >= iou_threshold)
                .unwrap_or(false)
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
