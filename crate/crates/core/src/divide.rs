//! Instance discovery: binarized cosine affinity over patches, normalized-cut
//! bipartition and the iterative MaskCut loop, plus the confidence filter.
//!
//! The bipartition solves for the second eigenvector of
//! `N = D^-1/2 W D^-1/2`. Its top eigenvector is known in closed form
//! (`D^1/2 1`, eigenvalue 1), so the solver iterates on the shifted operator
//! `N + I` in the orthogonal complement of that direction. A small block of
//! vectors is carried together with a Rayleigh-Ritz step so that clusters of
//! nearly equal eigenvalues, which appear whenever several well separated
//! segments exist, still resolve to the true second eigenvector.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::PatchFeatureMap;
use crate::mask::{BinaryMask, Connectivity, ScoredMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivideError {
    #[error("feature map must be L2-normalized before building affinities")]
    NotNormalized,
    #[error("graph with {0} node(s) cannot be bipartitioned")]
    TooSmall(usize),
    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid divide configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenConfig {
    pub max_iterations: usize,
    /// Convergence threshold on `||N v - lambda v||_inf`.
    pub tolerance: f64,
    pub seed: u64,
    /// Number of vectors iterated together.
    pub block_size: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-8,
            seed: 0,
            block_size: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivideConfig {
    /// Cosine threshold for a unit affinity.
    pub tau_sim: f64,
    /// Affinity assigned below `tau_sim` and to masked-out patches.
    pub eps_floor: f64,
    pub max_instances: usize,
    /// Confidence floor applied after discovery.
    pub tau_conf: f64,
    /// Flip the cut when the foreground covers two or more grid corners.
    pub corner_flip: bool,
    pub eigen: EigenConfig,
}

impl Default for DivideConfig {
    fn default() -> Self {
        Self {
            tau_sim: 0.15,
            eps_floor: 1e-6,
            max_instances: 6,
            tau_conf: 0.3,
            corner_flip: true,
            eigen: EigenConfig::default(),
        }
    }
}

impl DivideConfig {
    pub fn validate(&self) -> Result<(), DivideError> {
        if !(self.tau_sim > 0.0 && self.tau_sim < 1.0) {
            return Err(DivideError::Config(format!("tau_sim {} not in (0,1)", self.tau_sim)));
        }
        if !(self.eps_floor > 0.0) {
            return Err(DivideError::Config(format!("eps_floor {} must be > 0", self.eps_floor)));
        }
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(DivideError::Config(format!("tau_conf {} not in [0,1]", self.tau_conf)));
        }
        Ok(())
    }
}

/// Dense symmetric patch affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    n: usize,
    weights: Vec<f64>,
    degree: Vec<f64>,
    /// Set when every pair is above the similarity threshold, i.e. there is
    /// nothing to cut.
    pub degenerate: bool,
}

impl AffinityGraph {
    /// Graph from a dense row-major weight matrix. Panics unless square,
    /// symmetric and strictly positive in degree.
    pub fn from_dense(n: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), n * n, "weights must be n x n");
        for i in 0..n {
            for j in 0..i {
                assert!(
                    weights[i * n + j] == weights[j * n + i],
                    "weights must be symmetric"
                );
            }
        }
        let mut g = Self {
            n,
            weights,
            degree: vec![0.0; n],
            degenerate: false,
        };
        g.refresh_degrees();
        assert!(g.degree.iter().all(|&d| d > 0.0), "all degrees must be positive");
        g
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weight(&self, p: usize, q: usize) -> f64 {
        self.weights[p * self.n + q]
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    fn refresh_degrees(&mut self) {
        let n = self.n;
        self.degree = self.weights.chunks_exact(n).map(|row| row.iter().sum()).collect();
    }

    /// Replace every affinity touching `patches` (diagonal included) with `eps`.
    pub fn mask_out(&mut self, patches: &[usize], eps: f64) {
        let n = self.n;
        for &p in patches {
            for q in 0..n {
                self.weights[p * n + q] = eps;
                self.weights[q * n + p] = eps;
            }
        }
        self.refresh_degrees();
    }

    /// `y = N x` for a block of `b` vectors stored row-major as `n x b`.
    fn normalized_matmul(&self, dinv_sqrt: &[f64], x: &[f64], b: usize) -> Vec<f64> {
        let n = self.n;
        let scaled: Vec<f64> = x
            .chunks_exact(b)
            .zip(dinv_sqrt)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let mut out = vec![0.0; n * b];
        out.par_chunks_mut(b).enumerate().for_each(|(i, acc)| {
            let row = &self.weights[i * n..(i + 1) * n];
            for (j, &w) in row.iter().enumerate() {
                let src = &scaled[j * b..(j + 1) * b];
                for k in 0..b {
                    acc[k] += w * src[k];
                }
            }
            let s = dinv_sqrt[i];
            acc.iter_mut().for_each(|v| *v *= s);
        });
        out
    }
}

/// Binarized cosine affinity: 1 when `cos >= tau_sim`, `eps_floor` otherwise,
/// with unit self-affinity.
pub fn build_affinity(
    map: &PatchFeatureMap,
    cfg: &DivideConfig,
) -> Result<AffinityGraph, DivideError> {
    if !map.is_normalized() {
        return Err(DivideError::NotNormalized);
    }
    cfg.validate()?;
    let n = map.len();
    let mut weights = vec![0.0; n * n];
    weights.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for (q, w) in row.iter_mut().enumerate() {
            *w = if p == q || map.cosine_unchecked(p, q) >= cfg.tau_sim {
                1.0
            } else {
                cfg.eps_floor
            };
        }
    });
    let degenerate = n >= 2 && weights.iter().all(|&w| w == 1.0);
    let mut g = AffinityGraph {
        n,
        weights,
        degree: vec![],
        degenerate,
    };
    g.refresh_degrees();
    Ok(g)
}

/// Normalized-cut value of the bipartition `(side, !side)`.
pub fn ncut_value(g: &AffinityGraph, side: &[bool]) -> f64 {
    let n = g.len();
    let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
    for p in 0..n {
        if side[p] {
            assoc_a += g.degree[p];
        } else {
            assoc_b += g.degree[p];
        }
        for q in 0..n {
            if side[p] && !side[q] {
                cut += g.weight(p, q);
            }
        }
    }
    if assoc_a == 0.0 || assoc_b == 0.0 {
        return f64::INFINITY;
    }
    cut / assoc_a + cut / assoc_b
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bipartition {
    /// Membership of each node in the foreground side.
    pub foreground: Vec<bool>,
    /// Generalized eigenvector `D^-1/2 v`, signed so its largest entry in
    /// magnitude is positive.
    pub fiedler: Vec<f64>,
    /// Second eigenvector of `N` (unit norm, same sign convention).
    pub eigenvector: Vec<f64>,
    pub eigenvalue: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Spectral bipartition by the sign of the second generalized eigenvector.
/// The foreground is the side holding the entry of largest magnitude; when
/// both sides tie, the side with fewer nodes.
pub fn spectral_bipartition(
    g: &AffinityGraph,
    cfg: &EigenConfig,
) -> Result<Bipartition, DivideError> {
    let b = bipartition_any(g, cfg)?;
    if !b.converged {
        return Err(DivideError::NotConverged {
            iterations: b.iterations,
            residual: b.residual,
        });
    }
    Ok(b)
}

/// As [`spectral_bipartition`] but returns the last iterate when the
/// iteration budget runs out.
fn bipartition_any(g: &AffinityGraph, cfg: &EigenConfig) -> Result<Bipartition, DivideError> {
    let n = g.len();
    if n < 2 {
        return Err(DivideError::TooSmall(n));
    }
    let dinv_sqrt: Vec<f64> = g.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let top: Vec<f64> = {
        let v: Vec<f64> = g.degree.iter().map(|d| d.sqrt()).collect();
        let norm = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let b = cfg.block_size.clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q: Vec<f64> = (0..n * b).map(|_| StandardNormal.sample(&mut rng)).collect();
    orthonormalize(&mut q, n, b, &top, &mut rng);

    let mut best = (Vec::new(), 0.0, f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let nq = g.normalized_matmul(&dinv_sqrt, &q, b);
        // Rayleigh-Ritz on span(Q)
        let h = DMatrix::from_fn(b, b, |r, c| (0..n).map(|i| q[i * b + r] * nq[i * b + c]).sum());
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let theta = eig.eigenvalues[order[0]];
        let lead = eig.eigenvectors.column(order[0]);
        let mut v = vec![0.0; n];
        let mut nv = vec![0.0; n];
        for i in 0..n {
            for k in 0..b {
                v[i] += q[i * b + k] * lead[k];
                nv[i] += nq[i * b + k] * lead[k];
            }
        }
        let residual = v
            .iter()
            .zip(&nv)
            .map(|(x, y)| (y - theta * x).abs())
            .fold(0.0, f64::max);
        best = (v, theta, residual);
        if residual <= cfg.tolerance {
            converged = true;
            break;
        }
        // next block: (N + I) Q rotated into the Ritz basis
        let mut next = vec![0.0; n * b];
        for i in 0..n {
            for (slot, &k) in order.iter().enumerate() {
                let col = eig.eigenvectors.column(k);
                next[i * b + slot] = (0..b)
                    .map(|m| (nq[i * b + m] + q[i * b + m]) * col[m])
                    .sum();
            }
        }
        q = next;
        orthonormalize(&mut q, n, b, &top, &mut rng);
    }

    let (mut v, eigenvalue, residual) = best;
    // re-project against the top direction to keep the iterate clean
    let proj = dot(&v, &top);
    v.iter_mut().zip(&top).for_each(|(x, t)| *x -= proj * t);
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut fiedler: Vec<f64> = v.iter().zip(&dinv_sqrt).map(|(x, s)| x * s).collect();
    let lead = argmax_abs(&fiedler);
    if fiedler[lead] < 0.0 {
        fiedler.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let positive: Vec<bool> = fiedler.iter().map(|&y| y > 0.0).collect();
    let peak = fiedler[lead].abs();
    let tie = fiedler
        .iter()
        .any(|&y| y < 0.0 && (y.abs() - peak).abs() <= 1e-9 * peak);
    let pos_count = positive.iter().filter(|&&p| p).count();
    let foreground = if tie && n - pos_count < pos_count {
        positive.iter().map(|p| !p).collect()
    } else {
        positive
    };
    Ok(Bipartition {
        foreground,
        fiedler,
        eigenvector: v,
        eigenvalue,
        iterations,
        residual,
        converged,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Deflate every column against `top`, then modified Gram-Schmidt (two
/// passes). Collapsed columns are redrawn.
fn orthonormalize(q: &mut [f64], n: usize, b: usize, top: &[f64], rng: &mut ChaCha8Rng) {
    for k in 0..b {
        let mut attempts = 0;
        loop {
            for _pass in 0..2 {
                let p = (0..n).map(|i| q[i * b + k] * top[i]).sum::<f64>();
                for i in 0..n {
                    q[i * b + k] -= p * top[i];
                }
                for j in 0..k {
                    let p = (0..n).map(|i| q[i * b + k] * q[i * b + j]).sum::<f64>();
                    for i in 0..n {
                        q[i * b + k] -= p * q[i * b + j];
                    }
                }
            }
            let norm = (0..n).map(|i| q[i * b + k].powi(2)).sum::<f64>().sqrt();
            if norm > 1e-10 || attempts > 16 {
                let norm = norm.max(f64::MIN_POSITIVE);
                for i in 0..n {
                    q[i * b + k] /= norm;
                }
                break;
            }
            attempts += 1;
            for i in 0..n {
                q[i * b + k] = StandardNormal.sample(rng);
            }
        }
    }
}

/// Fraction of unordered patch pairs inside `patches` whose cosine reaches
/// `tau_sim`. Single-patch sets score 1.
pub fn mask_confidence(map: &PatchFeatureMap, patches: &[usize], tau_sim: f64) -> f64 {
    let k = patches.len();
    if k < 2 {
        return 1.0;
    }
    let hits: usize = (0..k)
        .into_par_iter()
        .map(|a| {
            ((a + 1)..k)
                .filter(|&b| map.cosine_unchecked(patches[a], patches[b]) >= tau_sim)
                .count()
        })
        .sum();
    hits as f64 / (k * (k - 1) / 2) as f64
}

/// Iterative normalized-cut discovery at patch resolution.
///
/// Each round bipartitions the current graph, keeps the largest 4-connected
/// component of the foreground (masked patches excluded) and masks it out of
/// the affinity before the next round. Stops early once a round yields fewer
/// than two patches.
pub fn maskcut(map: &PatchFeatureMap, cfg: &DivideConfig) -> Result<Vec<ScoredMask>, DivideError> {
    let mut graph = build_affinity(map, cfg)?;
    if graph.degenerate {
        log::warn!("maskcut: all patches are mutually similar, nothing to cut");
        return Ok(Vec::new());
    }
    let (h, w) = (map.height(), map.width());
    let n = map.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let corners = [0, w as usize - 1, (h as usize - 1) * w as usize, n - 1];
    let mut masked = vec![false; n];
    let mut out = Vec::new();
    for round in 0..cfg.max_instances {
        let eig = EigenConfig {
            seed: cfg.eigen.seed.wrapping_add(round as u64),
            ..cfg.eigen.clone()
        };
        let cut = bipartition_any(&graph, &eig)?;
        if !cut.converged {
            log::debug!(
                "maskcut round {round}: eigensolver stopped at residual {:e}",
                cut.residual
            );
        }
        let mut fg: Vec<bool> = (0..n).map(|p| cut.foreground[p] && !masked[p]).collect();
        if cfg.corner_flip && corners.iter().filter(|&&c| fg[c]).count() >= 2 {
            fg = (0..n).map(|p| !cut.foreground[p] && !masked[p]).collect();
        }
        let fg_mask = BinaryMask::from_bools(h, w, &fg).expect("grid-sized buffer");
        let Some(component) = fg_mask.largest_component(Connectivity::Four) else {
            break;
        };
        let patches: Vec<usize> = component.indices().collect();
        if patches.len() < 2 {
            break;
        }
        let confidence = mask_confidence(map, &patches, cfg.tau_sim);
        graph.mask_out(&patches, cfg.eps_floor);
        patches.iter().for_each(|&p| masked[p] = true);
        out.push(ScoredMask {
            mask: component,
            confidence,
        });
        if masked.iter().all(|&m| m) {
            break;
        }
    }
    Ok(out)
}

/// Indices of masks whose confidence reaches `tau_conf`, in input order.
pub fn filter_confident(masks: &[ScoredMask], tau_conf: f64) -> Vec<usize> {
    masks
        .iter()
        .enumerate()
        .filter(|(_, m)| m.confidence >= tau_conf)
        .map(|(i, _)| i)
        .collect()
}
