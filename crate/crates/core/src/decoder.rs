//! Toy granularity-conditioned mask decoder with hand-written backprop.
//!
//! A prompt sequence `[mask token; point embedding; granularity embedding]`
//! runs through one two-way block over the patch features (token
//! self-attention, token-to-image attention, feed-forward, image-to-token
//! attention) plus a final token-to-image attention. The mask token then
//! goes through a 3-layer MLP to a weight vector `w`, and the logit of patch
//! `p` is `<w, f_p>`.
//!
//! Granularity enters through `phi(g) = [sin(2 pi f_k g), cos(2 pi f_k g)]_k`
//! with Gaussian frequencies, followed by a 3-layer MLP. All attention is
//! single-head, GELU is the exact erf form, and there is no layer norm.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{initial_click, Click, EvalError, Segmenter};
use crate::features::{FeatureError, PatchFeatureMap};
use crate::hierarchy::granularity;
use crate::mask::BinaryMask;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UGTD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("point ({x}, {y}) outside the {width}x{height} grid")]
    PointOutOfGrid {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("non-finite value after {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Box<DecoderParams>,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Gaussian frequencies for the granularity encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub frequencies: Vec<f64>,
}

impl FourierBasis {
    pub fn sample(d_fourier: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        Self {
            frequencies: (0..d_fourier / 2).map(|_| normal.sample(&mut rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }
}

/// `[sin(2 pi f_0 g), cos(2 pi f_0 g), sin(2 pi f_1 g), ...]`.
pub fn fourier_encode(g: f64, basis: &FourierBasis) -> Vec<f64> {
    let mut out = Vec::with_capacity(basis.dim());
    for f in &basis.frequencies {
        let (s, c) = (2.0 * PI * f * g).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub d_model: usize,
    pub d_fourier: usize,
    pub feat_dim: usize,
}

impl DecoderShape {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(DecoderError::Config(format!("d_model {} must be even and positive", self.d_model)));
        }
        if self.d_fourier == 0 || self.d_fourier % 2 != 0 {
            return Err(DecoderError::Config(format!(
                "d_fourier {} must be even and positive",
                self.d_fourier
            )));
        }
        if self.feat_dim == 0 {
            return Err(DecoderError::Config("feature dim must be positive".into()));
        }
        Ok(())
    }
}

const ATTENTION: [&str; 4] = ["self", "t2i", "i2t", "final"];

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// Names, shapes and offsets of the trainable tensors, in blob order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tensors: Vec<Tensor>,
    len: usize,
}

impl Layout {
    fn new(shape: &DecoderShape) -> Self {
        let (m, df, d) = (shape.d_model, shape.d_fourier, shape.feat_dim);
        let mut spec: Vec<(String, usize, usize)> = vec![
            ("g.w1".into(), df, m),
            ("g.b1".into(), 1, m),
            ("g.w2".into(), m, m),
            ("g.b2".into(), 1, m),
            ("g.w3".into(), m, m),
            ("g.b3".into(), 1, m),
            ("in.w".into(), d, m),
            ("in.b".into(), 1, m),
            ("tok.mask".into(), 1, m),
            ("tok.point".into(), 1, m),
        ];
        for a in ATTENTION {
            for w in ["wq", "wk", "wv", "wo"] {
                spec.push((format!("{a}.{w}"), m, m));
            }
            spec.push((format!("{a}.bo"), 1, m));
        }
        spec.extend([
            ("ffn.w1".into(), m, 2 * m),
            ("ffn.b1".into(), 1, 2 * m),
            ("ffn.w2".into(), 2 * m, m),
            ("ffn.b2".into(), 1, m),
            ("out.w1".into(), m, m),
            ("out.b1".into(), 1, m),
            ("out.w2".into(), m, m),
            ("out.b2".into(), 1, m),
            ("out.w3".into(), m, d),
            ("out.b3".into(), 1, d),
        ]);
        let mut offset = 0;
        let tensors = spec
            .into_iter()
            .map(|(name, rows, cols)| {
                let t = Tensor {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                t
            })
            .collect();
        Self {
            tensors,
            len: offset,
        }
    }

    fn find(&self, name: &str) -> &Tensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(name, offset, element count)` per tensor.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.tensors
            .iter()
            .map(|t| (t.name.as_str(), t.offset, t.rows * t.cols))
    }

    fn mat<'a>(&self, data: &'a [f64], name: &str) -> ArrayView2<'a, f64> {
        let t = self.find(name);
        ArrayView2::from_shape((t.rows, t.cols), &data[t.offset..t.offset + t.rows * t.cols])
            .expect("layout shape")
    }

    fn vec<'a>(&self, data: &'a [f64], name: &str) -> ArrayView1<'a, f64> {
        let t = self.find(name);
        ArrayView1::from(&data[t.offset..t.offset + t.rows * t.cols])
    }

    fn mat_mut<'a>(&self, data: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
        let t = self.find(name);
        ArrayViewMut2::from_shape((t.rows, t.cols), &mut data[t.offset..t.offset + t.rows * t.cols])
            .expect("layout shape")
    }

    fn vec_mut<'a>(&self, data: &'a mut [f64], name: &str) -> ArrayViewMut1<'a, f64> {
        let t = self.find(name);
        ArrayViewMut1::from(&mut data[t.offset..t.offset + t.rows * t.cols])
    }
}

/// Decoder weights plus the two fixed encodings (granularity frequencies and
/// the point-encoding matrix). Only `data` is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub shape: DecoderShape,
    pub g_basis: FourierBasis,
    /// `2 x d_model/2` Gaussian matrix for point encodings.
    pub pe_basis: Array2<f64>,
    pub layout: Layout,
    pub data: Vec<f64>,
}

pub const SIGMA_F: f64 = 10.0;
pub const SIGMA_PE: f64 = 1.0;
const IDENTITY_JITTER: f64 = 0.3;
/// Token-to-image queries start sharper so the point encoding can localise;
/// token self-attention starts close to uniform.
const CROSS_QUERY_GAIN: f64 = 2.0;
const SELF_QUERY_GAIN: f64 = 0.1;

fn identity_gain(name: &str) -> f64 {
    match name {
        "t2i.wq" | "final.wq" => CROSS_QUERY_GAIN,
        "self.wq" => SELF_QUERY_GAIN,
        _ => 1.0,
    }
}

impl DecoderParams {
    /// All trainable weights zero; encodings sampled from `seed`.
    pub fn zeros(shape: DecoderShape, sigma_f: f64, sigma_pe: f64, seed: u64) -> Result<Self, DecoderError> {
        shape.validate()?;
        let g_basis = FourierBasis::sample(shape.d_fourier, sigma_f, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, sigma_pe).expect("finite sigma");
        let pe_basis = Array2::from_shape_fn((2, shape.d_model / 2), |_| normal.sample(&mut rng));
        let layout = Layout::new(&shape);
        let data = vec![0.0; layout.len()];
        Ok(Self {
            shape,
            g_basis,
            pe_basis,
            layout,
            data,
        })
    }

    /// Dense weights drawn with standard deviation `1/sqrt(fan_in)`, biases
    /// zero, token vectors standard normal. Square attention projections
    /// start at a jittered identity, scaled per [`identity_gain`].
    pub fn init(shape: DecoderShape, sigma_f: f64, sigma_pe: f64, seed: u64) -> Result<Self, DecoderError> {
        let mut p = Self::zeros(shape, sigma_f, sigma_pe, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for t in &p.layout.tensors {
            let is_bias = t.rows == 1 && !t.name.starts_with("tok.");
            if is_bias {
                continue;
            }
            let near_identity = ATTENTION.iter().any(|a| t.name.starts_with(a)) && t.rows == t.cols;
            let std = if t.rows == 1 {
                1.0
            } else if near_identity {
                IDENTITY_JITTER / (t.rows as f64).sqrt()
            } else {
                1.0 / (t.rows as f64).sqrt()
            };
            let gain = if near_identity { identity_gain(&t.name) } else { 1.0 };
            let normal = Normal::new(0.0, std).expect("finite std");
            for (k, v) in p.data[t.offset..t.offset + t.rows * t.cols].iter_mut().enumerate() {
                *v = normal.sample(&mut rng);
                if near_identity && k / t.cols == k % t.cols {
                    *v += 1.0;
                }
                *v *= gain;
            }
        }
        Ok(p)
    }

    pub fn num_trainable(&self) -> usize {
        self.data.len()
    }

    fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.layout.mat(&self.data, name)
    }

    fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        self.layout.vec(&self.data, name)
    }

    /// Point encoding of normalized coordinates `(u, v)` in `[0, 1]`.
    pub fn encode_point(&self, u: f64, v: f64) -> Array1<f64> {
        let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let half = self.shape.d_model / 2;
        let mut out = Array1::zeros(self.shape.d_model);
        for k in 0..half {
            let t = 2.0 * PI * (a * self.pe_basis[[0, k]] + b * self.pe_basis[[1, k]]);
            out[2 * k] = t.sin();
            out[2 * k + 1] = t.cos();
        }
        out
    }

    /// Encodings of every patch centre of an `h x w` grid, row-major.
    pub fn grid_encoding(&self, h: u32, w: u32) -> Array2<f64> {
        let mut out = Array2::zeros((h as usize * w as usize, self.shape.d_model));
        for r in 0..h {
            for c in 0..w {
                let e = self.encode_point((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                out.row_mut((r * w + c) as usize).assign(&e);
            }
        }
        out
    }
}

/// Granularity embedding `E_g = MLP(phi)`, exposed for inspection.
pub fn embed_granularity(phi: &[f64], params: &DecoderParams) -> Result<Vec<f64>, DecoderError> {
    if phi.len() != params.shape.d_fourier {
        return Err(DecoderError::Shape(format!(
            "phi has {} entries, expected {}",
            phi.len(),
            params.shape.d_fourier
        )));
    }
    let x = Array2::from_shape_vec((1, phi.len()), phi.to_vec()).expect("row vector");
    Ok(mlp3_forward(params, "g", &x).out.row(0).to_vec())
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

fn linear_back(
    layout: &Layout,
    grads: &mut [f64],
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    w_name: &str,
    b_name: Option<&str>,
) -> Array2<f64> {
    layout.mat_mut(grads, w_name).scaled_add(1.0, &x.t().dot(dy));
    if let Some(b) = b_name {
        layout.vec_mut(grads, b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
    dy.dot(&w.t())
}

struct MlpCache {
    x: Array2<f64>,
    h1p: Array2<f64>,
    h1: Array2<f64>,
    h2p: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

fn mlp3_forward(p: &DecoderParams, prefix: &str, x: &Array2<f64>) -> MlpCache {
    let name = |s: &str| format!("{prefix}.{s}");
    let h1p = linear(x, p.mat(&name("w1")), p.vec(&name("b1")));
    let h1 = h1p.mapv(gelu);
    let h2p = linear(&h1, p.mat(&name("w2")), p.vec(&name("b2")));
    let h2 = h2p.mapv(gelu);
    let out = linear(&h2, p.mat(&name("w3")), p.vec(&name("b3")));
    MlpCache {
        x: x.clone(),
        h1p,
        h1,
        h2p,
        h2,
        out,
    }
}

fn mlp3_backward(p: &DecoderParams, prefix: &str, c: &MlpCache, dout: &Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
    let name = |s: &str| format!("{prefix}.{s}");
    let l = &p.layout;
    let dh2 = linear_back(l, grads, &c.h2, p.mat(&name("w3")), dout, &name("w3"), Some(&name("b3")));
    let dh2p = dh2 * c.h2p.mapv(gelu_grad);
    let dh1 = linear_back(l, grads, &c.h1, p.mat(&name("w2")), &dh2p, &name("w2"), Some(&name("b2")));
    let dh1p = dh1 * c.h1p.mapv(gelu_grad);
    linear_back(l, grads, &c.x, p.mat(&name("w1")), &dh1p, &name("w1"), Some(&name("b1")))
}

struct AttnCache {
    q_in: Array2<f64>,
    k_in: Array2<f64>,
    v_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn attn_forward(
    p: &DecoderParams,
    prefix: &str,
    q_in: &Array2<f64>,
    k_in: &Array2<f64>,
    v_in: &Array2<f64>,
) -> (Array2<f64>, AttnCache) {
    let name = |s: &str| format!("{prefix}.{s}");
    let scale = 1.0 / (p.shape.d_model as f64).sqrt();
    let q = q_in.dot(&p.mat(&name("wq")));
    let k = k_in.dot(&p.mat(&name("wk")));
    let v = v_in.dot(&p.mat(&name("wv")));
    let mut a = q.dot(&k.t()) * scale;
    softmax_rows(&mut a);
    let o = a.dot(&v);
    let y = linear(&o, p.mat(&name("wo")), p.vec(&name("bo")));
    let cache = AttnCache {
        q_in: q_in.clone(),
        k_in: k_in.clone(),
        v_in: v_in.clone(),
        q,
        k,
        v,
        a,
        o,
    };
    (y, cache)
}

/// Returns gradients with respect to the query, key and value inputs.
fn attn_backward(
    p: &DecoderParams,
    prefix: &str,
    c: &AttnCache,
    dy: &Array2<f64>,
    grads: &mut [f64],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let name = |s: &str| format!("{prefix}.{s}");
    let l = &p.layout;
    let scale = 1.0 / (p.shape.d_model as f64).sqrt();
    let d_o = linear_back(l, grads, &c.o, p.mat(&name("wo")), dy, &name("wo"), Some(&name("bo")));
    let da = d_o.dot(&c.v.t());
    let dv = c.a.t().dot(&d_o);
    let inner = (&da * &c.a).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = (&da - &inner) * &c.a * scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    let dq_in = linear_back(l, grads, &c.q_in, p.mat(&name("wq")), &dq, &name("wq"), None);
    let dk_in = linear_back(l, grads, &c.k_in, p.mat(&name("wk")), &dk, &name("wk"), None);
    let dv_in = linear_back(l, grads, &c.v_in, p.mat(&name("wv")), &dv, &name("wv"), None);
    (dq_in, dk_in, dv_in)
}

/// Everything the backward pass needs.
pub struct ForwardPass {
    feats: Array2<f64>,
    g_mlp: MlpCache,
    self_attn: AttnCache,
    t2i: AttnCache,
    ffn_in: Array2<f64>,
    ffn_hp: Array2<f64>,
    ffn_h: Array2<f64>,
    i2t: AttnCache,
    fin: AttnCache,
    out_mlp: MlpCache,
    pub weight: Array1<f64>,
    pub logits: Array1<f64>,
}

fn check_finite(stage: &'static str, a: &Array2<f64>) -> Result<(), DecoderError> {
    if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DecoderError::NonFinite {
            stage,
            detail: format!("entry {i} of {:?} is {v}", a.shape()),
        });
    }
    Ok(())
}

/// Prompt-independent inputs for one image.
pub struct ImageInput {
    pub height: u32,
    pub width: u32,
    /// `n x D` raw features.
    pub feats: Array2<f64>,
    /// `n x d_model` patch position encodings.
    pub pos: Array2<f64>,
}

impl ImageInput {
    pub fn new(map: &PatchFeatureMap, params: &DecoderParams) -> Result<Self, DecoderError> {
        if map.dim() as usize != params.shape.feat_dim {
            return Err(DecoderError::Shape(format!(
                "features have dim {}, decoder expects {}",
                map.dim(),
                params.shape.feat_dim
            )));
        }
        let feats = Array2::from_shape_fn((map.len(), map.dim() as usize), |(p, k)| {
            map.data()[p * map.dim() as usize + k] as f64
        });
        Ok(Self {
            height: map.height(),
            width: map.width(),
            feats,
            pos: params.grid_encoding(map.height(), map.width()),
        })
    }
}

pub fn forward(
    params: &DecoderParams,
    image: &ImageInput,
    point: (u32, u32),
    g: f64,
) -> Result<ForwardPass, DecoderError> {
    let (x, y) = point;
    if x >= image.width || y >= image.height {
        return Err(DecoderError::PointOutOfGrid {
            x,
            y,
            width: image.width,
            height: image.height,
        });
    }
    let m = params.shape.d_model;
    let phi = fourier_encode(g, &params.g_basis);
    let phi = Array2::from_shape_vec((1, phi.len()), phi).expect("row vector");
    let g_mlp = mlp3_forward(params, "g", &phi);

    let x0 = linear(&image.feats, params.mat("in.w"), params.vec("in.b"));
    let mut t0 = Array2::zeros((3, m));
    t0.row_mut(0).assign(&params.vec("tok.mask"));
    let pe = image.pos.row((y * image.width + x) as usize);
    t0.row_mut(1).assign(&(&pe + &params.vec("tok.point")));
    t0.row_mut(2).assign(&g_mlp.out.row(0));
    check_finite("prompt tokens", &t0)?;

    let (y1, self_attn) = attn_forward(params, "self", &t0, &t0, &t0);
    let t1 = &t0 + &y1;
    let keys = &x0 + &image.pos;
    let (y2, t2i) = attn_forward(params, "t2i", &t1, &keys, &x0);
    let t2 = &t1 + &y2;
    let ffn_hp = linear(&t2, params.mat("ffn.w1"), params.vec("ffn.b1"));
    let ffn_h = ffn_hp.mapv(gelu);
    let t3 = &t2 + &linear(&ffn_h, params.mat("ffn.w2"), params.vec("ffn.b2"));
    check_finite("token block", &t3)?;
    let (y4, i2t) = attn_forward(params, "i2t", &keys, &t3, &t3);
    let x1 = &x0 + &y4;
    check_finite("image update", &x1)?;
    let (y5, fin) = attn_forward(params, "final", &t3, &(&x1 + &image.pos), &x1);
    let t4 = &t3 + &y5;
    let o = t4.row(0).to_owned().insert_axis(Axis(0));
    let out_mlp = mlp3_forward(params, "out", &o);
    let weight = out_mlp.out.row(0).to_owned();
    let logits = image.feats.dot(&weight);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DecoderError::NonFinite {
            stage: "logits",
            detail: format!("weight vector {weight:?}"),
        });
    }
    Ok(ForwardPass {
        feats: image.feats.clone(),
        g_mlp,
        self_attn,
        t2i,
        ffn_in: t2,
        ffn_hp,
        ffn_h,
        i2t,
        fin,
        out_mlp,
        weight,
        logits,
    })
}

/// Gradient of the loss with respect to every trainable parameter, given
/// the gradient with respect to the logits.
pub fn backward(params: &DecoderParams, fp: &ForwardPass, dlogits: &Array1<f64>) -> Vec<f64> {
    let mut grads = vec![0.0; params.data.len()];
    let l = &params.layout;
    let m = params.shape.d_model;
    let dw = fp.feats.t().dot(dlogits).insert_axis(Axis(0));
    let d_o = mlp3_backward(params, "out", &fp.out_mlp, &dw, &mut grads);
    let mut dt4 = Array2::zeros((3, m));
    dt4.row_mut(0).assign(&d_o.row(0));

    let (dq, dk, dv) = attn_backward(params, "final", &fp.fin, &dt4, &mut grads);
    let mut dt3 = dt4 + dq;
    let dx1 = dk + dv;

    let (dq, dk, dv) = attn_backward(params, "i2t", &fp.i2t, &dx1, &mut grads);
    let mut dx0 = dx1 + &dq;
    dt3 += &dk;
    dt3 += &dv;

    let dh = linear_back(l, &mut grads, &fp.ffn_h, params.mat("ffn.w2"), &dt3, "ffn.w2", Some("ffn.b2"));
    let dhp = dh * fp.ffn_hp.mapv(gelu_grad);
    let dt2 = dt3 + linear_back(l, &mut grads, &fp.ffn_in, params.mat("ffn.w1"), &dhp, "ffn.w1", Some("ffn.b1"));

    let (dq, dk, dv) = attn_backward(params, "t2i", &fp.t2i, &dt2, &mut grads);
    let dt1 = dt2 + dq;
    dx0 += &dk;
    dx0 += &dv;

    let (dq, dk, dv) = attn_backward(params, "self", &fp.self_attn, &dt1, &mut grads);
    let dt0 = dt1 + dq + dk + dv;

    l.vec_mut(&mut grads, "tok.mask").scaled_add(1.0, &dt0.row(0));
    l.vec_mut(&mut grads, "tok.point").scaled_add(1.0, &dt0.row(1));
    let deg = dt0.row(2).to_owned().insert_axis(Axis(0));
    mlp3_backward(params, "g", &fp.g_mlp, &deg, &mut grads);
    linear_back(l, &mut grads, &fp.feats, params.mat("in.w"), &dx0, "in.w", Some("in.b"));
    grads
}

/// Patch logits for a point prompt `(x, y)` at granularity `g`.
pub fn decode(
    map: &PatchFeatureMap,
    point: (u32, u32),
    g: f64,
    params: &DecoderParams,
) -> Result<Array1<f64>, DecoderError> {
    let image = ImageInput::new(map, params)?;
    Ok(forward(params, &image, point, g)?.logits)
}

/// Strictly positive logits; all-zero logits give an empty mask.
pub fn logits_to_mask(logits: &Array1<f64>, height: u32, width: u32) -> BinaryMask {
    let bits: Vec<bool> = logits.iter().map(|&z| z > 0.0).collect();
    BinaryMask::from_bools(height, width, &bits).expect("grid-sized logits")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_weight: 20.0,
            dice_weight: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            smooth: 1.0,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss parts and the gradient of the weighted total with respect to the
/// logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
    pub grad: Array1<f64>,
}

/// `focal_weight * focal + dice_weight * dice`; focal is the pixel mean.
pub fn loss(logits: &Array1<f64>, target: &BinaryMask, cfg: &LossConfig) -> Result<LossValue, DecoderError> {
    let n = logits.len();
    if n != target.len() {
        return Err(DecoderError::Shape(format!(
            "{n} logits for a {}-pixel target",
            target.len()
        )));
    }
    let (a, gm) = (cfg.alpha, cfg.gamma);
    let mut focal = 0.0;
    let mut grad = Array1::zeros(n);
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    for i in 0..n {
        let z = logits[i];
        let p = probs[i];
        if target.get_index(i) {
            let ln_p = -softplus(-z);
            let q = 1.0 - p;
            focal += -a * q.powf(gm) * ln_p;
            grad[i] = cfg.focal_weight * a * q.powf(gm) * (gm * p * ln_p - q) / n as f64;
            inter += p;
            ysum += 1.0;
        } else {
            let ln_q = -softplus(z);
            focal += -(1.0 - a) * p.powf(gm) * ln_q;
            grad[i] = cfg.focal_weight * (1.0 - a) * p.powf(gm) * (p - gm * (1.0 - p) * ln_q) / n as f64;
        }
        psum += p;
    }
    focal /= n as f64;
    let den = psum + ysum + cfg.smooth;
    let num = 2.0 * inter + cfg.smooth;
    let dice = 1.0 - num / den;
    for i in 0..n {
        let y = if target.get_index(i) { 1.0 } else { 0.0 };
        let dp = -(2.0 * y * den - num) / (den * den);
        grad[i] += cfg.dice_weight * dp * probs[i] * (1.0 - probs[i]);
    }
    Ok(LossValue {
        focal,
        dice,
        total: cfg.focal_weight * focal + cfg.dice_weight * dice,
        grad,
    })
}

/// One supervised example: a point prompt, its granularity, and the mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: usize,
    pub point: (u32, u32),
    pub g: f64,
    pub target: BinaryMask,
}

/// Nested-squares scenes: concentric squares, each level's mask is its
/// square with everything inside it, granularity from the level areas.
///
/// Features follow a part-whole similarity pattern. Channel 0 is a
/// component shared by every patch of every image. The remaining channels
/// hold a per-image direction per ring (the patches of a level not covered
/// by the level inside it): the innermost ring has direction `d`, and ring
/// `j` has cosine `1 - (1 - cos_min) (g_j - 0.1) / 0.9` to `d`, so
/// similarity to the innermost part falls off with granularity. The
/// background sits at `cos_background` to `d`.
#[derive(Debug, Clone)]
pub struct NestedCorpus {
    pub maps: Vec<PatchFeatureMap>,
    /// Per image, `(mask, granularity)` from innermost to outermost.
    pub levels: Vec<Vec<(BinaryMask, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub images: usize,
    pub grid: u32,
    pub feat_dim: u32,
    pub noise_sigma: f64,
    /// Weight of the shared channel in every clean feature.
    pub shared_weight: f64,
    /// Cosine between the outermost ring's direction and the innermost one.
    pub cos_min: f64,
    pub cos_background: f64,
    pub seed: u64,
}

/// Square sides (even, innermost first) for one scene.
fn square_sides(rng: &mut ChaCha8Rng, grid: u32) -> Vec<u32> {
    let levels = rng.random_range(2..=4usize);
    let outer_max = (grid - 4).max(8) & !1;
    let outer = rng.random_range(outer_max * 5 / 8..=outer_max) & !1;
    let inner = rng.random_range(2..=3u32) * 2;
    let mut sides = vec![inner];
    // intermediate sides spaced at least 4 apart
    let mut slots: Vec<u32> = ((inner + 4)..=(outer.saturating_sub(4))).step_by(2).collect();
    slots.shuffle(rng);
    let mut mids: Vec<u32> = Vec::new();
    for s in slots {
        if mids.len() + 2 == levels {
            break;
        }
        if mids.iter().all(|&m| m.abs_diff(s) >= 4) {
            mids.push(s);
        }
    }
    mids.sort_unstable();
    sides.extend(mids);
    sides.push(outer);
    sides
}

/// `cols` orthonormal vectors of length `dim` as columns.
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, cols: usize) -> nalgebra::DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = nalgebra::DMatrix::from_fn(dim, cols, |_, _| normal.sample(rng));
    m.qr().q()
}

pub fn nested_squares_corpus(spec: &CorpusSpec) -> Result<NestedCorpus, DecoderError> {
    if spec.images == 0 {
        return Err(DecoderError::EmptyDataset);
    }
    if spec.grid < 12 {
        return Err(DecoderError::Config(format!("grid {} too small for nested squares", spec.grid)));
    }
    // four rings, the innermost direction and the background
    if spec.feat_dim < 7 {
        return Err(DecoderError::Config(format!("feat_dim {} below 7", spec.feat_dim)));
    }
    let in_unit = |c: f64| (-1.0..=1.0).contains(&c);
    if !(0.0..1.0).contains(&spec.shared_weight) || !in_unit(spec.cos_min) || !in_unit(spec.cos_background) {
        return Err(DecoderError::Config("shared_weight must be in [0,1), cosines in [-1,1]".into()));
    }
    let (grid, dim) = (spec.grid, spec.feat_dim as usize);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DecoderError::Config(e.to_string()))?;
    let mut maps = Vec::with_capacity(spec.images);
    let mut levels = Vec::with_capacity(spec.images);
    for k in 0..spec.images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(k as u64));
        let sides = square_sides(&mut rng, grid);
        let outer = *sides.last().expect("at least two levels");
        let top = rng.random_range(0..=grid - outer);
        let left = rng.random_range(0..=grid - outer);
        let masks: Vec<BinaryMask> = sides
            .iter()
            .map(|&s| {
                let off = (outer - s) / 2;
                BinaryMask::rect(grid, grid, top + off, left + off, top + off + s, left + off + s)
                    .expect("nonzero grid")
            })
            .collect();
        let (a_min, a_max) = (masks[0].area(), masks[masks.len() - 1].area());
        let gs: Vec<f64> = masks.iter().map(|m| granularity(m.area(), a_min, a_max)).collect();

        let basis = random_orthonormal(&mut rng, dim - 1, sides.len() + 1);
        let shared = spec.shared_weight;
        let rest = (1.0 - shared * shared).sqrt();
        let direction = |cos: f64, j: usize| -> Vec<f64> {
            let sin = (1.0 - cos * cos).max(0.0).sqrt();
            let mut v = vec![shared];
            v.extend((0..dim - 1).map(|r| rest * (cos * basis[(r, 0)] + sin * basis[(r, j)])));
            v
        };
        let mut dirs: Vec<Vec<f64>> = gs
            .iter()
            .enumerate()
            .map(|(j, &g)| {
                if j == 0 {
                    direction(1.0, 0)
                } else {
                    direction(1.0 - (1.0 - spec.cos_min) * (g - 0.1) / 0.9, j)
                }
            })
            .collect();
        dirs.push(direction(spec.cos_background, sides.len()));

        let mut data = Vec::with_capacity((grid * grid) as usize * dim);
        for p in 0..(grid * grid) as usize {
            let owner = masks.iter().position(|m| m.get_index(p)).unwrap_or(sides.len());
            let f: Vec<f64> = dirs[owner].iter().map(|v| v + noise.sample(&mut rng)).collect();
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(f.iter().map(|v| (v / norm) as f32));
        }
        maps.push(PatchFeatureMap::new(grid, grid, spec.feat_dim, data)?);
        levels.push(masks.into_iter().zip(gs).collect());
    }
    Ok(NestedCorpus { maps, levels })
}

impl NestedCorpus {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// The evaluation prompts: for each level, the deepest point of its
    /// mask at the level's own granularity.
    pub fn eval_samples(&self) -> Vec<Sample> {
        let mut out = Vec::new();
        for (i, lv) in self.levels.iter().enumerate() {
            for (mask, g) in lv {
                let point = initial_click(mask).expect("levels are nonempty");
                out.push(Sample {
                    image: i,
                    point,
                    g: *g,
                    target: mask.clone(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub d_model: usize,
    pub d_fourier: usize,
    pub sigma_f: f64,
    pub sigma_pe: f64,
    pub grid: u32,
    pub feat_dim: u32,
    pub train_images: usize,
    pub heldout_images: usize,
    pub noise_sigma: f64,
    pub shared_weight: f64,
    pub cos_min: f64,
    pub cos_background: f64,
    /// Apply a fresh random rotation to feature channels `1..D` of every
    /// training sample. The shared channel 0 is left alone.
    pub rotate_features: bool,
    /// Anneal the learning rate to zero on a half cosine over all steps.
    pub cosine_decay: bool,
    /// Gradients are rescaled to at most this global norm.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch: 4,
            lr: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            d_model: 64,
            d_fourier: 128,
            sigma_f: SIGMA_F,
            sigma_pe: SIGMA_PE,
            grid: 32,
            feat_dim: 16,
            train_images: 200,
            heldout_images: 40,
            noise_sigma: 0.02,
            shared_weight: 0.5,
            cos_min: -0.6,
            cos_background: -0.95,
            rotate_features: true,
            cosine_decay: true,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            d_model: self.d_model,
            d_fourier: self.d_fourier,
            feat_dim: self.feat_dim as usize,
        }
    }

    pub fn train_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            images: self.train_images,
            grid: self.grid,
            feat_dim: self.feat_dim,
            noise_sigma: self.noise_sigma,
            shared_weight: self.shared_weight,
            cos_min: self.cos_min,
            cos_background: self.cos_background,
            seed: self.seed,
        }
    }

    /// Held-out scenes use seeds past the training range.
    pub fn heldout_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            images: self.heldout_images,
            seed: self.seed.wrapping_add(1_000_000),
            ..self.train_corpus_spec()
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        self.shape().validate()?;
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DecoderError::Config(
                "epochs, batch and lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_one_iou: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Loss and parameter gradient for one sample.
pub fn sample_gradient(
    params: &DecoderParams,
    image: &ImageInput,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), DecoderError> {
    let fp = forward(params, image, sample.point, sample.g)?;
    let lv = loss(&fp.logits, &sample.target, cfg)?;
    Ok((lv.total, backward(params, &fp, &lv.grad)))
}

/// Share of adjacent pairs in the 0.1..1.0 sweep where the predicted area
/// does not shrink as g grows. The point is the innermost square's deepest
/// pixel, so every level contains it.
pub fn area_monotonicity(params: &DecoderParams, images: &[ImageInput], corpus: &NestedCorpus) -> Result<f64, DecoderError> {
    let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let counts = images
        .par_iter()
        .zip(&corpus.levels)
        .map(|(img, lv)| {
            let point = initial_click(&lv[0].0).expect("levels are nonempty");
            let areas = grid
                .iter()
                .map(|&g| Ok(forward(params, img, point, g)?.logits.iter().filter(|&&z| z > 0.0).count()))
                .collect::<Result<Vec<usize>, DecoderError>>()?;
            Ok(areas.windows(2).filter(|w| w[1] >= w[0]).count())
        })
        .collect::<Result<Vec<usize>, DecoderError>>()?;
    let pairs = images.len() * (grid.len() - 1);
    Ok(counts.iter().sum::<usize>() as f64 / pairs.max(1) as f64)
}

/// Mean single-click IoU of `samples` under `params`.
pub fn evaluate_one_iou(
    params: &DecoderParams,
    images: &[ImageInput],
    samples: &[Sample],
) -> Result<f64, DecoderError> {
    let ious = samples
        .par_iter()
        .map(|s| {
            let img = &images[s.image];
            let fp = forward(params, img, s.point, s.g)?;
            let pred = logits_to_mask(&fp.logits, img.height, img.width);
            Ok(pred.iou(&s.target).expect("same grid"))
        })
        .collect::<Result<Vec<f64>, DecoderError>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}

pub struct TrainOutcome {
    pub params: DecoderParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Rotates channels `1..D` of every patch by `q`.
fn rotate_input(image: &ImageInput, q: &nalgebra::DMatrix<f64>) -> ImageInput {
    let d = image.feats.ncols();
    let mut feats = image.feats.clone();
    for (p, mut row) in feats.rows_mut().into_iter().enumerate() {
        for k in 1..d {
            row[k] = (1..d).map(|r| image.feats[[p, r]] * q[(r - 1, k - 1)]).sum();
        }
    }
    ImageInput {
        feats,
        pos: image.pos.clone(),
        ..*image
    }
}

/// Adam over fixed-order minibatches. Every epoch visits each training image
/// once with a random level and a random point in the innermost square.
/// Per-sample gradients run in parallel and are summed in sample order, so
/// results do not depend on the thread count.
pub fn train_toy(
    train: &NestedCorpus,
    heldout: &NestedCorpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, DecoderError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    let mut params = DecoderParams::init(cfg.shape(), cfg.sigma_f, cfg.sigma_pe, cfg.seed)?;
    let train_inputs: Vec<ImageInput> = train
        .maps
        .iter()
        .map(|m| ImageInput::new(m, &params))
        .collect::<Result<_, _>>()?;
    let held_inputs: Vec<ImageInput> = heldout
        .maps
        .iter()
        .map(|m| ImageInput::new(m, &params))
        .collect::<Result<_, _>>()?;
    let held_samples = heldout.eval_samples();
    let mut adam = Adam::new(params.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch);
    let dim = cfg.feat_dim as usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let samples: Vec<Sample> = order
            .iter()
            .map(|&i| {
                let lv = &train.levels[i];
                let (mask, g) = &lv[rng.random_range(0..lv.len())];
                let inner: Vec<(u32, u32)> = lv[0].0.pixels().collect();
                let (r, c) = inner[rng.random_range(0..inner.len())];
                Sample {
                    image: i,
                    point: (c, r),
                    g: *g,
                    target: mask.clone(),
                }
            })
            .collect();
        // rotations are drawn here, in sample order, to keep runs reproducible
        let rotations: Vec<Option<nalgebra::DMatrix<f64>>> = samples
            .iter()
            .map(|_| cfg.rotate_features.then(|| random_orthonormal(&mut rng, dim - 1, dim - 1)))
            .collect();
        let mut epoch_loss = 0.0;
        for (batch, rots) in samples.chunks(cfg.batch).zip(rotations.chunks(cfg.batch)) {
            let results = batch
                .par_iter()
                .zip(rots)
                .map(|(s, q)| match q {
                    Some(q) => sample_gradient(&params, &rotate_input(&train_inputs[s.image], q), s, &cfg.loss),
                    None => sample_gradient(&params, &train_inputs[s.image], s, &cfg.loss),
                })
                .collect::<Vec<_>>();
            let mut grad = vec![0.0; params.data.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (l, gr) = match r {
                    Ok(v) => v,
                    Err(DecoderError::NonFinite { .. }) => (f64::NAN, Vec::new()),
                    Err(e) => return Err(e),
                };
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(&gr) {
                    *a += b;
                }
            }
            let k = batch.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(DecoderError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / k,
                    last_good: Box::new(params),
                });
            }
            grad.iter_mut().for_each(|v| *v /= k);
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                grad.iter_mut().for_each(|v| *v *= cfg.clip_norm / norm);
            }
            let lr = if cfg.cosine_decay {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.lr
            };
            adam.step(&mut params.data, &grad, lr);
            epoch_loss += batch_loss;
            step += 1;
        }
        let val = if held_samples.is_empty() {
            f64::NAN
        } else {
            evaluate_one_iou(&params, &held_inputs, &held_samples)?
        };
        let m = EpochMetrics {
            epoch,
            loss: epoch_loss / samples.len() as f64,
            val_one_iou: val,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Checkpoint layout, little-endian: `"UGTD"`, version, d_model, d_fourier,
/// D (all u32), then f32 values: the `d_fourier/2` granularity frequencies,
/// the `2 x d_model/2` point-encoding matrix row-major, then the trainable
/// tensors in [`Layout`] order.
pub fn save_checkpoint(path: &Path, params: &DecoderParams) -> Result<(), DecoderError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        params.shape.d_model as u32,
        params.shape.d_fourier as u32,
        params.shape.feat_dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let values = params
        .g_basis
        .frequencies
        .iter()
        .chain(params.pe_basis.iter())
        .chain(params.data.iter());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DecoderParams, DecoderError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 20 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(DecoderError::Checkpoint("missing UGTD header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != CHECKPOINT_VERSION {
        return Err(DecoderError::Checkpoint(format!("unsupported version {}", word(0))));
    }
    let shape = DecoderShape {
        d_model: word(1) as usize,
        d_fourier: word(2) as usize,
        feat_dim: word(3) as usize,
    };
    shape.validate().map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
    let mut params = DecoderParams::zeros(shape, SIGMA_F, SIGMA_PE, 0)?;
    let n_freq = shape.d_fourier / 2;
    let n_pe = shape.d_model;
    let total = n_freq + n_pe + params.data.len();
    let body = &buf[20..];
    if body.len() != 4 * total {
        return Err(DecoderError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * total,
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(DecoderError::Checkpoint("non-finite parameter".into()));
    }
    params.g_basis.frequencies = vals[..n_freq].to_vec();
    params.pe_basis = Array2::from_shape_vec((2, shape.d_model / 2), vals[n_freq..n_freq + n_pe].to_vec())
        .expect("pe shape");
    params.data = vals[n_freq + n_pe..].to_vec();
    Ok(params)
}

/// Largest relative difference between `analytic` and central differences
/// of `f` at the chosen coordinates. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_error<F>(f: F, x: &[f64], analytic: &[f64], indices: &[usize], eps: f64) -> (f64, usize)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    indices
        .par_iter()
        .map(|&i| {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let up = f(&xp);
            xp[i] = x[i] - eps;
            let down = f(&xp);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            (err, i)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, usize::MAX), |best, e| if e.0 > best.0 { e } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Compare backprop with central differences on `count` random parameters.
pub fn grad_check(
    params: &DecoderParams,
    map: &PatchFeatureMap,
    sample: &Sample,
    cfg: &LossConfig,
    eps: f64,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport, DecoderError> {
    let image = ImageInput::new(map, params)?;
    let (_, analytic) = sample_gradient(params, &image, sample, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..params.data.len()).collect();
    all.shuffle(&mut rng);
    all.truncate(count.min(params.data.len()));
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.data.copy_from_slice(x);
        let fp = forward(&p, &image, sample.point, sample.g).expect("finite forward");
        loss(&fp.logits, &sample.target, cfg).expect("shapes match").total
    };
    let (max_rel_err, worst) = finite_difference_error(f, &params.data, &analytic, &all, eps);
    let worst_param = params
        .layout
        .entries()
        .find(|(_, off, len)| (*off..off + len).contains(&worst))
        .map(|(name, off, _)| format!("{name}[{}]", worst - off))
        .unwrap_or_default();
    Ok(GradCheckReport {
        eps,
        checked: all.len(),
        max_rel_err,
        worst_param,
    })
}

/// Serves decoder predictions through the [`Segmenter`] interface. Only the
/// first positive click is used; masks are upsampled to pixel resolution.
pub struct DecoderSegmenter {
    params: DecoderParams,
    images: std::collections::HashMap<String, ImageInput>,
    patch_size: u32,
}

impl DecoderSegmenter {
    pub fn new(
        params: DecoderParams,
        maps: impl IntoIterator<Item = (String, PatchFeatureMap)>,
        patch_size: u32,
    ) -> Result<Self, DecoderError> {
        let mut images = std::collections::HashMap::new();
        for (id, map) in maps {
            let input = ImageInput::new(&map, &params)?;
            images.insert(id, input);
        }
        Ok(Self {
            params,
            images,
            patch_size: patch_size.max(1),
        })
    }
}

impl Segmenter for DecoderSegmenter {
    fn predict(&self, image_id: &str, clicks: &[Click], g: f64) -> Result<BinaryMask, EvalError> {
        let image = self
            .images
            .get(image_id)
            .ok_or_else(|| EvalError::UnknownImage(image_id.to_string()))?;
        let fail = |message: String| EvalError::Segmenter {
            image_id: image_id.to_string(),
            message,
        };
        let click = clicks
            .iter()
            .find(|c| c.positive)
            .ok_or_else(|| fail("no positive click".into()))?;
        let point = (click.x / self.patch_size, click.y / self.patch_size);
        let fp = forward(&self.params, image, point, g).map_err(|e| fail(e.to_string()))?;
        Ok(logits_to_mask(&fp.logits, image.height, image.width).upsample(self.patch_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> DecoderShape {
        DecoderShape {
            d_model: 8,
            d_fourier: 6,
            feat_dim: 8,
        }
    }

    fn small_scene() -> (PatchFeatureMap, Sample) {
        let corpus = nested_squares_corpus(&CorpusSpec {
            images: 1,
            grid: 12,
            feat_dim: 8,
            noise_sigma: 0.05,
            shared_weight: 0.5,
            cos_min: -0.6,
            cos_background: -0.95,
            seed: 3,
        })
        .unwrap();
        let (mask, g) = corpus.levels[0][1].clone();
        let point = initial_click(&mask).unwrap();
        (
            corpus.maps[0].clone(),
            Sample {
                image: 0,
                point,
                g,
                target: mask,
            },
        )
    }

    #[test]
    fn fourier_examples() {
        let zero = FourierBasis {
            frequencies: vec![0.0; 3],
        };
        assert_eq!(fourier_encode(0.7, &zero), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let one = FourierBasis {
            frequencies: vec![1.0],
        };
        let phi = fourier_encode(0.25, &one);
        assert!((phi[0] - 1.0).abs() < 1e-15 && phi[1].abs() < 1e-15);
        let b = FourierBasis::sample(128, SIGMA_F, 5);
        let norm: f64 = fourier_encode(0.37, &b).iter().map(|v| v * v).sum();
        assert!((norm - 64.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn embedding_examples() {
        let shape = DecoderShape {
            d_model: 2,
            d_fourier: 2,
            feat_dim: 1,
        };
        let mut p = DecoderParams::zeros(shape, 1.0, 1.0, 0).unwrap();
        assert_eq!(embed_granularity(&[0.3, -0.2], &p).unwrap(), vec![0.0, 0.0]);
        // hand-computed: w1 = I, b1 = 0, w2 = [[1, 0], [0, 2]], w3 = I, b3 = [0.5, 0]
        p.layout.mat_mut(&mut p.data, "g.w1").assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        p.layout.mat_mut(&mut p.data, "g.w2").assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]));
        p.layout.mat_mut(&mut p.data, "g.w3").assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        p.layout.vec_mut(&mut p.data, "g.b3").assign(&ndarray::arr1(&[0.5, 0.0]));
        let out = embed_granularity(&[1.0, -1.0], &p).unwrap();
        // gelu(1) = 0.841345, gelu(-1) = -0.158655; second layer: gelu(0.841345), gelu(-0.317311)
        assert!((out[0] - 1.173_010_664).abs() < 1e-6, "{out:?}");
        assert!((out[1] - -0.119_151_366).abs() < 1e-6, "{out:?}");
        assert!(embed_granularity(&[1.0], &p).is_err());
    }

    #[test]
    fn zero_params_give_empty_mask() {
        let (map, s) = small_scene();
        let p = DecoderParams::zeros(small_shape(), SIGMA_F, SIGMA_PE, 1).unwrap();
        let logits = decode(&map, s.point, 0.5, &p).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert!(logits_to_mask(&logits, 12, 12).is_empty());
        assert!(matches!(
            decode(&map, (12, 0), 0.5, &p),
            Err(DecoderError::PointOutOfGrid { .. })
        ));
    }

    #[test]
    fn identical_patches_share_logits() {
        let (map, s) = small_scene();
        let p = DecoderParams::init(small_shape(), SIGMA_F, SIGMA_PE, 2).unwrap();
        let mut data = map.data().to_vec();
        let d = 8;
        let (a, b) = (0usize, 5usize);
        let copy: Vec<f32> = data[a * d..(a + 1) * d].to_vec();
        data[b * d..(b + 1) * d].copy_from_slice(&copy);
        let twin = PatchFeatureMap::new(12, 12, 8, data).unwrap();
        let logits = decode(&twin, s.point, 0.4, &p).unwrap();
        assert_eq!(logits[a], logits[b]);
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::default();
        let ones = BinaryMask::full(4, 4).unwrap();
        let lv = loss(&Array1::zeros(16), &ones, &cfg).unwrap();
        let per_pixel = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((lv.focal - per_pixel).abs() < 1e-15);
        assert!((lv.focal - 0.04333).abs() < 1e-5);
        // dice with p = 0.5: 1 - (2*8 + 1) / (8 + 16 + 1)
        assert!((lv.dice - (1.0 - 17.0 / 25.0)).abs() < 1e-15);
        assert!((lv.total - (20.0 * per_pixel + lv.dice)).abs() < 1e-12);

        let target = BinaryMask::rect(4, 4, 0, 0, 2, 4).unwrap();
        let sat = Array1::from_iter((0..16).map(|i| if target.get_index(i) { 60.0 } else { -60.0 }));
        let lv = loss(&sat, &target, &cfg).unwrap();
        assert!(lv.focal < 1e-20 && lv.dice < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let cfg = LossConfig::default();
        let target = BinaryMask::rect(5, 5, 1, 1, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let analytic = loss(&Array1::from(z.clone()), &target, &cfg).unwrap().grad.to_vec();
        let f = |x: &[f64]| loss(&Array1::from(x.to_vec()), &target, &cfg).unwrap().total;
        let idx: Vec<usize> = (0..25).collect();
        let (err, _) = finite_difference_error(f, &z, &analytic, &idx, 1e-5);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let coef: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |x: &[f64]| x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
        let x = vec![0.5; 50];
        let idx: Vec<usize> = (0..50).collect();
        let (err, _) = finite_difference_error(f, &x, &coef, &idx, 1e-4);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn small_model_gradients() {
        let (map, s) = small_scene();
        let p = DecoderParams::init(small_shape(), SIGMA_F, SIGMA_PE, 4).unwrap();
        let r = grad_check(&p, &map, &s, &LossConfig::default(), 1e-4, p.num_trainable(), 0).unwrap();
        assert_eq!(r.checked, p.num_trainable());
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DecoderParams::init(small_shape(), SIGMA_F, SIGMA_PE, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ugtd");
        save_checkpoint(&path, &p).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.shape, p.shape);
        for (a, b) in back.data.iter().zip(&p.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DecoderError::Checkpoint(_))));
    }

    #[test]
    fn corpus_levels_nest() {
        let c = nested_squares_corpus(&CorpusSpec {
            images: 20,
            grid: 32,
            feat_dim: 16,
            ..TrainConfig::default().train_corpus_spec()
        })
        .unwrap();
        for lv in &c.levels {
            assert!((2..=4).contains(&lv.len()));
            assert_eq!(lv[0].1, 0.1);
            assert_eq!(lv[lv.len() - 1].1, 1.0);
            for w in lv.windows(2) {
                assert!(w[0].0.is_subset_of(&w[1].0).unwrap());
                assert!(w[0].1 < w[1].1);
            }
        }
    }
}
