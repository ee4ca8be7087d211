//! Point encoder: a small MLP trunk with two unit-normalized projection
//! heads, hand-written backward pass, SGD with momentum and a cosine
//! learning-rate schedule, and a compact `f32` checkpoint format.
//!
//! Parameters live in one flat `Vec<f64>` with a fixed block layout
//! (`w1 | b1 | w2 | b2 | w_s | b_s | w_t | b_t`), which keeps the optimizer
//! and checkpoint code trivial and makes gradient checking uniform.
//!
//! Head `s` feeds the contrastive objective, head `t` the fused
//! consistency objective; both share the trunk.

use std::fs;
use std::io::{Read, Write as IoWrite};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate: the normalized feature and
/// its gradient are zero instead of exploding.
pub const NORM_EPSILON: f64 = 1e-12;

const INPUT_DIM: usize = 3;

fn offsets(hidden: usize, dim: usize) -> [usize; 9] {
    let sizes = [
        hidden * INPUT_DIM,
        hidden,
        hidden * hidden,
        hidden,
        dim * hidden,
        dim,
        dim * hidden,
        dim,
    ];
    let mut o = [0usize; 9];
    for (i, s) in sizes.iter().enumerate() {
        o[i + 1] = o[i] + s;
    }
    o
}

/// Encoder parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub hidden: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EncoderParams {
    pub fn num_params(hidden: usize, dim: usize) -> usize {
        offsets(hidden, dim)[8]
    }

    /// He-style initialization for the trunk, smaller fan-in scaling for the
    /// heads. Biases get a faint jitter rather than exact zeros so no unit
    /// starts pinned at the ReLU kink and no head row starts degenerate.
    pub fn init(seed: u64, hidden: usize, dim: usize) -> EncoderParams {
        assert!(hidden >= 1 && dim >= 1, "encoder needs hidden >= 1, dim >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = offsets(hidden, dim);
        let mut data = vec![0.0; o[8]];
        let scales = [
            (2.0 / INPUT_DIM as f64).sqrt(), // w1
            0.01,                            // b1
            (2.0 / hidden as f64).sqrt(),    // w2
            0.01,                            // b2
            (1.0 / hidden as f64).sqrt(),    // w_s
            0.01,                            // b_s
            (1.0 / hidden as f64).sqrt(),    // w_t
            0.01,                            // b_t
        ];
        for (b, scale) in scales.iter().enumerate() {
            for v in &mut data[o[b]..o[b + 1]] {
                *v = rng.sample::<f64, _>(StandardNormal) * scale;
            }
        }
        EncoderParams { hidden, dim, data }
    }

    /// Named half-open ranges of the parameter blocks in `data`.
    pub fn block_spans(&self) -> Vec<(&'static str, Range<usize>)> {
        let o = offsets(self.hidden, self.dim);
        ["w1", "b1", "w2", "b2", "w_s", "b_s", "w_t", "b_t"]
            .into_iter()
            .enumerate()
            .map(|(i, name)| (name, o[i]..o[i + 1]))
            .collect()
    }

    fn block2(&self, b: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
        let o = offsets(self.hidden, self.dim);
        ArrayView2::from_shape((r, c), &self.data[o[b]..o[b + 1]])
            .expect("block span matches shape")
    }

    fn block1(&self, b: usize, n: usize) -> ArrayView1<'_, f64> {
        let o = offsets(self.hidden, self.dim);
        ArrayView1::from_shape(n, &self.data[o[b]..o[b + 1]]).expect("block span matches shape")
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        self.block2(0, self.hidden, INPUT_DIM)
    }
    pub fn b1(&self) -> ArrayView1<'_, f64> {
        self.block1(1, self.hidden)
    }
    pub fn w2(&self) -> ArrayView2<'_, f64> {
        self.block2(2, self.hidden, self.hidden)
    }
    pub fn b2(&self) -> ArrayView1<'_, f64> {
        self.block1(3, self.hidden)
    }
    pub fn w_s(&self) -> ArrayView2<'_, f64> {
        self.block2(4, self.dim, self.hidden)
    }
    pub fn b_s(&self) -> ArrayView1<'_, f64> {
        self.block1(5, self.dim)
    }
    pub fn w_t(&self) -> ArrayView2<'_, f64> {
        self.block2(6, self.dim, self.hidden)
    }
    pub fn b_t(&self) -> ArrayView1<'_, f64> {
        self.block1(7, self.dim)
    }
}

/// Gradients in the same flat layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub hidden: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(hidden: usize, dim: usize) -> ParamGrads {
        ParamGrads {
            hidden,
            dim,
            data: vec![0.0; EncoderParams::num_params(hidden, dim)],
        }
    }

    fn write_block(&mut self, b: usize, values: &[f64]) {
        let o = offsets(self.hidden, self.dim);
        let span = &mut self.data[o[b]..o[b + 1]];
        debug_assert_eq!(span.len(), values.len());
        span.copy_from_slice(values);
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) points: Array2<f64>,
    pub(crate) h1: Array2<f64>,
    pub(crate) h2: Array2<f64>,
    pub(crate) raw_s: Array2<f64>,
    pub(crate) raw_t: Array2<f64>,
    pub(crate) inv_norm_s: Vec<f64>,
    pub(crate) inv_norm_t: Vec<f64>,
    pub(crate) degenerate_s: Vec<bool>,
    pub(crate) degenerate_t: Vec<bool>,
}

impl ForwardCache {
    /// Trunk output before the projection heads, one row per point.
    pub fn hidden_features(&self) -> &Array2<f64> {
        &self.h2
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate_s.iter().filter(|&&d| d).count()
            + self.degenerate_t.iter().filter(|&&d| d).count()
    }
}

/// Output of [`forward`]: unit-norm rows for both heads plus the cache.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feats_s: Array2<f64>,
    pub feats_t: Array2<f64>,
    pub cache: ForwardCache,
}

fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    for mut row in z.rows_mut() {
        row += b;
    }
    z
}

fn normalize_rows(raw: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Vec<bool>) {
    let n = raw.nrows();
    let mut feats = raw.clone();
    let mut inv_norms = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for mut row in feats.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < NORM_EPSILON {
            row.fill(0.0);
            inv_norms.push(0.0);
            degenerate.push(true);
        } else {
            let inv = 1.0 / norm;
            row *= inv;
            inv_norms.push(inv);
            degenerate.push(false);
        }
    }
    (feats, inv_norms, degenerate)
}

/// Encodes `points` (N x 3) into two sets of unit-norm features (N x dim).
pub fn forward(params: &EncoderParams, points: &ArrayView2<f64>) -> Forward {
    assert_eq!(points.ncols(), INPUT_DIM, "points must be N x 3");
    let mut h1 = affine(points, &params.w1(), &params.b1());
    h1.mapv_inplace(|v| v.max(0.0));
    let mut h2 = affine(&h1.view(), &params.w2(), &params.b2());
    h2.mapv_inplace(|v| v.max(0.0));
    let raw_s = affine(&h2.view(), &params.w_s(), &params.b_s());
    let raw_t = affine(&h2.view(), &params.w_t(), &params.b_t());
    let (feats_s, inv_norm_s, degenerate_s) = normalize_rows(&raw_s);
    let (feats_t, inv_norm_t, degenerate_t) = normalize_rows(&raw_t);
    Forward {
        feats_s,
        feats_t,
        cache: ForwardCache {
            points: points.to_owned(),
            h1,
            h2,
            raw_s,
            raw_t,
            inv_norm_s,
            inv_norm_t,
            degenerate_s,
            degenerate_t,
        },
    }
}

/// Backpropagates a normalized-feature gradient through the normalization:
/// `d_raw = (g - <g, p> p) / norm` with `p` the unit row, zero where the
/// row was degenerate.
fn denormalize_grad(
    grad: &ArrayView2<f64>,
    raw: &Array2<f64>,
    inv_norms: &[f64],
    degenerate: &[bool],
) -> Array2<f64> {
    let mut out = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        if degenerate[i] {
            continue;
        }
        let inv = inv_norms[i];
        let g = grad.row(i);
        let mut dot = 0.0;
        for (gk, rk) in g.iter().zip(raw.row(i).iter()) {
            dot += gk * (rk * inv);
        }
        let mut out_row = out.row_mut(i);
        for (k, (gk, rk)) in g.iter().zip(raw.row(i).iter()).enumerate() {
            out_row[k] = (gk - dot * (rk * inv)) * inv;
        }
    }
    out
}

fn relu_mask_inplace(dz: &mut Array2<f64>, post: &Array2<f64>) {
    ndarray::Zip::from(dz).and(post).for_each(|d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
}

fn trunk_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    dh2: Array2<f64>,
    grads: &mut ParamGrads,
) {
    let mut dz2 = dh2;
    relu_mask_inplace(&mut dz2, &cache.h2);
    grads.write_block(
        2,
        dz2.t().dot(&cache.h1).as_slice().expect("standard layout"),
    );
    grads.write_block(3, dz2.sum_axis(Axis(0)).as_slice().expect("contiguous"));
    let mut dz1 = dz2.dot(&params.w2());
    relu_mask_inplace(&mut dz1, &cache.h1);
    grads.write_block(
        0,
        dz1.t()
            .dot(&cache.points)
            .as_slice()
            .expect("standard layout"),
    );
    grads.write_block(1, dz1.sum_axis(Axis(0)).as_slice().expect("contiguous"));
}

/// Gradients of `sum(grad_s . feats_s) + sum(grad_t . feats_t)` w.r.t. all
/// parameters. Pass zero matrices to disable a head.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_s: &ArrayView2<f64>,
    grad_t: &ArrayView2<f64>,
) -> Result<ParamGrads> {
    let n = cache.points.nrows();
    for (name, g) in [("head s", grad_s), ("head t", grad_t)] {
        if g.nrows() != n || g.ncols() != params.dim {
            return Err(Error::validation(format!(
                "{name} gradient shape {:?} does not match {} x {}",
                g.dim(),
                n,
                params.dim
            )));
        }
    }
    let d_raw_s = denormalize_grad(grad_s, &cache.raw_s, &cache.inv_norm_s, &cache.degenerate_s);
    let d_raw_t = denormalize_grad(grad_t, &cache.raw_t, &cache.inv_norm_t, &cache.degenerate_t);
    let mut grads = ParamGrads::zeros(params.hidden, params.dim);
    grads.write_block(
        4,
        d_raw_s
            .t()
            .dot(&cache.h2)
            .as_slice()
            .expect("standard layout"),
    );
    grads.write_block(5, d_raw_s.sum_axis(Axis(0)).as_slice().expect("contiguous"));
    grads.write_block(
        6,
        d_raw_t
            .t()
            .dot(&cache.h2)
            .as_slice()
            .expect("standard layout"),
    );
    grads.write_block(7, d_raw_t.sum_axis(Axis(0)).as_slice().expect("contiguous"));
    let dh2 = d_raw_s.dot(&params.w_s()) + d_raw_t.dot(&params.w_t());
    trunk_backward(params, cache, dh2, &mut grads);
    Ok(grads)
}

/// Gradients of `sum(grad_hidden . h2)` w.r.t. the trunk parameters; both
/// heads' blocks stay zero. Used when training a separate classifier on the
/// trunk output.
pub fn backward_from_hidden(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_hidden: &ArrayView2<f64>,
) -> Result<ParamGrads> {
    if grad_hidden.dim() != cache.h2.dim() {
        return Err(Error::validation(format!(
            "hidden gradient shape {:?} does not match activations {:?}",
            grad_hidden.dim(),
            cache.h2.dim()
        )));
    }
    let mut grads = ParamGrads::zeros(params.hidden, params.dim);
    trunk_backward(params, cache, grad_hidden.to_owned(), &mut grads);
    Ok(grads)
}

/// SGD with momentum under a cosine learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr0: f64,
    pub momentum: f64,
    pub total_epochs: usize,
    velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(lr0: f64, momentum: f64, total_epochs: usize, num_params: usize) -> OptimState {
        OptimState {
            lr0,
            momentum,
            total_epochs,
            velocity: vec![0.0; num_params],
        }
    }

    /// Cosine decay from `lr0` at epoch 0 to exactly zero at
    /// `total_epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.lr0;
        }
        let t = epoch.min(self.total_epochs) as f64 / self.total_epochs as f64;
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// `v = momentum v + g; p -= lr(epoch) v`.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads, epoch: usize) {
        assert_eq!(grads.data.len(), params.data.len());
        self.step_flat(&mut params.data, &grads.data, epoch);
    }

    /// Same update on a bare parameter slice (e.g. an auxiliary classifier).
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], epoch: usize) {
        assert_eq!(self.velocity.len(), params.len());
        assert_eq!(grads.len(), params.len());
        let lr = self.lr_at(epoch);
        for ((v, p), g) in self
            .velocity
            .iter_mut()
            .zip(params.iter_mut())
            .zip(grads.iter())
        {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Provenance carried inside a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub hidden: usize,
    pub dim: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Writes `params` as one ASCII header line `H D seed epoch` followed by
/// little-endian `f32` values in block-layout order.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, seed: u64, epoch: usize) -> Result<()> {
    let mut bytes = format!(
        "{} {} {} {}\n",
        params.hidden, params.dim, seed, epoch
    )
    .into_bytes();
    for &v in &params.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::parse(path, "header is not utf-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::parse(path, "checkpoint header must be `H D seed epoch`"));
    }
    let hidden: usize = fields[0]
        .parse()
        .map_err(|_| Error::parse(path, "bad hidden size"))?;
    let dim: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(path, "bad feature dim"))?;
    let seed: u64 = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, "bad seed"))?;
    let epoch: usize = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, "bad epoch"))?;
    let body = &bytes[newline + 1..];
    let expected = EncoderParams::num_params(hidden, dim);
    if body.len() != expected * 4 {
        return Err(Error::parse(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                expected * 4,
                body.len()
            ),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(path, "non-finite parameter value"));
    }
    Ok((
        EncoderParams { hidden, dim, data },
        CheckpointMeta {
            hidden,
            dim,
            seed,
            epoch,
        },
    ))
}
