//! A three-layer, resolution-preserving convolutional segmenter with
//! hand-written reverse-mode gradients.
//!
//! ```text
//! input (Cin) -> conv3x3 (F) -> ReLU -> conv3x3 (F) -> ReLU -> conv1x1 (C) -> logits
//! ```
//!
//! All convolutions use zero "same" padding, so logits have the input's
//! spatial size. Activations are kept channel-major (`[c][y][x]`); logits are
//! returned interleaved per pixel as a [`LogitMap`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imagery::FloatImage;
use crate::loss::LogitMap;
use crate::rng::Rng;

pub const MODEL_MAGIC: &[u8; 5] = b"MSGN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_channels: usize,
    pub features: usize,
    pub classes: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels >= 1 && self.features >= 1 && self.classes >= 2,
            "invalid model dims {self:?}"
        );
        Ok(())
    }
}

/// Every learnable array of the model. Also used for gradients and momentum
/// buffers, which share the shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// `[F][Cin][3][3]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[F][F][3][3]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[C][F]`
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 6] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b"];

impl Params {
    pub fn zeros(d: &ModelDims) -> Self {
        Params {
            conv1_w: vec![0.0; d.features * d.in_channels * 9],
            conv1_b: vec![0.0; d.features],
            conv2_w: vec![0.0; d.features * d.features * 9],
            conv2_b: vec![0.0; d.features],
            head_w: vec![0.0; d.classes * d.features],
            head_b: vec![0.0; d.classes],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        [
            (BLOCK_NAMES[0], &self.conv1_w),
            (BLOCK_NAMES[1], &self.conv1_b),
            (BLOCK_NAMES[2], &self.conv2_w),
            (BLOCK_NAMES[3], &self.conv2_b),
            (BLOCK_NAMES[4], &self.head_w),
            (BLOCK_NAMES[5], &self.head_b),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 6] {
        [
            (BLOCK_NAMES[0], &mut self.conv1_w),
            (BLOCK_NAMES[1], &mut self.conv1_b),
            (BLOCK_NAMES[2], &mut self.conv2_w),
            (BLOCK_NAMES[3], &mut self.conv2_b),
            (BLOCK_NAMES[4], &mut self.head_w),
            (BLOCK_NAMES[5], &mut self.head_b),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access by global index, blocks in [`BLOCK_NAMES`] order.
    pub fn get(&self, mut index: usize) -> f64 {
        for (_, b) in self.blocks() {
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for (_, b) in self.blocks_mut() {
            if index < b.len() {
                b[index] = value;
                return;
            }
            index -= b.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in self.blocks_mut() {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroSegNet {
    dims: ModelDims,
    pub params: Params,
}

/// Intermediate activations of one forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    width: usize,
    height: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    act2: Vec<f64>,
}

impl MicroSegNet {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(MicroSegNet {
            dims,
            params: Params::zeros(&dims),
        })
    }

    /// He-normal convolution weights, zero biases.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n1 = he(dims.in_channels * 9);
        let n2 = he(dims.features * 9);
        let nh = Normal::new(0.0, (1.0 / dims.features as f64).sqrt()).expect("positive std");
        model.params.conv1_w.iter_mut().for_each(|w| *w = n1.sample(rng));
        model.params.conv2_w.iter_mut().for_each(|w| *w = n2.sample(rng));
        model.params.head_w.iter_mut().for_each(|w| *w = nh.sample(rng));
        Ok(model)
    }

    pub fn from_params(dims: ModelDims, params: Params) -> Result<Self> {
        dims.validate()?;
        let expect = Params::zeros(&dims);
        for ((name, a), (_, b)) in params.blocks().iter().zip(expect.blocks()) {
            ensure!(
                a.len() == b.len(),
                "parameter block {name} has {} values, expected {}",
                a.len(),
                b.len()
            );
        }
        Ok(MicroSegNet { dims, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn forward(&self, img: &FloatImage) -> Result<(LogitMap, ForwardCache)> {
        ensure!(
            img.channels() == self.dims.in_channels,
            "model expects {} input channels, image has {}",
            self.dims.in_channels,
            img.channels()
        );
        let (w, h) = (img.width(), img.height());
        let (f, c) = (self.dims.features, self.dims.classes);
        let n = w * h;
        let p = &self.params;

        let input = img.to_planar();
        let mut act1 = vec![0.0; f * n];
        conv3x3(&input, self.dims.in_channels, w, h, &p.conv1_w, &p.conv1_b, &mut act1);
        relu(&mut act1);
        let mut act2 = vec![0.0; f * n];
        conv3x3(&act1, f, w, h, &p.conv2_w, &p.conv2_b, &mut act2);
        relu(&mut act2);

        let mut scores = vec![0.0; n * c];
        let mut plane = vec![0.0; n];
        for k in 0..c {
            plane.fill(p.head_b[k]);
            for j in 0..f {
                let wv = p.head_w[k * f + j];
                axpy(wv, &act2[j * n..(j + 1) * n], &mut plane);
            }
            for (i, v) in plane.iter().enumerate() {
                scores[i * c + k] = *v;
            }
        }
        let logits = LogitMap::new(w, h, c, scores)?;
        Ok((
            logits,
            ForwardCache {
                width: w,
                height: h,
                input,
                act1,
                act2,
            },
        ))
    }

    pub fn predict(&self, img: &FloatImage) -> Result<LogitMap> {
        self.forward(img).map(|(logits, _)| logits)
    }

    /// Parameter gradients given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &LogitMap) -> Result<Params> {
        let (w, h) = (cache.width, cache.height);
        let (cin, f, c) = (self.dims.in_channels, self.dims.features, self.dims.classes);
        ensure!(
            grad_logits.width() == w && grad_logits.height() == h && grad_logits.num_classes() == c,
            "logit gradient shape does not match the forward pass"
        );
        let n = w * h;
        let p = &self.params;
        let mut g = Params::zeros(&self.dims);

        // Head: planar copy of the logit gradient first.
        let gl = grad_logits.scores();
        let mut dlogit = vec![0.0; c * n];
        for i in 0..n {
            for k in 0..c {
                dlogit[k * n + i] = gl[i * c + k];
            }
        }
        let mut dact2 = vec![0.0; f * n];
        for k in 0..c {
            let dk = &dlogit[k * n..(k + 1) * n];
            g.head_b[k] = dk.iter().sum();
            for j in 0..f {
                g.head_w[k * f + j] = dot(dk, &cache.act2[j * n..(j + 1) * n]);
                axpy(p.head_w[k * f + j], dk, &mut dact2[j * n..(j + 1) * n]);
            }
        }
        relu_backward(&cache.act2, &mut dact2);

        let mut dact1 = vec![0.0; f * n];
        conv3x3_backward(
            &cache.act1,
            f,
            w,
            h,
            &p.conv2_w,
            &dact2,
            &mut g.conv2_w,
            &mut g.conv2_b,
            Some(&mut dact1),
        );
        relu_backward(&cache.act1, &mut dact1);
        conv3x3_backward(
            &cache.input,
            cin,
            w,
            h,
            &p.conv1_w,
            &dact1,
            &mut g.conv1_w,
            &mut g.conv1_b,
            None,
        );
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.params.len() * 8 + 64);
        buf.extend_from_slice(MODEL_MAGIC);
        for v in [self.dims.in_channels, self.dims.features, self.dims.classes] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (_, block) in self.params.blocks() {
            buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err("truncated model file".into());
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(5)? != MODEL_MAGIC {
            return Err("bad magic, expected MSGN1".into());
        }
        let mut dim = || -> std::result::Result<usize, String> {
            Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize)
        };
        let dims = ModelDims {
            in_channels: dim()?,
            features: dim()?,
            classes: dim()?,
        };
        dims.validate().map_err(|e| e.to_string())?;
        let mut params = Params::zeros(&dims);
        for (name, block) in params.blocks_mut() {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if len != block.len() {
                return Err(format!("block {name} has {len} values, expected {}", block.len()));
            }
            for v in block.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if !cur.is_empty() {
            return Err("trailing bytes after parameters".into());
        }
        Ok(MicroSegNet { dims, params })
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable; order is fixed.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero the gradient wherever the ReLU output was zero.
fn relu_backward(act: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `c = alpha * a * b + beta * c` for row-major operands given by
/// (rows, cols) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe in-bounds m*k, k*n and m*n matrices (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix of a same-padded 3x3 window: row `(i*3+ky)*3+kx`, column
/// `y*w+x` holds `in[i][y+ky-1][x+kx-1]`, or 0 outside the image.
fn im2col(input: &[f64], cin: usize, w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let mut col = vec![0.0; cin * 9 * n];
    for i in 0..cin {
        let src = &input[i * n..(i + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((i * 3 + ky) * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im(col: &[f64], cin: usize, w: usize, h: usize, out: &mut [f64]) {
    let n = w * h;
    for i in 0..cin {
        let dst = &mut out[i * n..(i + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((i * 3 + ky) * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    match kx {
                        0 => axpy(1.0, &srow[1..], &mut drow[..w - 1]),
                        1 => axpy(1.0, srow, drow),
                        _ => axpy(1.0, &srow[..w - 1], &mut drow[1..]),
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 cross-correlation:
/// `out[o][y][x] = b[o] + sum_{i,ky,kx} w[o][i][ky][kx] * in[i][y+ky-1][x+kx-1]`.
fn conv3x3(input: &[f64], cin: usize, w: usize, h: usize, weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = w * h;
    let k = cin * 9;
    for (o, plane) in out.chunks_mut(n).enumerate() {
        plane.fill(bias[o]);
    }
    let col = im2col(input, cin, w, h);
    gemm(bias.len(), k, n, weights, (k as isize, 1), &col, (n as isize, 1), 1.0, out);
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    w: usize,
    h: usize,
    weights: &[f64],
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let n = w * h;
    let k = cin * 9;
    let f = dbias.len();
    for (o, dplane) in dout.chunks(n).enumerate() {
        dbias[o] = dplane.iter().sum();
    }
    let col = im2col(input, cin, w, h);
    // dW = dout * col^T
    gemm(f, n, k, dout, (n as isize, 1), &col, (1, n as isize), 0.0, dweights);
    if let Some(din) = dinput {
        // dcol = W^T * dout
        let mut dcol = vec![0.0; k * n];
        gemm(k, f, n, weights, (1, k as isize), dout, (n as isize, 1), 0.0, &mut dcol);
        col2im(&dcol, cin, w, h, din);
    }
}
