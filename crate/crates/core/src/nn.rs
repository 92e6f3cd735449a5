//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Activations use a channel-major `[C][N][H][W]` layout so that a
//! convolution is one GEMM between the weight matrix and an im2col buffer.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::Float;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar: Float + Default + Debug + Send + Sync + std::ops::AddAssign + 'static {
    /// `C = alpha * A B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Row-major `C (m x n) = alpha * op(A) op(B) + beta * C`.
///
/// `A` is stored `m x k` (or `k x m` when `ta`), `B` is `k x n` (or `n x k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(ta: bool, tb: bool, m: usize, n: usize, k: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts.
    unsafe { T::raw_gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1) }
}

/// Activation tensor in `[C][N][H][W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * n * h * w {
            return Err(Error::Shape(format!("tensor data has {} values, expected {}", data.len(), c * n * h * w)));
        }
        Ok(Self { c, n, h, w, data })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Values of channel `c` across the batch.
    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.n * self.plane();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn image(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let off = (c * self.n + n) * p;
        &self.data[off..off + p]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation.
    pub fn concat(parts: &[Tensor<T>]) -> Self {
        let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
        assert!(parts.iter().all(|p| p.n == n && p.h == h && p.w == w));
        let c = parts.iter().map(|p| p.c).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self { c, n, h, w, data }
    }

    /// Splits along channels into chunks of `c_each`.
    pub fn split(&self, c_each: usize) -> Vec<Tensor<T>> {
        let len = c_each * self.n * self.plane();
        self.data
            .chunks(len)
            .map(|d| Tensor { c: c_each, n: self.n, h: self.h, w: self.w, data: d.to_vec() })
            .collect()
    }
}

/// 90-degree counter-clockwise rotation of every image, applied `k` times.
pub fn rot90<T: Scalar>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut cur = t.clone();
    for _ in 0..k % 4 {
        let (h, w) = (cur.h, cur.w);
        let mut out = Tensor::zeros(cur.c, cur.n, w, h);
        for (src, dst) in cur.data.chunks(h * w).zip(out.data.chunks_mut(h * w)) {
            for i in 0..w {
                for j in 0..h {
                    dst[i * h + j] = src[j * w + (w - 1 - i)];
                }
            }
        }
        cur = out;
    }
    cur
}

/// Moves every image down by one row, filling the top row with zeros.
pub fn shift_down<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(t.c, t.n, t.h, t.w);
    let (h, w) = (t.h, t.w);
    for (src, dst) in t.data.chunks(h * w).zip(out.data.chunks_mut(h * w)) {
        dst[w..].copy_from_slice(&src[..(h - 1) * w]);
    }
    out
}

/// Adjoint of [`shift_down`].
pub fn shift_up<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(t.c, t.n, t.h, t.w);
    let (h, w) = (t.h, t.w);
    for (src, dst) in t.data.chunks(h * w).zip(out.data.chunks_mut(h * w)) {
        dst[..(h - 1) * w].copy_from_slice(&src[w..]);
    }
    out
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor { data: t.data.iter().map(|&v| v.max(T::zero())).collect(), ..*t }
}

pub fn leaky_relu<T: Scalar>(t: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    Tensor { data: t.data.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect(), ..*t }
}

/// Gradient through an activation given its output (sign-preserving).
pub fn activation_backward<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>, slope: f64) {
    let s = T::of(slope);
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = *g * s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    /// Zero padding `[top, bottom, left, right]`.
    pub pad: [usize; 4],
}

impl ConvShape {
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, kh: k, kw: k, pad: [k / 2; 4] }
    }

    /// Sees only rows at or above the output row.
    pub fn causal(cin: usize, cout: usize) -> Self {
        Self { cin, cout, kh: 3, kw: 3, pad: [2, 0, 1, 1] }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + self.pad[0] + self.pad[1] + 1 - self.kh, w + self.pad[2] + self.pad[3] + 1 - self.kw)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == [0; 4]
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, s: &ConvShape, ho: usize, wo: usize) -> Vec<T> {
    let m = x.n * ho * wo;
    let mut col = vec![T::zero(); s.fan_in() * m];
    let (h, w) = (x.h as isize, x.w as isize);
    let (pt, pl) = (s.pad[0] as isize, s.pad[2] as isize);
    for c in 0..s.cin {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let dst_row = &mut col[row * m..(row + 1) * m];
                let dx = kx as isize - pl;
                let lo = (-dx).clamp(0, wo as isize) as usize;
                let hi = (w - dx).clamp(0, wo as isize) as usize;
                for n in 0..x.n {
                    let src = x.image(c, n);
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pt;
                        if iy < 0 || iy >= h || lo >= hi {
                            continue;
                        }
                        let d = &mut dst_row[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        let s0 = (iy * w + lo as isize + dx) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], s: &ConvShape, n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
    let m = n * ho * wo;
    let mut x = Tensor::zeros(s.cin, n, h, w);
    let (hi_, wi_) = (h as isize, w as isize);
    let (pt, pl) = (s.pad[0] as isize, s.pad[2] as isize);
    let plane = h * w;
    for c in 0..s.cin {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let src_row = &col[row * m..(row + 1) * m];
                let dx = kx as isize - pl;
                let lo = (-dx).clamp(0, wo as isize) as usize;
                let hi = (wi_ - dx).clamp(0, wo as isize) as usize;
                for b in 0..n {
                    let base = (c * n + b) * plane;
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pt;
                        if iy < 0 || iy >= hi_ || lo >= hi {
                            continue;
                        }
                        let sr = &src_row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let d0 = base + (iy * wi_ + lo as isize + dx) as usize;
                        for (d, &v) in x.data[d0..d0 + (hi - lo)].iter_mut().zip(&sr[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward pass; `weights` is `[cout][cin][kh][kw]`.
pub fn conv_forward<T: Scalar>(s: &ConvShape, weights: &[T], bias: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.c != s.cin {
        return Err(Error::Shape(format!("convolution expects {} channels, got {}", s.cin, x.c)));
    }
    if x.h + s.pad[0] + s.pad[1] < s.kh || x.w + s.pad[2] + s.pad[3] < s.kw {
        return Err(Error::Shape(format!("{}x{} input is smaller than the kernel", x.h, x.w)));
    }
    let (ho, wo) = s.out_hw(x.h, x.w);
    let m = x.n * ho * wo;
    let mut y = Tensor::zeros(s.cout, x.n, ho, wo);
    if s.is_pointwise() {
        gemm(false, false, s.cout, m, s.cin, T::one(), weights, &x.data, T::zero(), &mut y.data);
    } else {
        let col = im2col(x, s, ho, wo);
        gemm(false, false, s.cout, m, s.fan_in(), T::one(), weights, &col, T::zero(), &mut y.data);
    }
    for (row, &b) in y.data.chunks_mut(m).zip(bias) {
        for v in row {
            *v += b;
        }
    }
    Ok(y)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
pub fn conv_backward<T: Scalar>(
    s: &ConvShape,
    weights: &[T],
    x: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (ho, wo) = (dy.h, dy.w);
    let m = x.n * ho * wo;
    let k = s.fan_in();
    for (row, g) in dy.data.chunks(m).zip(db.iter_mut()) {
        let mut acc = T::zero();
        for &v in row {
            acc += v;
        }
        *g += acc;
    }
    if s.is_pointwise() {
        gemm(false, true, s.cout, k, m, T::one(), &dy.data, &x.data, T::one(), dw);
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(s.cin, x.n, x.h, x.w);
        gemm(true, false, k, m, s.cout, T::one(), weights, &dy.data, T::zero(), &mut dx.data);
        return Some(dx);
    }
    let col = im2col(x, s, ho, wo);
    gemm(false, true, s.cout, k, m, T::one(), &dy.data, &col, T::one(), dw);
    if !need_dx {
        return None;
    }
    let mut dcol = col;
    gemm(true, false, k, m, s.cout, T::one(), weights, &dy.data, T::zero(), &mut dcol);
    Some(col2im(&dcol, s, x.n, x.h, x.w, ho, wo))
}

/// Named parameter arrays packed into one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry { name: name.into(), shape, offset, len });
        self.total += len;
        offset
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Offsets of one convolution's weights and bias within a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub shape: ConvShape,
    pub w: usize,
    pub b: usize,
}

impl ConvParams {
    pub fn register(layout: &mut ParamLayout, name: &str, shape: ConvShape) -> Self {
        let w = layout.push(format!("{name}.weight"), vec![shape.cout, shape.cin, shape.kh, shape.kw]);
        let b = layout.push(format!("{name}.bias"), vec![shape.cout]);
        Self { shape, w, b }
    }

    pub fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.w + self.shape.weight_len()]
    }

    pub fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.b..self.b + self.shape.cout]
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_forward(&self.shape, self.weights(p), self.bias(p), x)
    }

    pub fn backward<T: Scalar>(&self, p: &[T], grads: &mut [T], x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (head, tail) = grads.split_at_mut(self.b);
        let dw = &mut head[self.w..self.w + self.shape.weight_len()];
        let db = &mut tail[..self.shape.cout];
        conv_backward(&self.shape, self.weights(p), x, dy, dw, db, need_dx)
    }

    /// Uniform `+-1/sqrt(fan_in)` initialisation of weights and bias.
    pub fn init<T: Scalar>(&self, p: &mut [T], rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.shape.fan_in() as f64).sqrt();
        for v in &mut p[self.w..self.w + self.shape.weight_len()] {
            *v = T::of(rng.random_range(-bound..bound));
        }
        for v in &mut p[self.b..self.b + self.shape.cout] {
            *v = T::of(rng.random_range(-bound..bound));
        }
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `header` (JSON) followed by the raw little-endian parameters.
pub fn write_checkpoint<W: Write>(mut w: W, header: &serde_json::Value, params: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<f32>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json).map_err(|_| Error::Format("checkpoint header truncated".into()))?;
    let header = serde_json::from_slice(&json)?;
    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let n = u64::from_le_bytes(count) as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(Error::Format(format!("checkpoint holds {} parameter bytes, expected {}", raw.len(), n * 4)));
    }
    let params = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, params))
}
