//! Forward and backward implementations of every tensor operation.
//!
//! Broadcasting is restricted to the one rule the networks need: a rank-1
//! tensor of length C may be added to a (C, H, W) tensor, expanded over H
//! and W. Scalar scaling is its own explicit op rather than an implicit
//! broadcast of `mul`.

use super::{BackFn, Tensor};
use crate::error::{Error, Result};

/// Padding behaviour of [`Tensor::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// Zero padding on both axes.
    Zero,
    /// Circular padding on the width (angular) axis, zero on the height
    /// axis. Makes stride-1 convolutions commute with circular shifts of
    /// the columns, which is what polar images need.
    CircularWidth,
}

/// Pointwise op kinds; `Neg` through `Square` are unary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Square,
}

/// Uniform dispatcher over the pointwise ops, mostly useful for running
/// the same check against every kind.
pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseKind::*;
    match (kind, b) {
        (Add, Some(b)) => a.add(b),
        (Sub, Some(b)) => a.sub(b),
        (Mul, Some(b)) => a.mul(b),
        (Neg, None) => Ok(a.neg()),
        (Exp, None) => Ok(a.exp()),
        (Log, None) => a.log(),
        (Relu, None) => Ok(a.relu()),
        (Sigmoid, None) => Ok(a.sigmoid()),
        (Square, None) => Ok(a.square()),
        (k, b) => Err(Error::Config(format!(
            "elementwise: kind {:?} with {} operand(s)",
            k,
            1 + b.map_or(0, |_| 1)
        ))),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // (input, output) -> d output / d input
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let (shape, x) = {
            let inner = self.0.read().unwrap();
            (inner.shape.clone(), inner.values.clone())
        };
        let y: Vec<f64> = x.iter().map(|v| f(*v)).collect();
        if !self.requires_grad() {
            return Tensor::make(shape, y, false);
        }
        let y_cap = y.clone();
        let back: BackFn = Box::new(move |up| {
            let g = up
                .iter()
                .zip(x.iter().zip(&y_cap))
                .map(|(u, (xi, yi))| u * df(*xi, *yi))
                .collect();
            vec![g]
        });
        Tensor::from_op(shape, y, vec![self.clone()], back)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log. Negative inputs are an error; `log(0)` yields `-inf`.
    pub fn log(&self) -> Result<Tensor> {
        let bad = self.with_values(|v| {
            v.iter()
                .enumerate()
                .find(|(_, x)| **x < 0.0)
                .map(|(i, x)| (i, *x))
        });
        if let Some((index, value)) = bad {
            return Err(Error::LogOfNegative { index, value });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `ln(1 + e^x)`, stable at both tails.
    pub fn softplus(&self) -> Tensor {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn sin(&self) -> Tensor {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    /// Adds a plain constant; no graph edge for the constant.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    /// Multiplies by a plain constant.
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x * c, move |_, _| c)
    }

    fn binary_same_shape(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (a, b, upstream) -> (da, db)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let (shape, a) = {
            let inner = self.0.read().unwrap();
            (inner.shape.clone(), inner.values.clone())
        };
        let (shape_b, b) = {
            let inner = other.0.read().unwrap();
            (inner.shape.clone(), inner.values.clone())
        };
        if shape != shape_b {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape,
                rhs: shape_b,
            });
        }
        let y: Vec<f64> = a.iter().zip(&b).map(|(x, z)| f(*x, *z)).collect();

        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        if !need_a && !need_b {
            return Ok(Tensor::make(shape, y, false));
        }
        let mut parents = Vec::new();
        if need_a {
            parents.push(self.clone());
        }
        if need_b {
            parents.push(other.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let mut ga = if need_a { vec![0.0; up.len()] } else { Vec::new() };
            let mut gb = if need_b { vec![0.0; up.len()] } else { Vec::new() };
            for i in 0..up.len() {
                let (da, db) = df(a[i], b[i], up[i]);
                if need_a {
                    ga[i] = da;
                }
                if need_b {
                    gb[i] = db;
                }
            }
            let mut out = Vec::new();
            if need_a {
                out.push(ga);
            }
            if need_b {
                out.push(gb);
            }
            out
        });
        Ok(Tensor::from_op(shape, y, parents, back))
    }

    /// Pointwise addition. The one permitted broadcast: a rank-1 tensor of
    /// length C added to a (C, H, W) tensor, expanded over H and W.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() == 3 && sb.len() == 1 && sb[0] == sa[0] && sa != sb {
            return self.add_channel_bias(other);
        }
        self.binary_same_shape(other, "add", |a, b| a + b, |_, _, u| (u, u))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub", |a, b| a - b, |_, _, u| (u, -u))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul", |a, b| a * b, |a, b, u| (u * b, u * a))
    }

    fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let x = self.values();
        let b = bias.values();
        let mut y = x.clone();
        for ch in 0..c {
            for v in &mut y[ch * plane..(ch + 1) * plane] {
                *v += b[ch];
            }
        }
        let need_x = self.requires_grad();
        let need_b = bias.requires_grad();
        if !need_x && !need_b {
            return Ok(Tensor::make(shape, y, false));
        }
        let mut parents = Vec::new();
        if need_x {
            parents.push(self.clone());
        }
        if need_b {
            parents.push(bias.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let mut out = Vec::new();
            if need_x {
                out.push(up.to_vec());
            }
            if need_b {
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = up[ch * plane..(ch + 1) * plane].iter().sum();
                }
                out.push(gb);
            }
            out
        });
        Ok(Tensor::from_op(shape, y, parents, back))
    }

    /// Multiplies every element by a scalar (1-element) tensor. Explicit
    /// so that `mul` can stay strict about shapes.
    pub fn scale(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let shape = self.shape();
        let x = self.values();
        let sv = s.item();
        let y: Vec<f64> = x.iter().map(|v| v * sv).collect();
        let need_x = self.requires_grad();
        let need_s = s.requires_grad();
        if !need_x && !need_s {
            return Ok(Tensor::make(shape, y, false));
        }
        let mut parents = Vec::new();
        if need_x {
            parents.push(self.clone());
        }
        if need_s {
            parents.push(s.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let mut out = Vec::new();
            if need_x {
                out.push(up.iter().map(|u| u * sv).collect());
            }
            if need_s {
                out.push(vec![up.iter().zip(&x).map(|(u, xv)| u * xv).sum()]);
            }
            out
        });
        Ok(Tensor::from_op(shape, y, parents, back))
    }

    /// Standard matrix product of rank-2 tensors (m, k) x (k, n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 {
            return Err(Error::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: sa,
            });
        }
        if sb.len() != 2 {
            return Err(Error::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::MatmulDimMismatch { m, k, k2, n });
        }
        let a = self.values();
        let b = other.values();
        let y = matmul_raw(&a, &b, m, k, n);

        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        if !need_a && !need_b {
            return Ok(Tensor::make(vec![m, n], y, false));
        }
        let mut parents = Vec::new();
        if need_a {
            parents.push(self.clone());
        }
        if need_b {
            parents.push(other.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let mut out = Vec::new();
            if need_a {
                // dA = up . B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let u = up[i * n + j];
                        let brow = &b[..];
                        for p in 0..k {
                            ga[i * k + p] += u * brow[p * n + j];
                        }
                    }
                }
                out.push(ga);
            }
            if need_b {
                // dB = A^T . up
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        let urow = &up[i * n..(i + 1) * n];
                        let grow = &mut gb[p * n..(p + 1) * n];
                        for (g, u) in grow.iter_mut().zip(urow) {
                            *g += av * u;
                        }
                    }
                }
                out.push(gb);
            }
            out
        });
        Ok(Tensor::from_op(vec![m, n], y, parents, back))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let x = self.values();
        let total: f64 = x.iter().sum();
        if !self.requires_grad() {
            return Tensor::scalar(total);
        }
        let n = x.len();
        let back: BackFn = Box::new(move |up| vec![vec![up[0]; n]]);
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], back)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.len();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Same storage, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let y = self.values();
        if !self.requires_grad() {
            return Ok(Tensor::make(shape.to_vec(), y, false));
        }
        let back: BackFn = Box::new(move |up| vec![up.to_vec()]);
        Ok(Tensor::from_op(
            shape.to_vec(),
            y,
            vec![self.clone()],
            back,
        ))
    }

    pub fn flatten(&self) -> Tensor {
        self.reshape(&[self.len()]).expect("flatten cannot fail")
    }

    /// Two-argument arctangent of scalar tensors: `atan2(y, x)`.
    ///
    /// At the origin the forward value is 0 (IEEE convention) and the
    /// gradient is defined as 0 so that pooled features of an exactly
    /// symmetric image do not poison the graph.
    pub fn atan2(y: &Tensor, x: &Tensor) -> Result<Tensor> {
        if y.len() != 1 || x.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "atan2",
                lhs: y.shape(),
                rhs: x.shape(),
            });
        }
        let yv = y.item();
        let xv = x.item();
        let angle = yv.atan2(xv);
        let need_y = y.requires_grad();
        let need_x = x.requires_grad();
        if !need_y && !need_x {
            return Ok(Tensor::scalar(angle));
        }
        let mut parents = Vec::new();
        if need_y {
            parents.push(y.clone());
        }
        if need_x {
            parents.push(x.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let r2 = yv * yv + xv * xv;
            let (dy, dx) = if r2 < 1e-300 {
                (0.0, 0.0)
            } else {
                (xv / r2, -yv / r2)
            };
            let mut out = Vec::new();
            if need_y {
                out.push(vec![up[0] * dy]);
            }
            if need_x {
                out.push(vec![up[0] * dx]);
            }
            out
        });
        Ok(Tensor::from_op(vec![1], vec![angle], parents, back))
    }

    /// Numerically stable log-softmax of a rank-1 tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::RankMismatch {
                op: "log_softmax",
                expected: 1,
                shape: self.shape(),
            });
        }
        let x = self.values();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let y: Vec<f64> = x.iter().map(|v| v - lse).collect();
        if !self.requires_grad() {
            return Ok(Tensor::make(vec![x.len()], y, false));
        }
        let softmax: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let n = x.len();
        let back: BackFn = Box::new(move |up| {
            let total: f64 = up.iter().sum();
            let g = (0..n).map(|i| up[i] - softmax[i] * total).collect();
            vec![g]
        });
        Ok(Tensor::from_op(vec![n], y, vec![self.clone()], back))
    }

    /// Nearest-neighbour 2x upsampling of a (C, H, W) tensor.
    pub fn upsample2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::RankMismatch {
                op: "upsample2",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = self.values();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                let src = &x[ch * h * w + (i / 2) * w..ch * h * w + (i / 2) * w + w];
                let dst = &mut y[ch * h2 * w2 + i * w2..ch * h2 * w2 + i * w2 + w2];
                for j in 0..w2 {
                    dst[j] = src[j / 2];
                }
            }
        }
        if !self.requires_grad() {
            return Ok(Tensor::make(vec![c, h2, w2], y, false));
        }
        let back: BackFn = Box::new(move |up| {
            let mut g = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        g[ch * h * w + (i / 2) * w + j / 2] += up[ch * h2 * w2 + i * w2 + j];
                    }
                }
            }
            vec![g]
        });
        Ok(Tensor::from_op(
            vec![c, h2, w2],
            y,
            vec![self.clone()],
            back,
        ))
    }

    /// 2D cross-correlation (no kernel flip) of a (C_in, H, W) input with
    /// (C_out, C_in, kh, kw) kernels plus a per-channel bias.
    ///
    /// Output extents are `floor((ext + 2*padding - k)/stride) + 1`. With
    /// `CircularWidth` the width axis wraps and only the height axis is
    /// zero-padded.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        mode: PaddingMode,
    ) -> Result<Tensor> {
        let si = self.shape();
        let sk = kernels.shape();
        if si.len() != 3 {
            return Err(Error::RankMismatch {
                op: "conv2d input",
                expected: 3,
                shape: si,
            });
        }
        if sk.len() != 4 {
            return Err(Error::RankMismatch {
                op: "conv2d kernels",
                expected: 4,
                shape: sk,
            });
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, ck_in, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ck_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: si,
                rhs: sk,
            });
        }
        if bias.shape() != vec![c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: bias.shape(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::KernelTooLarge {
                kh,
                kw,
                h: h + 2 * padding,
                w: w + 2 * padding,
            });
        }
        assert!(stride >= 1, "conv2d stride must be positive");

        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;

        let x = self.values();
        let k = kernels.values();
        let b = bias.values();

        let geo = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            mode,
            h_out,
            w_out,
        };
        let padded = geo.pad_input(&x);
        let mut y = vec![0.0; c_out * h_out * w_out];
        geo.forward(&padded, &k, &b, &mut y);

        let need_x = self.requires_grad();
        let need_k = kernels.requires_grad();
        let need_b = bias.requires_grad();
        if !need_x && !need_k && !need_b {
            return Ok(Tensor::make(vec![c_out, h_out, w_out], y, false));
        }
        let mut parents = Vec::new();
        if need_x {
            parents.push(self.clone());
        }
        if need_k {
            parents.push(kernels.clone());
        }
        if need_b {
            parents.push(bias.clone());
        }
        let back: BackFn = Box::new(move |up| {
            let mut out = Vec::new();
            if need_x {
                out.push(geo.backward_input(up, &k));
            }
            if need_k {
                out.push(geo.backward_kernels(up, &padded));
            }
            if need_b {
                let plane = geo.h_out * geo.w_out;
                let gb = (0..geo.c_out)
                    .map(|co| up[co * plane..(co + 1) * plane].iter().sum())
                    .collect();
                out.push(gb);
            }
            out
        });
        Ok(Tensor::from_op(
            vec![c_out, h_out, w_out],
            y,
            parents,
            back,
        ))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    mode: PaddingMode,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn padded_width(&self) -> usize {
        self.w + 2 * self.padding
    }

    /// Width-padded copy of the input, (C_in, H, W + 2p). The height axis
    /// is handled by skipping out-of-range rows, which matches zero
    /// padding without materializing it.
    fn pad_input(&self, x: &[f64]) -> Vec<f64> {
        let wp = self.padded_width();
        let mut padded = vec![0.0; self.c_in * self.h * wp];
        for ci in 0..self.c_in {
            for y in 0..self.h {
                let src = &x[ci * self.h * self.w + y * self.w..][..self.w];
                let dst = &mut padded[ci * self.h * wp + y * wp..][..wp];
                for (xp, slot) in dst.iter_mut().enumerate() {
                    let xi = xp as isize - self.padding as isize;
                    *slot = match self.mode {
                        PaddingMode::Zero => {
                            if xi >= 0 && (xi as usize) < self.w {
                                src[xi as usize]
                            } else {
                                0.0
                            }
                        }
                        PaddingMode::CircularWidth => {
                            src[xi.rem_euclid(self.w as isize) as usize]
                        }
                    };
                }
            }
        }
        padded
    }

    fn forward(&self, padded: &[f64], k: &[f64], b: &[f64], y: &mut [f64]) {
        let wp = self.padded_width();
        for co in 0..self.c_out {
            let out_plane = &mut y[co * self.h_out * self.w_out..][..self.h_out * self.w_out];
            out_plane.fill(b[co]);
            for yo in 0..self.h_out {
                let orow = &mut out_plane[yo * self.w_out..][..self.w_out];
                for ci in 0..self.c_in {
                    for ky in 0..self.kh {
                        let yi = (yo * self.stride + ky) as isize - self.padding as isize;
                        if yi < 0 || yi as usize >= self.h {
                            continue;
                        }
                        let irow = &padded[ci * self.h * wp + yi as usize * wp..][..wp];
                        let kbase = ((co * self.c_in + ci) * self.kh + ky) * self.kw;
                        for kx in 0..self.kw {
                            let kv = k[kbase + kx];
                            if self.stride == 1 {
                                for (o, iv) in orow.iter_mut().zip(&irow[kx..kx + self.w_out]) {
                                    *o += kv * iv;
                                }
                            } else {
                                for (xo, o) in orow.iter_mut().enumerate() {
                                    *o += kv * irow[xo * self.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, up: &[f64], k: &[f64]) -> Vec<f64> {
        let wp = self.padded_width();
        let mut gpad = vec![0.0; self.c_in * self.h * wp];
        for co in 0..self.c_out {
            let uplane = &up[co * self.h_out * self.w_out..][..self.h_out * self.w_out];
            for yo in 0..self.h_out {
                let urow = &uplane[yo * self.w_out..][..self.w_out];
                for ci in 0..self.c_in {
                    for ky in 0..self.kh {
                        let yi = (yo * self.stride + ky) as isize - self.padding as isize;
                        if yi < 0 || yi as usize >= self.h {
                            continue;
                        }
                        let grow = &mut gpad[ci * self.h * wp + yi as usize * wp..][..wp];
                        let kbase = ((co * self.c_in + ci) * self.kh + ky) * self.kw;
                        for kx in 0..self.kw {
                            let kv = k[kbase + kx];
                            if self.stride == 1 {
                                for (g, u) in grow[kx..kx + self.w_out].iter_mut().zip(urow) {
                                    *g += kv * u;
                                }
                            } else {
                                for (xo, u) in urow.iter().enumerate() {
                                    grow[xo * self.stride + kx] += kv * u;
                                }
                            }
                        }
                    }
                }
            }
        }
        // Fold the padded margins back onto the image.
        let mut g = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for y in 0..self.h {
                let grow = &gpad[ci * self.h * wp + y * wp..][..wp];
                let dst = &mut g[ci * self.h * self.w + y * self.w..][..self.w];
                for (xp, gv) in grow.iter().enumerate() {
                    if *gv == 0.0 {
                        continue;
                    }
                    let xi = xp as isize - self.padding as isize;
                    match self.mode {
                        PaddingMode::Zero => {
                            if xi >= 0 && (xi as usize) < self.w {
                                dst[xi as usize] += gv;
                            }
                        }
                        PaddingMode::CircularWidth => {
                            dst[xi.rem_euclid(self.w as isize) as usize] += gv;
                        }
                    }
                }
            }
        }
        g
    }

    fn backward_kernels(&self, up: &[f64], padded: &[f64]) -> Vec<f64> {
        let wp = self.padded_width();
        let mut gk = vec![0.0; self.c_out * self.c_in * self.kh * self.kw];
        for co in 0..self.c_out {
            let uplane = &up[co * self.h_out * self.w_out..][..self.h_out * self.w_out];
            for yo in 0..self.h_out {
                let urow = &uplane[yo * self.w_out..][..self.w_out];
                for ci in 0..self.c_in {
                    for ky in 0..self.kh {
                        let yi = (yo * self.stride + ky) as isize - self.padding as isize;
                        if yi < 0 || yi as usize >= self.h {
                            continue;
                        }
                        let irow = &padded[ci * self.h * wp + yi as usize * wp..][..wp];
                        let kbase = ((co * self.c_in + ci) * self.kh + ky) * self.kw;
                        for kx in 0..self.kw {
                            let acc: f64 = if self.stride == 1 {
                                urow.iter()
                                    .zip(&irow[kx..kx + self.w_out])
                                    .map(|(u, iv)| u * iv)
                                    .sum()
                            } else {
                                urow.iter()
                                    .enumerate()
                                    .map(|(xo, u)| u * irow[xo * self.stride + kx])
                                    .sum()
                            };
                            gk[kbase + kx] += acc;
                        }
                    }
                }
            }
        }
        gk
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (yv, bv) in yrow.iter_mut().zip(brow) {
                *yv += av * bv;
            }
        }
    }
    y
}
