//! Dense `(channels, height, width)` tensors, zero-padded strided convolution
//! and the explicit matrix form of a convolution.
//!
//! Convolutions carry no bias: the layer is the linear map `x -> K * pad(x)`.
//! Padding `p` is the *total* number of extra rows (columns); the leading side
//! receives `p / 2` and the trailing side `p - p / 2`.

use crate::error::{Error, Result};

/// Shape of a rank-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Row-major `(c, h, w)` array of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape3,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid(format!("tensor dims must be >= 1, got {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape("tensor data", shape.numel(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        assert!(shape.numel() > 0, "tensor dims must be >= 1");
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for c in 0..shape.c {
            for i in 0..shape.h {
                for j in 0..shape.w {
                    t.data[(c * shape.h + i) * shape.w + j] = f(c, i, j);
                }
            }
        }
        t
    }

    /// Builds a tensor from data produced by internal arithmetic; still rejects NaN/Inf.
    pub(crate) fn from_vec_unchecked_shape(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.numel(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.shape.h + i) * self.shape.w + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.index(c, i, j);
        self.data[idx] = v;
    }

    /// The channel vector at spatial site `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.shape.c).map(|c| self.get(c, i, j)).collect()
    }

    pub fn set_column(&mut self, i: usize, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.shape.c);
        for (c, &x) in v.iter().enumerate() {
            self.set(c, i, j, x);
        }
    }

    fn check_same(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "tensor add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::from_vec_unchecked_shape(self.shape, data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "tensor sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::from_vec_unchecked_shape(self.shape, data)
    }

    pub fn scale(&self, alpha: f64) -> Result<Tensor> {
        Tensor::from_vec_unchecked_shape(self.shape, self.data.iter().map(|v| alpha * v).collect())
    }

    /// `alpha * self + beta * other`
    pub fn lin_comb(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        self.check_same(other, "tensor linear combination")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Tensor::from_vec_unchecked_shape(self.shape, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

/// Square root of the sum of squared entries over all channels.
pub fn frobenius_norm(x: &Tensor) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Convolution kernel laid out as `(c_out, c_in, k_h, k_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4 {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    data: Vec<f64>,
}

impl Kernel4 {
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("kernel dims must be >= 1"));
        }
        let n = c_out * c_in * kh * kw;
        if data.len() != n {
            return Err(Error::shape("kernel data", n, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel"));
        }
        Ok(Self {
            c_out,
            c_in,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self::new(c_out, c_in, kh, kw, vec![0.0; c_out * c_in * kh * kw]).expect("valid dims")
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, u: usize, v: usize) -> f64 {
        self.data[((o * self.c_in + i) * self.kh + u) * self.kw + v]
    }

    /// The `k_h x k_w` slice connecting input channel `i` to output channel `o`.
    pub fn slice(&self, o: usize, i: usize) -> &[f64] {
        let len = self.kh * self.kw;
        let start = (o * self.c_in + i) * len;
        &self.data[start..start + len]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A bias-free 2D convolution: kernel, stride `(s_h, s_w)`, total padding `(p_h, p_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Kernel4,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvLayer {
    pub fn new(kernel: Kernel4, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    pub fn lead_padding(&self) -> (usize, usize) {
        (self.padding.0 / 2, self.padding.1 / 2)
    }

    /// Output shape for an input of `input`, enforcing the divisibility contract.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        if input.c != self.kernel.c_in {
            return Err(Error::shape("conv input channels", self.kernel.c_in, input.c));
        }
        let oh = output_extent("height", input.h, self.kernel.kh, self.padding.0, self.stride.0)?;
        let ow = output_extent("width", input.w, self.kernel.kw, self.padding.1, self.stride.1)?;
        Ok(Shape3::new(self.kernel.c_out, oh, ow))
    }
}

fn output_extent(axis: &'static str, n: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    let span = n as i64 + p as i64 - k as i64;
    if span < 0 || span % s as i64 != 0 {
        return Err(Error::Divisibility {
            axis,
            input: n,
            kernel: k,
            padding: p,
            stride: s,
            span,
        });
    }
    Ok(1 + span as usize / s)
}

/// Applies the convolution to `x`.
pub fn conv2d_forward(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let out_shape = layer.output_shape(x.shape())?;
    let k = &layer.kernel;
    let (sh, sw) = layer.stride;
    let (lh, lw) = layer.lead_padding();
    let in_s = x.shape();
    let mut out = vec![0.0; out_shape.numel()];
    for o in 0..out_shape.c {
        for a in 0..out_shape.h {
            for b in 0..out_shape.w {
                let mut acc = 0.0;
                for i in 0..in_s.c {
                    let ks = k.slice(o, i);
                    for u in 0..k.kh {
                        let r = (a * sh + u) as isize - lh as isize;
                        if r < 0 || r >= in_s.h as isize {
                            continue;
                        }
                        for v in 0..k.kw {
                            let q = (b * sw + v) as isize - lw as isize;
                            if q < 0 || q >= in_s.w as isize {
                                continue;
                            }
                            acc += ks[u * k.kw + v] * x.get(i, r as usize, q as usize);
                        }
                    }
                }
                out[(o * out_shape.h + a) * out_shape.w + b] = acc;
            }
        }
    }
    Tensor::from_vec_unchecked_shape(out_shape, out)
}

/// Reverse pass of [`conv2d_forward`]: returns `(d input, d kernel)` for an upstream gradient.
pub fn conv2d_backward(x: &Tensor, layer: &ConvLayer, grad_out: &Tensor) -> Result<(Tensor, Kernel4)> {
    let out_shape = layer.output_shape(x.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("conv upstream gradient", out_shape, grad_out.shape()));
    }
    let k = &layer.kernel;
    let (sh, sw) = layer.stride;
    let (lh, lw) = layer.lead_padding();
    let in_s = x.shape();
    let mut gx = vec![0.0; in_s.numel()];
    let mut gk = vec![0.0; k.data.len()];
    for o in 0..out_shape.c {
        for a in 0..out_shape.h {
            for b in 0..out_shape.w {
                let g = grad_out.get(o, a, b);
                if g == 0.0 {
                    continue;
                }
                for i in 0..in_s.c {
                    let kbase = (o * k.c_in + i) * k.kh * k.kw;
                    for u in 0..k.kh {
                        let r = (a * sh + u) as isize - lh as isize;
                        if r < 0 || r >= in_s.h as isize {
                            continue;
                        }
                        for v in 0..k.kw {
                            let q = (b * sw + v) as isize - lw as isize;
                            if q < 0 || q >= in_s.w as isize {
                                continue;
                            }
                            let xi = (i * in_s.h + r as usize) * in_s.w + q as usize;
                            gk[kbase + u * k.kw + v] += g * x.data[xi];
                            gx[xi] += g * k.data[kbase + u * k.kw + v];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec_unchecked_shape(in_s, gx)?,
        Kernel4::new(k.c_out, k.c_in, k.kh, k.kw, gk)?,
    ))
}

/// The zero-padding embedding `x -> pad(x)`; an isometry.
pub fn pad_embed(x: &Tensor, padding: (usize, usize)) -> Tensor {
    let s = x.shape();
    let (lh, lw) = (padding.0 / 2, padding.1 / 2);
    let ps = Shape3::new(s.c, s.h + padding.0, s.w + padding.1);
    let mut out = Tensor::zeros(ps);
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                out.set(c, i + lh, j + lw, x.get(c, i, j));
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor on both spatial axes.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let os = Shape3::new(s.c, s.h * factor, s.w * factor);
    Tensor::from_fn(os, |c, i, j| x.get(c, i / factor, j / factor))
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Tensor {
    let s = grad_out.shape();
    let is = Shape3::new(s.c, s.h / factor, s.w / factor);
    let mut g = Tensor::zeros(is);
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let idx = g.index(c, i / factor, j / factor);
                g.data[idx] += grad_out.get(c, i, j);
            }
        }
    }
    g
}

/// Supremum of `|d/dx x * sigmoid(x)|`, rounded up (attained near `x = 2.39936`).
pub const SWISH_LIPSCHITZ: f64 = 1.0998394;

/// Pointwise activation with a known Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Swish,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn lipschitz_constant(&self) -> f64 {
        match *self {
            Activation::Relu | Activation::Identity => 1.0,
            Activation::LeakyRelu(alpha) => alpha.abs().max(1.0),
            Activation::Swish => SWISH_LIPSCHITZ,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Swish => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative used in the reverse pass; `0` is taken as the subgradient of ReLU at the kink.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu({a})"),
            Activation::Swish => "swish".into(),
            Activation::Identity => "identity".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            "identity" => Ok(Activation::Identity),
            _ => {
                let alpha = s
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| a.is_finite())
                    .ok_or_else(|| Error::invalid(format!("unknown activation `{s}`")))?;
                Ok(Activation::LeakyRelu(alpha))
            }
        }
    }
}

pub fn apply_activation(x: &Tensor, a: Activation) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| a.eval(v)).collect(),
    }
}

/// Dense row-major matrix, used for unrolled convolutions and oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }
}

/// Explicit `(c_o*o_h*o_w) x (c_i*h*w)` matrix of the layer on inputs of `input`, padding included.
pub fn unroll_conv_matrix(layer: &ConvLayer, input: Shape3) -> Result<Matrix> {
    let out = layer.output_shape(input)?;
    let k = &layer.kernel;
    let (sh, sw) = layer.stride;
    let (lh, lw) = layer.lead_padding();
    let mut m = Matrix::zeros(out.numel(), input.numel());
    for o in 0..out.c {
        for a in 0..out.h {
            for b in 0..out.w {
                let row = (o * out.h + a) * out.w + b;
                for i in 0..input.c {
                    for u in 0..k.kh {
                        let r = (a * sh + u) as isize - lh as isize;
                        if r < 0 || r >= input.h as isize {
                            continue;
                        }
                        for v in 0..k.kw {
                            let q = (b * sw + v) as isize - lw as isize;
                            if q < 0 || q >= input.w as isize {
                                continue;
                            }
                            let col = (i * input.h + r as usize) * input.w + q as usize;
                            m.data[row * m.cols + col] += k.get(o, i, u, v);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(k: Kernel4, s: usize, p: usize) -> ConvLayer {
        ConvLayer::new(k, (s, s), (p, p)).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let k = Kernel4::new(2, 1, 2, 2, vec![1.0, -2.0, 3.0, 0.5, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = conv2d_forward(&Tensor::zeros(Shape3::new(1, 3, 3)), &layer(k, 1, 0)).unwrap();
        assert_eq!(y.shape(), Shape3::new(2, 2, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_diagonal_kernel() {
        let x = Tensor::new(Shape3::new(1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let k = Kernel4::new(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &layer(k, 1, 0)).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn(Shape3::new(1, 4, 5), |_, i, j| (i * 7 + j) as f64 * 0.3 - 1.0);
        let k = Kernel4::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &layer(k, 1, 0)).unwrap(), x);
    }

    #[test]
    fn divisibility_violation_names_axis() {
        let k = Kernel4::zeros(1, 1, 2, 2);
        let err = conv2d_forward(&Tensor::zeros(Shape3::new(1, 5, 4)), &layer(k, 2, 0)).unwrap_err();
        match err {
            Error::Divisibility { axis, .. } => assert_eq!(axis, "height"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let k = Kernel4::zeros(1, 2, 1, 1);
        let err = conv2d_forward(&Tensor::zeros(Shape3::new(3, 2, 2)), &layer(k, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn padding_preserves_norm_and_places_leading_half() {
        let x = Tensor::from_fn(Shape3::new(2, 3, 3), |c, i, j| (c + i * j) as f64 - 1.5);
        let p = pad_embed(&x, (3, 2));
        assert_eq!(p.shape(), Shape3::new(2, 6, 5));
        assert_eq!(p.frobenius_norm(), x.frobenius_norm());
        assert_eq!(p.get(1, 1, 1), x.get(1, 0, 0));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Tensor::zeros(Shape3::new(2, 2, 2))), 0.0);
        let mut t = Tensor::zeros(Shape3::new(2, 2, 2));
        t.set(1, 0, 1, 3.0);
        assert_eq!(frobenius_norm(&t), 3.0);
        let ones = Tensor::new(Shape3::new(1, 2, 2), vec![1.0; 4]).unwrap();
        assert_eq!(frobenius_norm(&ones), 2.0);
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::new(Shape3::new(1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(apply_activation(&x, Activation::Relu).data(), &[0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Identity), x);
        assert!((Activation::Swish.eval(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(Activation::LeakyRelu(0.2).lipschitz_constant(), 1.0);
        assert_eq!(Activation::LeakyRelu(3.0).lipschitz_constant(), 3.0);
    }

    #[test]
    fn activation_names_round_trip() {
        for a in [
            Activation::Relu,
            Activation::Swish,
            Activation::Identity,
            Activation::LeakyRelu(0.25),
        ] {
            assert_eq!(Activation::parse(&a.name()).unwrap(), a);
        }
        assert!(Activation::parse("tanh").is_err());
    }

    #[test]
    fn swish_constant_bounds_a_scanned_slope() {
        // Independent check: maximize a central-difference slope by bracketed scan.
        let f = |x: f64| x / (1.0 + (-x).exp());
        let slope = |x: f64| (f(x + 1e-6) - f(x - 1e-6)) / 2e-6;
        let (mut lo, mut hi) = (-10.0, 10.0);
        let mut best = (0.0, 0.0);
        for _ in 0..6 {
            let n = 2000;
            best = (0..=n)
                .map(|i| lo + (hi - lo) * i as f64 / n as f64)
                .map(|x| (x, slope(x).abs()))
                .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            let step = (hi - lo) / n as f64;
            lo = best.0 - 2.0 * step;
            hi = best.0 + 2.0 * step;
        }
        assert!((best.0 - 2.399357).abs() < 1e-3, "argmax {}", best.0);
        assert!(SWISH_LIPSCHITZ >= best.1);
        assert!(SWISH_LIPSCHITZ - best.1 < 1e-6);
    }

    #[test]
    fn unroll_scaled_identity() {
        let k = Kernel4::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let m = unroll_conv_matrix(&layer(k, 1, 0), Shape3::new(1, 2, 2)).unwrap();
        assert_eq!(m, Matrix::diag(&[2.0; 4]));
    }

    #[test]
    fn unroll_stride_two_has_disjoint_patches() {
        let k = Kernel4::new(1, 1, 2, 2, vec![1.0; 4]).unwrap();
        let m = unroll_conv_matrix(&layer(k, 2, 0), Shape3::new(1, 4, 4)).unwrap();
        assert_eq!((m.rows, m.cols), (4, 16));
        let mut hits = [0; 16];
        for r in 0..4 {
            let ones: Vec<usize> = (0..16).filter(|&c| m.get(r, c) == 1.0).collect();
            assert_eq!(ones.len(), 4);
            assert_eq!(m.row(r).iter().filter(|&&v| v != 0.0).count(), 4);
            for c in ones {
                hits[c] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_fn(Shape3::new(2, 2, 3), |c, i, j| (c * 6 + i * 3 + j) as f64);
        let y = Tensor::from_fn(Shape3::new(2, 4, 6), |c, i, j| ((c + 1) * (i + 2 * j)) as f64 * 0.1);
        let up = upsample_nearest(&x, 2);
        let lhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = upsample_nearest_backward(&y, 2);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(Shape3::new(1, 1, 1), vec![f64::NAN]).is_err());
        assert!(Tensor::new(Shape3::new(1, 0, 1), vec![]).is_err());
        assert!(Kernel4::new(1, 1, 1, 1, vec![f64::INFINITY]).is_err());
    }
}
