//! Dense row-major arrays and the small set of kernels the fusion pipeline
//! is built from.
//!
//! Everything here is a pure function of its inputs. Spatial kernels use
//! reflect padding (mirror about the edge sample, edge not repeated).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with an explicit shape.
///
/// A rank-0 tensor holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` on every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape(), "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Rows when viewed as `[n, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }
}

/// Maps an arbitrary (possibly out-of-range) index onto `0..n` by mirroring
/// about the edge samples, without repeating them.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Converts `[H, W, C]` to `[C, H, W]`.
pub fn hwc_to_chw<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[(k * h + i) * w + j] = src[(i * w + j) * c + k];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Converts `[C, H, W]` to `[H, W, C]`.
pub fn chw_to_hwc<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j) * c + k] = src[(k * h + i) * w + j];
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Affine map `y = W x + b` applied along the trailing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        let bias = match bias {
            Some(b) => {
                b.expect_shape(&[out], "linear bias")?;
                b
            }
            None => Tensor::zeros(&[out]),
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let weight = Tensor::from_fn(&[n, n], |k| if k / n == k % n { T::one() } else { T::zero() });
        Self {
            weight,
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the map to one row, writing `out_dim` values into `out`.
    pub fn apply_row(&self, x: &[T], out: &mut [T]) {
        let n_in = self.in_dim();
        let w = self.weight.data();
        for (o, (dst, &b)) in out.iter_mut().zip(self.bias.data()).enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = T::zero();
            for (&wi, &xi) in row.iter().zip(x) {
                acc = acc + wi * xi;
            }
            *dst = acc + b;
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear_apply(self, x)
    }
}

pub fn linear_apply<T: Real>(m: &LinearMap<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n_in = m.in_dim();
    if x.rank() == 0 || x.last_dim() != n_in {
        return Err(Error::shape(format!(
            "linear expects trailing extent {n_in}, got shape {:?}",
            x.shape()
        )));
    }
    let n_out = m.out_dim();
    let rows = x.rows();
    let mut out = vec![T::zero(); rows * n_out];
    for (src, dst) in x.data().chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        m.apply_row(src, dst);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    Tensor::new(shape, out)
}

/// Layer normalisation over the trailing axis (population variance).
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Domain("layer_norm eps must be positive".into()));
    }
    let c = x.last_dim();
    gamma.expect_shape(&[c], "layer_norm gamma")?;
    beta.expect_shape(&[c], "layer_norm beta")?;
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = src.iter().copied().sum::<T>() * inv_c;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();
        for (k, d) in dst.iter_mut().enumerate() {
            *d = gamma.data()[k] * (src[k] - mean) * inv_std + beta.data()[k];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Learned layer-norm affine parameters over a `C`-wide trailing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// Per-channel 3x3 correlation of a `[C, H, W]` map with `[C, 3, 3]` kernels.
pub fn depthwise_conv3x3<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    kernels.expect_shape(&[c, 3, 3], "depthwise kernels")?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let k = &kernels.data()[ch * 9..ch * 9 + 9];
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for di in 0..3 {
                    let ii = reflect_index(i as isize + di as isize - 1, h);
                    for dj in 0..3 {
                        let jj = reflect_index(j as isize + dj as isize - 1, w);
                        acc = acc + k[di * 3 + dj] * plane[ii * w + jj];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    SoftmaxLastAxis,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::from_f64(SOFTPLUS_LINEAR_ABOVE) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > SOFTPLUS_LINEAR_ABOVE {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Silu => x.map(silu),
        Activation::Softplus => x.map(softplus),
        Activation::SoftmaxLastAxis => {
            let c = x.last_dim();
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                softmax_in_place(row);
            }
            out
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let total: T = row.iter().copied().sum();
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)` of an `[H, W]` image.
///
/// Kernels are the standard `[-1 0 1; -2 0 2; -1 0 1]` and its transpose,
/// evaluated as differences of opposite taps so flat regions give exact zeros.
pub fn sobel_magnitude<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = x.dims2()?;
    if h < 3 || w < 3 {
        return Err(Error::Size(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let src = x.data();
    let at = |i: isize, j: isize| src[reflect_index(i, h) * w + reflect_index(j, w)];
    let two = T::from_f64(2.0);
    let mut out = vec![T::zero(); src.len()];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = (at(i - 1, j + 1) - at(i - 1, j - 1))
                + two * (at(i, j + 1) - at(i, j - 1))
                + (at(i + 1, j + 1) - at(i + 1, j - 1));
            let gy = (at(i + 1, j - 1) - at(i - 1, j - 1))
                + two * (at(i + 1, j) - at(i - 1, j))
                + (at(i + 1, j + 1) - at(i - 1, j + 1));
            out[i as usize * w + j as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
