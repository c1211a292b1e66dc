//! Dense row-major tensors and the two primitives every layer is built from:
//! [`matmul`] and [`im2col`] (with its adjoint [`col2im_add`]).
//!
//! Tensors are generic over [`Scalar`] so that training runs in `f32` while
//! oracles and gradient checks run the very same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{NptnError, Result};
use crate::gemm::Lanes;
use crate::rng::Rng;

pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + MulAssign + Lanes + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Draw from `[lo, hi)` consuming exactly one value from `rng`.
    fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (lo as f32, hi as f32);
        lo + (hi - lo) * rng.unit_f32()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> Self {
        lo + (hi - lo) * rng.unit_f64()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
}

/// Dense N-dimensional array, row-major, `data.len() == shape.iter().product()`.
#[derive(Clone, PartialEq)]
pub struct NDTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor = NDTensor<f32>;

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(NptnError::shape(
            "tensor shape must have at least one dimension",
        ));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(NptnError::shape(format!(
            "dimension {d} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> NDTensor<T> {
    /// Build a tensor. `Init::Uniform` consumes exactly one draw per element,
    /// in row-major order.
    pub fn create(shape: &[usize], init: Init, rng: Option<&mut Rng>) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match init {
            Init::Zero => vec![T::zero(); len],
            Init::Constant(c) => vec![T::from_f64(c); len],
            Init::Uniform { lo, hi } => {
                let rng = rng.ok_or_else(|| {
                    NptnError::contract("uniform initialization needs a random generator")
                })?;
                (0..len).map(|_| T::uniform(rng, lo, hi)).collect()
            }
        };
        Ok(NDTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zero, None).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::create(shape, Init::Uniform { lo, hi }, Some(rng)).expect("uniform: invalid shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(NptnError::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(NDTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(NptnError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NDTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NDTensor<U> {
        NDTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest `|a - b|` over matching elements. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }
}

impl<T: Debug> Debug for NDTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "NDTensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub use crate::gemm::gemm;

/// Row-major transpose of an `rows × cols` slice into `out`.
pub fn transpose_into<T: Scalar>(rows: usize, cols: usize, src: &[T], out: &mut [T]) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    const TILE: usize = 16;
    for i0 in (0..rows).step_by(TILE) {
        let i1 = (i0 + TILE).min(rows);
        for j0 in (0..cols).step_by(TILE) {
            let j1 = (j0 + TILE).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &NDTensor<T>, b: &NDTensor<T>) -> Result<NDTensor<T>> {
    let (m, k) = match a.shape() {
        &[m, k] => (m, k),
        s => {
            return Err(NptnError::shape(format!(
                "matmul: left operand {s:?} is not 2-D"
            )))
        }
    };
    let (k2, n) = match b.shape() {
        &[k2, n] => (k2, n),
        s => {
            return Err(NptnError::shape(format!(
                "matmul: right operand {s:?} is not 2-D"
            )))
        }
    };
    if k != k2 {
        return Err(NptnError::shape(format!(
            "matmul: inner dimensions differ ({m}x{k} · {k2}x{n})"
        )));
    }
    let mut out = NDTensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &NDTensor<T>) -> Result<NDTensor<T>> {
    let (r, c) = match a.shape() {
        &[r, c] => (r, c),
        s => return Err(NptnError::shape(format!("transpose: {s:?} is not 2-D"))),
    };
    let mut out = NDTensor::zeros(&[c, r]);
    transpose_into(r, c, a.data(), out.data_mut());
    Ok(out)
}

/// Geometry of a square-kernel sliding window over a `height × width` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Window {
    pub fn new(kernel: usize, pad: usize, stride: usize) -> Self {
        Window {
            kernel,
            pad,
            stride,
        }
    }

    fn out_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(NptnError::shape("kernel and stride must be at least 1"));
        }
        let padded = len + 2 * self.pad;
        if padded < self.kernel {
            return Err(NptnError::shape(format!(
                "kernel {} larger than padded extent {padded}",
                self.kernel
            )));
        }
        let span = padded - self.kernel;
        if span % self.stride != 0 {
            return Err(NptnError::shape(format!(
                "output size ({len} + 2*{} - {}) / {} + 1 is not integral",
                self.pad, self.kernel, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }

    /// Output `(height, width)`, or a shape error when it is not integral.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok((self.out_len(height)?, self.out_len(width)?))
    }
}

impl Window {
    /// Output columns `ox` whose tap `kj` lands inside a row of `width`.
    fn valid_cols(&self, kj: usize, width: usize, out_w: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if width + p > kj {
            (width + p - kj).div_ceil(s).min(out_w)
        } else {
            0
        };
        lo.min(hi)..hi
    }
}

/// Unfold one `[channels, height, width]` image (raw slice) into
/// `[channels·k·k, H'·W']` columns.
pub fn im2col_into<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    win: Window,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let k = win.kernel;
    let hw = out_h * out_w;
    assert_eq!(x.len(), channels * height * width);
    assert_eq!(cols.len(), channels * k * k * hw);
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let valid = win.valid_cols(kj, width, out_w);
                for oy in 0..out_h {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize || valid.is_empty() {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    dst_row[..valid.start].fill(T::zero());
                    dst_row[valid.end..].fill(T::zero());
                    let x0 = valid.start * win.stride + kj - win.pad;
                    if win.stride == 1 {
                        dst_row[valid.clone()].copy_from_slice(&src[x0..x0 + valid.len()]);
                    } else {
                        for (d, &v) in dst_row[valid.clone()]
                            .iter_mut()
                            .zip(src[x0..].iter().step_by(win.stride))
                        {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-add columns back into an image.
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    win: Window,
    out_h: usize,
    out_w: usize,
    x: &mut [T],
) {
    let k = win.kernel;
    let hw = out_h * out_w;
    assert_eq!(x.len(), channels * height * width);
    assert_eq!(cols.len(), channels * k * k * hw);
    for c in 0..channels {
        let plane = &mut x[c * height * width..(c + 1) * height * width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let valid = win.valid_cols(kj, width, out_w);
                if valid.is_empty() {
                    continue;
                }
                let x0 = valid.start * win.stride + kj - win.pad;
                for oy in 0..out_h {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    let srow = &src[oy * out_w + valid.start..oy * out_w + valid.end];
                    if win.stride == 1 {
                        for (d, &v) in dst[x0..x0 + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(win.stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: [C, H, W]` → `[C·k·k, H'·W']`. Column `j` is the receptive field of
/// output position `j`, ordered channel, then kernel row, then kernel column.
/// Reads outside the image are zero.
pub fn im2col<T: Scalar>(
    x: &NDTensor<T>,
    kernel: usize,
    pad: usize,
    stride: usize,
) -> Result<NDTensor<T>> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(NptnError::shape(format!(
                "im2col expects [C,H,W], got {s:?}"
            )))
        }
    };
    let win = Window::new(kernel, pad, stride);
    let (oh, ow) = win.output_size(h, w)?;
    let mut cols = NDTensor::zeros(&[c * kernel * kernel, oh * ow]);
    im2col_into(x.data(), c, h, w, win, oh, ow, cols.data_mut());
    Ok(cols)
}
