//! Dense 5-axis `f64` arrays in `(n, h, w, d, c)` order, channels fastest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Extents of a 5-axis tensor: batch, height (Y), width (X), depth (Z), channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub c: usize,
}

impl Shape5 {
    pub fn new(n: usize, h: usize, w: usize, d: usize, c: usize) -> Result<Self> {
        let shape = Shape5 { n, h, w, d, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.h == 0 || self.w == 0 || self.d == 0 || self.c == 0 {
            return Err(Error::InvalidShape(format!("{self}: every extent must be >= 1")));
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| Error::InvalidShape(format!("{self}: element count overflows")))
    }

    fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.h)?
            .checked_mul(self.w)?
            .checked_mul(self.d)?
            .checked_mul(self.c)
    }

    /// Total element count. Only meaningful on a validated shape.
    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.d * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per sample, ignoring batch and channels.
    pub fn spatial(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }

    pub fn with_d(self, d: usize) -> Self {
        Shape5 { d, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape5 { n, ..self }
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, d: usize, c: usize) -> usize {
        (((n * self.h + h) * self.w + w) * self.d + d) * self.c + c
    }

    /// Inverse of [`Shape5::index`].
    pub fn coords(&self, mut i: usize) -> [usize; 5] {
        let c = i % self.c;
        i /= self.c;
        let d = i % self.d;
        i /= self.d;
        let w = i % self.w;
        i /= self.w;
        let h = i % self.h;
        [i / self.h, h, w, d, c]
    }

    pub fn to_array(self) -> [usize; 5] {
        [self.n, self.h, self.w, self.d, self.c]
    }

    pub fn from_array(a: [usize; 5]) -> Result<Self> {
        Shape5::new(a[0], a[1], a[2], a[3], a[4])
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.h, self.w, self.d, self.c)
    }
}

/// Elementwise binary operation for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Zero padding `(front, back)` that keeps an axis of length `extent` unchanged
/// under a stride-1 correlation with a kernel of length `k`.
///
/// Odd kernels pad `k/2` on both sides. A kernel spanning the whole axis pads
/// `(k-1)/2` in front and the remainder behind, which makes even full-depth
/// kernels work too. Any other even kernel is rejected.
pub fn same_padding(k: usize, extent: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::Unsupported("zero-length kernel".into()));
    }
    if k % 2 == 1 {
        Ok((k / 2, k / 2))
    } else if k == extent {
        Ok(((k - 1) / 2, k / 2))
    } else {
        Err(Error::Unsupported(format!(
            "even kernel {k} on axis of extent {extent} has no same padding"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape5,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new_filled(shape: Shape5, v: f64) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor { shape, data: vec![v; shape.len()] })
    }

    pub fn zeros(shape: Shape5) -> Result<Self> {
        Self::new_filled(shape, 0.0)
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every coordinate `[n, h, w, d, c]`.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> f64) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.len()).map(|i| f(shape.coords(i))).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize, d: usize, c: usize) -> f64 {
        self.data[self.shape.index(n, h, w, d, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, d: usize, c: usize, v: f64) {
        let i = self.shape.index(n, h, w, d, c);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b))))
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
        };
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Tensor { shape: self.shape, data };
        out.ensure_finite("elementwise result")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Zero-pads the three spatial axes so a stride-1 correlation with `kernel`
    /// preserves the spatial extent. See [`same_padding`].
    pub fn pad_same(&self, kernel: (usize, usize, usize)) -> Result<Tensor> {
        let s = self.shape;
        let (ph, ph2) = same_padding(kernel.0, s.h)?;
        let (pw, pw2) = same_padding(kernel.1, s.w)?;
        let (pd, pd2) = same_padding(kernel.2, s.d)?;
        let out_shape = Shape5::new(s.n, s.h + ph + ph2, s.w + pw + pw2, s.d + pd + pd2, s.c)?;
        let mut out = Tensor::zeros(out_shape)?;
        let run = s.d * s.c;
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let src = s.index(n, h, w, 0, 0);
                    let dst = out_shape.index(n, h + ph, w + pw, pd, 0);
                    out.data[dst..dst + run].copy_from_slice(&self.data[src..src + run]);
                }
            }
        }
        Ok(out)
    }

    /// Copies depth slices `z0 .. z0 + len`.
    pub fn slice_z(&self, z0: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || z0.checked_add(len).is_none_or(|end| end > s.d) {
            return Err(Error::OutOfRange(format!("slice {z0}+{len} of depth {}", s.d)));
        }
        let out_shape = s.with_d(len);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let start = s.index(n, h, w, z0, 0);
                    data.extend_from_slice(&self.data[start..start + len * s.c]);
                }
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Rotates every `(n, d, c)` slab in-plane by `quarter_turns` × 90°.
    ///
    /// One turn maps `out[r][c] = in[size-1-c][r]`, so `[[1,2],[3,4]]` becomes
    /// `[[3,1],[4,2]]` (rows are `h`, columns are `w`).
    pub fn rot90_z(&self, quarter_turns: u8) -> Result<Tensor> {
        let s = self.shape;
        if s.h != s.w {
            return Err(Error::InvalidShape(format!("rotation needs h == w, got {s}")));
        }
        let size = s.h;
        let mut out = self.clone();
        let run = s.d * s.c;
        for _ in 0..quarter_turns % 4 {
            let prev = out.clone();
            for n in 0..s.n {
                for r in 0..size {
                    for c in 0..size {
                        let dst = s.index(n, r, c, 0, 0);
                        let src = s.index(n, size - 1 - c, r, 0, 0);
                        out.data[dst..dst + run].copy_from_slice(&prev.data[src..src + run]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Stacks batch items; all parts must agree on every axis except `n`.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(1) != first.shape.with_n(1) {
                return Err(Error::ShapeMismatch(format!("{} vs {}", p.shape, first.shape)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(first.shape.with_n(n), data)
    }

    /// Extracts batch item `i` as an `n = 1` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        if i >= self.shape.n {
            return Err(Error::OutOfRange(format!("batch item {i} of {}", self.shape.n)));
        }
        let per = self.shape.len() / self.shape.n;
        Tensor::from_vec(self.shape.with_n(1), self.data[i * per..(i + 1) * per].to_vec())
    }
}
