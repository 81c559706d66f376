//! Rank-4 dense tensors in (batch, channel, height, width) order.

use std::fmt::{self, Debug};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{bail, Result};

/// Scalar element type. Implemented for `f32` (training and inference) and
/// `f64` (gradient verification).
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Element type tag, shared with the on-disk container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Tensor extent in (N, C, H, W) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    /// Shape of a per-channel vector stored as `[1, c, 1, 1]`.
    pub const fn vector(c: usize) -> Self {
        Shape([1, c, 1, 1])
    }
    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }
    #[inline]
    pub fn hw(&self) -> usize {
        self.0[2] * self.0[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![S::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Tensor { shape, data: vec![v; shape.numel()] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            bail!(Dimension, "shape {shape} needs {} values, got {}", shape.numel(), data.len());
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` literals; convenient in tests.
    pub fn from_f64s(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<S> {
        self.data
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + h) * ws + w
    }
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous `H*W` plane of one (n, c) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape.hw();
        let off = (n * self.shape.c() + c) * hw;
        &self.data[off..off + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            bail!(Dimension, "cannot reshape {} into {shape}", self.shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "{what}: element {i} of {} is {:?}", self.shape, self.data[i]);
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            bail!(Dimension, "{op}: shapes {} and {} differ", self.shape, other.shape);
        }
        Ok(())
    }

    /// Converts between scalar types.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect() }
    }

    /// Copies batch item `n` into a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<S> {
        let per = self.shape.numel() / self.shape.n().max(1);
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks `[1, C, H, W]` tensors (or any equal shapes) along the batch axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let Some(first) = items.first() else {
            bail!(Dimension, "stack of zero tensors");
        };
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        for t in items {
            if t.shape.0[1..] != s.0[1..] {
                bail!(Dimension, "stack: {} vs {}", t.shape, s);
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n()).sum();
        Ok(Tensor { shape: Shape::new(n, s.c(), s.h(), s.w()), data })
    }
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor({}, {:?}{})", self.shape, head, if self.data.len() > 8 { ", .." } else { "" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 8]).unwrap();
        assert_eq!(t.numel(), 8);
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f64>::from_vec(Shape::new(2, 3, 4, 5), (0..120).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
    }

    #[test]
    fn ensure_finite_reports_nan() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 1, 1), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 1, 1));
        assert_eq!(s.batch_item(1), b);
    }
}
