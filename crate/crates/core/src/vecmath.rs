//! Dense vector primitives.
//!
//! [`Vector`] is a non-empty, contiguous vector whose entries are always
//! finite: every constructor and every operation that can produce a new value
//! checks this, so functions that only read a `Vector` cannot fail.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Vector<T> {
    data: Vec<T>,
}

/// Which norm [`norm`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

impl<T: Scalar> Vector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyVector);
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn from_f64(data: &[f64]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::lit(x)).collect())
    }

    /// # Panics
    /// If `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector dimension must be at least 1");
        Self { data: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Applies `f` componentwise, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.data.iter().map(|&x| f(x)).collect())
    }

    /// Applies `f` to aligned pairs of components.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_same_dim(self, other)?;
        Self::new(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| x.is_zero())
    }

    pub fn norm(&self, kind: NormKind) -> T {
        norm(self, kind)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;

    fn index(&self, j: usize) -> &T {
        &self.data[j]
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for Vector<T> {
    type Error = Error;

    fn try_from(data: Vec<T>) -> Result<Self> {
        Self::new(data)
    }
}

impl<T> From<Vector<T>> for Vec<T> {
    fn from(v: Vector<T>) -> Vec<T> {
        v.data
    }
}

fn check_finite<T: Scalar>(data: &[T]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn ensure_same_dim<T>(x: &Vector<T>, y: &Vector<T>) -> Result<()> {
    if x.data.len() != y.data.len() {
        return Err(Error::DimensionMismatch { expected: x.data.len(), found: y.data.len() });
    }
    Ok(())
}

/// Sign of a scalar with `sign(0) = 0`. Negative zero also maps to `+0`.
#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Componentwise sign. Exact zeros stay zero; there is no tolerance band.
pub fn sign_vec<T: Scalar>(v: &Vector<T>) -> Vector<T> {
    Vector { data: v.data.iter().map(|&x| sign(x)).collect() }
}

/// Norms are accumulated left to right so results are reproducible bit for bit.
pub fn norm<T: Scalar>(v: &Vector<T>, kind: NormKind) -> T {
    match kind {
        NormKind::L1 => v.data.iter().fold(T::zero(), |acc, x| acc + x.abs()),
        NormKind::L2 => v.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt(),
        NormKind::Linf => v.data.iter().fold(T::zero(), |acc, x| acc.max(x.abs())),
    }
}

/// Smallest magnitude among the nonzero components, or `None` when every
/// component is exactly zero.
pub fn min_abs_nonzero<T: Scalar>(v: &Vector<T>) -> Option<T> {
    v.data.iter().filter(|x| !x.is_zero()).map(|x| x.abs()).fold(None, |acc, x| Some(acc.map_or(x, |m: T| m.min(x))))
}

/// `a·x + b·y`.
pub fn combine<T: Scalar>(a: T, x: &Vector<T>, b: T, y: &Vector<T>) -> Result<Vector<T>> {
    x.zip_map(y, |xi, yi| a * xi + b * yi)
}

pub fn dot<T: Scalar>(x: &Vector<T>, y: &Vector<T>) -> Result<T> {
    ensure_same_dim(x, y)?;
    Ok(x.data.iter().zip(&y.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
}

pub fn sub<T: Scalar>(x: &Vector<T>, y: &Vector<T>) -> Result<Vector<T>> {
    x.zip_map(y, |a, b| a - b)
}

/// `‖x − y‖` without allocating.
pub fn distance<T: Scalar>(x: &Vector<T>, y: &Vector<T>, kind: NormKind) -> Result<T> {
    ensure_same_dim(x, y)?;
    let diffs = x.data.iter().zip(&y.data).map(|(&a, &b)| (a - b).abs());
    Ok(match kind {
        NormKind::L1 => diffs.fold(T::zero(), |acc, d| acc + d),
        NormKind::L2 => diffs.fold(T::zero(), |acc, d| acc + d * d).sqrt(),
        NormKind::Linf => diffs.fold(T::zero(), |acc, d| acc.max(d)),
    })
}
