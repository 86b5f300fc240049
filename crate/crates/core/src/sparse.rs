//! Compressed sparse row storage shared by assembly and the solvers.

use std::fmt::Debug;
use std::io::Write;

use num_complex::Complex64;
use num_traits::NumAssign;

use crate::error::{Error, Result};

/// Field scalars the solvers work over: `f64`, or `Complex64` for shifted
/// resolvent systems. Complex matrices are treated as complex *symmetric*
/// (never conjugated).
pub trait Scalar: NumAssign + Copy + Debug + Send + Sync + PartialEq + std::ops::Neg<Output = Self> + 'static {
    fn from_real(x: f64) -> Self;
    fn modulus(self) -> f64;
    fn conj(self) -> Self;
    fn is_finite(self) -> bool;
    fn real(self) -> f64;
    fn imag(self) -> f64;
}

impl Scalar for f64 {
    fn from_real(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn conj(self) -> Self {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn real(self) -> f64 {
        self
    }
    fn imag(self) -> f64 {
        0.0
    }
}

impl Scalar for Complex64 {
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn real(self) -> f64 {
        self.re
    }
    fn imag(self) -> f64 {
        self.im
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    Symmetric,
    General,
}

/// Coordinate-format accumulator. Duplicates are summed on conversion.
#[derive(Debug, Clone)]
pub struct Triplets<T> {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> Triplets<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new() }
    }

    pub fn with_capacity(rows: usize, cols: usize, cap: usize) -> Self {
        Self { rows, cols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        self.entries.push((i, j, v));
    }

    pub fn extend_from(&mut self, other: &Triplets<T>, row_offset: usize, col_offset: usize) {
        for &(i, j, v) in &other.entries {
            self.push(i + row_offset, j + col_offset, v);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sort and sum duplicates. The summation order for each `(i, j)` is the
    /// insertion order, so the result is deterministic.
    pub fn into_csr(self, symmetry: Symmetry) -> CsrMatrix<T> {
        let mut counts = vec![0usize; self.rows + 1];
        for &(i, _, _) in &self.entries {
            counts[i + 1] += 1;
        }
        for r in 0..self.rows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut tmp: Vec<(usize, T)> = vec![(0, T::zero()); self.entries.len()];
        for &(i, j, v) in &self.entries {
            tmp[next[i]] = (j, v);
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len());
        row_ptr.push(0);
        for r in 0..self.rows {
            let seg = &mut tmp[counts[r]..counts[r + 1]];
            // stable sort keeps insertion order among duplicates
            seg.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < seg.len() {
                let c = seg[k].0;
                let mut acc = seg[k].1;
                k += 1;
                while k < seg.len() && seg[k].0 == c {
                    acc += seg[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(acc);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { rows: self.rows, cols: self.cols, row_ptr, col_idx, values, symmetry }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<T>,
    pub symmetry: Symmetry,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn zeros(rows: usize, cols: usize, symmetry: Symmetry) -> Self {
        Self { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new(), symmetry }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[a..b].binary_search(&j) {
            Ok(p) => self.values[a + p],
            Err(_) => T::zero(),
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for (j, v) in self.row(i) {
                    acc += v * x[j];
                }
                acc
            })
            .collect()
    }

    /// `y = A^T x`.
    pub fn mul_vec_transpose(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix<T> {
        let mut t = Triplets::with_capacity(self.cols, self.rows, self.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                t.push(j, i, v);
            }
        }
        t.into_csr(self.symmetry)
    }

    pub fn to_triplets(&self) -> Triplets<T> {
        let mut t = Triplets::with_capacity(self.rows, self.cols, self.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                t.push(i, j, v);
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.modulus()).fold(0.0, f64::max)
    }

    /// `max |A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).modulus());
            }
        }
        worst
    }

    /// `x^T A y` without conjugation.
    pub fn bilinear(&self, x: &[T], y: &[T]) -> T {
        let ay = self.mul_vec(y);
        let mut acc = T::zero();
        for (a, b) in x.iter().zip(&ay) {
            acc += *a * *b;
        }
        acc
    }

    /// Linear combination `alpha * self + beta * other` on the union pattern.
    pub fn combine(&self, alpha: T, other: &CsrMatrix<T>, beta: T) -> Result<CsrMatrix<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch { expected: self.rows, got: other.rows });
        }
        let mut t = Triplets::with_capacity(self.rows, self.cols, self.nnz() + other.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                t.push(i, j, alpha * v);
            }
            for (j, v) in other.row(i) {
                t.push(i, j, beta * v);
            }
        }
        let sym = if self.symmetry == Symmetry::Symmetric && other.symmetry == Symmetry::Symmetric {
            Symmetry::Symmetric
        } else {
            Symmetry::General
        };
        Ok(t.into_csr(sym))
    }

    /// Write in Matrix Market coordinate format (general storage).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        let complex = std::any::TypeId::of::<T>() == std::any::TypeId::of::<Complex64>();
        let field = if complex { "complex" } else { "real" };
        writeln!(w, "%%MatrixMarket matrix coordinate {field} general")?;
        writeln!(w, "{} {} {}", self.rows, self.cols, self.nnz())?;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                if complex {
                    writeln!(w, "{} {} {:.17e} {:.17e}", i + 1, j + 1, v.real(), v.imag())?;
                } else {
                    writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v.real())?;
                }
            }
        }
        Ok(())
    }
}

impl CsrMatrix<f64> {
    pub fn to_complex(&self) -> CsrMatrix<Complex64> {
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            symmetry: self.symmetry,
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                d[(i, j)] += v;
            }
        }
        d
    }
}

/// Read a real Matrix Market coordinate file as written by [`CsrMatrix::write_matrix_market`].
pub fn read_matrix_market(text: &str) -> Result<CsrMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('%') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty matrix market file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad size line `{header}`"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Parse(format!("bad size line `{header}`")));
    }
    let mut t = Triplets::new(dims[0], dims[1]);
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(Error::Parse(format!("bad entry `{line}`")));
        }
        let i: usize = parts[0].parse().map_err(|_| Error::Parse(format!("bad entry `{line}`")))?;
        let j: usize = parts[1].parse().map_err(|_| Error::Parse(format!("bad entry `{line}`")))?;
        let v: f64 = parts[2].parse().map_err(|_| Error::Parse(format!("bad entry `{line}`")))?;
        t.push(i - 1, j - 1, v);
    }
    Ok(t.into_csr(Symmetry::General))
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn norm_inf<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|v| v.modulus()).fold(0.0, f64::max)
}

pub fn norm2<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|v| v.modulus().powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_in_order() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(0, 0, 2.0);
        t.push(0, 1, 3.0);
        t.push(1, 1, -1.0);
        let a = t.into_csr(Symmetry::General);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 1), 4.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.mul_vec(&[1.0, 1.0]), vec![6.0, -1.0]);
        assert_eq!(a.mul_vec_transpose(&[1.0, 1.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn matrix_market_round_trip() {
        let mut t = Triplets::new(3, 2);
        t.push(0, 0, 1.5);
        t.push(2, 1, -2.25e-7);
        let a = t.into_csr(Symmetry::General);
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let b = read_matrix_market(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.col_idx, b.col_idx);
    }
}
