//! Plain generic matrices for the non-differentiable kernels.
//!
//! The attention kernels run at both `f32` and `f64`; this module gives them
//! a small row-major matrix plus the three GEMM shapes they need. Every GEMM
//! accumulates in `f64` and reports its multiply count to a thread-local
//! counter so scaling claims can be checked by counting instead of timing.

use std::cell::Cell;
use std::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` to this thread's multiply counter.
#[inline]
pub fn count_muls(n: u64) {
    MULS.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn mul_count() -> u64 {
    MULS.with(|c| c.get())
}

pub fn reset_mul_count() {
    MULS.with(|c| c.set(0));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.rows, len, |i, j| self.at(i, start + j))
    }

    /// Appends a column of ones (the normalizer trick for linear attention).
    pub fn with_ones_col(&self) -> Self {
        Self::from_fn(self.rows, self.cols + 1, |i, j| {
            if j < self.cols {
                self.at(i, j)
            } else {
                T::one()
            }
        })
    }

    pub fn convert<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner extent");
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
        );
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner extent");
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_nt(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            &other.data,
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn inner extent");
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_tn(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
        );
        out
    }

    /// Largest `|a - b| / max(|b|, floor)` over all entries.
    pub fn max_rel_diff(&self, reference: &Self, floor: f64) -> f64 {
        assert_eq!(self.data.len(), reference.data.len());
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs() / b.f64().abs().max(floor))
            .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
    }

    pub fn max_abs_diff(&self, reference: &Self) -> f64 {
        assert_eq!(self.data.len(), reference.data.len());
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`, overwriting `out`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    count_muls((m * k * n) as u64);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let aip = aip.f64();
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv.f64();
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of(*s);
        }
    }
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`, overwriting `out`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    count_muls((m * k * n) as u64);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = T::of(dot(arow, &b[j * k..(j + 1) * k]));
        }
    }
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`, overwriting `out`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    count_muls((m * k * n) as u64);
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let api = api.f64();
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += api * bv.f64();
            }
        }
    }
    for (o, s) in out.iter_mut().zip(&acc) {
        *o = T::of(*s);
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    // four lanes so the f64 sum vectorizes
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += a[c * 4 + l].f64() * b[c * 4 + l].f64();
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].f64() * b[i].f64();
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}
