//! Single-processor dense kernels with operation counting.
//!
//! Every kernel takes an [`OpCount`] and adds one per scalar multiply, add,
//! divide, or square root it performs. Scalars are real; transposes stand in
//! for conjugate transposes.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Index, IndexMut, Range};

use crate::error::{Error, Result};
use crate::sim::OpCount;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// `rows × cols` identity extension: ones on the leading diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Copy of the block `rows × cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        assert!(rows.end <= self.rows && cols.end <= self.cols, "block out of range");
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (k, i) in rows.enumerate() {
            out.row_mut(k).copy_from_slice(&self.row(i)[cols.clone()]);
        }
        out
    }

    pub fn row_block(&self, rows: Range<usize>) -> Matrix {
        self.block(rows, 0..self.cols)
    }

    pub fn col_block(&self, cols: Range<usize>) -> Matrix {
        self.block(0..self.rows, cols)
    }

    /// Copies `src` into this matrix with its top-left corner at `(i, j)`.
    pub fn set_block(&mut self, i: usize, j: usize, src: &Matrix) {
        assert!(i + src.rows <= self.rows && j + src.cols <= self.cols, "block out of range");
        for k in 0..src.rows {
            self.row_mut(i + k)[j..j + src.cols].copy_from_slice(src.row(k));
        }
    }

    /// Matrix formed from the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols && !top.is_empty() && !bottom.is_empty() {
            return Err(Error::DimensionMismatch(format!("vstack of {} and {} columns", top.cols, bottom.cols)));
        }
        let cols = if top.rows > 0 { top.cols } else { bottom.cols };
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Ok(Matrix { rows: top.rows + bottom.rows, cols, data })
    }

    pub fn hstack(left: &Matrix, right: &Matrix) -> Result<Matrix> {
        if left.rows != right.rows {
            return Err(Error::DimensionMismatch(format!("hstack of {} and {} rows", left.rows, right.rows)));
        }
        let mut out = Matrix::zeros(left.rows, left.cols + right.cols);
        out.set_block(0, 0, left);
        out.set_block(0, left.cols, right);
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    /// Scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Matrix {
        let mut out = self.clone();
        for (i, s) in d.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        out
    }

    pub fn is_upper_triangular(&self) -> bool {
        (0..self.rows).all(|i| (0..i.min(self.cols)).all(|j| self[(i, j)] == 0.0))
    }

    /// Unit diagonal and exact zeros above it.
    pub fn is_unit_lower_trapezoidal(&self) -> bool {
        (0..self.rows).all(|i| {
            (i..self.cols).all(|j| if i == j { self[(i, j)] == 1.0 } else { self[(i, j)] == 0.0 })
        })
    }

    /// Keeps the upper triangle, zeroing the rest.
    pub fn upper(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if j >= i { self[(i, j)] } else { 0.0 })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Matrix> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse(format!("header must be \"rows cols\", got {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split(',') {
                let x: f64 = tok.trim().parse().map_err(|_| Error::Parse(format!("bad value {tok:?} on line {}", k + 2)))?;
                data.push(x);
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!("line {} has {} values, expected {cols}", k + 2, data.len() - before)));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Packs the upper triangle of a square matrix row by row: `n(n+1)/2` words.
pub fn pack_upper(r: &Matrix) -> Vec<f64> {
    let n = r.cols();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n.min(r.rows()) {
        out.extend_from_slice(&r.row(i)[i..]);
    }
    out
}

pub fn unpack_upper(n: usize, packed: &[f64]) -> Result<Matrix> {
    if packed.len() != n * (n + 1) / 2 {
        return Err(Error::DimensionMismatch(format!("{} packed words for n = {n}", packed.len())));
    }
    let mut r = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        r.row_mut(i)[i..].copy_from_slice(&packed[k..k + n - i]);
        k += n - i;
    }
    Ok(r)
}

/// Sign with `sgn(0) = +1`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Ops of an `I×K` by `K×J` product: `IJK` multiplies and `IJ(K−1)` adds.
pub fn mm_ops(i: usize, j: usize, k: usize) -> u64 {
    if k == 0 {
        0
    } else {
        (i * j * (2 * k - 1)) as u64
    }
}

pub fn local_mm(a: &Matrix, b: &Matrix, ops: &mut OpCount) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (cij, bkj) in crow.iter_mut().zip(b.row(k)) {
                *cij += aik * bkj;
            }
        }
    }
    ops.add(mm_ops(a.rows, b.cols, a.cols));
    Ok(c)
}

/// `Aᵀ·B` without forming `Aᵀ`.
pub fn local_mm_tn(a: &Matrix, b: &Matrix, ops: &mut OpCount) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch(format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for (cij, bkj) in crow.iter_mut().zip(brow) {
                *cij += aki * bkj;
            }
        }
    }
    ops.add(mm_ops(a.cols, b.cols, a.rows));
    Ok(c)
}

/// Elementwise `A − B`, counted.
pub fn local_sub(a: &Matrix, b: &Matrix, ops: &mut OpCount) -> Result<Matrix> {
    let c = a.sub(b)?;
    ops.add(c.len() as u64);
    Ok(c)
}

/// `Q = I − V·T·Vᵀ` with unit-lower-trapezoidal `V` (`m×n`), upper-triangular
/// `T`, and upper-triangular `R` (`n×n`) such that `A = Q·[R; 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholderFactors {
    pub v: Matrix,
    pub t: Matrix,
    pub r: Matrix,
}

impl HouseholderFactors {
    /// The first `k` columns of `Q`, i.e. `Q·I_{m×k}`.
    pub fn q_columns(&self, k: usize) -> Result<Matrix> {
        apply_q_block(&self.v, &self.t, &Matrix::eye(self.v.rows(), k), false, &mut OpCount::default())
    }

    /// `Q·[R; 0]`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let m = self.v.rows();
        let mut rr = Matrix::zeros(m, self.r.cols());
        rr.set_block(0, 0, &self.r);
        apply_q_block(&self.v, &self.t, &rr, false, &mut OpCount::default())
    }
}

/// Householder QR of an `m×n` matrix, `m ≥ n`. Every column is reflected:
/// `τ = 2/(vᵀv)`, `v₀ = 1`, `β = −sgn(α)·‖x‖`. An all-zero column yields
/// `v = e_j` and `τ = 2`. The kernel `T` is built by the forward recurrence.
pub fn local_householder_qr(a: &Matrix, ops: &mut OpCount) -> Result<HouseholderFactors> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Precondition(format!("QR needs rows >= cols, got {m}x{n}")));
    }
    let mut w = a.clone();
    let mut v = Matrix::zeros(m, n);
    let mut taus = vec![0.0; n];
    let mut vj = vec![0.0; m];
    let mut acc = vec![0.0; n];
    for j in 0..n {
        let alpha = w[(j, j)];
        let tail: f64 = (j + 1..m).map(|i| w[(i, j)] * w[(i, j)]).sum();
        let norm = (alpha * alpha + tail).sqrt();
        ops.add(2 * (m - j) as u64 + 1);
        let beta = -sgn(alpha) * norm;
        let denom = alpha - beta;
        vj[j] = 1.0;
        let mut vtv = 1.0;
        for i in j + 1..m {
            vj[i] = if denom != 0.0 { w[(i, j)] / denom } else { 0.0 };
            vtv += vj[i] * vj[i];
        }
        ops.add(3 * (m - j - 1) as u64 + 2);
        let tau = 2.0 / vtv;
        taus[j] = tau;
        for i in j..m {
            v[(i, j)] = vj[i];
        }
        // w[j.., j+1..] -= tau v (vᵀ w[j.., j+1..])
        let rest = n - j - 1;
        if rest > 0 {
            let acc = &mut acc[..rest];
            acc.iter_mut().for_each(|x| *x = 0.0);
            for i in j..m {
                let vi = vj[i];
                for (s, x) in acc.iter_mut().zip(&w.row(i)[j + 1..]) {
                    *s += vi * x;
                }
            }
            acc.iter_mut().for_each(|s| *s *= tau);
            for i in j..m {
                let vi = vj[i];
                for (x, s) in w.row_mut(i)[j + 1..].iter_mut().zip(acc.iter()) {
                    *x -= vi * s;
                }
            }
            ops.add((rest * (4 * (m - j) + 1)) as u64);
        }
        w[(j, j)] = beta;
        for i in j + 1..m {
            w[(i, j)] = 0.0;
        }
    }
    let t = larft(&v, &taus, ops);
    let r = w.row_block(0..n).upper();
    Ok(HouseholderFactors { v, t, r })
}

/// Forward recurrence: `T[0..j, j] = −τ_j · T[0..j, 0..j] · V[:, 0..j]ᵀ v_j`.
fn larft(v: &Matrix, taus: &[f64], ops: &mut OpCount) -> Matrix {
    let (m, n) = v.shape();
    let mut t = Matrix::zeros(n, n);
    let mut z = vec![0.0; n];
    for j in 0..n {
        t[(j, j)] = taus[j];
        if j == 0 {
            continue;
        }
        for (k, zk) in z[..j].iter_mut().enumerate() {
            *zk = (j..m).map(|i| v[(i, k)] * v[(i, j)]).sum();
        }
        ops.add((j * (2 * (m - j) - 1)) as u64);
        for i in 0..j {
            let s: f64 = (i..j).map(|k| t[(i, k)] * z[k]).sum();
            t[(i, j)] = -taus[j] * s;
        }
        ops.add((j * (j + 1) + j) as u64);
    }
    t
}

/// `T` with `T⁻¹ = strict-upper(VᵀV) + diag(VᵀV)/2`.
pub fn kernel_from_basis(v: &Matrix, ops: &mut OpCount) -> Result<Matrix> {
    let (m, n) = v.shape();
    if m < n {
        return Err(Error::Precondition(format!("basis needs rows >= cols, got {m}x{n}")));
    }
    let g = local_mm_tn(v, v, ops)?;
    let tinv = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => g[(i, j)],
        std::cmp::Ordering::Equal => g[(i, i)] / 2.0,
        std::cmp::Ordering::Greater => 0.0,
    });
    ops.add(n as u64);
    tri_solve(&tinv, &Matrix::identity(n), TriSolve::LEFT_UPPER, ops)
}

/// Result of [`signed_lu`]: `X + diag(s) = L·U`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedLu {
    pub l: Matrix,
    pub u: Matrix,
    pub s: Vec<f64>,
    /// `min_j min_{i>j} |X̂_jj + S_jj| − |X̂_ij|` over the elimination;
    /// non-negative when no pivoting is needed.
    pub min_pivot_slack: f64,
}

/// Unpivoted LU of `X + S` where `S_jj = sgn(X̂_jj)` is chosen column by column.
pub fn signed_lu(x: &Matrix, ops: &mut OpCount) -> Result<SignedLu> {
    let n = x.rows();
    if x.cols() != n {
        return Err(Error::DimensionMismatch(format!("signed LU needs a square matrix, got {}x{}", x.rows(), x.cols())));
    }
    let mut a = x.clone();
    let mut s = vec![0.0; n];
    let mut slack = f64::INFINITY;
    for j in 0..n {
        let d = a[(j, j)];
        s[j] = sgn(d);
        a[(j, j)] = d + s[j];
        ops.add(1);
        let piv = a[(j, j)];
        for i in j + 1..n {
            slack = slack.min(piv.abs() - a[(i, j)].abs());
        }
        for i in j + 1..n {
            let lij = a[(i, j)] / piv;
            a[(i, j)] = lij;
            for k in j + 1..n {
                let u = a[(j, k)];
                a[(i, k)] -= lij * u;
            }
        }
        let rest = (n - j - 1) as u64;
        ops.add(rest + 2 * rest * rest);
    }
    let l = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => a[(i, j)],
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => 0.0,
    });
    let u = a.upper();
    Ok(SignedLu { l, u, s, min_pivot_slack: if n > 1 { slack } else { 0.0 } })
}

/// `(I − V·op(T)·Vᵀ)·B`, evaluated right to left, with `op(T) = Tᵀ` when
/// `transpose_kernel` is set.
pub fn apply_q_block(v: &Matrix, t: &Matrix, b: &Matrix, transpose_kernel: bool, ops: &mut OpCount) -> Result<Matrix> {
    let m1 = local_mm_tn(v, b, ops)?;
    let m2 = if transpose_kernel { local_mm_tn(t, &m1, ops)? } else { local_mm(t, &m1, ops)? };
    let m3 = local_mm(v, &m2, ops)?;
    local_sub(b, &m3, ops)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Solve `op(T)·X = B`.
    Left,
    /// Solve `X·op(T) = B`.
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Uplo {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Diag {
    Unit,
    NonUnit,
}

/// Flags for [`tri_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TriSolve {
    pub side: Side,
    pub uplo: Uplo,
    pub transpose: bool,
    pub diag: Diag,
}

impl TriSolve {
    pub const LEFT_UPPER: TriSolve = TriSolve { side: Side::Left, uplo: Uplo::Upper, transpose: false, diag: Diag::NonUnit };
    pub const RIGHT_UPPER: TriSolve = TriSolve { side: Side::Right, uplo: Uplo::Upper, transpose: false, diag: Diag::NonUnit };

    pub fn new(side: Side, uplo: Uplo, transpose: bool, diag: Diag) -> Self {
        TriSolve { side, uplo, transpose, diag }
    }
}

/// Solves a triangular system; only the indicated triangle of `t` is read.
/// Logs `n²` ops per right-hand side (`n(n−1)` with a unit diagonal).
pub fn tri_solve(t: &Matrix, b: &Matrix, flags: TriSolve, ops: &mut OpCount) -> Result<Matrix> {
    let n = t.rows();
    if t.cols() != n {
        return Err(Error::DimensionMismatch(format!("triangular factor is {}x{}", t.rows(), t.cols())));
    }
    let conformal = match flags.side {
        Side::Left => b.rows() == n,
        Side::Right => b.cols() == n,
    };
    if !conformal {
        return Err(Error::DimensionMismatch(format!("{n}x{n} triangle against {}x{} right-hand side", b.rows(), b.cols())));
    }
    let unit = flags.diag == Diag::Unit;
    if !unit {
        if let Some(i) = (0..n).find(|&i| t[(i, i)] == 0.0) {
            return Err(Error::SingularTriangular(i));
        }
    }
    // Reduce to op(M)·X = B' on the left, with M lower or upper.
    let tt = |i: usize, j: usize| if flags.transpose { t[(j, i)] } else { t[(i, j)] };
    let mut eff_upper = (flags.uplo == Uplo::Upper) != flags.transpose;
    let m = match flags.side {
        Side::Left => Matrix::from_fn(n, n, tt),
        Side::Right => {
            eff_upper = !eff_upper;
            Matrix::from_fn(n, n, |i, j| tt(j, i))
        }
    };
    let mut x = match flags.side {
        Side::Left => b.clone(),
        Side::Right => b.transpose(),
    };
    let order: Vec<usize> = if eff_upper { (0..n).rev().collect() } else { (0..n).collect() };
    let k = x.cols();
    for &i in &order {
        let range = if eff_upper { i + 1..n } else { 0..i };
        for j in range {
            let mij = m[(i, j)];
            if mij != 0.0 {
                let (xi, xj) = if i < j {
                    let (a, b) = x.data.split_at_mut(j * k);
                    (&mut a[i * k..(i + 1) * k], &b[..k])
                } else {
                    let (a, b) = x.data.split_at_mut(i * k);
                    (&mut b[..k], &a[j * k..(j + 1) * k])
                };
                for (p, q) in xi.iter_mut().zip(xj) {
                    *p -= mij * q;
                }
            }
        }
        if !unit {
            let d = m[(i, i)];
            x.row_mut(i).iter_mut().for_each(|p| *p /= d);
        }
    }
    let per_rhs = if unit { n * n.saturating_sub(1) } else { n * n };
    ops.add((per_rhs * k) as u64);
    Ok(match flags.side {
        Side::Left => x,
        Side::Right => x.transpose(),
    })
}
