//! Dense column-major matrices, statistics, spectral-norm estimation, seeded
//! random streams and exact small-instance optimal transport.
//!
//! Everything is `f64`. Storage is column-major so that `vec(X)` of a
//! `d x n` hidden state is the concatenation of its token columns, which is
//! the ordering every Jacobian in this crate uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense real matrix stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from column-major data.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                op: "from_col_major",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input, which is a
    /// programming error rather than a data error.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Matrix::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let rows = cols.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(rows * cols.len());
        for c in cols {
            assert_eq!(c.len(), rows, "ragged columns");
            data.extend_from_slice(c);
        }
        Matrix {
            rows,
            cols: cols.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
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

    /// Column-major entries, i.e. `vec(self)`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        self.col_mut(j).copy_from_slice(values);
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self + c * other`, the residual update used by every block.
    pub fn add_scaled(&self, c: f64, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add_scaled", |a, b| a + c * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for j in 0..block.cols {
            for i in 0..block.rows {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Dense block-diagonal matrix assembled from square blocks.
    pub fn block_diag(blocks: &[Matrix]) -> Matrix {
        let n: usize = blocks.iter().map(|b| b.rows).sum();
        let m: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(n, m);
        let (mut r, mut c) = (0, 0);
        for b in blocks {
            out.set_block(r, c, b);
            r += b.rows;
            c += b.cols;
        }
        out
    }

    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "mat_vec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (yi, a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        Ok(y)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

/// `C = A * B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for j in 0..b.cols {
        let cj = &mut c.data[j * a.rows..(j + 1) * a.rows];
        for l in 0..a.cols {
            let blj = b.data[j * b.rows + l];
            if blj == 0.0 {
                continue;
            }
            let al = &a.data[l * a.rows..(l + 1) * a.rows];
            for (ci, &ai) in cj.iter_mut().zip(al) {
                *ci += ai * blj;
            }
        }
    }
    Ok(c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(s: &Matrix) -> Result<Matrix> {
    if !s.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_columns",
        });
    }
    let mut out = s.clone();
    for j in 0..s.cols() {
        softmax_in_place(out.col_mut(j));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Entry-wise moments of a hidden state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub frob: f64,
    pub mean_abs: f64,
    /// Unbiased variance over all entries (divisor `nd - 1`).
    pub var: f64,
}

pub fn moments(x: &Matrix) -> Result<Moments> {
    let nd = x.len();
    if nd < 2 {
        return Err(Error::undefined(
            "moments",
            format!("variance needs at least 2 entries, got {nd}"),
        ));
    }
    let n = nd as f64;
    let mean = x.as_slice().iter().sum::<f64>() / n;
    let mean_abs = x.as_slice().iter().map(|v| v.abs()).sum::<f64>() / n;
    let ss = x.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok(Moments {
        frob: x.frobenius(),
        mean_abs,
        var: ss / (n - 1.0),
    })
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// The start vector is drawn from a fixed stream so results are reproducible
/// and scale-equivariant. Iteration stops once the relative change of the
/// estimate falls below `tol`.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::undefined("spectral_norm", "empty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "spectral_norm" });
    }
    if w.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let mut rng = RngStream::new(0x5eed_5bec, 0).rng();
    let mut v: Vec<f64> = (0..w.cols()).map(|_| rng.random::<f64>() + 0.5).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let wt = w.transpose();
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let u = w.mat_vec(&v)?;
        let z = wt.mat_vec(&u)?;
        // Rayleigh quotient of WᵀW at unit v.
        let next = dot(&v, &z).max(0.0).sqrt();
        let nz = norm2(&z);
        if nz == 0.0 {
            // v landed in the null space; the start vector was unlucky.
            return Ok(next);
        }
        v = z.into_iter().map(|x| x / nz).collect();
        if sigma > 0.0 && ((next - sigma).abs() / next) < tol {
            return Ok(next);
        }
        sigma = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last: sigma,
    })
}

/// Spectral norm with the tolerances used throughout the diagnostics.
pub fn spectral_norm_default(w: &Matrix) -> Result<f64> {
    spectral_norm(w, 1e-15, 100_000)
}

/// Reproducible random stream: ChaCha8 keyed by `seed`, on stream `stream`.
///
/// Identical `(seed, stream)` pairs produce identical draws on every
/// platform; distinct stream ids give independent sequences, so parallel
/// trials can each own a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn normal_vec(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix {
        rows,
        cols,
        data: normal_vec(rng, rows * cols, std),
    }
}

/// Entry-wise `p`-norm raised to the `p`: `Σ |a - b|^p`.
fn pth_power_distance(a: &Matrix, b: &Matrix, p: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let d = (x - y).abs();
            if p == 2.0 {
                d * d
            } else if p == 1.0 {
                d
            } else {
                d.powf(p)
            }
        })
        .sum()
}

pub const MAX_OT_SAMPLES: usize = 256;

/// Exact `W_p` between two uniform empirical measures of equal size.
///
/// Ground cost between samples is `‖A_i - B_j‖_p^p` with the entry-wise
/// `p`-norm; the optimal coupling of two uniform measures with equal counts is
/// a permutation, found here with the Hungarian algorithm.
pub fn wasserstein_exact(a: &[Matrix], b: &[Matrix], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::undefined(
            "wasserstein_exact",
            format!("sample counts differ: {} vs {}", a.len(), b.len()),
        ));
    }
    if a.is_empty() {
        return Err(Error::undefined("wasserstein_exact", "empty sample sets"));
    }
    if a.len() > MAX_OT_SAMPLES {
        return Err(Error::undefined(
            "wasserstein_exact",
            format!("{} samples exceeds the cap of {MAX_OT_SAMPLES}", a.len()),
        ));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::undefined("wasserstein_exact", format!("p = {p} must be >= 1")));
    }
    let shape = a[0].shape();
    if let Some(m) = a.iter().chain(b).find(|m| m.shape() != shape) {
        return Err(Error::DimensionMismatch {
            op: "wasserstein_exact",
            left: shape,
            right: m.shape(),
        });
    }
    let n = a.len();
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| b.iter().map(|bj| pth_power_distance(ai, bj, p)).collect())
        .collect();
    let assignment = hungarian(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total / n as f64).max(0.0).powf(1.0 / p))
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `assignment[row] = column`. Shortest augmenting paths with row and
/// column potentials, `O(n³)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}

/// Largest sample count [`wasserstein_bruteforce`] accepts.
pub const MAX_BRUTEFORCE_SAMPLES: usize = 8;

/// `W_p` by enumerating every permutation (Heap's algorithm). Only for
/// cross-checking the matching on tiny clouds.
pub fn wasserstein_bruteforce(a: &[Matrix], b: &[Matrix], p: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() || a.len() > MAX_BRUTEFORCE_SAMPLES {
        return Err(Error::undefined(
            "wasserstein_bruteforce",
            format!("needs 1..={MAX_BRUTEFORCE_SAMPLES} samples per side, got {} and {}", a.len(), b.len()),
        ));
    }
    let n = a.len();
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| b.iter().map(|bj| pth_power_distance(ai, bj, p)).collect())
        .collect();
    let total = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).max(0.0).powf(1.0 / p))
}
