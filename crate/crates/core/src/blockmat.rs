//! Dense matrix utilities for the network analysis: vectorization, Kronecker
//! and Khatri-Rao products, commutation matrices, block-diagonal assembly,
//! weighted and block-maximum norms, spectral radius.
//!
//! Everything is real-valued and column-major (`vec` stacks columns), which
//! is also nalgebra's storage order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Dimension below which `spectral_radius` runs a full eigensolve.
pub const FULL_EIGEN_LIMIT: usize = 512;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Block sizes along one axis of a partitioned matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl Partition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "partition block {i} has size 0"
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// `n` blocks of size one.
    pub fn unit(n: usize) -> Self {
        Self::new(vec![1; n]).expect("unit sizes are positive")
    }

    /// A single block covering `n` entries.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Per-node block descriptors of the network error stacking.
///
/// Node `k` contributes its blocks in order: global, each common block of
/// interest in increasing cluster index, local. Zero-sized blocks are kept so
/// block indices stay aligned with the interest layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    node_blocks: Vec<Vec<usize>>,
}

impl BlockLayout {
    pub fn new(node_blocks: Vec<Vec<usize>>) -> Self {
        Self { node_blocks }
    }

    pub fn nodes(&self) -> usize {
        self.node_blocks.len()
    }

    pub fn node_blocks(&self, k: usize) -> &[usize] {
        &self.node_blocks[k]
    }

    pub fn node_dim(&self, k: usize) -> usize {
        self.node_blocks[k].iter().sum()
    }

    pub fn total_dim(&self) -> usize {
        self.node_blocks.iter().flatten().sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.node_blocks.iter().map(Vec::len).sum()
    }

    /// Node-level partition of the stacked vector.
    pub fn node_partition(&self) -> Result<Partition> {
        Partition::new((0..self.nodes()).map(|k| self.node_dim(k)).collect())
    }

    /// Block-level partition, skipping empty blocks.
    pub fn block_partition(&self) -> Result<Partition> {
        Partition::new(
            self.node_blocks
                .iter()
                .flatten()
                .copied()
                .filter(|&s| s > 0)
                .collect(),
        )
    }
}

/// Column-major vectorization.
pub fn vectorize(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::dim("unvectorize", rows * cols, v.len()));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ma, na) = a.shape();
    let (mb, nb) = b.shape();
    let mut out = Mat::zeros(ma * mb, na * nb);
    for j in 0..na {
        for i in 0..ma {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            let mut blk = out.view_mut((i * mb, j * nb), (mb, nb));
            blk.zip_apply(b, |o, x| *o = s * x);
        }
    }
    out
}

/// `(A ⊗ B) · Y` without forming the Kronecker product.
///
/// Column `c` of `Y` is reshaped to `Y_c` (cols(B) × cols(A)) and mapped to
/// `vec(B · Y_c · Aᵀ)`.
pub fn kron_mul(a: &Mat, b: &Mat, y: &Mat) -> Result<Mat> {
    let (ma, na) = a.shape();
    let (mb, nb) = b.shape();
    if y.nrows() != na * nb {
        return Err(Error::dim("kron_mul", na * nb, y.nrows()));
    }
    let at = a.transpose();
    let mut out = Mat::zeros(ma * mb, y.ncols());
    for c in 0..y.ncols() {
        let yc = Mat::from_column_slice(nb, na, y.column(c).as_slice());
        let r = b * yc * &at;
        out.column_mut(c).copy_from_slice(r.as_slice());
    }
    Ok(out)
}

/// `Y · (A ⊗ B)` without forming the Kronecker product.
pub fn mul_kron(y: &Mat, a: &Mat, b: &Mat) -> Result<Mat> {
    let yt = y.transpose();
    Ok(kron_mul(&a.transpose(), &b.transpose(), &yt)?.transpose())
}

/// The `mn × mn` permutation with `K vec(A) = vec(Aᵀ)` for every `m × n` matrix `A`.
pub fn commutation_matrix(m: usize, n: usize) -> Result<Mat> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "commutation matrix needs positive dimensions, got ({m}, {n})"
        )));
    }
    let mut k = Mat::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            // A[i,j] sits at i + j*m in vec(A) and at j + i*n in vec(Aᵀ).
            k[(j + i * n, i + j * m)] = 1.0;
        }
    }
    Ok(k)
}

/// Blockwise Kronecker product `(A_ij ⊗ B_ij)_ij` over matched partitions.
pub fn khatri_rao(
    a: &Mat,
    b: &Mat,
    rows_a: &Partition,
    cols_a: &Partition,
    rows_b: &Partition,
    cols_b: &Partition,
) -> Result<Mat> {
    if rows_a.len() != rows_b.len() {
        return Err(Error::dim(
            "khatri_rao row blocks",
            rows_a.len(),
            rows_b.len(),
        ));
    }
    if cols_a.len() != cols_b.len() {
        return Err(Error::dim(
            "khatri_rao column blocks",
            cols_a.len(),
            cols_b.len(),
        ));
    }
    if a.nrows() != rows_a.total() || a.ncols() != cols_a.total() {
        return Err(Error::InvalidArgument(format!(
            "partition of A covers {}x{}, matrix is {}x{}",
            rows_a.total(),
            cols_a.total(),
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != rows_b.total() || b.ncols() != cols_b.total() {
        return Err(Error::InvalidArgument(format!(
            "partition of B covers {}x{}, matrix is {}x{}",
            rows_b.total(),
            cols_b.total(),
            b.nrows(),
            b.ncols()
        )));
    }

    let out_rows: Vec<usize> = (0..rows_a.len())
        .map(|i| rows_a.sizes()[i] * rows_b.sizes()[i])
        .collect();
    let out_cols: Vec<usize> = (0..cols_a.len())
        .map(|j| cols_a.sizes()[j] * cols_b.sizes()[j])
        .collect();
    let row_part = Partition::new(out_rows)?;
    let col_part = Partition::new(out_cols)?;

    let mut out = Mat::zeros(row_part.total(), col_part.total());
    for i in 0..rows_a.len() {
        for j in 0..cols_a.len() {
            let ra = rows_a.range(i);
            let ca = cols_a.range(j);
            let rb = rows_b.range(i);
            let cb = cols_b.range(j);
            let aij = a
                .view((ra.start, ca.start), (ra.len(), ca.len()))
                .clone_owned();
            let bij = b
                .view((rb.start, cb.start), (rb.len(), cb.len()))
                .clone_owned();
            let blk = kron(&aij, &bij);
            let r = row_part.range(i);
            let c = col_part.range(j);
            out.view_mut((r.start, c.start), (r.len(), c.len()))
                .copy_from(&blk);
        }
    }
    Ok(out)
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `‖x‖²_Σ = xᵀ Σ x`.
pub fn weighted_sq_norm(x: &Vector, sigma: &Mat) -> Result<f64> {
    if sigma.nrows() != x.len() || sigma.ncols() != x.len() {
        return Err(Error::dim("weighted_sq_norm", x.len(), sigma.nrows()));
    }
    Ok(x.dot(&(sigma * x)))
}

/// Largest Euclidean norm over the blocks of `layout`.
pub fn block_max_norm(x: &Vector, layout: &BlockLayout) -> Result<f64> {
    if x.len() != layout.total_dim() {
        return Err(Error::dim("block_max_norm", layout.total_dim(), x.len()));
    }
    let mut best: f64 = 0.0;
    let mut off = 0;
    for &size in layout.node_blocks.iter().flatten() {
        best = best.max(x.rows(off, size).norm());
        off += size;
    }
    Ok(best)
}

/// Largest eigenvalue magnitude.
///
/// Full Schur eigensolve below [`FULL_EIGEN_LIMIT`], power iteration above
/// (or if the Schur iteration does not converge).
pub fn spectral_radius(a: &Mat) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::dim("spectral_radius", a.nrows(), a.ncols()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    if n < FULL_EIGEN_LIMIT {
        if let Some(schur) = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 100 * n) {
            let eig = schur.complex_eigenvalues();
            return Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Ok(power_radius(a))
}

/// Power iteration on `a`. Uses the two-step growth `sqrt(‖A²x‖)` so a
/// dominant pair `±λ` still converges.
fn power_radius(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut x = Vector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    x /= x.norm();
    let mut prev_growth = 0.0;
    let mut prev_est = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let y = a * &x;
        let growth = y.norm();
        if growth == 0.0 {
            return 0.0;
        }
        let est = if prev_growth > 0.0 {
            (growth * prev_growth).sqrt()
        } else {
            growth
        };
        if (est - prev_est).abs() <= POWER_TOL * est {
            return est;
        }
        prev_est = est;
        prev_growth = growth;
        x = y / growth;
    }
    prev_est
}

/// Symmetric factor `B` with `B Bᵀ = S` for a symmetric PSD matrix.
///
/// Eigenvalues down to `-1e-10 · max|λ|` are clipped to zero; anything more
/// negative is rejected.
pub fn psd_factor(s: &Mat) -> Result<Mat> {
    if !s.is_square() {
        return Err(Error::dim("psd_factor", s.nrows(), s.ncols()));
    }
    let n = s.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&root) * eig.eigenvectors.transpose())
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}
