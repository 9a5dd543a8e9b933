//! Block-structured linear algebra over `X = X_1 × … × X_K`.
//!
//! Everything is stored densely as a full `q × q` matrix (or `q`-vector);
//! blocks are views computed from the structure's offsets. Block indices are
//! zero-based throughout the crate.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MslcaError, Result};

/// Default relative floor on `λ_min / λ_max` below which a matrix is treated
/// as singular.
pub const DEFAULT_COND_FLOOR: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;
const EIG_MAX_ITER: usize = 10_000;

/// Dimensions `(p_1, …, p_K)` of the component spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockStructure {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockStructure {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(MslcaError::InvalidStructure(format!(
                "need at least 2 blocks, got {}",
                dims.len()
            )));
        }
        if let Some(k) = dims.iter().position(|&p| p == 0) {
            return Err(MslcaError::InvalidStructure(format!(
                "block {} has dimension 0",
                k + 1
            )));
        }
        let offsets = dims
            .iter()
            .scan(0, |acc, &p| {
                let start = *acc;
                *acc += p;
                Some(start)
            })
            .collect();
        Ok(Self { dims, offsets })
    }

    /// Number of blocks `K`.
    pub fn k(&self) -> usize {
        self.dims.len()
    }

    /// Total dimension `q = Σ p_k`.
    pub fn q(&self) -> usize {
        self.offsets[self.k() - 1] + self.dims[self.k() - 1]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Row range occupied by block `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.dims[k]
    }

    /// Block that owns global coordinate `index`.
    pub fn block_of(&self, index: usize) -> usize {
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    fn check_pair(&self, k: usize, l: usize) -> Result<()> {
        if k >= self.k() || l >= self.k() {
            return Err(MslcaError::BlockIndex {
                k,
                l,
                blocks: self.k(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for BlockStructure {
    type Error = MslcaError;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<BlockStructure> for Vec<usize> {
    fn from(s: BlockStructure) -> Self {
        s.dims
    }
}

/// A vector of `X` together with its block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    structure: BlockStructure,
    values: DVector<f64>,
}

impl BlockVector {
    pub fn new(structure: BlockStructure, values: DVector<f64>) -> Result<Self> {
        if values.len() != structure.q() {
            return Err(MslcaError::ShapeMismatch {
                expected: format!("vector of length {}", structure.q()),
                found: format!("length {}", values.len()),
            });
        }
        Ok(Self { structure, values })
    }

    pub fn from_slice(structure: BlockStructure, values: &[f64]) -> Result<Self> {
        Self::new(structure, DVector::from_column_slice(values))
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// Component `τ_k(x)`.
    pub fn block(&self, k: usize) -> DVectorView<'_, f64> {
        self.values.rows(self.structure.offset(k), self.structure.dim(k))
    }

    pub fn dot(&self, other: &BlockVector) -> f64 {
        self.values.dot(&other.values)
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

/// A `q × q` operator on `X` with its block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    structure: BlockStructure,
    entries: DMatrix<f64>,
    symmetric: bool,
}

impl BlockMatrix {
    /// Wraps a general (not necessarily symmetric) matrix.
    pub fn new(structure: BlockStructure, entries: DMatrix<f64>) -> Result<Self> {
        check_square(&entries, structure.q())?;
        Ok(Self {
            structure,
            entries,
            symmetric: false,
        })
    }

    /// Wraps a symmetric matrix. Asymmetry up to `1e-12·(1 + max|A|)` is
    /// tolerated and removed by replacing `A` with `(A + Aᵀ)/2`.
    pub fn symmetric(structure: BlockStructure, entries: DMatrix<f64>) -> Result<Self> {
        check_square(&entries, structure.q())?;
        let entries = symmetrize_checked(entries)?;
        Ok(Self {
            structure,
            entries,
            symmetric: true,
        })
    }

    pub fn zeros(structure: BlockStructure) -> Self {
        let q = structure.q();
        Self {
            structure,
            entries: DMatrix::zeros(q, q),
            symmetric: true,
        }
    }

    pub fn identity(structure: BlockStructure) -> Self {
        let q = structure.q();
        Self {
            structure,
            entries: DMatrix::identity(q, q),
            symmetric: true,
        }
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Borrowed view of block `(k, l)`; panics on bad indices.
    pub fn block(&self, k: usize, l: usize) -> DMatrixView<'_, f64> {
        let s = &self.structure;
        self.entries
            .view((s.offset(k), s.offset(l)), (s.dim(k), s.dim(l)))
    }

    /// Sets block `(k, l)` in place; the symmetric flag is cleared.
    pub(crate) fn set_block(&mut self, k: usize, l: usize, b: &DMatrix<f64>) {
        let (ok, ol) = (self.structure.offset(k), self.structure.offset(l));
        self.entries
            .view_mut((ok, ol), (b.nrows(), b.ncols()))
            .copy_from(b);
        self.symmetric = false;
    }

    pub(crate) fn mark_symmetric(mut self) -> Self {
        self.symmetric = true;
        self
    }

    /// `max |a_ij|`.
    pub fn max_abs(&self) -> f64 {
        self.entries.amax()
    }
}

fn check_square(m: &DMatrix<f64>, q: usize) -> Result<()> {
    if m.nrows() != q || m.ncols() != q {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("{q}x{q} matrix"),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

fn symmetrize_checked(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(MslcaError::ShapeMismatch {
            expected: "square matrix".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let n = m.nrows();
    let scale = 1.0 + m.amax();
    let mut asym = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if !(asym <= SYMMETRY_TOL * scale) {
        return Err(MslcaError::NotSymmetric { asymmetry: asym });
    }
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    Ok(m)
}

/// `π_kℓ(A)`: copy of block `(k, l)` as a `p_k × p_l` matrix.
pub fn block_extract(a: &BlockMatrix, k: usize, l: usize) -> Result<DMatrix<f64>> {
    a.structure.check_pair(k, l)?;
    Ok(a.block(k, l).into_owned())
}

/// `τ_k* B τ_ℓ`: the `q × q` matrix that is zero except for block `(k, l) = B`.
pub fn block_embed(
    b: &DMatrix<f64>,
    k: usize,
    l: usize,
    structure: &BlockStructure,
) -> Result<BlockMatrix> {
    structure.check_pair(k, l)?;
    if b.nrows() != structure.dim(k) || b.ncols() != structure.dim(l) {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("{}x{} block", structure.dim(k), structure.dim(l)),
            found: format!("{}x{}", b.nrows(), b.ncols()),
        });
    }
    let mut out = BlockMatrix::zeros(structure.clone());
    out.set_block(k, l, b);
    Ok(out)
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted nonincreasing (stable with respect to the solver's
/// order for exact ties) and each eigenvector is signed so that its entry of
/// largest magnitude is positive, the lowest index winning ties.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEig {
    pub eigenvalues: DVector<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

pub fn sym_eig(a: &BlockMatrix) -> Result<SymmetricEig> {
    sym_eig_matrix(a.entries())
}

/// [`sym_eig`] on a bare matrix.
pub fn sym_eig_matrix(a: &DMatrix<f64>) -> Result<SymmetricEig> {
    let a = symmetrize_checked(a.clone())?;
    let n = a.nrows();
    if n == 0 {
        return Ok(SymmetricEig {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(MslcaError::InvalidArgument(
            "matrix has non-finite entries".into(),
        ));
    }
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, EIG_MAX_ITER)
        .ok_or(MslcaError::NoConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("finite eigenvalues")
    });

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(SymmetricEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Exponents supported by [`sym_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixPower {
    Inverse,
    InverseSqrt,
    Sqrt,
}

impl MatrixPower {
    pub fn exponent(self) -> f64 {
        match self {
            MatrixPower::Inverse => -1.0,
            MatrixPower::InverseSqrt => -0.5,
            MatrixPower::Sqrt => 0.5,
        }
    }

    fn apply(self, lambda: f64) -> f64 {
        match self {
            MatrixPower::Inverse => lambda.recip(),
            MatrixPower::InverseSqrt => lambda.sqrt().recip(),
            MatrixPower::Sqrt => lambda.sqrt(),
        }
    }
}

impl TryFrom<f64> for MatrixPower {
    type Error = MslcaError;

    fn try_from(e: f64) -> Result<Self> {
        match e {
            e if e == -1.0 => Ok(MatrixPower::Inverse),
            e if e == -0.5 => Ok(MatrixPower::InverseSqrt),
            e if e == 0.5 => Ok(MatrixPower::Sqrt),
            _ => Err(MslcaError::InvalidArgument(format!(
                "unsupported matrix exponent {e}"
            ))),
        }
    }
}

/// `Q diag(λ^e) Qᵀ` for a symmetric positive-definite matrix.
///
/// Fails with `NearSingular` unless `λ_min > cond_floor · λ_max`.
pub fn sym_power(a: &DMatrix<f64>, power: MatrixPower, cond_floor: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eig_matrix(a)?;
    let n = eig.eigenvalues.len();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lambda_max = eig.eigenvalues[0];
    let lambda_min = eig.eigenvalues[n - 1];
    if !(lambda_max > 0.0 && lambda_min > cond_floor * lambda_max) {
        return Err(MslcaError::NearSingular {
            block: None,
            lambda_min,
            lambda_max,
        });
    }
    Ok(spectral_map(&eig, |l| power.apply(l)))
}

/// Square root of a positive semidefinite matrix; eigenvalues within
/// `1e-10·λ_max` below zero are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig_matrix(a)?;
    let n = eig.eigenvalues.len();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lambda_min = eig.eigenvalues[n - 1];
    let scale = eig.eigenvalues[0].abs().max(f64::MIN_POSITIVE);
    if lambda_min < -1e-10 * scale {
        return Err(MslcaError::NotPositiveSemidefinite {
            min_eigenvalue: lambda_min,
        });
    }
    Ok(spectral_map(&eig, |l| l.max(0.0).sqrt()))
}

fn spectral_map(eig: &SymmetricEig, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(eig.eigenvalues[j]);
    }
    let out = &scaled * q.transpose();
    // exact symmetry for downstream checks
    (&out + out.transpose()) * 0.5
}

/// `tr(B Bᵀ)`, the squared Frobenius norm.
pub fn frobenius_sq(b: &DMatrix<f64>) -> f64 {
    b.iter().map(|v| v * v).sum()
}
