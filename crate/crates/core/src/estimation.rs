//! Empirical covariance blocks and the plug-in canonical analysis.

use nalgebra::{DMatrix, DVector};

use crate::block::{BlockMatrix, BlockStructure, BlockVector, MatrixPower, DEFAULT_COND_FLOOR};
use crate::error::{MslcaError, Result};
use crate::population::{build_t, phi_inv_sqrt, solve_from_t, CovarianceModel, MslcaSolution};

/// An i.i.d. sample stored row-wise: row `i` is `X^(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    structure: BlockStructure,
    rows: DMatrix<f64>,
}

impl Dataset {
    pub fn new(structure: BlockStructure, rows: DMatrix<f64>) -> Result<Self> {
        if rows.ncols() != structure.q() {
            return Err(MslcaError::ShapeMismatch {
                expected: format!("{} columns", structure.q()),
                found: format!("{} columns", rows.ncols()),
            });
        }
        if rows.nrows() == 0 {
            return Err(MslcaError::InsufficientSample { n: 0, required: 1 });
        }
        for j in 0..rows.ncols() {
            for i in 0..rows.nrows() {
                if !rows[(i, j)].is_finite() {
                    return Err(MslcaError::NonFinite { row: i, column: j });
                }
            }
        }
        Ok(Self { structure, rows })
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> BlockVector {
        BlockVector::new(self.structure.clone(), self.rows.row(i).transpose())
            .expect("row length matches structure")
    }

    /// Applies `x_k ↦ A_k x_k` to every row, one matrix per block.
    pub fn transform_blocks(&self, maps: &[DMatrix<f64>]) -> Result<Dataset> {
        let s = &self.structure;
        if maps.len() != s.k() {
            return Err(MslcaError::ShapeMismatch {
                expected: format!("{} block maps", s.k()),
                found: format!("{}", maps.len()),
            });
        }
        let mut out = self.rows.clone();
        for (k, a) in maps.iter().enumerate() {
            if a.shape() != (s.dim(k), s.dim(k)) {
                return Err(MslcaError::ShapeMismatch {
                    expected: format!("{0}x{0} map for block {1}", s.dim(k), k + 1),
                    found: format!("{}x{}", a.nrows(), a.ncols()),
                });
            }
            let block = self.rows.columns(s.offset(k), s.dim(k)) * a.transpose();
            out.columns_mut(s.offset(k), s.dim(k)).copy_from(&block);
        }
        Dataset::new(s.clone(), out)
    }

    fn require(&self, required: usize) -> Result<()> {
        if self.n() < required {
            return Err(MslcaError::InsufficientSample {
                n: self.n(),
                required,
            });
        }
        Ok(())
    }
}

/// Column means `X̄_n` and the centered sample.
pub fn center(data: &Dataset) -> Result<(Dataset, BlockVector)> {
    data.require(2)?;
    let means: DVector<f64> = data.rows.row_mean().transpose();
    let mut centered = data.rows.clone();
    for (mut col, m) in centered.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-m);
    }
    Ok((
        Dataset {
            structure: data.structure.clone(),
            rows: centered,
        },
        BlockVector::new(data.structure.clone(), means)?,
    ))
}

/// `V̂_n = (1/n) Σ_i (x_i − x̄)(x_i − x̄)ᵀ`; note the divisor `n`.
///
/// Conditioning of the diagonal blocks is not checked here.
pub fn empirical_cov(data: &Dataset) -> Result<CovarianceModel> {
    empirical_cov_with_floor(data, DEFAULT_COND_FLOOR)
}

pub fn empirical_cov_with_floor(data: &Dataset, cond_floor: f64) -> Result<CovarianceModel> {
    let (centered, _) = center(data)?;
    let v = cross_product(&centered.rows) / data.n() as f64;
    CovarianceModel::unchecked(data.structure.clone(), v, cond_floor)
}

/// `XᵀX` with exactly symmetric output.
fn cross_product(x: &DMatrix<f64>) -> DMatrix<f64> {
    let g = x.tr_mul(x);
    (&g + g.transpose()) * 0.5
}

/// Empirical counterpart of [`MslcaSolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct MslcaFit {
    pub n: usize,
    pub means: BlockVector,
    pub vhat: CovarianceModel,
    /// `T̂_n = Φ̂_n^{-1/2} Ψ̂_n Φ̂_n^{-1/2}`.
    pub that: BlockMatrix,
    pub solution: MslcaSolution,
}

/// Options for [`fit_mslca_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub group_tol: f64,
    pub cond_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            group_tol: crate::population::DEFAULT_GROUP_TOL,
            cond_floor: DEFAULT_COND_FLOOR,
        }
    }
}

pub fn fit_mslca(data: &Dataset, group_tol: f64) -> Result<MslcaFit> {
    fit_mslca_with(
        data,
        FitOptions {
            group_tol,
            ..FitOptions::default()
        },
    )
}

pub fn fit_mslca_with(data: &Dataset, opts: FitOptions) -> Result<MslcaFit> {
    data.require(2)?;
    let (_, means) = center(data)?;
    let vhat = empirical_cov_with_floor(data, opts.cond_floor)?;
    let that = build_t(&vhat)?;
    let root = phi_inv_sqrt(&vhat)?;
    let solution = solve_from_t(&that, &root, opts.group_tol)?;
    Ok(MslcaFit {
        n: data.n(),
        means,
        vhat,
        that,
        solution,
    })
}

/// `sign(⟨b̂, b⟩) b̂` with `sign(0) = +1`.
pub fn align_sign(bhat: &BlockVector, b: &BlockVector) -> BlockVector {
    if bhat.dot(b) < 0.0 {
        BlockVector::new(bhat.structure().clone(), -bhat.values())
            .expect("same structure")
    } else {
        bhat.clone()
    }
}

/// Frobenius distance between the orthogonal projectors onto the column
/// spans of `bhat` and `b` (both with orthonormal columns).
pub fn projector_distance(bhat: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = bhat * bhat.transpose();
    let q = b * b.transpose();
    (p - q).norm()
}

/// Centers each block and maps it through `V̂_k^{-1/2}`.
pub fn whiten(data: &Dataset) -> Result<Dataset> {
    whiten_with_floor(data, DEFAULT_COND_FLOOR)
}

pub fn whiten_with_floor(data: &Dataset, cond_floor: f64) -> Result<Dataset> {
    let vhat = empirical_cov_with_floor(data, cond_floor)?;
    let (centered, _) = center(data)?;
    let maps = (0..data.structure.k())
        .map(|k| vhat.block_power(k, MatrixPower::InverseSqrt))
        .collect::<Result<Vec<_>>>()?;
    centered.transform_blocks(&maps)
}
