//! Population multiple-set canonical analysis.
//!
//! From the covariance `V` of `X = (X_1, …, X_K)` we form the within-set part
//! `Φ` (diagonal blocks `V_k`), the between-set part `Ψ` (off-diagonal blocks
//! `V_kℓ`) and `T = Φ^{-1/2} Ψ Φ^{-1/2}`. The canonical coefficients are the
//! eigenvalues of `T`; the canonical directions are `α = Φ^{-1/2} β` for the
//! orthonormal eigenvectors `β`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::block::{
    frobenius_sq, sym_eig, sym_eig_matrix, sym_power, BlockMatrix, BlockStructure, BlockVector,
    MatrixPower, DEFAULT_COND_FLOOR,
};
use crate::error::{MslcaError, Result};

/// Default relative tolerance used to group numerically equal eigenvalues.
pub const DEFAULT_GROUP_TOL: f64 = 1e-8;

/// Covariance of `X` stored as a full block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    v: BlockMatrix,
    cond_floor: f64,
}

impl CovarianceModel {
    /// Validated model: `V` symmetric positive semidefinite and every
    /// diagonal block positive definite with respect to the condition floor.
    pub fn new(structure: BlockStructure, v: DMatrix<f64>) -> Result<Self> {
        Self::with_cond_floor(structure, v, DEFAULT_COND_FLOOR)
    }

    pub fn with_cond_floor(
        structure: BlockStructure,
        v: DMatrix<f64>,
        cond_floor: f64,
    ) -> Result<Self> {
        let model = Self::unchecked(structure, v, cond_floor)?;
        let eig = sym_eig(&model.v)?;
        let q = eig.eigenvalues.len();
        let lmax = eig.eigenvalues[0].abs().max(1.0);
        if eig.eigenvalues[q - 1] < -1e-10 * lmax {
            return Err(MslcaError::NotPositiveSemidefinite {
                min_eigenvalue: eig.eigenvalues[q - 1],
            });
        }
        for k in 0..model.structure().k() {
            model.block_power(k, MatrixPower::InverseSqrt)?;
        }
        Ok(model)
    }

    /// Symmetric but otherwise unvalidated; used for sample covariances whose
    /// conditioning is checked only when a fit needs `V̂_k^{-1/2}`.
    pub(crate) fn unchecked(
        structure: BlockStructure,
        v: DMatrix<f64>,
        cond_floor: f64,
    ) -> Result<Self> {
        if !(cond_floor >= 0.0 && cond_floor < 1.0) {
            return Err(MslcaError::InvalidArgument(format!(
                "cond_floor must lie in [0, 1), got {cond_floor}"
            )));
        }
        Ok(Self {
            v: BlockMatrix::symmetric(structure, v)?,
            cond_floor,
        })
    }

    /// Identity within-set blocks and the given cross blocks, listed as
    /// `((k, l), V_kl)` with `k > l`.
    pub fn whitened(
        structure: BlockStructure,
        cross: &[((usize, usize), DMatrix<f64>)],
    ) -> Result<Self> {
        let q = structure.q();
        let mut v = DMatrix::identity(q, q);
        for ((k, l), b) in cross {
            if k == l || *k >= structure.k() || *l >= structure.k() {
                return Err(MslcaError::BlockIndex {
                    k: *k,
                    l: *l,
                    blocks: structure.k(),
                });
            }
            if b.nrows() != structure.dim(*k) || b.ncols() != structure.dim(*l) {
                return Err(MslcaError::ShapeMismatch {
                    expected: format!("{}x{}", structure.dim(*k), structure.dim(*l)),
                    found: format!("{}x{}", b.nrows(), b.ncols()),
                });
            }
            v.view_mut((structure.offset(*k), structure.offset(*l)), b.shape())
                .copy_from(b);
            v.view_mut((structure.offset(*l), structure.offset(*k)), (b.ncols(), b.nrows()))
                .copy_from(&b.transpose());
        }
        Self::new(structure, v)
    }

    pub fn structure(&self) -> &BlockStructure {
        self.v.structure()
    }

    pub fn v(&self) -> &BlockMatrix {
        &self.v
    }

    pub fn cond_floor(&self) -> f64 {
        self.cond_floor
    }

    /// `V_kℓ`.
    pub fn block(&self, k: usize, l: usize) -> DMatrix<f64> {
        self.v.block(k, l).into_owned()
    }

    /// `V_k^e`, with `NearSingular` naming block `k` on failure.
    pub fn block_power(&self, k: usize, power: MatrixPower) -> Result<DMatrix<f64>> {
        sym_power(&self.block(k, k), power, self.cond_floor).map_err(|e| e.in_block(k))
    }

    /// True when every cross block `V_kℓ`, `k ≠ ℓ`, is within `tol` of zero.
    pub fn is_mutually_uncorrelated(&self, tol: f64) -> bool {
        let s = self.structure();
        (0..s.k()).all(|k| (0..s.k()).all(|l| k == l || self.v.block(k, l).amax() <= tol))
    }

    /// True when every `V_k` is the identity within `tol`.
    pub fn is_whitened(&self, tol: f64) -> bool {
        let s = self.structure();
        (0..s.k()).all(|k| {
            (self.v.block(k, k) - DMatrix::<f64>::identity(s.dim(k), s.dim(k))).amax() <= tol
        })
    }
}

/// Consecutive eigenvalues that are equal up to the grouping tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplicityGroup {
    /// Mean of the member eigenvalues.
    pub value: f64,
    /// Zero-based indices of the members, contiguous in the sorted order.
    pub members: Vec<usize>,
}

/// Canonical coefficients and directions.
#[derive(Debug, Clone, PartialEq)]
pub struct MslcaSolution {
    structure: BlockStructure,
    /// `ρ_1 ≥ … ≥ ρ_q`.
    pub rho: DVector<f64>,
    /// Orthonormal eigenvectors of `T`, column `j` is `β^(j)`.
    pub beta: DMatrix<f64>,
    /// Column `j` is `α^(j) = Φ^{-1/2} β^(j)`.
    pub alpha: DMatrix<f64>,
    pub groups: Vec<MultiplicityGroup>,
    /// Indices whose coefficient is zero; their directions are only defined
    /// up to a rotation of the null space of `T`.
    pub nonidentifiable: Vec<usize>,
}

impl MslcaSolution {
    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn q(&self) -> usize {
        self.rho.len()
    }

    pub fn beta_vector(&self, j: usize) -> BlockVector {
        BlockVector::new(self.structure.clone(), self.beta.column(j).into_owned())
            .expect("column length matches structure")
    }

    pub fn alpha_vector(&self, j: usize) -> BlockVector {
        BlockVector::new(self.structure.clone(), self.alpha.column(j).into_owned())
            .expect("column length matches structure")
    }

    /// True when every multiplicity group is a singleton.
    pub fn is_simple(&self) -> bool {
        self.groups.iter().all(|g| g.members.len() == 1)
    }

    /// Group containing index `j`.
    pub fn group_of(&self, j: usize) -> &MultiplicityGroup {
        self.groups
            .iter()
            .find(|g| g.members.contains(&j))
            .expect("groups partition the index set")
    }
}

/// `Φ = Σ_k τ_k* V_k τ_k`.
pub fn build_phi(model: &CovarianceModel) -> Result<BlockMatrix> {
    let s = model.structure();
    let mut phi = BlockMatrix::zeros(s.clone());
    for k in 0..s.k() {
        model.block_power(k, MatrixPower::InverseSqrt)?;
        phi.set_block(k, k, &model.block(k, k));
    }
    Ok(phi.mark_symmetric())
}

/// `Ψ = Σ_k Σ_{ℓ≠k} τ_k* V_kℓ τ_ℓ`: `V` with its diagonal blocks zeroed.
pub fn build_psi(model: &CovarianceModel) -> BlockMatrix {
    let s = model.structure();
    let mut psi = model.v().clone();
    for k in 0..s.k() {
        psi.set_block(k, k, &DMatrix::zeros(s.dim(k), s.dim(k)));
    }
    psi.mark_symmetric()
}

/// Block-diagonal `Φ^{-1/2}`.
pub fn phi_inv_sqrt(model: &CovarianceModel) -> Result<BlockMatrix> {
    let s = model.structure();
    let mut out = BlockMatrix::zeros(s.clone());
    for k in 0..s.k() {
        out.set_block(k, k, &model.block_power(k, MatrixPower::InverseSqrt)?);
    }
    Ok(out.mark_symmetric())
}

/// `T = Φ^{-1/2} Ψ Φ^{-1/2}`, assembled blockwise as
/// `π_kℓ(T) = V_k^{-1/2} V_kℓ V_ℓ^{-1/2}` with exactly zero diagonal blocks.
pub fn build_t(model: &CovarianceModel) -> Result<BlockMatrix> {
    let s = model.structure();
    let roots = (0..s.k())
        .map(|k| model.block_power(k, MatrixPower::InverseSqrt))
        .collect::<Result<Vec<_>>>()?;
    let mut t = BlockMatrix::zeros(s.clone());
    for k in 0..s.k() {
        for l in 0..k {
            let b = &roots[k] * model.block(k, l) * &roots[l];
            t.set_block(l, k, &b.transpose());
            t.set_block(k, l, &b);
        }
    }
    Ok(t.mark_symmetric())
}

/// Solves the population problem through the spectral decomposition of `T`.
pub fn solve_mslca(model: &CovarianceModel, group_tol: f64) -> Result<MslcaSolution> {
    let t = build_t(model)?;
    let root = phi_inv_sqrt(model)?;
    solve_from_t(&t, &root, group_tol)
}

pub(crate) fn solve_from_t(
    t: &BlockMatrix,
    phi_inv_sqrt: &BlockMatrix,
    group_tol: f64,
) -> Result<MslcaSolution> {
    if !(group_tol > 0.0) {
        return Err(MslcaError::InvalidArgument(format!(
            "group_tol must be positive, got {group_tol}"
        )));
    }
    let eig = sym_eig(t)?;
    let alpha = phi_inv_sqrt.entries() * &eig.eigenvectors;
    let groups = group_eigenvalues(&eig.eigenvalues, group_tol);
    let nonidentifiable = (0..eig.eigenvalues.len())
        .filter(|&j| eig.eigenvalues[j].abs() <= group_tol)
        .collect();
    Ok(MslcaSolution {
        structure: t.structure().clone(),
        rho: eig.eigenvalues,
        beta: eig.eigenvectors,
        alpha,
        groups,
        nonidentifiable,
    })
}

/// Groups sorted eigenvalues: `ρ_j` joins the running group when
/// `|ρ_j − ρ_{j−1}| ≤ tol · max(1, |ρ_{j−1}|)`.
pub fn group_eigenvalues(sorted: &DVector<f64>, tol: f64) -> Vec<MultiplicityGroup> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..sorted.len() {
        let joins = j > 0 && {
            let prev = sorted[j - 1];
            (sorted[j] - prev).abs() <= tol * prev.abs().max(1.0)
        };
        match groups.last_mut() {
            Some(g) if joins => g.push(j),
            _ => groups.push(vec![j]),
        }
    }
    groups
        .into_iter()
        .map(|members| MultiplicityGroup {
            value: members.iter().map(|&i| sorted[i]).sum::<f64>() / members.len() as f64,
            members,
        })
        .collect()
}

/// `φ(α) = Σ_k Σ_{ℓ≠k} ⟨α_k, V_kℓ α_ℓ⟩`.
pub fn varphi(model: &CovarianceModel, a: &BlockVector) -> Result<f64> {
    let s = model.structure();
    if a.structure() != s {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("block vector with dims {:?}", s.dims()),
            found: format!("dims {:?}", a.structure().dims()),
        });
    }
    let mut total = 0.0;
    for k in 0..s.k() {
        for l in 0..s.k() {
            if k != l {
                total += a.block(k).dot(&(model.v().block(k, l) * a.block(l)));
            }
        }
    }
    Ok(total)
}

/// Worst violations of the normalisation and orthogonality constraints
/// `Σ_k ⟨α_k^(i), V_k α_k^(j)⟩ = δ_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub normalization: f64,
    pub orthogonality: f64,
}

pub fn verify_constraints(model: &CovarianceModel, alpha: &DMatrix<f64>) -> ConstraintReport {
    let s = model.structure();
    let m = alpha.ncols();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for k in 0..s.k() {
        let ak = alpha.rows(s.offset(k), s.dim(k));
        gram += ak.transpose() * model.v().block(k, k) * ak;
    }
    let mut normalization = 0.0f64;
    let mut orthogonality = 0.0f64;
    for i in 0..m {
        normalization = normalization.max((gram[(i, i)] - 1.0).abs());
        for j in 0..m {
            if i != j {
                orthogonality = orthogonality.max(gram[(i, j)].abs());
            }
        }
    }
    ConstraintReport {
        normalization,
        orthogonality,
    }
}

/// Two-block reduction to classical canonical correlation analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaEquivalence {
    /// Singular values of `S = V_1^{-1/2} V_12 V_2^{-1/2}`, nonincreasing.
    pub canonical_correlations: Vec<f64>,
    /// Eigenvalues of `R = S Sᵀ`, nonincreasing.
    pub r_eigenvalues: Vec<f64>,
    /// `(√2 τ_1 β^(j), √2 τ_2 β^(j))` for the leading `min(p_1, p_2)` pairs.
    pub directions: Vec<(DVector<f64>, DVector<f64>)>,
    /// `max_j |ρ_j + ρ_{q+1−j}|`: zero when the spectrum of `T` is symmetric.
    pub pairing_error: f64,
    /// `max |‖τ_ℓ β^(j)‖ − 1/√2|` over eigenvectors with nonzero coefficient.
    pub block_norm_error: f64,
    /// `max |ρ_j² − λ_j(R)|` over the leading `min(p_1, p_2)` coefficients.
    pub spectrum_error: f64,
}

pub fn cca_equivalence(model: &CovarianceModel, group_tol: f64) -> Result<CcaEquivalence> {
    let s = model.structure();
    if s.k() != 2 {
        return Err(MslcaError::RequiresTwoBlocks(s.k()));
    }
    let r1 = model.block_power(0, MatrixPower::InverseSqrt)?;
    let r2 = model.block_power(1, MatrixPower::InverseSqrt)?;
    let smat = &r1 * model.block(0, 1) * &r2;
    let rank = s.dim(0).min(s.dim(1));

    let mut sv: Vec<f64> = smat.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sv.truncate(rank);

    let r = &smat * smat.transpose();
    let r_eig = sym_eig_matrix(&r)?;
    let r_eigenvalues: Vec<f64> = r_eig.eigenvalues.iter().copied().collect();

    let sol = solve_mslca(model, group_tol)?;
    let q = sol.q();
    let pairing_error = (0..q)
        .map(|j| (sol.rho[j] + sol.rho[q - 1 - j]).abs())
        .fold(0.0, f64::max);

    let half = std::f64::consts::FRAC_1_SQRT_2;
    let scale = sol.rho.amax().max(1.0);
    let mut block_norm_error = 0.0f64;
    for j in 0..q {
        if sol.rho[j].abs() > group_tol * scale {
            let b = sol.beta_vector(j);
            for l in 0..2 {
                block_norm_error = block_norm_error.max((b.block(l).norm() - half).abs());
            }
        }
    }

    let spectrum_error = (0..rank)
        .map(|j| (sol.rho[j] * sol.rho[j] - r_eigenvalues[j]).abs())
        .fold(0.0, f64::max);

    let root2 = std::f64::consts::SQRT_2;
    let directions = (0..rank)
        .map(|j| {
            let b = sol.beta_vector(j);
            (b.block(0) * root2, b.block(1) * root2)
        })
        .collect();

    Ok(CcaEquivalence {
        canonical_correlations: sv,
        r_eigenvalues,
        directions,
        pairing_error,
        block_norm_error,
        spectrum_error,
    })
}

/// `Σ_{k>ℓ} ‖π_kℓ(A)‖_F²` over the strictly lower block triangle.
pub(crate) fn lower_block_mass(a: &BlockMatrix) -> f64 {
    let s = a.structure();
    let mut total = 0.0;
    for k in 1..s.k() {
        for l in 0..k {
            total += frobenius_sq(&a.block(k, l).into_owned());
        }
    }
    total
}
