//! JSON layout of `fit` output.

use mslca::population::{verify_constraints, MultiplicityGroup};
use mslca::MslcaFit;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CovBlock {
    pub k: usize,
    pub l: usize,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    /// Worst `|Σ_k ⟨α_k, V̂_k α_k⟩ − 1|`.
    pub constraint_normalization: f64,
    pub constraint_orthogonality: f64,
    /// `Σ ρ̂_j`, zero up to rounding.
    pub rho_sum: f64,
    /// Condition number of each `V̂_k`.
    pub block_condition: Vec<f64>,
    /// Indices with `ρ̂_j = 0` whose directions are not identifiable.
    pub nonidentifiable: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub blocks: Vec<usize>,
    /// One vector per block.
    pub means: Vec<Vec<f64>>,
    /// Full `V̂_n`, row by row.
    pub covariance: Vec<Vec<f64>>,
    /// `V̂_kℓ` for `k ≥ ℓ`, 1-based block labels.
    pub covariance_blocks: Vec<CovBlock>,
    pub rho: Vec<f64>,
    /// `beta[j]` is `β^(j)`.
    pub beta: Vec<Vec<f64>>,
    /// `alpha_directions[j]` is `α^(j)`.
    pub alpha_directions: Vec<Vec<f64>>,
    pub multiplicity_groups: Vec<MultiplicityGroup>,
    pub diagnostics: Diagnostics,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn fit_report(fit: &MslcaFit) -> FitReport {
    let s = fit.vhat.structure();
    let sol = &fit.solution;
    let mut covariance_blocks = Vec::new();
    for k in 0..s.k() {
        for l in 0..=k {
            covariance_blocks.push(CovBlock {
                k: k + 1,
                l: l + 1,
                matrix: rows(&fit.vhat.block(k, l)),
            });
        }
    }
    let c = verify_constraints(&fit.vhat, &sol.alpha);
    let block_condition = (0..s.k())
        .map(|k| {
            let e = fit.vhat.block(k, k).symmetric_eigenvalues();
            e.max() / e.min()
        })
        .collect();
    FitReport {
        n: fit.n,
        blocks: s.dims().to_vec(),
        means: (0..s.k()).map(|k| fit.means.block(k).iter().copied().collect()).collect(),
        covariance: rows(fit.vhat.v().entries()),
        covariance_blocks,
        rho: vec_of(&sol.rho),
        beta: columns(&sol.beta),
        alpha_directions: columns(&sol.alpha),
        multiplicity_groups: sol.groups.clone(),
        diagnostics: Diagnostics {
            constraint_normalization: c.normalization,
            constraint_orthogonality: c.orthogonality,
            rho_sum: sol.rho.sum(),
            block_condition,
            nonidentifiable: sol.nonidentifiable.clone(),
        },
    }
}
