//! Limit laws: the random operator `Z`, fourth-moment coefficients, the
//! covariance `Σ` of the canonical coefficients and the `Γ` matrix of the
//! non-correlation statistic, plus the weighted chi-square law `Q = WᵀW`.
//!
//! All of it assumes whitened coordinates (`V_k = I_k`).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::block::{sym_eig_matrix, BlockMatrix, BlockStructure, BlockVector};
use crate::error::{MslcaError, Result};
use crate::estimation::{whiten, Dataset};
use crate::population::{CovarianceModel, MslcaSolution};

/// Default number of Monte Carlo draws for quadratic-form tail probabilities.
pub const DEFAULT_MC_DRAWS: usize = 200_000;

const MC_CHUNK: usize = 8_192;
const WEIGHT_CLAMP: f64 = 1e-8;

/// One realisation of `Z` at the point `x`: zero diagonal blocks and, for
/// `k ≠ ℓ`, block `x_k x_ℓᵀ − ½(x_k x_kᵀ V_kℓ + V_kℓ x_ℓ x_ℓᵀ)`.
pub fn z_operator(x: &BlockVector, model: &CovarianceModel) -> Result<BlockMatrix> {
    let s = model.structure();
    if x.structure() != s {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("block vector with dims {:?}", s.dims()),
            found: format!("dims {:?}", x.structure().dims()),
        });
    }
    let q = s.q();
    let mut z = DMatrix::zeros(q, q);
    for k in 0..s.k() {
        let xk = x.block(k);
        for l in 0..s.k() {
            if k == l {
                continue;
            }
            let xl = x.block(l);
            let vkl = model.v().block(k, l);
            let outer = xk * xl.transpose();
            let left = xk * (xk.transpose() * vkl);
            let right = (vkl * xl) * xl.transpose();
            let b = outer - (left + right) * 0.5;
            z.view_mut((s.offset(k), s.offset(l)), b.shape()).copy_from(&b);
        }
    }
    BlockMatrix::symmetric(s.clone(), z)
}

/// Sample moments of a centered, whitened dataset.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    structure: BlockStructure,
    /// `n × q`, column-major so each coordinate is contiguous.
    data: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl MomentAccumulator {
    /// Uses `whitened` as given; the caller is responsible for centering and
    /// whitening.
    pub fn new(whitened: &Dataset) -> Self {
        let data = whitened.rows().clone();
        let n = data.nrows() as f64;
        let g = data.tr_mul(&data) / n;
        let second = (&g + g.transpose()) * 0.5;
        Self {
            structure: whitened.structure().clone(),
            data,
            second,
        }
    }

    /// Whitens `raw` first.
    pub fn from_raw(raw: &Dataset) -> Result<Self> {
        Ok(Self::new(&whiten(raw)?))
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// `(1/n) Σ_i y_i y_iᵀ`.
    pub fn second_moments(&self) -> &DMatrix<f64> {
        &self.second
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// `(1/n) Σ_i y_ia y_ib y_ic y_id` over global coordinates.
    pub fn fourth_moment(&self, a: usize, b: usize, c: usize, d: usize) -> Result<f64> {
        let q = self.structure.q();
        for idx in [a, b, c, d] {
            if idx >= q {
                return Err(MslcaError::IndexOutOfRange {
                    index: idx,
                    limit: q,
                });
            }
        }
        let (ca, cb, cc, cd) = (
            self.data.column(a),
            self.data.column(b),
            self.data.column(c),
            self.data.column(d),
        );
        let s: f64 = (0..self.n()).map(|i| ca[i] * cb[i] * cc[i] * cd[i]).sum();
        Ok(s / self.n() as f64)
    }
}

/// Position of one entry of a strictly-lower off-diagonal block: coordinate
/// `i` of block `k` against coordinate `j` of block `l` (`k > l`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub k: usize,
    pub l: usize,
    pub i: usize,
    pub j: usize,
}

/// Enumerates the strictly-lower block entries in the order
/// `(2,1), (3,1), (3,2), …, (K,K−1)`, and within each block
/// `(1,1), (2,1), …, (p_k,1), (1,2), …` (column-major).
pub fn pair_indices(structure: &BlockStructure) -> Vec<PairIndex> {
    let mut out = Vec::new();
    for k in 1..structure.k() {
        for l in 0..k {
            for j in 0..structure.dim(l) {
                for i in 0..structure.dim(k) {
                    out.push(PairIndex { k, l, i, j });
                }
            }
        }
    }
    out
}

/// Stacks the strictly-lower blocks of `a` into a vector in
/// [`pair_indices`] order.
pub fn lower_block_vector(a: &BlockMatrix) -> DVector<f64> {
    let s = a.structure();
    let idx = pair_indices(s);
    DVector::from_iterator(
        idx.len(),
        idx.iter()
            .map(|p| a.entries()[(s.offset(p.k) + p.i, s.offset(p.l) + p.j)]),
    )
}

/// Covariance of the stacked lower blocks of `√n T̂_n` under mutual
/// non-correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub matrix: DMatrix<f64>,
    pub index: Vec<PairIndex>,
}

impl GammaMatrix {
    pub fn dim(&self) -> usize {
        self.index.len()
    }
}

/// `Γ̂` with entry `[(k,ℓ,i,j), (r,s,p,q)] = Ê(y_ki y_rp y_ℓj y_sq)`.
pub fn build_gamma(acc: &MomentAccumulator) -> GammaMatrix {
    let s = &acc.structure;
    let index = pair_indices(s);
    let n = acc.n();
    let mut products = DMatrix::zeros(n, index.len());
    for (col, p) in index.iter().enumerate() {
        let a = acc.data.column(s.offset(p.k) + p.i);
        let b = acc.data.column(s.offset(p.l) + p.j);
        products.set_column(col, &a.component_mul(&b));
    }
    let g = products.tr_mul(&products) / n as f64;
    let matrix = (&g + g.transpose()) * 0.5;
    GammaMatrix { matrix, index }
}

/// Source of fourth-order moments `E(⟨X,u_1⟩⟨X,u_2⟩⟨X,u_3⟩⟨X,u_4⟩)` for
/// linear functionals given as the columns of a `q × m` matrix.
pub trait FourthMoments {
    fn prepare(&self, functionals: &DMatrix<f64>) -> Expect4Table;
}

/// Fourth moments of a fixed family of functionals.
#[derive(Debug, Clone)]
pub enum Expect4Table {
    /// Sample averages over projected observations (`n × m`).
    Sample(DMatrix<f64>),
    /// Elliptical law: `scale · (G_ab G_cd + G_ac G_bd + G_ad G_bc)` with
    /// `G = Uᵀ V U`.
    Elliptical { gram: DMatrix<f64>, scale: f64 },
}

impl Expect4Table {
    pub fn expect4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        match self {
            Expect4Table::Sample(proj) => {
                let (ca, cb, cc, cd) = (proj.column(a), proj.column(b), proj.column(c), proj.column(d));
                let s: f64 = (0..proj.nrows()).map(|i| ca[i] * cb[i] * cc[i] * cd[i]).sum();
                s / proj.nrows() as f64
            }
            Expect4Table::Elliptical { gram, scale } => {
                scale
                    * (gram[(a, b)] * gram[(c, d)]
                        + gram[(a, c)] * gram[(b, d)]
                        + gram[(a, d)] * gram[(b, c)])
            }
        }
    }
}

impl FourthMoments for MomentAccumulator {
    fn prepare(&self, functionals: &DMatrix<f64>) -> Expect4Table {
        Expect4Table::Sample(&self.data * functionals)
    }
}

/// Population moments of a centered elliptical law with covariance `V`.
/// `scale` is `4h″(0)`: 1 for the Gaussian, `(ν−2)/(ν−4)` for Student t.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticalMoments {
    pub cov: DMatrix<f64>,
    pub scale: f64,
}

impl EllipticalMoments {
    pub fn gaussian(model: &CovarianceModel) -> Self {
        Self {
            cov: model.v().entries().clone(),
            scale: 1.0,
        }
    }

    pub fn student_t(model: &CovarianceModel, nu: f64) -> Result<Self> {
        if !(nu > 4.0) {
            return Err(MslcaError::NuTooSmall(nu));
        }
        Ok(Self {
            cov: model.v().entries().clone(),
            scale: (nu - 2.0) / (nu - 4.0),
        })
    }
}

impl FourthMoments for EllipticalMoments {
    fn prepare(&self, functionals: &DMatrix<f64>) -> Expect4Table {
        Expect4Table::Elliptical {
            gram: functionals.transpose() * &self.cov * functionals,
            scale: self.scale,
        }
    }
}

/// Evaluates the coefficients `C(m,r,s,t)` of the covariance `Θ` of the
/// limit of `√n(T̂_n − T)` expressed in an orthonormal basis `(b_1, …, b_q)`.
///
/// With `B_k^a = ⟨X_k, τ_k b_a⟩` and `A_kℓ^a = ⟨X_k, V_kℓ τ_ℓ b_a⟩`:
/// `γ^{abcd}_{kℓjq} = ¼E(B_k^a A_kℓ^b B_j^c A_jq^d)`,
/// `θ^{abcd}_{kℓjq} = ½E(B_k^a A_kℓ^b B_j^c B_q^d)`,
/// `λ^{abcd}_{kℓjq} = E(B_k^a B_ℓ^b B_j^c B_q^d)`.
#[derive(Debug, Clone)]
pub struct CoefficientEvaluator {
    basis: DMatrix<f64>,
    blocks: usize,
    table: Expect4Table,
}

impl CoefficientEvaluator {
    pub fn new<M: FourthMoments>(
        moments: &M,
        basis: &DMatrix<f64>,
        model: &CovarianceModel,
    ) -> Result<Self> {
        let s = model.structure();
        let q = s.q();
        if basis.shape() != (q, q) {
            return Err(MslcaError::ShapeMismatch {
                expected: format!("{q}x{q} basis"),
                found: format!("{}x{}", basis.nrows(), basis.ncols()),
            });
        }
        let ortho = (basis.tr_mul(basis) - DMatrix::<f64>::identity(q, q)).amax();
        if ortho > 1e-8 {
            return Err(MslcaError::InvalidArgument(format!(
                "basis is not orthonormal (error {ortho:e})"
            )));
        }
        let kk = s.k();
        let mut u = DMatrix::zeros(q, kk * q + kk * kk * q);
        for k in 0..kk {
            let rows = s.range(k);
            for a in 0..q {
                let col = k * q + a;
                u.view_mut((rows.start, col), (s.dim(k), 1))
                    .copy_from(&basis.view((rows.start, a), (s.dim(k), 1)));
                for l in 0..kk {
                    if l == k {
                        continue;
                    }
                    let v = model.v().block(k, l) * basis.view((s.offset(l), a), (s.dim(l), 1));
                    let col = kk * q + (k * kk + l) * q + a;
                    u.view_mut((rows.start, col), (s.dim(k), 1)).copy_from(&v);
                }
            }
        }
        Ok(Self {
            basis: basis.clone(),
            blocks: kk,
            table: moments.prepare(&u),
        })
    }

    /// Evaluator in the eigenbasis `β` of a solution.
    pub fn for_solution<M: FourthMoments>(
        moments: &M,
        solution: &MslcaSolution,
        model: &CovarianceModel,
    ) -> Result<Self> {
        Self::new(moments, &solution.beta, model)
    }

    /// Evaluator in the canonical basis of `X`.
    pub fn canonical<M: FourthMoments>(moments: &M, model: &CovarianceModel) -> Result<Self> {
        let q = model.structure().q();
        Self::new(moments, &DMatrix::identity(q, q), model)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn q(&self) -> usize {
        self.basis.ncols()
    }

    fn b(&self, k: usize, a: usize) -> usize {
        k * self.q() + a
    }

    fn a(&self, k: usize, l: usize, b: usize) -> usize {
        let kk = self.blocks;
        kk * self.q() + (k * kk + l) * self.q() + b
    }

    fn check(&self, idx: [usize; 4], blocks: [usize; 4]) -> Result<()> {
        for i in idx {
            if i >= self.q() {
                return Err(MslcaError::IndexOutOfRange {
                    index: i,
                    limit: self.q(),
                });
            }
        }
        for b in blocks {
            if b >= self.blocks {
                return Err(MslcaError::IndexOutOfRange {
                    index: b,
                    limit: self.blocks,
                });
            }
        }
        if blocks[0] == blocks[1] || blocks[2] == blocks[3] {
            return Err(MslcaError::InvalidArgument(
                "block pairs must be distinct".into(),
            ));
        }
        Ok(())
    }

    /// `γ^{a,b,c,d}_{kℓjq}`.
    pub fn gamma(&self, idx: [usize; 4], blocks: [usize; 4]) -> Result<f64> {
        self.check(idx, blocks)?;
        Ok(self.gamma_unchecked(idx, blocks))
    }

    /// `θ^{a,b,c,d}_{kℓjq}`.
    pub fn theta(&self, idx: [usize; 4], blocks: [usize; 4]) -> Result<f64> {
        self.check(idx, blocks)?;
        Ok(self.theta_unchecked(idx, blocks))
    }

    /// `λ^{a,b,c,d}_{kℓjq}`.
    pub fn lambda(&self, idx: [usize; 4], blocks: [usize; 4]) -> Result<f64> {
        self.check(idx, blocks)?;
        Ok(self.lambda_unchecked(idx, blocks))
    }

    fn gamma_unchecked(&self, [a, b, c, d]: [usize; 4], [k, l, j, q]: [usize; 4]) -> f64 {
        0.25 * self
            .table
            .expect4(self.b(k, a), self.a(k, l, b), self.b(j, c), self.a(j, q, d))
    }

    fn theta_unchecked(&self, [a, b, c, d]: [usize; 4], [k, l, j, q]: [usize; 4]) -> f64 {
        0.5 * self
            .table
            .expect4(self.b(k, a), self.a(k, l, b), self.b(j, c), self.b(q, d))
    }

    fn lambda_unchecked(&self, [a, b, c, d]: [usize; 4], [k, l, j, q]: [usize; 4]) -> f64 {
        self.table
            .expect4(self.b(k, a), self.b(l, b), self.b(j, c), self.b(q, d))
    }

    /// `C(m,r,s,t)`, summed over `k ≠ ℓ` and `j ≠ q`.
    pub fn c(&self, m: usize, r: usize, s: usize, t: usize) -> Result<f64> {
        for i in [m, r, s, t] {
            if i >= self.q() {
                return Err(MslcaError::IndexOutOfRange {
                    index: i,
                    limit: self.q(),
                });
            }
        }
        let kk = self.blocks;
        let mut total = 0.0;
        for k in 0..kk {
            for l in (0..kk).filter(|&l| l != k) {
                for j in 0..kk {
                    for q in (0..kk).filter(|&q| q != j) {
                        let bl = [k, l, j, q];
                        total += self.gamma_unchecked([m, r, s, t], bl)
                            + self.gamma_unchecked([m, r, t, s], bl)
                            + self.gamma_unchecked([r, m, s, t], bl)
                            + self.gamma_unchecked([r, m, t, s], bl)
                            - self.theta_unchecked([m, r, s, t], bl)
                            - self.theta_unchecked([r, m, s, t], bl)
                            - self.theta_unchecked([s, t, m, r], bl)
                            - self.theta_unchecked([t, s, m, r], bl)
                            + self.lambda_unchecked([m, r, s, t], bl);
                    }
                }
            }
        }
        Ok(total)
    }
}

/// `C(m,r,s,t)` in the eigenbasis of `solution`.
pub fn c_coefficient<M: FourthMoments>(
    moments: &M,
    solution: &MslcaSolution,
    model: &CovarianceModel,
    (m, r, s, t): (usize, usize, usize, usize),
) -> Result<f64> {
    CoefficientEvaluator::for_solution(moments, solution, model)?.c(m, r, s, t)
}

/// Asymptotic covariance `Σ` of `√n(ρ̂ − ρ)` for a simple spectrum:
/// `σ_ij = Σ_{m,r,s,t} w^(i)_m w^(i)_r w^(j)_s w^(j)_t C(m,r,s,t)` where
/// `w^(i)` are the coordinates of `β^(i)` in the evaluator's basis.
pub fn sigma_matrix(eval: &CoefficientEvaluator, solution: &MslcaSolution) -> Result<DMatrix<f64>> {
    if let Some(g) = solution.groups.iter().find(|g| g.members.len() > 1) {
        return Err(MslcaError::RepeatedEigenvalues {
            rank: g.members[0],
            size: g.members.len(),
        });
    }
    let q = solution.q();
    if eval.q() != q {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("evaluator of dimension {q}"),
            found: format!("{}", eval.q()),
        });
    }
    let coords = if eval.basis() == &solution.beta {
        DMatrix::identity(q, q)
    } else {
        eval.basis().tr_mul(&solution.beta)
    };

    // C is symmetric under m↔r, s↔t and (m,r)↔(s,t); memoise the sorted key.
    let mut cache = std::collections::HashMap::new();
    let mut c_sym = |m: usize, r: usize, s: usize, t: usize| -> Result<f64> {
        let p1 = (m.min(r), m.max(r));
        let p2 = (s.min(t), s.max(t));
        let key = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        if let Some(&v) = cache.get(&key) {
            return Ok(v);
        }
        let v = eval.c(key.0 .0, key.0 .1, key.1 .0, key.1 .1)?;
        cache.insert(key, v);
        Ok(v)
    };

    let mut sigma = DMatrix::zeros(q, q);
    for i in 0..q {
        let wi = coords.column(i);
        for j in i..q {
            let wj = coords.column(j);
            let mut acc = 0.0;
            for m in (0..q).filter(|&m| wi[m] != 0.0) {
                for r in (0..q).filter(|&r| wi[r] != 0.0) {
                    for s in (0..q).filter(|&s| wj[s] != 0.0) {
                        for t in (0..q).filter(|&t| wj[t] != 0.0) {
                            acc += wi[m] * wi[r] * wj[s] * wj[t] * c_sym(m, r, s, t)?;
                        }
                    }
                }
            }
            sigma[(i, j)] = acc;
            sigma[(j, i)] = acc;
        }
    }
    Ok(sigma)
}

/// `Δ(Π_j W Π_j)` for every eigenvalue group: the eigenvalues of the
/// compression of `w` to each eigenspace, in nonincreasing order within the
/// group, concatenated over groups.
pub fn compressed_spectrum(w: &DMatrix<f64>, solution: &MslcaSolution) -> Result<DVector<f64>> {
    let q = solution.q();
    if w.shape() != (q, q) {
        return Err(MslcaError::ShapeMismatch {
            expected: format!("{q}x{q}"),
            found: format!("{}x{}", w.nrows(), w.ncols()),
        });
    }
    let mut out = Vec::with_capacity(q);
    for g in &solution.groups {
        let basis = solution.beta.select_columns(&g.members);
        let compressed = basis.tr_mul(w) * &basis;
        let eig = sym_eig_matrix(&((&compressed + compressed.transpose()) * 0.5))?;
        out.extend(eig.eigenvalues.iter());
    }
    Ok(DVector::from_vec(out))
}

/// Law of `Σ_i λ_i χ²_{1,i}` with independent terms, evaluated by seeded
/// Monte Carlo.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenChiSquareDist {
    weights: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
}

impl EigenChiSquareDist {
    /// Weights in `[−1e-8, 0)` are clamped to zero; anything more negative
    /// is rejected.
    pub fn new(mut weights: Vec<f64>, draws: usize, seed: u64) -> Result<Self> {
        if draws == 0 {
            return Err(MslcaError::InvalidArgument("draws must be positive".into()));
        }
        for w in &mut weights {
            if !w.is_finite() {
                return Err(MslcaError::InvalidArgument(format!("weight {w} is not finite")));
            }
            if *w < -WEIGHT_CLAMP {
                return Err(MslcaError::NegativeWeight(*w));
            }
            *w = w.max(0.0);
        }
        weights.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
        Ok(Self {
            weights,
            draws,
            seed,
        })
    }

    /// Weights from the eigenvalues of `Γ̂`.
    pub fn from_gamma(gamma: &GammaMatrix, draws: usize, seed: u64) -> Result<Self> {
        let eig = sym_eig_matrix(&gamma.matrix)?;
        Self::new(eig.eigenvalues.iter().copied().collect(), draws, seed)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `P(Σ λ_i χ²_{1,i} ≥ observed)`, deterministic given the weights, the
/// observation, the seed and the draw count.
pub fn quad_form_pvalue(dist: &EigenChiSquareDist, observed: f64) -> Result<f64> {
    if !(observed >= 0.0) {
        return Err(MslcaError::InvalidArgument(format!(
            "observed statistic must be nonnegative, got {observed}"
        )));
    }
    if observed == 0.0 {
        return Ok(1.0);
    }
    let chunks = dist.draws.div_ceil(MC_CHUNK);
    let exceed: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
            rng.set_stream(c as u64);
            let len = MC_CHUNK.min(dist.draws - c * MC_CHUNK);
            (0..len)
                .filter(|_| {
                    let q: f64 = dist
                        .weights
                        .iter()
                        .map(|w| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            w * z * z
                        })
                        .sum();
                    q >= observed
                })
                .count()
        })
        .sum();
    Ok(exceed as f64 / dist.draws as f64)
}

/// Estimate of the elliptical scale `4h″(0)`: the average over coordinates
/// of the standardized fourth moment divided by 3.
pub fn elliptical_scale_plugin(whitened: &Dataset) -> f64 {
    let y = whitened.rows();
    let n = y.nrows() as f64;
    let total: f64 = y
        .column_iter()
        .map(|col| {
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / n;
            let m4 = col.iter().map(|v| v.powi(4)).sum::<f64>() / n;
            m4 / (3.0 * m2 * m2)
        })
        .sum();
    total / y.ncols() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn dims(d: &[usize]) -> BlockStructure {
        BlockStructure::new(d.to_vec()).unwrap()
    }

    #[test]
    fn z_without_cross_covariance() {
        let s = dims(&[2, 1]);
        let m = CovarianceModel::new(s.clone(), DMatrix::identity(3, 3)).unwrap();
        let x = BlockVector::from_slice(s, &[1.0, -2.0, 3.0]).unwrap();
        let z = z_operator(&x, &m).unwrap();
        let expect = dmatrix![
            0.0, 0.0, 3.0;
            0.0, 0.0, -6.0;
            3.0, -6.0, 0.0
        ];
        assert_eq!(z.entries(), &expect);
    }

    #[test]
    fn z_scalar_pair() {
        let (r, a, b) = (0.4, 1.3, -0.7);
        let s = dims(&[1, 1]);
        let m = CovarianceModel::new(s.clone(), dmatrix![1.0, r; r, 1.0]).unwrap();
        let x = BlockVector::from_slice(s, &[a, b]).unwrap();
        let z = z_operator(&x, &m).unwrap();
        let expect = a * b - 0.5 * (a * a * r + r * b * b);
        assert!((z.entries()[(0, 1)] - expect).abs() < 1e-15);
        assert!((z.entries()[(1, 0)] - expect).abs() < 1e-15);
        assert_eq!(z.entries()[(0, 0)], 0.0);
    }

    #[test]
    fn fourth_moment_two_point() {
        let d = Dataset::new(dims(&[1, 1]), dmatrix![1.0, 1.0; -1.0, 1.0; 1.0, -1.0; -1.0, -1.0])
            .unwrap();
        let acc = MomentAccumulator::new(&d);
        assert_eq!(acc.fourth_moment(0, 0, 0, 0).unwrap(), 1.0);
        assert_eq!(acc.fourth_moment(0, 0, 1, 1).unwrap(), 1.0);
        assert_eq!(acc.fourth_moment(0, 1, 1, 1).unwrap(), 0.0);
        assert!(acc.fourth_moment(0, 1, 2, 0).is_err());
        assert!((elliptical_scale_plugin(&d) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_index_order() {
        let idx = pair_indices(&dims(&[2, 1, 2]));
        let got: Vec<_> = idx.iter().map(|p| (p.k, p.l, p.i, p.j)).collect();
        assert_eq!(
            got,
            vec![
                (1, 0, 0, 0),
                (1, 0, 0, 1),
                (2, 0, 0, 0),
                (2, 0, 1, 0),
                (2, 0, 0, 1),
                (2, 0, 1, 1),
                (2, 1, 0, 0),
                (2, 1, 1, 0),
            ]
        );
    }

    #[test]
    fn gamma_matches_fourth_moments() {
        let rows = dmatrix![
            0.3, -1.2, 0.8, 0.1;
            1.1, 0.4, -0.6, -0.9;
            -0.7, 0.9, 0.2, 1.4;
            -0.4, -0.1, -0.5, -0.6;
            0.9, 0.5, 1.3, 0.2
        ];
        let s = dims(&[2, 1, 1]);
        let acc = MomentAccumulator::new(&Dataset::new(s.clone(), rows).unwrap());
        let g = build_gamma(&acc);
        assert_eq!(g.dim(), 2 + 2 + 1);
        for (a, pa) in g.index.iter().enumerate() {
            for (b, pb) in g.index.iter().enumerate() {
                let want = acc
                    .fourth_moment(
                        s.offset(pa.k) + pa.i,
                        s.offset(pb.k) + pb.i,
                        s.offset(pa.l) + pa.j,
                        s.offset(pb.l) + pb.j,
                    )
                    .unwrap();
                assert!((g.matrix[(a, b)] - want).abs() < 1e-14);
            }
        }
        assert_eq!(g.matrix, g.matrix.transpose());
    }

    #[test]
    fn c_reduces_to_lambda_without_cross_covariance() {
        let s = dims(&[1, 1, 1]);
        let model = CovarianceModel::new(s.clone(), DMatrix::identity(3, 3)).unwrap();
        let rows = dmatrix![
            0.3, -1.2, 0.8;
            1.1, 0.4, -0.6;
            -0.7, 0.9, 0.2;
            -0.4, -0.1, -0.5
        ];
        let acc = MomentAccumulator::new(&Dataset::new(s, rows).unwrap());
        let eval = CoefficientEvaluator::canonical(&acc, &model).unwrap();
        for bl in [[0, 1, 2, 0], [1, 0, 1, 2]] {
            assert_eq!(eval.gamma([0, 1, 2, 0], bl).unwrap(), 0.0);
            assert_eq!(eval.theta([0, 1, 2, 0], bl).unwrap(), 0.0);
        }
        let mut lambda_sum = 0.0;
        for k in 0..3 {
            for l in (0..3).filter(|&l| l != k) {
                for j in 0..3 {
                    for q in (0..3).filter(|&q| q != j) {
                        lambda_sum += eval.lambda([0, 1, 0, 1], [k, l, j, q]).unwrap();
                    }
                }
            }
        }
        assert!((eval.c(0, 1, 0, 1).unwrap() - lambda_sum).abs() < 1e-14);
        assert!(eval.gamma([0, 0, 0, 0], [1, 1, 0, 2]).is_err());
    }

    #[test]
    fn sigma_rejects_repeated_spectrum() {
        let s = dims(&[1, 1, 1]);
        let v = DMatrix::from_element(3, 3, 0.5) + DMatrix::identity(3, 3) * 0.5;
        let model = CovarianceModel::new(s, v).unwrap();
        let sol = crate::population::solve_mslca(&model, 1e-8).unwrap();
        let eval =
            CoefficientEvaluator::for_solution(&EllipticalMoments::gaussian(&model), &sol, &model)
                .unwrap();
        assert!(matches!(
            sigma_matrix(&eval, &sol),
            Err(MslcaError::RepeatedEigenvalues { rank: 1, size: 2 })
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(matches!(
            EigenChiSquareDist::new(vec![1.0, -1e-6], 10, 0),
            Err(MslcaError::NegativeWeight(_))
        ));
        let d = EigenChiSquareDist::new(vec![0.5, -1e-9, 2.0], 10, 0).unwrap();
        assert_eq!(d.weights(), &[2.0, 0.5, 0.0]);
    }

    #[test]
    fn pvalue_zero_and_determinism() {
        let d = EigenChiSquareDist::new(vec![1.0; 4], 20_000, 9).unwrap();
        assert_eq!(quad_form_pvalue(&d, 0.0).unwrap(), 1.0);
        let a = quad_form_pvalue(&d, 5.0).unwrap();
        let b = quad_form_pvalue(&d, 5.0).unwrap();
        assert_eq!(a, b);
        assert!(quad_form_pvalue(&d, -1.0).is_err());
    }

    #[test]
    fn compressed_spectrum_simple_is_diagonal() {
        let s = dims(&[1, 1, 1]);
        let v = dmatrix![1.0, 0.5, 0.3; 0.5, 1.0, 0.1; 0.3, 0.1, 1.0];
        let model = CovarianceModel::new(s, v).unwrap();
        let sol = crate::population::solve_mslca(&model, 1e-8).unwrap();
        let w = dmatrix![1.0, 0.2, -0.3; 0.2, 0.5, 0.7; -0.3, 0.7, -1.0];
        let got = compressed_spectrum(&w, &sol).unwrap();
        for j in 0..3 {
            let b = sol.beta.column(j);
            assert!((got[j] - b.dot(&(&w * b))).abs() < 1e-14);
        }
    }
}
