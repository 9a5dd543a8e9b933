#![allow(dead_code)]

use mslca::{BlockStructure, CovarianceModel};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `AAᵀ/q + 0.1 I` for a standard Gaussian `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, q: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, q, q);
    let mut v = &a * a.transpose() / q as f64 + DMatrix::identity(q, q) * 0.1;
    v = (&v + v.transpose()) * 0.5;
    v
}

/// Between 2 and 4 blocks with total dimension at most `max_q`.
pub fn random_dims(rng: &mut ChaCha8Rng, max_q: usize) -> Vec<usize> {
    loop {
        let k = rng.random_range(2..=4usize);
        let dims: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3usize)).collect();
        if dims.iter().sum::<usize>() <= max_q {
            return dims;
        }
    }
}

pub fn random_model(rng: &mut ChaCha8Rng, dims: &[usize]) -> CovarianceModel {
    let s = BlockStructure::new(dims.to_vec()).unwrap();
    let v = random_spd(rng, s.q());
    CovarianceModel::new(s, v).unwrap()
}

/// Block-diagonal matrix with the given blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let q: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(q, q);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), b.shape()).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Whitens each diagonal block with the inverse Cholesky factor (a different
/// route from the symmetric inverse square root used by the library).
pub fn cholesky_whitened(v: &DMatrix<f64>, dims: &[usize]) -> DMatrix<f64> {
    let mut maps = Vec::new();
    let mut o = 0;
    for &p in dims {
        let vk = v.view((o, o), (p, p)).clone_owned();
        let l = vk.cholesky().unwrap().l();
        maps.push(l.try_inverse().unwrap());
        o += p;
    }
    let m = block_diag(&maps);
    let w = &m * v * m.transpose();
    let mut w = (&w + w.transpose()) * 0.5;
    o = 0;
    for &p in dims {
        w.view_mut((o, o), (p, p)).copy_from(&DMatrix::identity(p, p));
        o += p;
    }
    w
}

/// Eigenvalues of the pencil `(V − Φ, Φ)` through `L⁻¹ V L⁻ᵀ − I` with
/// `Φ = LLᵀ` block-diagonal, sorted nonincreasing.
pub fn pencil_spectrum(v: &DMatrix<f64>, dims: &[usize]) -> Vec<f64> {
    let w = cholesky_whitened(v, dims);
    let q = w.nrows();
    let mut e: Vec<f64> = (w - DMatrix::identity(q, q))
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}
