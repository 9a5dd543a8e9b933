//! The mutual non-correlation test `H₀: V_kℓ = 0 for all k ≠ ℓ`.
//!
//! The statistic is `Ŝ_n = Σ_{k>ℓ} ‖π_kℓ(T̂_n)‖_F²`. Under `H₀`, `nŜ_n` tends
//! to `WᵀW` with `W ~ N(0, Γ)`, which for an elliptical law reduces to
//! `4h″(0) χ²_d`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::asymptotics::{
    build_gamma, elliptical_scale_plugin, quad_form_pvalue, EigenChiSquareDist, MomentAccumulator,
    DEFAULT_MC_DRAWS,
};
use crate::block::{BlockMatrix, BlockStructure};
use crate::error::{MslcaError, Result};
use crate::estimation::{whiten_with_floor, Dataset, MslcaFit};
use crate::population::lower_block_mass;

const DIAGONAL_TOL: f64 = 1e-12;

/// `Ŝ_n` from `T̂_n`; the diagonal blocks must vanish.
pub fn s_statistic(that: &BlockMatrix) -> Result<f64> {
    let s = that.structure();
    let scale = 1.0 + that.max_abs();
    for k in 0..s.k() {
        let m = that.block(k, k).amax();
        if m > DIAGONAL_TOL * scale {
            return Err(MslcaError::InvalidArgument(format!(
                "diagonal block {} of T is nonzero (max {m:e})",
                k + 1
            )));
        }
    }
    Ok(lower_block_mass(that))
}

/// `d = Σ_{k>ℓ} p_k p_ℓ`.
pub fn degrees_of_freedom(structure: &BlockStructure) -> usize {
    let dims = structure.dims();
    (1..dims.len())
        .map(|k| dims[k] * dims[..k].iter().sum::<usize>())
        .sum()
}

/// `P(χ²_d > x)`.
pub fn chi2_sf(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(d as f64)
        .expect("positive degrees of freedom")
        .sf(x)
}

/// `P(χ²_d ≤ x)`.
pub fn chi2_cdf(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ChiSquared::new(d as f64)
        .expect("positive degrees of freedom")
        .cdf(x)
}

/// How the elliptical scale of the chi-square route is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSpec {
    /// The Gaussian value 1.
    Gaussian,
    /// Fourth-moment plug-in from the whitened sample.
    Plugin,
    /// A user-supplied positive value.
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleProvenance {
    GaussianDefault,
    Plugin,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Chi2,
    General,
}

/// Monte Carlo settings for the general route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSettings {
    pub draws: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            draws: DEFAULT_MC_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "nS")]
    pub ns: f64,
    pub method: TestMethod,
    /// Applied `4h″(0)`; absent for the general route.
    pub scale: Option<f64>,
    pub scale_provenance: Option<ScaleProvenance>,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_eigenvalues: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_draws: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MslcaError::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_consistent(fit: &MslcaFit, data: &Dataset) -> Result<()> {
    if fit.n != data.n() || fit.that.structure() != data.structure() {
        return Err(MslcaError::InvalidArgument(
            "fit was not computed from this dataset".into(),
        ));
    }
    Ok(())
}

/// Chi-square route: `p = P(χ²_d > nŜ_n / scale)`.
///
/// `data` is only read when `scale` is [`ScaleSpec::Plugin`].
pub fn test_chi2(
    fit: &MslcaFit,
    data: &Dataset,
    scale: ScaleSpec,
    alpha: f64,
) -> Result<TestReport> {
    check_alpha(alpha)?;
    let (scale, provenance) = match scale {
        ScaleSpec::Gaussian => (1.0, ScaleProvenance::GaussianDefault),
        ScaleSpec::Plugin => {
            check_consistent(fit, data)?;
            let w = whiten_with_floor(data, fit.vhat.cond_floor())?;
            (elliptical_scale_plugin(&w), ScaleProvenance::Plugin)
        }
        ScaleSpec::Explicit(v) => (v, ScaleProvenance::User),
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MslcaError::InvalidArgument(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let s = s_statistic(&fit.that)?;
    let ns = fit.n as f64 * s;
    let d = degrees_of_freedom(fit.that.structure());
    let p_value = chi2_sf(d, ns / scale);
    Ok(TestReport {
        n: fit.n,
        d,
        s,
        ns,
        method: TestMethod::Chi2,
        scale: Some(scale),
        scale_provenance: Some(provenance),
        p_value,
        alpha,
        reject: p_value < alpha,
        gamma_eigenvalues: None,
        mc_draws: None,
        warnings: Vec::new(),
    })
}

/// General route: `p = P(Σ λ_i χ²_{1,i} ≥ nŜ_n)` with `λ_i` the eigenvalues
/// of `Γ̂` estimated from the whitened sample.
pub fn test_general(
    fit: &MslcaFit,
    data: &Dataset,
    alpha: f64,
    mc: McSettings,
) -> Result<TestReport> {
    check_alpha(alpha)?;
    check_consistent(fit, data)?;
    let d = degrees_of_freedom(data.structure());
    let mut warnings = Vec::new();
    if data.n() < 10 * d {
        warnings.push(format!(
            "n = {} is below 10·d = {}; the fourth-moment matrix is poorly estimated",
            data.n(),
            10 * d
        ));
    }
    let w = whiten_with_floor(data, fit.vhat.cond_floor())?;
    let gamma = build_gamma(&MomentAccumulator::new(&w));
    let dist = EigenChiSquareDist::from_gamma(&gamma, mc.draws, mc.seed)?;
    let s = s_statistic(&fit.that)?;
    let ns = fit.n as f64 * s;
    let p_value = quad_form_pvalue(&dist, ns)?;
    Ok(TestReport {
        n: fit.n,
        d,
        s,
        ns,
        method: TestMethod::General,
        scale: None,
        scale_provenance: None,
        p_value,
        alpha,
        reject: p_value < alpha,
        gamma_eigenvalues: Some(dist.weights().to_vec()),
        mc_draws: Some(mc.draws),
        warnings,
    })
}
