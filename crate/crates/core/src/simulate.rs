//! Samplers and reproducible Monte Carlo experiments.
//!
//! Every replication owns a ChaCha stream derived from
//! `(master seed, size index, replication index)`, so results do not depend
//! on how replications are scheduled across threads.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    lower_block_vector, sigma_matrix, z_operator, CoefficientEvaluator,
    EllipticalMoments, MomentAccumulator, DEFAULT_MC_DRAWS,
};
use crate::block::{psd_sqrt, BlockStructure, BlockVector};
use crate::error::{MslcaError, Result};
use crate::estimation::{align_sign, fit_mslca, projector_distance, whiten, Dataset, MslcaFit};
use crate::noncorr::{
    chi2_cdf, degrees_of_freedom, test_chi2, test_general, McSettings, ScaleSpec, TestMethod,
};
use crate::population::{
    build_t, solve_mslca, CovarianceModel, MslcaSolution, DEFAULT_GROUP_TOL,
};

/// RNG for replication `rep` at size index `size_index`.
pub fn replication_rng(master: u64, size_index: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((size_index as u64) << 32) | rep as u64);
    rng
}

/// Draws rows `V^{1/2} g` with `g` standard normal.
pub fn sample_gaussian(model: &CovarianceModel, n: usize, seed: u64) -> Result<Dataset> {
    let root = psd_sqrt(model.v().entries())?;
    gaussian_rows(model.structure(), &root, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Draws rows `V^{1/2} g √((ν−2)/w)` with `w ~ χ²_ν`, so that the covariance
/// is exactly `V`.
pub fn sample_student_t(model: &CovarianceModel, nu: f64, n: usize, seed: u64) -> Result<Dataset> {
    let root = psd_sqrt(model.v().entries())?;
    student_t_rows(
        model.structure(),
        &root,
        nu,
        n,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn gaussian_rows<R: Rng + ?Sized>(
    structure: &BlockStructure,
    root: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let q = structure.q();
    let g = DMatrix::from_row_iterator(n, q, (0..n * q).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Dataset::new(structure.clone(), g * root)
}

fn student_t_rows<R: Rng + ?Sized>(
    structure: &BlockStructure,
    root: &DMatrix<f64>,
    nu: f64,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if !(nu > 4.0) {
        return Err(MslcaError::NuTooSmall(nu));
    }
    let q = structure.q();
    let chi = ChiSquared::new(nu).map_err(|e| MslcaError::InvalidArgument(e.to_string()))?;
    let mut g = DMatrix::zeros(n, q);
    for i in 0..n {
        for j in 0..q {
            g[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        let w: f64 = chi.sample(rng);
        let factor = ((nu - 2.0) / w).sqrt();
        g.row_mut(i).scale_mut(factor);
    }
    Dataset::new(structure.clone(), g * root)
}

/// Distribution of the simulated rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Gaussian,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Consistency,
    CltCheck,
    CoeffClt,
    NullDist,
    Power,
}

fn default_alpha_levels() -> Vec<f64> {
    vec![0.05]
}

fn default_methods() -> Vec<TestMethod> {
    vec![TestMethod::Chi2]
}

fn default_mc_draws() -> usize {
    DEFAULT_MC_DRAWS
}

fn default_z_draws() -> usize {
    200_000
}

fn default_group_tol() -> f64 {
    DEFAULT_GROUP_TOL
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Gaussian
}

/// A Monte Carlo experiment, read from a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationPlan {
    pub experiment: ExperimentKind,
    pub dims: Vec<usize>,
    /// Full `q × q` covariance; the identity when omitted.
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub nu: Option<f64>,
    pub sizes: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha_levels")]
    pub alpha_levels: Vec<f64>,
    /// Test routes evaluated by `null-dist` and `power`.
    #[serde(default = "default_methods")]
    pub methods: Vec<TestMethod>,
    /// Monte Carlo draws per general-route p-value.
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    /// Fresh single draws of `Z` used as the reference by `clt-check`.
    #[serde(default = "default_z_draws")]
    pub z_draws: usize,
    #[serde(default = "default_group_tol")]
    pub group_tol: f64,
    #[serde(default)]
    pub output: Option<String>,
}

impl SimulationPlan {
    /// A plan with defaults for every optional field.
    pub fn new(
        experiment: ExperimentKind,
        dims: Vec<usize>,
        sizes: Vec<usize>,
        replications: usize,
        seed: u64,
    ) -> Self {
        Self {
            experiment,
            dims,
            covariance: None,
            sampler: default_sampler(),
            nu: None,
            sizes,
            replications,
            seed,
            alpha_levels: default_alpha_levels(),
            methods: default_methods(),
            mc_draws: default_mc_draws(),
            z_draws: default_z_draws(),
            group_tol: default_group_tol(),
            output: None,
        }
    }

    pub fn with_covariance(mut self, v: &DMatrix<f64>) -> Self {
        self.covariance = Some(v.row_iter().map(|r| r.iter().copied().collect()).collect());
        self
    }

    pub fn with_student_t(mut self, nu: f64) -> Self {
        self.sampler = SamplerKind::StudentT;
        self.nu = Some(nu);
        self
    }

    pub fn model(&self) -> Result<CovarianceModel> {
        let structure = BlockStructure::new(self.dims.clone())?;
        let q = structure.q();
        let v = match &self.covariance {
            None => DMatrix::identity(q, q),
            Some(rows) => {
                if rows.len() != q || rows.iter().any(|r| r.len() != q) {
                    return Err(MslcaError::ShapeMismatch {
                        expected: format!("{q}x{q} covariance"),
                        found: format!("{} rows", rows.len()),
                    });
                }
                DMatrix::from_fn(q, q, |i, j| rows[i][j])
            }
        };
        CovarianceModel::new(structure, v)
    }

    /// Checks every precondition of the requested experiment.
    pub fn validate(&self) -> Result<CovarianceModel> {
        let model = self.model()?;
        if self.replications == 0 {
            return Err(MslcaError::InvalidArgument("replications must be at least 1".into()));
        }
        if self.sizes.is_empty() {
            return Err(MslcaError::InvalidArgument("sizes must not be empty".into()));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| n < 2) {
            return Err(MslcaError::InsufficientSample { n, required: 2 });
        }
        if self.sampler == SamplerKind::StudentT {
            match self.nu {
                Some(nu) if nu > 4.0 => {}
                Some(nu) => return Err(MslcaError::NuTooSmall(nu)),
                None => {
                    return Err(MslcaError::InvalidArgument(
                        "student-t sampler needs nu".into(),
                    ))
                }
            }
        }
        if let Some(a) = self.alpha_levels.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(MslcaError::InvalidArgument(format!("alpha level {a} outside (0, 1)")));
        }
        if self.methods.contains(&TestMethod::General) && self.mc_draws == 0 {
            return Err(MslcaError::InvalidArgument("mc_draws must be positive".into()));
        }
        match self.experiment {
            ExperimentKind::CltCheck | ExperimentKind::CoeffClt if !model.is_whitened(1e-12) => {
                return Err(MslcaError::InvalidArgument(
                    "experiment requires identity within-set covariance blocks".into(),
                ))
            }
            ExperimentKind::NullDist if !model.is_mutually_uncorrelated(0.0) => {
                return Err(MslcaError::InvalidArgument(
                    "null-dist requires all cross-covariance blocks to vanish".into(),
                ))
            }
            _ => {}
        }
        if self.experiment == ExperimentKind::CltCheck && self.z_draws < 2 {
            return Err(MslcaError::InvalidArgument("z_draws must be at least 2".into()));
        }
        if self.experiment == ExperimentKind::CoeffClt {
            let sol = solve_mslca(&model, self.group_tol)?;
            if let Some(g) = sol.groups.iter().find(|g| g.members.len() > 1) {
                return Err(MslcaError::RepeatedEigenvalues {
                    rank: g.members[0],
                    size: g.members.len(),
                });
            }
        }
        Ok(model)
    }

    /// `4h″(0)` of the sampling law.
    pub fn true_scale(&self) -> f64 {
        match (self.sampler, self.nu) {
            (SamplerKind::StudentT, Some(nu)) => (nu - 2.0) / (nu - 4.0),
            _ => 1.0,
        }
    }
}

/// Values monitored in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub n: usize,
    pub replication: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub stats: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub plan: SimulationPlan,
    pub records: Vec<Record>,
    pub summary: Vec<SizeSummary>,
    /// Quantities that do not belong to a single sample size (reference
    /// values and ratios between sizes).
    pub overall: BTreeMap<String, f64>,
    pub metadata: Metadata,
}

impl ExperimentResult {
    pub fn records_for(&self, n: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.n == n)
    }

    pub fn column(&self, n: usize, key: &str) -> Vec<f64> {
        self.records_for(n)
            .map(|r| r.values[key])
            .collect()
    }

    pub fn stat(&self, n: usize, key: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.n == n)
            .and_then(|s| s.stats.get(key).copied())
    }
}

struct Runner<'a> {
    plan: &'a SimulationPlan,
    model: CovarianceModel,
    root: DMatrix<f64>,
}

impl Runner<'_> {
    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        match self.plan.sampler {
            SamplerKind::Gaussian => gaussian_rows(self.model.structure(), &self.root, n, rng),
            SamplerKind::StudentT => student_t_rows(
                self.model.structure(),
                &self.root,
                self.plan.nu.unwrap_or(f64::NAN),
                n,
                rng,
            ),
        }
    }

    /// Runs `f` for every `(size, replication)` and keeps the record order
    /// fixed regardless of scheduling.
    fn replicate<F>(&self, f: F) -> Result<Vec<Record>>
    where
        F: Fn(usize, &Dataset, &mut ChaCha8Rng) -> Result<BTreeMap<String, f64>> + Sync,
    {
        let mut out = Vec::with_capacity(self.plan.sizes.len() * self.plan.replications);
        for (si, &n) in self.plan.sizes.iter().enumerate() {
            let batch = (0..self.plan.replications)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = replication_rng(self.plan.seed, si, rep);
                    let data = self.draw(n, &mut rng)?;
                    let values = f(n, &data, &mut rng)?;
                    Ok(Record {
                        n,
                        replication: rep,
                        values,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(batch);
        }
        Ok(out)
    }
}

/// Runs the experiment named in the plan.
pub fn run(plan: &SimulationPlan) -> Result<ExperimentResult> {
    let start = Instant::now();
    let model = plan.validate()?;
    let root = psd_sqrt(model.v().entries())?;
    let runner = Runner { plan, model, root };
    let (records, summary, overall) = match plan.experiment {
        ExperimentKind::Consistency => consistency(&runner)?,
        ExperimentKind::CltCheck => clt_check(&runner)?,
        ExperimentKind::CoeffClt => coeff_clt(&runner)?,
        ExperimentKind::NullDist => null_dist(&runner)?,
        ExperimentKind::Power => power(&runner)?,
    };
    Ok(ExperimentResult {
        plan: plan.clone(),
        records,
        summary,
        overall,
        metadata: Metadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    })
}

fn require(plan: &SimulationPlan, kind: ExperimentKind) -> Result<()> {
    if plan.experiment != kind {
        return Err(MslcaError::InvalidArgument(format!(
            "plan describes {:?}, not {kind:?}",
            plan.experiment
        )));
    }
    Ok(())
}

/// Errors of `T̂_n`, `ρ̂` and sign-aligned `β̂` against the population values.
pub fn run_consistency(plan: &SimulationPlan) -> Result<ExperimentResult> {
    require(plan, ExperimentKind::Consistency)?;
    run(plan)
}

/// Covariance of `√n(T̂_n − T)` against that of `Z`.
pub fn run_clt_check(plan: &SimulationPlan) -> Result<ExperimentResult> {
    require(plan, ExperimentKind::CltCheck)?;
    run(plan)
}

/// Variance of `√n(ρ̂_j − ρ_j)` against `σ_jj`.
pub fn run_coeff_clt(plan: &SimulationPlan) -> Result<ExperimentResult> {
    require(plan, ExperimentKind::CoeffClt)?;
    run(plan)
}

/// Null distribution of `nŜ_n`, empirical sizes and p-value uniformity.
pub fn run_null_dist(plan: &SimulationPlan) -> Result<ExperimentResult> {
    require(plan, ExperimentKind::NullDist)?;
    run(plan)
}

/// Rejection rates under an alternative.
pub fn run_power(plan: &SimulationPlan) -> Result<ExperimentResult> {
    require(plan, ExperimentKind::Power)?;
    run(plan)
}

type Parts = (Vec<Record>, Vec<SizeSummary>, BTreeMap<String, f64>);

fn consistency(r: &Runner) -> Result<Parts> {
    let t = build_t(&r.model)?;
    let sol = solve_mslca(&r.model, r.plan.group_tol)?;
    let records = r.replicate(|_, data, _| {
        let fit = fit_mslca(data, r.plan.group_tol)?;
        let mut v = BTreeMap::new();
        v.insert("t_error".into(), (fit.that.entries() - t.entries()).norm());
        for j in 0..sol.q() {
            v.insert(key("rho_error", j), (fit.solution.rho[j] - sol.rho[j]).abs());
            v.insert(key("beta_error", j), direction_error(&fit.solution, &sol, j));
        }
        Ok(v)
    })?;
    let summary = size_summaries(r.plan, &records, |_, recs| Ok(medians(recs)))?;
    let mut overall = BTreeMap::new();
    for w in summary.windows(2) {
        overall.insert(
            format!("t_error_ratio_{}_{}", w[0].n, w[1].n),
            w[0].stats["median_t_error"] / w[1].stats["median_t_error"],
        );
    }
    Ok((records, summary, overall))
}

/// `‖align_sign(β̂_j, β_j) − β_j‖` for a simple eigenvalue; the projector
/// distance of the whole group otherwise.
fn direction_error(fitted: &MslcaSolution, truth: &MslcaSolution, j: usize) -> f64 {
    let group = truth.group_of(j);
    if group.members.len() == 1 {
        let bhat = fitted.beta_vector(j);
        let b = truth.beta_vector(j);
        (align_sign(&bhat, &b).values() - b.values()).norm()
    } else {
        projector_distance(
            &fitted.beta.select_columns(&group.members),
            &truth.beta.select_columns(&group.members),
        )
    }
}

fn clt_check(r: &Runner) -> Result<Parts> {
    let t = build_t(&r.model)?;
    let t_vec = lower_block_vector(&t);
    let m = t_vec.len();
    let s = r.model.structure().clone();

    let records = r.replicate(|n, data, _| {
        let fit = fit_mslca(data, r.plan.group_tol)?;
        let dev = (lower_block_vector(&fit.that) - &t_vec) * (n as f64).sqrt();
        let mut v = BTreeMap::new();
        for (i, x) in dev.iter().enumerate() {
            v.insert(key("entry", i), *x);
        }
        let diag = (0..s.k())
            .map(|k| fit.that.block(k, k).amax())
            .fold(0.0, f64::max);
        v.insert("diag_block_max".into(), diag);
        Ok(v)
    })?;

    // reference draws use a stream index past every sample size
    let zs = r.plan.sizes.len();
    let chunk = 4_096;
    let chunks = r.plan.z_draws.div_ceil(chunk);
    let z_rows: Vec<DVector<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replication_rng(r.plan.seed, zs, c);
            let len = chunk.min(r.plan.z_draws - c * chunk);
            let data = r.draw(len, &mut rng)?;
            (0..len)
                .map(|i| Ok(lower_block_vector(&z_operator(&data.row(i), &r.model)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let z_cov = covariance_of(&z_rows);

    let mut overall = BTreeMap::new();
    for a in 0..m {
        for b in 0..=a {
            overall.insert(format!("z_cov_{a}_{b}"), z_cov[(a, b)]);
        }
    }
    let summary = size_summaries(r.plan, &records, |_, recs| {
        let rows: Vec<DVector<f64>> = recs
            .iter()
            .map(|rec| DVector::from_iterator(m, (0..m).map(|i| rec.values[&key("entry", i)])))
            .collect();
        let t_cov = covariance_of(&rows);
        let mut stats = BTreeMap::new();
        for a in 0..m {
            for b in 0..=a {
                stats.insert(format!("t_cov_{a}_{b}"), t_cov[(a, b)]);
            }
        }
        let diff = &t_cov - &z_cov;
        stats.insert("rel_discrepancy".into(), diff.norm() / z_cov.norm());
        stats.insert("max_entry_discrepancy".into(), diff.amax() / z_cov.amax());
        stats.insert(
            "diag_block_max".into(),
            recs.iter().map(|x| x.values["diag_block_max"]).fold(0.0, f64::max),
        );
        Ok(stats)
    })?;
    Ok((records, summary, overall))
}

fn coeff_clt(r: &Runner) -> Result<Parts> {
    let sol = solve_mslca(&r.model, r.plan.group_tol)?;
    let q = sol.q();
    let moments = EllipticalMoments {
        cov: r.model.v().entries().clone(),
        scale: r.plan.true_scale(),
    };
    let eval = CoefficientEvaluator::for_solution(&moments, &sol, &r.model)?;
    let sigma = sigma_matrix(&eval, &sol)?;

    let records = r.replicate(|n, data, _| {
        let fit = fit_mslca(data, r.plan.group_tol)?;
        let rho = &fit.solution.rho;
        let mut v = BTreeMap::new();
        for j in 0..q {
            v.insert(key("scaled_error", j), (n as f64).sqrt() * (rho[j] - sol.rho[j]));
        }
        let sorted = (1..q).all(|j| rho[j] <= rho[j - 1]);
        v.insert("sorted".into(), if sorted { 1.0 } else { 0.0 });
        Ok(v)
    })?;

    let mut overall = BTreeMap::new();
    for j in 0..q {
        overall.insert(key("sigma", j), sigma[(j, j)]);
    }
    let summary = size_summaries(r.plan, &records, |si, recs| {
        let mut stats = BTreeMap::new();
        for j in 0..q {
            let xs: Vec<f64> = recs.iter().map(|x| x.values[&key("scaled_error", j)]).collect();
            let var = sample_variance(&xs);
            stats.insert(key("variance", j), var);
            stats.insert(key("variance_ratio", j), var / sigma[(j, j)]);
        }
        // plug-in Σ from the first replication of this size
        let mut rng = replication_rng(r.plan.seed, si, 0);
        let data = r.draw(r.plan.sizes[si], &mut rng)?;
        let plug = plugin_sigma(&data, r.plan.group_tol)?;
        for j in 0..q {
            stats.insert(key("sigma_plugin", j), plug[(j, j)]);
        }
        stats.insert(
            "sorted_fraction".into(),
            recs.iter().map(|x| x.values["sorted"]).sum::<f64>() / recs.len() as f64,
        );
        Ok(stats)
    })?;
    Ok((records, summary, overall))
}

/// `Σ` estimated from a sample: whiten, refit, and evaluate the
/// coefficients with sample fourth moments.
pub fn plugin_sigma(data: &Dataset, group_tol: f64) -> Result<DMatrix<f64>> {
    let w = whiten(data)?;
    let fit: MslcaFit = fit_mslca(&w, group_tol)?;
    let acc = MomentAccumulator::new(&w);
    let eval = CoefficientEvaluator::for_solution(&acc, &fit.solution, &fit.vhat)?;
    sigma_matrix(&eval, &fit.solution)
}

fn null_dist(r: &Runner) -> Result<Parts> {
    let d = degrees_of_freedom(r.model.structure());
    let true_scale = r.plan.true_scale();
    let general = r.plan.methods.contains(&TestMethod::General);
    let records = r.replicate(|_, data, rng| {
        let fit = fit_mslca(data, r.plan.group_tol)?;
        let unit = test_chi2(&fit, data, ScaleSpec::Gaussian, 0.5)?;
        let scaled = test_chi2(&fit, data, ScaleSpec::Explicit(true_scale), 0.5)?;
        let plugin = test_chi2(&fit, data, ScaleSpec::Plugin, 0.5)?;
        let mut v = BTreeMap::new();
        v.insert("ns".into(), unit.ns);
        v.insert("p_chi2".into(), unit.p_value);
        v.insert("p_chi2_scaled".into(), scaled.p_value);
        v.insert("p_chi2_plugin".into(), plugin.p_value);
        v.insert("plugin_scale".into(), plugin.scale.unwrap_or(f64::NAN));
        if general {
            let mc = McSettings {
                draws: r.plan.mc_draws,
                seed: rng.next_u64(),
            };
            v.insert("p_general".into(), test_general(&fit, data, 0.5, mc)?.p_value);
        }
        Ok(v)
    })?;
    let summary = size_summaries(r.plan, &records, |_, recs| {
        let col = |k: &str| recs.iter().map(|x| x.values[k]).collect::<Vec<f64>>();
        let ns = col("ns");
        let mut stats = BTreeMap::new();
        stats.insert("mean_ns".into(), ns.iter().sum::<f64>() / ns.len() as f64);
        let scaled: Vec<f64> = ns.iter().map(|x| x / true_scale).collect();
        stats.insert("ks_chi2".into(), ks_distance(&scaled, |x| chi2_cdf(d, x)));
        stats.insert("ks_chi2_unscaled".into(), ks_distance(&ns, |x| chi2_cdf(d, x)));
        stats.insert("median_plugin_scale".into(), median(&col("plugin_scale")));
        let mut routes = vec!["p_chi2", "p_chi2_scaled", "p_chi2_plugin"];
        if general {
            routes.push("p_general");
        }
        for route in routes {
            let p = col(route);
            stats.insert(format!("ks_uniform_{route}"), ks_distance(&p, |x| x.clamp(0.0, 1.0)));
            for &alpha in &r.plan.alpha_levels {
                stats.insert(format!("size_{route}@{alpha}"), rejection_rate(&p, alpha));
            }
        }
        Ok(stats)
    })?;
    let mut overall = BTreeMap::new();
    overall.insert("d".into(), d as f64);
    overall.insert("true_scale".into(), true_scale);
    Ok((records, summary, overall))
}

fn power(r: &Runner) -> Result<Parts> {
    let general = r.plan.methods.contains(&TestMethod::General);
    let chi2 = r.plan.methods.contains(&TestMethod::Chi2);
    let records = r.replicate(|_, data, rng| {
        let fit = fit_mslca(data, r.plan.group_tol)?;
        let mut v = BTreeMap::new();
        if chi2 {
            let rep = test_chi2(&fit, data, ScaleSpec::Gaussian, 0.5)?;
            v.insert("ns".into(), rep.ns);
            v.insert("p_chi2".into(), rep.p_value);
        }
        if general {
            let mc = McSettings {
                draws: r.plan.mc_draws,
                seed: rng.next_u64(),
            };
            let rep = test_general(&fit, data, 0.5, mc)?;
            v.insert("ns".into(), rep.ns);
            v.insert("p_general".into(), rep.p_value);
        }
        Ok(v)
    })?;
    let summary = size_summaries(r.plan, &records, |_, recs| {
        let mut stats = BTreeMap::new();
        for (on, route) in [(chi2, "p_chi2"), (general, "p_general")] {
            if !on {
                continue;
            }
            let p: Vec<f64> = recs.iter().map(|x| x.values[route]).collect();
            for &alpha in &r.plan.alpha_levels {
                stats.insert(format!("reject_{route}@{alpha}"), rejection_rate(&p, alpha));
            }
        }
        Ok(stats)
    })?;
    Ok((records, summary, BTreeMap::new()))
}

fn size_summaries<F>(plan: &SimulationPlan, records: &[Record], f: F) -> Result<Vec<SizeSummary>>
where
    F: Fn(usize, &[&Record]) -> Result<BTreeMap<String, f64>>,
{
    plan.sizes
        .iter()
        .enumerate()
        .map(|(si, &n)| {
            let recs: Vec<&Record> = records.iter().filter(|r| r.n == n).collect();
            Ok(SizeSummary { n, stats: f(si, &recs)? })
        })
        .collect()
}

fn medians(recs: &[&Record]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(first) = recs.first() {
        for k in first.values.keys() {
            let col: Vec<f64> = recs.iter().map(|r| r.values[k]).collect();
            out.insert(format!("median_{k}"), median(&col));
        }
    }
    out
}

fn key(prefix: &str, j: usize) -> String {
    format!("{prefix}_{j}")
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Unbiased covariance matrix of a list of vectors.
pub fn covariance_of(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let m = rows[0].len();
    let n = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(m), |acc, r| acc + r) / n;
    let mut cov = DMatrix::zeros(m, m);
    for r in rows {
        let c = r - &mean;
        cov += &c * c.transpose();
    }
    cov / (n - 1.0)
}

/// Fraction of p-values strictly below `alpha`.
pub fn rejection_rate(pvalues: &[f64], alpha: f64) -> f64 {
    pvalues.iter().filter(|&&p| p < alpha).count() as f64 / pvalues.len() as f64
}

/// Kolmogorov–Smirnov distance `sup_x |F_n(x) − F(x)|` of a sample from a
/// continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Convenience: one row of a dataset as a block vector.
pub fn row_vector(data: &Dataset, i: usize) -> BlockVector {
    data.row(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn pair_model(r: f64) -> CovarianceModel {
        CovarianceModel::new(
            BlockStructure::new(vec![1, 1]).unwrap(),
            dmatrix![1.0, r; r, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn samplers_are_deterministic() {
        let m = pair_model(0.3);
        assert_eq!(sample_gaussian(&m, 50, 7).unwrap(), sample_gaussian(&m, 50, 7).unwrap());
        assert_ne!(sample_gaussian(&m, 50, 7).unwrap(), sample_gaussian(&m, 50, 8).unwrap());
        assert_eq!(
            sample_student_t(&m, 6.0, 50, 1).unwrap(),
            sample_student_t(&m, 6.0, 50, 1).unwrap()
        );
    }

    #[test]
    fn single_row_sample() {
        let d = sample_gaussian(&pair_model(0.0), 1, 0).unwrap();
        assert_eq!(d.n(), 1);
        assert!(d.rows().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn t_requires_four_moments() {
        assert!(matches!(
            sample_student_t(&pair_model(0.0), 4.0, 10, 0),
            Err(MslcaError::NuTooSmall(_))
        ));
    }

    #[test]
    fn ks_of_perfect_grid() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_distance(&xs, |x| x) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn median_and_variance() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((sample_variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn plan_preconditions() {
        let plan = SimulationPlan::new(ExperimentKind::NullDist, vec![1, 1], vec![10], 1, 0)
            .with_covariance(&dmatrix![1.0, 0.2; 0.2, 1.0]);
        assert!(plan.validate().is_err());
        let plan = SimulationPlan::new(ExperimentKind::NullDist, vec![1, 1], vec![10], 1, 0)
            .with_student_t(3.0);
        assert!(matches!(plan.validate(), Err(MslcaError::NuTooSmall(_))));
        let plan = SimulationPlan::new(ExperimentKind::CltCheck, vec![1, 1], vec![10], 1, 0)
            .with_covariance(&dmatrix![2.0, 0.0; 0.0, 1.0]);
        assert!(plan.validate().is_err());
        let plan = SimulationPlan::new(ExperimentKind::Power, vec![1, 1], vec![10], 0, 0);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn run_checks_kind() {
        let plan = SimulationPlan::new(ExperimentKind::Power, vec![1, 1], vec![20], 2, 0);
        assert!(run_null_dist(&plan).is_err());
        let res = run_power(&plan).unwrap();
        assert_eq!(res.records.len(), 2);
    }

    #[test]
    fn plan_json_round_trip() {
        let json = r#"{"experiment":"null-dist","dims":[2,2,2],"sizes":[100],"replications":3,
                       "sampler":"student-t","nu":10,"methods":["chi2","general"]}"#;
        let plan: SimulationPlan = serde_json::from_str(json).unwrap();
        assert_eq!(plan.experiment, ExperimentKind::NullDist);
        assert_eq!(plan.sampler, SamplerKind::StudentT);
        assert_eq!(plan.seed, 0);
        assert_eq!(plan.alpha_levels, vec![0.05]);
        let back: SimulationPlan =
            serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
        assert!(serde_json::from_str::<SimulationPlan>(r#"{"experiment":"power","dims":[1,1],"sizes":[5],"replications":1,"bogus":1}"#).is_err());
    }
}
