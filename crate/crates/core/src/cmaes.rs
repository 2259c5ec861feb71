//! CMA-ES over the latent space.
//!
//! Each step draws a population from `N(mu, sigma^2 S)`, scores it with a
//! [`LatentObjective`] (redrawing up to `max_attempts` times while fewer than
//! 80% of the draws decode validly), ranks it and updates the sampler.
//! Two covariance combinations are available: `Standard` is the usual convex
//! combination of the old matrix, the rank-one path term and the rank-mu
//! term; `PaperLiteral` adds the two separately decayed estimates
//! `S1 = (1-b2) S + b2 R` and `S2 = (1-b4) S + b4 y y^T` as they are written.

use std::io::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SeedStream;
use crate::surrogate::{predict_from_latent_batch, SurrogateModel};
use crate::util::parallel_map;
use crate::wae::WaeModel;

pub const HYDRO_WEIGHT: f64 = 0.5;
pub const PENALTY_PER_INVALID: f64 = 0.1;
/// A batch is accepted once this fraction of it decodes validly.
pub const VALIDITY_TARGET: f64 = 0.8;
/// Invalid individuals are dropped before ranking below this invalid fraction.
pub const DROP_INVALID_BELOW: f64 = 0.2;
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Bounds on `trace(S) / d` outside which the literal mode renormalizes.
const LITERAL_SCALE_RANGE: (f64, f64) = (1e-8, 1e8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CovarianceMode {
    Standard,
    PaperLiteral,
}

/// Strategy constants for dimension `dim` and a ranked population of `ranked`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub dim: usize,
    /// Number of selected individuals.
    pub k: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    /// Mean learning rate (`b`).
    pub mean_rate: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    /// Evolution-path rate (`b3`).
    pub c_c: f64,
    /// Rank-one rate (`b4`).
    pub c_1: f64,
    /// Rank-mu rate (`b2`).
    pub c_mu: f64,
    /// `E||N(0, I)||`.
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(dim: usize, ranked: usize) -> Self {
        let n = dim as f64;
        let k = (ranked / 2).max(1);
        let raw: Vec<f64> = (1..=k).map(|i| (k as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        StrategyParams {
            dim,
            k,
            weights,
            mu_eff,
            mean_rate: 1.0,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Weighted recombination: `mu + b * sum_n w_n (x_n - mu)`.
pub fn recombine_mean(mean: &[f64], selected: &[&[f64]], weights: &[f64], b: f64) -> Vec<f64> {
    let mut out = mean.to_vec();
    for (x, w) in selected.iter().zip(weights) {
        for ((o, xi), m) in out.iter_mut().zip(x.iter()).zip(mean) {
            *o += b * w * (xi - m);
        }
    }
    out
}

/// `(1 - b3) y + sqrt(b3 (2 - b3) w_eff) (mu_new - mu_old) / sigma`.
pub fn evolution_path(y: &[f64], mean_new: &[f64], mean_old: &[f64], sigma: f64, b3: f64, w_eff: f64) -> Vec<f64> {
    let coef = (b3 * (2.0 - b3) * w_eff).sqrt();
    y.iter()
        .zip(mean_new.iter().zip(mean_old))
        .map(|(yi, (n, o))| (1.0 - b3) * yi + coef * (n - o) / sigma)
        .collect()
}

/// `sum_n w_n ((x_n - mu) / sigma) ((x_n - mu) / sigma)^T`.
pub fn rank_mu_estimate(selected: &[&[f64]], mean: &[f64], sigma: f64, weights: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    let mut out = DMatrix::zeros(d, d);
    for (x, w) in selected.iter().zip(weights) {
        let v = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, m)| (a - m) / sigma));
        out += &v * v.transpose() * *w;
    }
    out
}

/// Literal combination; returns `(S1, S2, S1 + S2)`.
pub fn combine_literal(
    cov: &DMatrix<f64>,
    rank_mu: &DMatrix<f64>,
    path: &[f64],
    b2: f64,
    b4: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let y = DVector::from_column_slice(path);
    let s1 = cov * (1.0 - b2) + rank_mu * b2;
    let s2 = cov * (1.0 - b4) + &y * y.transpose() * b4;
    let sum = &s1 + &s2;
    (s1, s2, sum)
}

/// Convex combination with the stall correction used when the path update was held.
pub fn combine_standard(
    cov: &DMatrix<f64>,
    rank_mu: &DMatrix<f64>,
    path: &[f64],
    params: &StrategyParams,
    path_held: bool,
) -> DMatrix<f64> {
    let y = DVector::from_column_slice(path);
    let correction = if path_held {
        params.c_1 * params.c_c * (2.0 - params.c_c)
    } else {
        0.0
    };
    cov * (1.0 - params.c_1 - params.c_mu + correction) + &y * y.transpose() * params.c_1 + rank_mu * params.c_mu
}

/// Gaussian sampler `N(mean, sigma^2 cov)` plus the CMA-ES paths.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub path: Vec<f64>,
    pub sigma_path: Vec<f64>,
    pub iteration: u64,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Updated,
    /// Nothing to rank; the state was left unchanged.
    EmptyPopulation,
}

impl SamplerState {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain {
                operation: "initial step size",
                value: sigma,
            });
        }
        if mean.is_empty() {
            return Err(Error::Empty("sampler mean"));
        }
        let d = mean.len();
        Ok(SamplerState {
            mean,
            sigma,
            cov: DMatrix::identity(d, d),
            path: vec![0.0; d],
            sigma_path: vec![0.0; d],
            iteration: 0,
            basis: DMatrix::identity(d, d),
            scales: DVector::from_element(d, 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Replaces the covariance matrix and refreshes its factorization.
    pub fn set_covariance(&mut self, cov: DMatrix<f64>) {
        self.cov = cov;
        self.refresh();
    }

    /// Symmetrizes `cov`, floors its eigenvalues at [`EIGEN_FLOOR`] (rebuilding
    /// the matrix if any were raised) and caches the factorization.
    fn refresh(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let mut values = eig.eigenvalues.clone();
        let mut floored = false;
        for v in values.iter_mut() {
            if !(*v >= EIGEN_FLOOR) {
                *v = EIGEN_FLOOR;
                floored = true;
            }
        }
        self.cov = if floored {
            let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
            (&rebuilt + rebuilt.transpose()) * 0.5
        } else {
            sym
        };
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
    }

    /// Smallest eigenvalue of the cached factorization.
    pub fn min_eigenvalue(&self) -> f64 {
        self.scales.iter().map(|s| s * s).fold(f64::INFINITY, f64::min)
    }

    /// `n` draws of `mean + sigma * B D z` with `z` standard normal, drawn
    /// coordinate by coordinate in individual order.
    pub fn sample_population<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..n)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
                let step = &self.basis * z.component_mul(&self.scales);
                self.mean
                    .iter()
                    .zip(step.iter())
                    .map(|(m, s)| m + self.sigma * s)
                    .collect()
            })
            .collect()
    }

    fn inv_sqrt_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let projected = self.basis.transpose() * v;
        &self.basis * projected.component_div(&self.scales)
    }

    /// One CMA-ES update from a population sorted best-first.
    pub fn update(&mut self, ranked: &[Vec<f64>], mode: CovarianceMode) -> UpdateStatus {
        if ranked.is_empty() {
            log::warn!(
                "iteration {}: empty ranked population, sampler unchanged",
                self.iteration
            );
            return UpdateStatus::EmptyPopulation;
        }
        let d = self.dim();
        let n = d as f64;
        let params = StrategyParams::new(d, ranked.len());
        let selected: Vec<&[f64]> = ranked.iter().take(params.k).map(|x| x.as_slice()).collect();
        let weights = &params.weights[..selected.len()];
        let old = self.mean.clone();
        let new_mean = recombine_mean(&old, &selected, weights, params.mean_rate);

        let delta = DVector::from_iterator(d, new_mean.iter().zip(&old).map(|(a, b)| (a - b) / self.sigma));
        let whitened = self.inv_sqrt_times(&delta);
        let cs = params.c_sigma;
        let coef = (cs * (2.0 - cs) * params.mu_eff).sqrt();
        for (p, w) in self.sigma_path.iter_mut().zip(whitened.iter()) {
            *p = (1.0 - cs) * *p + coef * w;
        }
        let ps_norm = self.sigma_path.iter().map(|v| v * v).sum::<f64>().sqrt();
        let generations = (self.iteration + 1) as i32;
        let h_sigma =
            ps_norm / (1.0 - (1.0 - cs).powi(2 * generations)).sqrt() < (1.4 + 2.0 / (n + 1.0)) * params.chi_n;

        let rank_mu = rank_mu_estimate(&selected, &old, self.sigma, weights);
        match mode {
            CovarianceMode::Standard => {
                self.path = if h_sigma {
                    evolution_path(&self.path, &new_mean, &old, self.sigma, params.c_c, params.mu_eff)
                } else {
                    self.path.iter().map(|y| (1.0 - params.c_c) * y).collect()
                };
                self.cov = combine_standard(&self.cov, &rank_mu, &self.path, &params, !h_sigma);
            }
            CovarianceMode::PaperLiteral => {
                self.path = evolution_path(&self.path, &new_mean, &old, self.sigma, params.c_c, params.mu_eff);
                self.cov = combine_literal(&self.cov, &rank_mu, &self.path, params.c_mu, params.c_1).2;
            }
        }
        self.sigma *= ((cs / params.d_sigma) * (ps_norm / params.chi_n - 1.0)).exp();
        self.mean = new_mean;
        self.iteration += 1;
        if mode == CovarianceMode::PaperLiteral {
            self.renormalize();
        }
        self.refresh();
        UpdateStatus::Updated
    }

    /// Rewrites `(S, sigma, y)` as `(S / s, sigma * sqrt(s), y / sqrt(s))` with
    /// `s = trace(S) / d` when the scale leaves its working range. The sampling
    /// distribution and all subsequent updates are unchanged by this.
    fn renormalize(&mut self) {
        let s = self.cov.trace() / self.dim() as f64;
        if s.is_finite() && s > 0.0 && !(LITERAL_SCALE_RANGE.0..=LITERAL_SCALE_RANGE.1).contains(&s) {
            self.cov /= s;
            self.sigma *= s.sqrt();
            let r = s.sqrt();
            self.path.iter_mut().for_each(|y| *y /= r);
        }
    }
}

/// Property fitness of a valid individual: `binding + 0.5 * hydro`.
pub fn property_fitness(binding: f64, hydro: f64) -> f64 {
    binding + HYDRO_WEIGHT * hydro
}

/// Fitness of a valid individual given its property fitness.
pub fn valid_fitness(property: f64, batch_invalid_count: usize, penalty_active: bool) -> f64 {
    property + penalty(batch_invalid_count, penalty_active)
}

fn penalty(invalid: usize, active: bool) -> f64 {
    if active {
        PENALTY_PER_INVALID * invalid as f64
    } else {
        0.0
    }
}

/// Fitness of every individual in a batch (`None` = invalid decode).
///
/// Invalid individuals get the worst valid fitness in the batch (or 0) plus
/// `0.1 * invalid_count`, so they rank strictly after every valid one.
pub fn batch_fitness(properties: &[Option<f64>], penalty_active: bool) -> Vec<f64> {
    let invalid = properties.iter().filter(|p| p.is_none()).count();
    let valid: Vec<f64> = properties
        .iter()
        .flatten()
        .map(|&p| valid_fitness(p, invalid, penalty_active))
        .collect();
    let worst = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let base = if valid.is_empty() { 0.0 } else { worst };
    let invalid_fitness = base + PENALTY_PER_INVALID * invalid as f64;
    let mut valid = valid.into_iter();
    properties
        .iter()
        .map(|p| match p {
            Some(_) => valid.next().expect("one fitness per valid individual"),
            None => invalid_fitness,
        })
        .collect()
}

/// Scores latent points; `None` marks an invalid decode.
pub trait LatentObjective {
    fn evaluate(&self, points: &[Vec<f64>]) -> Vec<Option<f64>>;
}

/// Decode with the WAE, then score `binding + 0.5 * hydro` with the surrogate.
pub struct SurrogateObjective<'a> {
    pub wae: &'a WaeModel,
    pub surrogate: &'a SurrogateModel,
    pub workers: usize,
}

impl LatentObjective for SurrogateObjective<'_> {
    fn evaluate(&self, points: &[Vec<f64>]) -> Vec<Option<f64>> {
        let d = self.wae.shape().latent_dim;
        parallel_map(points, self.workers, |chunk| {
            let data: Vec<f64> = chunk.iter().flatten().copied().collect();
            let z = Tensor::from_vec(&[chunk.len(), d], data).expect("latent points have the model dimension");
            predict_from_latent_batch(&z, self.wae, self.surrogate)
                .into_iter()
                .map(|p| p.properties.map(|(b, h)| property_fitness(b, h)))
                .collect()
        })
    }
}

/// Adapter for plain functions, used by tests and benchmarks.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> Option<f64>> LatentObjective for FnObjective<F> {
    fn evaluate(&self, points: &[Vec<f64>]) -> Vec<Option<f64>> {
        points.iter().map(|p| (self.0)(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub loss_mean: f64,
    pub loss_best: f64,
    pub validity: f64,
    pub sigma: f64,
    pub mu: Vec<f64>,
    pub attempts: usize,
}

/// A scored and ranked population (best first).
#[derive(Debug, Clone)]
pub struct RankedPopulation {
    pub points: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub valid: usize,
    pub batch: usize,
    pub attempts: usize,
    pub penalty_active: bool,
}

/// Draws batches until one reaches the validity target or `max_attempts` are
/// used, then scores and ranks the final batch.
pub fn evaluate_step<R: Rng>(
    state: &SamplerState,
    objective: &dyn LatentObjective,
    batch: usize,
    max_attempts: usize,
    rng: &mut R,
) -> RankedPopulation {
    let mut attempts = 0;
    let (points, properties) = loop {
        attempts += 1;
        let points = state.sample_population(batch, rng);
        let properties = objective.evaluate(&points);
        let valid = properties.iter().filter(|p| p.is_some()).count();
        if valid as f64 >= VALIDITY_TARGET * batch as f64 || attempts >= max_attempts.max(1) {
            break (points, properties);
        }
    };
    let valid = properties.iter().filter(|p| p.is_some()).count();
    let validity = if batch == 0 { 1.0 } else { valid as f64 / batch as f64 };
    let penalty_active = validity < VALIDITY_TARGET;
    let fitness = batch_fitness(&properties, penalty_active);
    let drop_invalid = 1.0 - validity < DROP_INVALID_BELOW;
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| !(drop_invalid && properties[i].is_none()))
        .collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
    RankedPopulation {
        fitness: order.iter().map(|&i| fitness[i]).collect(),
        points: order.into_iter().map(|i| points[i].clone()).collect(),
        valid,
        batch,
        attempts,
        penalty_active,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaesConfig {
    pub iterations: usize,
    pub batch: usize,
    pub max_attempts: usize,
    pub mode: CovarianceMode,
    pub sigma0: f64,
    /// Initial mean; the origin when absent.
    pub init_mean: Option<Vec<f64>>,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        CmaesConfig {
            iterations: 1000,
            batch: 1000,
            max_attempts: 20,
            mode: CovarianceMode::Standard,
            sigma0: 0.5,
            init_mean: None,
        }
    }
}

impl CmaesConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.batch == 0 || self.max_attempts == 0 {
            return Err(Error::Config("cmaes batch and max_attempts must be positive".into()));
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::Config("cmaes sigma0 must be positive".into()));
        }
        if let Some(m) = &self.init_mean {
            if m.len() != dim {
                return Err(Error::Config(format!(
                    "cmaes init_mean has {} entries, latent dimension is {dim}",
                    m.len()
                )));
            }
        }
        Ok(())
    }
}

/// Summary statistics of a ranked population over its valid individuals.
fn step_record(state: &SamplerState, pop: &RankedPopulation, iter: u64) -> StepRecord {
    // Valid individuals always precede invalid ones in the ranking.
    let valid_fitness: Vec<f64> = pop.fitness.iter().take(pop.valid).copied().collect();
    let (loss_mean, loss_best) = if valid_fitness.is_empty() {
        let f = pop.fitness.first().copied().unwrap_or(0.0);
        (f, f)
    } else {
        (crate::stats::mean(&valid_fitness), valid_fitness[0])
    };
    StepRecord {
        iter,
        loss_mean,
        loss_best,
        validity: if pop.batch == 0 {
            1.0
        } else {
            pop.valid as f64 / pop.batch as f64
        },
        sigma: state.sigma,
        mu: state.mean.clone(),
        attempts: pop.attempts,
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_state: SamplerState,
}

/// Alternates [`evaluate_step`] and [`SamplerState::update`]. Each record
/// describes the sampler that produced that step's population.
pub fn run_optimization(
    objective: &dyn LatentObjective,
    dim: usize,
    config: &CmaesConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Trajectory> {
    config.validate(dim)?;
    let mean = config.init_mean.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut state = SamplerState::new(mean, config.sigma0)?;
    let mut rng = SeedStream::new(seed).derive("cmaes").rng();
    let mut records = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations as u64 {
        let pop = evaluate_step(&state, objective, config.batch, config.max_attempts, &mut rng);
        let record = step_record(&state, &pop, iter);
        on_step(&record);
        records.push(record);
        state.update(&pop.points, config.mode);
    }
    Ok(Trajectory {
        records,
        final_state: state,
    })
}

pub fn trajectory_jsonl(records: &[StepRecord]) -> Result<String> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").expect("write to vec");
    }
    Ok(String::from_utf8(out).expect("json is utf-8"))
}

pub fn read_trajectory(path: &std::path::Path) -> Result<Vec<StepRecord>> {
    let text = crate::util::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
