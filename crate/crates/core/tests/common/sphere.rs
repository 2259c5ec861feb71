//! Self-contained textbook CMA-ES on the sphere, used as an independent
//! reference for the engine.

use lsatc::cmaes::{run_optimization, CmaesConfig, CovarianceMode, FnObjective};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const DIM: usize = 10;
pub const LAMBDA: usize = 10;
pub const EVALUATIONS: usize = 5000;
pub const CHECKPOINT: usize = 500;

pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[allow(clippy::needless_range_loop)]
/// Cyclic Jacobi eigendecomposition; returns (eigenvalues, eigenvectors as columns).
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i].max(1e-20)).collect(), v)
}

/// Best fitness seen so far at every checkpoint of `CHECKPOINT` evaluations.
pub fn reference_run(seed: u64, x0: &[f64], sigma0: f64) -> Vec<f64> {
    let n = DIM as f64;
    let mu = LAMBDA / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let sum: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    let mueff = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    let cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n);
    let cs = (mueff + 2.0) / (n + mueff + 5.0);
    let c1 = 2.0 / ((n + 1.3) * (n + 1.3) + mueff);
    let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) * (n + 2.0) + mueff));
    let damps = 1.0 + 2.0 * (((mueff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let chin = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = x0.to_vec();
    let mut sigma = sigma0;
    let mut c = vec![vec![0.0; DIM]; DIM];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut pc = [0.0; DIM];
    let mut ps = [0.0; DIM];
    let mut best = f64::INFINITY;
    let mut curve = Vec::new();
    let mut evals = 0;
    let mut gen = 0;
    while evals < EVALUATIONS {
        gen += 1;
        let (d2, b) = jacobi(c.clone());
        let d: Vec<f64> = d2.iter().map(|x| x.sqrt()).collect();
        let mut pop: Vec<(f64, Vec<f64>)> = (0..LAMBDA)
            .map(|_| {
                let z: Vec<f64> = (0..DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
                let y: Vec<f64> = (0..DIM)
                    .map(|i| (0..DIM).map(|j| b[i][j] * d[j] * z[j]).sum())
                    .collect();
                let x: Vec<f64> = (0..DIM).map(|i| m[i] + sigma * y[i]).collect();
                (sphere(&x), x)
            })
            .collect();
        for (f, _) in &pop {
            evals += 1;
            best = best.min(*f);
            if evals % CHECKPOINT == 0 {
                curve.push(best);
            }
        }
        pop.sort_by(|a, b| a.0.total_cmp(&b.0));
        let old = m.clone();
        m = (0..DIM).map(|i| (0..mu).map(|k| w[k] * pop[k].1[i]).sum()).collect();
        let step: Vec<f64> = (0..DIM).map(|i| (m[i] - old[i]) / sigma).collect();
        // C^{-1/2} step = B diag(1/d) B^T step
        let bt: Vec<f64> = (0..DIM)
            .map(|j| (0..DIM).map(|i| b[i][j] * step[i]).sum::<f64>() / d[j])
            .collect();
        let white: Vec<f64> = (0..DIM).map(|i| (0..DIM).map(|j| b[i][j] * bt[j]).sum()).collect();
        for i in 0..DIM {
            ps[i] = (1.0 - cs) * ps[i] + (cs * (2.0 - cs) * mueff).sqrt() * white[i];
        }
        let psn = ps.iter().map(|x| x * x).sum::<f64>().sqrt();
        let hsig = psn / (1.0 - (1.0 - cs).powi(2 * gen)).sqrt() / chin < 1.4 + 2.0 / (n + 1.0);
        let hs = if hsig { 1.0 } else { 0.0 };
        for i in 0..DIM {
            pc[i] = (1.0 - cc) * pc[i] + hs * (cc * (2.0 - cc) * mueff).sqrt() * step[i];
        }
        let ys: Vec<Vec<f64>> = pop[..mu]
            .iter()
            .map(|(_, x)| (0..DIM).map(|i| (x[i] - old[i]) / sigma).collect())
            .collect();
        for i in 0..DIM {
            for j in 0..DIM {
                let rank_mu: f64 = (0..mu).map(|k| w[k] * ys[k][i] * ys[k][j]).sum();
                c[i][j] = (1.0 - c1 - cmu) * c[i][j]
                    + c1 * (pc[i] * pc[j] + (1.0 - hs) * cc * (2.0 - cc) * c[i][j])
                    + cmu * rank_mu;
            }
        }
        sigma *= ((cs / damps) * (psn / chin - 1.0)).exp();
    }
    curve
}

pub fn engine_run(seed: u64, x0: &[f64], sigma0: f64) -> Vec<f64> {
    let config = CmaesConfig {
        iterations: EVALUATIONS / LAMBDA,
        batch: LAMBDA,
        max_attempts: 1,
        mode: CovarianceMode::Standard,
        sigma0,
        init_mean: Some(x0.to_vec()),
    };
    let t = run_optimization(&FnObjective(|z: &[f64]| Some(sphere(z))), DIM, &config, seed, |_| {}).unwrap();
    let mut best = f64::INFINITY;
    let mut curve = Vec::new();
    for (i, r) in t.records.iter().enumerate() {
        best = best.min(r.loss_best);
        if ((i + 1) * LAMBDA).is_multiple_of(CHECKPOINT) {
            curve.push(best);
        }
    }
    curve
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median best fitness per checkpoint for both implementations over `seeds`,
/// plus the final best of every engine run.
pub struct SphereComparison {
    pub engine: Vec<f64>,
    pub reference: Vec<f64>,
    pub engine_finals: Vec<f64>,
}

impl SphereComparison {
    pub fn run(seeds: &[u64]) -> Self {
        let x0 = vec![1.0; DIM];
        let engine: Vec<Vec<f64>> = seeds.iter().map(|&s| engine_run(s, &x0, 0.5)).collect();
        let reference: Vec<Vec<f64>> = seeds.iter().map(|&s| reference_run(s, &x0, 0.5)).collect();
        let at = |runs: &[Vec<f64>], c: usize| median(runs.iter().map(|v| v[c]).collect());
        let checkpoints = EVALUATIONS / CHECKPOINT;
        SphereComparison {
            engine: (0..checkpoints).map(|c| at(&engine, c)).collect(),
            reference: (0..checkpoints).map(|c| at(&reference, c)).collect(),
            engine_finals: engine.iter().map(|v| *v.last().unwrap()).collect(),
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.engine.iter().zip(&self.reference).map(|(e, r)| e / r).collect()
    }
}
