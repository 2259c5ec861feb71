//! Diagonal-covariance Gaussian mixture over latent encodings, fitted by EM.
//! Used as the baseline generator: fit on class-0 encodings, then sample.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::{detokenize, Peptide};
use crate::collector::{distinct_count, plus_plus_seeds};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SeedStream;
use crate::wae::WaeModel;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_COMPONENTS: usize = 200;
pub const DEFAULT_MAX_ITER: usize = 200;
const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood per point at each E step.
    pub log_likelihood: Vec<f64>,
    pub requested_k: usize,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for (c, o) in out.iter_mut().enumerate() {
            if self.weights[c] <= 0.0 {
                *o = f64::NEG_INFINITY;
                continue;
            }
            let mut lp = self.weights[c].ln();
            for ((xi, m), v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
                lp -= 0.5 * (ln2pi + v.ln() + (xi - m) * (xi - m) / v);
            }
            *o = lp;
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Ancestral draws: `(component, point)` pairs.
    pub fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(usize, Vec<f64>)> {
        let chooser = WeightedIndex::new(&self.weights).expect("weights are valid");
        (0..n)
            .map(|_| {
                let c = chooser.sample(rng);
                let x = self.means[c]
                    .iter()
                    .zip(&self.variances[c])
                    .map(|(m, v)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + v.sqrt() * z
                    })
                    .collect();
                (c, x)
            })
            .collect()
    }
}

/// EM for a diagonal mixture. `k` is capped at the number of distinct points.
pub fn fit_gmm(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<GmmFit> {
    if points.is_empty() {
        return Err(Error::Empty("gmm training points"));
    }
    if k == 0 {
        return Err(Error::Config("gmm needs at least one component".into()));
    }
    let requested_k = k;
    let k = k.min(distinct_count(points));
    if k < requested_k {
        log::warn!("gmm: reducing components from {requested_k} to {k} (distinct points)");
    }
    let d = points[0].len();
    let n = points.len() as f64;
    let mut rng = SeedStream::new(seed).derive("gmm-init").rng();
    let means = plus_plus_seeds(points, k, &mut rng);
    let global_mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            let v = points.iter().map(|p| (p[j] - global_mean[j]).powi(2)).sum::<f64>() / n;
            v.max(VARIANCE_FLOOR)
        })
        .collect();
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![global_var; k],
    };
    let mut resp = vec![vec![0.0; k]; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut ll = 0.0;
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            model.component_log_densities(p, r);
            let total = log_sum_exp(r);
            ll += total;
            for v in r.iter_mut() {
                *v = (*v - total).exp();
            }
        }
        let ll = ll / n;
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= TOLERANCE * prev.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            model.weights[c] = nk / n;
            if nk <= 0.0 {
                continue;
            }
            let mean: Vec<f64> = (0..d)
                .map(|j| points.iter().zip(&resp).map(|(p, r)| r[c] * p[j]).sum::<f64>() / nk)
                .collect();
            model.variances[c] = (0..d)
                .map(|j| {
                    let v = points
                        .iter()
                        .zip(&resp)
                        .map(|(p, r)| r[c] * (p[j] - mean[j]).powi(2))
                        .sum::<f64>()
                        / nk;
                    v.max(VARIANCE_FLOOR)
                })
                .collect();
            model.means[c] = mean;
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(GmmFit {
        model,
        log_likelihood: history,
        requested_k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSample {
    pub peptides: Vec<Peptide>,
    pub draws: usize,
    pub shortfall: bool,
}

/// Draws batches of `batch` latent points, decodes them and keeps unique
/// valid peptides until `n` are found or `max_batches` are used.
pub fn sample_gmm(
    model: &GmmModel,
    n: usize,
    seed: u64,
    wae: &WaeModel,
    batch: usize,
    max_batches: usize,
) -> Result<GmmSample> {
    let d = wae.shape().latent_dim;
    if model.dim() != d {
        return Err(Error::Shape {
            context: "gmm dimension",
            expected: vec![d],
            actual: vec![model.dim()],
        });
    }
    let mut rng = SeedStream::new(seed).derive("gmm-sample").rng();
    let mut seen = HashSet::new();
    let mut peptides = Vec::new();
    let mut draws = 0;
    'outer: for _ in 0..max_batches {
        let pts = model.draw(batch, &mut rng);
        draws += batch;
        let data: Vec<f64> = pts.iter().flat_map(|(_, x)| x.iter().copied()).collect();
        let z = Tensor::from_vec(&[batch, d], data)?;
        for seq in wae.decode_sample_batch(&z) {
            if let (Some(p), _) = detokenize(&seq) {
                if seen.insert(p) {
                    peptides.push(p);
                    if peptides.len() == n {
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(GmmSample {
        shortfall: peptides.len() < n,
        peptides,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wae::{Variant, WaeShape};

    fn gaussian_blobs(centres: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeedStream::new(seed).rng();
        centres
            .iter()
            .flat_map(|c| {
                (0..per)
                    .map(|_| {
                        c.iter()
                            .map(|m| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                m + sd * z
                            })
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn recovers_two_blobs() {
        let pts = gaussian_blobs(&[[0.0, 0.0], [8.0, -5.0]], 300, 1.0, 1);
        let fit = fit_gmm(&pts, 2, 7, 200).unwrap();
        let mut means = fit.model.means.clone();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (m, t) in means.iter().zip([[0.0, 0.0], [8.0, -5.0]]) {
            assert!((m[0] - t[0]).abs() < 0.1 && (m[1] - t[1]).abs() < 0.1, "{m:?}");
        }
        assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!((fit.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let pts = gaussian_blobs(&[[1.0, 2.0]], 50, 0.5, 2);
        let fit = fit_gmm(&pts, 1, 0, 50).unwrap();
        for j in 0..2 {
            let mean = pts.iter().map(|p| p[j]).sum::<f64>() / 50.0;
            let var = pts.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((fit.model.means[0][j] - mean).abs() < 1e-12);
            assert!((fit.model.variances[0][j] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn caps_components_and_floors_variance() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let fit = fit_gmm(&pts, 3, 0, 20).unwrap();
        assert_eq!(fit.model.k(), 1);
        assert_eq!(fit.requested_k, 3);
        assert!(fit.model.variances[0].iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let model = GmmModel {
            weights: vec![0.5, 0.3, 0.2],
            means: vec![vec![0.0]; 3],
            variances: vec![vec![1.0]; 3],
        };
        let mut rng = SeedStream::new(3).rng();
        let draws = model.draw(10_000, &mut rng);
        for (c, w) in model.weights.iter().enumerate() {
            let freq = draws.iter().filter(|(k, _)| *k == c).count() as f64 / 10_000.0;
            assert!((freq - w).abs() < 0.02, "{c}: {freq}");
        }
    }

    #[test]
    fn sampling_is_deterministic_unique_valid() {
        let wae = WaeModel::new(
            WaeShape {
                variant: Variant::Wae,
                latent_dim: 2,
                hidden: 6,
                embed: 3,
            },
            1,
        );
        let model = GmmModel {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            variances: vec![vec![4.0, 4.0]],
        };
        let a = sample_gmm(&model, 20, 5, &wae, 64, 4).unwrap();
        let b = sample_gmm(&model, 20, 5, &wae, 64, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.peptides.iter().collect::<HashSet<_>>().len(), a.peptides.len());
        assert_eq!(a.shortfall, a.peptides.len() < 20);
    }
}
