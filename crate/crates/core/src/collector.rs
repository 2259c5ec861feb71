//! Harvesting peptides from an optimization trajectory: keep the best steps,
//! cluster their means, and sample from one representative per cluster.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::{detokenize, Peptide};
use crate::cmaes::StepRecord;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SeedStream;
use crate::util::parallel_map;
use crate::wae::WaeModel;

pub const DEFAULT_TOP: usize = 500;
pub const DEFAULT_CLUSTERS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;
/// Independent k-means++ initializations; the lowest-loss run is kept.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedSampler {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub iter: u64,
    pub cluster: Option<usize>,
}

impl CollectedSampler {
    pub fn from_record(r: &StepRecord) -> Self {
        CollectedSampler {
            mu: r.mu.clone(),
            sigma: r.sigma,
            iter: r.iter,
            cluster: None,
        }
    }
}

/// The `n` lowest-`loss_mean` steps, ties broken by earlier iteration.
pub fn select_top(trajectory: &[StepRecord], n: usize) -> Result<Vec<CollectedSampler>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut order: Vec<&StepRecord> = trajectory.iter().collect();
    order.sort_by(|a, b| a.loss_mean.total_cmp(&b.loss_mean).then(a.iter.cmp(&b.iter)));
    Ok(order.into_iter().take(n).map(CollectedSampler::from_record).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids.
    pub loss: f64,
    /// Loss after each Lloyd iteration of the kept run.
    pub history: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub(crate) fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = dist
            .iter()
            .rposition(|&d| d > 0.0)
            .expect("k does not exceed distinct points");
        for (i, &d) in dist.iter().enumerate() {
            if d > 0.0 && target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        let c = points[chosen].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = Vec::with_capacity(points.len());
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
            dists.push(d);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Move an empty centroid onto the worst-fitted point.
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(j.cmp(&i)))
                    .expect("more points than clusters");
                counts[assignments[far]] -= 1;
                for (s, v) in sums[assignments[far]].iter_mut().zip(&points[far]) {
                    *s -= v;
                }
                assignments[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums[c] = points[far].clone();
                changed = true;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        let loss = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| squared_distance(p, &centroids[a]))
            .sum();
        history.push(loss);
        if !changed {
            break;
        }
    }
    KMeans {
        assignments,
        centroids,
        loss: *history.last().expect("at least one iteration"),
        history,
    }
}

/// k-means++ seeding followed by Lloyd iterations, repeated
/// [`KMEANS_RESTARTS`] times; the lowest-loss run is returned.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let distinct = distinct_count(points);
    if k == 0 || k > distinct {
        return Err(Error::Insufficient {
            what: "distinct points for k-means",
            needed: k.max(1),
            available: distinct,
        });
    }
    let mut rng = SeedStream::new(seed).derive("kmeans").rng();
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, plus_plus_seeds(points, k, &mut rng), max_iter);
        if best.as_ref().is_none_or(|b| run.loss < b.loss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters the sampler means and returns, per cluster, the member closest to
/// its centroid (ties to the lower iteration), labelled with its cluster.
pub fn pick_representatives(top: &[CollectedSampler], k: usize, seed: u64) -> Result<Vec<CollectedSampler>> {
    if top.len() < k {
        return Err(Error::Insufficient {
            what: "collected samplers",
            needed: k,
            available: top.len(),
        });
    }
    let points: Vec<Vec<f64>> = top.iter().map(|s| s.mu.clone()).collect();
    let km = kmeans(&points, k, seed, KMEANS_MAX_ITER)?;
    Ok((0..k)
        .map(|c| {
            let rep = top
                .iter()
                .zip(&km.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(s, _)| s)
                .min_by(|a, b| {
                    squared_distance(&a.mu, &km.centroids[c])
                        .total_cmp(&squared_distance(&b.mu, &km.centroids[c]))
                        .then(a.iter.cmp(&b.iter))
                })
                .expect("clusters are non-empty");
            CollectedSampler {
                cluster: Some(c),
                ..rep.clone()
            }
        })
        .collect())
}

/// Iterations needed to reach each requested count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DepletionCurve {
    pub points: Vec<(usize, usize)>,
}

impl DepletionCurve {
    pub fn iterations_for(&self, count: usize) -> Option<usize> {
        self.points.iter().find(|(c, _)| *c == count).map(|(_, i)| *i)
    }
}

/// 10, 20, 50, 100, 200, 500, ... up to `count`, plus `count` itself.
pub fn milestones(count: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut scale = 10;
    'outer: loop {
        for m in [1, 2, 5] {
            let v = m * scale;
            if v >= count {
                break 'outer;
            }
            out.push(v);
        }
        scale *= 10;
    }
    out.push(count);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    pub peptides: Vec<Peptide>,
    pub curve: DepletionCurve,
    pub iterations: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    pub max_iterations: usize,
    pub batch: usize,
    pub workers: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            max_iterations: 100,
            batch: 1000,
            workers: 1,
        }
    }
}

fn decode_valid(wae: &WaeModel, z: Vec<f64>, rows: usize, workers: usize) -> Vec<Option<Peptide>> {
    let d = wae.shape().latent_dim;
    let row_vecs: Vec<&[f64]> = z.chunks(d).collect();
    debug_assert_eq!(row_vecs.len(), rows);
    parallel_map(&row_vecs, workers, |chunk| {
        let data: Vec<f64> = chunk.iter().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::from_vec(&[chunk.len(), d], data).expect("latent batch shape");
        wae.decode_sample_batch(&t).iter().map(|s| detokenize(s).0).collect()
    })
}

/// Round-robin sampling from isotropic `N(mu, sigma^2 I)` per sampler until
/// `count` unique valid peptides are collected or `max_iterations` rounds
/// (one batch per sampler each) are used.
pub fn sample_peptides(
    samplers: &[CollectedSampler],
    count: usize,
    wae: &WaeModel,
    options: &SamplingOptions,
    seed: u64,
) -> Result<Harvest> {
    if samplers.is_empty() {
        return Err(Error::Empty("sampler list"));
    }
    if count == 0 {
        return Err(Error::Config("requested peptide count must be at least 1".into()));
    }
    let d = wae.shape().latent_dim;
    for s in samplers {
        if s.mu.len() != d {
            return Err(Error::Shape {
                context: "collected sampler mean",
                expected: vec![d],
                actual: vec![s.mu.len()],
            });
        }
    }
    let base = SeedStream::new(seed).derive("collector-sample");
    let mut rngs: Vec<_> = (0..samplers.len()).map(|i| base.derive_index(i as u64).rng()).collect();
    let marks = milestones(count);
    let mut curve = DepletionCurve::default();
    let mut seen = HashSet::new();
    let mut peptides = Vec::new();
    let mut iterations = 0;
    'rounds: while iterations < options.max_iterations {
        iterations += 1;
        for (s, rng) in samplers.iter().zip(rngs.iter_mut()) {
            let z: Vec<f64> = (0..options.batch * d)
                .map(|j| {
                    let n: f64 = StandardNormal.sample(&mut *rng);
                    s.mu[j % d] + s.sigma * n
                })
                .collect();
            for p in decode_valid(wae, z, options.batch, options.workers)
                .into_iter()
                .flatten()
            {
                if seen.insert(p) {
                    peptides.push(p);
                    if marks.contains(&peptides.len()) {
                        curve.points.push((peptides.len(), iterations));
                    }
                    if peptides.len() == count {
                        break 'rounds;
                    }
                }
            }
        }
    }
    Ok(Harvest {
        shortfall: peptides.len() < count,
        peptides,
        curve,
        iterations,
    })
}

pub fn write_samplers(path: &Path, samplers: &[CollectedSampler]) -> Result<()> {
    let mut out = Vec::new();
    for s in samplers {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    crate::util::write_atomic(path, &out)
}

pub fn read_samplers(path: &Path) -> Result<Vec<CollectedSampler>> {
    let text = crate::util::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let s: CollectedSampler = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            if !(s.sigma > 0.0) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("line {}: sigma must be positive", i + 1),
                });
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wae::{Variant, WaeShape};

    fn record(iter: u64, loss: f64) -> StepRecord {
        StepRecord {
            iter,
            loss_mean: loss,
            loss_best: loss,
            validity: 1.0,
            sigma: 0.1,
            mu: vec![iter as f64, 0.0],
            attempts: 1,
        }
    }

    #[test]
    fn select_top_orders_and_truncates() {
        let t = vec![record(0, 3.0), record(1, 1.0), record(2, 2.0)];
        let top = select_top(&t, 500).unwrap();
        assert_eq!(top.iter().map(|s| s.iter).collect::<Vec<_>>(), vec![1, 2, 0]);
        let inc: Vec<_> = (0..20).map(|i| record(i, i as f64)).collect();
        let top = select_top(&inc, 5).unwrap();
        assert_eq!(top.iter().map(|s| s.iter).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let ties = vec![record(4, 1.0), record(2, 1.0)];
        assert_eq!(select_top(&ties, 1).unwrap()[0].iter, 2);
        assert!(select_top(&[], 5).is_err());
    }

    #[test]
    fn select_top_matches_brute_force() {
        let mut rng = SeedStream::new(8).rng();
        let t: Vec<_> = (0..1000)
            .map(|i| record(i, (rng.random_range(0..50u32)) as f64))
            .collect();
        let top = select_top(&t, 500).unwrap();
        // Oracle: repeatedly extract the minimum (loss, iter) pair.
        let mut pool: Vec<(f64, u64)> = t.iter().map(|r| (r.loss_mean, r.iter)).collect();
        for s in &top {
            let (pos, _) =
                pool.iter().enumerate().fold(
                    (0, (f64::INFINITY, u64::MAX)),
                    |acc, (i, &p)| if p < acc.1 { (i, p) } else { acc },
                );
            assert_eq!(pool.remove(pos).1, s.iter);
        }
    }

    #[test]
    fn kmeans_examples() {
        let mut pts = vec![vec![0.0, 0.0]; 5];
        pts.extend(vec![vec![10.0, 10.0]; 5]);
        let km = kmeans(&pts, 2, 1, 300).unwrap();
        assert_eq!(km.loss, 0.0);
        let mut cs = km.centroids.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert_eq!(kmeans(&pts, 6, 2, 300).unwrap().loss, 0.0);
        assert!(kmeans(&vec![vec![1.0]; 4], 2, 0, 300).is_err());
    }

    #[test]
    fn kmeans_matches_exhaustive_partition() {
        for seed in 0..10 {
            let mut rng = SeedStream::new(100 + seed).rng();
            let pts: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let mut best = f64::INFINITY;
            for mask in 1u32..(1 << 7) {
                // Point 7 always in group 0, so every 2-partition is visited once.
                let groups: [Vec<&Vec<f64>>; 2] = [
                    pts.iter()
                        .enumerate()
                        .filter(|(i, _)| *i == 7 || mask >> i & 1 == 0)
                        .map(|(_, p)| p)
                        .collect(),
                    pts.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != 7 && mask >> i & 1 == 1)
                        .map(|(_, p)| p)
                        .collect(),
                ];
                let cost: f64 = groups
                    .iter()
                    .map(|g| {
                        let c = [0, 1].map(|j| g.iter().map(|p| p[j]).sum::<f64>() / g.len() as f64);
                        g.iter().map(|p| squared_distance(p, &c)).sum::<f64>()
                    })
                    .sum();
                best = best.min(cost);
            }
            let km = kmeans(&pts, 2, seed, 300).unwrap();
            assert!((km.loss - best).abs() < 1e-12, "seed {seed}: {} vs {best}", km.loss);
            assert!(km.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn representatives() {
        let samplers: Vec<CollectedSampler> = (0..10)
            .map(|i| CollectedSampler {
                mu: vec![100.0 * i as f64, 0.0],
                sigma: 0.1,
                iter: i,
                cluster: None,
            })
            .collect();
        let reps = pick_representatives(&samplers, 10, 3).unwrap();
        let mut iters: Vec<u64> = reps.iter().map(|r| r.iter).collect();
        iters.sort();
        assert_eq!(iters, (0..10).collect::<Vec<_>>());
        let mut doubled = samplers.clone();
        doubled.extend(samplers.iter().map(|s| CollectedSampler {
            iter: s.iter + 10,
            ..s.clone()
        }));
        let reps = pick_representatives(&doubled, 10, 3).unwrap();
        let distinct: HashSet<u64> = reps.iter().map(|r| r.mu[0].to_bits()).collect();
        assert_eq!(distinct.len(), 10);
        assert!(reps.iter().all(|r| r.iter < 10));
        for r in &reps {
            assert!(doubled.iter().any(|s| s.mu == r.mu && s.iter == r.iter));
        }
        assert!(pick_representatives(&samplers[..3], 10, 3).is_err());
    }

    #[test]
    fn milestone_schedule() {
        assert_eq!(milestones(100), vec![10, 20, 50, 100]);
        assert_eq!(milestones(7), vec![7]);
        assert_eq!(milestones(300), vec![10, 20, 50, 100, 200, 300]);
    }

    #[test]
    fn sampling_is_unique_valid_and_deterministic() {
        let shape = WaeShape {
            variant: Variant::Wae,
            latent_dim: 3,
            hidden: 8,
            embed: 4,
        };
        let wae = WaeModel::new(shape, 4);
        let samplers = vec![
            CollectedSampler {
                mu: vec![0.0; 3],
                sigma: 3.0,
                iter: 0,
                cluster: Some(0),
            },
            CollectedSampler {
                mu: vec![1.0; 3],
                sigma: 3.0,
                iter: 1,
                cluster: Some(1),
            },
        ];
        let opts = SamplingOptions {
            max_iterations: 3,
            batch: 50,
            workers: 2,
        };
        let a = sample_peptides(&samplers, 40, &wae, &opts, 5).unwrap();
        let b = sample_peptides(&samplers, 40, &wae, &SamplingOptions { workers: 1, ..opts }, 5).unwrap();
        assert_eq!(a, b);
        let unique: HashSet<_> = a.peptides.iter().collect();
        assert_eq!(unique.len(), a.peptides.len());
        assert_eq!(a.shortfall, a.peptides.len() < 40);
        assert!(a.curve.points.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![CollectedSampler {
            mu: vec![0.25, -1.0],
            sigma: 0.5,
            iter: 7,
            cluster: Some(2),
        }];
        let path = dir.path().join("s.jsonl");
        write_samplers(&path, &s).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        assert_eq!(line.trim(), r#"{"mu":[0.25,-1.0],"sigma":0.5,"iter":7,"cluster":2}"#);
        assert_eq!(read_samplers(&path).unwrap(), s);
    }
}
