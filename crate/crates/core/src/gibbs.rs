//! Gapless Gibbs clustering of 5-residue candidates with per-cluster log-odds
//! matrices, and the final pick of one representative per cluster.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Peptide, NUM_RESIDUES, PEPTIDE_LEN};
use crate::error::{Error, Result};
use crate::eval::OverallScore;
use crate::rng::SeedStream;

type Counts = [[usize; PEPTIDE_LEN]; NUM_RESIDUES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoParams {
    pub pseudocount: f64,
    pub background: [f64; NUM_RESIDUES],
}

impl Default for LoParams {
    fn default() -> Self {
        LoParams {
            pseudocount: 1.0,
            background: [1.0 / NUM_RESIDUES as f64; NUM_RESIDUES],
        }
    }
}

impl LoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pseudocount > 0.0) || self.background.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config(
                "pseudocount and background frequencies must be positive".into(),
            ));
        }
        Ok(())
    }

    fn entry(&self, count: usize, size: usize, residue: usize) -> f64 {
        let bg = self.background[residue];
        ((count as f64 + self.pseudocount * bg) / (size as f64 + self.pseudocount) / bg).ln()
    }
}

/// Rows are residues (alphabet order), columns are positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoMatrix {
    pub values: [[f64; PEPTIDE_LEN]; NUM_RESIDUES],
    pub params: LoParams,
}

fn count(seqs: &[Peptide]) -> Counts {
    let mut c = [[0; PEPTIDE_LEN]; NUM_RESIDUES];
    for s in seqs {
        add(&mut c, s);
    }
    c
}

fn add(c: &mut Counts, s: &Peptide) {
    for (j, r) in s.residues().iter().enumerate() {
        c[r.index()][j] += 1;
    }
}

fn remove(c: &mut Counts, s: &Peptide) {
    for (j, r) in s.residues().iter().enumerate() {
        c[r.index()][j] -= 1;
    }
}

fn lo_from_counts(c: &Counts, size: usize, params: &LoParams) -> LoMatrix {
    let mut values = [[0.0; PEPTIDE_LEN]; NUM_RESIDUES];
    for (r, row) in values.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.entry(c[r][j], size, r);
        }
    }
    LoMatrix {
        values,
        params: params.clone(),
    }
}

/// Natural-log odds of the smoothed per-position frequencies over background.
pub fn compute_lo(cluster: &[Peptide], params: &LoParams) -> Result<LoMatrix> {
    if cluster.is_empty() {
        return Err(Error::Empty("cluster"));
    }
    params.validate()?;
    Ok(lo_from_counts(&count(cluster), cluster.len(), params))
}

pub fn representative_score(seq: &Peptide, lo: &LoMatrix) -> f64 {
    seq.residues()
        .iter()
        .enumerate()
        .map(|(j, r)| lo.values[r.index()][j])
        .sum()
}

/// Score of `seq` under a cluster given by its counts, without building the matrix.
fn score_counts(seq: &Peptide, c: &Counts, size: usize, params: &LoParams) -> f64 {
    seq.residues()
        .iter()
        .enumerate()
        .map(|(j, r)| params.entry(c[r.index()][j], size, r.index()))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    pub clusters: usize,
    pub sweeps: usize,
    /// Starting temperature; it falls linearly to 0.
    pub t_start: f64,
    /// Trailing share of sweeps run greedily at temperature 0.
    pub greedy_fraction: f64,
    pub restarts: usize,
    pub lo: LoParams,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            clusters: 4,
            sweeps: 500,
            t_start: 1.0,
            greedy_fraction: 0.1,
            restarts: 5,
            lo: LoParams::default(),
        }
    }
}

impl GibbsConfig {
    fn temperature(&self, sweep: usize) -> f64 {
        let annealed = ((1.0 - self.greedy_fraction) * self.sweeps as f64).max(1.0);
        self.t_start * (1.0 - sweep as f64 / annealed).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsResult {
    pub assignments: Vec<usize>,
    pub matrices: Vec<LoMatrix>,
    /// Sum of each member's score under its own cluster's matrix.
    pub objective: f64,
    /// Objective after every sweep of the kept restart.
    pub history: Vec<f64>,
}

fn objective(seqs: &[Peptide], assign: &[usize], counts: &[Counts], sizes: &[usize], params: &LoParams) -> f64 {
    seqs.iter()
        .zip(assign)
        .map(|(s, &a)| score_counts(s, &counts[a], sizes[a], params))
        .sum()
}

fn one_run(seqs: &[Peptide], config: &GibbsConfig, stream: SeedStream) -> GibbsResult {
    let k = config.clusters;
    let params = &config.lo;
    let mut rng = stream.rng();
    let mut assign: Vec<usize> = (0..seqs.len()).map(|_| rng.random_range(0..k)).collect();
    let mut counts = vec![[[0; PEPTIDE_LEN]; NUM_RESIDUES]; k];
    let mut sizes = vec![0; k];
    for (s, &a) in seqs.iter().zip(&assign) {
        add(&mut counts[a], s);
        sizes[a] += 1;
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut history = Vec::with_capacity(config.sweeps);
    let mut scores = vec![0.0; k];
    for sweep in 0..config.sweeps {
        let t = config.temperature(sweep);
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &seqs[i];
            remove(&mut counts[assign[i]], s);
            sizes[assign[i]] -= 1;
            for c in 0..k {
                scores[c] = score_counts(s, &counts[c], sizes[c], params);
            }
            let chosen = if t > 0.0 {
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|v| ((v - top) / t).exp()).collect();
                let mut target = rng.random::<f64>() * weights.iter().sum::<f64>();
                let mut pick = k - 1;
                for (c, w) in weights.iter().enumerate() {
                    if target < *w {
                        pick = c;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                // Stay put unless another cluster is strictly better.
                let mut best = assign[i];
                for c in 0..k {
                    if scores[c] > scores[best] {
                        best = c;
                    }
                }
                best
            };
            assign[i] = chosen;
            add(&mut counts[chosen], s);
            sizes[chosen] += 1;
        }
        repair_empty(seqs, &mut assign, &mut counts, &mut sizes, params);
        history.push(objective(seqs, &assign, &counts, &sizes, params));
    }
    let matrices = (0..k).map(|c| lo_from_counts(&counts[c], sizes[c], params)).collect();
    GibbsResult {
        objective: history
            .last()
            .copied()
            .unwrap_or_else(|| objective(seqs, &assign, &counts, &sizes, params)),
        assignments: assign,
        matrices,
        history,
    }
}

/// Moves the worst-fitting sequence (among clusters with more than one
/// member) into each empty cluster.
fn repair_empty(seqs: &[Peptide], assign: &mut [usize], counts: &mut [Counts], sizes: &mut [usize], params: &LoParams) {
    for empty in 0..sizes.len() {
        if sizes[empty] > 0 {
            continue;
        }
        let worst = (0..seqs.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .min_by(|&i, &j| {
                let si = score_counts(&seqs[i], &counts[assign[i]], sizes[assign[i]], params);
                let sj = score_counts(&seqs[j], &counts[assign[j]], sizes[assign[j]], params);
                si.total_cmp(&sj).then(i.cmp(&j))
            })
            .expect("at least as many sequences as clusters");
        remove(&mut counts[assign[worst]], &seqs[worst]);
        sizes[assign[worst]] -= 1;
        assign[worst] = empty;
        add(&mut counts[empty], &seqs[worst]);
        sizes[empty] += 1;
    }
}

/// Simulated-annealing Gibbs sampler over cluster assignments; the restart
/// with the highest final objective is returned.
pub fn gibbs_cluster(seqs: &[Peptide], config: &GibbsConfig, seed: u64) -> Result<GibbsResult> {
    config.lo.validate()?;
    if config.clusters == 0 {
        return Err(Error::Config("gibbs clustering needs at least one cluster".into()));
    }
    if seqs.len() < config.clusters {
        return Err(Error::Insufficient {
            what: "sequences for gibbs clustering",
            needed: config.clusters,
            available: seqs.len(),
        });
    }
    let base = SeedStream::new(seed).derive("gibbs");
    let mut best: Option<GibbsResult> = None;
    for r in 0..config.restarts.max(1) {
        let run = one_run(seqs, config, base.derive_index(r as u64));
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub peptide: Peptide,
    pub score: OverallScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub members: Vec<Peptide>,
    pub lo: LoMatrix,
    pub representative: Peptide,
    pub representative_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub top: Vec<Candidate>,
    pub clusters: Vec<ClusterSummary>,
    pub representatives: Vec<Peptide>,
    pub objective: f64,
}

/// Keeps the `top_n` best overall scores, clusters them and returns the
/// highest-scoring member of each cluster under that cluster's matrix.
pub fn select_final(candidates: &[Candidate], top_n: usize, config: &GibbsConfig, seed: u64) -> Result<FinalSelection> {
    if candidates.len() < top_n {
        return Err(Error::Insufficient {
            what: "scored candidates",
            needed: top_n,
            available: candidates.len(),
        });
    }
    let mut top = candidates.to_vec();
    top.sort_by_key(|c| c.score.total);
    top.truncate(top_n);
    let seqs: Vec<Peptide> = top.iter().map(|c| c.peptide).collect();
    let result = gibbs_cluster(&seqs, config, seed)?;
    let clusters: Vec<ClusterSummary> = result
        .matrices
        .iter()
        .enumerate()
        .map(|(c, lo)| {
            let members: Vec<&Candidate> = top
                .iter()
                .zip(&result.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(m, _)| m)
                .collect();
            let rep = members
                .iter()
                .max_by(|a, b| {
                    representative_score(&a.peptide, lo)
                        .total_cmp(&representative_score(&b.peptide, lo))
                        .then(b.score.total.cmp(&a.score.total))
                })
                .expect("clusters are non-empty after repair");
            ClusterSummary {
                members: members.iter().map(|m| m.peptide).collect(),
                lo: lo.clone(),
                representative: rep.peptide,
                representative_score: representative_score(&rep.peptide, lo),
            }
        })
        .collect();
    let representatives: Vec<Peptide> = clusters.iter().map(|c| c.representative).collect();
    let mut distinct = representatives.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < representatives.len() {
        log::warn!("final selection contains duplicate representatives");
    }
    Ok(FinalSelection {
        top,
        clusters,
        representatives,
        objective: result.objective,
    })
}

impl FinalSelection {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.clusters.iter().enumerate() {
            out.push_str(&format!(
                "cluster {i}: {} ({} members, score {:.3})\n",
                c.representative,
                c.members.len(),
                c.representative_score
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Residue;
    use std::collections::HashMap;

    fn p(s: &str) -> Peptide {
        Peptide::parse(s).unwrap()
    }

    #[test]
    fn closed_form_entries() {
        for m in [1usize, 3, 10] {
            let lo = compute_lo(&vec![p("AAAAA"); m], &LoParams::default()).unwrap();
            let a = Residue::from_letter('A').unwrap().index();
            let c = Residue::from_letter('C').unwrap().index();
            let mf = m as f64;
            for j in 0..PEPTIDE_LEN {
                assert!((lo.values[a][j] - (((mf + 0.05) / (mf + 1.0)) / 0.05).ln()).abs() < 1e-12);
                assert!((lo.values[c][j] + (mf + 1.0).ln()).abs() < 1e-12);
            }
        }
        assert!(compute_lo(&[], &LoParams::default()).is_err());
    }

    #[test]
    fn background_scaling_shifts_entries() {
        let seqs = [p("ACDEF"), p("ACDEG"), p("WCDEF")];
        let base = compute_lo(&seqs, &LoParams::default()).unwrap();
        let mut params = LoParams::default();
        let w = Residue::from_letter('W').unwrap().index();
        params.background[w] *= 2.0;
        // With pseudocount 0 the shift would be exactly -ln 2; check the
        // definition entry-wise instead.
        let scaled = compute_lo(&seqs, &params).unwrap();
        for j in 0..PEPTIDE_LEN {
            let cnt = seqs.iter().filter(|s| s.residues()[j].index() == w).count() as f64;
            let bg = params.background[w];
            let expected = ((cnt + bg) / 4.0 / bg).ln();
            assert!((scaled.values[w][j] - expected).abs() < 1e-12);
        }
        assert_eq!(base.values[0], scaled.values[0]);
    }

    #[test]
    fn score_is_sum_and_consensus_is_max() {
        let seqs = [p("ACDEF"), p("ACDEF"), p("ACWEF"), p("YCDEF")];
        let lo = compute_lo(&seqs, &LoParams::default()).unwrap();
        let mut rng = SeedStream::new(1).rng();
        let consensus = representative_score(&p("ACDEF"), &lo);
        let colmax: f64 = (0..PEPTIDE_LEN)
            .map(|j| {
                (0..NUM_RESIDUES)
                    .map(|r| lo.values[r][j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        assert!((consensus - colmax).abs() < 1e-12);
        for _ in 0..100 {
            let idx = rng.random_range(0..crate::alphabet::SPACE_SIZE);
            let s = Peptide::from_space_index(idx).unwrap();
            let mut manual = 0.0;
            for j in 0..PEPTIDE_LEN {
                manual += lo.values[s.residues()[j].index()][j];
            }
            assert_eq!(representative_score(&s, &lo), manual);
            assert!(representative_score(&s, &lo) <= consensus + 1e-12);
        }
        let single = compute_lo(&[p("KLMNP")], &LoParams::default()).unwrap();
        let k = Residue::from_letter('K').unwrap().index();
        let a = Residue::from_letter('A').unwrap().index();
        let c = Residue::from_letter('C').unwrap().index();
        assert_eq!(single.values[a][0], single.values[c][1]);
        assert_eq!(
            single.values[k][0],
            single.values[Residue::from_letter('L').unwrap().index()][1]
        );
    }

    /// Four disjoint consensus motifs, ten members each with one mutation.
    fn planted(seed: u64) -> (Vec<Peptide>, Vec<usize>, [&'static str; 4]) {
        let motifs = ["ACDEF", "GHIKL", "MNPQR", "STVWY"];
        let mut rng = SeedStream::new(seed).rng();
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for (m, motif) in motifs.iter().enumerate() {
            for _ in 0..10 {
                let mut residues = *p(motif).residues();
                let pos = rng.random_range(0..PEPTIDE_LEN);
                residues[pos] = Residue::from_index(rng.random_range(0..NUM_RESIDUES)).unwrap();
                seqs.push(Peptide::new(residues));
                labels.push(m);
            }
        }
        (seqs, labels, motifs)
    }

    fn purity(assign: &[usize], labels: &[usize], k: usize) -> f64 {
        let mut majority = 0;
        for c in 0..k {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for (&a, &l) in assign.iter().zip(labels) {
                if a == c {
                    *counts.entry(l).or_default() += 1;
                }
            }
            majority += counts.values().max().copied().unwrap_or(0);
        }
        majority as f64 / assign.len() as f64
    }

    #[test]
    fn planted_motifs_are_recovered() {
        for seed in 0..5 {
            let (seqs, labels, motifs) = planted(seed);
            let r = gibbs_cluster(&seqs, &GibbsConfig::default(), seed).unwrap();
            assert!(purity(&r.assignments, &labels, 4) >= 0.8, "seed {seed}");
            let greedy_start = GibbsConfig::default().sweeps * 9 / 10;
            assert!(
                r.history[greedy_start..].windows(2).all(|w| w[1] >= w[0] - 1e-9),
                "seed {seed}"
            );
            let candidates: Vec<Candidate> = seqs
                .iter()
                .enumerate()
                .map(|(i, &s)| Candidate {
                    peptide: s,
                    score: OverallScore::new(i + 1, 1),
                })
                .collect();
            let sel = select_final(&candidates, 40, &GibbsConfig::default(), seed).unwrap();
            for rep in &sel.representatives {
                let best = motifs
                    .iter()
                    .map(|m| {
                        p(m).residues()
                            .iter()
                            .zip(rep.residues())
                            .filter(|(a, b)| a == b)
                            .count()
                    })
                    .max()
                    .unwrap();
                assert!(best >= 4, "seed {seed}: {rep}");
            }
            for c in &sel.clusters {
                assert!(c.members.contains(&c.representative));
            }
        }
    }

    #[test]
    fn single_cluster_and_degenerate_input() {
        let (seqs, _, _) = planted(9);
        let config = GibbsConfig {
            clusters: 1,
            sweeps: 5,
            ..GibbsConfig::default()
        };
        let r = gibbs_cluster(&seqs, &config, 1).unwrap();
        assert!(r.assignments.iter().all(|&a| a == 0));
        assert_eq!(r.matrices[0], compute_lo(&seqs, &LoParams::default()).unwrap());

        let same: Vec<Candidate> = (0..40)
            .map(|i| Candidate {
                peptide: p("AAAAA"),
                score: OverallScore::new(i + 1, 1),
            })
            .collect();
        let sel = select_final(&same, 40, &GibbsConfig::default(), 2).unwrap();
        assert_eq!(sel.representatives.len(), 4);
        assert!(sel.clusters.iter().all(|c| !c.members.is_empty()));
        assert!(select_final(&same[..10], 40, &GibbsConfig::default(), 2).is_err());
        assert!(gibbs_cluster(&seqs[..3], &GibbsConfig::default(), 0).is_err());
    }
}
