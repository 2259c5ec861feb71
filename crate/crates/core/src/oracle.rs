//! Ground-truth property oracles.
//!
//! Hydrophobicity follows the Kyte-Doolittle hydropathy scale: the mean over
//! every window of 3 consecutive residues, summed over the 3 windows of a
//! 5-residue peptide. Binding is a seeded synthetic energy-like score with a
//! heavy right tail from rare "clashing" neighbour pairs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Peptide, NUM_RESIDUES, PEPTIDE_LEN};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Kyte & Doolittle (1982) hydropathy index, in token order (`ACDEFGHIKLMNPQRSTVWY`).
pub const KYTE_DOOLITTLE: [f64; NUM_RESIDUES] = [
    1.8,  // A
    2.5,  // C
    -3.5, // D
    -3.5, // E
    2.8,  // F
    -0.4, // G
    -3.2, // H
    4.5,  // I
    -3.9, // K
    3.8,  // L
    1.9,  // M
    -3.5, // N
    -1.6, // P
    -3.5, // Q
    -4.5, // R
    -0.8, // S
    -0.7, // T
    4.2,  // V
    -0.9, // W
    -1.3, // Y
];

pub const HYDRO_WINDOW: usize = 3;

pub fn kd_hydrophobicity(peptide: &Peptide) -> f64 {
    let values: Vec<f64> = peptide.residues().iter().map(|r| KYTE_DOOLITTLE[r.index()]).collect();
    values
        .windows(HYDRO_WINDOW)
        .map(|w| w.iter().sum::<f64>() / HYDRO_WINDOW as f64)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    pub clash_probability: f64,
    pub clash_range: [f64; 2],
    pub position_weight_mean: f64,
    pub position_weight_std: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 42,
            clash_probability: 0.05,
            clash_range: [500.0, 5000.0],
            position_weight_mean: -10.0,
            position_weight_std: 5.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.clash_probability) {
            return Err(Error::Config(format!(
                "clash_probability {} not in [0, 1]",
                self.clash_probability
            )));
        }
        if !(self.clash_range[0] < self.clash_range[1]) {
            return Err(Error::Config(format!(
                "clash_range {:?} must satisfy low < high",
                self.clash_range
            )));
        }
        if !(self.position_weight_std >= 0.0) {
            return Err(Error::Config("position_weight_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Synthetic stand-in for a structure-based binding energy.
///
/// Score = sum over positions of `W[residue][position]` plus, for each
/// adjacent pair, `C[left][right]`. The tables are drawn once from the
/// `"oracle-tables"` stream of `config.seed`:
///
/// 1. `W`: 20 x 5 values, residue-major, each `mean + std * z` with `z` a
///    `StandardNormal` draw;
/// 2. `C`: 20 x 20 values, row-major; each entry draws `u ~ U[0,1)` and, if
///    `u < clash_probability`, a second `v ~ U[0,1)` giving
///    `low + (high - low) * v`, otherwise `0`.
#[derive(Debug, Clone)]
pub struct BindingOracle {
    position_weights: [[f64; PEPTIDE_LEN]; NUM_RESIDUES],
    clash: [[f64; NUM_RESIDUES]; NUM_RESIDUES],
}

impl BindingOracle {
    pub fn new(config: &OracleConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(config.seed).derive("oracle-tables").rng();
        let mut position_weights = [[0.0; PEPTIDE_LEN]; NUM_RESIDUES];
        for row in position_weights.iter_mut() {
            for w in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = config.position_weight_mean + config.position_weight_std * z;
            }
        }
        let [low, high] = config.clash_range;
        let mut clash = [[0.0; NUM_RESIDUES]; NUM_RESIDUES];
        for row in clash.iter_mut() {
            for c in row.iter_mut() {
                let u: f64 = rng.random();
                if u < config.clash_probability {
                    let v: f64 = rng.random();
                    *c = low + (high - low) * v;
                }
            }
        }
        Ok(BindingOracle {
            position_weights,
            clash,
        })
    }

    pub fn score(&self, peptide: &Peptide) -> f64 {
        let r = peptide.residues();
        let positional: f64 = r
            .iter()
            .enumerate()
            .map(|(j, res)| self.position_weights[res.index()][j])
            .sum();
        let pairs: f64 = r.windows(2).map(|w| self.clash[w[0].index()][w[1].index()]).sum();
        positional + pairs
    }

    pub fn position_weights(&self) -> &[[f64; PEPTIDE_LEN]; NUM_RESIDUES] {
        &self.position_weights
    }

    pub fn clash_table(&self) -> &[[f64; NUM_RESIDUES]; NUM_RESIDUES] {
        &self.clash
    }
}

/// One-shot convenience; builds the tables on every call.
pub fn synthetic_binding(peptide: &Peptide, config: &OracleConfig) -> Result<f64> {
    Ok(BindingOracle::new(config)?.score(peptide))
}
