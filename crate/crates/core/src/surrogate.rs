//! Property predictor: token frame -> (binding_norm, hydro_norm).
//!
//! Embedding and GRU produce one hidden state per frame position; the 7 x H
//! map goes through two same-padded convolutions with ReLU, global average
//! pooling and an affine head with two outputs.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alphabet::{detokenize, Peptide, TokenSeq, ValidityReport, FRAME_LEN, VOCAB_SIZE};
use crate::data::LabelledRecord;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::layers::{mean_pool, mean_pool_backward, mse, relu, relu_backward, Conv1d, Embedding, Gru, Linear};
use crate::nn::{Adam, ParameterSet, Tensor};
use crate::rng::SeedStream;
use crate::stats;
use crate::wae::{step_major, Frame, WaeModel};

pub const KIND: &str = "surrogate";
/// Output column of the binding head.
pub const BINDING: usize = 0;
/// Output column of the hydrophobicity head.
pub const HYDRO: usize = 1;

const KERNEL: usize = 3;
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateShape {
    pub embed: usize,
    pub hidden: usize,
    pub conv1: usize,
    pub conv2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub embed: usize,
    pub hidden: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub residual_bins: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            embed: 32,
            hidden: 100,
            conv1: 64,
            conv2: 32,
            epochs: 150,
            batch_size: 128,
            lr: 1e-3,
            test_fraction: 0.2,
            residual_bins: 10,
        }
    }
}

impl SurrogateConfig {
    pub fn shape(&self) -> SurrogateShape {
        SurrogateShape {
            embed: self.embed,
            hidden: self.hidden,
            conv1: self.conv1,
            conv2: self.conv2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.embed,
            self.hidden,
            self.conv1,
            self.conv2,
            self.batch_size,
            self.residual_bins,
        ]
        .contains(&0)
        {
            return Err(Error::Config("surrogate sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(
                "surrogate lr must be > 0 and test_fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateNet {
    pub shape: SurrogateShape,
    embedding: Embedding,
    gru: Gru,
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
}

struct Pass {
    tokens: Vec<usize>,
    gru: crate::nn::layers::GruCache,
    cols1: Tensor,
    a1: Tensor,
    cols2: Tensor,
    a2: Tensor,
    pooled: Tensor,
    out: Tensor,
}

/// Reorders rows from step-major (`t * batch + b`) to sample-major (`b * steps + t`).
fn to_sample_major(x: &Tensor, steps: usize, batch: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for t in 0..steps {
        for b in 0..batch {
            out.row_mut(b * steps + t).copy_from_slice(x.row(t * batch + b));
        }
    }
    out
}

fn to_step_major(x: &Tensor, steps: usize, batch: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for t in 0..steps {
        for b in 0..batch {
            out.row_mut(t * batch + b).copy_from_slice(x.row(b * steps + t));
        }
    }
    out
}

impl SurrogateNet {
    pub fn new<R: rand::Rng>(ps: &mut ParameterSet, shape: SurrogateShape, rng: &mut R) -> Self {
        SurrogateNet {
            shape,
            embedding: Embedding::new(ps, "embedding", VOCAB_SIZE, shape.embed, rng),
            gru: Gru::new(ps, "gru", shape.embed, shape.hidden, rng),
            conv1: Conv1d::new(ps, "conv1", shape.hidden, shape.conv1, KERNEL, rng),
            conv2: Conv1d::new(ps, "conv2", shape.conv1, shape.conv2, KERNEL, rng),
            head: Linear::new(ps, "head", shape.conv2, 2, rng),
        }
    }

    fn forward(&self, ps: &ParameterSet, frames: &[Frame]) -> Pass {
        let batch = frames.len();
        let tokens = step_major(frames, |fr, t| fr[t]);
        let x = self.embedding.forward(ps, &tokens);
        let (hs, gru) = self
            .gru
            .forward_seq(ps, &x, &Tensor::zeros(&[batch, self.shape.hidden]));
        let map = to_sample_major(&hs, FRAME_LEN, batch);
        let (y1, cols1) = self.conv1.forward(ps, &map, FRAME_LEN);
        let a1 = relu(&y1);
        let (y2, cols2) = self.conv2.forward(ps, &a1, FRAME_LEN);
        let a2 = relu(&y2);
        let pooled = mean_pool(&a2, FRAME_LEN);
        let out = self.head.forward(ps, &pooled);
        Pass {
            tokens,
            gru,
            cols1,
            a1,
            cols2,
            a2,
            pooled,
            out,
        }
    }

    fn backward(&self, ps: &mut ParameterSet, pass: &Pass, dout: &Tensor) {
        let batch = dout.rows();
        let dpooled = self.head.backward(ps, &pass.pooled, dout);
        let da2 = mean_pool_backward(&dpooled, FRAME_LEN);
        let dy2 = relu_backward(&pass.a2, &da2);
        let da1 = self.conv2.backward(ps, &pass.cols2, &dy2, FRAME_LEN);
        let dy1 = relu_backward(&pass.a1, &da1);
        let dmap = self.conv1.backward(ps, &pass.cols1, &dy1, FRAME_LEN);
        let dhs = to_step_major(&dmap, FRAME_LEN, batch);
        let (dx, _) = self.gru.backward_seq(ps, &pass.gru, &dhs);
        self.embedding.backward(ps, &pass.tokens, &dx);
    }

    /// `[batch, 2]` predictions; column 0 binding, column 1 hydrophobicity.
    pub fn predict_frames(&self, ps: &ParameterSet, frames: &[Frame]) -> Tensor {
        self.forward(ps, frames).out
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub net: SurrogateNet,
    pub params: ParameterSet,
}

impl SurrogateModel {
    pub fn new(shape: SurrogateShape, seed: u64) -> Self {
        let mut params = ParameterSet::new();
        let mut rng = SeedStream::new(seed).derive("surrogate-init").rng();
        let net = SurrogateNet::new(&mut params, shape, &mut rng);
        SurrogateModel { net, params }
    }

    /// `(binding_norm, hydro_norm)`.
    pub fn predict(&self, seq: &TokenSeq) -> Result<(f64, f64)> {
        match detokenize(seq) {
            (Some(p), _) => Ok(self.predict_peptides(&[p])[0]),
            (None, report) => Err(Error::InvalidTokens { reason: report.reason }),
        }
    }

    pub fn predict_peptides(&self, peptides: &[Peptide]) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(peptides.len());
        for chunk in peptides.chunks(EVAL_CHUNK) {
            let frames: Vec<Frame> = chunk.iter().map(|p| p.frame()).collect();
            let y = self.net.predict_frames(&self.params, &frames);
            out.extend((0..chunk.len()).map(|i| (y.row(i)[BINDING], y.row(i)[HYDRO])));
        }
        out
    }

    pub fn save(&self, dir: &Path, provenance: serde_json::Value) -> Result<()> {
        checkpoint::save(
            dir,
            KIND,
            serde_json::to_value(self.net.shape)?,
            provenance,
            &self.params,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir, KIND)?;
        let shape: SurrogateShape =
            serde_json::from_value(ck.manifest.hyperparameters.clone()).map_err(|e| Error::IncompatibleArtifact {
                path: dir.to_path_buf(),
                reason: format!("hyperparameters: {e}"),
            })?;
        let mut model = SurrogateModel::new(shape, 0);
        ck.restore_into(&mut model.params, dir)?;
        Ok(model)
    }
}

/// Sum of the binding and hydrophobicity mean-squared errors.
pub fn surrogate_loss(model: &SurrogateModel, records: &[LabelledRecord]) -> Result<f64> {
    let mut params = model.params.clone();
    loss_and_grad(&model.net, &mut params, records, false)
}

/// [`surrogate_loss`] on an explicit parameter set, optionally accumulating gradients.
pub fn loss_and_grad(
    net: &SurrogateNet,
    ps: &mut ParameterSet,
    records: &[LabelledRecord],
    accumulate: bool,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("surrogate_loss batch"));
    }
    let frames: Vec<Frame> = records.iter().map(|r| r.sequence.frame()).collect();
    let pass = net.forward(ps, &frames);
    let batch = records.len();
    let pred_b: Vec<f64> = (0..batch).map(|i| pass.out.row(i)[BINDING]).collect();
    let pred_h: Vec<f64> = (0..batch).map(|i| pass.out.row(i)[HYDRO]).collect();
    let true_b: Vec<f64> = records.iter().map(|r| r.binding_norm).collect();
    let true_h: Vec<f64> = records.iter().map(|r| r.hydro_norm).collect();
    let (lb, gb) = mse(&pred_b, &true_b);
    let (lh, gh) = mse(&pred_h, &true_h);
    if accumulate {
        let mut dout = Tensor::zeros(&[batch, 2]);
        for i in 0..batch {
            dout.row_mut(i)[BINDING] = gb[i];
            dout.row_mut(i)[HYDRO] = gh[i];
        }
        net.backward(ps, &pass, &dout);
    }
    Ok(lb + lh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Population std of `truth - prediction`; absent with fewer than 2 points.
    pub residual_std: Option<f64>,
}

/// Residual spread per equal-width bin of the predicted value.
pub fn residual_bins(truth: &[f64], predicted: &[f64], bins: usize) -> Vec<ResidualBin> {
    if predicted.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = predicted.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = predicted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for (t, p) in truth.iter().zip(predicted) {
        let idx = if width > 0.0 {
            (((p - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        members[idx].push(t - p);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(i, r)| ResidualBin {
            lo: lo + width * i as f64,
            hi: lo + width * (i + 1) as f64,
            count: r.len(),
            residual_std: (r.len() >= 2).then(|| stats::population_std(&r)),
        })
        .collect()
}

/// Lowest and highest bins that have a residual spread.
pub fn extreme_bin_spreads(bins: &[ResidualBin]) -> Option<(f64, f64)> {
    let mut with_std = bins.iter().filter_map(|b| b.residual_std);
    let first = with_std.next()?;
    let last = with_std.next_back().unwrap_or(first);
    Some((first, last))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMetrics {
    pub r2: f64,
    pub spearman: f64,
    pub bins: Vec<ResidualBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateReport {
    pub train_size: usize,
    pub test_size: usize,
    pub heldout: bool,
    pub initial_test_loss: f64,
    pub epochs: Vec<SurrogateEpoch>,
    pub binding: HeadMetrics,
    pub hydro: HeadMetrics,
}

fn metrics(model: &SurrogateModel, records: &[LabelledRecord], bins: usize) -> (HeadMetrics, HeadMetrics) {
    let peptides: Vec<Peptide> = records.iter().map(|r| r.sequence).collect();
    let preds = model.predict_peptides(&peptides);
    let head = |truth: Vec<f64>, pred: Vec<f64>| HeadMetrics {
        r2: stats::r_squared(&truth, &pred),
        spearman: stats::spearman(&truth, &pred),
        bins: residual_bins(&truth, &pred, bins),
    };
    (
        head(
            records.iter().map(|r| r.binding_norm).collect(),
            preds.iter().map(|p| p.0).collect(),
        ),
        head(
            records.iter().map(|r| r.hydro_norm).collect(),
            preds.iter().map(|p| p.1).collect(),
        ),
    )
}

fn mean_loss(model: &SurrogateModel, records: &[LabelledRecord]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in records.chunks(EVAL_CHUNK) {
        total += surrogate_loss(model, chunk)? * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

pub fn train_surrogate(
    records: &[LabelledRecord],
    config: &SurrogateConfig,
    seed: u64,
) -> Result<(SurrogateModel, SurrogateReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("train_surrogate dataset"));
    }
    let streams = SeedStream::new(seed);
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut streams.derive("surrogate-split").rng());
    let n_test = (records.len() as f64 * config.test_fraction).floor() as usize;
    let train = shuffled.split_off(n_test);
    let test = shuffled;
    if train.is_empty() {
        return Err(Error::Empty("train_surrogate training split"));
    }
    let heldout = !test.is_empty();
    let eval_set: &[LabelledRecord] = if heldout { &test } else { &train };

    let mut model = SurrogateModel::new(config.shape(), seed);
    let adam = Adam::new(config.lr);
    let mut shuffle_rng = streams.derive("surrogate-shuffle").rng();
    let initial_test_loss = mean_loss(&model, eval_set)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let l = loss_and_grad(&model.net, &mut model.params, &batch, true)?;
            if !l.is_finite() {
                return Err(Error::Domain {
                    operation: "surrogate training loss",
                    value: l,
                });
            }
            adam.step(&mut model.params);
            sum += l * chunk.len() as f64;
            count += chunk.len();
        }
        let test_loss = mean_loss(&model, eval_set)?;
        log::info!(
            "surrogate epoch {epoch}: train {:.5} test {test_loss:.5}",
            sum / count as f64
        );
        epochs.push(SurrogateEpoch {
            epoch,
            train_loss: sum / count as f64,
            test_loss,
        });
    }
    let (binding, hydro) = metrics(&model, eval_set, config.residual_bins);
    let report = SurrogateReport {
        train_size: train.len(),
        test_size: test.len(),
        heldout,
        initial_test_loss,
        epochs,
        binding,
        hydro,
    };
    Ok((model, report))
}

/// Outcome of decoding a latent point and scoring the decoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrediction {
    pub tokens: TokenSeq,
    pub peptide: Option<Peptide>,
    pub validity: ValidityReport,
    /// `(binding_norm, hydro_norm)`; `None` when the decode is invalid.
    pub properties: Option<(f64, f64)>,
}

pub fn predict_from_latent(z: &[f64], wae: &WaeModel, surrogate: &SurrogateModel) -> Result<LatentPrediction> {
    let d = wae.shape().latent_dim;
    let zt = Tensor::from_vec(&[1, d], z.to_vec()).map_err(|_| Error::Shape {
        context: "latent vector",
        expected: vec![d],
        actual: vec![z.len()],
    })?;
    Ok(predict_from_latent_batch(&zt, wae, surrogate).remove(0))
}

/// Decode-then-predict for each row of `z`.
pub fn predict_from_latent_batch(z: &Tensor, wae: &WaeModel, surrogate: &SurrogateModel) -> Vec<LatentPrediction> {
    let decoded = wae.decode_sample_batch(z);
    let checked: Vec<(Option<Peptide>, ValidityReport)> = decoded.iter().map(detokenize).collect();
    let valid: Vec<Peptide> = checked.iter().filter_map(|(p, _)| *p).collect();
    let mut preds = surrogate.predict_peptides(&valid).into_iter();
    decoded
        .into_iter()
        .zip(checked)
        .map(|(tokens, (peptide, validity))| LatentPrediction {
            properties: peptide.map(|_| preds.next().expect("one prediction per valid decode")),
            tokens,
            peptide,
            validity,
        })
        .collect()
}
