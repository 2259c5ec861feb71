//! Recurrent sequence autoencoder with an MMD-regularized latent space, plus
//! the VAE variant used as a comparison.
//!
//! The encoder embeds the 7-token frame, runs a GRU over it and maps the final
//! hidden state through a small MLP to `(mu, log_sigma)`. The decoder starts
//! from `tanh(Linear(z))` and emits 23 logits at each of 7 steps. Step 0 is fed
//! START and step `t > 0` is fed token `t - 1`, so the 7 predicted tokens are
//! the full frame including its START and END markers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::{detokenize, Peptide, Token, TokenSeq, FRAME_LEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::layers::{
    relu, relu_backward, softmax_cross_entropy, tanh, tanh_backward, Embedding, Gru, GruCache, Linear,
};
use crate::nn::{Adam, ParameterSet, Tensor};
use crate::rng::SeedStream;
use crate::stats;

/// Weight of the KL penalty in the WAE objective.
pub const KL_WEIGHT: f64 = 1e-3;

pub type Frame = [usize; FRAME_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Wae,
    Vae,
}

impl Variant {
    /// Checkpoint model kind.
    pub fn kind(self) -> &'static str {
        match self {
            Variant::Wae => "wae",
            Variant::Vae => "vae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `sqrt(d)`, the scale of the unit-normal prior.
    PriorScale,
    /// Median pairwise distance of the pooled batch.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaeShape {
    pub variant: Variant,
    pub latent_dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaeConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub bandwidth: Bandwidth,
    pub test_fraction: f64,
}

impl Default for WaeConfig {
    fn default() -> Self {
        WaeConfig {
            variant: Variant::Wae,
            latent_dim: 32,
            hidden: 100,
            embed: 32,
            epochs: 150,
            batch_size: 128,
            lr: 1e-3,
            kl_weight: KL_WEIGHT,
            bandwidth: Bandwidth::PriorScale,
            test_fraction: 0.2,
        }
    }
}

impl WaeConfig {
    pub fn shape(&self) -> WaeShape {
        WaeShape {
            variant: self.variant,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            embed: self.embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("lr must be > 0 and kl_weight >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Layer handles; the weights live in a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct WaeNet {
    pub shape: WaeShape,
    embedding: Embedding,
    enc_gru: Gru,
    enc_hidden: Linear,
    enc_out: Linear,
    dec_init: Linear,
    dec_gru: Gru,
    dec_out: Linear,
}

struct EncoderPass {
    tokens: Vec<usize>,
    gru: GruCache,
    h_last: Tensor,
    hidden: Tensor,
    mu: Tensor,
    log_sigma: Tensor,
}

struct DecoderPass {
    z: Tensor,
    h0: Tensor,
    tokens: Vec<usize>,
    gru: GruCache,
    hs: Tensor,
    logits: Tensor,
}

pub(crate) fn step_major(frames: &[Frame], f: impl Fn(&Frame, usize) -> usize) -> Vec<usize> {
    (0..FRAME_LEN)
        .flat_map(|t| frames.iter().map(move |fr| (fr, t)))
        .map(|(fr, t)| f(fr, t))
        .collect()
}

fn split_columns(x: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut left = Tensor::zeros(&[rows, at]);
    let mut right = Tensor::zeros(&[rows, cols - at]);
    for i in 0..rows {
        left.row_mut(i).copy_from_slice(&x.row(i)[..at]);
        right.row_mut(i).copy_from_slice(&x.row(i)[at..]);
    }
    (left, right)
}

fn join_columns(a: &Tensor, b: &Tensor) -> Tensor {
    let rows = a.rows();
    let mut out = Tensor::zeros(&[rows, a.cols() + b.cols()]);
    for i in 0..rows {
        out.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
        out.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl WaeNet {
    pub fn new<R: Rng>(ps: &mut ParameterSet, shape: WaeShape, rng: &mut R) -> Self {
        let WaeShape {
            latent_dim: d,
            hidden: h,
            embed: e,
            ..
        } = shape;
        WaeNet {
            shape,
            embedding: Embedding::new(ps, "embedding", VOCAB_SIZE, e, rng),
            enc_gru: Gru::new(ps, "encoder.gru", e, h, rng),
            enc_hidden: Linear::new(ps, "encoder.hidden", h, h, rng),
            enc_out: Linear::new(ps, "encoder.out", h, 2 * d, rng),
            dec_init: Linear::new(ps, "decoder.init", d, h, rng),
            dec_gru: Gru::new(ps, "decoder.gru", e, h, rng),
            dec_out: Linear::new(ps, "decoder.out", h, VOCAB_SIZE, rng),
        }
    }

    fn encoder_forward(&self, ps: &ParameterSet, frames: &[Frame]) -> EncoderPass {
        let batch = frames.len();
        let hidden = self.shape.hidden;
        let tokens = step_major(frames, |fr, t| fr[t]);
        let x = self.embedding.forward(ps, &tokens);
        let (hs, gru) = self.enc_gru.forward_seq(ps, &x, &Tensor::zeros(&[batch, hidden]));
        let last = (FRAME_LEN - 1) * batch * hidden;
        let h_last = Tensor::from_vec(&[batch, hidden], hs.data()[last..].to_vec()).expect("shape");
        let hid = relu(&self.enc_hidden.forward(ps, &h_last));
        let out = self.enc_out.forward(ps, &hid);
        let (mu, log_sigma) = split_columns(&out, self.shape.latent_dim);
        EncoderPass {
            tokens,
            gru,
            h_last,
            hidden: hid,
            mu,
            log_sigma,
        }
    }

    fn encoder_backward(&self, ps: &mut ParameterSet, pass: &EncoderPass, dmu: &Tensor, dls: &Tensor) {
        let batch = pass.mu.rows();
        let hidden = self.shape.hidden;
        let dout = join_columns(dmu, dls);
        let dhid = self.enc_out.backward(ps, &pass.hidden, &dout);
        let da = relu_backward(&pass.hidden, &dhid);
        let dh_last = self.enc_hidden.backward(ps, &pass.h_last, &da);
        let mut dhs = Tensor::zeros(&[FRAME_LEN * batch, hidden]);
        dhs.data_mut()[(FRAME_LEN - 1) * batch * hidden..].copy_from_slice(dh_last.data());
        let (dx, _) = self.enc_gru.backward_seq(ps, &pass.gru, &dhs);
        self.embedding.backward(ps, &pass.tokens, &dx);
    }

    fn decoder_forward(&self, ps: &ParameterSet, z: &Tensor, frames: &[Frame]) -> DecoderPass {
        let h0 = tanh(&self.dec_init.forward(ps, z));
        let tokens = step_major(frames, |fr, t| if t == 0 { Token::START.index() } else { fr[t - 1] });
        let x = self.embedding.forward(ps, &tokens);
        let (hs, gru) = self.dec_gru.forward_seq(ps, &x, &h0);
        let logits = self.dec_out.forward(ps, &hs);
        DecoderPass {
            z: z.clone(),
            h0,
            tokens,
            gru,
            hs,
            logits,
        }
    }

    /// Returns `dL/dz`.
    fn decoder_backward(&self, ps: &mut ParameterSet, pass: &DecoderPass, dlogits: &Tensor) -> Tensor {
        let dhs = self.dec_out.backward(ps, &pass.hs, dlogits);
        let (dx, dh0) = self.dec_gru.backward_seq(ps, &pass.gru, &dhs);
        self.embedding.backward(ps, &pass.tokens, &dx);
        let da = tanh_backward(&pass.h0, &dh0);
        self.dec_init.backward(ps, &pass.z, &da)
    }

    /// `(mu, sigma)` for each frame, as `[batch, d]` matrices.
    pub fn encode_frames(&self, ps: &ParameterSet, frames: &[Frame]) -> (Tensor, Tensor) {
        let pass = self.encoder_forward(ps, frames);
        (pass.mu, pass.log_sigma.map(f64::exp))
    }

    /// Teacher-forced logits, step-major `[7 * batch, 23]`.
    pub fn decode_direct_frames(&self, ps: &ParameterSet, z: &Tensor, frames: &[Frame]) -> Tensor {
        self.decoder_forward(ps, z, frames).logits
    }

    /// Greedy autoregressive decode of each row of `z: [batch, d]`.
    pub fn decode_sample_batch(&self, ps: &ParameterSet, z: &Tensor) -> Vec<TokenSeq> {
        let batch = z.rows();
        let mut h = tanh(&self.dec_init.forward(ps, z));
        let mut current = vec![Token::START.index(); batch];
        let mut out = vec![Vec::with_capacity(FRAME_LEN); batch];
        for _ in 0..FRAME_LEN {
            let x = self.embedding.forward(ps, &current);
            h = self.dec_gru.step(ps, &x, &h);
            let logits = self.dec_out.forward(ps, &h);
            for (b, seq) in out.iter_mut().enumerate() {
                let tok = argmax(logits.row(b));
                seq.push(Token::from_index(tok).expect("vocabulary index"));
                current[b] = tok;
            }
        }
        out.into_iter().map(TokenSeq::new).collect()
    }
}

/// Trained (or freshly initialized) model: layer handles plus weights.
#[derive(Debug, Clone)]
pub struct WaeModel {
    pub net: WaeNet,
    pub params: ParameterSet,
}

fn valid_frame(seq: &TokenSeq) -> Result<Frame> {
    match detokenize(seq) {
        (Some(p), _) => Ok(p.frame()),
        (None, report) => Err(Error::InvalidTokens { reason: report.reason }),
    }
}

impl WaeModel {
    pub fn new(shape: WaeShape, seed: u64) -> Self {
        let mut params = ParameterSet::new();
        let mut rng = SeedStream::new(seed).derive("wae-init").rng();
        let net = WaeNet::new(&mut params, shape, &mut rng);
        WaeModel { net, params }
    }

    pub fn shape(&self) -> WaeShape {
        self.net.shape
    }

    pub fn encode(&self, seq: &TokenSeq) -> Result<(Vec<f64>, Vec<f64>)> {
        let frame = valid_frame(seq)?;
        let (mu, sigma) = self.net.encode_frames(&self.params, &[frame]);
        Ok((mu.into_data(), sigma.into_data()))
    }

    /// Encoding means of many peptides, `[n, d]`, computed in chunks.
    pub fn encode_peptides(&self, peptides: &[Peptide]) -> Tensor {
        let d = self.net.shape.latent_dim;
        let mut data = Vec::with_capacity(peptides.len() * d);
        for chunk in peptides.chunks(EVAL_CHUNK) {
            let frames: Vec<Frame> = chunk.iter().map(|p| p.frame()).collect();
            data.extend_from_slice(self.net.encode_frames(&self.params, &frames).0.data());
        }
        Tensor::from_vec(&[peptides.len(), d], data).expect("shape")
    }

    /// Teacher-forced logits `[7, 23]`.
    pub fn decode_direct(&self, z: &[f64], teacher: &TokenSeq) -> Result<Tensor> {
        let frame = valid_frame(teacher)?;
        let z = self.latent_row(z)?;
        Ok(self.net.decode_direct_frames(&self.params, &z, &[frame]))
    }

    pub fn decode_sample(&self, z: &[f64]) -> Result<TokenSeq> {
        let z = self.latent_row(z)?;
        Ok(self.net.decode_sample_batch(&self.params, &z).remove(0))
    }

    pub fn decode_sample_batch(&self, z: &Tensor) -> Vec<TokenSeq> {
        z.data()
            .chunks(EVAL_CHUNK * self.net.shape.latent_dim)
            .flat_map(|chunk| {
                let rows = chunk.len() / self.net.shape.latent_dim;
                let zc = Tensor::from_vec(&[rows, self.net.shape.latent_dim], chunk.to_vec()).expect("shape");
                self.net.decode_sample_batch(&self.params, &zc)
            })
            .collect()
    }

    fn latent_row(&self, z: &[f64]) -> Result<Tensor> {
        let d = self.net.shape.latent_dim;
        if z.len() != d {
            return Err(Error::Shape {
                context: "latent vector",
                expected: vec![d],
                actual: vec![z.len()],
            });
        }
        Tensor::from_vec(&[1, d], z.to_vec())
    }

    pub fn save(&self, dir: &Path, provenance: serde_json::Value) -> Result<()> {
        checkpoint::save(
            dir,
            self.net.shape.variant.kind(),
            serde_json::to_value(self.net.shape)?,
            provenance,
            &self.params,
        )
    }

    /// Loads a checkpoint of either variant.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let shape: WaeShape =
            serde_json::from_value(manifest.hyperparameters.clone()).map_err(|e| Error::IncompatibleArtifact {
                path: dir.to_path_buf(),
                reason: format!("hyperparameters: {e}"),
            })?;
        let ck = checkpoint::load(dir, shape.variant.kind())?;
        let mut model = WaeModel::new(shape, 0);
        ck.restore_into(&mut model.params, dir)?;
        Ok(model)
    }
}

const EVAL_CHUNK: usize = 1024;

fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-sq / (2.0 * bandwidth * bandwidth)).exp()
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel, clipped at 0.
pub fn mmd_sq(zq: &Tensor, zp: &Tensor, bandwidth: f64) -> Result<f64> {
    Ok(mmd_sq_grad(zq, zp, bandwidth)?.0)
}

/// Squared MMD and its gradient with respect to `zq`.
pub fn mmd_sq_grad(zq: &Tensor, zp: &Tensor, bandwidth: f64) -> Result<(f64, Tensor)> {
    if !(bandwidth > 0.0) {
        return Err(Error::Domain {
            operation: "mmd_sq bandwidth",
            value: bandwidth,
        });
    }
    if zq.rows() == 0 || zp.rows() == 0 {
        return Err(Error::Empty("mmd_sq"));
    }
    if zq.cols() != zp.cols() {
        return Err(Error::Shape {
            context: "mmd_sq",
            expected: vec![zq.cols()],
            actual: vec![zp.cols()],
        });
    }
    let (n, m, d) = (zq.rows(), zp.rows(), zq.cols());
    let (nf, mf) = (n as f64, m as f64);
    let inv_h2 = 1.0 / (bandwidth * bandwidth);
    let mut grad = Tensor::zeros(&[n, d]);
    let mut qq = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = gaussian_kernel(zq.row(i), zq.row(j), bandwidth);
            qq += k;
            if i != j {
                // d/dq_i of k(q_i, q_j) + k(q_j, q_i)
                let c = -2.0 * k * inv_h2 / (nf * nf);
                let (qi, qj) = (zq.row(i).to_vec(), zq.row(j));
                for (g, (a, b)) in grad.row_mut(i).iter_mut().zip(qi.iter().zip(qj)) {
                    *g += c * (a - b);
                }
            }
        }
    }
    let mut pp = 0.0;
    for i in 0..m {
        for j in 0..m {
            pp += gaussian_kernel(zp.row(i), zp.row(j), bandwidth);
        }
    }
    let mut qp = 0.0;
    for i in 0..n {
        for j in 0..m {
            let k = gaussian_kernel(zq.row(i), zp.row(j), bandwidth);
            qp += k;
            let c = 2.0 * k * inv_h2 / (nf * mf);
            let (qi, pj) = (zq.row(i).to_vec(), zp.row(j));
            for (g, (a, b)) in grad.row_mut(i).iter_mut().zip(qi.iter().zip(pj)) {
                *g += c * (a - b);
            }
        }
    }
    let value = qq / (nf * nf) + pp / (mf * mf) - 2.0 * qp / (nf * mf);
    if value <= 0.0 {
        return Ok((0.0, Tensor::zeros(&[n, d])));
    }
    Ok((value, grad))
}

/// Median pairwise Euclidean distance over the pooled rows of `a` and `b`.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let sq: f64 = rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    stats::median(&dists)
}

/// Mean over all entries of `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_to_unit(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape {
            context: "kl_to_unit",
            expected: vec![mu.len()],
            actual: vec![sigma.len()],
        });
    }
    if mu.is_empty() {
        return Err(Error::Empty("kl_to_unit"));
    }
    if let Some(&s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain {
            operation: "kl_to_unit sigma",
            value: s,
        });
    }
    let total: f64 = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum();
    Ok(total / mu.len() as f64)
}

/// Standard-normal draws consumed by one loss evaluation: the
/// reparameterization noise and the prior sample for the MMD term.
#[derive(Debug, Clone)]
pub struct LossNoise {
    pub eps: Tensor,
    pub prior: Tensor,
}

impl LossNoise {
    pub fn draw<R: Rng>(batch: usize, latent_dim: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize| -> Tensor {
            let data = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Tensor::from_vec(&[batch, latent_dim], data).expect("shape")
        };
        let eps = normal(batch * latent_dim);
        let prior = normal(batch * latent_dim);
        LossNoise { eps, prior }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub mmd: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub variant: Variant,
    pub kl_weight: f64,
    pub bandwidth: Bandwidth,
}

impl LossSettings {
    pub fn from_config(config: &WaeConfig) -> Self {
        LossSettings {
            variant: config.variant,
            kl_weight: config.kl_weight,
            bandwidth: config.bandwidth,
        }
    }
}

/// Training objective for a batch of frames.
///
/// WAE: `CE(decode(mu)) + MMD^2(mu + sigma * eps, prior) + kl_weight * KL`.
/// VAE: `CE(decode(mu + sigma * eps)) + KL`; its MMD is reported but not
/// optimized. With `accumulate`, gradients are added to `ps`.
pub fn loss(
    net: &WaeNet,
    ps: &mut ParameterSet,
    frames: &[Frame],
    noise: &LossNoise,
    settings: &LossSettings,
    accumulate: bool,
) -> Result<LossComponents> {
    let batch = frames.len();
    if batch == 0 {
        return Err(Error::Empty("loss batch"));
    }
    let d = net.shape.latent_dim;
    let enc = net.encoder_forward(ps, frames);
    let sigma = enc.log_sigma.map(f64::exp);
    let mut zq = enc.mu.clone();
    for ((z, s), e) in zq.data_mut().iter_mut().zip(sigma.data()).zip(noise.eps.data()) {
        *z += s * e;
    }
    let bandwidth = match settings.bandwidth {
        Bandwidth::PriorScale => (d as f64).sqrt(),
        Bandwidth::Median => {
            let b = median_bandwidth(&zq, &noise.prior);
            if b > 0.0 {
                b
            } else {
                (d as f64).sqrt()
            }
        }
    };
    let (mmd, dzq) = mmd_sq_grad(&zq, &noise.prior, bandwidth)?;
    let kl = kl_to_unit(enc.mu.data(), sigma.data())?;
    let (kl_weight, decoder_input) = match settings.variant {
        Variant::Wae => (settings.kl_weight, &enc.mu),
        Variant::Vae => (1.0, &zq),
    };
    let dec = net.decoder_forward(ps, decoder_input, frames);
    let targets = step_major(frames, |fr, t| fr[t]);
    let (ce, dlogits) = softmax_cross_entropy(&dec.logits, &targets, Some(Token::PAD.index()));
    let mmd_term = if settings.variant == Variant::Wae { mmd } else { 0.0 };
    let total = ce + mmd_term + kl_weight * kl;

    if accumulate {
        let dz = net.decoder_backward(ps, &dec, &dlogits);
        let count = (batch * d) as f64;
        let mut dmu = Tensor::zeros(&[batch, d]);
        let mut dls = Tensor::zeros(&[batch, d]);
        for i in 0..batch * d {
            let (m, s, e) = (enc.mu.data()[i], sigma.data()[i], noise.eps.data()[i]);
            let dkl_mu = kl_weight * m / count;
            let dkl_ls = kl_weight * (s * s - 1.0) / count;
            // Gradient reaching the reparameterized sample.
            let dsample = match settings.variant {
                Variant::Wae => dzq.data()[i],
                Variant::Vae => dz.data()[i],
            };
            let ddirect = if settings.variant == Variant::Wae {
                dz.data()[i]
            } else {
                0.0
            };
            dmu.data_mut()[i] = ddirect + dsample + dkl_mu;
            dls.data_mut()[i] = dsample * e * s + dkl_ls;
        }
        net.encoder_backward(ps, &enc, &dmu, &dls);
    }
    Ok(LossComponents { total, ce, mmd, kl })
}

/// Fraction of the 7 frame positions where `output` differs from `target`.
pub fn mismatch_fraction(target: &TokenSeq, output: &TokenSeq) -> f64 {
    mismatch_count(target, output) as f64 / FRAME_LEN as f64
}

/// Positions (over the 7-token frame) where the sequences differ; a missing
/// token counts as a mismatch.
pub fn mismatch_count(target: &TokenSeq, output: &TokenSeq) -> usize {
    (0..FRAME_LEN)
        .filter(|&i| target.tokens().get(i) != output.tokens().get(i))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training-batch cross-entropy (teacher forcing); initial row uses
    /// the evaluation pass instead.
    pub train_ce: f64,
    /// Direct reconstruction cross-entropy on the evaluation split, decoding `mu`.
    pub test_ce: f64,
    /// Mean mismatch fraction of greedy decodes of `mu` on the evaluation split.
    pub sampling_mismatch: f64,
    /// Fraction of evaluation items reconstructed exactly.
    pub exact_fraction: f64,
    pub mmd: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub train_size: usize,
    pub test_size: usize,
    /// False when the split left no held-out items and metrics use the training set.
    pub heldout: bool,
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochStats {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

/// Direct CE and greedy-decode metrics for `peptides`.
pub fn evaluate(model: &WaeModel, peptides: &[Peptide]) -> (f64, f64, f64) {
    let mut ce_sum = 0.0;
    let mut mismatches = 0usize;
    let mut exact = 0usize;
    for chunk in peptides.chunks(EVAL_CHUNK) {
        let frames: Vec<Frame> = chunk.iter().map(|p| p.frame()).collect();
        let (mu, _) = model.net.encode_frames(&model.params, &frames);
        let logits = model.net.decode_direct_frames(&model.params, &mu, &frames);
        let targets = step_major(&frames, |fr, t| fr[t]);
        let (ce, _) = softmax_cross_entropy(&logits, &targets, Some(Token::PAD.index()));
        ce_sum += ce * chunk.len() as f64;
        for (p, out) in chunk.iter().zip(model.net.decode_sample_batch(&model.params, &mu)) {
            let m = mismatch_count(&p.to_tokens(), &out);
            mismatches += m;
            exact += usize::from(m == 0);
        }
    }
    let n = peptides.len().max(1) as f64;
    (ce_sum / n, mismatches as f64 / (n * FRAME_LEN as f64), exact as f64 / n)
}

/// Shuffled train/test split used by [`train_model`].
pub fn split(peptides: &[Peptide], test_fraction: f64, seed: u64) -> (Vec<Peptide>, Vec<Peptide>) {
    let mut shuffled = peptides.to_vec();
    shuffled.shuffle(&mut SeedStream::new(seed).derive("wae-split").rng());
    let n_test = (peptides.len() as f64 * test_fraction).floor() as usize;
    let train = shuffled.split_off(n_test);
    (train, shuffled)
}

/// Trains a fresh model. `on_epoch` sees each epoch's statistics as they are
/// produced (logging, progress).
pub fn train_model(
    peptides: &[Peptide],
    config: &WaeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(WaeModel, TrainReport)> {
    config.validate()?;
    if peptides.is_empty() {
        return Err(Error::Empty("train_model dataset"));
    }
    let streams = SeedStream::new(seed);
    let (train, test) = split(peptides, config.test_fraction, seed);
    if train.is_empty() {
        return Err(Error::Empty("train_model training split"));
    }
    let heldout = !test.is_empty();
    let eval_set: &[Peptide] = if heldout { &test } else { &train };
    let mut model = WaeModel::new(config.shape(), seed);
    let settings = LossSettings::from_config(config);
    let adam = Adam::new(config.lr);
    let mut shuffle_rng = streams.derive("wae-shuffle").rng();
    let mut noise_rng = streams.derive("wae-noise").rng();

    let (ce0, mm0, ex0) = evaluate(&model, eval_set);
    let initial = EpochStats {
        epoch: 0,
        train_ce: ce0,
        test_ce: ce0,
        sampling_mismatch: mm0,
        exact_fraction: ex0,
        mmd: f64::NAN,
        kl: f64::NAN,
    };
    let mut report = TrainReport {
        variant: config.variant,
        train_size: train.len(),
        test_size: test.len(),
        heldout,
        initial,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut ce_sum, mut mmd_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let frames: Vec<Frame> = chunk.iter().map(|&i| train[i].frame()).collect();
            let noise = LossNoise::draw(frames.len(), config.latent_dim, &mut noise_rng);
            let c = loss(&model.net, &mut model.params, &frames, &noise, &settings, true)?;
            if !c.total.is_finite() {
                return Err(Error::Domain {
                    operation: "training loss",
                    value: c.total,
                });
            }
            adam.step(&mut model.params);
            ce_sum += c.ce;
            mmd_sum += c.mmd;
            kl_sum += c.kl;
            batches += 1;
        }
        let (test_ce, mismatch, exact) = evaluate(&model, eval_set);
        let b = batches as f64;
        let stats = EpochStats {
            epoch,
            train_ce: ce_sum / b,
            test_ce,
            sampling_mismatch: mismatch,
            exact_fraction: exact,
            mmd: mmd_sum / b,
            kl: kl_sum / b,
        };
        log::info!(
            "{} epoch {epoch}: train_ce {:.4} test_ce {:.4} mismatch {:.4}",
            config.variant.kind(),
            stats.train_ce,
            stats.test_ce,
            stats.sampling_mismatch
        );
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok((model, report))
}
