//! Layers with explicit forward and backward passes.
//!
//! Batched activations are `[rows, features]` matrices. Sequences are stacked
//! step-major (`row = t * batch + b`); convolution maps are sample-major
//! (`row = b * length + l`).

use rand::Rng;

use super::params::{ParamId, ParameterSet};
use super::tensor::{gemm, Tensor};

fn add_bias(y: &mut Tensor, bias: &[f64]) {
    let n = bias.len();
    for row in y.data_mut().chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_column_sums(dy: &[f64], width: usize, acc: &mut [f64]) {
    for row in dy.chunks_exact(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// `y = x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParameterSet, prefix: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = ps.add_uniform(format!("{prefix}.weight"), &[inputs, outputs], inputs, rng);
        let bias = ps.add_zeros(format!("{prefix}.bias"), &[outputs]);
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, ps: &ParameterSet, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.inputs, "Linear input width");
        let rows = x.rows();
        let mut y = Tensor::zeros(&[rows, self.outputs]);
        gemm(
            rows,
            self.inputs,
            self.outputs,
            1.0,
            x.data(),
            false,
            ps.value(self.weight).data(),
            false,
            0.0,
            y.data_mut(),
        );
        add_bias(&mut y, ps.value(self.bias).data());
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &mut ParameterSet, x: &Tensor, dy: &Tensor) -> Tensor {
        let rows = x.rows();
        assert_eq!(dy.shape(), &[rows, self.outputs], "Linear upstream gradient");
        gemm(
            self.inputs,
            rows,
            self.outputs,
            1.0,
            x.data(),
            true,
            dy.data(),
            false,
            1.0,
            ps.grad_mut(self.weight).data_mut(),
        );
        accumulate_column_sums(dy.data(), self.outputs, ps.grad_mut(self.bias).data_mut());
        let mut dx = Tensor::zeros(&[rows, self.inputs]);
        gemm(
            rows,
            self.outputs,
            self.inputs,
            1.0,
            dy.data(),
            false,
            ps.value(self.weight).data(),
            true,
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

/// Token lookup table `[vocab, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(ps: &mut ParameterSet, prefix: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add_uniform(format!("{prefix}.table"), &[vocab, dim], 1, rng);
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, ps: &ParameterSet, tokens: &[usize]) -> Tensor {
        let table = ps.value(self.table);
        let mut out = Tensor::zeros(&[tokens.len(), self.dim]);
        for (i, &t) in tokens.iter().enumerate() {
            assert!(t < self.vocab, "token {t} outside vocabulary");
            out.row_mut(i).copy_from_slice(table.row(t));
        }
        out
    }

    pub fn backward(&self, ps: &mut ParameterSet, tokens: &[usize], dy: &Tensor) {
        assert_eq!(dy.shape(), &[tokens.len(), self.dim], "Embedding upstream gradient");
        let grad = ps.grad_mut(self.table);
        for (i, &t) in tokens.iter().enumerate() {
            for (g, v) in grad.row_mut(t).iter_mut().zip(dy.row(i)) {
                *g += v;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Gradient through tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &d)| d * (1.0 - y * y))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Gated recurrent unit with reset gate `r`, update gate `z` and candidate `n`:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
///
/// The three gate blocks are concatenated as `[r | z | n]` along the output
/// axis of `w_ih: [inputs, 3H]` and `w_hh: [H, 3H]`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Activations kept by [`Gru::forward_seq`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    batch: usize,
    steps: usize,
    xs: Tensor,
    h_prev: Tensor,
    r: Tensor,
    z: Tensor,
    n: Tensor,
    gh_n: Tensor,
}

/// Per-step GRU rows: `(h', r, z, n, gh_n)`.
type GateRows = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

impl Gru {
    pub fn new<R: Rng>(ps: &mut ParameterSet, prefix: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = ps.add_uniform(format!("{prefix}.w_ih"), &[inputs, 3 * hidden], inputs, rng);
        let w_hh = ps.add_uniform(format!("{prefix}.w_hh"), &[hidden, 3 * hidden], hidden, rng);
        let b_ih = ps.add_zeros(format!("{prefix}.b_ih"), &[3 * hidden]);
        let b_hh = ps.add_zeros(format!("{prefix}.b_hh"), &[3 * hidden]);
        Gru {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            inputs,
            hidden,
        }
    }

    fn hidden_projection(&self, ps: &ParameterSet, h: &[f64], batch: usize) -> Vec<f64> {
        let h3 = 3 * self.hidden;
        let mut gh = vec![0.0; batch * h3];
        gemm(
            batch,
            self.hidden,
            h3,
            1.0,
            h,
            false,
            ps.value(self.w_hh).data(),
            false,
            0.0,
            &mut gh,
        );
        let b = ps.value(self.b_hh).data();
        for row in gh.chunks_exact_mut(h3) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        gh
    }

    /// Gate update for one step.
    fn cell(&self, gi: &[f64], gh: &[f64], h: &[f64], batch: usize) -> GateRows {
        let hd = self.hidden;
        let size = batch * hd;
        let (mut out, mut r, mut z, mut n, mut ghn) = (
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
        );
        for b in 0..batch {
            let gi = &gi[b * 3 * hd..(b + 1) * 3 * hd];
            let gh = &gh[b * 3 * hd..(b + 1) * 3 * hd];
            for j in 0..hd {
                let k = b * hd + j;
                let rv = sigmoid(gi[j] + gh[j]);
                let zv = sigmoid(gi[hd + j] + gh[hd + j]);
                let nv = (gi[2 * hd + j] + rv * gh[2 * hd + j]).tanh();
                out[k] = (1.0 - zv) * nv + zv * h[k];
                r[k] = rv;
                z[k] = zv;
                n[k] = nv;
                ghn[k] = gh[2 * hd + j];
            }
        }
        (out, r, z, n, ghn)
    }

    fn input_projection(&self, ps: &ParameterSet, xs: &Tensor) -> Tensor {
        assert_eq!(xs.cols(), self.inputs, "GRU input width");
        let rows = xs.rows();
        let mut gi = Tensor::zeros(&[rows, 3 * self.hidden]);
        gemm(
            rows,
            self.inputs,
            3 * self.hidden,
            1.0,
            xs.data(),
            false,
            ps.value(self.w_ih).data(),
            false,
            0.0,
            gi.data_mut(),
        );
        add_bias(&mut gi, ps.value(self.b_ih).data());
        gi
    }

    /// Single step without caching, for inference loops.
    pub fn step(&self, ps: &ParameterSet, x: &Tensor, h: &Tensor) -> Tensor {
        let batch = h.rows();
        assert_eq!(x.rows(), batch, "GRU step batch");
        let gi = self.input_projection(ps, x);
        let gh = self.hidden_projection(ps, h.data(), batch);
        let (out, ..) = self.cell(gi.data(), &gh, h.data(), batch);
        Tensor::from_vec(&[batch, self.hidden], out).expect("shape")
    }

    /// Runs `steps` steps over step-major inputs `xs: [steps * batch, inputs]`
    /// starting from `h0: [batch, H]`. Returns every hidden state, step-major.
    pub fn forward_seq(&self, ps: &ParameterSet, xs: &Tensor, h0: &Tensor) -> (Tensor, GruCache) {
        let batch = h0.rows();
        let hd = self.hidden;
        assert_eq!(h0.cols(), hd, "GRU initial state width");
        assert_eq!(xs.rows() % batch.max(1), 0, "GRU inputs not a whole number of steps");
        let steps = xs.rows().checked_div(batch).unwrap_or(0);
        let gi = self.input_projection(ps, xs);
        let rows = steps * batch;
        let mut hs = Tensor::zeros(&[rows, hd]);
        let mut cache = GruCache {
            batch,
            steps,
            xs: xs.clone(),
            h_prev: Tensor::zeros(&[rows, hd]),
            r: Tensor::zeros(&[rows, hd]),
            z: Tensor::zeros(&[rows, hd]),
            n: Tensor::zeros(&[rows, hd]),
            gh_n: Tensor::zeros(&[rows, hd]),
        };
        let mut h = h0.data().to_vec();
        for t in 0..steps {
            let span = t * batch * hd..(t + 1) * batch * hd;
            let gi_t = &gi.data()[t * batch * 3 * hd..(t + 1) * batch * 3 * hd];
            let gh = self.hidden_projection(ps, &h, batch);
            let (out, r, z, n, ghn) = self.cell(gi_t, &gh, &h, batch);
            cache.h_prev.data_mut()[span.clone()].copy_from_slice(&h);
            cache.r.data_mut()[span.clone()].copy_from_slice(&r);
            cache.z.data_mut()[span.clone()].copy_from_slice(&z);
            cache.n.data_mut()[span.clone()].copy_from_slice(&n);
            cache.gh_n.data_mut()[span.clone()].copy_from_slice(&ghn);
            hs.data_mut()[span].copy_from_slice(&out);
            h = out;
        }
        (hs, cache)
    }

    /// Back-propagates `dhs` (gradient w.r.t. every returned hidden state).
    /// Accumulates parameter gradients; returns `(dxs, dh0)`.
    pub fn backward_seq(&self, ps: &mut ParameterSet, cache: &GruCache, dhs: &Tensor) -> (Tensor, Tensor) {
        let (batch, steps, hd) = (cache.batch, cache.steps, self.hidden);
        let h3 = 3 * hd;
        let rows = steps * batch;
        assert_eq!(dhs.shape(), &[rows, hd], "GRU upstream gradient");
        let mut dgi = Tensor::zeros(&[rows, h3]);
        let mut dgh = Tensor::zeros(&[rows, h3]);
        let mut carry = vec![0.0; batch * hd];
        for t in (0..steps).rev() {
            let base = t * batch * hd;
            let mut next_carry = vec![0.0; batch * hd];
            for b in 0..batch {
                let row = t * batch + b;
                for j in 0..hd {
                    let k = base + b * hd + j;
                    let dh = dhs.data()[k] + carry[b * hd + j];
                    let (r, z, n) = (cache.r.data()[k], cache.z.data()[k], cache.n.data()[k]);
                    let hp = cache.h_prev.data()[k];
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp - n);
                    next_carry[b * hd + j] = dh * z;
                    let dan = dn * (1.0 - n * n);
                    let dr = dan * cache.gh_n.data()[k];
                    let dar = dr * r * (1.0 - r);
                    let daz = dz * z * (1.0 - z);
                    let gi_row = &mut dgi.data_mut()[row * h3..(row + 1) * h3];
                    gi_row[j] = dar;
                    gi_row[hd + j] = daz;
                    gi_row[2 * hd + j] = dan;
                    let gh_row = &mut dgh.data_mut()[row * h3..(row + 1) * h3];
                    gh_row[j] = dar;
                    gh_row[hd + j] = daz;
                    gh_row[2 * hd + j] = dan * r;
                }
            }
            gemm(
                batch,
                h3,
                hd,
                1.0,
                &dgh.data()[t * batch * h3..(t + 1) * batch * h3],
                false,
                ps.value(self.w_hh).data(),
                true,
                1.0,
                &mut next_carry,
            );
            carry = next_carry;
        }
        gemm(
            self.inputs,
            rows,
            h3,
            1.0,
            cache.xs.data(),
            true,
            dgi.data(),
            false,
            1.0,
            ps.grad_mut(self.w_ih).data_mut(),
        );
        gemm(
            hd,
            rows,
            h3,
            1.0,
            cache.h_prev.data(),
            true,
            dgh.data(),
            false,
            1.0,
            ps.grad_mut(self.w_hh).data_mut(),
        );
        accumulate_column_sums(dgi.data(), h3, ps.grad_mut(self.b_ih).data_mut());
        accumulate_column_sums(dgh.data(), h3, ps.grad_mut(self.b_hh).data_mut());
        let mut dxs = Tensor::zeros(&[rows, self.inputs]);
        gemm(
            rows,
            h3,
            self.inputs,
            1.0,
            dgi.data(),
            false,
            ps.value(self.w_ih).data(),
            true,
            0.0,
            dxs.data_mut(),
        );
        let dh0 = Tensor::from_vec(&[batch, hd], carry).expect("shape");
        (dxs, dh0)
    }
}

/// Same-padded 1-D convolution over a `(length x channels)` map, stride 1.
/// Weight layout `[kernel * in_channels, out_channels]` with offset-major rows.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        ps: &mut ParameterSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = kernel * in_channels;
        let weight = ps.add_uniform(format!("{prefix}.weight"), &[fan_in, out_channels], fan_in, rng);
        let bias = ps.add_zeros(format!("{prefix}.bias"), &[out_channels]);
        Conv1d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn im2col(&self, x: &Tensor, length: usize) -> Tensor {
        let cin = self.in_channels;
        let pad = self.kernel / 2;
        let rows = x.rows();
        let mut cols = Tensor::zeros(&[rows, self.kernel * cin]);
        for row in 0..rows {
            let (b, l) = (row / length, row % length);
            for o in 0..self.kernel {
                let src = l + o;
                if src < pad || src - pad >= length {
                    continue;
                }
                let src_row = b * length + src - pad;
                cols.row_mut(row)[o * cin..(o + 1) * cin].copy_from_slice(x.row(src_row));
            }
        }
        cols
    }

    /// `x: [batch * length, in_channels]`, sample-major. Returns the output map
    /// and the unfolded input needed by [`Conv1d::backward`].
    pub fn forward(&self, ps: &ParameterSet, x: &Tensor, length: usize) -> (Tensor, Tensor) {
        assert_eq!(x.cols(), self.in_channels, "Conv1d input channels");
        assert_eq!(x.rows() % length, 0, "Conv1d rows not a multiple of length");
        let cols = self.im2col(x, length);
        let rows = x.rows();
        let mut y = Tensor::zeros(&[rows, self.out_channels]);
        gemm(
            rows,
            self.kernel * self.in_channels,
            self.out_channels,
            1.0,
            cols.data(),
            false,
            ps.value(self.weight).data(),
            false,
            0.0,
            y.data_mut(),
        );
        add_bias(&mut y, ps.value(self.bias).data());
        (y, cols)
    }

    pub fn backward(&self, ps: &mut ParameterSet, cols: &Tensor, dy: &Tensor, length: usize) -> Tensor {
        let rows = cols.rows();
        let kc = self.kernel * self.in_channels;
        assert_eq!(dy.shape(), &[rows, self.out_channels], "Conv1d upstream gradient");
        gemm(
            kc,
            rows,
            self.out_channels,
            1.0,
            cols.data(),
            true,
            dy.data(),
            false,
            1.0,
            ps.grad_mut(self.weight).data_mut(),
        );
        accumulate_column_sums(dy.data(), self.out_channels, ps.grad_mut(self.bias).data_mut());
        let mut dcols = Tensor::zeros(&[rows, kc]);
        gemm(
            rows,
            self.out_channels,
            kc,
            1.0,
            dy.data(),
            false,
            ps.value(self.weight).data(),
            true,
            0.0,
            dcols.data_mut(),
        );
        let cin = self.in_channels;
        let pad = self.kernel / 2;
        let mut dx = Tensor::zeros(&[rows, cin]);
        for row in 0..rows {
            let (b, l) = (row / length, row % length);
            for o in 0..self.kernel {
                let src = l + o;
                if src < pad || src - pad >= length {
                    continue;
                }
                let src_row = b * length + src - pad;
                let grad = &dcols.row(row)[o * cin..(o + 1) * cin];
                for (d, g) in dx.row_mut(src_row).iter_mut().zip(grad) {
                    *d += g;
                }
            }
        }
        dx
    }
}

/// Averages each sample's `length` rows: `[batch * length, C] -> [batch, C]`.
pub fn mean_pool(x: &Tensor, length: usize) -> Tensor {
    let c = x.cols();
    let batch = x.rows() / length;
    let mut out = Tensor::zeros(&[batch, c]);
    for b in 0..batch {
        let acc = out.row_mut(b);
        for l in 0..length {
            for (a, v) in acc.iter_mut().zip(x.row(b * length + l)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= length as f64);
    }
    out
}

pub fn mean_pool_backward(dy: &Tensor, length: usize) -> Tensor {
    let c = dy.cols();
    let batch = dy.rows();
    let mut dx = Tensor::zeros(&[batch * length, c]);
    for b in 0..batch {
        for l in 0..length {
            for (d, g) in dx.row_mut(b * length + l).iter_mut().zip(dy.row(b)) {
                *d = g / length as f64;
            }
        }
    }
    dx
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let v = logits.cols();
    for row in out.data_mut().chunks_exact_mut(v) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

/// Mean cross-entropy of `logits: [N, V]` against `targets`, skipping rows whose
/// target equals `ignore`. Returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], ignore: Option<usize>) -> (f64, Tensor) {
    assert_eq!(logits.rows(), targets.len(), "cross-entropy targets");
    let logp = log_softmax(logits);
    let counted = targets.iter().filter(|&&t| Some(t) != ignore).count();
    let mut grad = Tensor::zeros(logits.shape());
    if counted == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / counted as f64;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        loss -= logp.row(i)[t];
        for (g, lp) in grad.row_mut(i).iter_mut().zip(logp.row(i)) {
            *g = lp.exp() * scale;
        }
        grad.row_mut(i)[t] -= scale;
    }
    (loss * scale, grad)
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}
