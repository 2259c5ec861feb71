//! Finite-difference checks of every layer and of the three training losses on
//! small random shapes. Backs the `grad-check` command.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::Peptide;
use crate::data::LabelledRecord;
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, input_grad_check, GradCheckReport, DEFAULT_TOLERANCE};
use crate::nn::layers::{
    log_softmax, mean_pool, mean_pool_backward, relu, relu_backward, softmax_cross_entropy, tanh, tanh_backward,
    Conv1d, Embedding, Gru, Linear,
};
use crate::nn::{ParameterSet, Tensor};
use crate::rng::SeedStream;
use crate::surrogate::{loss_and_grad, SurrogateModel, SurrogateShape};
use crate::wae::{loss, Bandwidth, Frame, LossNoise, LossSettings, Variant, WaeModel, WaeShape, KL_WEIGHT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub params: GradCheckReport,
    /// Worst relative error of the input gradient, for layers that return one.
    pub input_error: Option<f64>,
    pub passed: bool,
}

impl SuiteEntry {
    fn new(name: &str, params: GradCheckReport, input_error: Option<f64>) -> Self {
        let passed = params.passed && input_error.is_none_or(|e| e < DEFAULT_TOLERANCE);
        SuiteEntry {
            name: name.to_string(),
            params,
            input_error,
            passed,
        }
    }

    pub fn max_error(&self) -> f64 {
        self.params.max_rel_error.max(self.input_error.unwrap_or(0.0))
    }
}

fn random(shape: &[usize], stream: SeedStream) -> Tensor {
    let mut rng = stream.rng();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).expect("shape")
}

/// Moves every parameter by a small random amount so that zero-initialized
/// biases do not leave ReLU inputs exactly on the kink.
fn jitter(ps: &mut ParameterSet, stream: SeedStream) {
    let mut rng = stream.rng();
    for p in ps.iter_mut() {
        for v in p.value.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * e;
        }
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn linear(s: &SeedStream) -> SuiteEntry {
    let mut ps = ParameterSet::new();
    let lin = Linear::new(&mut ps, "linear", 4, 3, &mut s.derive("init").rng());
    jitter(&mut ps, s.derive("jitter"));
    let x = random(&[5, 4], s.derive("x"));
    let c = random(&[5, 3], s.derive("c"));
    let report = grad_check(&mut ps, |ps, acc| {
        let y = lin.forward(ps, &x);
        if acc {
            lin.backward(ps, &x, &c);
        }
        dot(&y, &c)
    });
    let dx = lin.backward(&mut ps.clone(), &x, &c);
    let err = input_grad_check(&x, &dx, |x| dot(&lin.forward(&ps, x), &c));
    SuiteEntry::new("linear", report, Some(err))
}

fn activations(s: &SeedStream) -> SuiteEntry {
    let mut ps = ParameterSet::new();
    let mut rng = s.derive("init").rng();
    let a = Linear::new(&mut ps, "act.a", 3, 4, &mut rng);
    let b = Linear::new(&mut ps, "act.b", 4, 2, &mut rng);
    jitter(&mut ps, s.derive("jitter"));
    let x = random(&[6, 3], s.derive("x"));
    let c = random(&[6, 2], s.derive("c"));
    let f = |ps: &ParameterSet, x: &Tensor| {
        let h = relu(&a.forward(ps, x));
        let y = tanh(&b.forward(ps, &h));
        (h, y)
    };
    let report = grad_check(&mut ps, |ps, acc| {
        let (h, y) = f(ps, &x);
        if acc {
            let dz = tanh_backward(&y, &c);
            let dh = b.backward(ps, &h, &dz);
            a.backward(ps, &x, &relu_backward(&h, &dh));
        }
        dot(&y, &c)
    });
    SuiteEntry::new("relu+tanh", report, None)
}

fn embedding(s: &SeedStream) -> SuiteEntry {
    let mut ps = ParameterSet::new();
    let emb = Embedding::new(&mut ps, "embedding", 6, 3, &mut s.derive("init").rng());
    let tokens = [0, 5, 2, 5, 1];
    let c = random(&[5, 3], s.derive("c"));
    let report = grad_check(&mut ps, |ps, acc| {
        let y = emb.forward(ps, &tokens);
        if acc {
            emb.backward(ps, &tokens, &c);
        }
        dot(&y, &c)
    });
    SuiteEntry::new("embedding", report, None)
}

fn gru(s: &SeedStream) -> SuiteEntry {
    let (inputs, hidden, batch, steps) = (3, 4, 2, 3);
    let mut ps = ParameterSet::new();
    let gru = Gru::new(&mut ps, "gru", inputs, hidden, &mut s.derive("init").rng());
    jitter(&mut ps, s.derive("jitter"));
    let xs = random(&[steps * batch, inputs], s.derive("x"));
    let h0 = random(&[batch, hidden], s.derive("h0")).map(|v| 0.5 * v);
    let c = random(&[steps * batch, hidden], s.derive("c"));
    let report = grad_check(&mut ps, |ps, acc| {
        let (hs, cache) = gru.forward_seq(ps, &xs, &h0);
        if acc {
            gru.backward_seq(ps, &cache, &c);
        }
        dot(&hs, &c)
    });
    let (_, cache) = gru.forward_seq(&ps, &xs, &h0);
    let (dxs, dh0) = gru.backward_seq(&mut ps.clone(), &cache, &c);
    let ex = input_grad_check(&xs, &dxs, |x| dot(&gru.forward_seq(&ps, x, &h0).0, &c));
    let eh = input_grad_check(&h0, &dh0, |h| dot(&gru.forward_seq(&ps, &xs, h).0, &c));
    SuiteEntry::new("gru", report, Some(ex.max(eh)))
}

fn conv1d(s: &SeedStream) -> SuiteEntry {
    let (length, batch, cin, cout) = (5, 2, 3, 4);
    let mut ps = ParameterSet::new();
    let conv = Conv1d::new(&mut ps, "conv", cin, cout, 3, &mut s.derive("init").rng());
    jitter(&mut ps, s.derive("jitter"));
    let x = random(&[batch * length, cin], s.derive("x"));
    let c = random(&[batch * length, cout], s.derive("c"));
    let report = grad_check(&mut ps, |ps, acc| {
        let (y, cols) = conv.forward(ps, &x, length);
        if acc {
            conv.backward(ps, &cols, &c, length);
        }
        dot(&y, &c)
    });
    let (_, cols) = conv.forward(&ps, &x, length);
    let dx = conv.backward(&mut ps.clone(), &cols, &c, length);
    let err = input_grad_check(&x, &dx, |x| dot(&conv.forward(&ps, x, length).0, &c));
    SuiteEntry::new("conv1d", report, Some(err))
}

fn pool_and_cross_entropy(s: &SeedStream) -> SuiteEntry {
    let (length, batch) = (4, 3);
    let mut ps = ParameterSet::new();
    let lin = Linear::new(&mut ps, "head", 3, 5, &mut s.derive("init").rng());
    jitter(&mut ps, s.derive("jitter"));
    let x = random(&[batch * length, 3], s.derive("x"));
    let targets = [4, 0, 2];
    let report = grad_check(&mut ps, |ps, acc| {
        let pooled = mean_pool(&x, length);
        let logits = lin.forward(ps, &pooled);
        let (l, dlogits) = softmax_cross_entropy(&logits, &targets, None);
        if acc {
            lin.backward(ps, &pooled, &dlogits);
        }
        debug_assert!(log_softmax(&logits).is_finite());
        l
    });
    let dpool = lin.backward(&mut ps.clone(), &mean_pool(&x, length), &{
        let logits = lin.forward(&ps, &mean_pool(&x, length));
        softmax_cross_entropy(&logits, &targets, None).1
    });
    let dx = mean_pool_backward(&dpool, length);
    let err = input_grad_check(&x, &dx, |x| {
        softmax_cross_entropy(&lin.forward(&ps, &mean_pool(x, length)), &targets, None).0
    });
    SuiteEntry::new("mean_pool+cross_entropy", report, Some(err))
}

fn autoencoder(s: &SeedStream, variant: Variant) -> Result<SuiteEntry> {
    let shape = WaeShape {
        variant,
        latent_dim: 3,
        hidden: 4,
        embed: 3,
    };
    let mut model = WaeModel::new(shape, s.derive("init").key());
    let frames: Vec<Frame> = ["ACDEF", "YWVTS", "KKLMN"]
        .iter()
        .map(|p| Peptide::parse(p).expect("literal peptide").frame())
        .collect();
    let noise = LossNoise::draw(frames.len(), shape.latent_dim, &mut s.derive("noise").rng());
    let settings = LossSettings {
        variant,
        kl_weight: KL_WEIGHT,
        bandwidth: Bandwidth::PriorScale,
    };
    let net = model.net.clone();
    loss(&net, &mut model.params, &frames, &noise, &settings, false)?;
    let report = grad_check(&mut model.params, |ps, acc| {
        loss(&net, ps, &frames, &noise, &settings, acc)
            .expect("valid frames")
            .total
    });
    Ok(SuiteEntry::new(&format!("{}_loss", variant.kind()), report, None))
}

fn surrogate(s: &SeedStream) -> Result<SuiteEntry> {
    let shape = SurrogateShape {
        embed: 3,
        hidden: 4,
        conv1: 4,
        conv2: 3,
    };
    let mut model = SurrogateModel::new(shape, s.derive("init").key());
    jitter(&mut model.params, s.derive("jitter"));
    let record = |p: &str, b: f64, h: f64| LabelledRecord {
        sequence: Peptide::parse(p).expect("literal peptide"),
        hydro_raw: 0.0,
        binding_raw: 0.0,
        hydro_norm: h,
        binding_norm: b,
    };
    let records = [
        record("ACDEF", 0.5, -1.0),
        record("WWYKL", -0.3, 2.0),
        record("PPGGA", 1.0, 0.1),
    ];
    let net = model.net.clone();
    loss_and_grad(&net, &mut model.params, &records, false)?;
    let report = grad_check(&mut model.params, |ps, acc| {
        loss_and_grad(&net, ps, &records, acc).expect("valid records")
    });
    Ok(SuiteEntry::new("surrogate_loss", report, None))
}

pub fn grad_check_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let s = SeedStream::new(seed).derive("grad-check");
    Ok(vec![
        linear(&s.derive("linear")),
        activations(&s.derive("activations")),
        embedding(&s.derive("embedding")),
        gru(&s.derive("gru")),
        conv1d(&s.derive("conv1d")),
        pool_and_cross_entropy(&s.derive("pool")),
        autoencoder(&s.derive("wae"), Variant::Wae)?,
        autoencoder(&s.derive("vae"), Variant::Vae)?,
        surrogate(&s.derive("surrogate"))?,
    ])
}
