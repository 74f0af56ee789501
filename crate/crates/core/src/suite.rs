//! Gradient check over every layer type and the scaled-down full model.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::autograd::{grad_check, GradCheckOptions, GradCheckReport, Layer, Mode};
use crate::error::Result;
use crate::layers::*;
use crate::model::{ClassifierHead, EncoderBlock, EncoderConfig, ModelConfig, Mscn, MultiHeadAttention, PainAttnNet, SeResBlock, SeResNetConfig, INPUT_LEN};
use crate::tensor::Tensor;
use crate::{derive_seed, Rng};

/// Relative error bound every case must stay under.
pub const TOLERANCE: f64 = 1e-4;

/// One checked case.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub case: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::seed_from_u64(derive_seed(seed, 0xABCD));
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Magnitudes in [0.1, 1]: a step never crosses a ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::seed_from_u64(derive_seed(seed, 0x5EED));
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values 0.01 apart in random order, so pooling windows have no ties.
fn spaced(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(&mut Rng::seed_from_u64(derive_seed(seed, 0x5AC)));
    Tensor::from_fn(shape, |i| v[i])
}

type Case = (&'static str, Box<dyn Layer>, Tensor, Option<usize>);

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = Rng::seed_from_u64(seed);
    let mut bn = BatchNorm1d::new(3);
    bn.gamma.value = uniform(&[3], seed + 10);
    bn.beta.value = uniform(&[3], seed + 20);
    let mut bn_eval = bn.clone();
    bn_eval.set_mode(Mode::Eval);
    let mut ln = LayerNorm::new(6)?;
    ln.gain.value = uniform(&[6], seed + 1);
    let mut seq = Sequential::new();
    seq.push("conv", Conv1d::new(Conv1dSpec::new(1, 2, 3, 1, 1), &mut r)?);
    seq.push("bn", BatchNorm1d::new(2));
    seq.push("act", Gelu::new());
    seq.push("drop", Dropout::new(0.2)?);
    let encoder = EncoderConfig {
        heads: 2,
        width: 6,
        tcn_kernel: 3,
        ffn_hidden: 7,
        dropout: 0.1,
        blocks: 1,
    };
    let se = SeResNetConfig {
        in_channels: 6,
        mid_channels: 4,
        reduction: 2,
    };
    Ok(alloc::vec![
        ("conv1d", Box::new(Conv1d::new(Conv1dSpec::new(2, 3, 3, 1, 1), &mut r)?) as Box<dyn Layer>, uniform(&[2, 2, 10], seed), None),
        ("conv1d/strided", Box::new(Conv1d::new(Conv1dSpec::new(2, 2, 4, 3, 2), &mut r)?), uniform(&[2, 2, 10], seed), None),
        ("conv1d/causal", Box::new(Conv1d::new(Conv1dSpec::causal(3, 2, 4), &mut r)?), uniform(&[2, 3, 10], seed), None),
        ("maxpool1d", Box::new(MaxPool1d::new(3, 2)?), spaced(&[2, 2, 11], seed), None),
        ("batchnorm1d/train", Box::new(bn), uniform(&[4, 3, 5], seed), None),
        ("batchnorm1d/eval", Box::new(bn_eval), uniform(&[4, 3, 5], seed), None),
        ("dropout", Box::new(Dropout::new(0.4)?), uniform(&[2, 3, 6], seed), None),
        ("gelu", Box::new(Gelu::new()), uniform(&[2, 3, 5], seed), None),
        ("relu", Box::new(Relu::new()), away_from_zero(&[2, 3, 5], seed), None),
        ("sigmoid", Box::new(Sigmoid::new()), uniform(&[2, 3, 5], seed).scale(3.0), None),
        ("softmax", Box::new(Softmax::new()), uniform(&[3, 5], seed).scale(2.0), None),
        ("layernorm", Box::new(ln), uniform(&[2, 3, 6], seed), None),
        ("linear", Box::new(Linear::new(5, 4, &mut r)?), uniform(&[3, 5], seed), None),
        ("sequential", Box::new(seq), uniform(&[3, 1, 8], seed), None),
        ("mscn", Box::new(Mscn::new(&ModelConfig::mini(2).mscn, &mut r)?), uniform(&[2, 1, INPUT_LEN], seed), Some(12)),
        ("se_block", Box::new(SeResBlock::new(&se, &mut r)?), uniform(&[2, 6, 9], seed), None),
        ("attention", Box::new(MultiHeadAttention::new(4, 6, 3, 3, &mut r)?), uniform(&[2, 4, 6], seed), None),
        ("encoder", Box::new(EncoderBlock::new(4, &encoder, &mut r)?), uniform(&[2, 4, 6], seed), None),
        ("classifier", Box::new(ClassifierHead::new(12, 5, 3, &mut r)?), uniform(&[2, 4, 3], seed), None),
        ("model/mini", Box::new(PainAttnNet::new(ModelConfig::mini(3), seed)?), uniform(&[3, 1, INPUT_LEN], seed), Some(6)),
    ])
}

/// Runs every case once with `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (case, mut layer, x, probes) in cases(seed)? {
        let opts = GradCheckOptions {
            seed,
            max_probes_per_tensor: probes,
            ..GradCheckOptions::default()
        };
        let report = grad_check(layer.as_mut(), &x, &opts)?;
        out.push(SuiteEntry {
            case: case.to_string(),
            report,
        });
    }
    Ok(out)
}
