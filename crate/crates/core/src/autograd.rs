//! The differentiation contract shared by every layer, and the
//! central-difference checker used to verify it.
//!
//! Layers carry their own backward pass. `forward` caches whatever the
//! backward pass needs; `backward` consumes that cache, returns the gradient
//! with respect to the input and accumulates parameter gradients into
//! [`Param::grad`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Whether a layer is training (batch statistics, active dropout) or evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A differentiable layer with a hand-written backward pass.
pub trait Layer: Send {
    /// Short type name used in reports.
    fn kind(&self) -> &'static str;

    /// Computes the output and caches what `backward` needs. `rng` is only
    /// consumed by stochastic layers (dropout) in train mode.
    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor>;

    /// Returns dLoss/dInput and accumulates dLoss/dParams. Fails with
    /// [`Error::State`] when no forward pass is cached.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor>;

    /// Visits every learnable parameter under a stable, hierarchical name.
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Param)) {}

    /// Visits non-learnable state that must survive a checkpoint (running statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}

    fn set_mode(&mut self, _mode: Mode) {}

    /// Appends the branch taken by every piecewise unit during the last forward
    /// (ReLU sign, max-pool argmax). Smooth layers append nothing.
    fn active_branches(&self, _out: &mut Vec<u64>) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// Joins a parent scope and a child name with a dot.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn missing_cache(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called without a preceding forward"))
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Seed for the loss weights and for the dropout stream replayed on every forward.
    pub seed: u64,
    /// When set, only this many randomly chosen scalars per parameter tensor
    /// (and of the input) are probed. `None` probes every scalar.
    pub max_probes_per_tensor: Option<usize>,
    /// Step used to re-check a probe whose `+-step` evaluations switched a
    /// ReLU or max-pool branch.
    pub kink_step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            seed: 0,
            max_probes_per_tensor: None,
            kink_step: 1e-6,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layer: String,
    /// Largest `|a - n| / max(1, |a|, |n|)` over probes evaluated at `step`.
    pub max_rel_error: f64,
    /// Where the largest error occurred (`input[i]` or `param.name[i]`).
    pub worst: String,
    pub probes: usize,
    /// Probes whose `+-step` evaluations took a different piecewise branch than
    /// the unperturbed forward; these are compared at `kink_step` instead.
    pub kink_probes: usize,
    /// Largest relative error among kink probes (0 when there are none).
    pub kink_max_rel_error: f64,
    /// Kink probes that switched branches even at `kink_step`; not comparable.
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.kink_max_rel_error < tolerance && self.unresolved == 0
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn probe_indices(len: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
        _ => (0..len).collect(),
    }
}

/// What is being nudged during one probe.
enum Target<'a> {
    Input(usize),
    Param(&'a str, usize),
}

struct Checker<'a> {
    x: Tensor,
    weights: Tensor,
    dropout_seed: u64,
    branches: Vec<u64>,
    opts: &'a GradCheckOptions,
    report: GradCheckReport,
}

impl Checker<'_> {
    /// Loss and branch pattern of one forward pass.
    fn evaluate(&self, layer: &mut dyn Layer, input: &Tensor) -> Result<(f64, Vec<u64>)> {
        let mut rng = Rng::seed_from_u64(self.dropout_seed);
        let y = layer.forward(input, &mut rng)?;
        let l: f64 = y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum();
        if !l.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        let mut branches = Vec::new();
        layer.active_branches(&mut branches);
        Ok((l, branches))
    }

    /// Central difference at `h`; `None` when either side switched a branch.
    fn central(&mut self, layer: &mut dyn Layer, target: &Target, h: f64) -> Result<Option<f64>> {
        let mut sides = [0.0; 2];
        let mut smooth = true;
        for (side, sign) in sides.iter_mut().zip([1.0, -1.0]) {
            let (loss, branches) = match *target {
                Target::Input(i) => {
                    let orig = self.x.data()[i];
                    let mut input = self.x.clone();
                    input.data_mut()[i] = orig + sign * h;
                    self.evaluate(layer, &input)?
                }
                Target::Param(name, i) => {
                    let orig = set_param_scalar(layer, name, i, None)?;
                    set_param_scalar(layer, name, i, Some(orig + sign * h))?;
                    let out = self.evaluate(layer, &self.x.clone());
                    set_param_scalar(layer, name, i, Some(orig))?;
                    out?
                }
            };
            smooth &= branches == self.branches;
            *side = loss;
        }
        Ok(smooth.then(|| (sides[0] - sides[1]) / (2.0 * h)))
    }

    fn probe(&mut self, layer: &mut dyn Layer, target: Target, analytic: f64) -> Result<()> {
        self.report.probes += 1;
        let label = match target {
            Target::Input(i) => format!("input[{i}]"),
            Target::Param(name, i) => format!("{name}[{i}]"),
        };
        if let Some(numeric) = self.central(layer, &target, self.opts.step)? {
            let err = rel_error(analytic, numeric);
            if err > self.report.max_rel_error {
                self.report.max_rel_error = err;
                self.report.worst = label;
            }
            return Ok(());
        }
        self.report.kink_probes += 1;
        match self.central(layer, &target, self.opts.kink_step)? {
            Some(numeric) => {
                let err = rel_error(analytic, numeric);
                if err > self.report.kink_max_rel_error {
                    self.report.kink_max_rel_error = err;
                    if err > self.report.max_rel_error {
                        self.report.worst = label;
                    }
                }
            }
            None => self.report.unresolved += 1,
        }
        Ok(())
    }
}

/// Compares analytic gradients of `layer` against central differences.
///
/// The scalar loss is a fixed random projection of the output,
/// `L = sum_i w_i * y_i` with `w_i ~ U(-1, 1)`, so layers whose plain output
/// sum is constant (softmax, normalisation) are still exercised. Every
/// forward pass replays the same dropout stream.
///
/// Central differences are only meaningful where the function is smooth on
/// `[theta - h, theta + h]`. A probe whose perturbed forwards change any
/// ReLU sign or max-pool argmax is counted in `kink_probes` and compared at
/// `kink_step` instead.
pub fn grad_check(layer: &mut dyn Layer, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let dropout_seed = crate::derive_seed(opts.seed, 0xD50);
    let mut rng = Rng::seed_from_u64(dropout_seed);
    let y = layer.forward(x, &mut rng)?;
    let mut wrng = Rng::seed_from_u64(crate::derive_seed(opts.seed, 0x1055));
    let weights = Tensor::from_fn(y.shape(), |_| wrng.random_range(-1.0..1.0));
    let mut branches = Vec::new();
    layer.active_branches(&mut branches);

    let mut checker = Checker {
        x: x.clone(),
        weights,
        dropout_seed,
        branches,
        opts,
        report: GradCheckReport {
            layer: layer.kind().to_string(),
            max_rel_error: 0.0,
            worst: String::from("-"),
            probes: 0,
            kink_probes: 0,
            kink_max_rel_error: 0.0,
            unresolved: 0,
        },
    };
    checker.evaluate(layer, x)?;

    layer.zero_grad();
    let dx = layer.backward(&checker.weights.clone())?;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    layer.visit_params(&mut |name, p| analytic.push((name.to_string(), p.grad.clone())));

    let mut probe_rng = Rng::seed_from_u64(crate::derive_seed(opts.seed, 0x9B0BE));
    for i in probe_indices(x.len(), opts.max_probes_per_tensor, &mut probe_rng) {
        checker.probe(layer, Target::Input(i), dx.data()[i])?;
    }
    for (name, grad) in &analytic {
        for i in probe_indices(grad.len(), opts.max_probes_per_tensor, &mut probe_rng) {
            checker.probe(layer, Target::Param(name, i), grad.data()[i])?;
        }
    }
    Ok(checker.report)
}

/// Reads (and optionally overwrites) one scalar of a named parameter; returns the previous value.
fn set_param_scalar(layer: &mut dyn Layer, name: &str, index: usize, value: Option<f64>) -> Result<f64> {
    let mut previous = None;
    layer.visit_params(&mut |n, p| {
        if n == name {
            previous = Some(p.value.data()[index]);
            if let Some(v) = value {
                p.value.data_mut()[index] = v;
            }
        }
    });
    previous.ok_or_else(|| Error::State(format!("unknown parameter {name}")))
}
