//! Classification tasks, loss, optimiser, the epoch loop and
//! leave-one-subject-out cross-validation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autograd::{Layer, Mode};
use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{ModelConfig, PainAttnNet};
use crate::synth::{WindowRecord, LEVELS};
use crate::tensor::{Reduce, Tensor};
use crate::Rng;

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Maps raw stimulus levels to task classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: &'static str,
    /// `label_map[level]` is the class, or `None` when the level is excluded.
    pub label_map: [Option<usize>; LEVELS],
    pub num_classes: usize,
}

impl TaskSpec {
    /// All five levels as separate classes.
    pub const FIVE_WAY: TaskSpec = TaskSpec {
        name: "5way",
        label_map: [Some(0), Some(1), Some(2), Some(3), Some(4)],
        num_classes: 5,
    };
    /// Baseline against any heat stage.
    pub const PAIN_ANY: TaskSpec = TaskSpec {
        name: "pain-any",
        label_map: [Some(0), Some(1), Some(1), Some(1), Some(1)],
        num_classes: 2,
    };

    /// Baseline against a single heat stage `1..=4`.
    pub const fn baseline_vs(level: usize) -> TaskSpec {
        let mut label_map = [None; LEVELS];
        label_map[0] = Some(0);
        label_map[level] = Some(1);
        let name = match level {
            1 => "t0t1",
            2 => "t0t2",
            3 => "t0t3",
            _ => "t0t4",
        };
        TaskSpec {
            name,
            label_map,
            num_classes: 2,
        }
    }

    pub fn all() -> [TaskSpec; 6] {
        [
            Self::FIVE_WAY,
            Self::PAIN_ANY,
            Self::baseline_vs(1),
            Self::baseline_vs(2),
            Self::baseline_vs(3),
            Self::baseline_vs(4),
        ]
    }

    pub fn by_name(name: &str) -> Option<TaskSpec> {
        Self::all().into_iter().find(|t| t.name == name)
    }

    pub fn class_of(&self, level: u8) -> Option<usize> {
        self.label_map.get(level as usize).copied().flatten()
    }
}

/// Windows relabelled for one task, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskSpec,
    pub window_len: usize,
    pub samples: Vec<f32>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u16>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        &self.samples[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.task.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Distinct subject ids in ascending order.
    pub fn subject_ids(&self) -> Vec<u16> {
        self.subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// `N x 1 x window_len` input tensor for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.window_len);
        for &r in rows {
            data.extend(self.window(r).iter().map(|&v| v as f64));
        }
        Tensor::new(vec![rows.len(), 1, self.window_len], data).expect("batch shape matches data")
    }

    /// Rows whose subject satisfies `keep`, in original order.
    pub fn rows_where(&self, keep: impl Fn(u16) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.subjects[i])).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> TaskDataset {
        let mut samples = Vec::with_capacity(rows.len() * self.window_len);
        for &r in rows {
            samples.extend_from_slice(self.window(r));
        }
        TaskDataset {
            task: self.task,
            window_len: self.window_len,
            samples,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            subjects: rows.iter().map(|&r| self.subjects[r]).collect(),
        }
    }
}

/// Applies the task's label map and drops excluded levels.
pub fn build_task_dataset(windows: &[WindowRecord], task: TaskSpec) -> Result<TaskDataset> {
    let window_len = windows.first().map_or(0, |w| w.samples.len());
    let mut out = TaskDataset {
        task,
        window_len,
        samples: Vec::new(),
        labels: Vec::new(),
        subjects: Vec::new(),
    };
    for w in windows {
        if w.level as usize >= LEVELS {
            return Err(Error::Domain(format!("raw level {} outside 0..{LEVELS}", w.level)));
        }
        if w.samples.len() != window_len {
            return Err(Error::Dimension(format!(
                "window of {} samples in a set of {window_len}-sample windows",
                w.samples.len()
            )));
        }
        if let Some(class) = task.class_of(w.level) {
            out.samples.extend_from_slice(&w.samples);
            out.labels.push(class);
            out.subjects.push(w.subject_id);
        }
    }
    if let Some(empty) = out.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("task {}: class {empty} has no windows", task.name)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// L2 coefficient added to every gradient before the Adam moments.
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight each sample's loss by the inverse frequency of its class.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }
}

/// `w_c = N / (K * n_c)`, so a balanced set gets all-ones weights.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { labels.len() as f64 / (num_classes * c) as f64 })
        .collect()
}

/// Mean negative log-likelihood of `probs` (`N x K`) and its gradient with
/// respect to the logits that produced them.
///
/// With `class_weights` the loss is `sum w_y * nll / sum w_y` and the
/// gradient rows are scaled by `w_y / sum w_y` instead of `1 / N`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize], class_weights: Option<&[f64]>) -> Result<(f64, Tensor)> {
    if probs.rank() != 2 || probs.dim(0) != labels.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let (n, k) = (probs.dim(0), probs.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} outside 0..{k}")));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Dimension(format!("{} class weights for {k} classes", w.len())));
        }
    }
    let weight = |l: usize| class_weights.map_or(1.0, |w| w[l]);
    let total: f64 = labels.iter().map(|&l| weight(l)).sum();
    if !(total > 0.0) {
        return Err(Error::Domain("cross-entropy over zero total weight".into()));
    }
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[i * k..(i + 1) * k];
        let scale = weight(label) / total;
        loss -= scale * libm::log(row[label].max(PROB_FLOOR));
        row[label] -= 1.0;
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    debug_assert_eq!(grad.len(), n * k);
    Ok((loss, grad))
}

/// Adam with bias correction. Moments are kept in parameter-visit order.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every parameter of `model` from its accumulated gradients.
    pub fn update(&mut self, model: &mut dyn Layer, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let mut index = 0;
        let mut mismatch = None;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params(&mut |name, p| {
            if first.len() == index {
                first.push(Tensor::zeros(p.value.shape()));
                second.push(Tensor::zeros(p.value.shape()));
            }
            if first[index].shape() != p.value.shape() {
                mismatch.get_or_insert_with(|| String::from(name));
                index += 1;
                return;
            }
            let (m, v) = (first[index].data_mut(), second[index].data_mut());
            let (theta, grad) = (p.value.data_mut(), p.grad.data());
            for j in 0..theta.len() {
                let g = grad[j] + cfg.weight_decay * theta[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                theta[j] -= cfg.lr * (m[j] / c1) / (libm::sqrt(v[j] / c2) + cfg.eps);
            }
            index += 1;
        });
        match mismatch {
            Some(name) => Err(Error::Dimension(format!("optimiser state does not match parameter {name}"))),
            None => Ok(()),
        }
    }
}

/// What to do after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Sample-weighted mean training loss per completed epoch.
    pub loss_curve: Vec<f64>,
    /// Optimiser updates applied (one per batch, partial batches included).
    pub steps: usize,
}

pub fn train_epochs(model: &mut PainAttnNet, data: &TaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_epochs_with(model, data, cfg, |_, _, _| Ok(Control::Continue))
}

/// Epoch loop with a hook called after every epoch as `(epoch, loss, model)`.
///
/// Rows are reshuffled each epoch from a generator seeded with `cfg.seed`;
/// the last batch may be smaller than `batch_size`.
pub fn train_epochs_with(
    model: &mut PainAttnNet,
    data: &TaskDataset,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, f64, &mut PainAttnNet) -> Result<Control>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if data.task.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "task {} has {} classes, model emits {}",
            data.task.name,
            data.task.num_classes,
            model.num_classes()
        )));
    }
    let weights = cfg
        .class_weighting
        .then(|| inverse_frequency_weights(&data.labels, data.task.num_classes));
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.batch(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
            model.zero_grad();
            let logits = model.forward(&x, &mut rng)?;
            let (loss, grad) = cross_entropy(&softmax(&logits), &labels, weights.as_deref())?;
            if !loss.is_finite() || !logits.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            model.backward(&grad)?;
            adam.update(model, cfg)?;
            steps += 1;
            epoch_loss += loss * rows.len() as f64;
        }
        let mean = epoch_loss / data.len() as f64;
        curve.push(mean);
        if after_epoch(epoch, mean, model)? == Control::Stop {
            break;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        loss_curve: curve,
        steps,
    })
}

/// Eval-mode class predictions, batched.
pub fn predict(model: &mut PainAttnNet, data: &TaskDataset, batch_size: usize) -> Result<Vec<usize>> {
    model.set_mode(Mode::Eval);
    let mut rng = Rng::seed_from_u64(0);
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let logits = model.forward(&data.batch(chunk), &mut rng)?;
        let best = logits.reduce(Reduce::Argmax, 1)?;
        out.extend(best.data().iter().map(|&v| v as usize));
    }
    Ok(out)
}

/// Fraction of `data` the model classifies correctly (eval mode).
pub fn accuracy_on(model: &mut PainAttnNet, data: &TaskDataset, batch_size: usize) -> Result<f64> {
    let pred = predict(model, data, batch_size)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// One leave-one-subject-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub test_subject: u16,
    pub train_subjects: Vec<u16>,
}

impl FoldPlan {
    pub fn check_no_leakage(&self) -> Result<()> {
        if self.train_subjects.contains(&self.test_subject) {
            return Err(Error::Invariant(format!(
                "subject {} is in both train and test of its fold",
                self.test_subject
            )));
        }
        Ok(())
    }
}

/// One fold per distinct subject, in ascending subject order.
pub fn fold_plans(data: &TaskDataset) -> Result<Vec<FoldPlan>> {
    let ids = data.subject_ids();
    if ids.len() < 2 {
        return Err(Error::Domain(format!(
            "cross-validation needs at least 2 subjects, got {}",
            ids.len()
        )));
    }
    Ok(ids
        .iter()
        .map(|&test| FoldPlan {
            test_subject: test,
            train_subjects: ids.iter().copied().filter(|&s| s != test).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub test_subject: u16,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub loss_curve: Vec<f64>,
}

impl FoldResult {
    pub fn accuracy(&self) -> f64 {
        let hits = self.truth.iter().zip(&self.predicted).filter(|(a, b)| a == b).count();
        hits as f64 / self.truth.len().max(1) as f64
    }
}

/// Seed of the fold that holds out `subject`.
pub fn fold_seed(seed: u64, subject: u16) -> u64 {
    crate::derive_seed(seed, subject as u64)
}

/// Trains a fresh model on the fold's training subjects and predicts the held-out one
/// with the final-epoch weights.
pub fn run_fold(data: &TaskDataset, plan: &FoldPlan, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<FoldResult> {
    plan.check_no_leakage()?;
    let train_rows = data.rows_where(|s| plan.train_subjects.contains(&s));
    let test_rows = data.rows_where(|s| s == plan.test_subject);
    if train_rows.iter().any(|r| test_rows.binary_search(r).is_ok()) {
        return Err(Error::Invariant(format!("fold {}: a window is in both splits", plan.test_subject)));
    }
    let train = data.subset(&train_rows);
    let test = data.subset(&test_rows);

    let seed = fold_seed(cfg.seed, plan.test_subject);
    let mut model = PainAttnNet::new(model_cfg.clone(), crate::derive_seed(seed, 0x1417))?;
    let fold_cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = train_epochs(&mut model, &train, &fold_cfg)?;
    let predicted = predict(&mut model, &test, cfg.batch_size)?;
    Ok(FoldResult {
        test_subject: plan.test_subject,
        truth: test.labels,
        predicted,
        loss_curve: outcome.loss_curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvOutcome {
    /// Fold results in ascending subject order.
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
}

/// Pools fold predictions (in subject order) into one confusion matrix.
pub fn pool_folds(mut folds: Vec<FoldResult>, num_classes: usize) -> Result<LoocvOutcome> {
    folds.sort_by_key(|f| f.test_subject);
    let mut matrix = ConfusionMatrix::new(num_classes)?;
    for f in &folds {
        matrix.merge(&ConfusionMatrix::from_labels(num_classes, &f.truth, &f.predicted)?)?;
    }
    Ok(LoocvOutcome {
        report: MetricsReport::from_matrix(matrix)?,
        folds,
    })
}

/// Serial leave-one-subject-out cross-validation.
pub fn loocv(data: &TaskDataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<LoocvOutcome> {
    let plans = fold_plans(data)?;
    let folds = plans
        .iter()
        .map(|p| run_fold(data, p, model_cfg, cfg))
        .collect::<Result<Vec<_>>>()?;
    pool_folds(folds, data.task.num_classes)
}

/// Nearest-class-mean classifier on the onset-referenced window mean.
///
/// With two classes this is a single threshold halfway between the class means.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanThresholdBaseline {
    pub reference_samples: usize,
    pub class_means: Vec<f64>,
}

impl MeanThresholdBaseline {
    pub const DEFAULT_REFERENCE: usize = 32;

    pub fn feature(&self, window: &[f32]) -> f64 {
        crate::synth::onset_referenced_mean(window, self.reference_samples)
    }

    pub fn fit(data: &TaskDataset) -> Result<Self> {
        let mut model = Self {
            reference_samples: Self::DEFAULT_REFERENCE,
            class_means: vec![0.0; data.task.num_classes],
        };
        let mut counts = vec![0usize; data.task.num_classes];
        for i in 0..data.len() {
            model.class_means[data.labels[i]] += model.feature(data.window(i));
            counts[data.labels[i]] += 1;
        }
        for (m, &c) in model.class_means.iter_mut().zip(&counts) {
            if c == 0 {
                return Err(Error::Config("baseline: a class has no training windows".into()));
            }
            *m /= c as f64;
        }
        Ok(model)
    }

    pub fn predict_one(&self, window: &[f32]) -> usize {
        let f = self.feature(window);
        let mut best = 0;
        for (c, m) in self.class_means.iter().enumerate() {
            if (f - m).abs() < (f - self.class_means[best]).abs() {
                best = c;
            }
        }
        best
    }

    pub fn predict(&self, data: &TaskDataset) -> Vec<usize> {
        (0..data.len()).map(|i| self.predict_one(data.window(i))).collect()
    }

    pub fn accuracy(&self, data: &TaskDataset) -> f64 {
        let hits = self.predict(data).iter().zip(&data.labels).filter(|(p, t)| p == t).count();
        hits as f64 / data.len().max(1) as f64
    }
}

/// Leave-one-subject-out evaluation of [`MeanThresholdBaseline`], pooled like [`loocv`].
pub fn baseline_loocv(data: &TaskDataset) -> Result<MetricsReport> {
    let mut matrix = ConfusionMatrix::new(data.task.num_classes)?;
    for plan in fold_plans(data)? {
        plan.check_no_leakage()?;
        let train = data.subset(&data.rows_where(|s| s != plan.test_subject));
        let test = data.subset(&data.rows_where(|s| s == plan.test_subject));
        let base = MeanThresholdBaseline::fit(&train)?;
        matrix.merge(&ConfusionMatrix::from_labels(
            data.task.num_classes,
            &test.labels,
            &base.predict(&test),
        )?)?;
    }
    MetricsReport::from_matrix(matrix)
}
