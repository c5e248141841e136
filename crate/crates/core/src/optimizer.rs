//! The two SGD variants and the training protocol around them.
//!
//! * B-SGD: plain Euclidean SGD on every parameter. Filters and class vectors
//!   start unit-norm but are not constrained afterwards.
//! * UN: layer filters take the project-step-retract update on the oblique
//!   manifold; class vectors and batch-norm scale/shift take Euclidean steps.
//!
//! A run picks its base learning rate by a small grid search, then trains on a
//! 50000/10000 train/validation split with bold-driver annealing until one of
//! the stopping rules fires, and reports the test error after the last epoch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::data::{epoch_batches, sample_disjoint, split, MnistDataset};
use crate::manifold::{un_step, ObliquePoint};
use crate::network::{backward, classification_error, forward, Gradients, Mode, NetworkConfig, NetworkParams};
use crate::numerics::{axpy, Matrix};
use crate::{math, seeded_rng, Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum UpdateRule {
    /// Euclidean SGD from a unit-norm start.
    Bsgd,
    /// Unit-norm (oblique manifold) SGD on the layer filters.
    Un,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Bsgd => "bsgd",
            UpdateRule::Un => "un",
        }
    }
}

/// Every knob of the training protocol.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub search_train_size: usize,
    pub search_val_size: usize,
    pub search_epochs: usize,
    pub full_train_size: usize,
    pub full_val_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Look-back, in epochs, of the validation-increase stopping rule.
    pub patience: usize,
    pub train_err_floor: f64,
    pub val_plateau: f64,
    pub bold_up: f64,
    pub bold_down: f64,
    pub n_runs: usize,
    pub update_rule: UpdateRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_grid: vec![1e-2, 1e-3, 1e-4, 1e-5],
            batch_size: 100,
            search_train_size: 1000,
            search_val_size: 500,
            search_epochs: 50,
            full_train_size: 50_000,
            full_val_size: 10_000,
            min_epochs: 25,
            max_epochs: 60,
            patience: 5,
            train_err_floor: 1e-5,
            val_plateau: 1e-5,
            bold_up: 1.05,
            bold_down: 0.5,
            n_runs: 10,
            update_rule: UpdateRule::Un,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Precondition(msg.into()));
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| *lr <= 0.0 || !lr.is_finite()) {
            return bad("lr_grid must be non-empty with positive entries");
        }
        if self.min_epochs > self.max_epochs || self.max_epochs == 0 {
            return bad("need 1 <= max_epochs and min_epochs <= max_epochs");
        }
        if !(self.bold_up > 1.0 && self.bold_down > 0.0 && self.bold_down < 1.0) {
            return bad("bold driver factors need bold_up > 1 > bold_down > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for batch norm");
        }
        if self.search_epochs == 0 || self.search_train_size < 2 || self.search_val_size == 0 {
            return bad("learning-rate search sizes must be positive");
        }
        if self.full_train_size < 2 || self.full_val_size == 0 {
            return bad("full training split sizes must be positive");
        }
        Ok(())
    }

    pub fn bold_driver(&self, lr: f64, prev_err: f64, curr_err: f64) -> f64 {
        bold_driver(lr, prev_err, curr_err, self.bold_up, self.bold_down)
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_error: f64,
    pub val_error: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunResult {
    /// `None` for a diverged run.
    pub test_error: Option<f64>,
    pub epochs_run: usize,
    /// `None` when every learning-rate candidate diverged.
    pub base_lr: Option<f64>,
    pub diverged: bool,
    pub history: Vec<EpochRecord>,
}

impl RunResult {
    fn diverged(base_lr: Option<f64>, history: Vec<EpochRecord>) -> Self {
        RunResult { test_error: None, epochs_run: history.len(), base_lr, diverged: true, history }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Precondition(format!("learning rate must be > 0, got {lr}")));
    }
    Ok(())
}

fn check_grads(grads: &Gradients) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(())
}

fn check_shapes(params: &NetworkParams, grads: &Gradients) -> Result<()> {
    let p = params.trainable();
    let g = grads.blocks();
    if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("sgd step", "gradients do not match parameters".into()));
    }
    Ok(())
}

/// Euclidean step `p <- p - lr * g` on every trainable parameter.
pub fn sgd_step_bsgd(params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<()> {
    check_lr(lr)?;
    check_shapes(params, grads)?;
    check_grads(grads)?;
    for (p, g) in params.trainable_mut().into_iter().zip(grads.blocks()) {
        axpy(-lr, g, p);
    }
    if params.trainable().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged("parameters overflowed".into()));
    }
    Ok(())
}

/// Unit-norm step on every layer weight, Euclidean step on `theta` and batch norm.
pub fn sgd_step_un(params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<()> {
    check_lr(lr)?;
    check_shapes(params, grads)?;
    check_grads(grads)?;
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        let point = ObliquePoint::new(layer.weight.clone())?;
        layer.weight = un_step(&point, &g.weight, lr)?.into_matrix();
        axpy(-lr, &g.bn_scale, &mut layer.bn_scale);
        axpy(-lr, &g.bn_shift, &mut layer.bn_shift);
    }
    axpy(-lr, grads.theta.as_slice(), params.theta.as_mut_slice());
    if params.trainable().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged("parameters overflowed".into()));
    }
    Ok(())
}

pub fn sgd_step(rule: UpdateRule, params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<()> {
    match rule {
        UpdateRule::Bsgd => sgd_step_bsgd(params, grads, lr),
        UpdateRule::Un => sgd_step_un(params, grads, lr),
    }
}

/// Raise the rate by `up` after an improving epoch, cut it by `down` after a worse one.
pub fn bold_driver(lr: f64, prev_err: f64, curr_err: f64, up: f64, down: f64) -> f64 {
    if curr_err < prev_err {
        lr * up
    } else if curr_err > prev_err {
        lr * down
    } else {
        lr
    }
}

/// Whether training stops after the last recorded epoch.
///
/// Never before `min_epochs`, always at `max_epochs`; in between when the
/// training error falls under the floor, the validation error rose compared to
/// `patience` epochs earlier, or two successive validation errors are within
/// `val_plateau` of each other.
pub fn stopping_criterion(history: &[EpochRecord], cfg: &TrainConfig) -> bool {
    let n = history.len();
    if n == 0 {
        return false;
    }
    if n >= cfg.max_epochs {
        return true;
    }
    if n < cfg.min_epochs {
        return false;
    }
    let last = &history[n - 1];
    if last.train_error < cfg.train_err_floor {
        return true;
    }
    if cfg.patience > 0 && n > cfg.patience && last.val_error > history[n - 1 - cfg.patience].val_error {
        return true;
    }
    n >= 2 && (last.val_error - history[n - 2].val_error).abs() < cfg.val_plateau
}

/// One pass over `batches`; returns the epoch's mean train-mode misclassification rate.
pub fn train_epoch(
    params: &mut NetworkParams,
    net_cfg: &NetworkConfig,
    rule: UpdateRule,
    lr: f64,
    images: &Matrix,
    labels: &[usize],
    batches: &[Vec<usize>],
) -> Result<f64> {
    let mut wrong = 0usize;
    let mut seen = 0usize;
    let mut y = Vec::new();
    for batch in batches {
        let x = images.select_rows(batch);
        y.clear();
        y.extend(batch.iter().map(|&i| labels[i]));
        let out = forward(params, net_cfg, &x, &y, Mode::Train)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged(format!("loss became {}", out.loss)));
        }
        wrong += out.predictions.iter().zip(&y).filter(|(p, t)| p != t).count();
        seen += batch.len();
        let grads = backward(params, net_cfg, &out.cache, &x, &y)?;
        sgd_step(rule, params, &grads, lr)?;
    }
    if seen == 0 {
        return Err(Error::Protocol("epoch without a single mini-batch".into()));
    }
    Ok(wrong as f64 / seen as f64)
}

/// Outcome of one learning-rate candidate; `val_error` is `None` if it diverged.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    pub lr: f64,
    pub val_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSearch {
    pub candidates: Vec<Candidate>,
    /// `None` when every candidate diverged.
    pub selected: Option<f64>,
}

/// Grid search: every candidate trains a fresh network at a fixed rate on a random
/// subset, and the one with the lowest final validation error wins. Diverged
/// candidates are skipped; ties go to the earlier grid entry.
pub fn search_learning_rate(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LrSearch> {
    train_cfg.validate()?;
    net_cfg.validate()?;
    let pool: Vec<usize> = (0..dataset.n_train()).collect();
    let (train_idx, val_idx) = sample_disjoint(&pool, train_cfg.search_train_size, train_cfg.search_val_size, rng)?;
    let stream_seed = rng.next_u64();

    let mut candidates = Vec::with_capacity(train_cfg.lr_grid.len());
    for (k, &lr) in train_cfg.lr_grid.iter().enumerate() {
        let mut crng = seeded_rng(stream_seed, k as u64);
        let mut params = NetworkParams::init(net_cfg, &mut crng)?;
        let mut outcome = Ok(());
        for _ in 0..train_cfg.search_epochs {
            let batches = epoch_batches(&train_idx, train_cfg.batch_size, &mut crng);
            outcome = train_epoch(
                &mut params,
                net_cfg,
                train_cfg.update_rule,
                lr,
                &dataset.train_images,
                &dataset.train_labels,
                &batches,
            )
            .map(|_| ());
            if outcome.is_err() {
                break;
            }
        }
        let val_error = match outcome {
            Ok(()) => {
                let e = classification_error(&params, net_cfg, &dataset.train_images, &dataset.train_labels, &val_idx)?;
                Some(e).filter(|e| e.is_finite())
            }
            Err(e) if e.is_divergence() => None,
            Err(e) => return Err(e),
        };
        candidates.push(Candidate { lr, val_error });
    }

    let mut best: Option<Candidate> = None;
    for c in &candidates {
        if let Some(e) = c.val_error {
            if best.and_then(|b| b.val_error).map_or(true, |b| e < b) {
                best = Some(*c);
            }
        }
    }
    Ok(LrSearch { candidates, selected: best.map(|c| c.lr) })
}

pub fn select_base_lr(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    search_learning_rate(dataset, net_cfg, train_cfg, rng)?
        .selected
        .ok_or_else(|| Error::Protocol("every learning-rate candidate diverged".into()))
}

/// Full training run; see [`train_full_observed`].
pub fn train_full(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    base_lr: f64,
    rng: &mut Rng,
) -> Result<RunResult> {
    train_full_observed(dataset, net_cfg, train_cfg, base_lr, rng, &mut |_| {})
}

/// Trains on a random train/validation split of the training images with
/// bold-driver annealing (driven by the epoch training error) until
/// [`stopping_criterion`] fires, then measures the test error.
///
/// `on_epoch` sees every record as it is produced. Divergence ends the run and
/// is reported in the result, not as an error.
pub fn train_full_observed(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    base_lr: f64,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    train_cfg.validate()?;
    check_lr(base_lr)?;
    let parts = split(dataset.n_train(), train_cfg.full_train_size, train_cfg.full_val_size, rng)?;
    let mut params = NetworkParams::init(net_cfg, rng)?;
    let mut lr = base_lr;
    let mut history: Vec<EpochRecord> = Vec::new();

    loop {
        let epoch = history.len() + 1;
        let batches = epoch_batches(&parts.train, train_cfg.batch_size, rng);
        let trained = train_epoch(
            &mut params,
            net_cfg,
            train_cfg.update_rule,
            lr,
            &dataset.train_images,
            &dataset.train_labels,
            &batches,
        );
        let train_error = match trained {
            Ok(e) => e,
            Err(e) if e.is_divergence() => {
                let rec = EpochRecord { epoch, train_error: f64::NAN, val_error: f64::NAN, lr, diverged: true };
                on_epoch(&rec);
                history.push(rec);
                return Ok(RunResult::diverged(Some(base_lr), history));
            }
            Err(e) => return Err(e),
        };
        let val_error =
            classification_error(&params, net_cfg, &dataset.train_images, &dataset.train_labels, &parts.val)?;
        let rec = EpochRecord { epoch, train_error, val_error, lr, diverged: false };
        on_epoch(&rec);
        history.push(rec);
        if stopping_criterion(&history, train_cfg) {
            break;
        }
        if let [.., prev, curr] = history.as_slice() {
            lr = train_cfg.bold_driver(lr, prev.train_error, curr.train_error);
        }
    }

    let test_rows: Vec<usize> = (0..dataset.n_test()).collect();
    let test_error = classification_error(&params, net_cfg, &dataset.test_images, &dataset.test_labels, &test_rows)?;
    Ok(RunResult {
        test_error: Some(test_error),
        epochs_run: history.len(),
        base_lr: Some(base_lr),
        diverged: false,
        history,
    })
}

/// Learning-rate search followed by a full run, all driven by `seed`.
pub fn run_seed(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    let mut rng = seeded_rng(seed, 0);
    let Some(base_lr) = search_learning_rate(dataset, net_cfg, train_cfg, &mut rng)?.selected else {
        return Ok(RunResult::diverged(None, Vec::new()));
    };
    train_full_observed(dataset, net_cfg, train_cfg, base_lr, &mut rng, on_epoch)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolSummary {
    pub mean_test_error: f64,
    /// Sample standard deviation; 0 for a single valid run.
    pub std_test_error: f64,
    pub n_valid_runs: usize,
    pub runs: Vec<(u64, RunResult)>,
}

/// Mean and sample standard deviation of the test error over the runs that did not diverge.
pub fn summarize(runs: Vec<(u64, RunResult)>) -> Result<ProtocolSummary> {
    let errs: Vec<f64> = runs.iter().filter_map(|(_, r)| r.test_error).collect();
    if errs.is_empty() {
        return Err(Error::Protocol("every run diverged".into()));
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let std = if errs.len() > 1 {
        math::sqrt(errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    Ok(ProtocolSummary { mean_test_error: mean, std_test_error: std, n_valid_runs: errs.len(), runs })
}

/// Runs every seed in turn and aggregates the test errors.
pub fn run_protocol(
    dataset: &MnistDataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ProtocolSummary> {
    if seeds.is_empty() {
        return Err(Error::Precondition("protocol needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        runs.push((seed, run_seed(dataset, net_cfg, train_cfg, seed, &mut |_| {})?));
    }
    summarize(runs)
}
