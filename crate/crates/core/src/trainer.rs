//! Training loop for the three regimes, evaluation and metrics emission.
//!
//! * `standard`: only the deepest exit's label cross-entropy is optimized.
//! * `dsn`: every exit learns from labels (distillation weights forced to zero).
//! * `self_distill`: the full three-source objective.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::{Graph, Scalar};
use crate::checkpoint;
use crate::data::{batches, Augment, Dataset, Splits};
use crate::error::{Error, Result};
use crate::inference::{argmax, combine, EnsembleSpec};
use crate::loss::{softmax_t, total_loss_vars, DistillConfig, LossBreakdown, LossTerms};
use crate::model::{Mode, MultiExitModel};

pub const METRICS_HEADER: &str = "epoch,exit,split,accuracy,ce,kl,hint,total,lr,wall_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Standard,
    Dsn,
    SelfDistill,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "dsn" => Ok(Regime::Dsn),
            "self_distill" => Ok(Regime::SelfDistill),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Standard => "standard",
            Regime::Dsn => "dsn",
            Regime::SelfDistill => "self_distill",
        })
    }
}

/// Step decay: the rate is multiplied by `factor` once each milestone
/// (a fraction of the total epochs) is passed.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    /// Learning rate for 0-based `epoch` out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
            .count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub distill: DistillConfig,
    pub augment: Augment,
    /// Write a checkpoint every this many epochs (0 disables); one is always written at the end.
    pub checkpoint_every: usize,
    /// Extra epochs training only the deepest exit on labels, after the main phase.
    pub finetune_epochs: usize,
    pub record_grad_stats: bool,
    /// Reports zero wall time so metrics files are bit-reproducible.
    pub deterministic: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            regime: Regime::SelfDistill,
            epochs: 60,
            batch_size: 64,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            distill: DistillConfig::default(),
            augment: Augment::CropFlip,
            checkpoint_every: 10,
            finetune_epochs: 0,
            record_grad_stats: false,
            deterministic: true,
            eval_batch_size: 256,
        }
    }
}

impl TrainPlan {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs < 1 {
            errs.push("train.epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if self.eval_batch_size < 1 {
            errs.push("train.eval_batch_size must be >= 1".to_string());
        }
        if !(self.lr.initial >= 0.0 && self.lr.initial.is_finite()) {
            errs.push("train.lr must be >= 0".to_string());
        }
        if !(self.lr.factor > 0.0 && self.lr.factor.is_finite()) {
            errs.push("train.lr_decay must be > 0".to_string());
        }
        if self.lr.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            errs.push("train.lr_milestones must lie in [0,1]".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push("train.momentum must be in [0,1)".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push("train.weight_decay must be >= 0".to_string());
        }
        errs.extend(self.distill.violations());
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Distillation settings actually used by the regime.
    pub fn effective_distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        if self.regime == Regime::Dsn {
            d.alpha = 0.0;
            d.lambda = 0.0;
        }
        d
    }
}

/// `v = momentum * v + g + weight_decay * p; p -= lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "sgd_step: param/grad length mismatch");
    assert_eq!(params.len(), velocity.len(), "sgd_step: param/velocity length mismatch");
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum SGD over the trainable tensors of a model.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &MultiExitModel<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params().trainable().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut MultiExitModel<T>, lr: f64) {
        for (p, v) in model.params_mut().trainable_mut().zip(&mut self.velocity) {
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); v.len()],
            };
            sgd_step(p.tensor.data_mut(), &grad, v, lr, self.momentum, self.weight_decay);
        }
    }
}

/// Mean absolute weight gradient of one conv/fc layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub layer: String,
    pub depth_index: usize,
    pub mean_abs_grad: f64,
}

/// Reads the accumulated weight gradients of every conv/fc layer in depth order.
pub fn layer_grad_means<T: Scalar>(model: &MultiExitModel<T>) -> Vec<LayerGrad> {
    model
        .layers()
        .into_iter()
        .enumerate()
        .map(|(depth_index, info)| {
            let t = &model.params().get(info.id).tensor;
            let mean_abs_grad = t.grad().map_or(0.0, |g| {
                g.iter().map(|v| v.as_f64().abs()).sum::<f64>() / g.len() as f64
            });
            LayerGrad {
                layer: info.name,
                depth_index,
                mean_abs_grad,
            }
        })
        .collect()
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Correct predictions per exit on this batch (training mode).
    pub correct: Vec<usize>,
}

fn to_step_error(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
        other => other,
    }
}

/// Forward and backward on one batch; gradients are left in the parameters.
pub fn compute_gradients<T: Scalar>(
    model: &mut MultiExitModel<T>,
    inputs: &crate::autodiff::Tensor<T>,
    labels: &[usize],
    distill: &DistillConfig,
    include_shallow: bool,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let x = g.constant(inputs)?;
    let pass = model.forward(&mut g, x, Mode::Train)?;
    let lv = total_loss_vars(&mut g, &pass.logits, &pass.features, labels, distill, include_shallow)?;
    if !lv.breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    g.backward(lv.total)?;
    model.params_mut().zero_grad();
    model.collect_grads(&g, &pass);
    let correct = pass
        .logits
        .iter()
        .map(|&z| {
            let m = g.shape(z)[1];
            g.value(z)
                .chunks_exact(m)
                .zip(labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count()
        })
        .collect();
    Ok(StepOutcome {
        breakdown: lv.breakdown,
        correct,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Defaults to equal weights over every exit the model carries.
    pub ensemble: Option<EnsembleSpec>,
    pub distill: DistillConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            ensemble: None,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// 1-based exits, shallow to deep.
    pub exits: Vec<usize>,
    /// Top-1 accuracy in percent, per exit.
    pub accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    /// Sample-weighted mean loss terms; `None` for single-exit models.
    pub loss: Option<LossBreakdown>,
    pub samples: usize,
}

impl EvalReport {
    pub fn accuracy_at(&self, exit: usize) -> Option<f64> {
        self.exits.iter().position(|&e| e == exit).map(|i| self.accuracy[i])
    }
}

/// Eval-mode accuracy of every exit and of the softmax ensemble.
pub fn evaluate<T: Scalar>(model: &MultiExitModel<T>, split: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::invalid("evaluate: empty split"));
    }
    let exits = model.exit_indices();
    let spec = match &opts.ensemble {
        Some(s) => s.clone(),
        None => EnsembleSpec {
            weights: vec![1.0; model.deepest_index()],
            included: exits.clone(),
        },
    };
    let mut correct = vec![0usize; exits.len()];
    let mut ens_correct = 0usize;
    let mut loss_acc: Option<(Vec<LossTerms>, f64)> = None;
    let n = split.len();
    for batch in batches::<T>(split, opts.batch_size.max(1), None, Augment::None, 0) {
        let out = model.infer(&batch.inputs)?;
        let b = batch.labels.len();
        let mut probs = Vec::with_capacity(exits.len());
        for (k, z) in out.logits.iter().enumerate() {
            let q = softmax_t(z, 1.0)?;
            let rows: Vec<Vec<f64>> = (0..b).map(|i| q.row(i).iter().map(|v| v.as_f64()).collect()).collect();
            correct[k] += rows.iter().zip(&batch.labels).filter(|(r, &y)| argmax(r) == y).count();
            probs.push(rows);
        }
        let combined = combine(&probs, &exits, &spec)?;
        ens_correct += combined.iter().zip(&batch.labels).filter(|(r, &y)| argmax(r) == y).count();
        if out.num_exits() >= 2 {
            let bd = crate::loss::total_loss(&out, &batch.labels, &opts.distill)?;
            let w = b as f64 / n as f64;
            let acc = loss_acc.get_or_insert_with(|| (vec![LossTerms::default(); bd.per_exit.len()], 0.0));
            for (a, t) in acc.0.iter_mut().zip(&bd.per_exit) {
                a.ce += w * t.ce;
                a.kl += w * t.kl;
                a.hint += w * t.hint;
            }
            acc.1 += w * bd.total;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(EvalReport {
        accuracy: correct.iter().map(|&c| pct(c)).collect(),
        exits,
        ensemble_accuracy: pct(ens_correct),
        loss: loss_acc.map(|(per_exit, total)| LossBreakdown { per_exit, total }),
        samples: n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    pub exit: usize,
    /// Accuracy over the epoch's training batches, measured on the fly.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Epoch means of the training-batch loss terms.
    pub train: LossTerms,
    pub test: LossTerms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    /// 1-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub exits: Vec<ExitRecord>,
    pub train_total: f64,
    pub test_total: f64,
    pub ensemble_test_accuracy: f64,
    pub wall_s: f64,
    /// Total loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
    /// Per-layer gradient magnitudes on the epoch's first batch.
    pub grad_stats: Option<Vec<LayerGrad>>,
}

impl TrainRecord {
    pub fn test_accuracy(&self, exit: usize) -> Option<f64> {
        self.exits.iter().find(|e| e.exit == exit).map(|e| e.test_accuracy)
    }

    /// Metrics CSV rows (train then test split per exit, then the test ensemble).
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for split in ["train", "test"] {
            for e in &self.exits {
                let (acc, t, total) = if split == "train" {
                    (e.train_accuracy, e.train, self.train_total)
                } else {
                    (e.test_accuracy, e.test, self.test_total)
                };
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    self.epoch, e.exit, split, acc, t.ce, t.kl, t.hint, total, self.lr, self.wall_s
                ));
            }
        }
        s.push_str(&format!(
            "{},ensemble,test,{},,,,{},{},{}\n",
            self.epoch, self.ensemble_test_accuracy, self.test_total, self.lr, self.wall_s
        ));
        s
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.sdck")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.sdck"))
    }

    pub fn grad_stats_path(&self) -> PathBuf {
        self.dir.join("grad_stats.csv")
    }
}

struct Sinks {
    out: RunOutput,
    metrics: BufWriter<File>,
    grads: Option<BufWriter<File>>,
}

impl Sinks {
    fn open(out: &RunOutput, grads: bool) -> Result<Self> {
        let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
        let mut metrics = create(&out.metrics_path())?;
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(out.metrics_path(), e))?;
        let grads = if grads {
            let p = out.grad_stats_path();
            let mut w = create(&p)?;
            writeln!(w, "epoch,layer,depth_index,mean_abs_grad").map_err(|e| Error::io(&p, e))?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            out: out.clone(),
            metrics,
            grads,
        })
    }

    fn record(&mut self, r: &TrainRecord) -> Result<()> {
        let path = self.out.metrics_path();
        self.metrics
            .write_all(r.csv_rows().as_bytes())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))?;
        if let (Some(w), Some(stats)) = (&mut self.grads, &r.grad_stats) {
            let p = self.out.grad_stats_path();
            for l in stats {
                writeln!(w, "{},{},{},{}", r.epoch, l.layer, l.depth_index, l.mean_abs_grad)
                    .map_err(|e| Error::io(&p, e))?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Schedule position and objective of one epoch.
struct EpochSpec<'a> {
    epoch: usize,
    lr: f64,
    distill: &'a DistillConfig,
    include_shallow: bool,
}

struct EpochStats {
    correct: Vec<usize>,
    loss: LossBreakdown,
    step_losses: Vec<f64>,
    grad_stats: Option<Vec<LayerGrad>>,
}

fn run_epoch<T: Scalar>(
    model: &mut MultiExitModel<T>,
    opt: &mut Sgd<T>,
    train: &Dataset,
    plan: &TrainPlan,
    spec: EpochSpec<'_>,
) -> Result<EpochStats> {
    let EpochSpec {
        epoch,
        lr,
        distill,
        include_shallow,
    } = spec;
    let exits = model.num_exits();
    let mut correct = vec![0usize; exits];
    let mut sums = vec![LossTerms::default(); exits];
    let mut total = 0.0;
    let mut step_losses = Vec::new();
    let mut grad_stats = None;
    let n = train.len() as f64;
    for (step, batch) in batches::<T>(train, plan.batch_size, Some(plan.seed), plan.augment, epoch).enumerate() {
        let outcome = compute_gradients(model, &batch.inputs, &batch.labels, distill, include_shallow)
            .map_err(|e| to_step_error(e, epoch, step))?;
        if plan.record_grad_stats && step == 0 {
            grad_stats = Some(layer_grad_means(model));
        }
        opt.step(model, lr);
        let w = batch.labels.len() as f64 / n;
        for (s, t) in sums.iter_mut().zip(&outcome.breakdown.per_exit) {
            s.ce += w * t.ce;
            s.kl += w * t.kl;
            s.hint += w * t.hint;
        }
        total += w * outcome.breakdown.total;
        step_losses.push(outcome.breakdown.total);
        for (c, k) in correct.iter_mut().zip(&outcome.correct) {
            *c += k;
        }
    }
    Ok(EpochStats {
        correct,
        loss: LossBreakdown {
            per_exit: sums,
            total,
        },
        step_losses,
        grad_stats,
    })
}

/// Trains `model` in place. With `out`, metrics are appended per epoch and
/// checkpoints written every `checkpoint_every` epochs and at the end.
pub fn train<T: Scalar>(
    model: &mut MultiExitModel<T>,
    splits: &Splits,
    plan: &TrainPlan,
    out: Option<&RunOutput>,
) -> Result<Vec<TrainRecord>> {
    plan.validate()?;
    if plan.regime != Regime::Standard && model.num_exits() < 2 {
        return Err(Error::invalid(format!("regime {} needs at least 2 exits", plan.regime)));
    }
    if !model.is_complete() {
        return Err(Error::invalid("cannot train a stripped model"));
    }
    if splits.train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let mut sinks = out.map(|o| Sinks::open(o, plan.record_grad_stats)).transpose()?;
    let distill = plan.effective_distill();
    let mut opt = Sgd::new(model, plan.momentum, plan.weight_decay);
    let eval_opts = EvalOptions {
        batch_size: plan.eval_batch_size,
        ensemble: None,
        distill: distill.clone(),
    };
    let start = Instant::now();
    let mut records = Vec::new();
    let total_epochs = plan.epochs + plan.finetune_epochs;
    for epoch in 1..=total_epochs {
        let finetune = epoch > plan.epochs;
        let lr = if finetune {
            plan.lr.lr_at(plan.epochs - 1, plan.epochs)
        } else {
            plan.lr.lr_at(epoch - 1, plan.epochs)
        };
        let include_shallow = plan.regime != Regime::Standard && !finetune;
        let spec = EpochSpec {
            epoch,
            lr,
            distill: &distill,
            include_shallow,
        };
        let EpochStats {
            correct,
            loss: train_loss,
            step_losses,
            grad_stats,
        } = run_epoch(model, &mut opt, &splits.train, plan, spec)?;
        let test = if splits.test.is_empty() {
            None
        } else {
            Some(evaluate(model, &splits.test, &eval_opts)?)
        };
        let n = splits.train.len() as f64;
        let exits = model
            .exit_indices()
            .into_iter()
            .enumerate()
            .map(|(k, exit)| ExitRecord {
                exit,
                train_accuracy: 100.0 * correct[k] as f64 / n,
                test_accuracy: test.as_ref().map_or(f64::NAN, |t| t.accuracy[k]),
                train: train_loss.per_exit[k],
                test: test
                    .as_ref()
                    .and_then(|t| t.loss.as_ref())
                    .map_or(LossTerms::default(), |l| l.per_exit[k]),
            })
            .collect();
        let record = TrainRecord {
            epoch,
            lr,
            exits,
            train_total: train_loss.total,
            test_total: test.as_ref().and_then(|t| t.loss.as_ref()).map_or(f64::NAN, |l| l.total),
            ensemble_test_accuracy: test.as_ref().map_or(f64::NAN, |t| t.ensemble_accuracy),
            wall_s: if plan.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
            step_losses,
            grad_stats,
        };
        if let Some(s) = &mut sinks {
            s.record(&record)?;
            if plan.checkpoint_every > 0 && epoch % plan.checkpoint_every == 0 && epoch < total_epochs {
                checkpoint::save_model(model, &s.out.epoch_checkpoint(epoch))?;
            }
        }
        records.push(record);
    }
    if let Some(s) = &sinks {
        checkpoint::save_model(model, &s.out.final_checkpoint())?;
    }
    model.params_mut().zero_grad();
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.1);
        assert!((p[0] - 0.99).abs() < 1e-15);
        let mut p = [0.3f64, -2.0];
        let mut v = [0.5, 0.1];
        sgd_step(&mut p, &[7.0, -3.0], &mut v, 0.0, 0.9, 0.1);
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = [0.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0);
        sgd_step(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut p = vec![0.5f64, -1.5, 2.0];
        let mut v = vec![0.0; 3];
        let mut prev: f64 = p.iter().map(|x| x * x).sum();
        for _ in 0..50 {
            sgd_step(&mut p, &[0.0; 3], &mut v, 0.05, 0.9, 0.01);
            let norm: f64 = p.iter().map(|x| x * x).sum();
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::default();
        let lrs: Vec<f64> = (0..8).map(|e| s.lr_at(e, 8)).collect();
        assert_eq!(lrs[..4], [0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-15 && (lrs[5] - 0.01).abs() < 1e-15);
        assert!((lrs[6] - 0.001).abs() < 1e-15 && (lrs[7] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn plan_validation_aggregates() {
        let mut plan = TrainPlan {
            epochs: 0,
            batch_size: 0,
            ..TrainPlan::default()
        };
        plan.distill.alpha = 1.5;
        let errs = plan.violations();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e == "distill.alpha must be in [0,1]"));
    }

    #[test]
    fn dsn_zeroes_distillation() {
        let plan = TrainPlan {
            regime: Regime::Dsn,
            ..TrainPlan::default()
        };
        let d = plan.effective_distill();
        assert_eq!((d.alpha, d.lambda), (0.0, 0.0));
    }
}
