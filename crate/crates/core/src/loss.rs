//! Self-distillation objective.
//!
//! Every shallow exit `i` is supervised by three sources: label cross-entropy
//! on its tempered softmax, KL divergence towards the deepest exit's softmax,
//! and a squared-L2 hint pulling its aligned feature map towards the deepest
//! feature map. The deepest exit learns from labels alone:
//!
//! ```text
//! loss = sum_{i<C} [(1 - alpha) * CE(q_i, y) + alpha * KL(q_i, q_C) + lambda * |F_i - F_C|^2] + CE(q_C, y)
//! ```
//!
//! All three terms are batch means.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ExitOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(q_C || q_i)`: the student fits the teacher distribution.
    TeacherAsTarget,
    /// `KL(q_i || q_C)`.
    StudentAsFirstArg,
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_as_target" => Ok(KlDirection::TeacherAsTarget),
            "student_as_first_arg" => Ok(KlDirection::StudentAsFirstArg),
            other => Err(Error::invalid(format!("unknown kl direction `{other}`"))),
        }
    }
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlDirection::TeacherAsTarget => "teacher_as_target",
            KlDirection::StudentAsFirstArg => "student_as_first_arg",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Balance between label cross-entropy and distillation KL.
    pub alpha: f64,
    /// Weight of the feature hint term.
    pub lambda: f64,
    pub temperature: f64,
    /// Cut gradient flow into the deepest exit's softmax and features.
    pub detach_teacher: bool,
    /// Multiply the KL term by `T^2`.
    pub t_squared_scaling: bool,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            lambda: 0.03,
            temperature: 1.0,
            detach_teacher: true,
            t_squared_scaling: false,
            kl_direction: KlDirection::TeacherAsTarget,
        }
    }
}

impl DistillConfig {
    /// Every violated constraint, each naming its config key.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push("distill.alpha must be in [0,1]".to_string());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push("distill.lambda must be >= 0".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push("distill.temperature must be > 0".to_string());
        }
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

    fn kl_scale(&self) -> f64 {
        if self.t_squared_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// Unweighted loss terms of one exit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub kl: f64,
    pub hint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_exit: Vec<LossTerms>,
    pub total: f64,
}

/// Graph handle of the total loss plus its evaluated breakdown.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be > 0, got {t}")))
    }
}

/// Row-wise `log softmax(z / T)`.
pub fn log_softmax_t<T: Scalar>(g: &mut Graph<T>, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = if temperature == 1.0 {
        logits
    } else {
        g.mul_scalar(logits, T::from_f64(1.0 / temperature))?
    };
    g.log_softmax(scaled)
}

pub fn softmax_t_var<T: Scalar>(g: &mut Graph<T>, logits: Var, temperature: f64) -> Result<Var> {
    let ls = log_softmax_t(g, logits, temperature)?;
    g.exp(ls)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Batch-mean cross-entropy of tempered softmax against labels.
pub fn cross_entropy_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: s,
            rhs: vec![labels.len()],
        });
    }
    check_labels(labels, s[0], s[1])?;
    let ls = log_softmax_t(g, logits, temperature)?;
    let picked = g.gather(ls, labels)?;
    let mean = g.mean(picked)?;
    g.mul_scalar(mean, -T::one())
}

/// Batch-mean KL divergence computed in log space from logits.
pub fn kl_logits<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    config: &DistillConfig,
) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: g.shape(student).to_vec(),
            rhs: g.shape(teacher).to_vec(),
        });
    }
    let batch = g.shape(student)[0];
    let teacher = if config.detach_teacher {
        g.detach(teacher)
    } else {
        teacher
    };
    let ls = log_softmax_t(g, student, config.temperature)?;
    let lt = log_softmax_t(g, teacher, config.temperature)?;
    let (target, other) = match config.kl_direction {
        KlDirection::TeacherAsTarget => (lt, ls),
        KlDirection::StudentAsFirstArg => (ls, lt),
    };
    let p = g.exp(target)?;
    let diff = g.sub(target, other)?;
    let prod = g.mul(p, diff)?;
    let sum = g.sum(prod)?;
    g.mul_scalar(sum, T::from_f64(config.kl_scale() / batch as f64))
}

/// Batch-mean squared L2 distance `|F_i - F_C|^2`, summed over feature elements.
pub fn hint_var<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var, detach: bool) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::Shape {
            op: "hint_loss",
            lhs: g.shape(student).to_vec(),
            rhs: g.shape(teacher).to_vec(),
        });
    }
    let batch = g.shape(student)[0];
    let teacher = if detach { g.detach(teacher) } else { teacher };
    let d = g.sub(student, teacher)?;
    let sq = g.mul(d, d)?;
    let sum = g.sum(sq)?;
    g.mul_scalar(sum, T::from_f64(1.0 / batch as f64))
}

/// Builds the total objective over every exit of a forward pass.
///
/// The last entry of `logits`/`features` is the teacher. With
/// `include_shallow == false` only the teacher's cross-entropy enters the
/// total; shallow terms are still evaluated for reporting.
pub fn total_loss_vars<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var],
    features: &[Var],
    labels: &[usize],
    config: &DistillConfig,
    include_shallow: bool,
) -> Result<LossVars> {
    config.validate()?;
    if logits.len() < 2 || logits.len() != features.len() {
        return Err(Error::invalid(format!(
            "total loss needs >= 2 exits with matching features, got {} logits and {} features",
            logits.len(),
            features.len()
        )));
    }
    let c = logits.len();
    let (teacher_logits, teacher_features) = (logits[c - 1], features[c - 1]);
    let mut per_exit = Vec::with_capacity(c);
    let mut weighted = Vec::with_capacity(c);
    for i in 0..c - 1 {
        let ce = cross_entropy_logits(g, logits[i], labels, config.temperature)?;
        let kl = kl_logits(g, logits[i], teacher_logits, config)?;
        let hint = hint_var(g, features[i], teacher_features, config.detach_teacher)?;
        per_exit.push(LossTerms {
            ce: g.item(ce).as_f64(),
            kl: g.item(kl).as_f64(),
            hint: g.item(hint).as_f64(),
        });
        if include_shallow {
            let a = g.mul_scalar(ce, T::from_f64(1.0 - config.alpha))?;
            let b = g.mul_scalar(kl, T::from_f64(config.alpha))?;
            let h = g.mul_scalar(hint, T::from_f64(config.lambda))?;
            let ab = g.add(a, b)?;
            weighted.push(g.add(ab, h)?);
        }
    }
    let ce_deep = cross_entropy_logits(g, teacher_logits, labels, config.temperature)?;
    per_exit.push(LossTerms {
        ce: g.item(ce_deep).as_f64(),
        kl: 0.0,
        hint: 0.0,
    });
    let mut total = ce_deep;
    // Shallow exits are summed first, then the deepest, in exit order.
    if let Some((&first, rest)) = weighted.split_first() {
        let mut acc = first;
        for &w in rest {
            acc = g.add(acc, w)?;
        }
        total = g.add(acc, ce_deep)?;
    }
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            per_exit,
            total: g.item(total).as_f64(),
        },
    })
}

/// `softmax(z / T)` row-wise.
pub fn softmax_t<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "softmax_t",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut g = Graph::new();
    let z = g.constant(logits)?;
    let q = softmax_t_var(&mut g, z, temperature)?;
    Ok(g.tensor(q))
}

/// Batch mean of `-ln q[label]` for probability rows `q`.
pub fn cross_entropy<T: Scalar>(q: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = q.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    check_labels(labels, s[0], s[1])?;
    let mut g = Graph::new();
    let qv = g.constant(q)?;
    let picked = g.gather(qv, labels)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    Ok(-g.item(mean).as_f64())
}

/// Batch-mean KL divergence between probability rows, direction per `config`.
pub fn kl_divergence<T: Scalar>(
    q_student: &Tensor<T>,
    q_teacher: &Tensor<T>,
    config: &DistillConfig,
) -> Result<f64> {
    if q_student.shape() != q_teacher.shape() || q_student.shape().len() != 2 {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: q_student.shape().to_vec(),
            rhs: q_teacher.shape().to_vec(),
        });
    }
    let (target, other) = match config.kl_direction {
        KlDirection::TeacherAsTarget => (q_teacher, q_student),
        KlDirection::StudentAsFirstArg => (q_student, q_teacher),
    };
    let batch = q_student.shape()[0];
    let mut sum = 0.0;
    for (&p, &q) in target.data().iter().zip(other.data()) {
        let (p, q) = (p.as_f64(), q.as_f64());
        if p > 0.0 {
            sum += p * (p.ln() - q.ln());
        }
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite { op: "kl_divergence" });
    }
    Ok(config.kl_scale() * sum / batch as f64)
}

/// Batch-mean squared L2 distance between two feature batches.
pub fn hint_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student)?;
    let t = g.constant(teacher)?;
    let h = hint_var(&mut g, s, t, false)?;
    Ok(g.item(h).as_f64())
}

/// Evaluates the objective on already computed exit outputs.
pub fn total_loss<T: Scalar>(
    outputs: &ExitOutputs<T>,
    labels: &[usize],
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let logits = outputs
        .logits
        .iter()
        .map(|t| g.constant(t))
        .collect::<Result<Vec<_>>>()?;
    let features = outputs
        .features
        .iter()
        .map(|t| g.constant(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(total_loss_vars(&mut g, &logits, &features, labels, config, true)?.breakdown)
}

impl LossBreakdown {
    /// Recomputes the total from the per-exit terms.
    pub fn recombine(&self, config: &DistillConfig) -> f64 {
        let c = self.per_exit.len();
        self.per_exit
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i + 1 == c {
                    t.ce
                } else {
                    (1.0 - config.alpha) * t.ce + config.alpha * t.kl + config.lambda * t.hint
                }
            })
            .sum()
    }
}
