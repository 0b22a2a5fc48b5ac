//! Per-exit prediction, softmax ensembling, confidence-based early exit and
//! analytic MAC accounting.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::loss::softmax_t;
use crate::model::MultiExitModel;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Predicted class of each sample.
    pub classes: Vec<usize>,
    /// `B×M` probability rows.
    pub probs: Vec<Vec<f64>>,
    /// Backbone sections executed to produce the prediction.
    pub sections_run: usize,
}

fn rows<T: Scalar>(probs: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..probs.shape()[0])
        .map(|i| probs.row(i).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Prediction of one exit at `T = 1`; only sections `1..=exit` are evaluated.
pub fn predict_at_exit<T: Scalar>(model: &MultiExitModel<T>, input: &Tensor<T>, exit: usize) -> Result<Prediction> {
    if !model.exit_indices().contains(&exit) {
        return Err(Error::invalid(format!(
            "exit {exit} out of range; model has exits {:?}",
            model.exit_indices()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(input)?;
    let pass = model.forward_until(&mut g, x, exit)?;
    let pos = pass.position(exit).expect("requested exit was evaluated");
    let q = softmax_t(&g.tensor(pass.logits[pos]), 1.0)?;
    let probs = rows(&q);
    Ok(Prediction {
        classes: probs.iter().map(|r| argmax(r)).collect(),
        probs,
        sections_run: pass.sections_run,
    })
}

/// Non-negative per-exit weights over a subset of exits.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    /// One weight per exit `1..=C`.
    pub weights: Vec<f64>,
    /// 1-based exits that take part; others are ignored.
    pub included: Vec<usize>,
}

impl EnsembleSpec {
    pub fn new(weights: Vec<f64>, included: Vec<usize>) -> Result<Self> {
        let spec = Self { weights, included };
        spec.effective()?;
        Ok(spec)
    }

    /// Equal weights over all `exits` exits.
    pub fn uniform(exits: usize) -> Self {
        Self {
            weights: vec![1.0; exits],
            included: (1..=exits).collect(),
        }
    }

    /// Equal weights over the deepest three exits (all of them if fewer).
    pub fn deepest_three(exits: usize) -> Self {
        Self {
            weights: vec![1.0; exits],
            included: (exits.saturating_sub(2).max(1)..=exits).collect(),
        }
    }

    /// Normalized `(exit, weight)` pairs of the included exits with positive weight.
    pub fn effective(&self) -> Result<Vec<(usize, f64)>> {
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("ensemble weight {w} must be finite and >= 0")));
        }
        let mut pairs = Vec::new();
        for &e in &self.included {
            if e == 0 || e > self.weights.len() {
                return Err(Error::invalid(format!(
                    "ensemble exit {e} outside 1..={}",
                    self.weights.len()
                )));
            }
            if self.weights[e - 1] > 0.0 && !pairs.iter().any(|&(x, _)| x == e) {
                pairs.push((e, self.weights[e - 1]));
            }
        }
        let sum: f64 = pairs.iter().map(|p| p.1).sum();
        if pairs.is_empty() || sum <= 0.0 {
            return Err(Error::invalid("ensemble weights are all zero over the included exits"));
        }
        pairs.sort_by_key(|p| p.0);
        Ok(pairs.into_iter().map(|(e, w)| (e, w / sum)).collect())
    }
}

/// Weighted sum of per-exit probability rows; `probs[k]` belongs to exit `exits[k]`.
pub fn combine(probs: &[Vec<Vec<f64>>], exits: &[usize], spec: &EnsembleSpec) -> Result<Vec<Vec<f64>>> {
    let eff = spec.effective()?;
    let mut out: Option<Vec<Vec<f64>>> = None;
    for (exit, w) in eff {
        let k = exits
            .iter()
            .position(|&e| e == exit)
            .ok_or_else(|| Error::invalid(format!("ensemble exit {exit} not available")))?;
        let acc = out.get_or_insert_with(|| vec![vec![0.0; probs[k][0].len()]; probs[k].len()]);
        for (a, r) in acc.iter_mut().zip(&probs[k]) {
            for (x, &p) in a.iter_mut().zip(r) {
                *x += w * p;
            }
        }
    }
    let mut out = out.expect("effective weights are non-empty");
    for row in &mut out {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Per-exit `T = 1` probability rows for every exit of the model.
pub fn exit_probs<T: Scalar>(model: &MultiExitModel<T>, input: &Tensor<T>) -> Result<Vec<Vec<Vec<f64>>>> {
    model
        .infer(input)?
        .logits
        .iter()
        .map(|z| Ok(rows(&softmax_t(z, 1.0)?)))
        .collect()
}

pub fn ensemble<T: Scalar>(model: &MultiExitModel<T>, input: &Tensor<T>, spec: &EnsembleSpec) -> Result<Prediction> {
    spec.effective()?;
    let probs = exit_probs(model, input)?;
    let combined = combine(&probs, &model.exit_indices(), spec)?;
    Ok(Prediction {
        classes: combined.iter().map(|r| argmax(r)).collect(),
        probs: combined,
        sections_run: model.config().sections.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub exit: usize,
    pub macs: u64,
    pub params: usize,
    /// MACs of the deepest exit path divided by this exit's.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("exit,macs,params,ratio\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.4}", r.exit, r.macs, r.params, r.ratio);
        }
        s
    }
}

/// Analytic per-input MAC and parameter counts for every exit path.
pub fn count_macs<T: Scalar>(model: &MultiExitModel<T>) -> CostReport {
    let costs = model.exit_costs();
    let deepest = costs.last().map_or(1, |c| c.macs) as f64;
    CostReport {
        rows: costs
            .into_iter()
            .map(|c| CostRow {
                exit: c.exit,
                macs: c.macs,
                params: c.params,
                ratio: deepest / c.macs as f64,
            })
            .collect(),
    }
}

/// Per sample: the first exit whose top softmax probability reaches
/// `threshold`, else the deepest. Returns `(class, exit used)` pairs.
pub fn confidence_early_exit<T: Scalar>(
    model: &MultiExitModel<T>,
    input: &Tensor<T>,
    threshold: f64,
) -> Result<Vec<(usize, usize)>> {
    let batch = input.shape().first().copied().unwrap_or(0);
    let per: usize = input.shape()[1..].iter().product();
    let mut shape = input.shape().to_vec();
    shape[0] = 1;
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let x = Tensor::new(shape.clone(), input.data()[i * per..(i + 1) * per].to_vec())?;
        let mut g = Graph::new();
        let xv = g.constant(&x)?;
        let mut last = None;
        model.forward_staged(&mut g, xv, &mut |g, exit, logits| {
            let q = softmax_t(&g.tensor(logits), 1.0).expect("logits are 2-D");
            let row: Vec<f64> = q.row(0).iter().map(|v| v.as_f64()).collect();
            let class = argmax(&row);
            last = Some((class, exit));
            row[class] >= threshold
        })?;
        out.push(last.ok_or_else(|| Error::Model("model has no exits".into()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn hand_computed_uniform_combination() {
        let probs = vec![
            vec![vec![0.6, 0.3, 0.1]],
            vec![vec![0.2, 0.5, 0.3]],
            vec![vec![0.1, 0.1, 0.8]],
        ];
        let c = combine(&probs, &[1, 2, 3], &EnsembleSpec::uniform(3)).unwrap();
        let want = [0.3, 0.3, 0.4];
        for (a, b) in c[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&c[0]), 2);
    }

    #[test]
    fn identical_rows_are_fixed_points() {
        let q = vec![vec![0.25, 0.75]];
        let probs = vec![q.clone(), q.clone()];
        let spec = EnsembleSpec::new(vec![0.9, 0.1], vec![1, 2]).unwrap();
        let c = combine(&probs, &[1, 2], &spec).unwrap();
        assert!((c[0][0] - 0.25).abs() < 1e-15 && (c[0][1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_weights() {
        assert!(EnsembleSpec::new(vec![0.0, 0.0, 1.0], vec![1, 2]).is_err());
        assert!(EnsembleSpec::new(vec![1.0, -1.0], vec![1]).is_err());
        assert!(EnsembleSpec::new(vec![1.0, 1.0], vec![3]).is_err());
    }

    #[test]
    fn deepest_three_preset() {
        assert_eq!(EnsembleSpec::deepest_three(4).included, vec![2, 3, 4]);
        assert_eq!(EnsembleSpec::deepest_three(2).included, vec![1, 2]);
    }
}
