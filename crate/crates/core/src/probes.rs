//! Diagnostics over trained models: weight-noise robustness, layer-wise
//! gradient magnitudes, feature separability and PCA export.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::data::{batches, derive_seed, Augment, Dataset};
use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::loss::softmax_t;
use crate::model::{MultiExitModel, ParamRole};
use crate::trainer::{compute_gradients, layer_grad_means, LayerGrad, Regime, TrainPlan};

/// Hex SHA-256 over every stored tensor of the model.
pub fn param_hash<T: Scalar>(model: &MultiExitModel<T>) -> String {
    let mut h = Sha256::new();
    for p in model.params().iter() {
        h.update(p.name.as_bytes());
        let mut buf = Vec::with_capacity(p.tensor.numel() * T::DTYPE.size());
        for &v in p.tensor.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// `N(0, sigma^2)` for every scalar.
    Absolute,
    /// Per tensor, `sigma` is multiplied by the tensor's own standard deviation.
    Relative,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(NoiseMode::Absolute),
            "relative" => Ok(NoiseMode::Relative),
            other => Err(Error::invalid(format!("unknown noise mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseMode::Absolute => "absolute",
            NoiseMode::Relative => "relative",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseProbeConfig {
    /// Ascending, starting at 0.
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub mode: NoiseMode,
    /// Exit to evaluate; `None` means the deepest.
    pub exit: Option<usize>,
    pub batch_size: usize,
}

/// Pooled standard deviation of all conv/fc weights.
pub fn weight_std<T: Scalar>(model: &MultiExitModel<T>) -> f64 {
    let vals: Vec<f64> = model
        .params()
        .iter()
        .filter(|p| p.role == ParamRole::Weight)
        .flat_map(|p| p.tensor.data().iter().map(|v| v.as_f64()))
        .collect();
    std_of(&vals)
}

fn std_of(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `steps` evenly spaced values from 0 to `2 × weight_std`.
pub fn default_sigma_grid<T: Scalar>(model: &MultiExitModel<T>, steps: usize) -> Vec<f64> {
    let top = 2.0 * weight_std(model);
    if steps < 2 {
        return vec![0.0];
    }
    (0..steps).map(|i| top * i as f64 / (steps - 1) as f64).collect()
}

impl NoiseProbeConfig {
    /// Ten sigmas up to twice the weight spread, five trials each.
    pub fn default_for<T: Scalar>(model: &MultiExitModel<T>, seed: u64) -> Self {
        Self {
            sigmas: default_sigma_grid(model, 10),
            trials: 5,
            seed,
            mode: NoiseMode::Absolute,
            exit: None,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub sigma: f64,
    pub trial: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSummary {
    pub sigma: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseProbeResult {
    pub rows: Vec<NoiseRow>,
}

impl NoiseProbeResult {
    /// Mean and standard deviation over trials, per sigma in grid order.
    pub fn summary(&self) -> Vec<NoiseSummary> {
        let mut out: Vec<NoiseSummary> = Vec::new();
        let mut i = 0;
        while i < self.rows.len() {
            let sigma = self.rows[i].sigma;
            let group: Vec<&NoiseRow> = self.rows[i..].iter().take_while(|r| r.sigma == sigma).collect();
            i += group.len();
            let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let loss: Vec<f64> = group.iter().map(|r| r.loss).collect();
            out.push(NoiseSummary {
                sigma,
                mean_accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
                std_accuracy: std_of(&acc),
                mean_loss: loss.iter().sum::<f64>() / loss.len() as f64,
                std_loss: std_of(&loss),
            });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,trial,accuracy,loss\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.sigma, r.trial, r.accuracy, r.loss);
        }
        s
    }
}

/// Accuracy (percent) and mean `T = 1` cross-entropy of one exit over a split.
pub fn exit_accuracy_and_loss<T: Scalar>(
    model: &MultiExitModel<T>,
    split: &Dataset,
    exit: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::invalid("empty split"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for batch in batches::<T>(split, batch_size.max(1), None, Augment::None, 0) {
        let mut g = Graph::new();
        let x = g.constant(&batch.inputs)?;
        let pass = model.forward_until(&mut g, x, exit)?;
        let pos = pass
            .position(exit)
            .ok_or_else(|| Error::invalid(format!("exit {exit} not present")))?;
        let q = softmax_t(&g.tensor(pass.logits[pos]), 1.0)?;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = q.row(i);
            if argmax(row) == y {
                correct += 1;
            }
            loss -= row[y].as_f64().max(f64::MIN_POSITIVE).ln();
        }
    }
    let n = split.len() as f64;
    Ok((100.0 * correct as f64 / n, loss / n))
}

fn perturb<T: Scalar>(model: &mut MultiExitModel<T>, sigma: f64, mode: NoiseMode, rng: &mut ChaCha8Rng) {
    for p in model.params_mut().trainable_mut() {
        let scale = match mode {
            NoiseMode::Absolute => sigma,
            NoiseMode::Relative => {
                let vals: Vec<f64> = p.tensor.data().iter().map(|v| v.as_f64()).collect();
                sigma * std_of(&vals)
            }
        };
        if scale <= 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, scale).expect("positive finite scale");
        for v in p.tensor.data_mut() {
            *v = T::from_f64(v.as_f64() + normal.sample(rng));
        }
    }
}

/// Evaluates perturbed copies of `model`; the model itself is never modified.
pub fn noise_probe<T: Scalar>(
    model: &MultiExitModel<T>,
    split: &Dataset,
    config: &NoiseProbeConfig,
) -> Result<NoiseProbeResult> {
    if config.sigmas.first().is_some_and(|&s| s != 0.0) || config.sigmas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("noise probe: sigmas must ascend from 0"));
    }
    if config.sigmas.iter().any(|s| !s.is_finite()) || config.trials == 0 {
        return Err(Error::invalid("noise probe: sigmas must be finite and trials >= 1"));
    }
    let exit = config.exit.unwrap_or_else(|| model.deepest_index());
    let clean = exit_accuracy_and_loss(model, split, exit, config.batch_size)?;
    let mut rows = Vec::new();
    for (si, &sigma) in config.sigmas.iter().enumerate() {
        for trial in 0..config.trials {
            let (accuracy, loss) = if sigma == 0.0 {
                clean
            } else {
                let mut noisy = model.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, si as u64, trial as u64]));
                perturb(&mut noisy, sigma, config.mode, &mut rng);
                exit_accuracy_and_loss(&noisy, split, exit, config.batch_size)?
            };
            rows.push(NoiseRow {
                sigma,
                trial,
                accuracy,
                loss,
            });
        }
    }
    Ok(NoiseProbeResult { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub layers: Vec<LayerGrad>,
}

impl GradStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,depth_index,mean_abs_grad\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.layer, l.depth_index, l.mean_abs_grad);
        }
        s
    }

    /// Mean over the layers of backbone section `section` (1-based).
    pub fn section_mean<T: Scalar>(&self, model: &MultiExitModel<T>, section: usize) -> f64 {
        let infos = model.layers();
        let vals: Vec<f64> = self
            .layers
            .iter()
            .zip(&infos)
            .filter(|(_, info)| info.section == Some(section))
            .map(|(l, _)| l.mean_abs_grad)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

/// Per-layer mean |weight gradient| of the regime's loss on one batch,
/// computed on a copy of the model in training mode.
pub fn grad_stats<T: Scalar>(
    model: &MultiExitModel<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    plan: &TrainPlan,
) -> Result<GradStats> {
    let mut work = model.clone();
    let include_shallow = plan.regime != Regime::Standard;
    compute_gradients(&mut work, inputs, labels, &plan.effective_distill(), include_shallow)?;
    Ok(GradStats {
        layers: layer_grad_means(&work),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityRow {
    pub exit: usize,
    pub sse: f64,
    pub ssb: f64,
    /// `sse / ssb`, undefined when `ssb == 0`.
    pub ratio: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityReport {
    pub rows: Vec<SeparabilityRow>,
    /// Classes without samples in the split; they do not contribute.
    pub skipped_classes: Vec<usize>,
}

impl SeparabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("exit,sse,ssb,ratio,accuracy\n");
        for r in &self.rows {
            let ratio = r.ratio.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.exit, r.sse, r.ssb, ratio, r.accuracy);
        }
        s
    }
}

/// Within-class and between-class sums of squares, both divided by the sample count.
/// Returns `(sse, ssb, classes without samples)`.
pub fn sse_ssb(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> (f64, f64, Vec<usize>) {
    let n = features.len();
    if n == 0 {
        return (0.0, 0.0, (0..num_classes).collect());
    }
    let d = features[0].len();
    let mut class_sum = vec![vec![0f64; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut global = vec![0f64; d];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for j in 0..d {
            class_sum[y][j] += f[j];
            global[j] += f[j];
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let means: Vec<Vec<f64>> = class_sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let mut sse = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        sse += f.iter().zip(&means[y]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let mut ssb = 0.0;
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        if counts[c] == 0 {
            skipped.push(c);
            continue;
        }
        ssb += counts[c] as f64 * means[c].iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    (sse / n as f64, ssb / n as f64, skipped)
}

/// Spatially averaged hint features and `T = 1` predictions of every exit over a split.
/// Per exit, per sample pooled feature vectors; plus correct counts per exit.
type PooledFeatures = (Vec<Vec<Vec<f64>>>, Vec<usize>);

fn pooled_features<T: Scalar>(
    model: &MultiExitModel<T>,
    split: &Dataset,
    batch_size: usize,
) -> Result<PooledFeatures> {
    let exits = model.num_exits();
    let mut feats = vec![Vec::with_capacity(split.len()); exits];
    let mut correct = vec![0usize; exits];
    for batch in batches::<T>(split, batch_size.max(1), None, Augment::None, 0) {
        let out = model.infer(&batch.inputs)?;
        for k in 0..exits {
            let f = &out.features[k];
            let b = f.shape()[0];
            let c = f.shape()[1];
            let inner = f.numel() / (b * c);
            for i in 0..b {
                let row = f.row(i);
                feats[k].push(
                    (0..c)
                        .map(|ch| row[ch * inner..(ch + 1) * inner].iter().map(|v| v.as_f64()).sum::<f64>() / inner as f64)
                        .collect(),
                );
            }
            let z = &out.logits[k];
            correct[k] += (0..b).filter(|&i| argmax(z.row(i)) == batch.labels[i]).count();
        }
    }
    Ok((feats, correct))
}

/// SSE, SSB and their ratio for each exit's pooled features.
pub fn separability<T: Scalar>(model: &MultiExitModel<T>, split: &Dataset, batch_size: usize) -> Result<SeparabilityReport> {
    if split.is_empty() {
        return Err(Error::invalid("separability: empty split"));
    }
    let (feats, correct) = pooled_features(model, split, batch_size)?;
    let mut skipped = Vec::new();
    let rows = model
        .exit_indices()
        .into_iter()
        .enumerate()
        .map(|(k, exit)| {
            let (sse, ssb, sk) = sse_ssb(&feats[k], split.labels(), split.num_classes());
            skipped = sk;
            SeparabilityRow {
                exit,
                sse,
                ssb,
                ratio: (ssb > 0.0).then(|| sse / ssb),
                accuracy: 100.0 * correct[k] as f64 / split.len() as f64,
            }
        })
        .collect();
    Ok(SeparabilityReport {
        rows,
        skipped_classes: skipped,
    })
}

pub const PCA_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues (population normalization), descending.
    pub eigenvalues: Vec<f64>,
    /// `N×k` projections of the centered rows.
    pub projections: Vec<Vec<f64>>,
}

/// Top-`k` principal components via power iteration with deflation.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    if n < k || n == 0 || k == 0 {
        return Err(Error::invalid(format!("pca: {n} samples cannot give {k} components")));
    }
    let d = rows[0].len();
    if k > d {
        return Err(Error::invalid(format!("pca: {k} components exceed dimension {d}")));
    }
    let mut mean = vec![0f64; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![0f64; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + c) % 7) as f64 * 0.1).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let mut w = vec![0f64; d];
            for i in 0..d {
                w[i] = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta < PCA_TOL {
                break;
            }
        }
        // Sign convention: largest-magnitude entry is positive.
        let pivot = argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let projections = centered
        .iter()
        .map(|r| components.iter().map(|c| c.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        projections,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaExport {
    pub labels: Vec<usize>,
    pub pca: Pca,
}

impl PcaExport {
    pub fn to_csv(&self) -> String {
        let k = self.pca.components.len();
        let mut s = String::from("sample,label");
        for c in 1..=k {
            let _ = write!(s, ",pc{c}");
        }
        s.push('\n');
        for (i, (y, p)) in self.labels.iter().zip(&self.pca.projections).enumerate() {
            let _ = write!(s, "{i},{y}");
            for v in p {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Projects one exit's pooled features onto their top principal components.
pub fn export_features_pca<T: Scalar>(
    model: &MultiExitModel<T>,
    split: &Dataset,
    exit: usize,
    components: usize,
    batch_size: usize,
) -> Result<PcaExport> {
    let k = model
        .exit_indices()
        .iter()
        .position(|&e| e == exit)
        .ok_or_else(|| Error::invalid(format!("exit {exit} not present")))?;
    let (feats, _) = pooled_features(model, split, batch_size)?;
    Ok(PcaExport {
        labels: split.labels().to_vec(),
        pca: pca(&feats[k], components)?,
    })
}
