use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormMode, BatchStats, Graph, Scalar, Tensor, Var};
use crate::error::Result;
use crate::model::params::{ParamId, ParamRole, ParamStore};

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: lazily bound parameter leaves and pending batchnorm updates.
pub(crate) struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub track_grads: bool,
    pub bound: Vec<Option<Var>>,
    pub stats: Vec<(Norm, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        let n = params.len();
        Self {
            g,
            params,
            mode,
            track_grads,
            bound: vec![None; n],
            stats: Vec::new(),
        }
    }

    pub fn bind(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let tensor = &self.params.get(id).tensor;
        let v = if self.track_grads && tensor.requires_grad() {
            self.g.leaf(tensor)?
        } else {
            self.g.constant(tensor)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }
}

fn kaiming<T: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Output height and width for the configured input resolution.
    pub out_hw: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        in_hw: (usize, usize),
    ) -> Self {
        let pad = k / 2;
        let weight = store.push(
            format!("{name}.weight"),
            ParamRole::Weight,
            kaiming(vec![cout, cin, k, k], cin * k * k, rng),
        );
        let out = |d: usize| (d + 2 * pad - k) / stride + 1;
        Self {
            weight,
            cin,
            cout,
            k,
            stride,
            pad,
            out_hw: (out(in_hw.0), out(in_hw.1)),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(self.weight)?;
        ctx.g.conv2d(x, w, self.stride, self.pad)
    }

    pub fn macs(&self) -> u64 {
        (self.cout * self.out_hw.0 * self.out_hw.1 * self.cin * self.k * self.k) as u64
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.push(format!("{name}.gamma"), ParamRole::Scale, Tensor::ones(vec![channels])),
            beta: store.push(format!("{name}.beta"), ParamRole::Shift, Tensor::zeros(vec![channels])),
            mean: store.push(
                format!("{name}.running_mean"),
                ParamRole::RunningMean,
                Tensor::zeros(vec![channels]),
            ),
            var: store.push(
                format!("{name}.running_var"),
                ParamRole::RunningVar,
                Tensor::ones(vec![channels]),
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.bind(self.gamma)?;
        let beta = ctx.bind(self.beta)?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.g.batchnorm(x, gamma, beta, BatchNormMode::Train)?;
                if let Some(stats) = stats {
                    ctx.stats.push((self.clone(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let params = ctx.params;
                let mode = BatchNormMode::Eval {
                    mean: params.get(self.mean).tensor.data(),
                    var: params.get(self.var).tensor.data(),
                };
                Ok(ctx.g.batchnorm(x, gamma, beta, mode)?.0)
            }
        }
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
        for (id, batch) in [(self.mean, &stats.mean), (self.var, &stats.var)] {
            let running = store.get_mut(id).tensor.data_mut();
            for (r, &b) in running.iter_mut().zip(batch) {
                *r = m * *r + one_minus * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        Self {
            weight: store.push(
                format!("{name}.weight"),
                ParamRole::Weight,
                kaiming(vec![fin, fout], fin, rng),
            ),
            bias: store.push(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros(vec![fout])),
            fin,
            fout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(self.weight)?;
        let b = ctx.bind(self.bias)?;
        let y = ctx.g.matmul(x, w)?;
        ctx.g.add_bias(y, b)
    }

    pub fn macs(&self) -> u64 {
        (self.fin * self.fout) as u64
    }
}

/// One building block of a backbone section or exit bottleneck.
#[derive(Clone, Debug)]
pub(crate) enum Unit {
    ConvBn {
        conv: Conv,
        bn: Norm,
        relu: bool,
    },
    Residual {
        conv1: Conv,
        bn1: Norm,
        conv2: Conv,
        bn2: Norm,
        shortcut: Option<(Conv, Norm)>,
    },
    Linear {
        dense: Dense,
        relu: bool,
    },
}

impl Unit {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Unit::ConvBn { conv, bn, relu } => {
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                if *relu {
                    ctx.g.relu(y)
                } else {
                    Ok(y)
                }
            }
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = conv1.forward(ctx, x)?;
                let h = bn1.forward(ctx, h)?;
                let h = ctx.g.relu(h)?;
                let h = conv2.forward(ctx, h)?;
                let h = bn2.forward(ctx, h)?;
                let skip = match shortcut {
                    Some((conv, bn)) => {
                        let s = conv.forward(ctx, x)?;
                        bn.forward(ctx, s)?
                    }
                    None => x,
                };
                let y = ctx.g.add(h, skip)?;
                ctx.g.relu(y)
            }
            Unit::Linear { dense, relu } => {
                let y = dense.forward(ctx, x)?;
                if *relu {
                    ctx.g.relu(y)
                } else {
                    Ok(y)
                }
            }
        }
    }

    pub fn macs(&self) -> u64 {
        match self {
            Unit::ConvBn { conv, .. } => conv.macs(),
            Unit::Residual {
                conv1,
                conv2,
                shortcut,
                ..
            } => conv1.macs() + conv2.macs() + shortcut.as_ref().map_or(0, |(c, _)| c.macs()),
            Unit::Linear { dense, .. } => dense.macs(),
        }
    }

    pub fn param_ids(&self, out: &mut Vec<ParamId>) {
        let norm = |n: &Norm, out: &mut Vec<ParamId>| out.extend([n.gamma, n.beta, n.mean, n.var]);
        match self {
            Unit::ConvBn { conv, bn, .. } => {
                out.push(conv.weight);
                norm(bn, out);
            }
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                out.push(conv1.weight);
                norm(bn1, out);
                out.push(conv2.weight);
                norm(bn2, out);
                if let Some((c, n)) = shortcut {
                    out.push(c.weight);
                    norm(n, out);
                }
            }
            Unit::Linear { dense, .. } => out.extend([dense.weight, dense.bias]),
        }
    }

    pub fn remap(&mut self, map: &[Option<ParamId>]) {
        let fix = |id: &mut ParamId| *id = map[id.0].expect("retained parameter");
        let fix_norm = |n: &mut Norm| {
            for id in [&mut n.gamma, &mut n.beta, &mut n.mean, &mut n.var] {
                fix(id);
            }
        };
        match self {
            Unit::ConvBn { conv, bn, .. } => {
                fix(&mut conv.weight);
                fix_norm(bn);
            }
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                fix(&mut conv1.weight);
                fix_norm(bn1);
                fix(&mut conv2.weight);
                fix_norm(bn2);
                if let Some((c, n)) = shortcut {
                    fix(&mut c.weight);
                    fix_norm(n);
                }
            }
            Unit::Linear { dense, .. } => {
                fix(&mut dense.weight);
                fix(&mut dense.bias);
            }
        }
    }

    /// Names of the weight tensors of this unit's conv/fc layers, in order.
    pub fn layer_weights(&self, out: &mut Vec<ParamId>) {
        match self {
            Unit::ConvBn { conv, .. } => out.push(conv.weight),
            Unit::Residual {
                conv1,
                conv2,
                shortcut,
                ..
            } => {
                out.push(conv1.weight);
                out.push(conv2.weight);
                if let Some((c, _)) = shortcut {
                    out.push(c.weight);
                }
            }
            Unit::Linear { dense, .. } => out.push(dense.weight),
        }
    }
}
