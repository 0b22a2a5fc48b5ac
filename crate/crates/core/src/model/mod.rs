//! Sectioned backbones with one classifier exit per section.
//!
//! Every shallow exit owns a bottleneck that maps its section output onto the
//! shape of the deepest feature map, then global pooling and a linear layer.
//! The deepest exit reads the backbone output directly.

mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub use layers::{Mode, BN_MOMENTUM};
pub use params::{Param, ParamId, ParamRole, ParamStore};

use layers::{Conv, Ctx, Dense, Norm, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    MiniResnet,
    PlainCnn,
    Mlp,
}

impl Arch {
    pub fn is_spatial(self) -> bool {
        !matches!(self, Arch::Mlp)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_resnet" => Ok(Arch::MiniResnet),
            "plain_cnn" => Ok(Arch::PlainCnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MiniResnet => "mini_resnet",
            Arch::PlainCnn => "plain_cnn",
            Arch::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Halve the spatial resolution at the start of the section.
    pub downsample: bool,
}

impl SectionSpec {
    pub fn new(blocks: usize, channels: usize, downsample: bool) -> Self {
        Self {
            blocks,
            channels,
            downsample,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub sections: Vec<SectionSpec>,
    pub num_classes: usize,
    /// Per-sample input shape: `[C, H, W]` for convolutional archs, `[D]` for mlp.
    pub input_shape: Vec<usize>,
}

impl ModelConfig {
    /// Four-section residual network for 3×32×32 images.
    pub fn mini_resnet_cifar(num_classes: usize) -> Self {
        Self {
            arch: Arch::MiniResnet,
            sections: vec![
                SectionSpec::new(1, 16, false),
                SectionSpec::new(1, 32, true),
                SectionSpec::new(1, 64, true),
                SectionSpec::new(1, 128, true),
            ],
            num_classes,
            input_shape: vec![3, 32, 32],
        }
    }
}

#[derive(Clone, Debug)]
struct Section {
    units: Vec<Unit>,
    /// Per-sample output shape.
    out_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct ExitHead {
    /// 1-based section index this exit is attached to.
    index: usize,
    bottleneck: Vec<Unit>,
    fc: Dense,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Logits `B×M` of each evaluated exit.
    pub logits: Vec<Var>,
    /// Hint features, all with the deepest feature-map shape.
    pub features: Vec<Var>,
    /// 1-based exit index of each entry above.
    pub exits: Vec<usize>,
    /// Number of backbone sections that were executed.
    pub sections_run: usize,
    bound: Vec<Option<Var>>,
}

/// Materialized per-exit logits and hint features for one batch.
#[derive(Clone, Debug)]
pub struct ExitOutputs<T> {
    pub logits: Vec<Tensor<T>>,
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> ExitOutputs<T> {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }
}

/// Inference cost of reaching one exit on a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitCost {
    pub exit: usize,
    pub macs: u64,
    pub params: usize,
}

/// A conv or fc weight together with where it sits in the network.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub id: ParamId,
    /// 1-based backbone section, `0` for the stem, `None` for exit-head layers.
    pub section: Option<usize>,
    /// Exit index for exit-head layers.
    pub exit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct MultiExitModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stem: Vec<Unit>,
    sections: Vec<Section>,
    heads: Vec<ExitHead>,
    feature_shape: Vec<usize>,
}

fn spatial_halve(shape: &[usize], section: usize) -> Result<()> {
    if shape[1] / 2 < 1 || shape[2] / 2 < 1 {
        return Err(Error::Model(format!(
            "section {section}: downsampling a {}x{} map gives spatial size < 1",
            shape[1], shape[2]
        )));
    }
    Ok(())
}

impl<T: Scalar> MultiExitModel<T> {
    /// Builds and initializes a model; weights are drawn from a generator seeded with `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.sections.len() < 2 {
            return Err(Error::Model(format!(
                "need at least 2 sections, got {}",
                config.sections.len()
            )));
        }
        if config.num_classes < 2 {
            return Err(Error::Model(format!(
                "need at least 2 classes, got {}",
                config.num_classes
            )));
        }
        for (i, s) in config.sections.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return Err(Error::Model(format!(
                    "section {}: blocks and channels must be >= 1",
                    i + 1
                )));
            }
        }
        let expected_rank = if config.arch.is_spatial() { 3 } else { 1 };
        if config.input_shape.len() != expected_rank || config.input_shape.contains(&0) {
            return Err(Error::Model(format!(
                "{} expects a rank-{expected_rank} input shape, got {:?}",
                config.arch, config.input_shape
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stem = Vec::new();
        let mut sections = Vec::new();
        let mut shape = config.input_shape.clone();

        if config.arch == Arch::MiniResnet {
            let c = config.sections[0].channels;
            let hw = (shape[1], shape[2]);
            let conv = Conv::new(&mut store, &mut rng, "stem.conv", shape[0], c, 3, 1, hw);
            let bn = Norm::new(&mut store, "stem.bn", c);
            shape = vec![c, conv.out_hw.0, conv.out_hw.1];
            stem.push(Unit::ConvBn {
                conv,
                bn,
                relu: true,
            });
        }

        for (si, spec) in config.sections.iter().enumerate() {
            let idx = si + 1;
            let mut units = Vec::new();
            for b in 0..spec.blocks {
                let name = format!("section{idx}.block{b}");
                match config.arch {
                    Arch::Mlp => {
                        let dense = Dense::new(&mut store, &mut rng, &name, shape[0], spec.channels);
                        shape = vec![spec.channels];
                        units.push(Unit::Linear { dense, relu: true });
                    }
                    Arch::PlainCnn => {
                        let stride = if b == 0 && spec.downsample {
                            spatial_halve(&shape, idx)?;
                            2
                        } else {
                            1
                        };
                        let hw = (shape[1], shape[2]);
                        let conv = Conv::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.conv"),
                            shape[0],
                            spec.channels,
                            3,
                            stride,
                            hw,
                        );
                        let bn = Norm::new(&mut store, &format!("{name}.bn"), spec.channels);
                        shape = vec![spec.channels, conv.out_hw.0, conv.out_hw.1];
                        units.push(Unit::ConvBn {
                            conv,
                            bn,
                            relu: true,
                        });
                    }
                    Arch::MiniResnet => {
                        let stride = if b == 0 && spec.downsample {
                            spatial_halve(&shape, idx)?;
                            2
                        } else {
                            1
                        };
                        let (cin, cout) = (shape[0], spec.channels);
                        let hw = (shape[1], shape[2]);
                        let conv1 = Conv::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.conv1"),
                            cin,
                            cout,
                            3,
                            stride,
                            hw,
                        );
                        let bn1 = Norm::new(&mut store, &format!("{name}.bn1"), cout);
                        let conv2 = Conv::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.conv2"),
                            cout,
                            cout,
                            3,
                            1,
                            conv1.out_hw,
                        );
                        let bn2 = Norm::new(&mut store, &format!("{name}.bn2"), cout);
                        let shortcut = if cin != cout || stride != 1 {
                            let conv = Conv::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.shortcut.conv"),
                                cin,
                                cout,
                                1,
                                stride,
                                hw,
                            );
                            let bn = Norm::new(&mut store, &format!("{name}.shortcut.bn"), cout);
                            Some((conv, bn))
                        } else {
                            None
                        };
                        shape = vec![cout, conv2.out_hw.0, conv2.out_hw.1];
                        units.push(Unit::Residual {
                            conv1,
                            bn1,
                            conv2,
                            bn2,
                            shortcut,
                        });
                    }
                }
            }
            sections.push(Section {
                units,
                out_shape: shape.clone(),
            });
        }

        let deep = sections.last().expect("at least two sections").out_shape.clone();
        let mut heads = Vec::new();
        for (si, section) in sections.iter().enumerate() {
            let idx = si + 1;
            let name = format!("head{idx}");
            let bottleneck = if idx == sections.len() {
                Vec::new()
            } else {
                build_bottleneck(&mut store, &mut rng, &name, &section.out_shape, &deep)?
            };
            let fc = Dense::new(
                &mut store,
                &mut rng,
                &format!("{name}.fc"),
                deep[0],
                config.num_classes,
            );
            heads.push(ExitHead {
                index: idx,
                bottleneck,
                fc,
            });
        }

        let model = Self {
            config: config.clone(),
            params: store,
            stem,
            sections,
            heads,
            feature_shape: deep,
        };
        model.smoke_test()?;
        Ok(model)
    }

    fn smoke_test(&self) -> Result<()> {
        let mut shape = vec![2];
        shape.extend(&self.config.input_shape);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(shape))?;
        let pass = self.forward_eval(&mut g, x)?;
        let expected_features = {
            let mut s = vec![2];
            s.extend(self.feature_shape());
            s
        };
        for (&logits, &features) in pass.logits.iter().zip(&pass.features) {
            if g.shape(logits) != [2, self.config.num_classes] || g.shape(features) != expected_features {
                return Err(Error::Model("exit output shape check failed".into()));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Number of exits this model (possibly stripped) still carries.
    pub fn num_exits(&self) -> usize {
        self.heads.len()
    }

    /// 1-based exit indices, shallow to deep.
    pub fn exit_indices(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.index).collect()
    }

    /// Index of the deepest exit of the unstripped architecture.
    pub fn deepest_index(&self) -> usize {
        self.config.sections.len()
    }

    /// True when every section still has its exit and the backbone is whole.
    pub fn is_complete(&self) -> bool {
        self.heads.len() == self.config.sections.len()
    }

    /// Per-sample shape of every hint feature map.
    pub fn feature_shape(&self) -> Vec<usize> {
        self.feature_shape.clone()
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != self.config.input_shape.len() + 1 || s[1..] != self.config.input_shape[..] {
            let mut expected = vec![0];
            expected.extend(&self.config.input_shape);
            return Err(Error::Shape {
                op: "model.forward",
                lhs: s.to_vec(),
                rhs: expected,
            });
        }
        Ok(())
    }

    fn run(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        until: usize,
        on_exit: &mut dyn FnMut(&Graph<T>, usize, Var) -> bool,
    ) -> Result<ForwardPass> {
        self.check_input(ctx.g, x)?;
        let mut pass = ForwardPass {
            logits: Vec::new(),
            features: Vec::new(),
            exits: Vec::new(),
            sections_run: 0,
            bound: Vec::new(),
        };
        let batch = ctx.g.shape(x)[0];
        let mut feature_shape = vec![batch];
        feature_shape.extend(self.feature_shape());
        let mut h = x;
        for unit in &self.stem {
            h = unit.forward(ctx, h)?;
        }
        let mut heads = self.heads.iter().peekable();
        for (si, section) in self.sections.iter().enumerate().take(until) {
            let idx = si + 1;
            for unit in &section.units {
                h = unit.forward(ctx, h)?;
            }
            pass.sections_run = idx;
            let Some(head) = heads.next_if(|hd| hd.index == idx) else {
                continue;
            };
            let mut f = h;
            for unit in &head.bottleneck {
                f = unit.forward(ctx, f)?;
            }
            if ctx.g.shape(f) != feature_shape {
                return Err(Error::Shape {
                    op: "exit features",
                    lhs: ctx.g.shape(f).to_vec(),
                    rhs: feature_shape,
                });
            }
            let pooled = ctx.g.global_avgpool(f)?;
            let logits = head.fc.forward(ctx, pooled)?;
            pass.logits.push(logits);
            pass.features.push(f);
            pass.exits.push(idx);
            if on_exit(ctx.g, idx, logits) {
                break;
            }
        }
        pass.bound = std::mem::take(&mut ctx.bound);
        Ok(pass)
    }

    /// Full forward pass. Training mode normalizes with batch statistics,
    /// updates the running statistics and records gradient leaves.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Eval => self.forward_eval(g, x),
            Mode::Train => {
                let mut ctx = Ctx::new(g, &self.params, Mode::Train, true);
                let pass = self.run(&mut ctx, x, usize::MAX, &mut |_, _, _| false)?;
                let stats = std::mem::take(&mut ctx.stats);
                for (norm, s) in &stats {
                    norm.update_running(&mut self.params, s);
                }
                Ok(pass)
            }
        }
    }

    /// Eval-mode forward through every exit; parameters enter as constants.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardPass> {
        self.forward_until(g, x, usize::MAX)
    }

    /// Eval-mode forward touching only sections `1..=exit`.
    pub fn forward_until(&self, g: &mut Graph<T>, x: Var, exit: usize) -> Result<ForwardPass> {
        let mut ctx = Ctx::new(g, &self.params, Mode::Eval, false);
        self.run(&mut ctx, x, exit, &mut |_, _, _| false)
    }

    /// Eval-mode forward that stops after the first exit for which `stop` returns true.
    pub fn forward_staged(
        &self,
        g: &mut Graph<T>,
        x: Var,
        stop: &mut dyn FnMut(&Graph<T>, usize, Var) -> bool,
    ) -> Result<ForwardPass> {
        let mut ctx = Ctx::new(g, &self.params, Mode::Eval, false);
        self.run(&mut ctx, x, usize::MAX, stop)
    }

    /// Eval-mode outputs of every exit for an input batch.
    pub fn infer(&self, input: &Tensor<T>) -> Result<ExitOutputs<T>> {
        let mut g = Graph::new();
        let x = g.constant(input)?;
        let pass = self.forward_eval(&mut g, x)?;
        Ok(pass.outputs(&g))
    }

    /// Adds the leaf gradients of a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &Graph<T>, pass: &ForwardPass) {
        for (i, var) in pass.bound.iter().enumerate() {
            let Some(var) = var else { continue };
            if let Some(grad) = g.grad(*var) {
                self.params.get_mut(ParamId(i)).tensor.accumulate_grad(grad);
            }
        }
    }

    /// Sets every trainable parameter to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params.trainable_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Keeps the backbone up to the deepest kept exit plus the heads in `keep`.
    pub fn strip_heads(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::invalid("strip_heads: keep at least one exit"));
        }
        for k in keep {
            if !self.heads.iter().any(|h| h.index == *k) {
                return Err(Error::invalid(format!("strip_heads: exit {k} is not present")));
            }
        }
        let deepest = *keep.iter().max().expect("non-empty");
        let mut stripped = Self {
            config: self.config.clone(),
            params: self.params.clone(),
            stem: self.stem.clone(),
            sections: self.sections[..deepest].to_vec(),
            heads: self
                .heads
                .iter()
                .filter(|h| keep.contains(&h.index))
                .cloned()
                .collect(),
            feature_shape: self.feature_shape.clone(),
        };
        let ids = stripped.used_ids();
        let map = stripped.params.retain_ordered(&ids);
        for unit in stripped.units_mut() {
            unit.remap(&map);
        }
        for head in &mut stripped.heads {
            for id in [&mut head.fc.weight, &mut head.fc.bias] {
                *id = map[id.0].expect("retained parameter");
            }
        }
        Ok(stripped)
    }

    fn used_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for unit in self.stem.iter().chain(self.sections.iter().flat_map(|s| &s.units)) {
            unit.param_ids(&mut ids);
        }
        for head in &self.heads {
            for unit in &head.bottleneck {
                unit.param_ids(&mut ids);
            }
            ids.extend([head.fc.weight, head.fc.bias]);
        }
        ids
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut Unit> {
        self.stem
            .iter_mut()
            .chain(self.sections.iter_mut().flat_map(|s| s.units.iter_mut()))
            .chain(self.heads.iter_mut().flat_map(|h| h.bottleneck.iter_mut()))
    }

    fn count_ids(&self, ids: &[ParamId]) -> usize {
        let mut seen = vec![false; self.params.len()];
        ids.iter()
            .filter(|id| !std::mem::replace(&mut seen[id.0], true))
            .map(|&id| self.params.get(id))
            .filter(|p| p.role.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// MACs and trainable parameters on the path input → section i → exit i.
    pub fn exit_costs(&self) -> Vec<ExitCost> {
        let stem_macs: u64 = self.stem.iter().map(Unit::macs).sum();
        self.heads
            .iter()
            .map(|head| {
                let mut macs = stem_macs;
                let mut ids = Vec::new();
                for unit in &self.stem {
                    unit.param_ids(&mut ids);
                }
                for section in &self.sections[..head.index] {
                    for unit in &section.units {
                        macs += unit.macs();
                        unit.param_ids(&mut ids);
                    }
                }
                for unit in &head.bottleneck {
                    macs += unit.macs();
                    unit.param_ids(&mut ids);
                }
                macs += head.fc.macs();
                ids.extend([head.fc.weight, head.fc.bias]);
                ExitCost {
                    exit: head.index,
                    macs,
                    params: self.count_ids(&ids),
                }
            })
            .collect()
    }

    /// MACs of running every layer the model holds on a single input.
    pub fn total_macs(&self) -> u64 {
        self.stem
            .iter()
            .chain(self.sections.iter().flat_map(|s| &s.units))
            .chain(self.heads.iter().flat_map(|h| &h.bottleneck))
            .map(Unit::macs)
            .sum::<u64>()
            + self.heads.iter().map(|h| h.fc.macs()).sum::<u64>()
    }

    /// Conv and fc weights in depth order: stem, sections, then each exit head.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut push = |ids: Vec<ParamId>, section: Option<usize>, exit: Option<usize>| {
            for id in ids {
                out.push(LayerInfo {
                    name: self.params.get(id).name.trim_end_matches(".weight").to_string(),
                    id,
                    section,
                    exit,
                });
            }
        };
        for unit in &self.stem {
            let mut ids = Vec::new();
            unit.layer_weights(&mut ids);
            push(ids, Some(0), None);
        }
        for (si, section) in self.sections.iter().enumerate() {
            let mut ids = Vec::new();
            for unit in &section.units {
                unit.layer_weights(&mut ids);
            }
            push(ids, Some(si + 1), None);
        }
        for head in &self.heads {
            let mut ids = Vec::new();
            for unit in &head.bottleneck {
                unit.layer_weights(&mut ids);
            }
            ids.push(head.fc.weight);
            push(ids, None, Some(head.index));
        }
        out
    }
}

fn build_bottleneck<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    from: &[usize],
    to: &[usize],
) -> Result<Vec<Unit>> {
    let mid = (to[0] / 4).max(1);
    if from.len() == 1 {
        let reduce = Dense::new(store, rng, &format!("{name}.bottleneck.reduce"), from[0], mid);
        let expand = Dense::new(store, rng, &format!("{name}.bottleneck.expand"), mid, to[0]);
        return Ok(vec![
            Unit::Linear {
                dense: reduce,
                relu: true,
            },
            Unit::Linear {
                dense: expand,
                relu: false,
            },
        ]);
    }
    let mut units = Vec::new();
    let mut hw = (from[1], from[2]);
    let conv = Conv::new(store, rng, &format!("{name}.bottleneck.reduce.conv"), from[0], mid, 1, 1, hw);
    let bn = Norm::new(store, &format!("{name}.bottleneck.reduce.bn"), mid);
    units.push(Unit::ConvBn {
        conv,
        bn,
        relu: true,
    });
    let mut step = 0;
    loop {
        let stride = if hw.0 > to[1] || hw.1 > to[2] { 2 } else { 1 };
        let conv = Conv::new(
            store,
            rng,
            &format!("{name}.bottleneck.spatial{step}.conv"),
            mid,
            mid,
            3,
            stride,
            hw,
        );
        let bn = Norm::new(store, &format!("{name}.bottleneck.spatial{step}.bn"), mid);
        hw = conv.out_hw;
        units.push(Unit::ConvBn {
            conv,
            bn,
            relu: true,
        });
        step += 1;
        if stride == 1 || (hw.0 <= to[1] && hw.1 <= to[2]) {
            break;
        }
    }
    if hw != (to[1], to[2]) {
        return Err(Error::Model(format!(
            "{name}: cannot align {:?} features to {:?}",
            from, to
        )));
    }
    let conv = Conv::new(store, rng, &format!("{name}.bottleneck.expand.conv"), mid, to[0], 1, 1, hw);
    let bn = Norm::new(store, &format!("{name}.bottleneck.expand.bn"), to[0]);
    units.push(Unit::ConvBn {
        conv,
        bn,
        relu: false,
    });
    Ok(units)
}

impl ForwardPass {
    pub fn outputs<T: Scalar>(&self, g: &Graph<T>) -> ExitOutputs<T> {
        ExitOutputs {
            logits: self.logits.iter().map(|&v| g.tensor(v)).collect(),
            features: self.features.iter().map(|&v| g.tensor(v)).collect(),
        }
    }

    /// Position of exit `index` within this pass.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.exits.iter().position(|&e| e == index)
    }
}
