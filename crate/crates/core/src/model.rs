//! Shared encoder-decoder backbone, per-task attention towers, prediction
//! heads, and the Split / Dense / STAN baseline wirings.
//!
//! Every backbone block is two `conv3x3 + BN + ReLU` stacks. The first
//! stack's output is the block's `u` tap, the second's is `p`. An attention
//! module computes a mask from `u` (plus the previous module's output,
//! resampled through its own `conv3x3 + BN + ReLU` extractor `f`) via two
//! `conv1x1 + BN` layers `g` and `h`, and gates `p` with it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::kernels::{self, BatchStats};
use crate::tensor::{Gradients, Result, Tape, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("channel widths must not be empty")]
    EmptyWidths,
    #[error("every channel width must be at least 1, got {0:?}")]
    ZeroWidth(Vec<usize>),
    #[error("input channels must be at least 1")]
    NoInputChannels,
    #[error("at least one task is required")]
    NoTasks,
    #[error("the stan variant runs exactly one task, got {0}")]
    StanTaskCount(usize),
    #[error("invalid task: {0}")]
    Task(#[from] TensorError),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("flat parameter vector has {got} values, model has {expected}")]
    FlatLength { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Mtan,
    Split,
    Dense,
    Stan,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mtan => "mtan",
            Variant::Split => "split",
            Variant::Dense => "dense",
            Variant::Stan => "stan",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mtan" => Ok(Variant::Mtan),
            "split" => Ok(Variant::Split),
            "dense" => Ok(Variant::Dense),
            "stan" => Ok(Variant::Stan),
            other => Err(format!("unknown variant {other:?} (expected mtan, split, dense or stan)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder channel widths; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub input_channels: usize,
    pub tasks: Vec<TaskSpec>,
}

impl ModelConfig {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        if self.widths.is_empty() {
            return Err(ModelError::EmptyWidths);
        }
        if self.widths.contains(&0) {
            return Err(ModelError::ZeroWidth(self.widths.clone()));
        }
        if self.input_channels == 0 {
            return Err(ModelError::NoInputChannels);
        }
        if self.tasks.is_empty() {
            return Err(ModelError::NoTasks);
        }
        if self.variant == Variant::Stan && self.tasks.len() != 1 {
            return Err(ModelError::StanTaskCount(self.tasks.len()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Tower(usize),
    Head(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    group: Group,
    value: Tensor,
}

/// Named learnable tensors in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn add(&mut self, name: String, group: Group, value: Tensor) -> ParamId {
        let id = self.params.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// `(name, group, value)` in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Group, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), p.group, &p.value))
    }

    /// Mutable values in creation order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.index.get(name).map(|&i| self.params[i].group)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_index(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> std::result::Result<(), ModelError> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_owned()))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_owned(),
                expected: p.value.dims().to_vec(),
                got: value.dims().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// All values concatenated in creation order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> std::result::Result<(), ModelError> {
        if flat.len() != self.numel() {
            return Err(ModelError::FlatLength {
                expected: self.numel(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPosition {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub position: BlockPosition,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
    stats: BnId,
}

#[derive(Clone, Debug)]
pub struct BackboneBlock {
    pub spec: BlockSpec,
    /// Resolution level: activations are `H / 2^level` wide.
    pub level: usize,
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
pub struct SharedBackbone {
    pub blocks: Vec<BackboneBlock>,
}

/// Resolution change applied by a tower's feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Pool,
    Upsample,
    Identity,
}

#[derive(Clone, Debug)]
struct Extractor {
    layer: ConvBn,
    resample: Resample,
}

/// Soft-attention module for one task at one backbone block.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    g: ConvBn,
    h: ConvBn,
    /// Absent for the first module, which sees only shared features.
    f: Option<Extractor>,
}

/// Dense-baseline tower layer: shared features (plus the previous layer's
/// output) pass through a 3x3 stack with no mask.
#[derive(Clone, Debug)]
pub struct DenseModule {
    merge: ConvBn,
    f: Option<Extractor>,
}

#[derive(Clone, Debug)]
pub enum Tower {
    Attention(Vec<AttentionModule>),
    Dense(Vec<DenseModule>),
}

impl Tower {
    pub fn len(&self) -> usize {
        match self {
            Tower::Attention(m) => m.len(),
            Tower::Dense(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct Head {
    conv: Conv,
    kind: TaskKind,
}

#[derive(Clone, Debug)]
pub struct MtanModel {
    config: ModelConfig,
    params: ParamStore,
    bn: Vec<BnStats>,
    backbone: SharedBackbone,
    towers: Vec<Tower>,
    heads: Vec<Head>,
}

/// Parameter counts by group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub backbone: usize,
    pub towers: Vec<usize>,
    pub heads: Vec<usize>,
    pub total: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Builder {
    seed: u64,
    params: ParamStore,
    bn: Vec<BnStats>,
}

impl Builder {
    /// Weights draw from `U(-sqrt(6/fan_in), sqrt(6/fan_in))` with a stream
    /// keyed by the parameter name, so identically named parameters start
    /// identical across variants and task counts.
    fn conv(&mut self, name: &str, group: Group, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let wname = format!("{name}.weight");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(wname.as_bytes()));
        let w = Tensor::uniform(vec![cout, cin, k, k], -bound, bound, &mut rng).expect("valid conv dims");
        let weight = self.params.add(wname, group, w);
        let bias = self.params.add(format!("{name}.bias"), group, Tensor::zeros(vec![cout]).expect("valid dims"));
        Conv {
            weight,
            bias,
            padding: k / 2,
        }
    }

    fn conv_bn(&mut self, name: &str, group: Group, cin: usize, cout: usize, k: usize) -> ConvBn {
        let conv = self.conv(name, group, cin, cout, k);
        let gamma = self.params.add(format!("{name}.gamma"), group, Tensor::full(vec![cout], 1.0).expect("dims"));
        let beta = self.params.add(format!("{name}.beta"), group, Tensor::zeros(vec![cout]).expect("dims"));
        self.bn.push(BnStats {
            name: name.to_owned(),
            mean: vec![0.0; cout],
            var: vec![1.0; cout],
        });
        ConvBn {
            conv,
            gamma,
            beta,
            stats: BnId(self.bn.len() - 1),
        }
    }

    fn extractor(&mut self, name: &str, group: Group, from: &BackboneBlock, to: &BackboneBlock) -> Extractor {
        let resample = match from.level.cmp(&to.level) {
            std::cmp::Ordering::Less => Resample::Pool,
            std::cmp::Ordering::Greater => Resample::Upsample,
            std::cmp::Ordering::Equal => Resample::Identity,
        };
        Extractor {
            layer: self.conv_bn(name, group, from.spec.out_channels, to.spec.out_channels, 3),
            resample,
        }
    }
}

/// Build a model with deterministic parameters derived from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> std::result::Result<MtanModel, ModelError> {
    config.validate()?;
    let mut b = Builder {
        seed,
        params: ParamStore::default(),
        bn: Vec::new(),
    };

    let depth = config.widths.len();
    let mut blocks = Vec::with_capacity(2 * depth);
    let mut in_ch = config.input_channels;
    for (j, &w) in config.widths.iter().enumerate() {
        let name = format!("backbone.enc{j}");
        blocks.push(BackboneBlock {
            spec: BlockSpec {
                in_channels: in_ch,
                out_channels: w,
                position: BlockPosition::Encoder,
            },
            level: j,
            first: b.conv_bn(&format!("{name}.conv1"), Group::Backbone, in_ch, w, 3),
            second: b.conv_bn(&format!("{name}.conv2"), Group::Backbone, w, w, 3),
        });
        in_ch = w;
    }
    for j in 0..depth {
        let w = config.widths[depth - 1 - j];
        let name = format!("backbone.dec{j}");
        blocks.push(BackboneBlock {
            spec: BlockSpec {
                in_channels: in_ch,
                out_channels: w,
                position: BlockPosition::Decoder,
            },
            level: depth - 1 - j,
            first: b.conv_bn(&format!("{name}.conv1"), Group::Backbone, in_ch, w, 3),
            second: b.conv_bn(&format!("{name}.conv2"), Group::Backbone, w, w, 3),
        });
        in_ch = w;
    }

    let mut towers = Vec::new();
    for k in 0..config.num_tasks() {
        let group = Group::Tower(k);
        match config.variant {
            Variant::Mtan | Variant::Stan => {
                let modules = blocks
                    .iter()
                    .enumerate()
                    .map(|(j, block)| {
                        let name = format!("task{k}.block{j}");
                        let c = block.spec.out_channels;
                        let f = (j > 0).then(|| b.extractor(&format!("{name}.f"), group, &blocks[j - 1], block));
                        let g_in = if j == 0 { c } else { 2 * c };
                        AttentionModule {
                            g: b.conv_bn(&format!("{name}.g"), group, g_in, c, 1),
                            h: b.conv_bn(&format!("{name}.h"), group, c, c, 1),
                            f,
                        }
                    })
                    .collect();
                towers.push(Tower::Attention(modules));
            }
            Variant::Dense => {
                let modules = blocks
                    .iter()
                    .enumerate()
                    .map(|(j, block)| {
                        let name = format!("task{k}.block{j}");
                        let c = block.spec.out_channels;
                        let f = (j > 0).then(|| b.extractor(&format!("{name}.f"), group, &blocks[j - 1], block));
                        let merge_in = if j == 0 { c } else { 2 * c };
                        DenseModule {
                            merge: b.conv_bn(&format!("{name}.merge"), group, merge_in, c, 3),
                            f,
                        }
                    })
                    .collect();
                towers.push(Tower::Dense(modules));
            }
            Variant::Split => {}
        }
    }

    let final_width = config.widths[0];
    let heads = config
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let conv = b.conv(&format!("task{k}.head"), Group::Head(k), final_width, t.out_channels(), 1);
            if t.kind == TaskKind::Normals {
                // A pixel whose features are all zero predicts the bias, so
                // start it at the unit camera-facing normal rather than 0.
                b.params.value_mut(conv.bias).data_mut().copy_from_slice(&[0.0, 0.0, 1.0]);
            }
            Head { conv, kind: t.kind }
        })
        .collect();

    Ok(MtanModel {
        config: config.clone(),
        params: b.params,
        bn: b.bn,
        backbone: SharedBackbone { blocks },
        towers,
        heads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked.
    Train,
    /// Running statistics, parameters recorded as constants.
    Eval,
}

/// Output of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub mask: Var,
    pub attended: Var,
    /// Features handed to the next module; the attended features themselves.
    pub carried: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockTaps {
    pub u: Var,
    pub p: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One prediction per task: log-probabilities, depth, or unit normals.
    pub predictions: Vec<Var>,
    pub taps: Vec<BlockTaps>,
    /// Per task, per block; empty for variants without attention.
    pub attention: Vec<Vec<AttentionOutput>>,
}

/// One forward pass of a model on its own tape.
pub struct Session<'m> {
    model: &'m MtanModel,
    tape: Tape,
    vars: Vec<Var>,
    mode: Mode,
    bn_updates: Vec<(BnId, BatchStats)>,
}

impl MtanModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.bn
    }

    pub fn backbone(&self) -> &SharedBackbone {
        &self.backbone
    }

    pub fn towers(&self) -> &[Tower] {
        &self.towers
    }

    pub fn session(&self, mode: Mode) -> Session<'_> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => tape.param(p.value.clone()),
                Mode::Eval => tape.constant(p.value.clone()),
            })
            .collect();
        Session {
            model: self,
            tape,
            vars,
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(BnId, BatchStats)]) {
        for (id, stats) in updates {
            let s = &mut self.bn[id.0];
            kernels::update_running_stats(&mut s.mean, &mut s.var, stats, BN_MOMENTUM);
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let k = self.config.num_tasks();
        let mut count = ParamCount {
            backbone: 0,
            towers: vec![0; k],
            heads: vec![0; k],
            total: 0,
        };
        for (_, group, value) in self.params.iter() {
            let n = value.numel();
            match group {
                Group::Backbone => count.backbone += n,
                Group::Tower(t) => count.towers[t] += n,
                Group::Head(t) => count.heads[t] += n,
            }
            count.total += n;
        }
        count
    }

    /// Overwrite every `h` layer so its pre-sigmoid output is exactly `logit`
    /// everywhere (zero weights, zero BN scale, BN shift `logit`).
    pub fn force_mask_logits(&mut self, logit: f64) {
        let layers: Vec<ConvBn> = self
            .towers
            .iter()
            .flat_map(|t| match t {
                Tower::Attention(m) => m.iter().map(|a| a.h.clone()).collect(),
                Tower::Dense(_) => Vec::new(),
            })
            .collect();
        for h in layers {
            self.params.value_mut(h.conv.weight).data_mut().fill(0.0);
            self.params.value_mut(h.conv.bias).data_mut().fill(0.0);
            self.params.value_mut(h.gamma).data_mut().fill(0.0);
            self.params.value_mut(h.beta).data_mut().fill(logit);
        }
    }

    /// Copy every parameter and BN statistic whose name and shape match one
    /// in `other`. Returns how many parameters were copied.
    pub fn copy_matching_from(&mut self, other: &MtanModel) -> usize {
        let mut copied = 0;
        for p in &mut self.params.params {
            if let Some(src) = other.params.get(&p.name) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        for s in &mut self.bn {
            if let Some(src) = other.bn.iter().find(|o| o.name == s.name && o.mean.len() == s.mean.len()) {
                s.mean = src.mean.clone();
                s.var = src.var.clone();
            }
        }
        copied
    }
}

impl<'m> Session<'m> {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn model(&self) -> &'m MtanModel {
        self.model
    }

    /// Tape handle of a named parameter.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.model.params.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradient per parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }

    pub fn flat_param_grads(&self, grads: &Gradients) -> Vec<f64> {
        self.vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect()
    }

    /// Batch statistics gathered by training-mode BN layers so far.
    pub fn bn_updates(&self) -> &[(BnId, BatchStats)] {
        &self.bn_updates
    }

    pub fn into_bn_updates(self) -> Vec<(BnId, BatchStats)> {
        self.bn_updates
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn conv(&mut self, conv: &Conv, x: Var) -> Result<Var> {
        let (w, b) = (self.var(conv.weight), self.var(conv.bias));
        self.tape.conv2d(x, w, b, 1, conv.padding)
    }

    fn conv_bn(&mut self, layer: &ConvBn, x: Var) -> Result<Var> {
        let y = self.conv(&layer.conv, x)?;
        let (gamma, beta) = (self.var(layer.gamma), self.var(layer.beta));
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.tape.batch_norm_train(y, gamma, beta, BN_EPS)?;
                self.bn_updates.push((layer.stats, stats));
                Ok(out)
            }
            Mode::Eval => {
                let s = &self.model.bn[layer.stats.0];
                self.tape.batch_norm_eval(y, gamma, beta, &s.mean, &s.var, BN_EPS)
            }
        }
    }

    fn conv_bn_relu(&mut self, layer: &ConvBn, x: Var) -> Result<Var> {
        let y = self.conv_bn(layer, x)?;
        Ok(self.tape.relu(y))
    }

    /// 3x3 feature extractor followed by its resampling step.
    fn extract(&mut self, f: &Extractor, x: Var) -> Result<Var> {
        let y = self.conv_bn_relu(&f.layer, x)?;
        match f.resample {
            Resample::Pool => self.tape.max_pool2(y),
            Resample::Upsample => self.tape.upsample_nearest2(y),
            Resample::Identity => Ok(y),
        }
    }

    fn check_aligned(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.tape.shape(a), self.tape.shape(b));
        let (ba, _, ha, wa) = sa.dims4(op)?;
        let (bb, _, hb, wb) = sb.dims4(op)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    /// Mask, attended and carried features of one attention module.
    ///
    /// Without `prev` the mask is `sigmoid(h(g(u)))`; with it the mask is
    /// `sigmoid(h(g([u; f(prev)])))`. The attended features are `mask * p`.
    pub fn attention_forward(
        &mut self,
        u: Var,
        p: Var,
        prev: Option<Var>,
        module: &AttentionModule,
    ) -> Result<AttentionOutput> {
        self.check_aligned("attention_forward (u vs p)", u, p)?;
        let input = match (prev, &module.f) {
            (None, None) => u,
            (Some(prev), Some(f)) => {
                let carried = self.extract(f, prev)?;
                self.check_aligned("attention_forward (resampled previous features vs u)", u, carried)?;
                self.tape.concat_channels(u, carried)?
            }
            (None, Some(_)) => {
                return Err(TensorError::invalid(
                    "attention_forward",
                    "module expects features from the previous module",
                ))
            }
            (Some(_), None) => {
                return Err(TensorError::invalid(
                    "attention_forward",
                    "the first module takes only shared features",
                ))
            }
        };
        let g = self.conv_bn_relu(&module.g, input)?;
        let logits = self.conv_bn(&module.h, g)?;
        let mask = self.tape.sigmoid(logits);
        let attended = self.tape.mul(mask, p)?;
        Ok(AttentionOutput {
            mask,
            attended,
            carried: attended,
        })
    }

    fn dense_forward(&mut self, p: Var, prev: Option<Var>, module: &DenseModule) -> Result<Var> {
        let input = match (prev, &module.f) {
            (Some(prev), Some(f)) => {
                let carried = self.extract(f, prev)?;
                self.check_aligned("dense_forward", p, carried)?;
                self.tape.concat_channels(p, carried)?
            }
            (None, None) => p,
            _ => return Err(TensorError::invalid("dense_forward", "tower wiring out of order")),
        };
        self.conv_bn_relu(&module.merge, input)
    }

    fn head(&mut self, head: &Head, x: Var) -> Result<Var> {
        let y = self.conv(&head.conv, x)?;
        match head.kind {
            TaskKind::Segmentation { .. } => self.tape.log_softmax_channels(y),
            TaskKind::Depth => Ok(y),
            TaskKind::Normals => self.tape.normalize_channels(y),
        }
    }

    /// Full forward pass over a `[B, Cin, H, W]` batch.
    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        let model = self.model;
        let config = &model.config;
        let (_, c, h, w) = x.shape().dims4("model_forward")?;
        if c != config.input_channels {
            return Err(TensorError::invalid(
                "model_forward",
                format!("input has {c} channels, model expects {}", config.input_channels),
            ));
        }
        let divisor = config.spatial_divisor();
        if h % divisor != 0 || w % divisor != 0 {
            return Err(TensorError::invalid(
                "model_forward",
                format!("input size {h}x{w} must be divisible by {divisor}"),
            ));
        }

        let mut x = self.tape.constant(x.clone());
        let mut taps = Vec::with_capacity(model.backbone.blocks.len());
        for block in &model.backbone.blocks {
            if block.spec.position == BlockPosition::Decoder {
                x = self.tape.upsample_nearest2(x)?;
            }
            let u = self.conv_bn_relu(&block.first, x)?;
            let p = self.conv_bn_relu(&block.second, u)?;
            taps.push(BlockTaps { u, p });
            x = match block.spec.position {
                BlockPosition::Encoder => self.tape.max_pool2(p)?,
                BlockPosition::Decoder => p,
            };
        }
        let shared = taps.last().expect("at least one block").p;

        let mut predictions = Vec::with_capacity(model.heads.len());
        let mut attention = Vec::new();
        for (k, head) in model.heads.iter().enumerate() {
            let features = match model.towers.get(k) {
                None => shared,
                Some(Tower::Attention(modules)) => {
                    let mut outs = Vec::with_capacity(modules.len());
                    let mut prev = None;
                    for (module, tap) in modules.iter().zip(&taps) {
                        let out = self.attention_forward(tap.u, tap.p, prev, module)?;
                        prev = Some(out.carried);
                        outs.push(out);
                    }
                    attention.push(outs);
                    prev.expect("tower has modules")
                }
                Some(Tower::Dense(modules)) => {
                    let mut prev = None;
                    for (module, tap) in modules.iter().zip(&taps) {
                        prev = Some(self.dense_forward(tap.p, prev, module)?);
                    }
                    prev.expect("tower has modules")
                }
            };
            predictions.push(self.head(head, features)?);
        }
        Ok(ForwardOutput {
            predictions,
            taps,
            attention,
        })
    }
}

/// Attention module `index` of task `task`, if the model has attention towers.
pub fn attention_module(model: &MtanModel, task: usize, index: usize) -> Option<&AttentionModule> {
    match model.towers.get(task)? {
        Tower::Attention(m) => m.get(index),
        Tower::Dense(_) => None,
    }
}

/// Named tensors of an attention module's layers, for reference computations.
#[derive(Clone, Debug)]
pub struct ConvBnWeights {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl AttentionModule {
    fn weights_of(layer: &ConvBn, params: &ParamStore) -> ConvBnWeights {
        ConvBnWeights {
            weight: params.value(layer.conv.weight).clone(),
            bias: params.value(layer.conv.bias).clone(),
            gamma: params.value(layer.gamma).clone(),
            beta: params.value(layer.beta).clone(),
        }
    }

    pub fn g_weights(&self, params: &ParamStore) -> ConvBnWeights {
        Self::weights_of(&self.g, params)
    }

    pub fn h_weights(&self, params: &ParamStore) -> ConvBnWeights {
        Self::weights_of(&self.h, params)
    }

    /// Extractor weights and its resampling step, when present.
    pub fn f_weights(&self, params: &ParamStore) -> Option<(ConvBnWeights, Resample)> {
        self.f.as_ref().map(|f| (Self::weights_of(&f.layer, params), f.resample))
    }
}
