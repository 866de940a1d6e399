//! U-Net, U-Net++ and U-Net 3+ builders and their forward evaluation.
//!
//! A [`Network`] is a flat forward plan over [`PlanNode`]s plus a parameter
//! table. Builders only append nodes whose inputs already exist, so walking
//! the plan front to back is a valid evaluation order.
//!
//! Feature maps of interest are registered under stable names so topology can
//! be inspected: `en{i}` / `de{i}` (1-based scale) for U-Net 3+, and `x{i}_{j}`
//! (0-based row `i`, column `j`) for U-Net and U-Net++.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Real, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Unet,
    Unetpp,
    Unet3p,
}

impl ArchKind {
    pub fn code(self) -> u8 {
        match self {
            ArchKind::Unet => 0,
            ArchKind::Unetpp => 1,
            ArchKind::Unet3p => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ArchKind::Unet),
            1 => Some(ArchKind::Unetpp),
            2 => Some(ArchKind::Unet3p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Number of encoder scales.
    pub num_scales: usize,
    pub base_channels: usize,
    /// Width of each full-scale branch in U-Net 3+; `None` means `base_channels`.
    pub per_path_channels: Option<usize>,
    pub input_channels: usize,
    pub deep_supervision: bool,
    pub input_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::Unet3p,
            num_scales: 5,
            base_channels: 8,
            per_path_channels: None,
            input_channels: 1,
            deep_supervision: true,
            input_size: 64,
        }
    }
}

impl ArchConfig {
    pub fn new(kind: ArchKind, num_scales: usize, input_size: usize) -> Self {
        Self {
            kind,
            num_scales,
            input_size,
            deep_supervision: kind == ArchKind::Unet3p,
            ..Self::default()
        }
    }

    pub fn path_channels(&self) -> usize {
        self.per_path_channels.unwrap_or(self.base_channels)
    }

    /// Channels of encoder scale `i` (1-based).
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Spatial size of scale `i` (1-based).
    pub fn scale_size(&self, i: usize) -> usize {
        self.input_size >> (i - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 2 {
            return Err(Error::Build(format!(
                "need at least 2 scales, got {}",
                self.num_scales
            )));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.path_channels() == 0 {
            return Err(Error::Build("channel counts must be positive".into()));
        }
        let stride = 1usize << (self.num_scales - 1);
        if self.input_size < stride || self.input_size % stride != 0 {
            return Err(Error::Build(format!(
                "input size {} not divisible by 2^{} = {stride}",
                self.input_size,
                self.num_scales - 1
            )));
        }
        if self.deep_supervision && self.kind != ArchKind::Unet3p {
            return Err(Error::Usage(
                "deep supervision heads attach to U-Net 3+ only".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Batch-norm layer: indices of its affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer<T: Real = f32> {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Input,
    Conv {
        input: NodeId,
        weight: usize,
        bias: usize,
        padding: usize,
    },
    Norm {
        input: NodeId,
        norm: usize,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        window: usize,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Sigmoid {
        input: NodeId,
    },
}

impl Layer {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Layer::Input => vec![],
            Layer::Conv { input, .. }
            | Layer::Norm { input, .. }
            | Layer::Relu { input }
            | Layer::MaxPool { input, .. }
            | Layer::Upsample { input, .. }
            | Layer::Sigmoid { input } => vec![*input],
            Layer::Concat { inputs } => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub name: String,
    pub layer: Layer,
    pub channels: usize,
    pub size: usize,
}

/// A side-output head of U-Net 3+ deep supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideHead {
    /// Decoder scale the head reads (1-based).
    pub scale: usize,
    /// Node holding the 1-channel map before upsampling.
    pub pre_upsample: NodeId,
    pub factor: usize,
    pub output: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    config: ArchConfig,
    params: Vec<Param<T>>,
    norms: Vec<NormLayer<T>>,
    plan: Vec<PlanNode>,
    features: BTreeMap<String, NodeId>,
    final_output: NodeId,
    side_heads: Vec<SideHead>,
}

/// Probability maps at input resolution, `[batch, 1, H, W]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Real = f32> {
    pub final_map: Tensor<T>,
    /// Ordered from decoder scale 2 up to scale N; empty without deep supervision.
    pub side_outputs: Vec<Tensor<T>>,
}

/// Tape handles produced by [`Network::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeOutputs<T: Real = f32> {
    pub final_map: Var,
    pub side_maps: Vec<Var>,
    /// One leaf per parameter, in parameter-table order.
    pub params: Vec<Var>,
    /// Batch mean and biased variance per norm layer (train mode only).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Builder<T: Real> {
    config: ArchConfig,
    params: Vec<Param<T>>,
    norms: Vec<NormLayer<T>>,
    plan: Vec<PlanNode>,
    features: BTreeMap<String, NodeId>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn new(config: &ArchConfig, seed: u64) -> Self {
        let mut b = Self {
            config: config.clone(),
            params: Vec::new(),
            norms: Vec::new(),
            plan: Vec::new(),
            features: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.node("input", Layer::Input, config.input_channels, config.input_size);
        b
    }

    fn node(&mut self, name: &str, layer: Layer, channels: usize, size: usize) -> NodeId {
        debug_assert!(layer.inputs().iter().all(|&i| i < self.plan.len()));
        self.plan.push(PlanNode {
            name: name.to_string(),
            layer,
            channels,
            size,
        });
        self.plan.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        (self.plan[id].channels, self.plan[id].size)
    }

    fn param(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    /// Fan-in scaled uniform initialization: weights in `±sqrt(6 / fan_in)`,
    /// biases in `±1 / sqrt(fan_in)`.
    fn conv(&mut self, name: &str, input: NodeId, out_ch: usize, kernel: usize) -> NodeId {
        let (in_ch, size) = self.shape_of(input);
        let fan_in = (in_ch * kernel * kernel) as f64;
        let wb = (6.0 / fan_in).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
            T::of(rng.random_range(-wb..wb))
        });
        let b = Tensor::from_fn(&[out_ch], |_| T::of(rng.random_range(-bb..bb)));
        let weight = self.param(format!("{name}.weight"), ParamKind::ConvWeight, w);
        let bias = self.param(format!("{name}.bias"), ParamKind::ConvBias, b);
        self.node(
            name,
            Layer::Conv {
                input,
                weight,
                bias,
                padding: kernel / 2,
            },
            out_ch,
            size,
        )
    }

    /// Convolution 3x3, batch normalization, ReLU.
    fn cbr(&mut self, name: &str, input: NodeId, out_ch: usize) -> NodeId {
        let conv = self.conv(&format!("{name}.conv"), input, out_ch, 3);
        let size = self.plan[conv].size;
        let gamma = self.param(
            format!("{name}.bn.gamma"),
            ParamKind::NormScale,
            Tensor::full(&[out_ch], T::one()),
        );
        let beta = self.param(
            format!("{name}.bn.beta"),
            ParamKind::NormShift,
            Tensor::zeros(&[out_ch]),
        );
        self.norms.push(NormLayer {
            name: format!("{name}.bn"),
            gamma,
            beta,
            running_mean: vec![T::zero(); out_ch],
            running_var: vec![T::one(); out_ch],
        });
        let norm = self.norms.len() - 1;
        let bn = self.node(&format!("{name}.bn"), Layer::Norm { input: conv, norm }, out_ch, size);
        self.node(&format!("{name}.relu"), Layer::Relu { input: bn }, out_ch, size)
    }

    /// Two stacked conv-bn-relu blocks.
    fn double(&mut self, name: &str, input: NodeId, out_ch: usize) -> NodeId {
        let a = self.cbr(&format!("{name}.block1"), input, out_ch);
        self.cbr(&format!("{name}.block2"), a, out_ch)
    }

    fn pool(&mut self, name: &str, input: NodeId, window: usize) -> NodeId {
        let (c, s) = self.shape_of(input);
        self.node(name, Layer::MaxPool { input, window }, c, s / window)
    }

    fn up(&mut self, name: &str, input: NodeId, factor: usize) -> NodeId {
        let (c, s) = self.shape_of(input);
        self.node(name, Layer::Upsample { input, factor }, c, s * factor)
    }

    fn concat(&mut self, name: &str, inputs: Vec<NodeId>) -> NodeId {
        let c = inputs.iter().map(|&i| self.plan[i].channels).sum();
        let s = self.plan[inputs[0]].size;
        debug_assert!(inputs.iter().all(|&i| self.plan[i].size == s));
        self.node(name, Layer::Concat { inputs }, c, s)
    }

    fn sigmoid(&mut self, name: &str, input: NodeId) -> NodeId {
        let (c, s) = self.shape_of(input);
        self.node(name, Layer::Sigmoid { input }, c, s)
    }

    fn feature(&mut self, name: impl Into<String>, id: NodeId) {
        self.features.insert(name.into(), id);
    }

    fn finish(self, final_output: NodeId, side_heads: Vec<SideHead>) -> Network<T> {
        Network {
            config: self.config,
            params: self.params,
            norms: self.norms,
            plan: self.plan,
            features: self.features,
            final_output,
            side_heads,
        }
    }
}

/// Encoder stage outputs for scales `1..=N`.
fn build_encoder<T: Real>(b: &mut Builder<T>) -> Vec<NodeId> {
    let n = b.config.num_scales;
    let mut stages = Vec::with_capacity(n);
    let mut x = 0;
    for i in 1..=n {
        if i > 1 {
            x = b.pool(&format!("enc{i}.pool"), x, 2);
        }
        x = b.double(&format!("enc{i}"), x, b.config.encoder_channels(i));
        b.feature(format!("en{i}"), x);
        b.feature(format!("x{}_0", i - 1), x);
        stages.push(x);
    }
    stages
}

/// Output head reading `input`: convolution to one channel then sigmoid.
fn plain_head<T: Real>(b: &mut Builder<T>, input: NodeId, kernel: usize) -> NodeId {
    let conv = b.conv("head.final.conv", input, 1, kernel);
    b.sigmoid("head.final.sigmoid", conv)
}

fn build_unet<T: Real>(b: &mut Builder<T>) -> (NodeId, Vec<SideHead>) {
    let enc = build_encoder(b);
    let n = b.config.num_scales;
    let mut below = enc[n - 1];
    for j in 1..n {
        let i = n - 1 - j;
        let up = b.up(&format!("dec{i}_{j}.up"), below, 2);
        let cat = b.concat(&format!("dec{i}_{j}.cat"), vec![enc[i], up]);
        below = b.double(&format!("dec{i}_{j}"), cat, b.config.encoder_channels(i + 1));
        b.feature(format!("x{i}_{j}"), below);
    }
    (plain_head(b, below, 1), vec![])
}

fn build_unetpp<T: Real>(b: &mut Builder<T>) -> (NodeId, Vec<SideHead>) {
    let enc = build_encoder(b);
    let n = b.config.num_scales;
    // grid[i][j] = X^{i,j}; row i holds n - 1 - i decoder nodes
    let mut grid: Vec<Vec<NodeId>> = enc.iter().map(|&e| vec![e]).collect();
    for j in 1..n {
        for i in 0..n - j {
            let up = b.up(&format!("dec{i}_{j}.up"), grid[i + 1][j - 1], 2);
            let mut inputs: Vec<NodeId> = grid[i][..j].to_vec();
            inputs.push(up);
            let cat = b.concat(&format!("dec{i}_{j}.cat"), inputs);
            let x = b.double(&format!("dec{i}_{j}"), cat, b.config.encoder_channels(i + 1));
            b.feature(format!("x{i}_{j}"), x);
            grid[i].push(x);
        }
    }
    (plain_head(b, grid[0][n - 1], 1), vec![])
}

fn build_unet3p<T: Real>(b: &mut Builder<T>) -> (NodeId, Vec<SideHead>) {
    let enc = build_encoder(b);
    let n = b.config.num_scales;
    let c = b.config.path_channels();
    // de[i - 1] = X_De^i
    let mut de: Vec<NodeId> = vec![0; n];
    de[n - 1] = enc[n - 1];
    b.feature(format!("de{n}"), enc[n - 1]);
    for i in (1..n).rev() {
        let mut branches = Vec::with_capacity(n);
        for k in 1..i {
            let window = 1 << (i - k);
            let p = b.pool(&format!("de{i}.from_en{k}.pool"), enc[k - 1], window);
            branches.push(b.cbr(&format!("de{i}.from_en{k}"), p, c));
        }
        branches.push(b.cbr(&format!("de{i}.from_en{i}"), enc[i - 1], c));
        for k in i + 1..=n {
            let u = b.up(&format!("de{i}.from_de{k}.up"), de[k - 1], 1 << (k - i));
            branches.push(b.cbr(&format!("de{i}.from_de{k}"), u, c));
        }
        let cat = b.concat(&format!("de{i}.cat"), branches);
        de[i - 1] = b.cbr(&format!("de{i}.fuse"), cat, n * c);
        b.feature(format!("de{i}"), de[i - 1]);
    }
    let final_output = plain_head(b, de[0], 3);
    let sides = if b.config.deep_supervision {
        attach_deep_supervision(b, &de)
    } else {
        vec![]
    };
    (final_output, sides)
}

/// Heads for decoder scales `2..=N`: 3x3 convolution to one channel,
/// upsampling by `2^(i-1)`, sigmoid.
fn attach_deep_supervision<T: Real>(b: &mut Builder<T>, de: &[NodeId]) -> Vec<SideHead> {
    (2..=de.len())
        .map(|i| {
            let conv = b.conv(&format!("head.side{i}.conv"), de[i - 1], 1, 3);
            let factor = 1 << (i - 1);
            let up = b.up(&format!("head.side{i}.up"), conv, factor);
            let output = b.sigmoid(&format!("head.side{i}.sigmoid"), up);
            SideHead {
                scale: i,
                pre_upsample: conv,
                factor,
                output,
            }
        })
        .collect()
}

impl<T: Real> Network<T> {
    /// Build the architecture selected by `config.kind`, initializing
    /// parameters from `seed`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(config, seed);
        let (final_output, sides) = match config.kind {
            ArchKind::Unet => build_unet(&mut b),
            ArchKind::Unetpp => build_unetpp(&mut b),
            ArchKind::Unet3p => build_unet3p(&mut b),
        };
        Ok(b.finish(final_output, sides))
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormLayer<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer<T>] {
        &mut self.norms
    }

    pub fn plan(&self) -> &[PlanNode] {
        &self.plan
    }

    pub fn side_heads(&self) -> &[SideHead] {
        &self.side_heads
    }

    pub fn final_output(&self) -> NodeId {
        self.final_output
    }

    /// Registered feature map by name (`en3`, `de2`, `x0_2`, ...).
    pub fn feature(&self, name: &str) -> Option<&PlanNode> {
        self.features.get(name).map(|&i| &self.plan[i])
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn node_named(&self, name: &str) -> Option<&PlanNode> {
        self.plan.iter().find(|n| n.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Conversion to another element type, e.g. 64-bit for gradient checks.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormLayer {
                    name: n.name.clone(),
                    gamma: n.gamma,
                    beta: n.beta,
                    running_mean: cv(&n.running_mean),
                    running_var: cv(&n.running_var),
                })
                .collect(),
            plan: self.plan.clone(),
            features: self.features.clone(),
            final_output: self.final_output,
            side_heads: self.side_heads.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            [_, c, h, w] if *c == self.config.input_channels && *h == s && *w == s => Ok(()),
            _ => Err(Error::dim(
                "forward",
                format!(
                    "input shape {shape:?}, network expects [B, {}, {s}, {s}]",
                    self.config.input_channels
                ),
            )),
        }
    }

    /// Evaluate the plan on `tape`. Parameters become leaves that require
    /// gradients iff `param_grad`.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape<T>,
        input: Var,
        mode: Mode,
        param_grad: bool,
    ) -> Result<TapeOutputs<T>> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), param_grad))
            .collect();
        self.forward_with_params(tape, input, mode, params)
    }

    /// Like [`Network::forward_on_tape`] with caller-supplied parameter
    /// leaves, one per parameter in table order.
    pub fn forward_with_params(
        &self,
        tape: &mut GradTape<T>,
        input: Var,
        mode: Mode,
        params: Vec<Var>,
    ) -> Result<TapeOutputs<T>> {
        self.check_input(tape.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::dim(
                "forward",
                format!("{} parameter leaves for {} parameters", params.len(), self.params.len()),
            ));
        }
        for (v, p) in params.iter().zip(&self.params) {
            if tape.value(*v).shape() != p.value.shape() {
                return Err(Error::dim(
                    "forward",
                    format!("leaf for {} has shape {:?}", p.name, tape.value(*v).shape()),
                ));
            }
        }
        let mut vars: Vec<Var> = Vec::with_capacity(self.plan.len());
        let mut batch_stats = Vec::new();
        for node in &self.plan {
            let v = match &node.layer {
                Layer::Input => input,
                Layer::Conv {
                    input,
                    weight,
                    bias,
                    padding,
                } => tape.conv2d(
                    vars[*input],
                    params[*weight],
                    Some(params[*bias]),
                    1,
                    *padding,
                )?,
                Layer::Norm { input, norm } => {
                    let layer = &self.norms[*norm];
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((&layer.running_mean[..], &layer.running_var[..])),
                    };
                    let (v, stats) = tape.batch_norm(
                        vars[*input],
                        params[layer.gamma],
                        params[layer.beta],
                        running,
                        BN_EPSILON,
                    )?;
                    batch_stats.extend(stats);
                    v
                }
                Layer::Relu { input } => tape.relu(vars[*input])?,
                Layer::MaxPool { input, window } => {
                    tape.max_pool2d(vars[*input], *window, *window)?
                }
                Layer::Upsample { input, factor } => {
                    tape.upsample_bilinear(vars[*input], *factor)?
                }
                Layer::Concat { inputs } => {
                    let xs: Vec<Var> = inputs.iter().map(|&i| vars[i]).collect();
                    tape.concat_channels(&xs)?
                }
                Layer::Sigmoid { input } => tape.sigmoid(vars[*input])?,
            };
            vars.push(v);
        }
        Ok(TapeOutputs {
            final_map: vars[self.final_output],
            side_maps: self.side_heads.iter().map(|h| vars[h.output]).collect(),
            params,
            batch_stats,
        })
    }

    /// Eval-mode forward pass; a pure function of the batch and parameters.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut tape = GradTape::new();
        let x = tape.leaf(batch.clone(), false);
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval, false)?;
        Ok(ForwardOutput {
            final_map: tape.value(out.final_map).clone(),
            side_outputs: out
                .side_maps
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
        })
    }

    /// Fold train-mode batch statistics into the running estimates
    /// (exponential moving average, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)], batch: usize) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let counts: Vec<usize> = (0..self.norms.len())
            .map(|k| batch * self.norm_spatial(k))
            .collect();
        for ((layer, (mean, var)), count) in self.norms.iter_mut().zip(stats).zip(counts) {
            let unbias = if count > 1 {
                T::of(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            for (r, &b) in layer.running_mean.iter_mut().zip(mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in layer.running_var.iter_mut().zip(var) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }

    /// Spatial element count seen by norm layer `k` per batch item.
    fn norm_spatial(&self, k: usize) -> usize {
        self.plan
            .iter()
            .find(|n| matches!(n.layer, Layer::Norm { norm, .. } if norm == k))
            .map(|n| n.size * n.size)
            .unwrap_or(1)
    }
}
