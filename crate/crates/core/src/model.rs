//! ODENet4, ODENet10 and ResNet10 classifiers with a per-slot normalization
//! schedule.
//!
//! | arch     | layout                                                              |
//! |----------|---------------------------------------------------------------------|
//! | ODENet4  | conv → norm → ReLU → ODE(C) → avgpool → fc                           |
//! | ODENet10 | conv → norm → ReLU → Res(C→2C, /2) → ODE(2C) → Res(2C→4C, /2) → ODE(4C) → avgpool → fc |
//! | ResNet10 | conv → norm → ReLU → Res(C→2C, /2) → Res(2C) → Res(2C→4C, /2) → Res(4C) → avgpool → fc |

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, LinearParams};
use crate::nn::{Backprop, Ctx, NormConv, StateUpdates, TensorId, TensorStore};
use crate::norm::{Mode, NormKind};
use crate::odeblock::OdeBlock;
use crate::rng::{substream, Stream};
use crate::solver::{Scheme, SolverSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    OdeNet4,
    OdeNet10,
    ResNet10,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::OdeNet4 => "ODENet4",
            Arch::OdeNet10 => "ODENet10",
            Arch::ResNet10 => "ResNet10",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "odenet4" => Ok(Arch::OdeNet4),
            "odenet10" => Ok(Arch::OdeNet10),
            "resnet10" => Ok(Arch::ResNet10),
            _ => Err(Error::Invalid(format!(
                "unknown architecture `{s}` (expected ODENet4, ODENet10 or ResNet10)"
            ))),
        }
    }
}

/// Normalization kind for each architectural slot. All ResNet blocks share
/// one kind, as do all ODE blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormSchedule {
    pub after_first_conv: NormKind,
    pub resnet_blocks: NormKind,
    pub ode_blocks: NormKind,
}

impl NormSchedule {
    pub fn uniform(kind: NormKind) -> Self {
        NormSchedule {
            after_first_conv: kind,
            resnet_blocks: kind,
            ode_blocks: kind,
        }
    }
}

/// `first-resnet-ode`, e.g. `BN-BN-LN`.
impl fmt::Display for NormSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.after_first_conv, self.resnet_blocks, self.ode_blocks)
    }
}

impl FromStr for NormSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').map(str::trim).collect();
        match parts.as_slice() {
            [a, b, c] => Ok(NormSchedule {
                after_first_conv: a.parse()?,
                resnet_blocks: b.parse()?,
                ode_blocks: c.parse()?,
            }),
            _ => Err(Error::Invalid(format!("schedule `{s}` is not FIRST-RESNET-ODE"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub schedule: NormSchedule,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub train_spec: SolverSpec,
    /// Append the time as an input channel of the ODE right-hand side.
    pub time_channel: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, schedule: NormSchedule) -> Self {
        ModelConfig {
            arch,
            schedule,
            base_channels: 16,
            in_channels: 3,
            num_classes: 10,
            train_spec: SolverSpec::new(Scheme::Euler, 8).expect("valid default spec"),
            time_channel: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Invalid("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// `conv3x3 → norm → ReLU → conv3x3 → norm`, plus a 1×1 projection
/// shortcut when the shape changes, then ReLU after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: NormConv,
    conv2: NormConv,
    shortcut: Option<NormConv>,
}

impl ResBlock {
    fn register(
        store: &mut TensorStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        kind: NormKind,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = NormConv::register(store, rng, &format!("{prefix}.conv1"), kind, in_ch, out_ch, 3, stride, 1, true)?;
        let conv2 = NormConv::register(store, rng, &format!("{prefix}.conv2"), kind, out_ch, out_ch, 3, 1, 1, true)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(NormConv::register(store, rng, &format!("{prefix}.shortcut"), kind, in_ch, out_ch, 1, stride, 0, true)?)
        } else {
            None
        };
        Ok(ResBlock { conv1, conv2, shortcut })
    }

    fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let g = ctx.graph;
        let h = g.relu(&self.conv1.forward(ctx, x)?)?;
        let h = self.conv2.forward(ctx, &h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        g.relu(&g.add(&h, &skip)?)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// First convolution with its normalization slot.
    Stem(NormConv),
    Relu,
    Res(ResBlock),
    Ode(OdeBlock),
    AvgPool,
    Fc { weight: TensorId, bias: TensorId },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Stem(_) => "conv",
            Layer::Relu => "relu",
            Layer::Res(_) => "resnet_block",
            Layer::Ode(_) => "ode_block",
            Layer::AvgPool => "avgpool",
            Layer::Fc { .. } => "fc",
        }
    }
}

/// Result of one differentiated forward pass.
pub struct LossAndGrads {
    pub loss: f64,
    pub logits: Tensor,
    /// One gradient per trainable tensor, in registry order.
    pub grads: Vec<(TensorId, Tensor)>,
    pub updates: StateUpdates,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: TensorStore,
    layers: Vec<Layer>,
    mode: Mode,
    backprop: Backprop,
}

impl Model {
    /// Builds and seeds a model from `config`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init);
        let mut store = TensorStore::new();
        let c = config.base_channels;
        let s = config.schedule;
        let spec = config.train_spec;
        let tc = config.time_channel;
        let mut layers = vec![
            Layer::Stem(NormConv::register(
                &mut store,
                &mut rng,
                "stem",
                s.after_first_conv,
                config.in_channels,
                c,
                3,
                1,
                1,
                true,
            )?),
            Layer::Relu,
        ];
        let width = match config.arch {
            Arch::OdeNet4 => {
                layers.push(Layer::Ode(OdeBlock::register(&mut store, &mut rng, "ode1", s.ode_blocks, c, spec, tc)?));
                c
            }
            Arch::OdeNet10 => {
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res1", s.resnet_blocks, c, 2 * c, 2)?));
                layers.push(Layer::Ode(OdeBlock::register(&mut store, &mut rng, "ode1", s.ode_blocks, 2 * c, spec, tc)?));
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res2", s.resnet_blocks, 2 * c, 4 * c, 2)?));
                layers.push(Layer::Ode(OdeBlock::register(&mut store, &mut rng, "ode2", s.ode_blocks, 4 * c, spec, tc)?));
                4 * c
            }
            Arch::ResNet10 => {
                let k = s.resnet_blocks;
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res1", k, c, 2 * c, 2)?));
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res2", k, 2 * c, 2 * c, 1)?));
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res3", k, 2 * c, 4 * c, 2)?));
                layers.push(Layer::Res(ResBlock::register(&mut store, &mut rng, "res4", k, 4 * c, 4 * c, 1)?));
                4 * c
            }
        };
        layers.push(Layer::AvgPool);
        let fc = LinearParams::init(&mut rng, width, config.num_classes);
        layers.push(Layer::Fc {
            weight: store.param("fc.weight", fc.weight),
            bias: store.param("fc.bias", Tensor::zeros([config.num_classes])),
        });
        Ok(Model {
            config,
            store,
            layers,
            mode: Mode::Train,
            backprop: Backprop::Checkpointed,
        })
    }

    /// A model assembled from explicit parts; used for hand-built fixtures.
    pub fn from_parts(config: ModelConfig, store: TensorStore, layers: Vec<Layer>) -> Self {
        Model {
            config,
            store,
            layers,
            mode: Mode::Train,
            backprop: Backprop::Checkpointed,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TensorStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn backprop(&self) -> Backprop {
        self.backprop
    }

    pub fn set_backprop(&mut self, b: Backprop) {
        self.backprop = b;
    }

    pub fn train_spec(&self) -> SolverSpec {
        self.config.train_spec
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn ode_blocks(&self) -> impl Iterator<Item = &OdeBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Ode(b) => Some(b),
            _ => None,
        })
    }

    fn make_ctx<'a>(&'a self, g: &'a Graph, mode: Mode, override_spec: Option<SolverSpec>) -> Ctx<'a> {
        let mut ctx = Ctx::new(g, &self.store, mode);
        ctx.backprop = self.backprop;
        ctx.solver_override = override_spec;
        ctx
    }

    /// Runs the layer stack in `ctx`, checking every activation for
    /// non-finite values.
    pub fn forward_ctx(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let g = ctx.graph;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Stem(c) => c.forward(ctx, &h)?,
                Layer::Relu => g.relu(&h)?,
                Layer::Res(r) => r.forward(ctx, &h)?,
                Layer::Ode(b) => b.forward(ctx, &h)?,
                Layer::AvgPool => layers::global_avgpool(g, &h)?,
                Layer::Fc { weight, bias } => layers::linear(g, &h, ctx.var(*weight), ctx.var(*bias))?,
            };
            if !h.value().is_finite() {
                return Err(Error::NonFinite(format!(
                    "activation after layer {i} ({}) is not finite",
                    layer.name()
                )));
            }
        }
        Ok(h)
    }

    /// Shapes of every layer output for an input of shape `input`.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let g = Graph::no_grad();
        let mut ctx = self.make_ctx(&g, Mode::Eval, None);
        ctx.update_state = false;
        let mut h = g.constant(Tensor::zeros(input.to_vec()));
        let mut out = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Stem(c) => c.forward(&ctx, &h)?,
                Layer::Relu => g.relu(&h)?,
                Layer::Res(r) => r.forward(&ctx, &h)?,
                Layer::Ode(b) => b.forward(&ctx, &h)?,
                Layer::AvgPool => layers::global_avgpool(&g, &h)?,
                Layer::Fc { weight, bias } => layers::linear(&g, &h, ctx.var(*weight), ctx.var(*bias))?,
            };
            out.push(h.shape().to_vec());
        }
        Ok(out)
    }

    /// Logits for `x`. Eval mode is read-only; train mode commits BN/SN
    /// buffer updates. `override_spec` replaces every ODE block's solver for
    /// this call only.
    pub fn forward(&mut self, x: &Tensor, override_spec: Option<SolverSpec>) -> Result<Tensor> {
        match self.mode {
            Mode::Eval => self.predict(x, override_spec),
            Mode::Train => {
                let g = Graph::no_grad();
                let ctx = self.make_ctx(&g, Mode::Train, override_spec);
                let logits = self.forward_ctx(&ctx, &g.constant(x.clone()))?.into_tensor();
                let updates = ctx.into_updates();
                updates.apply(&mut self.store)?;
                Ok(logits)
            }
        }
    }

    /// Eval-mode logits without recording or mutating anything.
    pub fn predict(&self, x: &Tensor, override_spec: Option<SolverSpec>) -> Result<Tensor> {
        let g = Graph::no_grad();
        let ctx = self.make_ctx(&g, Mode::Eval, override_spec);
        Ok(self.forward_ctx(&ctx, &g.constant(x.clone()))?.into_tensor())
    }

    /// Mean cross-entropy and its gradient for every trainable tensor, in
    /// the model's current mode. Buffer updates are returned, not applied.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<LossAndGrads> {
        let g = Graph::new();
        let ctx = self.make_ctx(&g, self.mode, None);
        let logits = self.forward_ctx(&ctx, &g.constant(x.clone()))?;
        let loss = layers::cross_entropy(&g, &logits, labels)?;
        let lv = loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss is {lv}")));
        }
        let grads = g.backward(&loss, &Tensor::scalar(1.0))?;
        let grads = self
            .store
            .trainable_ids()
            .map(|id| (id, grads.wrt(ctx.var(id))))
            .collect();
        let logits = logits.value().clone();
        Ok(LossAndGrads {
            loss: lv,
            logits,
            grads,
            updates: ctx.into_updates(),
        })
    }

    /// Mean cross-entropy only, with no recording and no state change.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let g = Graph::no_grad();
        let mut ctx = self.make_ctx(&g, self.mode, None);
        ctx.update_state = false;
        let logits = self.forward_ctx(&ctx, &g.constant(x.clone()))?;
        layers::cross_entropy(&g, &logits, labels)?.value().item()
    }

    pub fn apply_updates(&mut self, updates: StateUpdates) -> Result<()> {
        updates.apply(&mut self.store)
    }

    /// FNV-1a over names, shapes and value bits of every stored tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for id in self.store.ids() {
            eat(self.store.name(id).as_bytes());
            let t = self.store.get(id);
            for d in t.shape() {
                eat(&d.to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
