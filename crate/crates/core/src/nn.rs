//! Parameter storage, the forward context, and the conv + normalization slot
//! shared by plain layers, ResNet blocks and ODE right-hand sides.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Conv2dParams};
use crate::norm::{self, Mode, NormKind, SpectralNormState};
use crate::solver::SolverSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors in registration order: trainable parameters and
/// non-trainable buffers (running statistics, power-iteration vectors).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl TensorStore {
    pub fn new() -> Self {
        TensorStore::default()
    }

    fn push(&mut self, name: String, t: Tensor, trainable: bool) -> TensorId {
        debug_assert!(!self.names.contains(&name), "duplicate tensor name {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        TensorId(self.tensors.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> TensorId {
        self.push(name.into(), t, true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, t: Tensor) -> TensorId {
        self.push(name.into(), t, false)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: TensorId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: TensorId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.tensors.len()).map(TensorId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.names.iter().position(|n| n == name).map(TensorId)
    }

    /// Total element count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: TensorId, t: Tensor) -> Result<()> {
        let cur = &mut self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(Error::shape(
                "tensor_store",
                format!("{}: {:?} vs {:?}", self.names[id.0], cur.shape(), t.shape()),
            ));
        }
        *cur = t;
        Ok(())
    }
}

/// How gradients flow through ODE blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backprop {
    /// Keep only the block input; recompute the unrolled solve in backward.
    #[default]
    Checkpointed,
    /// Record every solver step on the outer graph.
    FullGraph,
}

/// Per-call forward state: the graph, parameter handles, mode, and pending
/// buffer updates that the owner commits afterwards.
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    store: &'a TensorStore,
    vars: Vec<Var>,
    pub mode: Mode,
    /// Whether train-mode buffer updates (BN running stats, SN vectors) are
    /// collected.
    pub update_state: bool,
    pub backprop: Backprop,
    pub solver_override: Option<SolverSpec>,
    shadow: RefCell<BTreeMap<TensorId, Tensor>>,
}

impl<'a> Ctx<'a> {
    /// Trainable tensors become leaves of `graph` (untracked when it is not
    /// recording); buffers are read as constants.
    pub fn new(graph: &'a Graph, store: &'a TensorStore, mode: Mode) -> Self {
        let vars = store
            .ids()
            .map(|id| {
                let t = store.get(id).clone();
                if store.is_trainable(id) {
                    graph.leaf(t)
                } else {
                    graph.constant(t)
                }
            })
            .collect();
        Ctx {
            graph,
            store,
            vars,
            mode,
            update_state: mode == Mode::Train,
            backprop: Backprop::default(),
            solver_override: None,
            shadow: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn var(&self, id: TensorId) -> &Var {
        &self.vars[id.0]
    }

    pub fn store(&self) -> &TensorStore {
        self.store
    }

    /// Current value of a buffer, including updates made during this call.
    pub fn buffer(&self, id: TensorId) -> Tensor {
        self.shadow
            .borrow()
            .get(&id)
            .cloned()
            .unwrap_or_else(|| self.store.get(id).clone())
    }

    pub fn set_buffer(&self, id: TensorId, t: Tensor) {
        if self.update_state {
            self.shadow.borrow_mut().insert(id, t);
        }
    }

    pub(crate) fn fold_bn(&self, obs: &[BnObservation]) {
        for o in obs {
            let mut st = norm::BatchNormState {
                running_mean: self.buffer(o.mean_id),
                running_var: self.buffer(o.var_id),
                momentum: o.momentum,
                eps: norm::BN_EPS,
            };
            st.update(&o.mean, &o.var, o.count);
            self.set_buffer(o.mean_id, st.running_mean);
            self.set_buffer(o.var_id, st.running_var);
        }
    }

    /// Buffer updates gathered during the call, keyed by id.
    pub fn into_updates(self) -> StateUpdates {
        StateUpdates(self.shadow.into_inner())
    }
}

/// New buffer values produced by a train-mode forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateUpdates(BTreeMap<TensorId, Tensor>);

impl StateUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(self, store: &mut TensorStore) -> Result<()> {
        for (id, t) in self.0 {
            store.set(id, t)?;
        }
        Ok(())
    }
}

/// Batch statistics seen by one train-mode BN call.
#[derive(Debug, Clone)]
pub(crate) struct BnObservation {
    mean_id: TensorId,
    var_id: TensorId,
    mean: Tensor,
    var: Tensor,
    count: usize,
    momentum: f64,
}

/// Resolved normalization for one forward pass.
#[derive(Clone)]
pub(crate) enum NormVars {
    Identity,
    Batch {
        gamma: Var,
        beta: Var,
        eps: f64,
        momentum: f64,
        ids: (TensorId, TensorId),
        /// Running statistics, used in eval mode.
        running: (Tensor, Tensor),
    },
    Layer {
        gamma: Var,
        beta: Var,
        eps: f64,
    },
}

/// A convolution with its weight already normalized (WN/SN) and its
/// activation normalization (BN/LN) resolved, ready to be applied any number
/// of times within one forward pass.
#[derive(Clone)]
pub(crate) struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub norm: NormVars,
}

impl ConvVars {
    pub fn apply(&self, g: &Graph, x: &Var, mode: Mode, obs: Option<&mut Vec<BnObservation>>) -> Result<Var> {
        let y = layers::conv2d(g, x, &self.weight, self.bias.as_ref(), self.stride, self.padding)?;
        match &self.norm {
            NormVars::Identity => Ok(y),
            NormVars::Layer { gamma, beta, eps } => norm::layernorm(g, &y, gamma, beta, *eps),
            NormVars::Batch {
                gamma,
                beta,
                eps,
                momentum,
                ids,
                running,
            } => match mode {
                Mode::Train => {
                    let b = y.shape()[0];
                    if b < 2 {
                        return Err(Error::Invalid(format!(
                            "batchnorm: train mode needs a batch of at least 2, got {b}"
                        )));
                    }
                    if let Some(obs) = obs {
                        let (mean, var) = norm::batch_stats(y.value())?;
                        obs.push(BnObservation {
                            mean_id: ids.0,
                            var_id: ids.1,
                            count: y.value().numel() / mean.numel(),
                            mean,
                            var,
                            momentum: *momentum,
                        });
                    }
                    g.record(Op::BatchNorm { eps: *eps }, &[&y, gamma, beta])
                }
                Mode::Eval => g.record(
                    Op::BatchNormEval {
                        mean: std::rc::Rc::new(running.0.clone()),
                        var: std::rc::Rc::new(running.1.clone()),
                        eps: *eps,
                    },
                    &[&y, gamma, beta],
                ),
            },
        }
    }

    /// Graph values this slot depends on, in a fixed order.
    pub fn vars(&self) -> Vec<&Var> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        match &self.norm {
            NormVars::Identity => {}
            NormVars::Batch { gamma, beta, .. } | NormVars::Layer { gamma, beta, .. } => {
                v.push(gamma);
                v.push(beta);
            }
        }
        v
    }

    /// Same slot with every graph value replaced, in [`ConvVars::vars`] order.
    pub fn rebind(&self, next: &mut impl FnMut(&Var) -> Var) -> ConvVars {
        let weight = next(&self.weight);
        let bias = self.bias.as_ref().map(&mut *next);
        let norm = match &self.norm {
            NormVars::Identity => NormVars::Identity,
            NormVars::Batch {
                gamma,
                beta,
                eps,
                momentum,
                ids,
                running,
            } => NormVars::Batch {
                gamma: next(gamma),
                beta: next(beta),
                eps: *eps,
                momentum: *momentum,
                ids: *ids,
                running: running.clone(),
            },
            NormVars::Layer { gamma, beta, eps } => NormVars::Layer {
                gamma: next(gamma),
                beta: next(beta),
                eps: *eps,
            },
        };
        ConvVars {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            norm,
        }
    }
}

#[derive(Debug, Clone)]
enum WeightForm {
    Plain(TensorId),
    Weight { v: TensorId, g: TensorId },
    Spectral { w: TensorId, u: TensorId },
}

#[derive(Debug, Clone)]
enum ActNorm {
    Identity,
    Batch { gamma: TensorId, beta: TensorId, mean: TensorId, var: TensorId },
    Layer { gamma: TensorId, beta: TensorId },
}

/// Convolution followed by one normalization slot of kind [`NormKind`].
#[derive(Debug, Clone)]
pub struct NormConv {
    kind: NormKind,
    weight: WeightForm,
    bias: Option<TensorId>,
    act: ActNorm,
    stride: usize,
    padding: usize,
}

impl NormConv {
    /// Registers the slot's tensors under `prefix`. Weights follow the
    /// uniform fan-in init; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut TensorStore,
        rng: &mut impl Rng,
        prefix: &str,
        kind: NormKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let p = Conv2dParams::init(rng, in_ch, out_ch, kernel, stride, padding, false);
        let weight = match kind {
            NormKind::Wn => {
                let wn = norm::WeightNormParams::from_weight(&p.weight)?;
                WeightForm::Weight {
                    v: store.param(format!("{prefix}.weight_v"), wn.v),
                    g: store.param(format!("{prefix}.weight_g"), wn.g),
                }
            }
            NormKind::Sn => WeightForm::Spectral {
                w: store.param(format!("{prefix}.weight"), p.weight),
                u: store.buffer(format!("{prefix}.sn_u"), SpectralNormState::new(out_ch).u),
            },
            _ => WeightForm::Plain(store.param(format!("{prefix}.weight"), p.weight)),
        };
        let bias = bias.then(|| store.param(format!("{prefix}.bias"), Tensor::zeros([out_ch])));
        let act = match kind {
            NormKind::Bn => ActNorm::Batch {
                gamma: store.param(format!("{prefix}.bn.gamma"), Tensor::ones([out_ch])),
                beta: store.param(format!("{prefix}.bn.beta"), Tensor::zeros([out_ch])),
                mean: store.buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros([out_ch])),
                var: store.buffer(format!("{prefix}.bn.running_var"), Tensor::ones([out_ch])),
            },
            NormKind::Ln => ActNorm::Layer {
                gamma: store.param(format!("{prefix}.ln.gamma"), Tensor::ones([out_ch])),
                beta: store.param(format!("{prefix}.ln.beta"), Tensor::zeros([out_ch])),
            },
            _ => ActNorm::Identity,
        };
        Ok(NormConv {
            kind,
            weight,
            bias,
            act,
            stride,
            padding,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    /// The weight tensor (or WN direction) id.
    pub fn weight_id(&self) -> TensorId {
        match self.weight {
            WeightForm::Plain(w) | WeightForm::Spectral { w, .. } => w,
            WeightForm::Weight { v, .. } => v,
        }
    }

    pub fn bias_id(&self) -> Option<TensorId> {
        self.bias
    }

    /// Resolves the slot for one forward pass. SN performs its power
    /// iteration here, once per call, in train mode.
    pub(crate) fn resolve(&self, ctx: &Ctx) -> Result<ConvVars> {
        let g = ctx.graph;
        let weight = match &self.weight {
            WeightForm::Plain(w) => ctx.var(*w).clone(),
            WeightForm::Weight { v, g: scale } => norm::weightnorm(g, ctx.var(*v), ctx.var(*scale))?,
            WeightForm::Spectral { w, u } => {
                let wv = ctx.var(*w);
                let mut st = SpectralNormState::new(wv.shape()[0]);
                st.u = ctx.buffer(*u);
                let y = norm::spectral_normalize(g, wv, &mut st, ctx.mode)?;
                if ctx.mode == Mode::Train {
                    ctx.set_buffer(*u, st.u);
                }
                y
            }
        };
        let norm = match &self.act {
            ActNorm::Identity => NormVars::Identity,
            ActNorm::Batch { gamma, beta, mean, var } => NormVars::Batch {
                gamma: ctx.var(*gamma).clone(),
                beta: ctx.var(*beta).clone(),
                eps: norm::BN_EPS,
                momentum: norm::BN_MOMENTUM,
                ids: (*mean, *var),
                running: (ctx.buffer(*mean), ctx.buffer(*var)),
            },
            ActNorm::Layer { gamma, beta } => NormVars::Layer {
                gamma: ctx.var(*gamma).clone(),
                beta: ctx.var(*beta).clone(),
                eps: norm::LN_EPS,
            },
        };
        Ok(ConvVars {
            weight,
            bias: self.bias.map(|b| ctx.var(b).clone()),
            stride: self.stride,
            padding: self.padding,
            norm,
        })
    }

    /// Resolve and apply once, committing any BN statistics to `ctx`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let cv = self.resolve(ctx)?;
        let mut obs = Vec::new();
        let y = cv.apply(ctx.graph, x, ctx.mode, Some(&mut obs))?;
        ctx.fold_bn(&obs);
        Ok(y)
    }
}
