//! The ODE block: forward solves `dz/dt = f(z, t, θ)` on `[0, 1]` from the
//! block input; backward differentiates the discrete solver map.
//!
//! Under [`Backprop::Checkpointed`] the forward solve runs without recording
//! and only the block input is kept. The backward rule re-runs the solve on
//! a private recording graph and propagates through the unrolled steps.
//! Batch-norm running statistics are folded in during the first pass only,
//! so recomputation never updates them a second time.

use std::iter;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Backprop, BnObservation, ConvVars, Ctx, NormConv, TensorStore};
use crate::norm::{Mode, NormKind};
use crate::solver::{integrate_with, SolverSpec};
use crate::tensor::Tensor;

/// Largest tolerated gap between the forward output and its recomputation.
const RECOMPUTE_TOLERANCE: f64 = 1e-12;

/// Right-hand side resolved for one forward pass: a conv/norm stack with
/// ReLU between consecutive convolutions.
#[derive(Clone)]
struct Rhs {
    convs: Vec<ConvVars>,
    time_channel: bool,
}

impl Rhs {
    fn eval(&self, g: &Graph, z: &Var, t: f64, mode: Mode, mut obs: Option<&mut Vec<BnObservation>>) -> Result<Var> {
        let mut h = if self.time_channel {
            g.record(crate::autodiff::Op::AppendTimeChannel(t), &[z])?
        } else {
            z.clone()
        };
        let last = self.convs.len() - 1;
        for (i, cv) in self.convs.iter().enumerate() {
            h = cv.apply(g, &h, mode, obs.as_deref_mut())?;
            if i < last {
                h = g.relu(&h)?;
            }
        }
        Ok(h)
    }

    fn vars(&self) -> Vec<&Var> {
        self.convs.iter().flat_map(ConvVars::vars).collect()
    }

    fn rebind(&self, mut next: impl FnMut(&Var) -> Var) -> Rhs {
        Rhs {
            convs: self.convs.iter().map(|c| c.rebind(&mut next)).collect(),
            time_channel: self.time_channel,
        }
    }

    fn solve(
        &self,
        g: &Graph,
        z0: Var,
        spec: SolverSpec,
        mode: Mode,
        mut obs: Option<&mut Vec<BnObservation>>,
    ) -> Result<Var> {
        let (z1, _) = integrate_with(
            g,
            |z: &Var, t| self.eval(g, z, t, mode, obs.as_deref_mut()),
            z0,
            OdeBlock::T0,
            OdeBlock::T1,
            spec,
            false,
        )?;
        Ok(z1)
    }
}

/// Shape-preserving ODE block on `[B, C, H, W]` features.
#[derive(Debug, Clone)]
pub struct OdeBlock {
    convs: Vec<NormConv>,
    channels: usize,
    train_spec: SolverSpec,
    time_channel: bool,
    recomputes: Arc<AtomicUsize>,
}

impl OdeBlock {
    pub const T0: f64 = 0.0;
    pub const T1: f64 = 1.0;

    /// The standard right-hand side: `conv3x3 → norm → ReLU → conv3x3 →
    /// norm`, with the time appended as an extra input channel of the first
    /// convolution when `time_channel` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut TensorStore,
        rng: &mut impl Rng,
        prefix: &str,
        kind: NormKind,
        channels: usize,
        train_spec: SolverSpec,
        time_channel: bool,
    ) -> Result<Self> {
        let in1 = channels + usize::from(time_channel);
        let conv1 = NormConv::register(store, rng, &format!("{prefix}.conv1"), kind, in1, channels, 3, 1, 1, true)?;
        let conv2 = NormConv::register(store, rng, &format!("{prefix}.conv2"), kind, channels, channels, 3, 1, 1, true)?;
        Ok(OdeBlock {
            convs: vec![conv1, conv2],
            channels,
            train_spec,
            time_channel,
            recomputes: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// An autonomous linear block `f(z) = A z` realised as one bias-free 1×1
    /// convolution with weight `a` (`[C, C]`).
    pub fn linear(store: &mut TensorStore, prefix: &str, a: &Tensor, train_spec: SolverSpec) -> Result<Self> {
        let c = a.dim(0);
        if a.shape() != [c, c] {
            return Err(Error::shape("ode_block", format!("linear map must be square, got {:?}", a.shape())));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let conv = NormConv::register(store, &mut rng, &format!("{prefix}.conv"), NormKind::Nf, c, c, 1, 1, 0, false)?;
        store.set(conv.weight_id(), a.reshape([c, c, 1, 1])?)?;
        Ok(OdeBlock {
            convs: vec![conv],
            channels: c,
            train_spec,
            time_channel: false,
            recomputes: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn train_spec(&self) -> SolverSpec {
        self.train_spec
    }

    pub fn time_channel(&self) -> bool {
        self.time_channel
    }

    pub fn convs(&self) -> &[NormConv] {
        &self.convs
    }

    /// Backward recomputations performed so far.
    pub fn recompute_count(&self) -> usize {
        self.recomputes.load(Ordering::Relaxed)
    }

    fn resolve(&self, ctx: &Ctx) -> Result<Rhs> {
        Ok(Rhs {
            convs: self.convs.iter().map(|c| c.resolve(ctx)).collect::<Result<_>>()?,
            time_channel: self.time_channel,
        })
    }

    /// Evaluates `f(z, t)` once, outside any solve.
    pub fn rhs(&self, ctx: &Ctx, z: &Var, t: f64) -> Result<Var> {
        let rhs = self.resolve(ctx)?;
        rhs.eval(ctx.graph, z, t, ctx.mode, None)
    }

    /// Solves the block's IVP from `z0` with the context's solver override,
    /// falling back to the training spec.
    pub fn forward(&self, ctx: &Ctx, z0: &Var) -> Result<Var> {
        let expect = self.channels;
        if z0.shape().len() != 4 || z0.shape()[1] != expect {
            return Err(Error::shape(
                "ode_block",
                format!("input {:?} does not have {expect} channels", z0.shape()),
            ));
        }
        let spec = ctx.solver_override.unwrap_or(self.train_spec);
        let rhs = self.resolve(ctx)?;
        let mut obs = Vec::new();
        let tracked = z0.is_tracked() || rhs.vars().iter().any(|v| v.is_tracked());
        let z1 = if ctx.graph.is_recording() && tracked && ctx.backprop == Backprop::Checkpointed {
            self.checkpointed(ctx, &rhs, z0, spec, &mut obs)?
        } else {
            rhs.solve(ctx.graph, z0.clone(), spec, ctx.mode, Some(&mut obs))?
        };
        ctx.fold_bn(&obs);
        Ok(z1)
    }

    fn checkpointed(
        &self,
        ctx: &Ctx,
        rhs: &Rhs,
        z0: &Var,
        spec: SolverSpec,
        obs: &mut Vec<BnObservation>,
    ) -> Result<Var> {
        let mode = ctx.mode;
        let scratch = Graph::no_grad();
        let frozen = rhs.rebind(|v| scratch.constant(v.value().clone()));
        let z1 = frozen
            .solve(&scratch, scratch.constant(z0.value().clone()), spec, mode, Some(obs))?
            .into_tensor();

        let checkpoint = z0.value().clone();
        let expected = z1.clone();
        let counter = Arc::clone(&self.recomputes);
        let backward = Box::new(move |upstream: &Tensor| -> Result<Vec<Tensor>> {
            counter.fetch_add(1, Ordering::Relaxed);
            let g = Graph::new();
            let z0 = g.leaf(checkpoint.clone());
            let mut leaves = Vec::new();
            let rhs = frozen.rebind(|v| {
                let leaf = g.leaf(v.value().clone());
                leaves.push(leaf.clone());
                leaf
            });
            let z1 = rhs.solve(&g, z0.clone(), spec, mode, None)?;
            let gap = z1.value().max_abs_diff(&expected)?;
            if gap > RECOMPUTE_TOLERANCE {
                return Err(Error::Internal(format!(
                    "ODE block recomputation differs from the forward pass by {gap:e}"
                )));
            }
            let grads = g.backward(&z1, upstream)?;
            Ok(iter::once(grads.wrt(&z0))
                .chain(leaves.iter().map(|l| grads.wrt(l)))
                .collect())
        });
        let inputs: Vec<&Var> = iter::once(z0).chain(rhs.vars()).collect();
        Ok(ctx.graph.custom(&inputs, z1, backward))
    }
}
