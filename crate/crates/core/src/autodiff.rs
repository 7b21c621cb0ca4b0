//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records primitive [`Op`]s as they execute. Each recorded node
//! keeps its inputs and output alive so [`Graph::backward`] can run the
//! backward rules in reverse topological order. Nodes are appended in
//! execution order, so the tape is acyclic and every node's inputs precede
//! it.
//!
//! A graph built with [`Graph::no_grad`] records nothing: operations still
//! produce values, but intermediates are released as soon as the last
//! [`Var`] handle drops.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layers;
use crate::norm;
use crate::tensor::Tensor;

/// Primitive operations understood by the tape.
#[derive(Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant scalar.
    Scale(f64),
    /// `a + alpha * b`.
    Axpy(f64),
    MatMul,
    Relu,
    /// Sum of all elements, producing shape `[1]`.
    Sum,
    Reshape(Vec<usize>),
    /// Inputs `x, weight[, bias]`.
    Conv2d { stride: usize, padding: usize },
    GlobalAvgPool,
    /// Inputs `x, weight, bias`.
    Linear,
    /// Train-mode batch normalization. Inputs `x, gamma, beta`.
    BatchNorm { eps: f64 },
    /// Normalization by fixed statistics. Inputs `x, gamma, beta`.
    BatchNormEval {
        mean: Rc<Tensor>,
        var: Rc<Tensor>,
        eps: f64,
    },
    /// Per-sample normalization over all non-batch axes. Inputs `x, gamma, beta`.
    LayerNorm { eps: f64 },
    /// Inputs `v, g`; produces `g_c v_c / ‖v_c‖` per output channel.
    WeightNorm,
    /// Input `w`; produces `w / (uᵀ W v)` with `u`, `v` held fixed.
    SpectralScale { u: Rc<Tensor>, v: Rc<Tensor> },
    /// Append one channel filled with the scalar `t` to a `[B,C,H,W]` input.
    AppendTimeChannel(f64),
    /// Mean softmax cross-entropy over the batch of `[B, K]` logits.
    CrossEntropy { labels: Rc<Vec<usize>> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Axpy(_) => "axpy",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool => "global_avgpool",
            Op::Linear => "linear",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::LayerNorm { .. } => "layernorm",
            Op::WeightNorm => "weightnorm",
            Op::SpectralScale { .. } => "spectral_scale",
            Op::AppendTimeChannel(_) => "append_time_channel",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Axpy(_) | Op::MatMul | Op::WeightNorm => n == 2,
            Op::Conv2d { .. } => n == 2 || n == 3,
            Op::Linear | Op::BatchNorm { .. } | Op::BatchNormEval { .. } | Op::LayerNorm { .. } => n == 3,
            _ => n == 1,
        }
    }

    /// Evaluates the operation.
    pub fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if !self.arity_ok(x.len()) {
            return Err(Error::shape(self.name(), format!("wrong number of inputs: {}", x.len())));
        }
        match self {
            Op::Add => x[0].add(x[1]),
            Op::Sub => x[0].sub(x[1]),
            Op::Mul => x[0].mul(x[1]),
            Op::Scale(a) => Ok(x[0].scale(*a)),
            Op::Axpy(a) => x[0].axpy(*a, x[1]),
            Op::MatMul => x[0].matmul(x[1]),
            Op::Relu => Ok(x[0].map(|v| v.max(0.0))),
            Op::Sum => Ok(Tensor::scalar(x[0].sum())),
            Op::Reshape(s) => x[0].reshape(s.clone()),
            Op::Conv2d { stride, padding } => {
                layers::conv2d_forward(x[0], x[1], x.get(2).copied(), *stride, *padding)
            }
            Op::GlobalAvgPool => layers::avgpool_forward(x[0]),
            Op::Linear => layers::linear_forward(x[0], x[1], x[2]),
            Op::BatchNorm { eps } => {
                let (mean, var) = norm::batch_stats(x[0])?;
                norm::channel_normalize(x[0], &mean, &var, *eps, x[1], x[2])
            }
            Op::BatchNormEval { mean, var, eps } => {
                norm::channel_normalize(x[0], mean, var, *eps, x[1], x[2])
            }
            Op::LayerNorm { eps } => norm::layernorm_forward(x[0], x[1], x[2], *eps),
            Op::WeightNorm => norm::weightnorm_forward(x[0], x[1]),
            Op::SpectralScale { u, v } => norm::spectral_scale_forward(x[0], u, v),
            Op::AppendTimeChannel(t) => layers::append_channel(x[0], *t),
            Op::CrossEntropy { labels } => layers::cross_entropy_forward(x[0], labels),
        }
    }

    /// Vector-Jacobian products for each input. Entries whose `needs` flag
    /// is false may be returned as `None`.
    pub fn backward(
        &self,
        x: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let some = |t: Tensor| Some(t);
        Ok(match self {
            Op::Add => vec![some(g.clone()), some(g.clone())],
            Op::Sub => vec![some(g.clone()), some(g.scale(-1.0))],
            Op::Mul => vec![some(g.mul(x[1])?), some(g.mul(x[0])?)],
            Op::Scale(a) => vec![some(g.scale(*a))],
            Op::Axpy(a) => vec![some(g.clone()), some(g.scale(*a))],
            Op::MatMul => {
                let ga = if needs[0] { some(g.matmul(&x[1].transpose2d()?)?) } else { None };
                let gb = if needs[1] { some(x[0].transpose2d()?.matmul(g)?) } else { None };
                vec![ga, gb]
            }
            Op::Relu => vec![some(x[0].zip_map(g, "relu", |v, gv| if v > 0.0 { gv } else { 0.0 })?)],
            Op::Sum => {
                let s = g.item()?;
                vec![some(Tensor::full(x[0].shape().to_vec(), s))]
            }
            Op::Reshape(_) => vec![some(g.reshape(x[0].shape().to_vec())?)],
            Op::Conv2d { stride, padding } => {
                let (gx, gw, gb) = layers::conv2d_backward(
                    x[0],
                    x[1],
                    g,
                    *stride,
                    *padding,
                    needs[0],
                    x.len() == 3 && needs[2],
                )?;
                let mut v = vec![gx, Some(gw)];
                if x.len() == 3 {
                    v.push(gb);
                }
                v
            }
            Op::GlobalAvgPool => vec![some(layers::avgpool_backward(x[0], g)?)],
            Op::Linear => {
                let (gx, gw, gb) = layers::linear_backward(x[0], x[1], g)?;
                vec![some(gx), some(gw), some(gb)]
            }
            Op::BatchNorm { eps } => {
                let (gx, gg, gb) = norm::batchnorm_train_backward(x[0], x[1], g, *eps)?;
                vec![some(gx), some(gg), some(gb)]
            }
            Op::BatchNormEval { mean, var, eps } => {
                let (gx, gg, gb) = norm::batchnorm_eval_backward(x[0], mean, var, x[1], g, *eps)?;
                vec![some(gx), some(gg), some(gb)]
            }
            Op::LayerNorm { eps } => {
                let (gx, gg, gb) = norm::layernorm_backward(x[0], x[1], g, *eps)?;
                vec![some(gx), some(gg), some(gb)]
            }
            Op::WeightNorm => {
                let (gv, gg) = norm::weightnorm_backward(x[0], x[1], g)?;
                vec![some(gv), some(gg)]
            }
            Op::SpectralScale { u, v } => vec![some(norm::spectral_scale_backward(x[0], u, v, g)?)],
            Op::AppendTimeChannel(_) => vec![some(layers::drop_last_channel(g)?)],
            Op::CrossEntropy { labels } => {
                let _ = out;
                vec![some(layers::cross_entropy_backward(x[0], labels, g.item()?)?)]
            }
        })
    }
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Backward rule supplied by code outside the primitive set, such as the
/// checkpointed ODE block. Receives the upstream gradient of the node output
/// and returns one gradient per input, in input order.
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

enum NodeKind {
    Leaf,
    Op {
        op: Op,
        inputs: Vec<Rc<Tensor>>,
        output: Rc<Tensor>,
    },
    Custom(CustomBackward),
}

struct Node {
    kind: NodeKind,
    parents: Vec<Option<usize>>,
}

/// A value flowing through a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    op_count: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            op_count: Cell::new(0),
        }
    }

    /// A graph that evaluates operations without recording them.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of nodes currently held on the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of primitive operations evaluated, recorded or not.
    pub fn ops_evaluated(&self) -> usize {
        self.op_count.get()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A differentiable leaf, e.g. a model parameter.
    pub fn leaf(&self, t: Tensor) -> Var {
        let node = self.recording.then(|| {
            self.push(Node {
                kind: NodeKind::Leaf,
                parents: Vec::new(),
            })
        });
        Var {
            value: Rc::new(t),
            node,
        }
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    /// Evaluates `op` on `inputs` and, when recording and any input is
    /// tracked, appends it to the tape.
    pub fn record(&self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| v.value()).collect();
        let out = op.forward(&values).map_err(|e| match e {
            Error::Shape { op: name, detail } if name != op.name() => Error::Shape {
                op: op.name(),
                detail: format!("{name}: {detail}"),
            },
            other => other,
        })?;
        self.op_count.set(self.op_count.get() + 1);
        let out = Rc::new(out);
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.recording && parents.iter().any(Option::is_some) {
            Some(self.push(Node {
                kind: NodeKind::Op {
                    op,
                    inputs: inputs.iter().map(|v| Rc::clone(&v.value)).collect(),
                    output: Rc::clone(&out),
                },
                parents,
            }))
        } else {
            None
        };
        Ok(Var { value: out, node })
    }

    /// Inserts a value computed elsewhere whose gradient rule is `backward`.
    pub fn custom(&self, inputs: &[&Var], output: Tensor, backward: CustomBackward) -> Var {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = (self.recording && parents.iter().any(Option::is_some)).then(|| {
            self.push(Node {
                kind: NodeKind::Custom(backward),
                parents,
            })
        });
        Var {
            value: Rc::new(output),
            node,
        }
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `output`) back through the tape. Gradients from fan-out are summed.
    /// Replaying on the same graph yields identical results; the tape is not
    /// consumed.
    pub fn backward(&self, output: &Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != output.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), output.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty graph".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root) = output.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(seed.clone());
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = match &node.kind {
                NodeKind::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                NodeKind::Op { op, inputs, output } => {
                    let xs: Vec<&Tensor> = inputs.iter().map(|r| r.as_ref()).collect();
                    op.backward(&xs, output, &g, &needs)?
                }
                NodeKind::Custom(f) => f(&g)?.into_iter().map(Some).collect(),
            };
            if input_grads.len() != node.parents.len() {
                return Err(Error::Internal(format!(
                    "node {i} produced {} gradients for {} inputs",
                    input_grads.len(),
                    node.parents.len()
                )));
            }
            for (parent, pg) in node.parents.iter().zip(input_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // Convenience wrappers.

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&self, a: &Var, alpha: f64) -> Result<Var> {
        self.record(Op::Scale(alpha), &[a])
    }

    pub fn axpy(&self, y: &Var, alpha: f64, x: &Var) -> Result<Var> {
        self.record(Op::Axpy(alpha), &[y, x])
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn sum(&self, a: &Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn reshape(&self, a: &Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.record(Op::Reshape(shape.into()), &[a])
    }
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `leaf`; zeros if the output does not depend
    /// on it.
    pub fn wrt(&self, leaf: &Var) -> Tensor {
        leaf.node
            .and_then(|i| self.grads.get(i).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros_like(leaf.value()))
    }
}
