//! Neural-ODE numerical kernel.
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`layers`] and [`norm`]: convolution, pooling, fc and the BN/LN/WN/SN/NF
//!   normalizations.
//! * [`solver`]: fixed-step Euler, midpoint and RK4 integrators under an
//!   RHS-evaluation budget.
//! * [`odeblock`]: ODE blocks with checkpointed discretize-then-optimize
//!   gradients.
//! * [`model`] and [`checkpoint`]: ODENet4 / ODENet10 / ResNet10 and their
//!   on-disk format.
//! * [`data`] and [`train`]: CIFAR-10 and two-spirals datasets, SGD with
//!   momentum and a step learning-rate schedule.
//! * [`criterion`]: evaluate a trained model under more powerful solvers and
//!   decide whether its learned dynamics are smooth.

pub mod autodiff;
pub mod checkpoint;
pub mod criterion;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod nn;
pub mod norm;
pub mod odeblock;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Op, Var};
pub use criterion::{CriterionReport, EvalGrid, Verdict};
pub use data::{Dataset, Split};
pub use error::{Error, ErrorKind, Result};
pub use model::{Arch, Model, ModelConfig, NormSchedule};
pub use nn::Backprop;
pub use norm::{Mode, NormKind};
pub use odeblock::OdeBlock;
pub use solver::{Scheme, SolverSpec};
pub use tensor::Tensor;
pub use train::{EpochMetrics, TrainPlan};
