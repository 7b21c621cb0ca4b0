//! Fixed-step explicit integrators driven by a right-hand-side evaluation
//! budget.
//!
//! A [`SolverSpec`] names a scheme and the number of RHS evaluations it may
//! spend; the step count follows from the scheme's evaluations per step.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Euler,
    /// Explicit midpoint rule.
    Rk2,
    /// Classical fourth-order Runge–Kutta.
    Rk4,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Rk2, Scheme::Rk4];

    pub fn evals_per_step(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Rk2 => 2,
            Scheme::Rk4 => 4,
        }
    }

    pub fn order(self) -> usize {
        self.evals_per_step()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Euler => "Euler",
            Scheme::Rk2 => "RK2",
            Scheme::Rk4 => "RK4",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "rk2" | "midpoint" => Ok(Scheme::Rk2),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::Invalid(format!("unknown scheme `{other}` (expected Euler, RK2 or RK4)"))),
        }
    }
}

/// Steps a scheme can take within `n_evals` RHS evaluations.
pub fn steps_for_budget(scheme: Scheme, n_evals: usize) -> Result<usize> {
    let per = scheme.evals_per_step();
    if n_evals < per {
        return Err(Error::Budget(format!(
            "({scheme}, {n_evals}) cannot complete one step ({per} evaluations per step)"
        )));
    }
    if n_evals % per != 0 {
        return Err(Error::Budget(format!(
            "({scheme}, {n_evals}): budget is not a multiple of {per} evaluations per step"
        )));
    }
    Ok(n_evals / per)
}

/// A scheme together with its RHS-evaluation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SolverSpec {
    scheme: Scheme,
    n_evals: usize,
}

impl SolverSpec {
    pub fn new(scheme: Scheme, n_evals: usize) -> Result<Self> {
        steps_for_budget(scheme, n_evals)?;
        Ok(SolverSpec { scheme, n_evals })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn n_evals(&self) -> usize {
        self.n_evals
    }

    pub fn n_steps(&self) -> usize {
        self.n_evals / self.scheme.evals_per_step()
    }
}

impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.scheme, self.n_evals)
    }
}

/// Parses `Euler:8`, `Euler,8` or `(Euler, 8)`.
impl FromStr for SolverSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (scheme, n) = inner
            .split_once([':', ','])
            .ok_or_else(|| Error::Invalid(format!("solver `{s}` is not of the form SCHEME:N")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("solver `{s}`: budget is not a positive integer")))?;
        SolverSpec::new(scheme.parse()?, n)
    }
}

/// Step-boundary states of one integration.
#[derive(Debug, Clone)]
pub struct Trajectory<S = Tensor> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

/// Linear-combination primitive the integrators need from a state type.
pub trait StateOps<S> {
    /// `y + alpha * x`.
    fn axpy(&self, y: &S, alpha: f64, x: &S) -> Result<S>;
    fn is_finite(&self, s: &S) -> bool;
}

/// Plain tensor arithmetic.
#[derive(Debug, Clone, Copy, Default)]
pub struct TensorOps;

impl StateOps<Tensor> for TensorOps {
    fn axpy(&self, y: &Tensor, alpha: f64, x: &Tensor) -> Result<Tensor> {
        y.axpy(alpha, x)
    }

    fn is_finite(&self, s: &Tensor) -> bool {
        s.is_finite()
    }
}

/// Arithmetic recorded on a graph, so the solve can be differentiated.
impl StateOps<Var> for Graph {
    fn axpy(&self, y: &Var, alpha: f64, x: &Var) -> Result<Var> {
        Graph::axpy(self, y, alpha, x)
    }

    fn is_finite(&self, s: &Var) -> bool {
        s.value().is_finite()
    }
}

/// Integrates `dz/dt = rhs(z, t)` over `[t0, t1]` with uniform steps,
/// calling `rhs` exactly `spec.n_evals()` times.
pub fn integrate_with<S, O, F>(
    ops: &O,
    mut rhs: F,
    z0: S,
    t0: f64,
    t1: f64,
    spec: SolverSpec,
    keep_trajectory: bool,
) -> Result<(S, Option<Trajectory<S>>)>
where
    S: Clone,
    O: StateOps<S>,
    F: FnMut(&S, f64) -> Result<S>,
{
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("integration interval [{t0}, {t1}] is empty")));
    }
    let n = spec.n_steps();
    let h = (t1 - t0) / n as f64;
    let mut traj = keep_trajectory.then(|| Trajectory {
        times: vec![t0],
        states: vec![z0.clone()],
    });
    let mut z = z0;
    for step in 0..n {
        let t = t0 + step as f64 * h;
        z = match spec.scheme() {
            Scheme::Euler => {
                let k1 = rhs(&z, t)?;
                ops.axpy(&z, h, &k1)?
            }
            Scheme::Rk2 => {
                let k1 = rhs(&z, t)?;
                let mid = ops.axpy(&z, 0.5 * h, &k1)?;
                let k2 = rhs(&mid, t + 0.5 * h)?;
                ops.axpy(&z, h, &k2)?
            }
            Scheme::Rk4 => {
                let k1 = rhs(&z, t)?;
                let k2 = rhs(&ops.axpy(&z, 0.5 * h, &k1)?, t + 0.5 * h)?;
                let k3 = rhs(&ops.axpy(&z, 0.5 * h, &k2)?, t + 0.5 * h)?;
                let k4 = rhs(&ops.axpy(&z, h, &k3)?, t + h)?;
                let acc = ops.axpy(&z, h / 6.0, &k1)?;
                let acc = ops.axpy(&acc, h / 3.0, &k2)?;
                let acc = ops.axpy(&acc, h / 3.0, &k3)?;
                ops.axpy(&acc, h / 6.0, &k4)?
            }
        };
        if !ops.is_finite(&z) {
            return Err(Error::NonFinite(format!(
                "{spec} solve produced a non-finite state at step {step} (t = {})",
                t + h
            )));
        }
        if let Some(tr) = traj.as_mut() {
            tr.times.push(if step + 1 == n { t1 } else { t0 + (step + 1) as f64 * h });
            tr.states.push(z.clone());
        }
    }
    Ok((z, traj))
}

/// Tensor-valued integration returning the final state and the trajectory.
pub fn integrate<F>(rhs: F, z0: &Tensor, t0: f64, t1: f64, spec: SolverSpec) -> Result<(Tensor, Trajectory)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let (z1, traj) = integrate_with(&TensorOps, rhs, z0.clone(), t0, t1, spec, true)?;
    Ok((z1, traj.expect("trajectory requested")))
}
