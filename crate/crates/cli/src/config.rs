//! TOML experiment configuration.
//!
//! ```toml
//! [model]
//! arch = "odenet4"          # odenet4 | odenet10 | resnet10
//! base_channels = 16
//! time_channel = true
//!
//! [schedule]                # bn | ln | wn | sn | nf per slot
//! first = "bn"
//! resnet = "bn"
//! ode = "bn"
//!
//! [solver]
//! scheme = "Euler"
//! n_evals = 8
//!
//! [plan]                    # defaults follow the data preset
//! epochs = 200
//! batch_size = 20
//! lr0 = 0.01
//! lr_drops = [150]
//! lr_factor = 0.1
//! momentum = 0.9
//! weight_decay = 0.0
//! augment = false
//! seed = 0
//!
//! [data]
//! kind = "spirals"          # spirals | cifar10 | cifar10-small
//! dir = "data/cifar-10-batches-bin"
//! n_train = 2000
//! n_test = 1000
//! n_per_class = 50
//! n_test_per_class = 100
//! noise = 0.0
//!
//! [criterion]
//! schemes = ["Euler", "RK2", "RK4"]
//! budgets = [16, 32, 64, 128]
//! epsilon = 0.005
//!
//! [sweep]
//! schedules = ["BN-BN-BN", "BN-BN-LN"]   # crossed with `solvers`
//! solvers = ["Euler:8"]
//! # or explicit variants:
//! # variants = [{ name = "ln", schedule = "BN-BN-LN", solver = "Euler:8" }]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use odenorm::criterion::{EvalGrid, DEFAULT_EPSILON};
use odenorm::data::CIFAR_CLASSES;
use odenorm::{Arch, ModelConfig, NormKind, NormSchedule, Scheme, SolverSpec, TrainPlan};
use serde::Deserialize;
use toml::Spanned;

/// A configuration problem, with the offending line when known.
#[derive(Debug)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.origin, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn plain(message: impl Into<String>) -> Self {
        ConfigError {
            origin: "config".into(),
            line: None,
            message: message.into(),
        }
    }
}

type S<T> = Option<Spanned<T>>;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    schedule: RawSchedule,
    solver: RawSolver,
    plan: RawPlan,
    data: RawData,
    criterion: RawCriterion,
    sweep: RawSweep,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawModel {
    arch: S<String>,
    base_channels: S<usize>,
    time_channel: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSchedule {
    first: S<String>,
    resnet: S<String>,
    ode: S<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSolver {
    scheme: S<String>,
    n_evals: S<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawPlan {
    epochs: S<usize>,
    batch_size: S<usize>,
    lr0: S<f64>,
    lr_drops: S<Vec<usize>>,
    lr_factor: S<f64>,
    momentum: S<f64>,
    weight_decay: S<f64>,
    augment: Option<bool>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawData {
    kind: S<String>,
    dir: Option<PathBuf>,
    n_train: S<usize>,
    n_test: S<usize>,
    n_per_class: S<usize>,
    n_test_per_class: S<usize>,
    noise: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawCriterion {
    schemes: S<Vec<String>>,
    budgets: S<Vec<usize>>,
    epsilon: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSweep {
    schedules: S<Vec<String>>,
    solvers: S<Vec<String>>,
    variants: Option<Vec<Spanned<RawVariant>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    name: Option<String>,
    schedule: String,
    solver: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Spirals {
        n_per_class: usize,
        n_test_per_class: usize,
        noise: f64,
    },
    Cifar10 {
        dir: PathBuf,
        n_train: Option<usize>,
        n_test: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub schedule: NormSchedule,
    pub solver: SolverSpec,
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub data: DataConfig,
    pub grid: EvalGrid,
    pub epsilon: f64,
    pub sweep: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("", "defaults").expect("empty config resolves")
    }
}

struct Resolver<'a> {
    src: &'a str,
    origin: &'a str,
}

impl Resolver<'_> {
    fn err_at(&self, span: Option<std::ops::Range<usize>>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            origin: self.origin.to_string(),
            line: span.map(|s| self.src[..s.start.min(self.src.len())].matches('\n').count() + 1),
            message: message.into(),
        }
    }

    fn get<T: Clone>(&self, v: &S<T>, default: T) -> T {
        v.as_ref().map_or(default, |s| s.get_ref().clone())
    }

    fn parse<T: FromStr>(&self, v: &S<String>, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match v {
            None => Ok(default),
            Some(s) => s
                .get_ref()
                .parse()
                .map_err(|e| self.err_at(Some(s.span()), format!("{key}: {e}"))),
        }
    }

    fn check(&self, v: &S<f64>, key: &str, ok: impl Fn(f64) -> bool, want: &str) -> Result<(), ConfigError> {
        match v {
            Some(s) if !ok(*s.get_ref()) => Err(self.err_at(Some(s.span()), format!("{key} must be {want}"))),
            _ => Ok(()),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&src, &path.display().to_string())
    }

    pub fn parse(src: &str, origin: &str) -> Result<Self, ConfigError> {
        let r = Resolver { src, origin };
        let raw: RawConfig = toml::from_str(src).map_err(|e| r.err_at(e.span(), e.message().to_string()))?;

        let kind = r.get(&raw.data.kind, "spirals".to_string());
        let (data, mut plan, num_classes) = match kind.as_str() {
            "spirals" => {
                let n_per_class = r.get(&raw.data.n_per_class, 50);
                let n_test_per_class = r.get(&raw.data.n_test_per_class, 100);
                for (v, key) in [(&raw.data.n_per_class, "n_per_class"), (&raw.data.n_test_per_class, "n_test_per_class")] {
                    if let Some(s) = v.as_ref().filter(|s| *s.get_ref() == 0) {
                        return Err(r.err_at(Some(s.span()), format!("data.{key} must be positive")));
                    }
                }
                r.check(&raw.data.noise, "data.noise", |v| v.is_finite() && v >= 0.0, "non-negative")?;
                let data = DataConfig::Spirals {
                    n_per_class,
                    n_test_per_class,
                    noise: r.get(&raw.data.noise, 0.0),
                };
                (data, TrainPlan::spirals(), 2)
            }
            "cifar10" | "cifar10-small" => {
                let small = kind == "cifar10-small";
                let dir = raw.data.dir.clone().unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"));
                let (dt, de) = if small { (Some(2000), Some(1000)) } else { (None, None) };
                let data = DataConfig::Cifar10 {
                    dir,
                    n_train: raw.data.n_train.as_ref().map(|s| *s.get_ref()).or(dt),
                    n_test: raw.data.n_test.as_ref().map(|s| *s.get_ref()).or(de),
                };
                let plan = if small { TrainPlan::cifar10_small() } else { TrainPlan::default() };
                (data, plan, CIFAR_CLASSES)
            }
            other => {
                let span = raw.data.kind.as_ref().map(|s| s.span());
                return Err(r.err_at(span, format!("data.kind `{other}` is not spirals, cifar10 or cifar10-small")));
            }
        };

        let p = &raw.plan;
        plan.epochs = r.get(&p.epochs, plan.epochs);
        plan.batch_size = r.get(&p.batch_size, plan.batch_size);
        plan.lr0 = r.get(&p.lr0, plan.lr0);
        plan.lr_drops = r.get(&p.lr_drops, plan.lr_drops);
        plan.lr_factor = r.get(&p.lr_factor, plan.lr_factor);
        plan.momentum = r.get(&p.momentum, plan.momentum);
        plan.weight_decay = r.get(&p.weight_decay, plan.weight_decay);
        plan.augment = p.augment.unwrap_or(plan.augment);
        plan.seed = p.seed.unwrap_or(plan.seed);
        for (v, key) in [(&p.epochs, "plan.epochs"), (&p.batch_size, "plan.batch_size")] {
            if let Some(s) = v.as_ref().filter(|s| *s.get_ref() == 0) {
                return Err(r.err_at(Some(s.span()), format!("{key} must be positive")));
            }
        }
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        r.check(&p.lr0, "plan.lr0", non_neg, "non-negative")?;
        r.check(&p.lr_factor, "plan.lr_factor", non_neg, "non-negative")?;
        r.check(&p.momentum, "plan.momentum", non_neg, "non-negative")?;
        r.check(&p.weight_decay, "plan.weight_decay", non_neg, "non-negative")?;
        if let Err(e) = plan.validate() {
            let span = p.lr_drops.as_ref().map(|s| s.span());
            return Err(r.err_at(span, e.to_string()));
        }

        let scheme: Scheme = r.parse(&raw.solver.scheme, "solver.scheme", Scheme::Euler)?;
        let n = r.get(&raw.solver.n_evals, 8);
        let train_spec = SolverSpec::new(scheme, n).map_err(|e| {
            let span = raw.solver.n_evals.as_ref().map(|s| s.span());
            r.err_at(span.or(raw.solver.scheme.as_ref().map(|s| s.span())), e.to_string())
        })?;

        let schedule = NormSchedule {
            after_first_conv: r.parse(&raw.schedule.first, "schedule.first", NormKind::Bn)?,
            resnet_blocks: r.parse(&raw.schedule.resnet, "schedule.resnet", NormKind::Bn)?,
            ode_blocks: r.parse(&raw.schedule.ode, "schedule.ode", NormKind::Bn)?,
        };
        let model = ModelConfig {
            arch: r.parse(&raw.model.arch, "model.arch", Arch::OdeNet4)?,
            base_channels: r.get(&raw.model.base_channels, 16),
            time_channel: raw.model.time_channel.unwrap_or(true),
            num_classes,
            train_spec,
            seed: plan.seed,
            ..ModelConfig::new(Arch::OdeNet4, schedule)
        };
        if let Err(e) = model.validate() {
            return Err(r.err_at(raw.model.base_channels.as_ref().map(|s| s.span()), e.to_string()));
        }

        let c = &raw.criterion;
        let defaults = EvalGrid::default();
        let schemes = match &c.schemes {
            None => defaults.schemes,
            Some(s) => s
                .get_ref()
                .iter()
                .map(|x| x.parse::<Scheme>())
                .collect::<Result<_, _>>()
                .map_err(|e| r.err_at(Some(s.span()), format!("criterion.schemes: {e}")))?,
        };
        let grid = EvalGrid {
            schemes,
            budgets: r.get(&c.budgets, defaults.budgets),
        };
        if let Some(s) = &c.budgets {
            if grid.budgets.is_empty() || grid.budgets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(r.err_at(Some(s.span()), "criterion.budgets must be a non-empty increasing list"));
            }
            for &sc in &grid.schemes {
                for &b in &grid.budgets {
                    SolverSpec::new(sc, b).map_err(|e| r.err_at(Some(s.span()), format!("criterion.budgets: {e}")))?;
                }
            }
        }
        r.check(&c.epsilon, "criterion.epsilon", non_neg, "non-negative")?;
        let epsilon = r.get(&c.epsilon, DEFAULT_EPSILON);

        let sweep = resolve_sweep(&r, &raw.sweep, schedule, train_spec)?;
        Ok(ExperimentConfig {
            model,
            plan,
            data,
            grid,
            epsilon,
            sweep,
        })
    }
}

fn resolve_sweep(
    r: &Resolver<'_>,
    raw: &RawSweep,
    schedule: NormSchedule,
    spec: SolverSpec,
) -> Result<Vec<Variant>, ConfigError> {
    let name_of = |s: NormSchedule, v: SolverSpec| format!("{s}_{}{}", v.scheme(), v.n_evals());
    if let Some(vs) = &raw.variants {
        if raw.schedules.is_some() || raw.solvers.is_some() {
            return Err(r.err_at(
                vs.first().map(|v| v.span()),
                "sweep: give either `variants` or `schedules`/`solvers`, not both",
            ));
        }
        let mut out = Vec::new();
        for v in vs {
            let bad = |e: odenorm::Error| r.err_at(Some(v.span()), format!("sweep variant: {e}"));
            let raw = v.get_ref();
            let schedule: NormSchedule = raw.schedule.parse().map_err(bad)?;
            let solver: SolverSpec = raw.solver.parse().map_err(bad)?;
            let name = raw.name.clone().unwrap_or_else(|| name_of(schedule, solver));
            if name.is_empty() || name.contains(['/', '\\', ',']) {
                return Err(r.err_at(Some(v.span()), format!("sweep variant name `{name}` is not a plain file name")));
            }
            out.push(Variant { name, schedule, solver });
        }
        check_unique(r, &out)?;
        return Ok(out);
    }
    let parse_list = |v: &S<Vec<String>>, key: &str| -> Result<Option<Vec<String>>, ConfigError> {
        match v {
            Some(s) if s.get_ref().is_empty() => Err(r.err_at(Some(s.span()), format!("sweep.{key} is empty"))),
            Some(s) => Ok(Some(s.get_ref().clone())),
            None => Ok(None),
        }
    };
    let schedules = match parse_list(&raw.schedules, "schedules")? {
        None => vec![schedule],
        Some(list) => list
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|e: odenorm::Error| r.err_at(raw.schedules.as_ref().map(|s| s.span()), format!("sweep.schedules: {e}")))?,
    };
    let solvers = match parse_list(&raw.solvers, "solvers")? {
        None => vec![spec],
        Some(list) => list
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|e: odenorm::Error| r.err_at(raw.solvers.as_ref().map(|s| s.span()), format!("sweep.solvers: {e}")))?,
    };
    let out: Vec<Variant> = schedules
        .iter()
        .flat_map(|&schedule| {
            solvers.iter().map(move |&solver| Variant {
                name: name_of(schedule, solver),
                schedule,
                solver,
            })
        })
        .collect();
    check_unique(r, &out)?;
    Ok(out)
}

fn check_unique(r: &Resolver<'_>, vs: &[Variant]) -> Result<(), ConfigError> {
    for (i, v) in vs.iter().enumerate() {
        if vs[..i].iter().any(|w| w.name == v.name) {
            return Err(r.err_at(None, format!("sweep variant `{}` appears twice", v.name)));
        }
    }
    Ok(())
}
