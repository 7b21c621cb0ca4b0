//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use odenorm::checkpoint;
use odenorm::criterion::{emit_report, evaluate_accuracy, run_criterion_with, CriterionReport};
use odenorm::data::{load_cifar10_subset, spirals_split, Dataset};
use odenorm::train::{metrics_to_csv, train as run_training, TrainEvent};
use odenorm::{Model, ModelConfig, NormKind, SolverSpec};

use crate::config::{ConfigError, DataConfig, ExperimentConfig};
use crate::summary::{self, Outcome, SummaryRow};

pub const THREADS_ENV: &str = "ODENORM_THREADS";

/// Config file plus command-line overrides of its scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub solver: Option<String>,
    pub data_dir: Option<PathBuf>,
}

/// Some sweep variants failed; `code` is the most severe exit code seen.
#[derive(Debug)]
pub struct SweepFailed {
    pub failed: usize,
    pub total: usize,
    pub code: u8,
}

impl fmt::Display for SweepFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} sweep variants failed", self.failed, self.total)
    }
}

impl std::error::Error for SweepFailed {}

/// Exit code for an error chain: 1 config, 2 data, 3 numerical.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<odenorm::Error>() {
            return match e.kind() {
                odenorm::ErrorKind::Config => 1,
                odenorm::ErrorKind::Data => 2,
                odenorm::ErrorKind::Numerical => 3,
            };
        }
        if let Some(f) = cause.downcast_ref::<SweepFailed>() {
            return f.code;
        }
    }
    1
}

pub fn resolve(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = o.epochs {
        cfg.plan.epochs = e;
        cfg.plan.lr_drops.retain(|&d| d < e);
    }
    if let Some(s) = o.seed {
        cfg.plan.seed = s;
        cfg.model.seed = s;
    }
    if let Some(lr) = o.lr {
        cfg.plan.lr0 = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.plan.batch_size = b;
    }
    if let Some(s) = &o.solver {
        let spec: SolverSpec = s.parse().map_err(|e| ConfigError::plain(format!("--solver: {e}")))?;
        cfg.model.train_spec = spec;
        for v in &mut cfg.sweep {
            v.solver = spec;
        }
    }
    if let Some(d) = &o.data_dir {
        match &mut cfg.data {
            DataConfig::Cifar10 { dir, .. } => *dir = d.clone(),
            DataConfig::Spirals { .. } => {
                return Err(ConfigError::plain("--data-dir given but data.kind is spirals").into());
            }
        }
    }
    cfg.plan.validate().map_err(|e| ConfigError::plain(e.to_string()))?;
    Ok(cfg)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Spirals {
            n_per_class,
            n_test_per_class,
            noise,
        } => Ok(spirals_split(*n_per_class, *n_test_per_class, *noise, cfg.plan.seed)?),
        DataConfig::Cifar10 { dir, n_train, n_test } => {
            let (tr, te) = load_cifar10_subset(dir, n_train.unwrap_or(usize::MAX), n_test.unwrap_or(usize::MAX))
                .with_context(|| format!("loading CIFAR-10 from {}", dir.display()))?;
            Ok((tr, te))
        }
    }
}

fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| odenorm::Error::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| odenorm::Error::io(path, e).into())
}

fn check_classes(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    if model.num_classes != ds.num_classes {
        return Err(odenorm::Error::Data(format!(
            "model has {} classes but the dataset has {}",
            model.num_classes, ds.num_classes
        ))
        .into());
    }
    Ok(())
}

/// Trains one model into `out`, returning it.
fn train_into(model_cfg: ModelConfig, cfg: &ExperimentConfig, data: &(Dataset, Dataset), out: &Path, tag: &str) -> Result<Model> {
    create_dir(out)?;
    let mut model = Model::build(model_cfg)?;
    check_classes(model.config(), &data.0)?;
    let log = run_training(&mut model, &cfg.plan, &data.0, &data.1, |ev| {
        match ev {
            TrainEvent::Epoch(m) => println!(
                "{tag}epoch={} lr={:?} train_loss={:.6} train_acc={:.4} test_acc={:.4}",
                m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
            ),
            TrainEvent::Checkpoint { epoch, model } => {
                let name = if epoch == cfg.plan.epochs {
                    "model.ckpt".to_string()
                } else {
                    format!("checkpoint_epoch{epoch}.ckpt")
                };
                checkpoint::save(model, epoch, &out.join(name))?;
            }
        }
        Ok(())
    })?;
    write(&out.join("metrics.csv"), &metrics_to_csv(&log))?;
    Ok(model)
}

pub fn train(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = resolve(o)?;
    let data = load_data(&cfg)?;
    train_into(cfg.model, &cfg, &data, out, "")?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

pub fn eval(o: &Overrides, ckpt: &Path) -> Result<()> {
    let cfg = resolve(o)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let (_, test) = load_data(&cfg)?;
    check_classes(model.config(), &test)?;
    let spec = match &o.solver {
        Some(_) => cfg.model.train_spec,
        None => model.train_spec(),
    };
    let acc = evaluate_accuracy(&model, &test, spec)?;
    println!("solver={spec} accuracy={acc:?}");
    Ok(())
}

fn diagnose(model: &Model, cfg: &ExperimentConfig, test: &Dataset, parallel: bool) -> Result<CriterionReport> {
    let workers = if parallel { threads() } else { 1 };
    Ok(run_criterion_with(model, test, &cfg.grid, cfg.epsilon, workers)?)
}

pub fn criterion(o: &Overrides, ckpt: &Path, out: &Path, parallel: bool) -> Result<()> {
    let cfg = resolve(o)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let (_, test) = load_data(&cfg)?;
    check_classes(model.config(), &test)?;
    let report = diagnose(&model, &cfg, &test, parallel)?;
    emit_report(&report, out)?;
    println!("verdict={}", report.verdict);
    Ok(())
}

pub fn sweep(o: &Overrides, out: &Path, parallel: bool) -> Result<()> {
    let cfg = resolve(o)?;
    let data = load_data(&cfg)?;
    create_dir(out)?;
    let summary_path = out.join("summary.csv");
    let mut rows = Vec::new();
    let mut worst = 0u8;
    for v in &cfg.sweep {
        let model_cfg = ModelConfig {
            schedule: v.schedule,
            train_spec: v.solver,
            ..cfg.model
        };
        let dir = out.join(&v.name);
        let tag = format!("[{}] ", v.name);
        let result = train_into(model_cfg, &cfg, &data, &dir, &tag).and_then(|model| {
            let report = diagnose(&model, &cfg, &data.1, parallel)?;
            emit_report(&report, &dir.join("report.csv"))?;
            Ok(report)
        });
        let outcome = match result {
            Ok(r) => {
                println!("{tag}test_acc={:?} verdict={}", r.baseline_accuracy, r.verdict);
                Outcome::Done {
                    test_acc: r.baseline_accuracy,
                    verdict: r.verdict,
                }
            }
            Err(e) => {
                eprintln!("{tag}failed: {e:#}");
                worst = worst.max(exit_code(&e));
                Outcome::Failed
            }
        };
        rows.push(SummaryRow {
            variant: v.name.clone(),
            norm_first: v.schedule.after_first_conv,
            norm_resnet: v.schedule.resnet_blocks,
            norm_ode: v.schedule.ode_blocks,
            train_scheme: v.solver.scheme(),
            train_n: v.solver.n_evals(),
            outcome,
        });
        write(&summary_path, &summary::to_csv(&rows))?;
    }
    let bn = rows.iter().find_map(|r| match r.outcome {
        Outcome::Done { test_acc, .. } if r.norm_ode == NormKind::Bn => Some(test_acc),
        _ => None,
    });
    if let Some(bn) = bn {
        for r in &rows {
            if let Outcome::Done { test_acc, .. } = r.outcome {
                println!("gap_vs_bn {}={:+.4}", r.variant, test_acc - bn);
            }
        }
    }
    let failed = rows.iter().filter(|r| r.outcome == Outcome::Failed).count();
    if failed > 0 {
        return Err(SweepFailed {
            failed,
            total: rows.len(),
            code: worst.max(1),
        }
        .into());
    }
    Ok(())
}
