//! Trains a small ODENet4 on two spirals and runs the smoothness criterion.
//!
//! `cargo run --release -p odenorm --example spirals -- [NORM|SCHEDULE] [SCHEME:N] [EPOCHS] [LR] [BATCH] [WIDTH] [SEED]`

use std::time::Instant;

use odenorm::criterion::{run_criterion, EvalGrid, DEFAULT_EPSILON};
use odenorm::data::spirals_split;
use odenorm::train::{train, TrainEvent, TrainPlan};
use odenorm::{Arch, Model, ModelConfig, NormKind, NormSchedule, SolverSpec};

fn main() -> odenorm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let schedule: NormSchedule = match args.first() {
        Some(s) if s.contains('-') => s.parse()?,
        Some(s) => NormSchedule::uniform(s.parse()?),
        None => NormSchedule::uniform(NormKind::Nf),
    };
    let spec: SolverSpec = args.get(1).map_or("Euler:8", String::as_str).parse()?;
    let mut plan = TrainPlan::spirals();
    if let Some(e) = args.get(2) {
        plan.epochs = e.parse().expect("epochs");
        plan.lr_drops.retain(|&d| d < plan.epochs);
    }
    if let Some(v) = args.get(3) {
        plan.lr0 = v.parse().expect("lr");
    }
    if let Some(v) = args.get(4) {
        plan.batch_size = v.parse().expect("batch size");
    }
    let width: usize = args.get(5).map_or(16, |v| v.parse().expect("width"));
    let seed: u64 = args.get(6).map_or(0, |v| v.parse().expect("seed"));
    plan.seed = seed;
    let (train_set, test_set) = spirals_split(50, 100, 0.0, seed)?;
    let config = ModelConfig {
        base_channels: width,
        num_classes: 2,
        train_spec: spec,
        seed,
        ..ModelConfig::new(Arch::OdeNet4, schedule)
    };
    let mut model = Model::build(config)?;
    let start = Instant::now();
    let log = train(&mut model, &plan, &train_set, &test_set, |ev| {
        if let TrainEvent::Epoch(m) = ev {
            if m.epoch % 10 == 0 {
                println!("{:4} lr={:.4} loss={:.4} train={:.3} test={:.3}", m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc);
            }
        }
        Ok(())
    })?;
    let last = log.last().expect("at least one epoch");
    println!("final train={:.3} test={:.3} in {:.1?}", last.train_acc, last.test_acc, start.elapsed());
    let grid = EvalGrid {
        budgets: vec![64, 128],
        ..EvalGrid::default()
    };
    let report = run_criterion(&model, &test_set, &grid, DEFAULT_EPSILON)?;
    print!("{}", report.to_csv());
    Ok(())
}
