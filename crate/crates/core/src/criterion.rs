//! The (S, n)-criterion: re-evaluate a trained model with solvers that spend
//! more right-hand-side evaluations than the training solver and call its
//! dynamics smooth when accuracy does not drop.
//!
//! The criterion presumes the solution of the block IVP is Lipschitz in
//! time; that is not checked here and every emitted report says so.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::solver::{Scheme, SolverSpec};

pub const DEFAULT_EPSILON: f64 = 0.005;
const EVAL_BATCH: usize = 250;
pub const REPORT_HEADER: &str = "scheme,n_evals,accuracy";
const LIMITATION: &str =
    "# limitation: assumes the IVP solution is Lipschitz in time; a smooth verdict is evidence, not proof";

/// Fraction of argmax-correct eval-mode predictions with every ODE block
/// solved by `spec`.
pub fn evaluate_accuracy(model: &Model, ds: &Dataset, spec: SolverSpec) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate accuracy on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk)?;
        let pred = model.predict(&x, Some(spec))?.argmax_rows()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalGrid {
    pub schemes: Vec<Scheme>,
    pub budgets: Vec<usize>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            schemes: Scheme::ALL.to_vec(),
            budgets: vec![16, 32, 64, 128],
        }
    }
}

impl EvalGrid {
    /// The grid points strictly more powerful than `train`, checking that
    /// every listed pair is a valid budget.
    pub fn points(&self, train: SolverSpec) -> Result<Vec<SolverSpec>> {
        if self.schemes.is_empty() || self.budgets.is_empty() {
            return Err(Error::Invalid("evaluation grid is empty".into()));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("grid budgets {:?} are not increasing", self.budgets)));
        }
        let mut out = Vec::new();
        for &s in &self.schemes {
            for &n in &self.budgets {
                let spec = SolverSpec::new(s, n)?;
                if n > train.n_evals() {
                    out.push(spec);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Invalid(format!(
                "no more powerful solver in grid: every budget is ≤ {} of the training solver {train}",
                train.n_evals()
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Smooth,
    NotSmooth,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Smooth => "smooth",
            Verdict::NotSmooth => "not_smooth",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Verdict::Smooth),
            "not_smooth" => Ok(Verdict::NotSmooth),
            other => Err(Error::Data(format!("unknown verdict `{other}`"))),
        }
    }
}

/// Smooth iff no grid accuracy falls more than `epsilon` below `baseline`.
pub fn verdict_for(grid: &[(SolverSpec, f64)], baseline: f64, epsilon: f64) -> Verdict {
    if grid.iter().all(|&(_, acc)| acc >= baseline - epsilon) {
        Verdict::Smooth
    } else {
        Verdict::NotSmooth
    }
}

/// Largest accuracy loss relative to the baseline, or 0 when none drops.
pub fn worst_drop(grid: &[(SolverSpec, f64)], baseline: f64) -> f64 {
    grid.iter().map(|&(_, acc)| baseline - acc).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub train_spec: SolverSpec,
    pub baseline_accuracy: f64,
    pub grid_accuracies: Vec<(SolverSpec, f64)>,
    pub epsilon: f64,
    pub verdict: Verdict,
    pub worst_drop: f64,
    /// Accuracy with RK4 at the largest grid budget, a proxy for the exact flow.
    pub reference: (SolverSpec, f64),
}

pub fn run_criterion(model: &Model, ds: &Dataset, grid: &EvalGrid, epsilon: f64) -> Result<CriterionReport> {
    run_criterion_with(model, ds, grid, epsilon, 1)
}

/// [`run_criterion`] with grid points spread over up to `threads` workers.
/// Results do not depend on the thread count.
pub fn run_criterion_with(
    model: &Model,
    ds: &Dataset,
    grid: &EvalGrid,
    epsilon: f64,
    threads: usize,
) -> Result<CriterionReport> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Invalid(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    let train_spec = model.train_spec();
    let points = grid.points(train_spec)?;
    let baseline = evaluate_accuracy(model, ds, train_spec)?;
    let grid_accuracies = evaluate_points(model, ds, &points, threads)?;
    let max_budget = *grid.budgets.last().expect("validated non-empty");
    let ref_spec = SolverSpec::new(Scheme::Rk4, max_budget)?;
    let reference = match grid_accuracies.iter().find(|(s, _)| *s == ref_spec) {
        Some(&hit) => hit,
        None => (ref_spec, evaluate_accuracy(model, ds, ref_spec)?),
    };
    Ok(CriterionReport {
        train_spec,
        baseline_accuracy: baseline,
        verdict: verdict_for(&grid_accuracies, baseline, epsilon),
        worst_drop: worst_drop(&grid_accuracies, baseline),
        grid_accuracies,
        epsilon,
        reference,
    })
}

fn evaluate_points(model: &Model, ds: &Dataset, points: &[SolverSpec], threads: usize) -> Result<Vec<(SolverSpec, f64)>> {
    let eval = |spec: SolverSpec| Ok((spec, evaluate_accuracy(model, ds, spec)?));
    let threads = threads.clamp(1, points.len().max(1));
    if threads == 1 {
        return points.iter().map(|&s| eval(s)).collect();
    }
    let per = points.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .chunks(per)
            .map(|chunk| scope.spawn(move || chunk.iter().map(|&s| eval(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Internal("criterion worker panicked".into()))??);
        }
        Ok(out)
    })
}

impl CriterionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let (rs, ra) = self.reference;
        let _ = writeln!(s, "{LIMITATION}");
        let _ = writeln!(s, "# train_spec={}:{}", self.train_spec.scheme(), self.train_spec.n_evals());
        let _ = writeln!(s, "# reference={}:{},{:?}", rs.scheme(), rs.n_evals(), ra);
        let _ = writeln!(s, "# worst_drop={:?}", self.worst_drop);
        let _ = writeln!(s, "{REPORT_HEADER}");
        for (spec, acc) in &self.grid_accuracies {
            let _ = writeln!(s, "{},{},{:?}", spec.scheme(), spec.n_evals(), acc);
        }
        let _ = writeln!(s, "baseline,{:?}", self.baseline_accuracy);
        let _ = writeln!(s, "epsilon,{:?}", self.epsilon);
        let _ = writeln!(s, "verdict,{}", self.verdict);
        s
    }

    /// Parses [`CriterionReport::to_csv`] output and checks that the stated
    /// verdict agrees with the rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |no: usize, line: &str| Error::Data(format!("report line {no}: `{line}`"));
        let num = |no: usize, line: &str, v: &str| v.parse::<f64>().map_err(|_| bad(no, line));
        let (mut train_spec, mut reference, mut drop) = (None, None, None);
        let (mut baseline, mut epsilon, mut verdict) = (None, None, None);
        let mut grid = Vec::new();
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some(v) = meta.strip_prefix("train_spec=") {
                    train_spec = Some(v.parse::<SolverSpec>().map_err(|_| bad(no, line))?);
                } else if let Some(v) = meta.strip_prefix("reference=") {
                    let (spec, acc) = v.split_once(',').ok_or_else(|| bad(no, line))?;
                    reference = Some((spec.parse().map_err(|_| bad(no, line))?, num(no, line, acc)?));
                } else if let Some(v) = meta.strip_prefix("worst_drop=") {
                    drop = Some(num(no, line, v)?);
                }
                continue;
            }
            if !header {
                if line != REPORT_HEADER {
                    return Err(Error::Data(format!("report line {no}: expected header `{REPORT_HEADER}`")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            match f.as_slice() {
                ["baseline", v] => baseline = Some(num(no, line, v)?),
                ["epsilon", v] => epsilon = Some(num(no, line, v)?),
                ["verdict", v] => verdict = Some(v.parse::<Verdict>()?),
                [scheme, n, acc] => {
                    let n: usize = n.parse().map_err(|_| bad(no, line))?;
                    let spec = SolverSpec::new(scheme.parse()?, n)?;
                    grid.push((spec, num(no, line, acc)?));
                }
                _ => return Err(bad(no, line)),
            }
        }
        let missing = |what: &str| Error::Data(format!("report is missing `{what}`"));
        let report = CriterionReport {
            train_spec: train_spec.ok_or_else(|| missing("train_spec"))?,
            baseline_accuracy: baseline.ok_or_else(|| missing("baseline"))?,
            epsilon: epsilon.ok_or_else(|| missing("epsilon"))?,
            verdict: verdict.ok_or_else(|| missing("verdict"))?,
            worst_drop: drop.ok_or_else(|| missing("worst_drop"))?,
            reference: reference.ok_or_else(|| missing("reference"))?,
            grid_accuracies: grid,
        };
        let recomputed = verdict_for(&report.grid_accuracies, report.baseline_accuracy, report.epsilon);
        if recomputed != report.verdict {
            return Err(Error::Data(format!(
                "report states verdict `{}` but its rows give `{recomputed}`",
                report.verdict
            )));
        }
        Ok(report)
    }
}

pub fn emit_report(report: &CriterionReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: Scheme, n: usize) -> SolverSpec {
        SolverSpec::new(s, n).unwrap()
    }

    fn sample() -> CriterionReport {
        let grid = vec![(spec(Scheme::Euler, 64), 0.9), (spec(Scheme::Rk4, 64), 0.8875)];
        CriterionReport {
            train_spec: spec(Scheme::Euler, 8),
            baseline_accuracy: 0.9,
            verdict: verdict_for(&grid, 0.9, 0.005),
            worst_drop: worst_drop(&grid, 0.9),
            reference: grid[1],
            grid_accuracies: grid,
            epsilon: 0.005,
        }
    }

    #[test]
    fn grid_filters_to_more_powerful() {
        let g = EvalGrid {
            schemes: vec![Scheme::Euler, Scheme::Rk4],
            budgets: vec![8, 16],
        };
        assert_eq!(
            g.points(spec(Scheme::Euler, 8)).unwrap(),
            vec![spec(Scheme::Euler, 16), spec(Scheme::Rk4, 16)]
        );
        let err = g.points(spec(Scheme::Euler, 16)).unwrap_err().to_string();
        assert!(err.contains("no more powerful solver in grid"), "{err}");
        let odd = EvalGrid {
            schemes: vec![Scheme::Rk4],
            budgets: vec![18],
        };
        assert!(odd.points(spec(Scheme::Euler, 8)).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = sample();
        assert_eq!(r.verdict, Verdict::NotSmooth);
        assert!((r.worst_drop - 0.0125).abs() < 1e-15);
        let csv = r.to_csv();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 1 + 2 + 3);
        assert_eq!(rows[0], "scheme,n_evals,accuracy");
        assert_eq!(rows[5], "verdict,not_smooth");
        assert_eq!(CriterionReport::parse_csv(&csv).unwrap(), r);
    }

    #[test]
    fn tampered_verdict_is_rejected() {
        let csv = sample().to_csv().replace("verdict,not_smooth", "verdict,smooth");
        assert!(CriterionReport::parse_csv(&csv).is_err());
    }

    #[test]
    fn tolerance_is_monotone() {
        let r = sample();
        assert_eq!(verdict_for(&r.grid_accuracies, 0.9, 0.013), Verdict::Smooth);
        assert_eq!(verdict_for(&r.grid_accuracies, 0.9, 0.02), Verdict::Smooth);
    }
}
