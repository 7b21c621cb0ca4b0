//! The sweep summary table.

use std::fmt::Write as _;

use odenorm::criterion::Verdict;
use odenorm::{NormKind, Scheme};

pub const SUMMARY_HEADER: &str = "variant,norm_first,norm_resnet,norm_ode,train_scheme,train_n,test_acc,verdict";

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done { test_acc: f64, verdict: Verdict },
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub norm_first: NormKind,
    pub norm_resnet: NormKind,
    pub norm_ode: NormKind,
    pub train_scheme: Scheme,
    pub train_n: usize,
    pub outcome: Outcome,
}

pub fn to_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let (acc, verdict) = match &r.outcome {
            Outcome::Done { test_acc, verdict } => (format!("{test_acc:?}"), verdict.as_str()),
            Outcome::Failed => (String::new(), "failed"),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{acc},{verdict}",
            r.variant, r.norm_first, r.norm_resnet, r.norm_ode, r.train_scheme, r.train_n
        );
    }
    s
}

pub fn parse_csv(text: &str) -> anyhow::Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    anyhow::ensure!(lines.next() == Some(SUMMARY_HEADER), "summary must start with `{SUMMARY_HEADER}`");
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            anyhow::ensure!(f.len() == 8, "summary row `{line}` does not have 8 fields");
            let outcome = if f[7] == "failed" {
                Outcome::Failed
            } else {
                Outcome::Done {
                    test_acc: f[6].parse()?,
                    verdict: f[7].parse()?,
                }
            };
            Ok(SummaryRow {
                variant: f[0].to_string(),
                norm_first: f[1].parse()?,
                norm_resnet: f[2].parse()?,
                norm_ode: f[3].parse()?,
                train_scheme: f[4].parse()?,
                train_n: f[5].parse()?,
                outcome,
            })
        })
        .collect()
}
