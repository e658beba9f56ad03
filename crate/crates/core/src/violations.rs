//! Counting rule violations in model predictions.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::derive_seed;
use crate::data::{sample_minibatches, Dataset};
use crate::error::{Error, Result};
use crate::schema::ConcreteRule;
use crate::stats::{EvalContext, Observation, RuleProbe};

pub const REPORT_FORMAT_VERSION: u32 = 1;

const EVAL_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Check {
    Satisfied,
    /// Carries the offending statistic value.
    Violated(f64),
    /// The rule does not apply, or a required cell is missing.
    NotEvaluated,
}

/// Closed-interval test of a single statistic value.
pub fn check_value(rule: &ConcreteRule, value: f64) -> Check {
    if rule.admits(value) {
        Check::Satisfied
    } else {
        Check::Violated(value)
    }
}

/// Checks `rule` on one sample (per-sample rules, `rows.len() == 1`) or on a
/// minibatch (minibatch rules).
pub fn check_rule(rule: &ConcreteRule, dataset: &Dataset, rows: &[usize], ctx: &EvalContext) -> Result<Check> {
    let probe = RuleProbe::new(&rule.rule, rule.condition.as_ref(), dataset, ctx)?;
    if probe.is_per_sample() && rows.len() != 1 {
        return Err(Error::arg(format!(
            "per-sample rule `{}` checked on {} rows",
            rule.signature(),
            rows.len()
        )));
    }
    Ok(match probe.observe(rows) {
        Observation::Samples { values, .. } => match values.first() {
            Some(&v) => check_value(rule, v),
            None => Check::NotEvaluated,
        },
        Observation::Batch(Some(v)) => check_value(rule, v),
        Observation::Batch(None) => Check::NotEvaluated,
    })
}

/// How minibatch rules are evaluated on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Batching {
    /// Overrides each rule's own batch size.
    pub batch_size: Option<usize>,
    pub count: usize,
    pub seed: u64,
}

impl Default for Batching {
    fn default() -> Self {
        Batching {
            batch_size: None,
            count: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCount {
    pub signature: String,
    /// Violations in sample units; a violated minibatch counts once per member.
    pub violations: u64,
    pub evaluations: u64,
    pub violated_batches: u64,
    pub evaluated_batches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCount {
    pub id: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRule {
    pub signature: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub total_violations: u64,
    pub mean_per_sample: f64,
    pub std_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViolationReport {
    pub format_version: u32,
    pub rules: Vec<RuleCount>,
    pub samples: Vec<SampleCount>,
    pub totals: Totals,
    #[serde(default)]
    pub skipped: Vec<SkippedRule>,
}

impl ViolationReport {
    /// Totals must equal both the per-rule and the per-sample sums.
    pub fn check_accounting(&self) -> Result<()> {
        let by_rule: u64 = self.rules.iter().map(|r| r.violations).sum();
        let by_sample: u64 = self.samples.iter().map(|s| s.violations).sum();
        if by_rule != self.totals.total_violations || by_sample != self.totals.total_violations {
            return Err(Error::NonFinite(format!(
                "violation accounting mismatch: total {} per-rule {by_rule} per-sample {by_sample}",
                self.totals.total_violations
            )));
        }
        if let Some(r) = self.rules.iter().find(|r| r.violations > r.evaluations) {
            return Err(Error::NonFinite(format!(
                "rule `{}` has more violations than evaluations",
                r.signature
            )));
        }
        Ok(())
    }
}

struct RuleTally {
    count: RuleCount,
    per_row: Vec<(usize, u64)>,
}

fn tally(rule: &ConcreteRule, test: &Dataset, batching: &Batching, ctx: &EvalContext) -> Result<RuleTally> {
    let probe = RuleProbe::new(&rule.rule, rule.condition.as_ref(), test, ctx)?;
    let mut count = RuleCount {
        signature: rule.signature(),
        violations: 0,
        evaluations: 0,
        violated_batches: 0,
        evaluated_batches: 0,
    };
    let mut per_row = Vec::new();
    if probe.is_per_sample() {
        let all: Vec<usize> = (0..test.rows()).collect();
        if let Observation::Samples { rows, values, .. } = probe.observe(&all) {
            count.evaluations = rows.len() as u64;
            for (r, v) in rows.into_iter().zip(values) {
                if !rule.admits(v) {
                    per_row.push((r, 1));
                }
            }
        }
    } else if test.rows() > 0 {
        let b = batching.batch_size.unwrap_or(rule.rule.batch_size);
        let batches = sample_minibatches(test, b, batching.count, derive_seed(batching.seed, EVAL_STREAM, b))?;
        for batch in &batches {
            let Observation::Batch(Some(v)) = probe.observe(&batch.indices) else {
                continue;
            };
            count.evaluated_batches += 1;
            count.evaluations += batch.indices.len() as u64;
            if !rule.admits(v) {
                count.violated_batches += 1;
                per_row.extend(batch.indices.iter().map(|&r| (r, 1)));
            }
        }
    }
    count.violations = per_row.len() as u64;
    Ok(RuleTally { count, per_row })
}

/// Evaluates every rule on `test`: per-sample rules on every row, minibatch
/// rules on `batching.count` seeded batches. Rules whose columns are absent
/// or mistyped are listed under `skipped`.
pub fn evaluate(
    rules: &[ConcreteRule],
    test: &Dataset,
    batching: &Batching,
    ctx: &EvalContext,
) -> Result<ViolationReport> {
    if batching.count == 0 && rules.iter().any(|r| r.rule.arity() == crate::stats::Arity::PerMinibatch) {
        return Err(Error::arg("minibatch rules need at least one evaluation batch"));
    }
    if batching.batch_size == Some(0) {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let tallies: Vec<Result<RuleTally>> = rules.par_iter().map(|r| tally(r, test, batching, ctx)).collect();

    let mut per_sample = vec![0u64; test.rows()];
    let mut counts = Vec::with_capacity(rules.len());
    let mut skipped = Vec::new();
    for (rule, t) in rules.iter().zip(tallies) {
        match t {
            Ok(t) => {
                for (r, n) in t.per_row {
                    per_sample[r] += n;
                }
                counts.push(t.count);
            }
            Err(e @ (Error::Resolution { .. } | Error::Type { .. })) => skipped.push(SkippedRule {
                signature: rule.signature(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let mut samples: Vec<SampleCount> = test
        .row_ids()
        .iter()
        .zip(&per_sample)
        .map(|(&id, &violations)| SampleCount { id, violations })
        .collect();
    samples.sort_by_key(|s| s.id);
    let values: Vec<f64> = per_sample.iter().map(|&v| v as f64).collect();
    let report = ViolationReport {
        format_version: REPORT_FORMAT_VERSION,
        totals: Totals {
            total_violations: counts.iter().map(|c| c.violations).sum(),
            mean_per_sample: crate::stats::mean(&values).unwrap_or(0.0),
            std_per_sample: crate::stats::std_dev(&values).unwrap_or(0.0),
        },
        rules: counts,
        samples,
        skipped,
    };
    report.check_accounting()?;
    Ok(report)
}

/// Mean and population standard deviation of total violations across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub totals: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

pub fn evaluate_seeds(
    rules: &[ConcreteRule],
    test: &Dataset,
    batching: &Batching,
    seeds: &[u64],
    ctx: &EvalContext,
) -> Result<(Vec<ViolationReport>, SeedSummary)> {
    let reports = seeds
        .iter()
        .map(|&seed| {
            let b = Batching {
                seed,
                ..batching.clone()
            };
            evaluate(rules, test, &b, ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<u64> = reports.iter().map(|r| r.totals.total_violations).collect();
    let values: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
    let summary = SeedSummary {
        seeds: seeds.to_vec(),
        mean: crate::stats::mean(&values).unwrap_or(0.0),
        std: crate::stats::std_dev(&values).unwrap_or(0.0),
        totals,
    };
    Ok((reports, summary))
}

pub fn write_report_to<W: Write>(mut out: W, report: &ViolationReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io("<report>", e))
}

pub fn read_report_from<R: Read>(reader: R) -> Result<ViolationReport> {
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != REPORT_FORMAT_VERSION {
        return Err(Error::Version {
            what: "violation report",
            found: version,
            expected: REPORT_FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn write_report(path: impl AsRef<Path>, report: &ViolationReport) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_report_to(BufWriter::new(file), report).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ViolationReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_report_from(BufReader::new(file))
}

/// Per-rule table as CSV, followed by a `total` row.
pub fn report_csv(report: &ViolationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::parse("<csv>", e.to_string());
    w.write_record(["signature", "violations", "evaluations", "violated_batches", "evaluated_batches"])
        .map_err(csv_err)?;
    for r in &report.rules {
        w.write_record([
            r.signature.clone(),
            r.violations.to_string(),
            r.evaluations.to_string(),
            r.violated_batches.to_string(),
            r.evaluated_batches.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let evaluations: u64 = report.rules.iter().map(|r| r.evaluations).sum();
    w.write_record([
        "total".to_string(),
        report.totals.total_violations.to_string(),
        evaluations.to_string(),
        String::new(),
        String::new(),
    ])
    .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::arg(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Distinct signatures of rules violated at least once.
pub fn violated_signatures(report: &ViolationReport) -> BTreeSet<&str> {
    report
        .rules
        .iter()
        .filter(|r| r.violations > 0)
        .map(|r| r.signature.as_str())
        .collect()
}
