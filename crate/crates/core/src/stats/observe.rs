//! Evaluating rule statistics over rows of a dataset.

use serde::{Deserialize, Serialize};

use super::{std_dev, BoxStat, Statistic, BOX_COLUMNS};
use crate::data::{ColumnData, Dataset};
use crate::error::{Error, Result};
use crate::schema::{AbstractRule, Literal, RuleBody};

/// Which categorical column plays the label role: ground-truth labels when
/// mining, model predictions when auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalContext {
    pub target: String,
}

impl EvalContext {
    pub fn new(target: impl Into<String>) -> Self {
        EvalContext {
            target: target.into(),
        }
    }
}

/// Half-open range `(above, upto]` selecting one bucket of a paired rule's
/// conditioning statistic. `None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketRange {
    pub above: Option<f64>,
    pub upto: Option<f64>,
}

impl BucketRange {
    pub fn from_edges(edges: &[f64], bucket: usize) -> Self {
        BucketRange {
            above: bucket.checked_sub(1).map(|b| edges[b]),
            upto: edges.get(bucket).copied(),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.above.is_none_or(|a| v > a) && self.upto.is_none_or(|u| v <= u)
    }
}

/// Statistic values of one rule on one sample or minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Per-sample statistic: one value for each row the rule applies to.
    Samples {
        rows: Vec<usize>,
        values: Vec<f64>,
        /// Applicable rows dropped for a missing cell.
        skipped: usize,
    },
    /// Minibatch statistic; `None` when nothing in the batch was evaluable.
    Batch(Option<f64>),
}

#[derive(Clone, Copy)]
pub(crate) enum NumSource<'a> {
    Num(&'a [Option<f64>]),
    Bool(&'a [Option<bool>]),
}

impl<'a> NumSource<'a> {
    pub(crate) fn new(dataset: &'a Dataset, name: &str) -> Result<Self> {
        match &dataset.column(name)?.data {
            ColumnData::Numeric(v) => Ok(NumSource::Num(v)),
            ColumnData::Boolean(v) => Ok(NumSource::Bool(v)),
            ColumnData::Categorical { .. } => Err(Error::Type {
                column: name.to_string(),
                message: "statistics need a numeric or boolean column".into(),
            }),
        }
    }

    #[inline]
    pub(crate) fn get(&self, row: usize) -> Option<f64> {
        match self {
            NumSource::Num(v) => v[row],
            NumSource::Bool(v) => v[row].map(|b| if b { 1.0 } else { 0.0 }),
        }
    }
}

pub(crate) enum SampleReader<'a> {
    Column(NumSource<'a>),
    Box(BoxStat, [NumSource<'a>; 4]),
}

impl SampleReader<'_> {
    #[inline]
    pub(crate) fn get(&self, row: usize) -> Option<f64> {
        match self {
            SampleReader::Column(c) => c.get(row),
            SampleReader::Box(stat, [a, b, c, d]) => {
                let v = stat.apply(a.get(row)?, b.get(row)?, c.get(row)?, d.get(row)?);
                v.is_finite().then_some(v)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Summary {
    Mean,
    Std,
}

impl Summary {
    pub(crate) fn apply(self, values: &[f64]) -> Option<f64> {
        match self {
            Summary::Mean => super::mean(values),
            Summary::Std => std_dev(values),
        }
    }
}

pub(crate) enum StatReader<'a> {
    Sample(SampleReader<'a>),
    Batch(Summary, NumSource<'a>),
}

impl<'a> StatReader<'a> {
    pub(crate) fn new(stat: &Statistic, dataset: &'a Dataset) -> Result<Self> {
        Ok(match stat {
            Statistic::Column(c) => StatReader::Sample(SampleReader::Column(NumSource::new(dataset, c)?)),
            Statistic::Box(b) => {
                let cols = [
                    NumSource::new(dataset, BOX_COLUMNS[0])?,
                    NumSource::new(dataset, BOX_COLUMNS[1])?,
                    NumSource::new(dataset, BOX_COLUMNS[2])?,
                    NumSource::new(dataset, BOX_COLUMNS[3])?,
                ];
                StatReader::Sample(SampleReader::Box(*b, cols))
            }
            Statistic::Mean(c) => StatReader::Batch(Summary::Mean, NumSource::new(dataset, c)?),
            Statistic::Std(c) => StatReader::Batch(Summary::Std, NumSource::new(dataset, c)?),
        })
    }
}

/// Tests `target = label` on rows of a categorical column.
#[derive(Clone, Copy)]
pub(crate) struct LabelReader<'a> {
    codes: &'a [Option<u32>],
    code: Option<u32>,
}

impl<'a> LabelReader<'a> {
    pub(crate) fn new(dataset: &'a Dataset, column: &str, label: &str) -> Result<Self> {
        match &dataset.column(column)?.data {
            ColumnData::Categorical { codes, levels } => Ok(LabelReader {
                codes,
                code: levels.iter().position(|l| l == label).map(|p| p as u32),
            }),
            _ => Err(Error::Type {
                column: column.to_string(),
                message: "label and prediction columns must be categorical".into(),
            }),
        }
    }

    /// `None` when the label cell is missing.
    #[inline]
    pub(crate) fn holds(&self, row: usize) -> Option<bool> {
        self.codes[row].map(|c| Some(c) == self.code)
    }
}

pub(crate) struct LogicReader<'a> {
    literals: Vec<(&'a [Option<bool>], bool)>,
    target: LabelReader<'a>,
}

impl<'a> LogicReader<'a> {
    pub(crate) fn new(
        literals: &[Literal],
        consequent: &str,
        dataset: &'a Dataset,
        ctx: &EvalContext,
    ) -> Result<Self> {
        let literals = literals
            .iter()
            .map(|l| Ok((super::boolean_slice(dataset, &l.feature)?, l.negated)))
            .collect::<Result<_>>()?;
        Ok(LogicReader {
            literals,
            target: LabelReader::new(dataset, &ctx.target, consequent)?,
        })
    }

    #[inline]
    pub(crate) fn antecedent(&self, row: usize) -> Option<bool> {
        let mut all = true;
        for (col, negated) in &self.literals {
            all &= col[row]? != *negated;
        }
        Some(all)
    }

    /// Exact F1 over rows with complete cells; `None` if there are none.
    pub(crate) fn f1(&self, rows: &[usize]) -> Option<f64> {
        let (mut tp, mut fp, mut fn_, mut seen) = (0u64, 0u64, 0u64, false);
        for &r in rows {
            let (Some(a), Some(c)) = (self.antecedent(r), self.target.holds(r)) else {
                continue;
            };
            seen = true;
            match (a, c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        seen.then(|| super::f1_from_counts(tp as f64, fp as f64, fn_ as f64))
    }
}

enum ProbeKind<'a> {
    Sample {
        stat: SampleReader<'a>,
        condition: Option<(SampleReader<'a>, BucketRange)>,
    },
    Batch(Summary, NumSource<'a>),
    Logic(LogicReader<'a>),
}

/// A rule bound to the columns of one dataset, ready to observe row sets.
pub struct RuleProbe<'a> {
    guard: Option<LabelReader<'a>>,
    kind: ProbeKind<'a>,
}

impl<'a> RuleProbe<'a> {
    /// Binds `rule` to `dataset`. Paired rules need the bucket range of their
    /// conditioning statistic.
    pub fn new(
        rule: &AbstractRule,
        condition: Option<&BucketRange>,
        dataset: &'a Dataset,
        ctx: &EvalContext,
    ) -> Result<Self> {
        let guard = rule
            .guard
            .as_deref()
            .map(|label| LabelReader::new(dataset, &ctx.target, label))
            .transpose()?;
        let kind = match &rule.body {
            RuleBody::Conditional { statistic } => match StatReader::new(statistic, dataset)? {
                StatReader::Sample(stat) => ProbeKind::Sample { stat, condition: None },
                StatReader::Batch(s, col) => ProbeKind::Batch(s, col),
            },
            RuleBody::Logic { literals, consequent } => {
                ProbeKind::Logic(LogicReader::new(literals, consequent, dataset, ctx)?)
            }
            RuleBody::Paired {
                condition: cond_stat,
                statistic,
                ..
            } => {
                let range = condition.ok_or_else(|| {
                    Error::arg(format!("paired rule `{}` has no bucket range", rule.signature()))
                })?;
                let (StatReader::Sample(stat), StatReader::Sample(cond)) =
                    (StatReader::new(statistic, dataset)?, StatReader::new(cond_stat, dataset)?)
                else {
                    return Err(Error::arg("paired rules need per-sample statistics"));
                };
                ProbeKind::Sample {
                    stat,
                    condition: Some((cond, *range)),
                }
            }
        };
        Ok(RuleProbe { guard, kind })
    }

    /// Probe for the plain per-sample statistic `stat` under an optional label
    /// guard.
    pub fn for_statistic(
        guard: Option<&str>,
        stat: &Statistic,
        dataset: &'a Dataset,
        ctx: &EvalContext,
    ) -> Result<Self> {
        let guard = guard
            .map(|label| LabelReader::new(dataset, &ctx.target, label))
            .transpose()?;
        let kind = match StatReader::new(stat, dataset)? {
            StatReader::Sample(stat) => ProbeKind::Sample { stat, condition: None },
            StatReader::Batch(s, col) => ProbeKind::Batch(s, col),
        };
        Ok(RuleProbe { guard, kind })
    }

    pub fn is_per_sample(&self) -> bool {
        matches!(self.kind, ProbeKind::Sample { .. })
    }

    #[inline]
    fn guarded(&self, row: usize) -> Option<bool> {
        match &self.guard {
            Some(g) => g.holds(row),
            None => Some(true),
        }
    }

    pub fn observe(&self, rows: &[usize]) -> Observation {
        match &self.kind {
            ProbeKind::Sample { stat, condition } => {
                let mut out_rows = Vec::new();
                let mut values = Vec::new();
                let mut skipped = 0;
                for &r in rows {
                    match self.guarded(r) {
                        Some(true) => {}
                        Some(false) => continue,
                        None => {
                            skipped += 1;
                            continue;
                        }
                    }
                    if let Some((cond, range)) = condition {
                        match cond.get(r) {
                            Some(v) if range.contains(v) => {}
                            Some(_) => continue,
                            None => {
                                skipped += 1;
                                continue;
                            }
                        }
                    }
                    match stat.get(r) {
                        Some(v) => {
                            out_rows.push(r);
                            values.push(v);
                        }
                        None => skipped += 1,
                    }
                }
                Observation::Samples {
                    rows: out_rows,
                    values,
                    skipped,
                }
            }
            ProbeKind::Batch(summary, col) => {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|&&r| self.guarded(r) == Some(true))
                    .filter_map(|&r| col.get(r))
                    .collect();
                Observation::Batch(summary.apply(&values))
            }
            ProbeKind::Logic(logic) => Observation::Batch(logic.f1(rows)),
        }
    }
}
