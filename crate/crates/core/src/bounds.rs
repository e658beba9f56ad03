//! Quantile bounds over sampled minibatches and train/validation selection.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bucket_edges, sample_minibatches, Dataset, Minibatch};
use crate::error::{Error, Result};
use crate::schema::{AbstractRule, ConcreteRule, Provenance, RuleBody, Sidedness};
use crate::stats::{BucketRange, EvalContext, Observation, RuleProbe, Statistic};

pub const RULES_FORMAT_VERSION: u32 = 1;

/// A closed interval whose endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi || (lo.is_infinite() && hi.is_infinite()) {
            return Err(Error::arg(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn finite_or(self, range: Interval) -> Interval {
        Interval {
            lo: if self.lo.is_finite() { self.lo } else { range.lo },
            hi: if self.hi.is_finite() { self.hi } else { range.hi },
        }
    }
}

/// Linear-interpolation percentile: with `v` sorted and `h = q·(n−1)`,
/// returns `v[⌊h⌋] + (h − ⌊h⌋)·(v[⌊h⌋+1] − v[⌊h⌋])`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("percentile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::arg(format!("percentile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("percentile input must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

/// [`percentile`] on data that is already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = q * (n - 1) as f64;
    let i = h.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

/// Quantile interval of `values` for the given sidedness and exception rate.
pub fn bounds_from_values(values: &[f64], sidedness: Sidedness, delta: f64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::arg("no statistic values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistic values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = |q: f64| percentile_sorted(&sorted, q.clamp(0.0, 1.0));
    Ok(match sidedness {
        Sidedness::TwoSided => Interval {
            lo: p(delta / 2.0),
            hi: p(1.0 - delta / 2.0),
        },
        Sidedness::OneSidedLower => Interval {
            lo: p(delta),
            hi: f64::INFINITY,
        },
        Sidedness::OneSidedUpper => Interval {
            lo: f64::NEG_INFINITY,
            hi: p(1.0 - delta),
        },
    })
}

/// Collects a rule's statistic values over `batches`: one per batch for
/// minibatch statistics, every applicable sample (pooled) otherwise.
pub fn collect_values(probe: &RuleProbe<'_>, batches: &[Minibatch]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in batches {
        match probe.observe(&b.indices) {
            Observation::Samples { values, .. } => out.extend(values),
            Observation::Batch(Some(v)) => out.push(v),
            Observation::Batch(None) => {}
        }
    }
    out
}

/// Learns the rule's quantile interval over `batches` of `dataset`.
pub fn compute_bounds(
    rule: &AbstractRule,
    condition: Option<&BucketRange>,
    dataset: &Dataset,
    batches: &[Minibatch],
    ctx: &EvalContext,
) -> Result<Interval> {
    if batches.is_empty() {
        return Err(Error::arg("compute_bounds needs at least one batch"));
    }
    let probe = RuleProbe::new(rule, condition, dataset, ctx)?;
    let values = collect_values(&probe, batches);
    if values.is_empty() {
        return Err(Error::EmptyStatistic {
            rule: rule.signature(),
        });
    }
    bounds_from_values(&values, rule.sidedness, rule.delta())
}

/// Interval Jaccard index `|A ∩ B| / |A ∪ B|`, with the intersection length
/// clamped at zero. Infinite endpoints are replaced by `stat_range`.
pub fn jaccard(train: Interval, valid: Interval, stat_range: Interval) -> f64 {
    let a = train.finite_or(stat_range);
    let b = valid.finite_or(stat_range);
    let inter = (a.hi.min(b.hi) - a.lo.max(b.lo)).max(0.0);
    let union = a.hi.max(b.hi) - a.lo.min(b.lo);
    if !(inter.is_finite() && union.is_finite()) {
        return 0.0;
    }
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Parameters for learning and selecting bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundJob {
    /// Minibatches drawn from the training set (N1).
    pub train_batches: usize,
    /// Minibatches drawn from the validation set (N2).
    pub valid_batches: usize,
    /// Rules pass when Jaccard > 1 − ε.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for BoundJob {
    fn default() -> Self {
        BoundJob {
            train_batches: 200,
            valid_batches: 50,
            epsilon: 0.2,
            seed: 0,
        }
    }
}

impl BoundJob {
    pub fn validate(&self) -> Result<()> {
        if self.train_batches == 0 || self.valid_batches == 0 {
            return Err(Error::arg("batch counts must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::arg(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleStatus {
    Selected { jaccard: Option<f64> },
    Rejected { jaccard: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleOutcome {
    pub signature: String,
    pub status: RuleStatus,
}

/// Result of [`learn_and_select`]: selected rules in enumeration order and an
/// outcome entry for every input rule.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub rules: Vec<ConcreteRule>,
    pub outcomes: Vec<RuleOutcome>,
}

impl Selection {
    pub fn skipped(&self) -> usize {
        self.count(|s| matches!(s, RuleStatus::Skipped { .. }))
    }

    pub fn rejected(&self) -> usize {
        self.count(|s| matches!(s, RuleStatus::Rejected { .. }))
    }

    fn count(&self, f: impl Fn(&RuleStatus) -> bool) -> usize {
        self.outcomes.iter().filter(|o| f(&o.status)).count()
    }
}

pub(crate) fn derive_seed(seed: u64, stream: u64, batch_size: usize) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch_size as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const TRAIN_STREAM: u64 = 1;
const VALID_STREAM: u64 = 2;

/// Batches for each distinct batch size used by `rules`, so that every rule
/// of a given size sees the same draws regardless of the rule list.
fn batches_by_size(
    rules: &[AbstractRule],
    dataset: &Dataset,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<HashMap<usize, Vec<Minibatch>>> {
    let sizes: BTreeSet<usize> = rules.iter().map(|r| r.batch_size).collect();
    sizes
        .into_iter()
        .map(|b| Ok((b, sample_minibatches(dataset, b, count, derive_seed(seed, stream, b))?)))
        .collect()
}

type ConditionKey = (Option<String>, Statistic, usize);

/// Learns equal-frequency bucket ranges for the conditioning statistic of a
/// paired rule over the guard population of `train`.
fn condition_ranges(
    rules: &[AbstractRule],
    train: &Dataset,
    ctx: &EvalContext,
) -> Result<HashMap<ConditionKey, Option<Vec<f64>>>> {
    let mut out = HashMap::new();
    let all: Vec<usize> = (0..train.rows()).collect();
    for rule in rules {
        if let RuleBody::Paired {
            condition, buckets, ..
        } = &rule.body
        {
            let key = (rule.guard.clone(), condition.clone(), *buckets);
            if out.contains_key(&key) {
                continue;
            }
            let probe = RuleProbe::for_statistic(rule.guard.as_deref(), condition, train, ctx)?;
            let values = match probe.observe(&all) {
                Observation::Samples { values, .. } => values,
                Observation::Batch(_) => Vec::new(),
            };
            let edges = if values.is_empty() {
                None
            } else {
                Some(bucket_edges(&values, *buckets)?)
            };
            out.insert(key, edges);
        }
    }
    Ok(out)
}

/// Learns bounds for every rule over `job.train_batches` training minibatches
/// and, when `valid` is given, keeps only rules whose validation bounds agree
/// (Jaccard > 1 − ε). Rules whose statistic cannot be computed are skipped.
pub fn learn_and_select(
    rules: &[AbstractRule],
    train: &Dataset,
    valid: Option<&Dataset>,
    job: &BoundJob,
    ctx: &EvalContext,
) -> Result<Selection> {
    job.validate()?;
    if rules.is_empty() {
        return Ok(Selection::default());
    }
    let train_batches = batches_by_size(rules, train, job.train_batches, job.seed, TRAIN_STREAM)?;
    let valid_batches = valid
        .map(|v| batches_by_size(rules, v, job.valid_batches, job.seed, VALID_STREAM))
        .transpose()?;
    let ranges = condition_ranges(rules, train, ctx)?;
    let provenance = Provenance {
        train: train.name().to_string(),
        seed: job.seed,
    };

    let results: Vec<Result<(RuleOutcome, Option<ConcreteRule>)>> = rules
        .par_iter()
        .map(|rule| {
            let signature = rule.signature();
            let skip = |reason: String| {
                Ok((
                    RuleOutcome {
                        signature: signature.clone(),
                        status: RuleStatus::Skipped { reason },
                    },
                    None,
                ))
            };
            let condition = match &rule.body {
                RuleBody::Paired {
                    condition, bucket, buckets, ..
                } => match &ranges[&(rule.guard.clone(), condition.clone(), *buckets)] {
                    Some(edges) => Some(BucketRange::from_edges(edges, *bucket)),
                    None => return skip("no conditioning values".into()),
                },
                _ => None,
            };

            let probe = RuleProbe::new(rule, condition.as_ref(), train, ctx)?;
            let train_values = collect_values(&probe, &train_batches[&rule.batch_size]);
            if train_values.is_empty() {
                return skip("empty training statistic".into());
            }
            let train_iv = bounds_from_values(&train_values, rule.sidedness, rule.delta())?;

            let mut jac = None;
            if let (Some(valid), Some(vb)) = (valid, &valid_batches) {
                let probe = RuleProbe::new(rule, condition.as_ref(), valid, ctx)?;
                let valid_values = collect_values(&probe, &vb[&rule.batch_size]);
                if valid_values.is_empty() {
                    return skip("empty validation statistic".into());
                }
                let valid_iv = bounds_from_values(&valid_values, rule.sidedness, rule.delta())?;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in train_values.iter().chain(&valid_values) {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let j = jaccard(train_iv, valid_iv, Interval { lo, hi });
                if j <= 1.0 - job.epsilon {
                    return Ok((
                        RuleOutcome {
                            signature,
                            status: RuleStatus::Rejected { jaccard: j },
                        },
                        None,
                    ));
                }
                jac = Some(j);
            }
            let concrete = ConcreteRule {
                rule: rule.clone(),
                lo: train_iv.lo.is_finite().then_some(train_iv.lo),
                hi: train_iv.hi.is_finite().then_some(train_iv.hi),
                condition,
                provenance: provenance.clone(),
            };
            Ok((
                RuleOutcome {
                    signature,
                    status: RuleStatus::Selected { jaccard: jac },
                },
                Some(concrete),
            ))
        })
        .collect();

    let mut selection = Selection::default();
    for r in results {
        let (outcome, rule) = r?;
        selection.outcomes.push(outcome);
        selection.rules.extend(rule);
    }
    Ok(selection)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleLine {
    format_version: u32,
    signature: String,
    rule: AbstractRule,
    #[serde(default)]
    delta: f64,
    lo: Option<f64>,
    hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<BucketRange>,
    provenance: Provenance,
}

/// Writes one JSON object per rule. Floats use the shortest decimal that
/// parses back to the identical binary value; infinite bounds are `null`.
pub fn write_rules_to<W: Write>(mut out: W, rules: &[ConcreteRule]) -> Result<()> {
    let io = |e| Error::io("<rules>", e);
    for r in rules {
        let line = RuleLine {
            format_version: RULES_FORMAT_VERSION,
            signature: r.signature(),
            rule: r.rule.clone(),
            delta: r.rule.delta(),
            lo: r.lo,
            hi: r.hi,
            condition: r.condition,
            provenance: r.provenance.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_rules_from<R: Read>(reader: R) -> Result<Vec<ConcreteRule>> {
    let mut rules = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<rules>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != RULES_FORMAT_VERSION {
            return Err(Error::Version {
                what: "rules file",
                found: version,
                expected: RULES_FORMAT_VERSION,
            });
        }
        let parsed: RuleLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
        if parsed.signature != parsed.rule.signature() {
            return Err(Error::parse(
                format!("line {}", i + 1),
                format!("signature `{}` does not match the rule", parsed.signature),
            ));
        }
        rules.push(ConcreteRule {
            rule: parsed.rule,
            lo: parsed.lo,
            hi: parsed.hi,
            condition: parsed.condition,
            provenance: parsed.provenance,
        });
    }
    Ok(rules)
}

pub fn write_rules(path: impl AsRef<Path>, rules: &[ConcreteRule]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rules_to(BufWriter::new(file), rules).map_err(|e| relabel(e, path))
}

pub fn read_rules(path: impl AsRef<Path>) -> Result<Vec<ConcreteRule>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rules_from(file).map_err(|e| relabel(e, path))
}

fn relabel(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
