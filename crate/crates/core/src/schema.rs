//! Rule schemas and exhaustive enumeration of abstract rules.
//!
//! A schema is a TOML document with one `[[rules]]` stanza per template:
//!
//! ```toml
//! [[rules]]
//! template = "conditional"        # conditional | logic | paired
//! labels = ["car", "person"]      # "*" alone means no label guard
//! statistics = ["aspect_ratio"]
//! sided = "two-sided"             # two-sided | one-sided-lower | one-sided-upper
//! quantile = 0.98                 # 1 - delta, default 0.98
//! batch = 1                       # minibatch size B, default 256
//! max_literals = 1                # logic only: conjunction size k, default 1
//! literals = "positive"           # logic only: positive | signed
//! pair_buckets = 4                # paired only, default 4
//! ```
//!
//! Logic templates take their literals from the dataset's boolean features;
//! each label becomes the consequent of `literals ⇒ target = label`, scored by
//! minibatch F1.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::BooleanFeature;
use crate::error::{Error, Result};
use crate::stats::{Arity, BucketRange, Statistic, StatisticRegistry};

pub const DEFAULT_QUANTILE: f64 = 0.98;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_PAIR_BUCKETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    TwoSided,
    OneSidedLower,
    OneSidedUpper,
}

impl Sidedness {
    pub fn as_str(self) -> &'static str {
        match self {
            Sidedness::TwoSided => "two-sided",
            Sidedness::OneSidedLower => "one-sided-lower",
            Sidedness::OneSidedUpper => "one-sided-upper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Conditional,
    Logic,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiteralMode {
    Positive,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Literal {
    pub feature: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negated: bool,
}

impl Literal {
    pub fn pos(feature: impl Into<String>) -> Self {
        Literal {
            feature: feature.into(),
            negated: false,
        }
    }

    pub fn neg(feature: impl Into<String>) -> Self {
        Literal {
            feature: feature.into(),
            negated: true,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("!")?;
        }
        f.write_str(&self.feature)
    }
}

/// Structure of an abstract rule, without bounds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "kebab-case")]
pub enum RuleBody {
    /// `guard ⇒ lb ≤ φ ≤ ub`.
    Conditional { statistic: Statistic },
    /// `lb ≤ F1(literals ⇒ target = consequent) ≤ ub` over a minibatch.
    Logic {
        literals: Vec<Literal>,
        consequent: String,
    },
    /// `guard ∧ condition ∈ bucket ⇒ lb ≤ statistic ≤ ub`.
    Paired {
        condition: Statistic,
        bucket: usize,
        buckets: usize,
        statistic: Statistic,
    },
}

impl RuleBody {
    pub fn kind(&self) -> TemplateKind {
        match self {
            RuleBody::Conditional { .. } => TemplateKind::Conditional,
            RuleBody::Logic { .. } => TemplateKind::Logic,
            RuleBody::Paired { .. } => TemplateKind::Paired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractRule {
    /// `Some(label)` restricts the rule to rows whose target equals `label`.
    pub guard: Option<String>,
    pub body: RuleBody,
    pub sidedness: Sidedness,
    /// Quantile level `1 − δ`.
    pub quantile: f64,
    pub batch_size: usize,
}

impl AbstractRule {
    /// Exception rate δ.
    pub fn delta(&self) -> f64 {
        1.0 - self.quantile
    }

    pub fn arity(&self) -> Arity {
        match &self.body {
            RuleBody::Conditional { statistic } => statistic.arity(),
            RuleBody::Logic { .. } => Arity::PerMinibatch,
            RuleBody::Paired { .. } => Arity::PerSample,
        }
    }

    /// Canonical key: `kind|guard|body|sidedness|q=..|B=..`. For logic
    /// rules the guard slot holds the consequent label.
    pub fn signature(&self) -> String {
        let (kind, guard, body) = match &self.body {
            RuleBody::Conditional { statistic } => ("cond", self.guard_str(), statistic.to_string()),
            RuleBody::Logic { literals, consequent } => {
                let mut lits: Vec<&Literal> = literals.iter().collect();
                lits.sort();
                let body = lits.iter().map(ToString::to_string).collect::<Vec<_>>().join("&");
                ("logic", consequent.clone(), body)
            }
            RuleBody::Paired {
                condition,
                bucket,
                buckets,
                statistic,
            } => (
                "pair",
                self.guard_str(),
                format!("{condition}#{bucket}/{buckets}->{statistic}"),
            ),
        };
        format!(
            "{kind}|{guard}|{body}|{}|q={}|B={}",
            self.sidedness.as_str(),
            self.quantile,
            self.batch_size
        )
    }

    fn guard_str(&self) -> String {
        self.guard.clone().unwrap_or_else(|| "*".into())
    }

    /// Columns the rule reads besides the target column.
    pub fn columns(&self) -> Vec<&str> {
        match &self.body {
            RuleBody::Conditional { statistic } => statistic.columns(),
            RuleBody::Logic { literals, .. } => literals.iter().map(|l| l.feature.as_str()).collect(),
            RuleBody::Paired {
                condition, statistic, ..
            } => {
                let mut c = condition.columns();
                c.extend(statistic.columns());
                c
            }
        }
    }
}

/// Where a concrete rule's bounds came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub train: String,
    pub seed: u64,
}

/// An abstract rule with learned bounds `lo ≤ φ ≤ hi`. Missing bounds are
/// infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteRule {
    pub rule: AbstractRule,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Conditioning bucket of a paired rule, learned with the bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<BucketRange>,
    pub provenance: Provenance,
}

impl ConcreteRule {
    pub fn signature(&self) -> String {
        self.rule.signature()
    }

    pub fn lower(&self) -> f64 {
        self.lo.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn upper(&self) -> f64 {
        self.hi.unwrap_or(f64::INFINITY)
    }

    /// Closed-interval membership.
    pub fn admits(&self, value: f64) -> bool {
        value >= self.lower() && value <= self.upper()
    }
}

/// One parsed template stanza.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub kind: TemplateKind,
    /// `None` means no guard (`labels = ["*"]`).
    pub labels: Option<Vec<String>>,
    pub statistics: Vec<Statistic>,
    pub sidedness: Sidedness,
    pub quantile: f64,
    pub batch_size: usize,
    pub max_literals: usize,
    pub literals: LiteralMode,
    pub pair_buckets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleSchema {
    pub templates: Vec<Template>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    #[serde(default)]
    rules: Vec<RawTemplate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    template: TemplateKind,
    labels: Vec<String>,
    statistics: Option<Vec<String>>,
    sided: Option<Sidedness>,
    quantile: Option<f64>,
    batch: Option<usize>,
    max_literals: Option<usize>,
    literals: Option<LiteralMode>,
    pair_buckets: Option<usize>,
}

impl RuleSchema {
    /// Parses a schema document, resolving statistic names against `registry`.
    pub fn parse(text: &str, registry: &StatisticRegistry) -> Result<Self> {
        let raw: RawSchema = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "schema".into());
            Error::parse(location, e.message().to_string())
        })?;
        if raw.rules.is_empty() {
            return Err(Error::parse("schema", "no [[rules]] stanzas"));
        }
        let templates = raw
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, t)| Template::from_raw(t, registry).map_err(|e| locate(e, i)))
            .collect::<Result<_>>()?;
        Ok(RuleSchema { templates })
    }
}

fn locate(err: Error, index: usize) -> Error {
    match err {
        Error::Argument(message) => Error::parse(format!("rules[{index}]"), message),
        other => other,
    }
}

impl Template {
    fn from_raw(raw: RawTemplate, registry: &StatisticRegistry) -> Result<Self> {
        let quantile = raw.quantile.unwrap_or(DEFAULT_QUANTILE);
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::arg(format!("quantile must lie in (0, 1), got {quantile}")));
        }
        let batch_size = raw.batch.unwrap_or(DEFAULT_BATCH);
        if batch_size == 0 {
            return Err(Error::arg("batch must be at least 1"));
        }
        let max_literals = raw.max_literals.unwrap_or(1);
        if max_literals == 0 {
            return Err(Error::arg("max_literals must be at least 1"));
        }
        let pair_buckets = raw.pair_buckets.unwrap_or(DEFAULT_PAIR_BUCKETS);
        if pair_buckets < 2 {
            return Err(Error::arg("pair_buckets must be at least 2"));
        }
        if raw.labels.is_empty() {
            return Err(Error::arg("labels must not be empty"));
        }
        let labels = if raw.labels == ["*"] {
            if raw.template == TemplateKind::Logic {
                return Err(Error::arg("logic templates need explicit consequent labels"));
            }
            None
        } else {
            let mut seen = raw.labels.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != raw.labels.len() || seen.iter().any(|l| l.is_empty() || l == "*") {
                return Err(Error::arg("labels must be distinct and non-empty"));
            }
            Some(raw.labels)
        };
        let statistics = match raw.template {
            TemplateKind::Logic => {
                if let Some(stats) = &raw.statistics {
                    if stats.iter().any(|s| s != "f1") {
                        return Err(Error::arg("logic templates only support the `f1` statistic"));
                    }
                }
                Vec::new()
            }
            _ => {
                let names = raw.statistics.unwrap_or_default();
                if names.is_empty() {
                    return Err(Error::arg("statistics must not be empty"));
                }
                let stats = names
                    .iter()
                    .map(|n| registry.resolve(n))
                    .collect::<Result<Vec<_>>>()?;
                if raw.template == TemplateKind::Paired {
                    if stats.len() < 2 {
                        return Err(Error::arg("paired templates need at least two statistics"));
                    }
                    if stats.iter().any(|s| s.arity() != Arity::PerSample) {
                        return Err(Error::arg("paired templates need per-sample statistics"));
                    }
                }
                stats
            }
        };
        Ok(Template {
            kind: raw.template,
            labels,
            statistics,
            sidedness: raw.sided.unwrap_or(Sidedness::TwoSided),
            quantile,
            batch_size,
            max_literals,
            literals: raw.literals.unwrap_or(LiteralMode::Positive),
            pair_buckets,
        })
    }

    fn rule(&self, guard: Option<String>, body: RuleBody) -> AbstractRule {
        AbstractRule {
            guard,
            body,
            sidedness: self.sidedness,
            quantile: self.quantile,
            batch_size: self.batch_size,
        }
    }

    fn guards(&self) -> Vec<Option<String>> {
        match &self.labels {
            Some(labels) => labels.iter().cloned().map(Some).collect(),
            None => vec![None],
        }
    }
}

/// Enumerates every abstract rule the schema admits, once each, sorted by
/// signature.
pub fn enumerate_abstract_rules(schema: &RuleSchema, features: &[BooleanFeature]) -> Result<Vec<AbstractRule>> {
    let mut out: BTreeMap<String, AbstractRule> = BTreeMap::new();
    let mut push = |rule: AbstractRule| {
        out.entry(rule.signature()).or_insert(rule);
    };
    for template in &schema.templates {
        match template.kind {
            TemplateKind::Conditional => {
                for guard in template.guards() {
                    for stat in &template.statistics {
                        push(template.rule(
                            guard.clone(),
                            RuleBody::Conditional {
                                statistic: stat.clone(),
                            },
                        ));
                    }
                }
            }
            TemplateKind::Paired => {
                for guard in template.guards() {
                    for s1 in &template.statistics {
                        for s2 in template.statistics.iter().filter(|s| *s != s1) {
                            for bucket in 0..template.pair_buckets {
                                push(template.rule(
                                    guard.clone(),
                                    RuleBody::Paired {
                                        condition: s1.clone(),
                                        bucket,
                                        buckets: template.pair_buckets,
                                        statistic: s2.clone(),
                                    },
                                ));
                            }
                        }
                    }
                }
            }
            TemplateKind::Logic => {
                if template.max_literals > features.len() {
                    return Err(Error::arg(format!(
                        "max_literals {} exceeds the {} available boolean features",
                        template.max_literals,
                        features.len()
                    )));
                }
                let bodies = conjunctions(features, template.max_literals, template.literals);
                for label in template.labels.iter().flatten() {
                    for literals in &bodies {
                        push(template.rule(
                            None,
                            RuleBody::Logic {
                                literals: literals.clone(),
                                consequent: label.clone(),
                            },
                        ));
                    }
                }
            }
        }
    }
    Ok(out.into_values().collect())
}

/// All conjunctions of 1..=k literals over features from distinct groups.
fn conjunctions(features: &[BooleanFeature], k: usize, mode: LiteralMode) -> Vec<Vec<Literal>> {
    let mut sorted: Vec<&BooleanFeature> = features.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    sorted.dedup_by(|a, b| a.name == b.name);
    let signs: &[bool] = match mode {
        LiteralMode::Positive => &[false],
        LiteralMode::Signed => &[false, true],
    };

    fn extend<'a>(
        start: usize,
        k: usize,
        features: &[&'a BooleanFeature],
        signs: &[bool],
        current: &mut Vec<Literal>,
        groups: &mut Vec<&'a str>,
        out: &mut Vec<Vec<Literal>>,
    ) {
        for i in start..features.len() {
            let f = features[i];
            if groups.contains(&f.group.as_str()) {
                continue;
            }
            for &negated in signs {
                current.push(Literal {
                    feature: f.name.clone(),
                    negated,
                });
                groups.push(&f.group);
                out.push(current.clone());
                if current.len() < k {
                    extend(i + 1, k, features, signs, current, groups, out);
                }
                groups.pop();
                current.pop();
            }
        }
    }

    let mut out = Vec::new();
    extend(0, k, &sorted, signs, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

/// Canonical signature of an abstract rule; see [`AbstractRule::signature`].
pub fn rule_signature(rule: &AbstractRule) -> String {
    rule.signature()
}
