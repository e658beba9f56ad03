use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::schema::{ConcreteRule, RuleBody};
use crate::stats::{f1_from_counts, surrogate_f1, NumSource, SampleReader, StatReader, Statistic, Summary};

use super::model::{argmax, score_column};

/// Model output on one minibatch together with the constant columns the
/// rules read. Label guards and logic consequents refer to the model's
/// predicted class; `score_<class>` statistics read the probabilities.
pub struct BatchOutput<'a> {
    pub dataset: &'a Dataset,
    pub rows: &'a [usize],
    /// Row-major `rows.len() × classes.len()` probabilities.
    pub probs: &'a [f64],
    pub classes: &'a [String],
    /// Temperature of the surrogate F1 consequent scores.
    pub temperature: f64,
}

impl BatchOutput<'_> {
    fn k(&self) -> usize {
        self.classes.len()
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k()..(i + 1) * self.k()]
    }

    fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    fn predicted(&self, i: usize) -> usize {
        argmax(self.p(i))
    }

    fn score_class(&self, column: &str) -> Option<usize> {
        self.classes.iter().position(|c| score_column(c) == column)
    }
}

/// Loss of one rule (or the mean over a rule set) on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// dL/dp, shaped like [`BatchOutput::probs`].
    pub grad_probs: Vec<f64>,
    /// Violated samples for per-sample rules; 0 or 1 for minibatch rules.
    pub violations: u64,
}

/// Clipped violation loss of a statistic value and its derivative:
/// `min(lo − φ, 1)` below a lower bound, `min(φ − hi, 1)` above an upper
/// bound and `min((lo − φ)(hi − φ), 1)` outside a two-sided interval. The
/// derivative is 0 when satisfied and on the clipped plateau.
pub fn bound_loss(rule: &ConcreteRule, phi: f64) -> (f64, f64) {
    if rule.admits(phi) {
        return (0.0, 0.0);
    }
    let (raw, d) = match (rule.lo, rule.hi) {
        (Some(lo), Some(hi)) => ((lo - phi) * (hi - phi), 2.0 * phi - lo - hi),
        (Some(lo), None) => (lo - phi, -1.0),
        (None, Some(hi)) => (phi - hi, 1.0),
        (None, None) => return (0.0, 0.0),
    };
    if raw >= 1.0 {
        (1.0, 0.0)
    } else {
        (raw, d)
    }
}

enum Src<'a> {
    Score(usize),
    Fixed(SampleReader<'a>),
}

impl Src<'_> {
    fn get(&self, out: &BatchOutput<'_>, i: usize) -> Option<f64> {
        match self {
            Src::Score(k) => Some(out.p(i)[*k]),
            Src::Fixed(s) => s.get(out.rows[i]),
        }
    }
}

fn sample_source<'a>(stat: &Statistic, out: &BatchOutput<'a>) -> Result<Src<'a>> {
    if let Statistic::Column(c) = stat {
        if let Some(k) = out.score_class(c) {
            return Ok(Src::Score(k));
        }
    }
    match StatReader::new(stat, out.dataset)? {
        StatReader::Sample(s) => Ok(Src::Fixed(s)),
        StatReader::Batch(..) => Err(Error::arg(format!("`{stat}` is not a per-sample statistic"))),
    }
}

fn column_source<'a>(column: &str, out: &BatchOutput<'a>) -> Result<Src<'a>> {
    match out.score_class(column) {
        Some(k) => Ok(Src::Score(k)),
        None => Ok(Src::Fixed(SampleReader::Column(NumSource::new(out.dataset, column)?))),
    }
}

fn guard_holds(rule: &ConcreteRule, out: &BatchOutput<'_>, i: usize) -> bool {
    match &rule.rule.guard {
        Some(label) => out.class_index(label) == Some(out.predicted(i)),
        None => true,
    }
}

fn finite(rule: &ConcreteRule, phi: f64) -> Result<f64> {
    if phi.is_finite() {
        Ok(phi)
    } else {
        Err(Error::NonFinite(format!("statistic of rule `{}`", rule.signature())))
    }
}

/// Violation loss of `rule` on one batch. Per-sample rules average their
/// per-sample losses over the samples they apply to.
pub fn rule_loss(rule: &ConcreteRule, out: &BatchOutput<'_>) -> Result<LossTerm> {
    let k = out.k();
    let n = out.rows.len();
    if out.probs.len() != n * k {
        return Err(Error::arg("probability matrix does not match the batch"));
    }
    let mut grad = vec![0.0; n * k];
    match &rule.rule.body {
        RuleBody::Conditional { statistic: Statistic::Mean(c) | Statistic::Std(c) } => {
            let summary = match &rule.rule.body {
                RuleBody::Conditional { statistic: Statistic::Mean(_) } => Summary::Mean,
                _ => Summary::Std,
            };
            let src = column_source(c, out)?;
            let members: Vec<(usize, f64)> = (0..n)
                .filter(|&i| guard_holds(rule, out, i))
                .filter_map(|i| src.get(out, i).map(|v| (i, v)))
                .collect();
            let values: Vec<f64> = members.iter().map(|m| m.1).collect();
            let Some(phi) = summary.apply(&values) else {
                return Ok(LossTerm { value: 0.0, grad_probs: grad, violations: 0 });
            };
            let phi = finite(rule, phi)?;
            let (value, d) = bound_loss(rule, phi);
            if let (Src::Score(c), true) = (&src, d != 0.0) {
                let m = values.len() as f64;
                for &(i, v) in &members {
                    let dphi = match summary {
                        Summary::Mean => 1.0 / m,
                        Summary::Std if phi > 0.0 => (v - phi_mean(&values)) / (m * phi),
                        Summary::Std => 0.0,
                    };
                    grad[i * k + c] += d * dphi;
                }
            }
            Ok(LossTerm {
                value,
                grad_probs: grad,
                violations: u64::from(!rule.admits(phi)),
            })
        }
        RuleBody::Conditional { statistic } => per_sample(rule, out, sample_source(statistic, out)?, None, grad),
        RuleBody::Paired { condition, statistic, .. } => {
            let range = rule
                .condition
                .ok_or_else(|| Error::arg(format!("paired rule `{}` has no bucket range", rule.signature())))?;
            let cond = sample_source(condition, out)?;
            per_sample(rule, out, sample_source(statistic, out)?, Some((cond, range)), grad)
        }
        RuleBody::Logic { literals, consequent } => {
            let cols = literals
                .iter()
                .map(|l| Ok((crate::stats::boolean_slice(out.dataset, &l.feature)?, l.negated)))
                .collect::<Result<Vec<_>>>()?;
            let target = out.class_index(consequent);
            let mut idx = Vec::new();
            let mut ante = Vec::new();
            let mut scores = Vec::new();
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            'rows: for i in 0..n {
                let mut a = true;
                for (col, negated) in &cols {
                    match col[out.rows[i]] {
                        Some(v) => a &= v != *negated,
                        None => continue 'rows,
                    }
                }
                let score = target.map_or(0.0, |t| out.p(i)[t]);
                let hard = target == Some(out.predicted(i));
                match (a, hard) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
                idx.push(i);
                ante.push(a);
                scores.push(score.clamp(0.0, 1.0));
            }
            if idx.is_empty() {
                return Ok(LossTerm { value: 0.0, grad_probs: grad, violations: 0 });
            }
            let soft = surrogate_f1(&ante, &scores, out.temperature)?;
            let phi = finite(rule, soft.value)?;
            let (value, d) = bound_loss(rule, phi);
            if let (Some(t), true) = (target, d != 0.0) {
                for (&i, g) in idx.iter().zip(&soft.grad) {
                    grad[i * k + t] += d * g;
                }
            }
            Ok(LossTerm {
                value,
                grad_probs: grad,
                violations: u64::from(!rule.admits(f1_from_counts(tp, fp, fn_))),
            })
        }
    }
}

fn phi_mean(values: &[f64]) -> f64 {
    crate::stats::mean(values).unwrap_or(0.0)
}

fn per_sample(
    rule: &ConcreteRule,
    out: &BatchOutput<'_>,
    stat: Src<'_>,
    condition: Option<(Src<'_>, crate::stats::BucketRange)>,
    mut grad: Vec<f64>,
) -> Result<LossTerm> {
    let k = out.k();
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut violations = 0;
    let mut slots = Vec::new();
    for i in 0..out.rows.len() {
        if !guard_holds(rule, out, i) {
            continue;
        }
        if let Some((cond, range)) = &condition {
            match cond.get(out, i) {
                Some(v) if range.contains(v) => {}
                _ => continue,
            }
        }
        let Some(phi) = stat.get(out, i) else { continue };
        let phi = finite(rule, phi)?;
        let (l, d) = bound_loss(rule, phi);
        total += l;
        seen += 1;
        if !rule.admits(phi) {
            violations += 1;
        }
        if let (Src::Score(c), true) = (&stat, d != 0.0) {
            slots.push((i * k + c, d));
        }
    }
    if seen == 0 {
        return Ok(LossTerm { value: 0.0, grad_probs: grad, violations: 0 });
    }
    let m = seen as f64;
    for (slot, d) in slots {
        grad[slot] += d / m;
    }
    Ok(LossTerm {
        value: total / m,
        grad_probs: grad,
        violations,
    })
}

/// Mean of [`rule_loss`] over all rules.
pub fn total_loss(rules: &[ConcreteRule], out: &BatchOutput<'_>) -> Result<LossTerm> {
    if rules.is_empty() {
        return Err(Error::arg("total loss needs at least one rule"));
    }
    let mut acc = LossTerm {
        value: 0.0,
        grad_probs: vec![0.0; out.probs.len()],
        violations: 0,
    };
    for rule in rules {
        let t = rule_loss(rule, out)?;
        acc.value += t.value;
        acc.violations += t.violations;
        for (a, g) in acc.grad_probs.iter_mut().zip(&t.grad_probs) {
            *a += g;
        }
    }
    let m = rules.len() as f64;
    acc.value /= m;
    acc.grad_probs.iter_mut().for_each(|g| *g /= m);
    Ok(acc)
}
