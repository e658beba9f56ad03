use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::schema::Literal;

use super::observe::{EvalContext, LogicReader};

/// A conjunction of literals implying `target = consequent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub antecedent: Vec<Literal>,
    pub consequent: String,
}

/// `2·TP / (2·TP + FP + FN)`, or 0 when the denominator vanishes.
pub fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom > 0.0 {
        2.0 * tp / denom
    } else {
        0.0
    }
}

/// Exact F1 of `formula` over `rows`, reading the antecedent as the predicted
/// positives and `target = consequent` as the actual positives. Rows with a
/// missing cell are ignored.
pub fn f1_score(formula: &Formula, dataset: &Dataset, rows: &[usize], ctx: &EvalContext) -> Result<f64> {
    let reader = LogicReader::new(&formula.antecedent, &formula.consequent, dataset, ctx)?;
    Ok(reader.f1(rows).unwrap_or(0.0))
}

/// Surrogate F1 and its gradient with respect to each consequent score.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftF1 {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Temperature-scaled relaxation of a probability: `σ(logit(p) / T)`, with
/// its derivative in `p`. At `T = 1` this is the identity.
pub fn soften(p: f64, temperature: f64) -> (f64, f64) {
    if temperature == 1.0 {
        return (p, 1.0);
    }
    let a = 1.0 / temperature;
    let c = if p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        let z = (p.ln() - (1.0 - p).ln()) * a;
        1.0 / (1.0 + (-z).exp())
    };
    let q = p.clamp(1e-12, 1.0 - 1e-12);
    let dc = a * c * (1.0 - c) / (q * (1.0 - q));
    (c, dc)
}

/// Differentiable F1 of `antecedent ⇒ consequent` where the consequent is
/// given as scores in `[0, 1]`. Confusion counts use the softened scores:
/// `tp = Σ a·c`, `fp = Σ a·(1−c)`, `fn = Σ (1−a)·c`.
pub fn surrogate_f1(antecedent: &[bool], scores: &[f64], temperature: f64) -> Result<SoftF1> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    if antecedent.len() != scores.len() {
        return Err(Error::arg("antecedent and score lengths differ"));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::arg(format!("score {bad} outside [0, 1]")));
    }
    let soft: Vec<(f64, f64)> = scores.iter().map(|&p| soften(p, temperature)).collect();
    let mut tp = 0.0;
    let mut support = 0.0;
    let mut total = 0.0;
    for (&a, &(c, _)) in antecedent.iter().zip(&soft) {
        total += c;
        if a {
            tp += c;
            support += 1.0;
        }
    }
    // 2tp + fp + fn collapses to Σc + |A|.
    let denom = total + support;
    if denom <= 0.0 {
        return Ok(SoftF1 {
            value: 0.0,
            grad: vec![0.0; scores.len()],
        });
    }
    let value = 2.0 * tp / denom;
    let grad = antecedent
        .iter()
        .zip(&soft)
        .map(|(&a, &(_, dc))| {
            let a = if a { 1.0 } else { 0.0 };
            (2.0 * a * denom - 2.0 * tp) / (denom * denom) * dc
        })
        .collect();
    Ok(SoftF1 { value, grad })
}
