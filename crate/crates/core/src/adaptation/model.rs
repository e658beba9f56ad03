use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::stats::{LabelReader, NumSource};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Name of the score column carrying the probability of `class`.
pub fn score_column(class: &str) -> String {
    format!("score_{class}")
}

/// Softmax linear classifier behind a per-feature affine normalisation:
///
/// `h = scale ⊙ (x − norm_mean) / norm_std + shift`, `p = softmax(W h + b)`.
///
/// Only `scale` and `shift` are adapted at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub classes: Vec<String>,
    pub features: Vec<String>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    /// Row-major, one row of `features.len()` weights per class.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Gradient of a scalar loss with respect to the adaptable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ParamGrad {
    pub fn norm(&self) -> f64 {
        self.scale.iter().chain(&self.shift).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.scale.iter().chain(&self.shift).all(|g| g.is_finite())
    }
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Features {
    /// Reads the named numeric or boolean columns; every cell must be present.
    pub fn from_dataset(dataset: &Dataset, names: &[String]) -> Result<Self> {
        let sources = names
            .iter()
            .map(|n| NumSource::new(dataset, n))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(dataset.rows() * names.len());
        for r in 0..dataset.rows() {
            for (src, name) in sources.iter().zip(names) {
                values.push(src.get(r).ok_or_else(|| Error::Type {
                    column: name.clone(),
                    message: format!("missing feature value in row {r}"),
                })?);
            }
        }
        Ok(Features {
            rows: dataset.rows(),
            cols: names.len(),
            values,
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

impl SoftmaxModel {
    /// Model with zero weights and identity normalisation.
    pub fn new(classes: Vec<String>, features: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::arg("a classifier needs at least two classes"));
        }
        if features.is_empty() {
            return Err(Error::arg("a classifier needs at least one feature"));
        }
        let (k, f) = (classes.len(), features.len());
        Ok(SoftmaxModel {
            classes,
            features,
            norm_mean: vec![0.0; f],
            norm_std: vec![1.0; f],
            weight: vec![0.0; k * f],
            bias: vec![0.0; k],
            scale: vec![1.0; f],
            shift: vec![0.0; f],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    fn validate(&self) -> Result<()> {
        let (k, f) = (self.n_classes(), self.n_features());
        let ok = self.norm_mean.len() == f
            && self.norm_std.len() == f
            && self.scale.len() == f
            && self.shift.len() == f
            && self.weight.len() == k * f
            && self.bias.len() == k;
        if !ok {
            return Err(Error::arg("model parameter shapes are inconsistent"));
        }
        if self.norm_std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::arg("normalisation scales must be positive"));
        }
        let all = [&self.norm_mean, &self.norm_std, &self.weight, &self.bias, &self.scale, &self.shift];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Normalised features `(x − μ) / σ` of one row.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Class probabilities of one standardised row.
    pub fn probs_standardized(&self, xhat: &[f64]) -> Vec<f64> {
        let f = self.n_features();
        let h: Vec<f64> = xhat
            .iter()
            .zip(self.scale.iter().zip(&self.shift))
            .map(|(x, (g, b))| g * x + b)
            .collect();
        let logits: Vec<f64> = (0..self.n_classes())
            .map(|k| {
                let w = &self.weight[k * f..(k + 1) * f];
                self.bias[k] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        softmax(&logits)
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.probs_standardized(&self.standardize(x))
    }

    /// Probabilities for the given rows of `x`, flattened row-major.
    pub fn forward(&self, x: &Features, rows: &[usize]) -> Vec<f64> {
        rows.iter().flat_map(|&r| self.probs(x.row(r))).collect()
    }

    /// Back-propagates `grad_probs` (dL/dp, row-major over `rows`) to the
    /// adaptable parameters.
    pub fn backward(&self, x: &Features, rows: &[usize], probs: &[f64], grad_probs: &[f64]) -> ParamGrad {
        let (k, f) = (self.n_classes(), self.n_features());
        let mut g = ParamGrad {
            scale: vec![0.0; f],
            shift: vec![0.0; f],
        };
        for (i, &r) in rows.iter().enumerate() {
            let p = &probs[i * k..(i + 1) * k];
            let gp = &grad_probs[i * k..(i + 1) * k];
            if gp.iter().all(|v| *v == 0.0) {
                continue;
            }
            let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = p.iter().zip(gp).map(|(pi, gi)| pi * (gi - dot)).collect();
            let xhat = self.standardize(x.row(r));
            for (j, xj) in xhat.iter().enumerate() {
                let dh: f64 = (0..k).map(|c| self.weight[c * f + j] * dz[c]).sum();
                g.scale[j] += dh * xj;
                g.shift[j] += dh;
            }
        }
        g
    }

    /// Fits normalisation statistics, weights and bias to labelled data by
    /// full-batch gradient descent on cross-entropy. Scale and shift are reset
    /// to the identity.
    pub fn fit(dataset: &Dataset, features: &[String], label: &str, iterations: usize, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        let classes = match &dataset.column(label)?.data {
            crate::data::ColumnData::Categorical { levels, .. } => {
                let mut c = levels.clone();
                c.sort();
                c
            }
            _ => {
                return Err(Error::Type {
                    column: label.to_string(),
                    message: "labels must be categorical".into(),
                })
            }
        };
        let mut model = SoftmaxModel::new(classes, features.to_vec())?;
        let x = Features::from_dataset(dataset, features)?;
        let readers = model
            .classes
            .iter()
            .map(|c| LabelReader::new(dataset, label, c))
            .collect::<Result<Vec<_>>>()?;
        let labelled: Vec<(usize, usize)> = (0..dataset.rows())
            .filter_map(|r| readers.iter().position(|l| l.holds(r) == Some(true)).map(|k| (r, k)))
            .collect();
        if labelled.is_empty() {
            return Err(Error::arg("no labelled rows to fit"));
        }

        let (k, f) = (model.n_classes(), model.n_features());
        for j in 0..f {
            let col: Vec<f64> = labelled.iter().map(|&(r, _)| x.row(r)[j]).collect();
            model.norm_mean[j] = crate::stats::mean(&col).unwrap_or(0.0);
            let s = crate::stats::std_dev(&col).unwrap_or(1.0);
            model.norm_std[j] = if s > 0.0 { s } else { 1.0 };
        }
        let xhat: Vec<Vec<f64>> = labelled.iter().map(|&(r, _)| model.standardize(x.row(r))).collect();
        let n = labelled.len() as f64;
        for _ in 0..iterations {
            let mut gw = vec![0.0; k * f];
            let mut gb = vec![0.0; k];
            for (xr, &(_, y)) in xhat.iter().zip(&labelled) {
                let p = model.probs_standardized(xr);
                for c in 0..k {
                    let d = p[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += d / n;
                    for j in 0..f {
                        gw[c * f + j] += d * xr[j] / n;
                    }
                }
            }
            for (w, g) in model.weight.iter_mut().zip(&gw) {
                *w -= learning_rate * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= learning_rate * g;
            }
        }
        model.validate()?;
        Ok(model)
    }

    /// Adds `score_<class>` columns and a categorical `prediction_column`
    /// holding the most probable class (first on ties).
    pub fn predict(&self, dataset: &Dataset, prediction_column: &str) -> Result<Dataset> {
        let x = Features::from_dataset(dataset, &self.features)?;
        let rows: Vec<usize> = (0..dataset.rows()).collect();
        let probs = self.forward(&x, &rows);
        let k = self.n_classes();
        let mut out = dataset.clone();
        for (c, class) in self.classes.iter().enumerate() {
            let scores = (0..rows.len()).map(|i| probs[i * k + c]).collect();
            out = out.with_column_replaced(Column::numeric(score_column(class), scores))?;
        }
        let labels: Vec<&str> = (0..rows.len())
            .map(|i| self.classes[argmax(&probs[i * k..(i + 1) * k])].as_str())
            .collect();
        out.with_column_replaced(Column::categorical(prediction_column, &labels))
    }

    /// Order-sensitive FNV-1a checksum of the frozen parameters.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [&self.norm_mean, &self.norm_std, &self.weight, &self.bias] {
            for x in v.iter() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let parameters = BTreeMap::from([
            ("bias".to_string(), self.bias.clone()),
            ("norm_mean".to_string(), self.norm_mean.clone()),
            ("norm_std".to_string(), self.norm_std.clone()),
            ("scale".to_string(), self.scale.clone()),
            ("shift".to_string(), self.shift.clone()),
            ("weight".to_string(), self.weight.clone()),
        ]);
        Checkpoint {
            format_version: MODEL_FORMAT_VERSION,
            classes: self.classes.clone(),
            features: self.features.clone(),
            parameters,
            adaptable: vec!["scale".into(), "shift".into()],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                what: "model checkpoint",
                found: ck.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let mut take = |name: &str| {
            ck.parameters
                .remove(name)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing parameter `{name}`")))
        };
        let model = SoftmaxModel {
            norm_mean: take("norm_mean")?,
            norm_std: take("norm_std")?,
            weight: take("weight")?,
            bias: take("bias")?,
            scale: take("scale")?,
            shift: take("shift")?,
            classes: ck.classes,
            features: ck.features,
        };
        if let Some(extra) = ck.parameters.keys().next() {
            return Err(Error::parse("checkpoint", format!("unknown parameter `{extra}`")));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.to_checkpoint())?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_reader(reader)?)
    }
}

/// Serialised form of a [`SoftmaxModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub features: Vec<String>,
    pub parameters: BTreeMap<String, Vec<f64>>,
    pub adaptable: Vec<String>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SoftmaxModel {
        let mut m = SoftmaxModel::new(vec!["a".into(), "b".into(), "c".into()], vec!["x".into(), "y".into()]).unwrap();
        m.weight = vec![0.5, -1.0, 0.3, 0.8, -0.2, 0.1];
        m.bias = vec![0.1, -0.3, 0.0];
        m.norm_mean = vec![1.0, -2.0];
        m.norm_std = vec![2.0, 0.5];
        m.scale = vec![1.2, 0.7];
        m.shift = vec![-0.1, 0.4];
        m
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = toy();
        for x in [[0.0, 0.0], [10.0, -5.0], [-300.0, 900.0]] {
            let p = m.probs(&x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = toy();
        let x = Features {
            rows: 2,
            cols: 2,
            values: vec![0.3, -1.0, 2.0, 0.5],
        };
        let rows = [0, 1];
        // L = Σ c·p with fixed coefficients, so dL/dp = c.
        let coef = [0.3, -1.2, 0.7, 1.1, 0.2, -0.4];
        let loss = |m: &SoftmaxModel| m.forward(&x, &rows).iter().zip(&coef).map(|(p, c)| p * c).sum::<f64>();
        let g = m.backward(&x, &rows, &m.forward(&x, &rows), &coef);
        let h = 1e-6;
        for j in 0..2 {
            let (mut up, mut dn) = (m.clone(), m.clone());
            up.scale[j] += h;
            dn.scale[j] -= h;
            assert!(((loss(&up) - loss(&dn)) / (2.0 * h) - g.scale[j]).abs() < 1e-8);
            let (mut up, mut dn) = (m.clone(), m.clone());
            up.shift[j] += h;
            dn.shift[j] -= h;
            assert!(((loss(&up) - loss(&dn)) / (2.0 * h) - g.shift[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy();
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = SoftmaxModel::read(text.as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.frozen_checksum(), m.frozen_checksum());
        assert!(text.contains("\"adaptable\":[\"scale\",\"shift\"]"));
    }

    #[test]
    fn fit_separates_two_clusters() {
        let xs: Vec<f64> = (0..40).map(|i| if i < 20 { -2.0 + i as f64 * 0.01 } else { 2.0 + i as f64 * 0.01 }).collect();
        let labels: Vec<&str> = (0..40).map(|i| if i < 20 { "neg" } else { "pos" }).collect();
        let d = Dataset::new("t", vec![Column::numeric("x", xs), Column::categorical("y", &labels)]).unwrap();
        let m = SoftmaxModel::fit(&d, &["x".to_string()], "y", 200, 0.5).unwrap();
        let pred = m.predict(&d, "prediction").unwrap();
        let reader = LabelReader::new(&pred, "prediction", "pos").unwrap();
        assert!((0..40).all(|r| reader.holds(r) == Some(r >= 20)));
        assert!(pred.has_column("score_pos"));
    }
}
