//! Sample- and minibatch-level statistics.

mod boxes;
mod f1;
mod observe;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnData, Dataset};
use crate::error::{Error, Result};

pub use boxes::{boxes_to_dataset, load_boxes, read_boxes, BoxRecord, BOX_COLUMNS};
pub use f1::{f1_from_counts, f1_score, soften, surrogate_f1, Formula, SoftF1};
pub use observe::{BucketRange, EvalContext, Observation, RuleProbe};
pub(crate) use observe::{LabelReader, NumSource, SampleReader, StatReader, Summary};

/// Geometric statistics of one bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxStat {
    AspectRatio,
    Width,
    Height,
    Area,
    CenterX,
    BottomY,
}

impl BoxStat {
    pub const ALL: [BoxStat; 6] = [
        BoxStat::AspectRatio,
        BoxStat::Width,
        BoxStat::Height,
        BoxStat::Area,
        BoxStat::CenterX,
        BoxStat::BottomY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoxStat::AspectRatio => "aspect_ratio",
            BoxStat::Width => "width",
            BoxStat::Height => "height",
            BoxStat::Area => "area",
            BoxStat::CenterX => "center_x",
            BoxStat::BottomY => "bottom_y",
        }
    }

    pub fn from_name(name: &str) -> Option<BoxStat> {
        BoxStat::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Evaluates on `(x_min, y_min, x_max, y_max)`.
    pub fn apply(self, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> f64 {
        let w = x_max - x_min;
        let h = y_max - y_min;
        match self {
            BoxStat::AspectRatio => w / h,
            BoxStat::Width => w,
            BoxStat::Height => h,
            BoxStat::Area => w * h,
            BoxStat::CenterX => (x_min + x_max) / 2.0,
            BoxStat::BottomY => y_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    PerSample,
    PerMinibatch,
}

/// A named statistic φ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Reads a numeric or boolean column.
    Column(String),
    Box(BoxStat),
    /// Mean of a column over a minibatch.
    Mean(String),
    /// Population standard deviation of a column over a minibatch.
    Std(String),
}

impl Statistic {
    pub fn arity(&self) -> Arity {
        match self {
            Statistic::Column(_) | Statistic::Box(_) => Arity::PerSample,
            Statistic::Mean(_) | Statistic::Std(_) => Arity::PerMinibatch,
        }
    }

    /// Columns the statistic reads.
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Statistic::Column(c) | Statistic::Mean(c) | Statistic::Std(c) => vec![c.as_str()],
            Statistic::Box(_) => BOX_COLUMNS.to_vec(),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Column(c) => f.write_str(c),
            Statistic::Box(b) => f.write_str(b.name()),
            Statistic::Mean(c) => write!(f, "mean({c})"),
            Statistic::Std(c) => write!(f, "std({c})"),
        }
    }
}

/// Resolves statistic names. Box statistics are always known; column,
/// `mean(col)` and `std(col)` names are known for registered columns.
#[derive(Debug, Clone, Default)]
pub struct StatisticRegistry {
    columns: Vec<String>,
}

impl StatisticRegistry {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        StatisticRegistry {
            columns: columns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.column_names())
    }

    pub fn resolve(&self, name: &str) -> Result<Statistic> {
        let name = name.trim();
        if let Some(b) = BoxStat::from_name(name) {
            return Ok(Statistic::Box(b));
        }
        for (prefix, make) in [
            ("mean(", Statistic::Mean as fn(String) -> Statistic),
            ("std(", Statistic::Std),
        ] {
            if let Some(inner) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')) {
                let inner = inner.trim();
                if self.columns.iter().any(|c| c == inner) {
                    return Ok(make(inner.to_string()));
                }
            }
        }
        if self.columns.iter().any(|c| c == name) {
            return Ok(Statistic::Column(name.to_string()));
        }
        Err(Error::Resolution {
            what: "statistic",
            name: name.to_string(),
            known: self.known_names(),
        })
    }

    pub fn known_names(&self) -> Vec<String> {
        let mut known: Vec<String> = BoxStat::ALL.iter().map(|b| b.name().to_string()).collect();
        known.extend(self.columns.iter().cloned());
        if !self.columns.is_empty() {
            known.push("mean(<column>)".into());
            known.push("std(<column>)".into());
        }
        known
    }
}

/// Result of evaluating a statistic on a sample or minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum StatValue {
    /// One entry per input row; `None` flags a row skipped for missing data.
    PerSample(Vec<Option<f64>>),
    /// `None` when every row of the batch was missing.
    Batch(Option<f64>),
}

/// Evaluates `stat` on the given rows of `dataset`.
pub fn eval_statistic(stat: &Statistic, dataset: &Dataset, rows: &[usize]) -> Result<StatValue> {
    let reader = observe::StatReader::new(stat, dataset)?;
    match reader {
        observe::StatReader::Sample(s) => Ok(StatValue::PerSample(rows.iter().map(|&r| s.get(r)).collect())),
        observe::StatReader::Batch(summary, col) => {
            let values: Vec<f64> = rows.iter().filter_map(|&r| col.get(r)).collect();
            Ok(StatValue::Batch(summary.apply(&values)))
        }
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

pub(crate) fn boolean_slice<'a>(dataset: &'a Dataset, name: &str) -> Result<&'a [Option<bool>]> {
    match &dataset.column(name)?.data {
        ColumnData::Boolean(v) => Ok(v),
        _ => Err(Error::Type {
            column: name.to_string(),
            message: "formula literals must reference boolean columns".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;

    #[test]
    fn box_geometry() {
        assert_eq!(BoxStat::AspectRatio.apply(0.0, 0.0, 10.0, 20.0), 0.5);
        let (x0, y0, x1, y1) = (2.0, 3.0, 6.0, 9.0);
        assert_eq!(BoxStat::Width.apply(x0, y0, x1, y1), 4.0);
        assert_eq!(BoxStat::Height.apply(x0, y0, x1, y1), 6.0);
        assert_eq!(BoxStat::Area.apply(x0, y0, x1, y1), 24.0);
        assert_eq!(BoxStat::CenterX.apply(x0, y0, x1, y1), 4.0);
        assert_eq!(BoxStat::BottomY.apply(x0, y0, x1, y1), 9.0);
    }

    #[test]
    fn batch_mean_and_missing_rows() {
        let d = Dataset::new(
            "t",
            vec![Column::numeric_opt("x", vec![Some(1.0), Some(2.0), Some(3.0), None])],
        )
        .unwrap();
        let mean = eval_statistic(&Statistic::Mean("x".into()), &d, &[0, 1, 2]).unwrap();
        assert_eq!(mean, StatValue::Batch(Some(2.0)));
        let per = eval_statistic(&Statistic::Column("x".into()), &d, &[3, 0]).unwrap();
        assert_eq!(per, StatValue::PerSample(vec![None, Some(1.0)]));
        assert!(matches!(
            eval_statistic(&Statistic::Column("nope".into()), &d, &[0]),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn registry_resolution() {
        let reg = StatisticRegistry::new(["speed", "hr"]);
        assert_eq!(reg.resolve("aspect_ratio").unwrap(), Statistic::Box(BoxStat::AspectRatio));
        assert_eq!(reg.resolve("hr").unwrap(), Statistic::Column("hr".into()));
        assert_eq!(reg.resolve("std(speed)").unwrap(), Statistic::Std("speed".into()));
        match reg.resolve("volume") {
            Err(Error::Resolution { known, .. }) => assert!(known.contains(&"speed".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn display_round_trips_through_registry() {
        let reg = StatisticRegistry::new(["a"]);
        for s in [
            Statistic::Column("a".into()),
            Statistic::Mean("a".into()),
            Statistic::Std("a".into()),
            Statistic::Box(BoxStat::BottomY),
        ] {
            assert_eq!(reg.resolve(&s.to_string()).unwrap(), s);
        }
    }

    #[test]
    fn population_std() {
        assert_eq!(std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), Some(2.0));
        assert_eq!(std_dev(&[]), None);
    }
}
