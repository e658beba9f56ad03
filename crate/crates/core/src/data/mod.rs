//! Tabular datasets, bucketed boolean features, splits and minibatch sampling.

mod bucket;
mod table;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bucket::{bucket_edges, bucket_index, bucket_name, BucketEdges};
pub use table::{load_table, load_table_with_edges, read_table, Derivation, FeatureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Boolean,
    Numeric,
    Categorical,
}

/// Cell storage for one column. `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Boolean(Vec<Option<bool>>),
    Numeric(Vec<Option<f64>>),
    Categorical {
        codes: Vec<Option<u32>>,
        levels: Vec<String>,
    },
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Boolean(v) => v.len(),
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Boolean(_) => ColumnKind::Boolean,
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Boolean(v) => ColumnData::Boolean(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical { codes, levels } => ColumnData::Categorical {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                levels: levels.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
    /// For bucket-derived indicator columns, the numeric column they came from.
    pub source: Option<String>,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            data: ColumnData::Numeric(values.into_iter().map(Some).collect()),
            source: None,
        }
    }

    pub fn numeric_opt(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.into(),
            data: ColumnData::Numeric(values),
            source: None,
        }
    }

    pub fn boolean(name: impl Into<String>, values: Vec<bool>) -> Self {
        Column {
            name: name.into(),
            data: ColumnData::Boolean(values.into_iter().map(Some).collect()),
            source: None,
        }
    }

    /// Categorical column; levels are assigned in order of first appearance.
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, values: &[S]) -> Self {
        Self::categorical_opt(name, values.iter().map(|v| Some(v.as_ref())))
    }

    pub fn categorical_opt<'a>(
        name: impl Into<String>,
        values: impl IntoIterator<Item = Option<&'a str>>,
    ) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let codes = values
            .into_iter()
            .map(|v| {
                v.map(|s| {
                    *index.entry(s.to_string()).or_insert_with(|| {
                        levels.push(s.to_string());
                        (levels.len() - 1) as u32
                    })
                })
            })
            .collect();
        Column {
            name: name.into(),
            data: ColumnData::Categorical { codes, levels },
            source: None,
        }
    }

    pub fn kind(&self) -> ColumnKind {
        self.data.kind()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A rectangular table of named columns. Immutable once built; every
/// transformation returns a new dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    columns: Vec<Column>,
    index: HashMap<String, usize>,
    row_ids: Vec<u64>,
    bucket_edges: Vec<BucketEdges>,
}

/// A boolean feature usable as a literal, with the column it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BooleanFeature {
    pub name: String,
    /// Literals sharing a group are mutually exclusive and never combined.
    pub group: String,
}

impl Dataset {
    /// Builds a dataset, checking rectangularity and unique column names.
    /// Row ids default to `0..rows`.
    pub fn new(name: impl Into<String>, columns: Vec<Column>) -> Result<Self> {
        let rows = columns.first().map_or(0, Column::len);
        let mut index = HashMap::with_capacity(columns.len());
        for (i, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::arg(format!(
                    "column `{}` has {} rows, expected {rows}",
                    col.name,
                    col.len()
                )));
            }
            if let ColumnData::Numeric(v) = &col.data {
                if v.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Type {
                        column: col.name.clone(),
                        message: "numeric columns must hold finite values".into(),
                    });
                }
            }
            if index.insert(col.name.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate column name `{}`", col.name)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            columns,
            index,
            row_ids: (0..rows as u64).collect(),
            bucket_edges: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn bucket_edges(&self) -> &[BucketEdges] {
        &self.bucket_edges
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.index
            .get(name)
            .map(|&i| &self.columns[i])
            .ok_or_else(|| Error::Resolution {
                what: "column",
                name: name.to_string(),
                known: self.column_names(),
            })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Numeric view of a cell: booleans read as 0/1. Categorical columns are
    /// a type error.
    pub fn number(&self, column: &Column, row: usize) -> Result<Option<f64>> {
        match &column.data {
            ColumnData::Numeric(v) => Ok(v[row]),
            ColumnData::Boolean(v) => Ok(v[row].map(|b| if b { 1.0 } else { 0.0 })),
            ColumnData::Categorical { .. } => Err(Error::Type {
                column: column.name.clone(),
                message: "expected a numeric or boolean column".into(),
            }),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_row_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.rows() {
            return Err(Error::arg("row id count does not match row count"));
        }
        self.row_ids = ids;
        Ok(self)
    }

    /// Appends a column, rejecting duplicate names and wrong lengths.
    pub fn with_column(mut self, column: Column) -> Result<Self> {
        if !self.columns.is_empty() && column.len() != self.rows() {
            return Err(Error::arg(format!(
                "column `{}` has {} rows, expected {}",
                column.name,
                column.len(),
                self.rows()
            )));
        }
        if self.index.contains_key(&column.name) {
            return Err(Error::arg(format!("duplicate column name `{}`", column.name)));
        }
        if self.columns.is_empty() {
            self.row_ids = (0..column.len() as u64).collect();
        }
        self.index.insert(column.name.clone(), self.columns.len());
        self.columns.push(column);
        Ok(self)
    }

    /// Replaces a column of the same name, or appends it.
    pub fn with_column_replaced(mut self, column: Column) -> Result<Self> {
        match self.index.get(&column.name) {
            Some(&i) => {
                if column.len() != self.rows() {
                    return Err(Error::arg(format!("column `{}` has wrong length", column.name)));
                }
                self.columns[i] = column;
                Ok(self)
            }
            None => self.with_column(column),
        }
    }

    /// Derives `count` indicator columns from a numeric column. When `edges`
    /// is `None` they are learned from this dataset's non-missing values.
    pub fn with_buckets(mut self, column: &str, count: usize, edges: Option<&[f64]>) -> Result<Self> {
        let source = self.column(column)?;
        let values: Vec<Option<f64>> = (0..self.rows())
            .map(|r| self.number(source, r))
            .collect::<Result<_>>()?;
        let edges = match edges {
            Some(e) => {
                if e.len() + 1 != count {
                    return Err(Error::arg(format!(
                        "column `{column}`: {} stored edges for {count} buckets",
                        e.len()
                    )));
                }
                e.to_vec()
            }
            None => {
                let present: Vec<f64> = values.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::arg(format!("column `{column}` has no values to bucket")));
                }
                bucket_edges(&present, count)?
            }
        };
        for b in 0..count {
            let col = Column {
                name: bucket_name(column, b),
                data: ColumnData::Boolean(
                    values
                        .iter()
                        .map(|v| v.map(|x| bucket_index(&edges, x) == b))
                        .collect(),
                ),
                source: Some(column.to_string()),
            };
            self = self.with_column(col)?;
        }
        self.bucket_edges.retain(|e| e.column != column);
        self.bucket_edges.push(BucketEdges {
            column: column.to_string(),
            edges,
        });
        Ok(self)
    }

    /// Boolean columns usable as formula literals, excluding `exclude`.
    pub fn boolean_features(&self, exclude: &[&str]) -> Vec<BooleanFeature> {
        self.columns
            .iter()
            .filter(|c| c.kind() == ColumnKind::Boolean && !exclude.contains(&c.name.as_str()))
            .map(|c| BooleanFeature {
                name: c.name.clone(),
                group: c.source.clone().unwrap_or_else(|| c.name.clone()),
            })
            .collect()
    }

    /// New dataset holding the given rows (in order, duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.rows()) {
            return Err(Error::arg(format!("row index {bad} out of range")));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                data: c.data.select(rows),
                source: c.source.clone(),
            })
            .collect();
        Ok(Dataset {
            name: self.name.clone(),
            columns,
            index: self.index.clone(),
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            bucket_edges: self.bucket_edges.clone(),
        })
    }
}

/// Row indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Floor-rounded split sizes for `rows`; the remainder goes to training.
pub fn split_sizes(rows: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(Error::arg("split fractions must each lie in (0, 1)"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg("split fractions must sum to 1"));
    }
    // The small offset absorbs products like 0.29 * 100 = 28.999999999999996.
    let floor = |f: f64| ((rows as f64) * f + 1e-9).floor() as usize;
    let valid = floor(fractions[1]);
    let test = floor(fractions[2]);
    Ok([rows - valid - test, valid, test])
}

/// Shuffles rows with `seed` and partitions them into (train, valid, test).
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [train, valid, _] = split_sizes(dataset.rows(), fractions)?;
    let mut order: Vec<usize> = (0..dataset.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = order.split_at(train);
    let (b, c) = rest.split_at(valid);
    Ok((
        dataset.select_rows(a)?,
        dataset.select_rows(b)?,
        dataset.select_rows(c)?,
    ))
}

/// Draws `count` minibatches of `batch_size` rows. Rows within a batch are
/// distinct when `batch_size <= rows`; otherwise they are drawn with
/// replacement.
pub fn sample_minibatches(
    dataset: &Dataset,
    batch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Minibatch>> {
    sample_indices(dataset.rows(), batch_size, count, seed)
}

pub(crate) fn sample_indices(
    rows: usize,
    batch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Minibatch>> {
    if batch_size == 0 || count == 0 {
        return Err(Error::arg("batch size and batch count must be positive"));
    }
    if rows == 0 {
        return Err(Error::arg("cannot sample minibatches from an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| draw_batch(&mut rng, rows, batch_size))
        .collect())
}

pub fn draw_batch<R: Rng>(rng: &mut R, rows: usize, batch_size: usize) -> Minibatch {
    let indices = if batch_size <= rows {
        rand::seq::index::sample(rng, rows, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..rows)).collect()
    };
    Minibatch { indices }
}
