use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BucketEdges, Column, ColumnData, ColumnKind, Dataset};
use crate::error::{Error, Result};

/// How a source column enters the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Derivation {
    #[default]
    Passthrough,
    /// Keep the column and add `n` equal-frequency indicator columns.
    Bucket(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub column: String,
    /// Forces the column kind instead of inferring it from the cells.
    #[serde(default)]
    pub kind: Option<ColumnKind>,
    #[serde(default)]
    pub derivation: Derivation,
}

impl FeatureSpec {
    pub fn passthrough(column: impl Into<String>) -> Self {
        FeatureSpec {
            column: column.into(),
            kind: None,
            derivation: Derivation::Passthrough,
        }
    }

    pub fn typed(column: impl Into<String>, kind: ColumnKind) -> Self {
        FeatureSpec {
            kind: Some(kind),
            ..Self::passthrough(column)
        }
    }

    pub fn bucket(column: impl Into<String>, count: usize) -> Self {
        FeatureSpec {
            column: column.into(),
            kind: Some(ColumnKind::Numeric),
            derivation: Derivation::Bucket(count),
        }
    }

    /// Names of the columns this spec contributes.
    pub fn derived_names(&self) -> Vec<String> {
        match self.derivation {
            Derivation::Passthrough => vec![self.column.clone()],
            Derivation::Bucket(n) => std::iter::once(self.column.clone())
                .chain((0..n).map(|b| super::bucket_name(&self.column, b)))
                .collect(),
        }
    }
}

/// Loads a comma-separated table with a header row. Bucket edges are learned
/// from this file.
pub fn load_table(path: impl AsRef<Path>, specs: &[FeatureSpec]) -> Result<Dataset> {
    load(path.as_ref(), specs, None)
}

/// Like [`load_table`], but buckets with previously learned edges.
pub fn load_table_with_edges(
    path: impl AsRef<Path>,
    specs: &[FeatureSpec],
    edges: &[BucketEdges],
) -> Result<Dataset> {
    load(path.as_ref(), specs, Some(edges))
}

fn load(path: &Path, specs: &[FeatureSpec], edges: Option<&[BucketEdges]>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_table(file, &name, specs, edges)
}

/// Parses delimited text from any reader. Empty fields are missing cells.
pub fn read_table<R: Read>(
    reader: R,
    name: &str,
    specs: &[FeatureSpec],
    edges: Option<&[BucketEdges]>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse("line 1", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    let mut lines: Vec<u64> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(format!("line {line}"), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (slot, field) in cells.iter_mut().zip(record.iter()) {
            let field = field.trim();
            slot.push((!field.is_empty()).then(|| field.to_string()));
        }
        lines.push(line);
    }

    let mut forced: HashMap<&str, ColumnKind> = HashMap::new();
    for spec in specs {
        if !header.iter().any(|h| h == &spec.column) {
            return Err(Error::Resolution {
                what: "column",
                name: spec.column.clone(),
                known: header.clone(),
            });
        }
        if let Some(kind) = spec.kind {
            forced.insert(spec.column.as_str(), kind);
        } else if matches!(spec.derivation, Derivation::Bucket(_)) {
            forced.insert(spec.column.as_str(), ColumnKind::Numeric);
        }
    }

    let mut columns = Vec::with_capacity(header.len());
    for (col_name, raw) in header.iter().zip(cells) {
        let kind = match forced.get(col_name.as_str()) {
            Some(&k) => k,
            None => infer_kind(&raw),
        };
        columns.push(build_column(col_name, kind, &raw, &lines)?);
    }

    let mut dataset = Dataset::new(name, columns)?;
    for spec in specs {
        if let Derivation::Bucket(count) = spec.derivation {
            let learned = edges
                .map(|all| {
                    all.iter()
                        .find(|e| e.column == spec.column)
                        .map(|e| e.edges.as_slice())
                        .ok_or_else(|| Error::Resolution {
                            what: "bucket edges for column",
                            name: spec.column.clone(),
                            known: all.iter().map(|e| e.column.clone()).collect(),
                        })
                })
                .transpose()?;
            if count < 2 {
                return Err(Error::arg(format!(
                    "column `{}`: bucket count must be at least 2",
                    spec.column
                )));
            }
            if dataset.rows() == 0 && learned.is_none() {
                continue;
            }
            dataset = dataset.with_buckets(&spec.column, count, learned)?;
        }
    }
    Ok(dataset)
}

fn infer_kind(raw: &[Option<String>]) -> ColumnKind {
    let mut all_binary = true;
    for cell in raw.iter().flatten() {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => all_binary &= v == 0.0 || v == 1.0,
            _ => return ColumnKind::Categorical,
        }
    }
    if all_binary && raw.iter().any(Option::is_some) {
        ColumnKind::Boolean
    } else {
        ColumnKind::Numeric
    }
}

fn build_column(name: &str, kind: ColumnKind, raw: &[Option<String>], lines: &[u64]) -> Result<Column> {
    let type_error = |row: usize, cell: &str, expected: &str| Error::Type {
        column: name.to_string(),
        message: format!("line {}: `{cell}` is not {expected}", lines[row]),
    };
    let data = match kind {
        ColumnKind::Numeric => ColumnData::Numeric(
            raw.iter()
                .enumerate()
                .map(|(row, cell)| {
                    cell.as_deref()
                        .map(|c| match c.parse::<f64>() {
                            Ok(v) if v.is_finite() => Ok(v),
                            _ => Err(type_error(row, c, "a finite number")),
                        })
                        .transpose()
                })
                .collect::<Result<_>>()?,
        ),
        ColumnKind::Boolean => ColumnData::Boolean(
            raw.iter()
                .enumerate()
                .map(|(row, cell)| {
                    cell.as_deref()
                        .map(|c| match c {
                            "1" | "true" | "True" | "TRUE" => Ok(true),
                            "0" | "false" | "False" | "FALSE" => Ok(false),
                            _ => match c.parse::<f64>() {
                                Ok(1.0) => Ok(true),
                                Ok(0.0) => Ok(false),
                                _ => Err(type_error(row, c, "a boolean (0/1)")),
                            },
                        })
                        .transpose()
                })
                .collect::<Result<_>>()?,
        ),
        ColumnKind::Categorical => {
            return Ok(Column::categorical_opt(name, raw.iter().map(|c| c.as_deref())));
        }
    };
    Ok(Column {
        name: name.to_string(),
        data,
        source: None,
    })
}
