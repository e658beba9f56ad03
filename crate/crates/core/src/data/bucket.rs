use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learned edges for one bucketed numeric column, kept so held-out data can
/// be bucketed consistently with the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEdges {
    pub column: String,
    pub edges: Vec<f64>,
}

/// Equal-frequency bucket edges: the `j / count` percentiles for
/// `j = 1..count`.
pub fn bucket_edges(values: &[f64], count: usize) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::arg(format!("bucket count must be at least 2, got {count}")));
    }
    if values.is_empty() {
        return Err(Error::arg("cannot compute bucket edges of an empty list"));
    }
    let mut sorted = values.to_vec();
    sort_finite(&mut sorted)?;
    Ok((1..count)
        .map(|j| crate::bounds::percentile_sorted(&sorted, j as f64 / count as f64))
        .collect())
}

/// Bucket of `value`: the number of edges strictly below it, so a value equal
/// to an edge lands in the lower bucket.
pub fn bucket_index(edges: &[f64], value: f64) -> usize {
    edges.partition_point(|&e| e < value)
}

pub fn bucket_name(column: &str, bucket: usize) -> String {
    format!("{column}_b{bucket}")
}

fn sort_finite(values: &mut [f64]) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::arg("NaN in bucketed values"));
    }
    values.sort_by(f64::total_cmp);
    Ok(())
}
