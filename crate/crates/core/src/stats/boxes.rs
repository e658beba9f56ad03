use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};

pub const BOX_COLUMNS: [&str; 4] = ["x_min", "y_min", "x_max", "y_max"];

/// One labelled bounding box in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub label: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::arg(format!(
                "box coordinates must be finite and non-negative: {coords:?}"
            )));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::arg(format!("degenerate box {coords:?}")));
        }
        Ok(())
    }
}

/// Reads a JSON array of box objects.
pub fn read_boxes<R: Read>(reader: R) -> Result<Vec<BoxRecord>> {
    let boxes: Vec<BoxRecord> = serde_json::from_reader(reader)?;
    for (i, b) in boxes.iter().enumerate() {
        b.validate()
            .map_err(|e| Error::parse(format!("box {i}"), e.to_string()))?;
    }
    Ok(boxes)
}

/// Loads a box-prediction file as a dataset with columns `label`, the four
/// coordinates and `score`.
pub fn load_boxes(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let boxes = read_boxes(BufReader::new(file))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    boxes_to_dataset(&name, &boxes)
}

pub fn boxes_to_dataset(name: &str, boxes: &[BoxRecord]) -> Result<Dataset> {
    let pick = |f: fn(&BoxRecord) -> f64| boxes.iter().map(f).collect::<Vec<_>>();
    Dataset::new(
        name,
        vec![
            Column::categorical_opt("label", boxes.iter().map(|b| Some(b.label.as_str()))),
            Column::numeric("x_min", pick(|b| b.x_min)),
            Column::numeric("y_min", pick(|b| b.y_min)),
            Column::numeric("x_max", pick(|b| b.x_max)),
            Column::numeric("y_max", pick(|b| b.y_max)),
            Column::numeric_opt("score", boxes.iter().map(|b| b.score).collect()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{eval_statistic, BoxStat, StatValue, Statistic};

    #[test]
    fn parses_boxes_with_optional_score() {
        let text = r#"[
            {"label": "car", "x_min": 0, "y_min": 0, "x_max": 10, "y_max": 20, "score": 0.9},
            {"label": "person", "x_min": 2, "y_min": 3, "x_max": 6, "y_max": 9}
        ]"#;
        let boxes = read_boxes(text.as_bytes()).unwrap();
        assert_eq!(boxes[1].score, None);
        let d = boxes_to_dataset("b", &boxes).unwrap();
        let v = eval_statistic(&Statistic::Box(BoxStat::AspectRatio), &d, &[0, 1]).unwrap();
        assert_eq!(v, StatValue::PerSample(vec![Some(0.5), Some(4.0 / 6.0)]));
    }

    #[test]
    fn rejects_inverted_boxes() {
        let text = r#"[{"label": "car", "x_min": 5, "y_min": 0, "x_max": 1, "y_max": 2}]"#;
        assert!(read_boxes(text.as_bytes()).is_err());
        let text = r#"[{"label": "car", "x_min": 0, "y_min": 0, "x_max": 1, "y_max": 2, "extra": 1}]"#;
        assert!(read_boxes(text.as_bytes()).is_err());
    }
}
