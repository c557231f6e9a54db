//! Pair list files: a JSON array of
//! `{src, trg, label, category, keypoints: [[x, y, x', y'], ...]}`
//! with an optional `trg_bbox: [x0, y0, x1, y1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeypointPair, Label, PairAnnotation};
use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Serialize, Deserialize)]
struct PairRecord {
    src: String,
    trg: String,
    #[serde(default = "unlabeled")]
    label: Label,
    #[serde(default)]
    category: String,
    #[serde(default)]
    keypoints: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trg_bbox: Option<[f64; 4]>,
}

fn unlabeled() -> Label {
    Label::Unlabeled
}

impl From<&PairAnnotation> for PairRecord {
    fn from(a: &PairAnnotation) -> Self {
        PairRecord {
            src: a.src_id.clone(),
            trg: a.trg_id.clone(),
            label: a.label,
            category: a.category.clone(),
            keypoints: a
                .keypoints
                .iter()
                .map(|k| [k.src[0], k.src[1], k.trg[0], k.trg[1]])
                .collect(),
            trg_bbox: a.trg_bbox,
        }
    }
}

impl From<PairRecord> for PairAnnotation {
    fn from(r: PairRecord) -> Self {
        PairAnnotation {
            src_id: r.src,
            trg_id: r.trg,
            keypoints: r
                .keypoints
                .into_iter()
                .map(|[x, y, xp, yp]| KeypointPair {
                    src: [x, y],
                    trg: [xp, yp],
                })
                .collect(),
            label: r.label,
            category: r.category,
            trg_bbox: r.trg_bbox,
        }
    }
}

pub fn parse_pair_list(text: &str) -> Result<Vec<PairAnnotation>> {
    let records: Vec<PairRecord> = serde_json::from_str(text)?;
    let pairs: Vec<PairAnnotation> = records.into_iter().map(Into::into).collect();
    for p in &pairs {
        if p.keypoints.iter().any(|k| !(k.src.iter().chain(&k.trg)).all(|v| v.is_finite())) {
            return Err(Error::Validation(format!(
                "pair {} -> {} has non-finite keypoints",
                p.src_id, p.trg_id
            )));
        }
    }
    Ok(pairs)
}

pub fn to_pair_list_json(pairs: &[PairAnnotation]) -> Result<String> {
    let records: Vec<PairRecord> = pairs.iter().map(Into::into).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn load_pair_list(path: impl AsRef<Path>) -> Result<Vec<PairAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pair_list(&text)
}

pub fn save_pair_list(path: impl AsRef<Path>, pairs: &[PairAnnotation]) -> Result<()> {
    write_atomic(path.as_ref(), to_pair_list_json(pairs)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_shape() {
        let text = r#"[
            {"src": "a", "trg": "b", "label": "positive", "category": "cat",
             "keypoints": [[1, 2, 3, 4], [5.5, 6, 7, 8]]},
            {"src": "a", "trg": "c", "label": "negative", "category": "dog", "keypoints": []}
        ]"#;
        let pairs = parse_pair_list(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].keypoints[1].src, [5.5, 6.0]);
        assert_eq!(pairs[0].keypoints[1].trg, [7.0, 8.0]);
        assert_eq!(pairs[1].label, Label::Negative);
        let again = parse_pair_list(&to_pair_list_json(&pairs).unwrap()).unwrap();
        assert_eq!(again, pairs);
    }

    #[test]
    fn rejects_malformed_lists() {
        assert!(parse_pair_list(r#"[{"src": "a"}]"#).is_err());
        assert!(parse_pair_list(r#"[{"src": "a", "trg": "b", "keypoints": [[1, 2, 3]]}]"#).is_err());
    }
}
