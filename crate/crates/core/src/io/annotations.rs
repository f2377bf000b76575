use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Occlusion;
use crate::geometry::{Box2D, Box3D};

use super::{read_text, to_jsonl, write_atomic};

/// One grounding annotation: a caption referring to a single object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub image_id: String,
    pub caption: String,
    pub category: String,
    pub gt_box3d: Box3D<f64>,
    #[serde(with = "box2d_array")]
    pub gt_box2d: Box2D<f64>,
    pub occlusion: Occlusion,
    pub truncation: f64,
    pub calib_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
}

mod box2d_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::Box2D;

    pub fn serialize<S: Serializer>(b: &Box2D<f64>, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Box2D<f64>, D::Error> {
        let [left, top, right, bottom] = <[f64; 4]>::deserialize(d)?;
        Ok(Box2D {
            left,
            top,
            right,
            bottom,
        })
    }
}

impl AnnotationRecord {
    /// Whitespace-separated caption words.
    pub fn words(&self) -> Vec<String> {
        self.caption.split_whitespace().map(str::to_owned).collect()
    }

    /// Checks field invariants, returning the offending field name.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.sample_id.is_empty() {
            return Err(("sample_id", "empty".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(("caption", "empty caption".into()));
        }
        self.gt_box3d
            .validate()
            .map_err(|e| ("gt_box3d", e.to_string()))?;
        self.gt_box2d
            .validate()
            .map_err(|e| ("gt_box2d", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.truncation) {
            return Err(("truncation", format!("{} outside [0, 1]", self.truncation)));
        }
        Ok(())
    }
}

/// Parses JSON-lines annotation text; blank lines are skipped.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message: e.to_string(),
        })?;
        rec.check().map_err(|(field, message)| Error::Validation {
            path: path.to_owned(),
            record: lineno,
            field,
            message,
        })?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(Error::Validation {
                path: path.to_owned(),
                record: lineno,
                field: "sample_id",
                message: format!("duplicate sample_id {:?}", rec.sample_id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&read_text(path)?, path)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"sample_id":"s1","image_id":"000123","caption":"the white car on the left","category":"car","gt_box3d":{"center":[-3.2,1.6,14.5],"dims":[4.1,1.7,1.5],"yaw":0.12},"gt_box2d":[100.0,150.0,260.0,230.0],"occlusion":0,"truncation":0.0,"calib_ref":"000123"}"#;

    #[test]
    fn parses_and_round_trips() {
        let p = Path::new("a.jsonl");
        let recs = parse_annotations(&format!("{LINE}\n\n"), p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].occlusion, Occlusion::None);
        assert_eq!(recs[0].words().len(), 6);
        let text = to_jsonl(&recs).unwrap();
        assert_eq!(parse_annotations(&text, p).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_annotations("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn errors_carry_location() {
        let p = Path::new("a.jsonl");
        let bad_box = LINE.replace("[100.0,150.0,260.0,230.0]", "[260.0,150.0,100.0,230.0]");
        match parse_annotations(&format!("{LINE}\n{bad_box}"), p) {
            Err(Error::Validation { field, record, .. }) => {
                assert_eq!((field, record), ("gt_box2d", 2));
            }
            other => panic!("{other:?}"),
        }
        match parse_annotations(&format!("{LINE}\n{{not json"), p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_annotations(&format!("{LINE}\n{LINE}"), p) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "sample_id"),
            other => panic!("{other:?}"),
        }
        let empty_caption = LINE.replace("the white car on the left", " ");
        match parse_annotations(&empty_caption, p) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "caption"),
            other => panic!("{other:?}"),
        }
    }
}
