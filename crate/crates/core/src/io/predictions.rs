//! Predicted boxes, one JSON object per line.
//!
//! A record carries `sample_id` and either a full `box3d`, or the projected
//! center `center_2d` with `depth`, `dims` and `yaw`, which is lifted to 3D
//! with the sample's camera.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraCalib};

use super::read_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionShape {
    Box3d {
        box3d: Box3D<f64>,
    },
    Projected {
        center_2d: [f64; 2],
        depth: f64,
        dims: [f64; 3],
        yaw: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(flatten)]
    pub shape: PredictionShape,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    sample_id: String,
    box3d: Option<Box3D<f64>>,
    center_2d: Option<[f64; 2]>,
    depth: Option<f64>,
    dims: Option<[f64; 3]>,
    yaw: Option<f64>,
}

impl RawPrediction {
    fn into_record(self) -> std::result::Result<PredictionRecord, (&'static str, String)> {
        let shape = match (self.box3d, self.center_2d, self.depth, self.dims, self.yaw) {
            (Some(b), None, None, None, None) => PredictionShape::Box3d { box3d: b },
            (None, Some(c), Some(depth), Some(dims), Some(yaw)) => PredictionShape::Projected {
                center_2d: c,
                depth,
                dims,
                yaw,
            },
            (Some(_), ..) => {
                return Err((
                    "box3d",
                    "give either box3d or center_2d/depth/dims/yaw, not both".into(),
                ))
            }
            _ => {
                return Err((
                    "box3d",
                    "needs box3d or all of center_2d, depth, dims, yaw".into(),
                ))
            }
        };
        if self.sample_id.is_empty() {
            return Err(("sample_id", "empty".into()));
        }
        let rec = PredictionRecord {
            sample_id: self.sample_id,
            shape,
        };
        rec.check()?;
        Ok(rec)
    }
}

impl PredictionRecord {
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        match &self.shape {
            PredictionShape::Box3d { box3d } => {
                box3d.validate().map_err(|e| ("box3d", e.to_string()))
            }
            PredictionShape::Projected {
                center_2d,
                depth,
                dims,
                yaw,
            } => {
                if !(center_2d.iter().all(|x| x.is_finite())) {
                    return Err(("center_2d", "non-finite".into()));
                }
                if !(depth.is_finite() && *depth > 0.0) {
                    return Err(("depth", format!("must be positive, got {depth}")));
                }
                if !(dims.iter().all(|x| x.is_finite() && *x > 0.0)) {
                    return Err(("dims", format!("must be positive, got {dims:?}")));
                }
                if !yaw.is_finite() {
                    return Err(("yaw", "non-finite".into()));
                }
                Ok(())
            }
        }
    }

    pub fn needs_calib(&self) -> bool {
        matches!(self.shape, PredictionShape::Projected { .. })
    }

    /// Camera-frame box; `calib` is only consulted for projected records.
    pub fn to_box3d(&self, calib: Option<&CameraCalib<f64>>) -> Result<Box3D<f64>> {
        match &self.shape {
            PredictionShape::Box3d { box3d } => Ok(*box3d),
            PredictionShape::Projected {
                center_2d,
                depth,
                dims,
                yaw,
            } => {
                let calib = calib.ok_or_else(|| {
                    Error::Precondition(format!(
                        "prediction {} needs calibration to lift its projected center",
                        self.sample_id
                    ))
                })?;
                let center = calib.backproject_center(center_2d[0], center_2d[1], *depth)?;
                Box3D::new(center, *dims, *yaw)
            }
        }
    }
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPrediction = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |field, message| Error::Validation {
            path: path.to_owned(),
            record: lineno,
            field,
            message,
        };
        let rec = raw.into_record().map_err(|(f, m)| invalid(f, m))?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(invalid(
                "sample_id",
                format!("duplicate sample_id {:?}", rec.sample_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    parse_predictions(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_forms_parse_and_lift() {
        let text = concat!(
            r#"{"sample_id":"a","box3d":{"center":[1.0,1.5,10.0],"dims":[4.0,1.6,1.5],"yaw":0.2}}"#,
            "\n\n",
            r#"{"sample_id":"b","center_2d":[700.0,200.0],"depth":20.0,"dims":[4.0,1.6,1.5],"yaw":-0.3}"#,
            "\n"
        );
        let recs = parse_predictions(text, Path::new("p.jsonl")).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(!recs[0].needs_calib() && recs[1].needs_calib());
        assert!(recs[1].to_box3d(None).is_err());
        let cam = CameraCalib::pinhole(700.0, 700.0, 600.0, 180.0).unwrap();
        let b = recs[1].to_box3d(Some(&cam)).unwrap();
        let uv = cam.project_center(b.center).unwrap();
        assert!((uv[0] - 700.0).abs() < 1e-9 && (uv[1] - 200.0).abs() < 1e-9);
        assert_eq!(b.center[2], 20.0);

        let back: Vec<PredictionRecord> = crate::io::to_jsonl(&recs)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, recs);
    }

    #[test]
    fn errors_name_line_and_field() {
        let p = Path::new("p.jsonl");
        let err = parse_predictions("\n{\"sample_id\":\"a\",\"depth\":3}\n", p).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Validation {
                    record: 2,
                    field: "box3d",
                    ..
                }
            ),
            "{err}"
        );
        let err = parse_predictions(
            r#"{"sample_id":"a","center_2d":[1,2],"depth":-1,"dims":[1,1,1],"yaw":0}"#,
            p,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Validation { field: "depth", .. }),
            "{err}"
        );
        assert!(matches!(
            parse_predictions("{oops", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_predictions(r#"{"sample_id":"a","bogus":1}"#, p).is_err());
    }
}
