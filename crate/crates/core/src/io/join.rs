//! Cross-references between annotation, prediction and embedding files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalSample;
use crate::geometry::CameraCalib;
use crate::lexical::CaptionRecord;

use super::{load_calib_dir, AnnotationRecord, EmbeddingFile, PredictionRecord};

/// Pairs every annotation with its prediction.
///
/// Predictions for unknown samples and annotations without a prediction
/// are both errors listing the offending ids. Projected predictions are
/// lifted with `<calib_dir>/<calib_ref>.txt`.
pub fn eval_samples(
    annotations: &[AnnotationRecord],
    predictions: &[PredictionRecord],
    calib_dir: Option<&Path>,
) -> Result<Vec<EvalSample<f64>>> {
    let known: HashSet<&str> = annotations.iter().map(|a| a.sample_id.as_str()).collect();
    let unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !known.contains(p.sample_id.as_str()))
        .map(|p| p.sample_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnmatchedIds {
            what: "predictions for samples absent from the annotations".into(),
            ids: unknown,
        });
    }
    let by_id: HashMap<&str, &PredictionRecord> = predictions
        .iter()
        .map(|p| (p.sample_id.as_str(), p))
        .collect();
    let missing: Vec<String> = annotations
        .iter()
        .filter(|a| !by_id.contains_key(a.sample_id.as_str()))
        .map(|a| a.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnmatchedIds {
            what: "annotated samples without a prediction".into(),
            ids: missing,
        });
    }

    let mut calibs: BTreeMap<&str, CameraCalib<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let p = by_id[a.sample_id.as_str()];
        let calib = if p.needs_calib() {
            let dir = calib_dir.ok_or_else(|| {
                Error::Precondition(format!(
                    "prediction {} is projected; a calibration directory is required",
                    a.sample_id
                ))
            })?;
            if !calibs.contains_key(a.calib_ref.as_str()) {
                calibs.insert(&a.calib_ref, load_calib_dir(dir, &a.calib_ref)?);
            }
            calibs.get(a.calib_ref.as_str())
        } else {
            None
        };
        out.push(EvalSample {
            sample_id: a.sample_id.clone(),
            image_id: a.image_id.clone(),
            category: a.category.clone(),
            object_id: a.object_id.clone(),
            gt: a.gt_box3d,
            pred: p.to_box3d(calib)?,
            depth_gt: a.gt_box3d.center[2],
            occlusion: a.occlusion,
            truncation: a.truncation,
        });
    }
    Ok(out)
}

/// Caption records for every annotation, with embeddings looked up by id.
///
/// The embedded tokens must be the caption's whitespace-separated words.
pub fn caption_records(
    annotations: &[AnnotationRecord],
    embeddings: &EmbeddingFile,
) -> Result<Vec<CaptionRecord<f64>>> {
    let missing: Vec<String> = annotations
        .iter()
        .filter(|a| embeddings.get(&a.sample_id).is_none())
        .map(|a| a.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnmatchedIds {
            what: "annotated samples without embeddings".into(),
            ids: missing,
        });
    }
    annotations
        .iter()
        .map(|a| {
            let rec = embeddings
                .caption_record::<f64>(&a.sample_id)
                .ok_or_else(|| {
                    Error::Degenerate(format!("{}: empty embedding record", a.sample_id))
                })?;
            if rec.tokens != a.words() {
                return Err(Error::Precondition(format!(
                    "{}: embedded tokens {:?} differ from caption words {:?}",
                    a.sample_id,
                    rec.tokens,
                    a.words()
                )));
            }
            Ok(rec)
        })
        .collect()
}
