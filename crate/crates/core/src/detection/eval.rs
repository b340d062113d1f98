//! Mean average precision at a fixed IoU threshold.

use super::boxes::{Detections, GroundTruthBox};
use super::scene::NUM_CLASSES;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class id; classes without ground truth are omitted.
    pub per_class_ap: BTreeMap<String, f64>,
    pub map50: f64,
}

/// All-point interpolated AP: area under the precision-recall curve after
/// replacing each precision by the maximum precision at any higher recall.
pub fn average_precision(tp_flags: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_truth as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class greedy matching in descending confidence order across images
/// (ties keep image order, then detection order). A detection claims the
/// unmatched same-class truth with the highest IoU if that IoU reaches
/// `iou_thresh`; otherwise it is a false positive.
pub fn evaluate_map(
    preds: &[Detections],
    truths: &[Vec<GroundTruthBox>],
    iou_thresh: f64,
) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} prediction sets for {} images",
            preds.len(),
            truths.len()
        )));
    }
    let mut per_class_ap = BTreeMap::new();
    for class_id in 0..NUM_CLASSES {
        let n_truth: usize = truths
            .iter()
            .map(|t| t.iter().filter(|g| g.class_id == class_id).count())
            .sum();
        if n_truth == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &super::boxes::Detection)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|x| x.class_id == class_id).map(move |x| (img, x)))
            .collect();
        ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut matched: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let flags: Vec<bool> = ranked
            .iter()
            .map(|(img, det)| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in truths[*img].iter().enumerate() {
                    if g.class_id != class_id || matched[*img][j] {
                        continue;
                    }
                    let iou = det.bbox.iou(&g.bbox);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                match best {
                    Some((j, iou)) if iou >= iou_thresh => {
                        matched[*img][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class_ap.insert(class_id.to_string(), average_precision(&flags, n_truth));
    }
    if per_class_ap.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes in any image".into()));
    }
    let map50 = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalReport { per_class_ap, map50 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::boxes::{BBox, Detection};

    fn gt(x: f64, class_id: usize) -> GroundTruthBox {
        GroundTruthBox {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
        }
    }

    fn det(x: f64, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
            confidence,
        }
    }

    #[test]
    fn perfect_detector() {
        let r = evaluate_map(&[Detections::new(vec![det(5.0, 1, 0.7)])], &[vec![gt(5.0, 1)]], 0.5).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.per_class_ap.len(), 1);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let r = evaluate_map(&[Detections::empty()], &[vec![gt(5.0, 0), gt(30.0, 2)]], 0.5).unwrap();
        assert_eq!(r.map50, 0.0);
    }

    #[test]
    fn half_recall_at_full_precision() {
        let r = evaluate_map(
            &[Detections::new(vec![det(0.0, 0, 0.9)])],
            &[vec![gt(0.0, 0), gt(40.0, 0)]],
            0.5,
        )
        .unwrap();
        assert!((r.map50 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_truth_is_undefined() {
        let e = evaluate_map(&[Detections::new(vec![det(0.0, 0, 0.9)])], &[vec![]], 0.5);
        assert!(matches!(e, Err(Error::UndefinedMetric(_))));
        assert!(evaluate_map(&[], &[vec![gt(0.0, 0)]], 0.5).is_err());
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        // TP then FP: precision envelope stays 1 up to recall 1
        let r = evaluate_map(
            &[Detections::new(vec![det(0.0, 0, 0.9), det(0.0, 0, 0.8)])],
            &[vec![gt(0.0, 0)]],
            0.5,
        )
        .unwrap();
        assert_eq!(r.map50, 1.0);
        // FP first halves precision at the only recall step
        let r = evaluate_map(
            &[Detections::new(vec![det(30.0, 0, 0.9), det(0.0, 0, 0.8)])],
            &[vec![gt(0.0, 0)]],
            0.5,
        )
        .unwrap();
        assert_eq!(r.map50, 0.5);
    }
}
