//! VOC-style evaluation with all-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox, DecodeParams, Detection};
use crate::error::Result;
use crate::harness::scene::{SceneAnnotation, SizeBucket};
use crate::model::Detector;

pub const EVAL_IOU: f64 = 0.5;

/// A scored box attributed to one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground-truth box attributed to one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBox {
    pub image: usize,
    pub bbox: BBox,
}

/// Per-detection outcome of greedy assignment, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `Some(gt index)` for true positives.
    pub matched: Vec<Option<usize>>,
}

/// Walks detections from the highest score (ties keep input order). Each
/// detection looks at the highest-IoU ground truth of its image; it is a
/// true positive if that IoU reaches `iou_thresh` and the ground truth is
/// still unclaimed, otherwise a false positive.
pub fn assign(detections: &[ScoredBox], ground_truth: &[ImageBox], iou_thresh: f64) -> (Vec<usize>, Assignment) {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut claimed = vec![false; ground_truth.len()];
    let matched = order
        .iter()
        .map(|&d| {
            let det = &detections[d];
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in ground_truth.iter().enumerate() {
                if gt.image != det.image {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((v, g)) if v >= iou_thresh && !claimed[g] => {
                    claimed[g] = true;
                    Some(g)
                }
                _ => None,
            }
        })
        .collect();
    (order, Assignment { matched })
}

/// Area under the monotone precision envelope. `None` without ground truth.
pub fn average_precision(detections: &[ScoredBox], ground_truth: &[ImageBox], iou_thresh: f64) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let (_, a) = assign(detections, ground_truth, iou_thresh);
    let npos = ground_truth.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for m in &a.matched {
        if m.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / npos);
        precision.push(tp / (tp + fp));
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..recall.len() - 1 {
        if recall[i + 1] != recall[i] {
            ap += (recall[i + 1] - recall[i]) * precision[i + 1];
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCell {
    pub scale: usize,
    pub bucket: SizeBucket,
    /// Mean global attention over images whose largest object is in `bucket`.
    pub mean: Option<f64>,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    /// AP per object class; `None` when the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
    /// Fraction of ground-truth objects found, per size bucket.
    pub recall_by_bucket: Vec<(SizeBucket, Option<f64>)>,
    pub mean_global_attention: Vec<AttentionCell>,
    pub warnings: Vec<String>,
}

/// Detections of every image, and the global attention of every gate per image.
pub type DatasetPrediction = (Vec<Vec<Detection>>, Vec<Vec<f64>>);

/// Per-image detections plus the global attention of every gate.
pub fn predict_dataset(
    detector: &Detector,
    scenes: &[SceneAnnotation],
    params: &DecodeParams,
) -> Result<DatasetPrediction> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut attention = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pred = detector.predict(&s.image)?;
        dets.push(detector.detections(&pred, 0, params));
        attention.push(pred.global_attention.into_iter().next().unwrap_or_default());
    }
    Ok((dets, attention))
}

pub fn evaluate(detector: &Detector, scenes: &[SceneAnnotation], params: &DecodeParams) -> Result<EvalReport> {
    let (dets, attention) = predict_dataset(detector, scenes, params)?;
    Ok(build_report(
        detector.config.num_classes,
        detector.config.pyramid.scale_sizes.len(),
        scenes,
        &dets,
        &attention,
    ))
}

/// Mean global attention per scale and dominant size bucket. Empty when no
/// attention was recorded (models without gates).
pub fn attention_cells(num_scales: usize, scenes: &[SceneAnnotation], attention: &[Vec<f64>]) -> Vec<AttentionCell> {
    let mut cells = Vec::new();
    if !attention.iter().any(|a| !a.is_empty()) {
        return cells;
    }
    for scale in 0..num_scales {
        for bucket in SizeBucket::ALL {
            let values: Vec<f64> = scenes
                .iter()
                .zip(attention)
                .filter(|(s, _)| s.dominant_bucket() == Some(bucket))
                .filter_map(|(_, a)| a.get(scale).copied())
                .collect();
            cells.push(AttentionCell {
                scale,
                bucket,
                mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
                images: values.len(),
            });
        }
    }
    cells
}

/// Assembles the report from precomputed detections and attention values.
pub fn build_report(
    num_classes: usize,
    num_scales: usize,
    scenes: &[SceneAnnotation],
    detections: &[Vec<Detection>],
    attention: &[Vec<f64>],
) -> EvalReport {
    let mut warnings = Vec::new();
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut found = [0usize; 3];
    let mut total = [0usize; 3];
    for s in scenes {
        for o in &s.objects {
            total[o.bucket.index()] += 1;
        }
    }
    for class in 0..num_classes {
        let mut gts = Vec::new();
        let mut buckets = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            for o in s.objects.iter().filter(|o| o.class_id == class) {
                gts.push(ImageBox { image: i, bbox: o.bbox });
                buckets.push(o.bucket);
            }
        }
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter().filter(|d| d.class_id == class).map(move |d| ScoredBox {
                    image: i,
                    score: d.score,
                    bbox: d.bbox,
                })
            })
            .collect();
        let (_, a) = assign(&dets, &gts, EVAL_IOU);
        for g in a.matched.iter().flatten() {
            found[buckets[*g].index()] += 1;
        }
        per_class_ap.push(average_precision(&dets, &gts, EVAL_IOU));
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if aps.is_empty() {
        warnings.push("no ground-truth objects: mAP is undefined".to_string());
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let recall_by_bucket = SizeBucket::ALL
        .iter()
        .map(|&b| {
            let i = b.index();
            (b, (total[i] > 0).then(|| found[i] as f64 / total[i] as f64))
        })
        .collect();

    let mean_global_attention = attention_cells(num_scales, scenes, attention);
    EvalReport {
        num_images: scenes.len(),
        per_class_ap,
        map,
        recall_by_bucket,
        mean_global_attention,
        warnings,
    }
}
