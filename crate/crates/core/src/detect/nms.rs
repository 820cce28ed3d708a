use serde::{Deserialize, Serialize};

use crate::detect::boxes::{decode, iou, BBox};
use crate::detect::loss::log_softmax_parts;
use crate::detect::priors::PriorBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Object class, counted from 0 (background excluded).
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    /// Candidates kept per class before suppression.
    pub pre_nms_top_k: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.01,
            nms_iou: 0.45,
            top_k: 200,
            pre_nms_top_k: 400,
        }
    }
}

/// Greedy suppression. Returns kept indices, highest score first (ties to
/// the lower index); a box is dropped when its IoU with an already kept box
/// reaches `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) < iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Row-wise softmax of `(priors, labels)` logits.
pub fn softmax_rows(logits: &[f64], num_labels: usize) -> Vec<f64> {
    logits.chunks(num_labels).flat_map(|r| log_softmax_parts(r).1).collect()
}

/// Decodes one image's predictions into final detections.
///
/// Label 0 of `class_probs` is background. Per object class: keep decoded,
/// clipped, non-degenerate boxes scoring above `score_thresh`, cap them at
/// `pre_nms_top_k`, suppress greedily, then keep the overall `top_k` by score.
pub fn decode_and_nms(
    class_probs: &[f64],
    box_deltas: &[f64],
    priors: &[PriorBox],
    params: &DecodeParams,
) -> Vec<Detection> {
    let np = priors.len();
    let num_labels = class_probs.len().checked_div(np).unwrap_or(0);
    let decoded: Vec<BBox> = priors
        .iter()
        .enumerate()
        .map(|(p, prior)| {
            let d = &box_deltas[p * 4..p * 4 + 4];
            decode([d[0], d[1], d[2], d[3]], prior.center_form()).clip()
        })
        .collect();

    let mut all: Vec<(Detection, usize)> = Vec::new();
    for label in 1..num_labels {
        let mut cand: Vec<usize> = (0..np)
            .filter(|&p| class_probs[p * num_labels + label] > params.score_thresh && decoded[p].is_valid())
            .collect();
        let score = |p: usize| class_probs[p * num_labels + label];
        cand.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        cand.truncate(params.pre_nms_top_k);
        let boxes: Vec<BBox> = cand.iter().map(|&p| decoded[p]).collect();
        let scores: Vec<f64> = cand.iter().map(|&p| score(p)).collect();
        for i in nms(&boxes, &scores, params.nms_iou) {
            all.push((
                Detection {
                    class_id: label - 1,
                    score: scores[i],
                    bbox: boxes[i],
                },
                cand[i],
            ));
        }
    }
    all.sort_by(|a, b| {
        b.0.score
            .total_cmp(&a.0.score)
            .then(a.0.class_id.cmp(&b.0.class_id))
            .then(a.1.cmp(&b.1))
    });
    all.truncate(params.top_k);
    all.into_iter().map(|(d, _)| d).collect()
}
