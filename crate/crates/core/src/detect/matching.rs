use serde::{Deserialize, Serialize};

use crate::detect::boxes::{encode, iou, BBox};
use crate::detect::priors::PriorBox;

pub const MATCH_THRESHOLD: f64 = 0.5;

/// One labelled ground-truth box; `class_id` counts object classes from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Ground-truth index per prior, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Best IoU of each prior with any ground truth.
    pub best_iou: Vec<f64>,
    /// Class label per prior: 0 is background, `class_id + 1` otherwise.
    pub labels: Vec<usize>,
    /// Encoded regression target per prior; zero for background.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// SSD-style matching.
///
/// First a greedy bipartite pass: the globally highest-IoU free
/// (ground truth, prior) pair is assigned, repeatedly, until every ground
/// truth owns one prior (ties go to the lower ground-truth index, then the
/// lower prior index). Then every still-free prior whose best IoU reaches
/// `threshold` joins its best ground truth.
pub fn match_priors(priors: &[PriorBox], ground_truth: &[GroundTruth], threshold: f64) -> MatchResult {
    let np = priors.len();
    let ng = ground_truth.len();
    let prior_boxes: Vec<BBox> = priors.iter().map(PriorBox::to_bbox).collect();
    let overlaps: Vec<Vec<f64>> = ground_truth
        .iter()
        .map(|g| prior_boxes.iter().map(|p| iou(&g.bbox, p)).collect())
        .collect();

    let mut matched: Vec<Option<usize>> = vec![None; np];
    let mut gt_done = vec![false; ng];
    for _ in 0..ng.min(np) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if gt_done[g] {
                continue;
            }
            for (p, &v) in row.iter().enumerate() {
                if matched[p].is_some() {
                    continue;
                }
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, g, p));
                }
            }
        }
        let Some((_, g, p)) = best else { break };
        matched[p] = Some(g);
        gt_done[g] = true;
    }

    let mut best_iou = vec![0.0; np];
    for p in 0..np {
        let mut best_g = None;
        for (g, row) in overlaps.iter().enumerate() {
            if best_g.is_none() || row[p] > best_iou[p] {
                best_iou[p] = row[p];
                best_g = Some(g);
            }
        }
        if matched[p].is_none() && best_iou[p] >= threshold {
            matched[p] = best_g;
        }
    }

    let mut labels = vec![0; np];
    let mut targets = vec![[0.0; 4]; np];
    for (p, m) in matched.iter().enumerate() {
        if let Some(g) = *m {
            labels[p] = ground_truth[g].class_id + 1;
            targets[p] = encode(&ground_truth[g].bbox, priors[p].center_form());
        }
    }
    MatchResult {
        matched,
        best_iou,
        labels,
        targets,
    }
}
