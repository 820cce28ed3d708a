//! Multibox loss: softmax cross-entropy over positives and hard-mined
//! negatives plus smooth-L1 box regression over positives.

use crate::detect::matching::MatchResult;
use crate::error::{Error, Result};

/// Mined negatives per positive.
pub const NEG_POS_RATIO: usize = 3;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub num_positives: usize,
    /// d loss / d logits, same layout as the logits.
    pub grad_logits: Vec<f64>,
    /// d loss / d deltas, same layout as the deltas.
    pub grad_deltas: Vec<f64>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `(log-sum-exp, softmax)` of one logit row.
pub fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Priors selected for the classification term of one image: every
/// positive, plus the highest-loss background priors (ties to the lower
/// index). An image without positives still mines `NEG_POS_RATIO` negatives.
pub fn mine_negatives(background_losses: &[(usize, f64)], num_positives: usize) -> Vec<usize> {
    let want = NEG_POS_RATIO * num_positives.max(1);
    let mut order = background_losses.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(want).map(|(i, _)| i).collect()
}

/// Batch loss. `logits` is `(batch, priors, classes + 1)` and `deltas` is
/// `(batch, priors, 4)`, both flattened; `matches` has one entry per image.
/// The sum is normalized by `max(1, total positives)`.
pub fn multibox_loss(logits: &[f64], deltas: &[f64], num_labels: usize, matches: &[MatchResult]) -> Result<LossOutput> {
    let batch = matches.len();
    let np = matches.first().map_or(0, |m| m.labels.len());
    if logits.len() != batch * np * num_labels || deltas.len() != batch * np * 4 {
        return Err(Error::shape(
            "multibox_loss",
            format!(
                "{} logits / {} deltas for {batch} images of {np} priors",
                logits.len(),
                deltas.len()
            ),
        ));
    }
    let mut grad_logits = vec![0.0; logits.len()];
    let mut grad_deltas = vec![0.0; deltas.len()];
    let (mut cls, mut loc, mut total_pos) = (0.0, 0.0, 0);

    for (b, m) in matches.iter().enumerate() {
        if m.labels.len() != np {
            return Err(Error::shape("multibox_loss", "match results differ in prior count"));
        }
        let row = |p: usize| (b * np + p) * num_labels;
        let mut ce = vec![0.0; np];
        let mut probs = vec![Vec::new(); np];
        for p in 0..np {
            let r = &logits[row(p)..row(p) + num_labels];
            let (lse, sm) = log_softmax_parts(r);
            ce[p] = lse - r[m.labels[p]];
            probs[p] = sm;
        }
        let positives: Vec<usize> = (0..np).filter(|&p| m.matched[p].is_some()).collect();
        let background: Vec<(usize, f64)> = (0..np)
            .filter(|&p| m.matched[p].is_none())
            .map(|p| (p, ce[p]))
            .collect();
        let negatives = mine_negatives(&background, positives.len());
        total_pos += positives.len();

        for &p in positives.iter().chain(&negatives) {
            cls += ce[p];
            let g = &mut grad_logits[row(p)..row(p) + num_labels];
            g.copy_from_slice(&probs[p]);
            g[m.labels[p]] -= 1.0;
        }
        for &p in &positives {
            let base = (b * np + p) * 4;
            for j in 0..4 {
                let x = deltas[base + j] - m.targets[p][j];
                loc += smooth_l1(x);
                grad_deltas[base + j] = smooth_l1_grad(x);
            }
        }
    }

    let norm = total_pos.max(1) as f64;
    grad_logits.iter_mut().for_each(|g| *g /= norm);
    grad_deltas.iter_mut().for_each(|g| *g /= norm);
    let (cls_loss, loc_loss) = (cls / norm, loc / norm);
    Ok(LossOutput {
        loss: cls_loss + loc_loss,
        cls_loss,
        loc_loss,
        num_positives: total_pos,
        grad_logits,
        grad_deltas,
    })
}
