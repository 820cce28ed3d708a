//! Brute-force reference implementations and the enumerated instances they
//! are compared on.

use gfr_core::detect::loss::log_softmax_parts;
use gfr_core::detect::{
    encode, generate_priors, iou, match_priors, multibox_loss, nms, BBox, GroundTruth, MatchResult, PriorBox,
    PriorConfig, MATCH_THRESHOLD,
};
use gfr_core::harness::eval::{average_precision, ImageBox, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one oracle sweep.
#[derive(Debug, Clone, Default)]
pub struct Sweep {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

impl Sweep {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.mismatches.len() < 5 {
            self.mismatches.push(what());
        } else if !ok {
            self.mismatches.push(String::new());
        }
    }

    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

// ---------------------------------------------------------------- matcher

/// Sort every (ground truth, prior) pair by IoU descending, then ground
/// truth and prior index ascending, and sweep it once for the bipartite
/// pass; then threshold every remaining prior against its best ground truth.
pub fn brute_match(priors: &[PriorBox], gts: &[GroundTruth], threshold: f64) -> MatchResult {
    let np = priors.len();
    let mut triples = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        for (p, prior) in priors.iter().enumerate() {
            triples.push((iou(&gt.bbox, &prior.to_bbox()), g, p));
        }
    }
    triples.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![None; np];
    let mut gt_used = vec![false; gts.len()];
    for &(_, g, p) in &triples {
        if !gt_used[g] && matched[p].is_none() {
            gt_used[g] = true;
            matched[p] = Some(g);
        }
    }
    let mut best_iou = vec![0.0; np];
    for p in 0..np {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&gt.bbox, &priors[p].to_bbox());
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        if let Some((v, g)) = best {
            best_iou[p] = v;
            if matched[p].is_none() && v >= threshold {
                matched[p] = Some(g);
            }
        }
    }
    let labels = matched.iter().map(|m| m.map_or(0, |g| gts[g].class_id + 1)).collect();
    let targets = (0..np)
        .map(|p| matched[p].map_or([0.0; 4], |g| encode(&gts[g].bbox, priors[p].center_form())))
        .collect();
    MatchResult {
        matched,
        best_iou,
        labels,
        targets,
    }
}

pub fn small_priors() -> Vec<Vec<PriorBox>> {
    vec![
        // 4 * 6 + 1 * 6 = 30 priors
        generate_priors(&PriorConfig {
            scale_sizes: vec![2, 1],
            ..PriorConfig::default()
        }),
        // (9 + 1) * 4 = 40 priors
        generate_priors(&PriorConfig {
            scale_sizes: vec![3, 1],
            extra_aspect: false,
            ..PriorConfig::default()
        }),
    ]
}

/// Random boxes; some copy a prior exactly, some copy an earlier box, so
/// IoU ties occur.
pub fn random_gts(rng: &mut ChaCha8Rng, priors: &[PriorBox], n: usize) -> Vec<GroundTruth> {
    let mut out: Vec<GroundTruth> = Vec::with_capacity(n);
    for _ in 0..n {
        let bbox = match rng.random_range(0..4) {
            0 => priors[rng.random_range(0..priors.len())].to_bbox(),
            1 if !out.is_empty() => out[rng.random_range(0..out.len())].bbox,
            _ => {
                let (w, h) = (rng.random_range(0.05..0.9), rng.random_range(0.05..0.9));
                let (x, y) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
                BBox::new(x, y, x + w, y + h)
            }
        };
        out.push(GroundTruth {
            class_id: rng.random_range(0..3),
            bbox,
        });
    }
    out
}

pub fn matcher_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    for (k, priors) in small_priors().iter().enumerate() {
        assert!(priors.len() <= 50);
        for seed in 0..400u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts = random_gts(&mut rng, priors, (seed % 6) as usize);
            let got = match_priors(priors, &gts, MATCH_THRESHOLD);
            let want = brute_match(priors, &gts, MATCH_THRESHOLD);
            sweep.check(got == want, || format!("priors {k} seed {seed}"));
        }
    }
    sweep
}

// ---------------------------------------------------------------- nms

/// The unique subset `S` with: `i` in `S` iff no member of `S` that
/// precedes `i` (higher score, or equal score and lower index) overlaps it
/// at `thresh` or more. Found by trying every subset.
pub fn brute_nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n <= 12);
    let precedes = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut found: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| member(j) && precedes(j, i) && iou(&boxes[i], &boxes[j]) >= thresh);
            member(i) == !blocked
        });
        if consistent {
            let mut set: Vec<usize> = (0..n).filter(|&i| member(i)).collect();
            set.sort_by(|&a, &b| {
                if precedes(a, b) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            });
            assert!(found.is_none(), "suppression fixed point is not unique");
            found = Some(set);
        }
    }
    found.expect("a fixed point exists")
}

pub fn nms_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    for seed in 0..1500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seed % 10) as usize;
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let b = if !boxes.is_empty() && rng.random_bool(0.2) {
                boxes[rng.random_range(0..boxes.len())]
            } else {
                // coarse grid so exact IoU values repeat
                let q = |v: f64| (v * 10.0).round() / 10.0;
                let (x, y) = (q(rng.random_range(0.0..0.6)), q(rng.random_range(0.0..0.6)));
                BBox::new(
                    x,
                    y,
                    x + q(rng.random_range(0.1..0.4)),
                    y + q(rng.random_range(0.1..0.4)),
                )
            };
            boxes.push(b);
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        for thresh in [0.3, 0.45, 0.5] {
            let got = nms(&boxes, &scores, thresh);
            let want = brute_nms(&boxes, &scores, thresh);
            sweep.check(got == want, || {
                format!("seed {seed} thresh {thresh}: {got:?} vs {want:?}")
            });
        }
    }
    sweep
}

// ---------------------------------------------------------------- multibox loss

pub struct BruteLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<f64>,
}

/// Per-prior direct summation. A background prior is mined when fewer than
/// `3 * max(1, positives)` background priors of its image outrank it
/// (higher cross-entropy, or equal and lower index).
pub fn brute_multibox(logits: &[f64], deltas: &[f64], num_labels: usize, matches: &[MatchResult]) -> BruteLoss {
    let np = matches[0].labels.len();
    let total_pos: usize = matches.iter().map(|m| m.matched.iter().flatten().count()).sum();
    let norm = total_pos.max(1) as f64;
    let mut grad_logits = vec![0.0; logits.len()];
    let mut grad_deltas = vec![0.0; deltas.len()];
    let mut loss = 0.0;
    for (b, m) in matches.iter().enumerate() {
        let row = |p: usize| &logits[(b * np + p) * num_labels..(b * np + p + 1) * num_labels];
        let ce: Vec<f64> = (0..np)
            .map(|p| log_softmax_parts(row(p)).0 - row(p)[m.labels[p]])
            .collect();
        let pos = m.matched.iter().flatten().count();
        let quota = 3 * pos.max(1);
        for p in 0..np {
            let selected = m.matched[p].is_some() || {
                let outranked_by = (0..np)
                    .filter(|&q| m.matched[q].is_none() && (ce[q] > ce[p] || (ce[q] == ce[p] && q < p)))
                    .count();
                outranked_by < quota
            };
            if selected {
                loss += ce[p] / norm;
                let probs = log_softmax_parts(row(p)).1;
                for (l, prob) in probs.iter().enumerate() {
                    let onehot = if l == m.labels[p] { 1.0 } else { 0.0 };
                    grad_logits[(b * np + p) * num_labels + l] = (prob - onehot) / norm;
                }
            }
            if m.matched[p].is_some() {
                for j in 0..4 {
                    let x = deltas[(b * np + p) * 4 + j] - m.targets[p][j];
                    let l1 = if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
                    loss += l1 / norm;
                    grad_deltas[(b * np + p) * 4 + j] = x.clamp(-1.0, 1.0) / norm;
                }
            }
        }
    }
    BruteLoss {
        loss,
        grad_logits,
        grad_deltas,
    }
}

/// Relative tolerance on the summed loss; the two sides add the same
/// terms in different orders. Mined sets and gradients must match exactly.
pub const LOSS_SUM_TOLERANCE: f64 = 1e-12;

pub fn loss_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    let num_labels = 4;
    for (k, priors) in small_priors().iter().enumerate() {
        let np = priors.len();
        for seed in 0..300u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = 1 + (seed % 2) as usize;
            let matches: Vec<MatchResult> = (0..batch)
                .map(|_| {
                    let n = rng.random_range(0..=5);
                    match_priors(priors, &random_gts(&mut rng, priors, n), MATCH_THRESHOLD)
                })
                .collect();
            // half-integer logits make equal cross-entropies common
            let logits: Vec<f64> = (0..batch * np * num_labels)
                .map(|_| rng.random_range(-4..=4) as f64 / 2.0)
                .collect();
            let deltas: Vec<f64> = (0..batch * np * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = multibox_loss(&logits, &deltas, num_labels, &matches).unwrap();
            let want = brute_multibox(&logits, &deltas, num_labels, &matches);
            let ok = (got.loss - want.loss).abs() <= LOSS_SUM_TOLERANCE * want.loss.abs().max(1.0)
                && got.grad_logits == want.grad_logits
                && got.grad_deltas == want.grad_deltas;
            sweep.check(ok, || {
                format!("priors {k} seed {seed}: loss {} vs {}", got.loss, want.loss)
            });
        }
    }
    sweep
}

// ---------------------------------------------------------------- average precision

/// Exhaustive PR curve: for every prefix of the score-sorted detections,
/// precision and recall from scratch; AP sums each recall step times the
/// best precision at that recall or beyond.
pub fn brute_ap(dets: &[ScoredBox], gts: &[ImageBox], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    // tp[k]: whether the k-th ranked detection is a true positive
    let mut tp = Vec::with_capacity(order.len());
    for (k, &d) in order.iter().enumerate() {
        let best = (0..gts.len())
            .filter(|&g| gts[g].image == dets[d].image)
            .map(|g| (iou(&dets[d].bbox, &gts[g].bbox), g))
            .fold(None, |acc: Option<(f64, usize)>, (v, g)| match acc {
                Some((bv, _)) if bv >= v => acc,
                _ => Some((v, g)),
            });
        let hit = match best {
            Some((v, g)) if v >= thresh => {
                // claimed by an earlier true positive with the same best GT?
                !(0..k).any(|j| {
                    tp[j] && {
                        let e = order[j];
                        let eb = (0..gts.len())
                            .filter(|&h| gts[h].image == dets[e].image)
                            .map(|h| (iou(&dets[e].bbox, &gts[h].bbox), h))
                            .fold(None, |acc: Option<(f64, usize)>, (v, h)| match acc {
                                Some((bv, _)) if bv >= v => acc,
                                _ => Some((v, h)),
                            });
                        eb.map(|(_, h)| h) == Some(g)
                    }
                })
            }
            _ => false,
        };
        tp.push(hit);
    }
    let npos = gts.len() as f64;
    let curve: Vec<(f64, f64)> = (1..=tp.len())
        .map(|k| {
            let t = tp[..k].iter().filter(|&&x| x).count() as f64;
            (t / npos, t / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let (r, _) = curve[k];
        if r != prev_recall {
            let best_p = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * best_p;
            prev_recall = r;
        }
    }
    Some(ap)
}

const GT_BOXES: [[f64; 4]; 3] = [[0.0, 0.0, 0.2, 0.2], [0.4, 0.0, 0.6, 0.2], [0.0, 0.4, 0.2, 0.6]];

/// Detection placements relative to ground truth `g`: exact, IoU 2/3, IoU
/// 1/4. Index `3 * num_gt` is a box far from everything.
fn placement(kind: usize) -> BBox {
    if kind == usize::MAX {
        return BBox::new(0.8, 0.8, 0.95, 0.95);
    }
    let [x1, y1, x2, y2] = GT_BOXES[kind / 3];
    let dx = [0.0, 0.04, 0.12][kind % 3];
    BBox::new(x1 + dx, y1, x2 + dx, y2)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every case with up to 3 ground truths and 4 detections over the
/// placement grid and every score order.
pub fn ap_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    let scores = [0.9, 0.8, 0.7, 0.6];
    for ng in 0..=3 {
        let gts: Vec<ImageBox> = GT_BOXES[..ng]
            .iter()
            .map(|&[a, b, c, d]| ImageBox {
                image: 0,
                bbox: BBox::new(a, b, c, d),
            })
            .collect();
        let kinds = 3 * ng + 1;
        for nd in 0..=4 {
            let perms = permutations(nd);
            for code in 0..kinds.pow(nd as u32) {
                let placements: Vec<BBox> = (0..nd)
                    .map(|i| {
                        let k = code / kinds.pow(i as u32) % kinds;
                        placement(if k == 3 * ng { usize::MAX } else { k })
                    })
                    .collect();
                for perm in &perms {
                    let dets: Vec<ScoredBox> = (0..nd)
                        .map(|i| ScoredBox {
                            image: 0,
                            score: scores[perm[i]],
                            bbox: placements[i],
                        })
                        .collect();
                    let got = average_precision(&dets, &gts, 0.5);
                    let want = brute_ap(&dets, &gts, 0.5);
                    sweep.check(got == want, || {
                        format!("ng {ng} nd {nd} code {code} perm {perm:?}: {got:?} vs {want:?}")
                    });
                }
            }
        }
    }
    sweep
}
