use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::pyramid::PyramidState;
use crate::tensor::{ParamStore, Tape, Var};

/// One 3x3 classification conv and one 3x3 box-regression conv per scale.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub cls: Conv,
    pub loc: Conv,
}

#[derive(Debug, Clone)]
pub struct DetectHead {
    pub predictors: Vec<Predictor>,
    /// Object classes plus background.
    pub num_labels: usize,
    pub aspects: usize,
}

/// Raw per-scale predictor outputs, `(b, aspects * labels, h, w)` and
/// `(b, aspects * 4, h, w)`.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub cls: Vec<Var>,
    pub loc: Vec<Var>,
}

impl DetectHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_scales: usize,
        channels: usize,
        num_classes: usize,
        aspects: usize,
        rng: &mut R,
    ) -> Self {
        let num_labels = num_classes + 1;
        let predictors = (0..num_scales)
            .map(|k| Predictor {
                cls: Conv::same3x3(
                    store,
                    &format!("head.scale{k}.cls"),
                    channels,
                    aspects * num_labels,
                    rng,
                ),
                loc: Conv::same3x3(store, &format!("head.scale{k}.loc"), channels, aspects * 4, rng),
            })
            .collect();
        Self {
            predictors,
            num_labels,
            aspects,
        }
    }

    pub fn param_count(&self) -> usize {
        self.predictors
            .iter()
            .map(|p| p.cls.param_count() + p.loc.param_count())
            .sum()
    }
}

pub fn predict_heads(
    tape: &mut Tape,
    store: &ParamStore,
    pyramid: &PyramidState,
    head: &DetectHead,
) -> Result<HeadVars> {
    if pyramid.blocks.len() != head.predictors.len() {
        return Err(Error::shape(
            "predict_heads",
            format!(
                "{} blocks for {} predictors",
                pyramid.blocks.len(),
                head.predictors.len()
            ),
        ));
    }
    let mut vars = HeadVars {
        cls: Vec::new(),
        loc: Vec::new(),
    };
    for (&block, p) in pyramid.blocks.iter().zip(&head.predictors) {
        vars.cls.push(p.cls.forward(tape, store, block)?);
        vars.loc.push(p.loc.forward(tape, store, block)?);
    }
    Ok(vars)
}

/// Visits every `(conv output offset, flattened offset)` pair that maps a
/// per-scale conv output onto the `(batch, prior, depth)` layout, where a
/// prior index runs over `(scale, row, col, aspect)`.
fn for_each_slot(tape: &Tape, outputs: &[Var], aspects: usize, depth: usize, mut f: impl FnMut(usize, usize, usize)) {
    let Some(&first) = outputs.first() else { return };
    let batch = tape.value(first).batch();
    let per_image: usize = outputs.iter().map(|&v| tape.value(v).plane() * aspects).sum();
    let mut prior_base = 0;
    for (k, &v) in outputs.iter().enumerate() {
        let map = tape.value(v);
        let (h, w) = (map.height(), map.width());
        for b in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    for a in 0..aspects {
                        let prior = prior_base + (y * w + x) * aspects + a;
                        for d in 0..depth {
                            let src = map.offset(b, a * depth + d, y, x);
                            let dst = (b * per_image + prior) * depth + d;
                            f(k, src, dst);
                        }
                    }
                }
            }
        }
        prior_base += h * w * aspects;
    }
}

fn flatten(tape: &Tape, outputs: &[Var], aspects: usize, depth: usize) -> Vec<f64> {
    let total: usize = outputs.iter().map(|&v| tape.value(v).len()).sum();
    let mut flat = vec![0.0; total];
    for_each_slot(tape, outputs, aspects, depth, |k, src, dst| {
        flat[dst] = tape.value(outputs[k]).data()[src];
    });
    flat
}

fn unflatten(tape: &Tape, outputs: &[Var], aspects: usize, depth: usize, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let mut seeds: Vec<Vec<f64>> = outputs.iter().map(|&v| vec![0.0; tape.value(v).len()]).collect();
    for_each_slot(tape, outputs, aspects, depth, |k, src, dst| {
        seeds[k][src] = grad[dst];
    });
    outputs.iter().copied().zip(seeds).collect()
}

impl HeadVars {
    /// `(batch, priors, labels)` class logits.
    pub fn class_logits(&self, tape: &Tape, head: &DetectHead) -> Vec<f64> {
        flatten(tape, &self.cls, head.aspects, head.num_labels)
    }

    /// `(batch, priors, 4)` box offsets.
    pub fn box_deltas(&self, tape: &Tape, head: &DetectHead) -> Vec<f64> {
        flatten(tape, &self.loc, head.aspects, 4)
    }

    /// Backward seeds for the predictor outputs from flattened gradients.
    pub fn seeds(
        &self,
        tape: &Tape,
        head: &DetectHead,
        grad_logits: &[f64],
        grad_deltas: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let mut s = unflatten(tape, &self.cls, head.aspects, head.num_labels, grad_logits);
        s.extend(unflatten(tape, &self.loc, head.aspects, 4, grad_deltas));
        s
    }
}
