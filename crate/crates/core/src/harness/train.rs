//! Minibatch momentum-SGD training of a [`Detector`] on in-memory scenes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{match_priors, multibox_loss, DecodeParams, MatchResult, MATCH_THRESHOLD};
use crate::error::{Error, Result};
use crate::harness::eval::evaluate;
use crate::harness::scene::SceneAnnotation;
use crate::model::Detector;
use crate::tensor::{FeatureMap, Sgd, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of `iterations` after which the learning rate drops 10x.
    pub lr_drop_fraction: f64,
    /// Seed for minibatch order.
    pub seed: u64,
    /// Evaluate training-set mAP every this many iterations (0 disables).
    pub eval_every: usize,
    /// Stop as soon as a periodic evaluation reaches this mAP.
    pub target_map: Option<f64>,
    pub decode: DecodeParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_drop_fraction: 0.8,
            seed: 0,
            eval_every: 0,
            target_map: None,
            decode: DecodeParams::default(),
        }
    }
}

impl TrainConfig {
    /// Constant rate with one 10x drop.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if (iteration as f64) < self.lr_drop_fraction * self.iterations as f64 {
            self.learning_rate
        } else {
            self.learning_rate * 0.1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    /// Set when `target_map` was reached before the last iteration.
    pub stopped_at: Option<usize>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,loss,cls_loss,loc_loss,learning_rate")?;
        for r in &self.losses {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?}",
                r.iteration, r.loss, r.cls_loss, r.loc_loss, r.learning_rate
            )?;
        }
        Ok(())
    }
}

/// Loss and gradients of one minibatch. Gradients are accumulated into the
/// detector's parameter store.
pub fn train_step(
    detector: &mut Detector,
    images: &FeatureMap,
    matches: &[MatchResult],
) -> Result<crate::detect::LossOutput> {
    let mut tape = Tape::new();
    let vars = detector.forward(&mut tape, images)?;
    let logits = vars.head.class_logits(&tape, &detector.head);
    let deltas = vars.head.box_deltas(&tape, &detector.head);
    let out = multibox_loss(&logits, &deltas, detector.num_labels(), matches)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("multibox_loss"));
    }
    let seeds = vars
        .head
        .seeds(&tape, &detector.head, &out.grad_logits, &out.grad_deltas);
    tape.backward(seeds, &mut detector.store)?;
    Ok(out)
}

pub fn match_dataset(detector: &Detector, scenes: &[SceneAnnotation]) -> Vec<MatchResult> {
    scenes
        .iter()
        .map(|s| match_priors(&detector.priors, &s.ground_truth(), MATCH_THRESHOLD))
        .collect()
}

/// Runs `config.iterations` SGD steps, or fewer when `target_map` is hit.
pub fn train(
    detector: &mut Detector,
    scenes: &[SceneAnnotation],
    config: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let matches = match_dataset(detector, scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut outcome = TrainOutcome::default();
    detector.store.zero_grads();

    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let images: Vec<&FeatureMap> = batch.iter().map(|&i| &scenes[i].image).collect();
        let images = FeatureMap::stack(&images)?;
        let batch_matches: Vec<MatchResult> = batch.iter().map(|&i| matches[i].clone()).collect();

        let out = match train_step(detector, &images, &batch_matches) {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => return Err(Error::NanLoss { iteration }),
            Err(e) => return Err(e),
        };
        let lr = config.learning_rate_at(iteration);
        sgd.step(&mut detector.store, lr);
        let record = LossRecord {
            iteration,
            loss: out.loss,
            cls_loss: out.cls_loss,
            loc_loss: out.loc_loss,
            learning_rate: lr,
        };
        progress(&record);
        outcome.losses.push(record);

        let done = iteration + 1;
        if config.eval_every > 0 && (done % config.eval_every == 0 || done == config.iterations) {
            let report = evaluate(detector, scenes, &config.decode)?;
            outcome.evals.push(EvalRecord {
                iteration: done,
                map: report.map,
            });
            if let (Some(target), Some(map)) = (config.target_map, report.map) {
                if map >= target && done < config.iterations {
                    outcome.stopped_at = Some(done);
                    break;
                }
            }
        }
    }
    Ok(outcome)
}
