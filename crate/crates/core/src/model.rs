//! The full detector: backbone, gated feature-reuse pyramid and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{
    decode_and_nms, generate_priors, predict_heads, softmax_rows, DecodeParams, DetectHead, Detection, HeadVars,
    PriorBox, PriorConfig,
};
use crate::error::{Error, Result};
use crate::pyramid::{Backbone, BackboneTaps, Pyramid, PyramidConfig, PyramidState};
use crate::tensor::{FeatureMap, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub num_classes: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub extra_aspect: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            num_classes: 3,
            min_scale: 0.1,
            max_scale: 0.9,
            extra_aspect: true,
        }
    }
}

impl ModelConfig {
    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            scale_sizes: self.pyramid.scale_sizes.clone(),
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            extra_aspect: self.extra_aspect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(Error::Config(format!(
                "prior scales {}..{} out of (0, 1]",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub head: DetectHead,
    pub priors: Vec<PriorBox>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub image: Var,
    pub taps: BackboneTaps,
    pub pyramid: PyramidState,
    pub head: HeadVars,
}

/// Forward results detached from the tape.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub batch: usize,
    /// `(batch, priors, labels)`.
    pub logits: Vec<f64>,
    /// `(batch, priors, 4)`.
    pub deltas: Vec<f64>,
    /// Global attention per image per scale, when gates are enabled.
    pub global_attention: Vec<Vec<f64>>,
    /// Channel attention per image per scale.
    pub channel_attention: Vec<Vec<Vec<f64>>>,
}

impl Detector {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.pyramid, &mut rng);
        let pyramid = Pyramid::new(&mut store, &config.pyramid, &mut rng)?;
        let prior_config = config.prior_config();
        let head = DetectHead::new(
            &mut store,
            config.pyramid.scale_sizes.len(),
            config.pyramid.channels_per_scale,
            config.num_classes,
            prior_config.aspects_per_cell(),
            &mut rng,
        );
        let priors = generate_priors(&prior_config);
        Ok(Self {
            config,
            store,
            backbone,
            pyramid,
            head,
            priors,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.head.num_labels
    }

    pub fn forward(&self, tape: &mut Tape, images: &FeatureMap) -> Result<ForwardVars> {
        let size = self.config.pyramid.input_size;
        if images.channels() != 3 || images.height() != size || images.width() != size {
            return Err(Error::shape(
                "detector",
                format!("expected (b, 3, {size}, {size}) images, got {:?}", images.shape()),
            ));
        }
        let image = tape.input(images.clone())?;
        let taps = self.backbone.forward(tape, &self.store, image, &self.config.pyramid)?;
        let pyramid = self.pyramid.build(tape, &self.store, &taps, &self.config.pyramid)?;
        let head = predict_heads(tape, &self.store, &pyramid, &self.head)?;
        Ok(ForwardVars {
            image,
            taps,
            pyramid,
            head,
        })
    }

    pub fn collect(&self, tape: &Tape, vars: &ForwardVars) -> Prediction {
        let batch = tape.value(vars.image).batch();
        let mut global_attention = vec![Vec::new(); batch];
        let mut channel_attention = vec![Vec::new(); batch];
        for g in &vars.pyramid.gates {
            let e_bar = tape.value(g.global_attention).data();
            let e = tape.value(g.channel_attention);
            for b in 0..batch {
                global_attention[b].push(e_bar[b]);
                channel_attention[b].push(e.item(b).to_vec());
            }
        }
        Prediction {
            batch,
            logits: vars.head.class_logits(tape, &self.head),
            deltas: vars.head.box_deltas(tape, &self.head),
            global_attention,
            channel_attention,
        }
    }

    pub fn predict(&self, images: &FeatureMap) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, images)?;
        Ok(self.collect(&tape, &vars))
    }

    /// Decoded detections for image `b` of a prediction.
    pub fn detections(&self, pred: &Prediction, b: usize, params: &DecodeParams) -> Vec<Detection> {
        let np = self.priors.len();
        let l = self.num_labels();
        let logits = &pred.logits[b * np * l..(b + 1) * np * l];
        let deltas = &pred.deltas[b * np * 4..(b + 1) * np * 4];
        decode_and_nms(&softmax_rows(logits, l), deltas, &self.priors, params)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }
}
