//! Flat `key = value` run configuration shared by every command.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors. [`RunConfig::to_text`] writes every key, so the echoed
//! file fully reproduces a run.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::detect::DecodeParams;
use crate::error::{Error, Result};
use crate::gate::GateInit;
use crate::harness::scene::SizeMix;
use crate::harness::train::TrainConfig;
use crate::model::ModelConfig;
use crate::pyramid::PyramidConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub input_size: usize,
    pub scale_sizes: Vec<usize>,
    pub channels_per_scale: usize,
    pub bottleneck_channels: usize,
    /// `None` picks 8, 16, then 32 channels for the remaining stages.
    pub backbone_channels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub use_gates: bool,
    pub use_feature_reuse: bool,
    pub extra_aspect_1_6: bool,
    pub gate_init: GateInit,
    // randomness
    pub seed: u64,
    // training
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_fraction: f64,
    pub eval_every: usize,
    pub target_map: Option<f64>,
    // decoding
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub pre_nms_top_k: usize,
    // data generation
    pub count: usize,
    pub max_objects: usize,
    pub size_mix: SizeMix,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let decode = DecodeParams::default();
        let pyramid = PyramidConfig::default();
        Self {
            input_size: pyramid.input_size,
            scale_sizes: pyramid.scale_sizes,
            channels_per_scale: pyramid.channels_per_scale,
            bottleneck_channels: pyramid.bottleneck_channels,
            backbone_channels: None,
            num_classes: 3,
            min_scale: 0.1,
            max_scale: 0.9,
            use_gates: true,
            use_feature_reuse: true,
            extra_aspect_1_6: true,
            gate_init: GateInit::Xavier,
            seed: 0,
            iterations: train.iterations,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            lr_drop_fraction: train.lr_drop_fraction,
            eval_every: train.eval_every,
            target_map: train.target_map,
            score_thresh: decode.score_thresh,
            nms_iou: decode.nms_iou,
            top_k: decode.top_k,
            pre_nms_top_k: decode.pre_nms_top_k,
            count: 10,
            max_objects: 3,
            size_mix: SizeMix::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "input_size",
    "scale_sizes",
    "channels_per_scale",
    "bottleneck_channels",
    "backbone_channels",
    "num_classes",
    "min_scale",
    "max_scale",
    "use_gates",
    "use_feature_reuse",
    "extra_aspect_1_6",
    "gate_init",
    "seed",
    "iterations",
    "batch_size",
    "learning_rate",
    "momentum",
    "weight_decay",
    "lr_drop_fraction",
    "eval_every",
    "target_map",
    "score_thresh",
    "nms_iou",
    "top_k",
    "pre_nms_top_k",
    "count",
    "max_objects",
    "size_mix",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{value}` is not a boolean"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Default backbone widths for `stages` stride-2 stages.
pub fn default_backbone_channels(stages: usize) -> Vec<usize> {
    (0..stages).map(|i| (8 << i.min(2)).min(32)).collect()
}

impl RunConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "input_size" => self.input_size = parse(key, v)?,
            "scale_sizes" => self.scale_sizes = parse_list(key, v)?,
            "channels_per_scale" => self.channels_per_scale = parse(key, v)?,
            "bottleneck_channels" => self.bottleneck_channels = parse(key, v)?,
            "backbone_channels" => self.backbone_channels = if v == "auto" { None } else { Some(parse_list(key, v)?) },
            "num_classes" => self.num_classes = parse(key, v)?,
            "min_scale" => self.min_scale = parse(key, v)?,
            "max_scale" => self.max_scale = parse(key, v)?,
            "use_gates" => self.use_gates = parse_bool(key, v)?,
            "use_feature_reuse" => self.use_feature_reuse = parse_bool(key, v)?,
            "extra_aspect_1_6" => self.extra_aspect_1_6 = parse_bool(key, v)?,
            "gate_init" => {
                self.gate_init = match v {
                    "xavier" => GateInit::Xavier,
                    "zero" => GateInit::Zero,
                    _ => return Err(Error::Config(format!("gate_init: `{v}` is not xavier or zero"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_drop_fraction" => self.lr_drop_fraction = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "target_map" => self.target_map = if v == "none" { None } else { Some(parse(key, v)?) },
            "score_thresh" => self.score_thresh = parse(key, v)?,
            "nms_iou" => self.nms_iou = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "pre_nms_top_k" => self.pre_nms_top_k = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "size_mix" => self.size_mix = v.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every line of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn resolved_backbone_channels(&self) -> Vec<usize> {
        self.backbone_channels.clone().unwrap_or_else(|| {
            let probe = PyramidConfig {
                input_size: self.input_size,
                scale_sizes: self.scale_sizes.clone(),
                ..PyramidConfig::default()
            };
            default_backbone_channels(probe.stage_sizes().len())
        })
    }

    /// Every key in a fixed order; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let b = |v: bool| if v { "true" } else { "false" };
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "scale_sizes = {}", join(&self.scale_sizes));
        let _ = writeln!(s, "channels_per_scale = {}", self.channels_per_scale);
        let _ = writeln!(s, "bottleneck_channels = {}", self.bottleneck_channels);
        let _ = writeln!(s, "backbone_channels = {}", join(&self.resolved_backbone_channels()));
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "min_scale = {:?}", self.min_scale);
        let _ = writeln!(s, "max_scale = {:?}", self.max_scale);
        let _ = writeln!(s, "use_gates = {}", b(self.use_gates));
        let _ = writeln!(s, "use_feature_reuse = {}", b(self.use_feature_reuse));
        let _ = writeln!(s, "extra_aspect_1_6 = {}", b(self.extra_aspect_1_6));
        let gi = match self.gate_init {
            GateInit::Xavier => "xavier",
            GateInit::Zero => "zero",
        };
        let _ = writeln!(s, "gate_init = {gi}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "lr_drop_fraction = {:?}", self.lr_drop_fraction);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "target_map = {}", opt(self.target_map));
        let _ = writeln!(s, "score_thresh = {:?}", self.score_thresh);
        let _ = writeln!(s, "nms_iou = {:?}", self.nms_iou);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "pre_nms_top_k = {}", self.pre_nms_top_k);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "max_objects = {}", self.max_objects);
        let _ = writeln!(s, "size_mix = {}", self.size_mix);
        s
    }

    pub fn pyramid_config(&self) -> PyramidConfig {
        PyramidConfig {
            input_size: self.input_size,
            scale_sizes: self.scale_sizes.clone(),
            channels_per_scale: self.channels_per_scale,
            bottleneck_channels: self.bottleneck_channels,
            backbone_channels: self.resolved_backbone_channels(),
            use_feature_reuse: self.use_feature_reuse,
            use_gates: self.use_gates,
            gate_init: self.gate_init,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            pyramid: self.pyramid_config(),
            num_classes: self.num_classes,
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            extra_aspect: self.extra_aspect_1_6,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
            top_k: self.top_k,
            pre_nms_top_k: self.pre_nms_top_k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_fraction: self.lr_drop_fraction,
            seed: self.seed,
            eval_every: self.eval_every,
            target_map: self.target_map,
            decode: self.decode_params(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Defaults overridden by the given text.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(s)?;
        Ok(c)
    }
}
