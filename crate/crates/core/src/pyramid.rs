//! Plain convolutional backbone and the iterative feature-reuse pyramid.
//!
//! Every prediction scale `k` gets a block of `C` channels assembled from
//! three equal slices:
//!
//! * down slice: the finer neighbour's backbone tap, max-pooled to this
//!   scale and projected by a 1x1 conv (the finest scale pools the extra
//!   half-resolution tap instead);
//! * new slice: a 1x1 + 3x3 bottleneck over this scale's own tap;
//! * up slice: the coarser neighbour's tap, bilinearly upsampled, cropped
//!   top-left to this scale and projected by a 1x1 conv. The coarsest scale
//!   has no coarser neighbour and uses a second bottleneck over its own tap.
//!
//! All slices read raw backbone taps, so blocks can be built in any order.
//! With feature reuse disabled each scale instead learns all `C` channels
//! from its own tap with a single wider bottleneck.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gate::{apply_gate, GateInit, GateParams, GateVars};
use crate::layers::Conv;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub input_size: usize,
    pub scale_sizes: Vec<usize>,
    /// Channels of every emitted block, `C`.
    pub channels_per_scale: usize,
    /// Inner width of every bottleneck.
    pub bottleneck_channels: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    pub use_feature_reuse: bool,
    pub use_gates: bool,
    pub gate_init: GateInit,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            scale_sizes: vec![40, 20, 10, 5, 3, 2],
            channels_per_scale: 48,
            bottleneck_channels: 16,
            backbone_channels: vec![8, 16, 32, 32, 32, 32, 32, 32],
            use_feature_reuse: true,
            use_gates: true,
            gate_init: GateInit::Xavier,
        }
    }
}

impl PyramidConfig {
    /// Spatial size after each stride-2 backbone stage, ending at the
    /// coarsest scale.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let last = self.scale_sizes.last().copied().unwrap_or(1).max(1);
        let mut sizes = Vec::new();
        let mut s = self.input_size;
        while s > last {
            s = s.div_ceil(2);
            sizes.push(s);
        }
        sizes
    }

    /// Backbone stage feeding each prediction scale.
    pub fn scale_stages(&self) -> Result<Vec<usize>> {
        let stages = self.stage_sizes();
        self.scale_sizes
            .iter()
            .enumerate()
            .map(|(k, &size)| {
                stages
                    .iter()
                    .position(|&s| s == size)
                    .filter(|&i| i > 0)
                    .ok_or(Error::MissingTap(k))
            })
            .collect()
    }

    /// Size of the extra tap feeding the finest scale's down slice.
    pub fn extra_tap_size(&self) -> usize {
        self.stage_sizes().first().copied().unwrap_or(0)
    }

    pub fn slice_channels(&self) -> usize {
        self.channels_per_scale / 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scale_sizes.is_empty() {
            return fail("scale_sizes is empty".into());
        }
        for w in self.scale_sizes.windows(2) {
            if w[1] >= w[0] || w[1] != w[0].div_ceil(2) {
                return fail(format!(
                    "scale_sizes must halve (ceil) at each step, got {:?}",
                    self.scale_sizes
                ));
            }
        }
        if self.channels_per_scale == 0 || (self.use_feature_reuse && !self.channels_per_scale.is_multiple_of(3)) {
            return fail(format!(
                "channels_per_scale {} must be a positive multiple of 3",
                self.channels_per_scale
            ));
        }
        if self.bottleneck_channels == 0 {
            return fail("bottleneck_channels must be positive".into());
        }
        let stages = self.stage_sizes();
        if self.backbone_channels.len() != stages.len() {
            return fail(format!(
                "backbone_channels has {} entries, input {} needs {} stages",
                self.backbone_channels.len(),
                self.input_size,
                stages.len()
            ));
        }
        if self.backbone_channels.contains(&0) {
            return fail("backbone_channels must be positive".into());
        }
        self.scale_stages().map_err(|_| {
            Error::Config(format!(
                "input {} has no tap for scales {:?} below the extra tap",
                self.input_size, self.scale_sizes
            ))
        })?;
        Ok(())
    }
}

/// Stack of stride-2 3x3 convolutions with rectifiers.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Conv>,
}

/// Backbone feature maps consumed by the pyramid.
#[derive(Debug, Clone)]
pub struct BackboneTaps {
    /// Output of the first stage (half the input resolution).
    pub extra: Var,
    /// One tap per prediction scale, finest first.
    pub scales: Vec<Var>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &PyramidConfig, rng: &mut R) -> Self {
        let mut in_c = 3;
        let stages = config
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &out_c)| {
                let conv = Conv::new(store, &format!("backbone.stage{i}"), in_c, out_c, 3, 2, 1, rng);
                in_c = out_c;
                conv
            })
            .collect();
        Self { stages }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        config: &PyramidConfig,
    ) -> Result<BackboneTaps> {
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for conv in &self.stages {
            let y = conv.forward(tape, store, x)?;
            x = tape.relu(y)?;
            outputs.push(x);
        }
        let scale_stages = config.scale_stages()?;
        let extra = *outputs.first().ok_or(Error::MissingTap(0))?;
        let scales = scale_stages
            .iter()
            .enumerate()
            .map(|(k, &i)| outputs.get(i).copied().ok_or(Error::MissingTap(k)))
            .collect::<Result<_>>()?;
        Ok(BackboneTaps { extra, scales })
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Conv::param_count).sum()
    }
}

/// 1x1 channel reduction then a spatially preserving 3x3, each rectified.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub conv: Conv,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        mid: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            reduce: Conv::pointwise(store, &format!("{name}.reduce"), in_channels, mid, rng),
            conv: Conv::same3x3(store, &format!("{name}.conv"), mid, out_channels, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.conv.param_count()
    }
}

/// Newly learned features for one scale.
pub fn new_features(tape: &mut Tape, store: &ParamStore, current: Var, block: &Bottleneck) -> Result<Var> {
    let a = block.reduce.forward(tape, store, current)?;
    let a = tape.relu(a)?;
    let b = block.conv.forward(tape, store, a)?;
    tape.relu(b)
}

/// Max-pools `lower` (2x2, stride 2, ceil mode) until it reaches `target`,
/// then projects it with a 1x1 conv.
pub fn downsample_path(tape: &mut Tape, store: &ParamStore, lower: Var, proj: &Conv, target: usize) -> Result<Var> {
    let mut x = lower;
    loop {
        let [_, _, h, w] = tape.value(x).shape();
        if h == target && w == target {
            break;
        }
        if h <= target || w <= target || h == 1 || w == 1 {
            return Err(Error::shape(
                "downsample_path",
                format!("cannot pool {h}x{w} down to {target}x{target}"),
            ));
        }
        x = tape.maxpool2d(x, 2, 2)?;
    }
    proj.forward(tape, store, x)
}

/// Bilinear 2x upsampling of `higher`, a top-left crop to `target` when the
/// doubled size overshoots, then a 1x1 projection.
pub fn upsample_path(tape: &mut Tape, store: &ParamStore, higher: Var, proj: &Conv, target: usize) -> Result<Var> {
    let up = tape.bilinear_upsample2x(higher)?;
    let [_, _, h, w] = tape.value(up).shape();
    if h < target || w < target {
        return Err(Error::shape(
            "upsample_path",
            format!("{h}x{w} is smaller than {target}x{target}"),
        ));
    }
    let cropped = tape.crop(up, target, target)?;
    proj.forward(tape, store, cropped)
}

#[derive(Debug, Clone)]
pub enum UpSlice {
    /// Projection of the upsampled coarser tap.
    Upsample(Conv),
    /// Coarsest scale: a second bottleneck over the scale's own tap.
    Second(Bottleneck),
}

#[derive(Debug, Clone)]
pub enum ScaleBlock {
    Reuse {
        down: Conv,
        new: Bottleneck,
        up: UpSlice,
    },
    /// No reuse: all channels learned from the scale's own tap.
    Full {
        new: Bottleneck,
    },
}

impl ScaleBlock {
    pub fn param_count(&self) -> usize {
        match self {
            ScaleBlock::Reuse { down, new, up } => {
                down.param_count()
                    + new.param_count()
                    + match up {
                        UpSlice::Upsample(c) => c.param_count(),
                        UpSlice::Second(b) => b.param_count(),
                    }
            }
            ScaleBlock::Full { new } => new.param_count(),
        }
    }
}

/// Learnable part of the pyramid: per-scale blocks and optional gates.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub blocks: Vec<ScaleBlock>,
    pub gates: Vec<GateParams>,
}

/// Output of one pyramid build.
#[derive(Debug, Clone)]
pub struct PyramidState {
    /// Blocks as exposed to the predictors (gated when gates are enabled).
    pub blocks: Vec<Var>,
    /// Blocks before gating.
    pub pre_gate: Vec<Var>,
    pub gates: Vec<GateVars>,
}

impl Pyramid {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &PyramidConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stages = config.scale_stages()?;
        let tap_channels = |k: usize| config.backbone_channels[stages[k]];
        let n = config.scale_sizes.len();
        let (c, third, mid) = (
            config.channels_per_scale,
            config.slice_channels(),
            config.bottleneck_channels,
        );
        let mut blocks = Vec::with_capacity(n);
        for k in 0..n {
            let name = format!("pyramid.scale{k}");
            let block = if config.use_feature_reuse {
                let lower_c = if k == 0 {
                    config.backbone_channels[0]
                } else {
                    tap_channels(k - 1)
                };
                let down = Conv::pointwise(store, &format!("{name}.down"), lower_c, third, rng);
                let new = Bottleneck::new(store, &format!("{name}.new"), tap_channels(k), mid, third, rng);
                let up = if k + 1 < n {
                    UpSlice::Upsample(Conv::pointwise(
                        store,
                        &format!("{name}.up"),
                        tap_channels(k + 1),
                        third,
                        rng,
                    ))
                } else {
                    UpSlice::Second(Bottleneck::new(
                        store,
                        &format!("{name}.new2"),
                        tap_channels(k),
                        mid,
                        third,
                        rng,
                    ))
                };
                ScaleBlock::Reuse { down, new, up }
            } else {
                ScaleBlock::Full {
                    new: Bottleneck::new(store, &format!("{name}.new"), tap_channels(k), mid, c, rng),
                }
            };
            blocks.push(block);
        }
        let gates = if config.use_gates {
            (0..n)
                .map(|k| GateParams::new(store, &format!("gate.scale{k}"), c, config.gate_init, rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { blocks, gates })
    }

    /// Builds the ungated block for scale `k`.
    pub fn build_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        taps: &BackboneTaps,
        config: &PyramidConfig,
        k: usize,
    ) -> Result<Var> {
        let tap = |i: usize| taps.scales.get(i).copied().ok_or(Error::MissingTap(i));
        let target = config.scale_sizes[k];
        match &self.blocks[k] {
            ScaleBlock::Reuse { down, new, up } => {
                let lower = if k == 0 { taps.extra } else { tap(k - 1)? };
                let d = downsample_path(tape, store, lower, down, target)?;
                let n = new_features(tape, store, tap(k)?, new)?;
                let u = match up {
                    UpSlice::Upsample(proj) => upsample_path(tape, store, tap(k + 1)?, proj, target)?,
                    UpSlice::Second(b) => new_features(tape, store, tap(k)?, b)?,
                };
                tape.concat_channels(&[d, n, u])
            }
            ScaleBlock::Full { new } => new_features(tape, store, tap(k)?, new),
        }
    }

    /// Builds every scale in the given order; the result is indexed by scale.
    pub fn build_ordered(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        taps: &BackboneTaps,
        config: &PyramidConfig,
        order: &[usize],
    ) -> Result<PyramidState> {
        let n = self.blocks.len();
        if taps.scales.len() < n {
            return Err(Error::MissingTap(taps.scales.len()));
        }
        let mut pre: Vec<Option<Var>> = vec![None; n];
        let mut gated: Vec<Option<(Var, Option<GateVars>)>> = vec![None; n];
        for &k in order {
            let block = self.build_block(tape, store, taps, config, k)?;
            pre[k] = Some(block);
            gated[k] = Some(match self.gates.get(k) {
                Some(g) => {
                    let vars = apply_gate(tape, store, block, g)?;
                    (vars.output, Some(vars))
                }
                None => (block, None),
            });
        }
        let mut state = PyramidState {
            blocks: Vec::with_capacity(n),
            pre_gate: Vec::with_capacity(n),
            gates: Vec::new(),
        };
        for k in 0..n {
            let (Some(p), Some((out, gv))) = (pre[k], gated[k]) else {
                return Err(Error::Config(format!("build order skipped scale {k}")));
            };
            state.pre_gate.push(p);
            state.blocks.push(out);
            state.gates.extend(gv);
        }
        Ok(state)
    }

    pub fn build(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        taps: &BackboneTaps,
        config: &PyramidConfig,
    ) -> Result<PyramidState> {
        let order: Vec<usize> = (0..self.blocks.len()).collect();
        self.build_ordered(tape, store, taps, config, &order)
    }

    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(ScaleBlock::param_count).sum()
    }

    pub fn gate_param_count(&self) -> usize {
        self.gates.iter().map(GateParams::param_count).sum()
    }
}

/// Builds the pyramid over precomputed taps.
pub fn build_pyramid(
    tape: &mut Tape,
    store: &ParamStore,
    taps: &BackboneTaps,
    config: &PyramidConfig,
    pyramid: &Pyramid,
) -> Result<PyramidState> {
    pyramid.build(tape, store, taps, config)
}
