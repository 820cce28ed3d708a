//! Parameter counts derived by hand from the architecture description.

use gfr_core::ModelConfig;

pub fn conv(ci: usize, co: usize, k: usize) -> usize {
    k * k * ci * co + co
}

pub fn bottleneck(ci: usize, mid: usize, co: usize) -> usize {
    conv(ci, mid, 1) + conv(mid, co, 3)
}

/// Reduction `c -> max(1, c/16)`, channel expansion back to `c`, one global
/// unit; each fully connected layer has a bias.
pub fn gate(c: usize) -> usize {
    let r = (c / 16).max(1);
    (c * r + r) + (r * c + c) + (r + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub backbone: usize,
    pub pyramid: usize,
    pub gates: usize,
    pub predictors: usize,
}

impl Counts {
    /// Everything after the backbone.
    pub fn head(&self) -> usize {
        self.pyramid + self.gates + self.predictors
    }

    pub fn total(&self) -> usize {
        self.backbone + self.head()
    }
}

pub fn counts(config: &ModelConfig) -> Counts {
    let p = &config.pyramid;
    let widths = &p.backbone_channels;
    let mut sizes = Vec::new();
    let mut s = p.input_size;
    while s > *p.scale_sizes.last().unwrap() {
        s = s.div_ceil(2);
        sizes.push(s);
    }
    let tap = |k: usize| widths[sizes.iter().position(|&x| x == p.scale_sizes[k]).unwrap()];
    let n = p.scale_sizes.len();
    let (c, third, mid) = (p.channels_per_scale, p.channels_per_scale / 3, p.bottleneck_channels);

    let mut backbone = 0;
    let mut ci = 3;
    for &co in widths {
        backbone += conv(ci, co, 3);
        ci = co;
    }
    let pyramid = (0..n)
        .map(|k| {
            if !p.use_feature_reuse {
                return bottleneck(tap(k), mid, c);
            }
            let lower = if k == 0 { widths[0] } else { tap(k - 1) };
            let up = if k + 1 < n {
                conv(tap(k + 1), third, 1)
            } else {
                bottleneck(tap(k), mid, third)
            };
            conv(lower, third, 1) + bottleneck(tap(k), mid, third) + up
        })
        .sum();
    let gates = if p.use_gates { n * gate(c) } else { 0 };
    let aspects = if config.extra_aspect { 6 } else { 4 };
    let predictors = n * (conv(c, aspects * (config.num_classes + 1), 3) + conv(c, aspects * 4, 3));
    Counts {
        backbone,
        pyramid,
        gates,
        predictors,
    }
}
