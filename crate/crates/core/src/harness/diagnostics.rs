//! Gate diagnostics: recorded attention values, their per-size statistics
//! and grayscale grids of pyramid blocks before and after gating.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::eval::{attention_cells, AttentionCell};
use crate::harness::scene::{SceneAnnotation, SizeBucket};
use crate::harness::train::LossRecord;
use crate::model::Detector;
use crate::tensor::{FeatureMap, ParamStore, Tape};

pub const HISTOGRAM_BINS: usize = 10;

/// One attention value. `channel` is `None` for the global attention ē.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRow {
    pub image: usize,
    pub scale: usize,
    pub channel: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleContrast {
    pub scale: usize,
    pub small: Option<f64>,
    pub large: Option<f64>,
    /// `small - large`.
    pub difference: Option<f64>,
}

/// Channel-attention histogram over `[0, 1]` for one gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub scale: usize,
    pub counts: [usize; HISTOGRAM_BINS],
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (`P5`).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub scale: usize,
    pub before: GrayImage,
    pub after: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub num_images: usize,
    pub gates: bool,
    pub mean_global_attention: Vec<AttentionCell>,
    pub small_vs_large: Vec<ScaleContrast>,
    pub histograms: Vec<Histogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDiagnostics {
    pub summary: DiagnosticSummary,
    pub rows: Vec<AttentionRow>,
    /// Grids for the first image only.
    pub grids: Vec<FeatureGrid>,
}

fn histogram(scale: usize, values: impl Iterator<Item = f64>) -> Histogram {
    let mut counts = [0; HISTOGRAM_BINS];
    for v in values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Histogram { scale, counts }
}

/// Tiles the channels of item 0 into a near-square grid with one-pixel
/// gaps, mapping `[lo, hi]` linearly onto 0..=255.
pub fn channel_grid(map: &FeatureMap, lo: f64, hi: f64) -> GrayImage {
    let (c, h, w) = (map.channels(), map.height(), map.width());
    let cols = (c as f64).sqrt().ceil().max(1.0) as usize;
    let rows = c.div_ceil(cols);
    let width = cols * (w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height];
    let span = if hi > lo { hi - lo } else { 1.0 };
    let item = map.item(0);
    for ch in 0..c {
        let (gx, gy) = ((ch % cols) * (w + 1), (ch / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                let v = (item[(ch * h + y) * w + x] - lo) / span;
                pixels[(gy + y) * width + gx + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    GrayImage { width, height, pixels }
}

fn value_range(maps: &[&FeatureMap]) -> (f64, f64) {
    maps.iter()
        .flat_map(|m| m.item(0).iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn gate_diagnostics(detector: &Detector, scenes: &[SceneAnnotation]) -> Result<GateDiagnostics> {
    let num_scales = detector.config.pyramid.scale_sizes.len();
    let mut rows = Vec::new();
    let mut global = Vec::with_capacity(scenes.len());
    let mut per_scale_channels: Vec<Vec<f64>> = vec![Vec::new(); num_scales];
    let mut grids = Vec::new();
    for (image, s) in scenes.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = detector.forward(&mut tape, &s.image)?;
        let pred = detector.collect(&tape, &vars);
        let g = pred.global_attention.into_iter().next().unwrap_or_default();
        let e = pred.channel_attention.into_iter().next().unwrap_or_default();
        for (scale, channels) in e.iter().enumerate() {
            for (ch, &value) in channels.iter().enumerate() {
                rows.push(AttentionRow {
                    image,
                    scale,
                    channel: Some(ch),
                    value,
                });
            }
            per_scale_channels[scale].extend_from_slice(channels);
            rows.push(AttentionRow {
                image,
                scale,
                channel: None,
                value: g[scale],
            });
        }
        if image == 0 {
            for scale in 0..num_scales {
                let before = tape.value(vars.pyramid.pre_gate[scale]);
                let after = tape.value(vars.pyramid.blocks[scale]);
                let (lo, hi) = value_range(&[before, after]);
                grids.push(FeatureGrid {
                    scale,
                    before: channel_grid(before, lo, hi),
                    after: channel_grid(after, lo, hi),
                });
            }
        }
        global.push(g);
    }
    let gates = detector.config.pyramid.use_gates;
    let cells = attention_cells(num_scales, scenes, &global);
    let mean_of = |scale: usize, bucket: SizeBucket| {
        cells
            .iter()
            .find(|c| c.scale == scale && c.bucket == bucket)
            .and_then(|c| c.mean)
    };
    let small_vs_large = if gates {
        (0..num_scales)
            .map(|scale| {
                let small = mean_of(scale, SizeBucket::Small);
                let large = mean_of(scale, SizeBucket::Large);
                ScaleContrast {
                    scale,
                    small,
                    large,
                    difference: small.zip(large).map(|(s, l)| s - l),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let histograms = if gates {
        per_scale_channels
            .iter()
            .enumerate()
            .map(|(scale, v)| histogram(scale, v.iter().copied()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(GateDiagnostics {
        summary: DiagnosticSummary {
            num_images: scenes.len(),
            gates,
            mean_global_attention: cells,
            small_vs_large,
            histograms,
        },
        rows,
        grids,
    })
}

impl GateDiagnostics {
    pub fn attention_csv(&self) -> String {
        let mut s = String::from("image_id,scale_id,channel_id,value\n");
        for r in &self.rows {
            let ch = r.channel.map_or(-1, |c| c as i64);
            let _ = writeln!(s, "{},{},{},{:?}", r.image, r.scale, ch, r.value);
        }
        s
    }

    pub fn global_attention_csv(&self) -> String {
        let mut s = String::from("scale_id,bucket,mean,images\n");
        for c in &self.summary.mean_global_attention {
            let mean = c.mean.map_or(String::new(), |m| format!("{m:?}"));
            let _ = writeln!(s, "{},{},{},{}", c.scale, c.bucket, mean, c.images);
        }
        s
    }

    pub fn histograms_csv(&self) -> String {
        let mut s = String::from("scale_id,bin_lo,bin_hi,count\n");
        for h in &self.summary.histograms {
            for (i, n) in h.counts.iter().enumerate() {
                let lo = i as f64 / HISTOGRAM_BINS as f64;
                let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
                let _ = writeln!(s, "{},{lo},{hi},{n}", h.scale);
            }
        }
        s
    }

    /// Writes the CSV tables, `summary.json` and `grids/*.pgm` into `dir`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("grids"))?;
        fs::write(dir.join("attention.csv"), self.attention_csv())?;
        fs::write(dir.join("global_attention.csv"), self.global_attention_csv())?;
        fs::write(dir.join("histograms.csv"), self.histograms_csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        for g in &self.grids {
            let mut before = Vec::new();
            g.before.write_pgm(&mut before)?;
            fs::write(dir.join(format!("grids/scale{}_before.pgm", g.scale)), before)?;
            let mut after = Vec::new();
            g.after.write_pgm(&mut after)?;
            fs::write(dir.join(format!("grids/scale{}_after.pgm", g.scale)), after)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
struct TensorStats {
    name: String,
    len: usize,
    non_finite_values: usize,
    non_finite_grads: usize,
    max_abs_value: f64,
    max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
struct NanDump<'a> {
    iteration: usize,
    recent_losses: Vec<[f64; 4]>,
    tensors: Vec<TensorStats>,
    worst: Option<&'a str>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().filter(|x| x.is_finite()).fold(0.0, |m, x| m.max(x.abs()))
}

/// JSON describing the parameter state when training aborted on a
/// non-finite loss: per-tensor non-finite counts and magnitudes plus the
/// last recorded losses.
pub fn nan_dump(iteration: usize, losses: &[LossRecord], store: &ParamStore) -> Result<String> {
    let tensors: Vec<TensorStats> = store
        .iter()
        .map(|p| TensorStats {
            name: p.name.clone(),
            len: p.len(),
            non_finite_values: p.values.iter().filter(|v| !v.is_finite()).count(),
            non_finite_grads: p.grad.iter().filter(|v| !v.is_finite()).count(),
            max_abs_value: max_abs(&p.values),
            max_abs_grad: max_abs(&p.grad),
        })
        .collect();
    let worst = tensors
        .iter()
        .filter(|t| t.non_finite_values + t.non_finite_grads > 0)
        .map(|t| t.name.as_str())
        .next()
        .or_else(|| {
            tensors
                .iter()
                .max_by(|a, b| a.max_abs_value.total_cmp(&b.max_abs_value))
                .map(|t| t.name.as_str())
        });
    let recent_losses = losses
        .iter()
        .rev()
        .take(20)
        .rev()
        .map(|r| [r.iteration as f64, r.loss, r.cls_loss, r.loc_loss])
        .collect();
    let dump = NanDump {
        iteration,
        recent_losses,
        tensors: tensors.clone(),
        worst,
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}
