use crate::detect::boxes::BBox;

/// Default box in normalized centre form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub scale_index: usize,
    pub aspect: f64,
}

impl PriorBox {
    pub fn center_form(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub scale_sizes: Vec<usize>,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Adds the 1.6 and 1/1.6 aspect ratios.
    pub extra_aspect: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            scale_sizes: vec![40, 20, 10, 5, 3, 2],
            min_scale: 0.1,
            max_scale: 0.9,
            extra_aspect: true,
        }
    }
}

pub const EXTRA_ASPECT: f64 = 1.6;

impl PriorConfig {
    /// Box scale of every prediction layer, linearly spaced.
    pub fn scales(&self) -> Vec<f64> {
        let m = self.scale_sizes.len();
        (0..m)
            .map(|k| {
                if m == 1 {
                    self.min_scale
                } else {
                    self.min_scale + (self.max_scale - self.min_scale) * k as f64 / (m - 1) as f64
                }
            })
            .collect()
    }

    /// Per-cell `(size, aspect)` pairs: aspect 1, the geometric-mean square,
    /// 2, 1/2 and optionally 1.6, 1/1.6.
    fn cell_shapes(&self, k: usize, scales: &[f64]) -> Vec<(f64, f64)> {
        let s = scales[k];
        let next = scales.get(k + 1).copied().unwrap_or(1.0);
        let mut shapes = vec![(s, 1.0), ((s * next).sqrt(), 1.0), (s, 2.0), (s, 0.5)];
        if self.extra_aspect {
            shapes.push((s, EXTRA_ASPECT));
            shapes.push((s, 1.0 / EXTRA_ASPECT));
        }
        shapes
    }

    pub fn aspects_per_cell(&self) -> usize {
        if self.extra_aspect {
            6
        } else {
            4
        }
    }

    pub fn num_priors(&self) -> usize {
        self.scale_sizes.iter().map(|s| s * s).sum::<usize>() * self.aspects_per_cell()
    }
}

/// Enumerates priors in `(scale, row, col, aspect)` order, clipped to the
/// unit square.
pub fn generate_priors(config: &PriorConfig) -> Vec<PriorBox> {
    let scales = config.scales();
    let mut priors = Vec::with_capacity(config.num_priors());
    for (k, &f) in config.scale_sizes.iter().enumerate() {
        let shapes = config.cell_shapes(k, &scales);
        for row in 0..f {
            for col in 0..f {
                let cx = (col as f64 + 0.5) / f as f64;
                let cy = (row as f64 + 0.5) / f as f64;
                for &(size, aspect) in &shapes {
                    let r = aspect.sqrt();
                    let b = BBox::from_center(cx, cy, size * r, size / r).clip();
                    let (bx, by) = b.center();
                    priors.push(PriorBox {
                        cx: bx,
                        cy: by,
                        w: b.width(),
                        h: b.height(),
                        scale_index: k,
                        aspect,
                    });
                }
            }
        }
    }
    priors
}
