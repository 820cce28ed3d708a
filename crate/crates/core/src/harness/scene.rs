//! Synthetic scenes: filled rectangles, disks and triangles in fixed
//! per-class colours over a noisy grey background.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Normalized area below which an object is small.
pub const SMALL_AREA: f64 = 0.02;
/// Normalized area above which an object is large.
pub const LARGE_AREA: f64 = 0.15;

const AREA_RANGES: [(f64, f64); 3] = [(0.006, SMALL_AREA), (SMALL_AREA, LARGE_AREA), (LARGE_AREA, 0.30)];

pub const NUM_SHAPES: usize = 3;

const COLORS: [[f64; 3]; NUM_SHAPES] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.15, 0.25, 0.9]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area > LARGE_AREA {
            SizeBucket::Large
        } else {
            SizeBucket::Medium
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Probability of drawing each size bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeMix {
    pub weights: [f64; 3],
}

impl Default for SizeMix {
    fn default() -> Self {
        Self {
            weights: [1.0 / 3.0; 3],
        }
    }
}

impl SizeMix {
    pub fn only(bucket: SizeBucket) -> Self {
        let mut weights = [0.0; 3];
        weights[bucket.index()] = 1.0;
        Self { weights }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SizeBucket {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for b in SizeBucket::ALL {
            if u < self.weights[b.index()] {
                return b;
            }
            u -= self.weights[b.index()];
        }
        SizeBucket::Large
    }
}

/// `small=0.5,medium=0.25,large=0.25`; omitted buckets get weight zero.
impl FromStr for SizeMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut weights = [0.0; 3];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("size mix entry `{part}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("size mix weight `{v}` is not a number")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("size mix weight {v} must be non-negative")));
            }
            let b = match k.trim() {
                "small" => SizeBucket::Small,
                "medium" => SizeBucket::Medium,
                "large" => SizeBucket::Large,
                other => return Err(Error::Config(format!("unknown size bucket `{other}`"))),
            };
            weights[b.index()] = v;
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("size mix has no positive weight".into()));
        }
        Ok(Self { weights })
    }
}

impl fmt::Display for SizeMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [s, m, l] = self.weights;
        write!(f, "small={s},medium={m},large={l}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
    pub bucket: SizeBucket,
}

impl ObjectAnnotation {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    /// `(1, 3, size, size)`, values centred around zero.
    pub image: FeatureMap,
    pub objects: Vec<ObjectAnnotation>,
}

impl SceneAnnotation {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(ObjectAnnotation::ground_truth).collect()
    }

    /// Bucket of the largest object, if any.
    pub fn dominant_bucket(&self) -> Option<SizeBucket> {
        self.objects
            .iter()
            .max_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()))
            .map(|o| o.bucket)
    }
}

fn covers(class_id: usize, b: &BBox, x: f64, y: f64) -> bool {
    if x < b.x1 || x > b.x2 || y < b.y1 || y > b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    match class_id % NUM_SHAPES {
        0 => true,
        1 => ((x - cx) / hw).powi(2) + ((y - cy) / hh).powi(2) <= 1.0,
        _ => (x - cx).abs() <= hw * (y - b.y1) / b.height(),
    }
}

fn sample_box<R: Rng + ?Sized>(rng: &mut R, bucket: SizeBucket) -> BBox {
    let (lo, hi) = AREA_RANGES[bucket.index()];
    let area = rng.random_range(lo..hi);
    let ratio: f64 = rng.random_range(0.67..1.5);
    let w = (area * ratio).sqrt();
    let h = (area / ratio).sqrt();
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Renders one scene from `rng`.
pub fn generate_scene_with<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    num_objects: usize,
    num_classes: usize,
    mix: &SizeMix,
) -> SceneAnnotation {
    let mut objects: Vec<ObjectAnnotation> = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        let class_id = rng.random_range(0..num_classes.max(1));
        let bucket = mix.sample(rng);
        let mut bbox = sample_box(rng, bucket);
        for _ in 0..50 {
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.1) {
                break;
            }
            bbox = sample_box(rng, bucket);
        }
        objects.push(ObjectAnnotation {
            class_id,
            bucket: SizeBucket::of_area(bbox.area()),
            bbox,
        });
    }

    let mut data = vec![0.0; 3 * size * size];
    let plane = size * size;
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = rng.random_range(-0.1..0.1);
        }
    }
    let inv = 1.0 / size as f64;
    for o in &objects {
        let color = COLORS[o.class_id % NUM_SHAPES];
        let (px0, px1) = (
            (o.bbox.x1 * size as f64) as usize,
            ((o.bbox.x2 * size as f64).ceil() as usize).min(size),
        );
        let (py0, py1) = (
            (o.bbox.y1 * size as f64) as usize,
            ((o.bbox.y2 * size as f64).ceil() as usize).min(size),
        );
        for py in py0..py1 {
            for px in px0..px1 {
                let (x, y) = ((px as f64 + 0.5) * inv, (py as f64 + 0.5) * inv);
                if covers(o.class_id, &o.bbox, x, y) {
                    for c in 0..3 {
                        data[c * plane + py * size + px] = color[c] - 0.5 + rng.random_range(-0.05..0.05);
                    }
                }
            }
        }
    }
    SceneAnnotation {
        image: FeatureMap::from_vec([1, 3, size, size], data).expect("image shape"),
        objects,
    }
}

pub fn generate_scene(
    seed: u64,
    size: usize,
    num_objects: usize,
    num_classes: usize,
    mix: &SizeMix,
) -> SceneAnnotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene_with(&mut rng, size, num_objects, num_classes, mix)
}
