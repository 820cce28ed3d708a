use serde::{Deserialize, Serialize};

/// SSD centre/size variances.
pub const CENTER_VARIANCE: f64 = 0.1;
pub const SIZE_VARIANCE: f64 = 0.2;

/// Axis-aligned box in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self) -> Self {
        Self::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; zero when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression target of `gt` relative to a centre-form prior `(cx, cy, w, h)`.
pub fn encode(gt: &BBox, prior: [f64; 4]) -> [f64; 4] {
    let [pcx, pcy, pw, ph] = prior;
    let (gcx, gcy) = gt.center();
    [
        (gcx - pcx) / (CENTER_VARIANCE * pw),
        (gcy - pcy) / (CENTER_VARIANCE * ph),
        (gt.width() / pw).ln() / SIZE_VARIANCE,
        (gt.height() / ph).ln() / SIZE_VARIANCE,
    ]
}

/// Inverse of [`encode`].
pub fn decode(delta: [f64; 4], prior: [f64; 4]) -> BBox {
    let [pcx, pcy, pw, ph] = prior;
    let cx = pcx + delta[0] * CENTER_VARIANCE * pw;
    let cy = pcy + delta[1] * CENTER_VARIANCE * ph;
    let w = pw * (delta[2] * SIZE_VARIANCE).exp();
    let h = ph * (delta[3] * SIZE_VARIANCE).exp();
    BBox::from_center(cx, cy, w, h)
}
