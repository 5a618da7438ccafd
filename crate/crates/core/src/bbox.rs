//! Axis-aligned boxes in centre/size form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box in normalized `[0, 1]` coordinates of some reference frame (an
/// image or a search crop).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validated constructor: centre inside the unit square, `0 < w, h ≤ 1`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        let ok = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid bounding box {self:?}")))
        }
    }

    /// Clips the box extent to the unit square. Fails if nothing remains.
    pub fn clamped(&self) -> Result<Self> {
        let (x1, y1, x2, y2) = self.corners();
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        Self::from_corners(x1, y1, x2, y2)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(self.as_array(), other.as_array())
    }

    /// Whether the point lies inside the box; edges count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    /// Whether the whole box lies within the unit square (with tolerance).
    pub fn inside_unit_square(&self, tol: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x1 >= -tol && y1 >= -tol && x2 <= 1.0 + tol && y2 <= 1.0 + tol
    }
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two `[cx, cy, w, h]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let p = corners(a);
    let g = corners(b);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU, in `(-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    1.0 - giou_loss(a, b).0
}

/// `1 − GIoU(pred, gt)` and its gradient with respect to `pred`'s
/// `[cx, cy, w, h]`.
pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let p = corners(pred);
    let g = corners(gt);
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);

    let iw_raw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih_raw = p[3].min(g[3]) - p[1].max(g[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let enclose = cw * ch;
    let iou = inter / union;
    let loss = 2.0 - iou - union / enclose;

    // d(corner) for x1, y1, x2, y2 of pred
    let di = {
        let x_active = iw_raw > 0.0 && ih_raw > 0.0;
        if x_active {
            [
                if p[0] >= g[0] { -ih } else { 0.0 },
                if p[1] >= g[1] { -iw } else { 0.0 },
                if p[2] <= g[2] { ih } else { 0.0 },
                if p[3] <= g[3] { iw } else { 0.0 },
            ]
        } else {
            [0.0; 4]
        }
    };
    let da = [-ph, -pw, ph, pw];
    let dc = [
        if p[0] <= g[0] { -ch } else { 0.0 },
        if p[1] <= g[1] { -cw } else { 0.0 },
        if p[2] >= g[2] { ch } else { 0.0 },
        if p[3] >= g[3] { cw } else { 0.0 },
    ];
    let mut dcorner = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        let diou = (di[k] * union - inter * du) / (union * union);
        dcorner[k] = -diou - du / enclose + union * dc[k] / (enclose * enclose);
    }
    let grad = [
        dcorner[0] + dcorner[2],
        dcorner[1] + dcorner[3],
        0.5 * (dcorner[2] - dcorner[0]),
        0.5 * (dcorner[3] - dcorner[1]),
    ];
    (loss, grad)
}

/// Mean absolute difference over the four box parameters and its gradient.
pub fn l1_loss(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - gt[k];
        loss += d.abs() / 4.0;
        grad[k] = if d > 0.0 { 0.25 } else if d < 0.0 { -0.25 } else { 0.0 };
    }
    (loss, grad)
}
