//! Corner boxes, IoU/GIoU, and their differentiable counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Smallest extent an emitted box may have along either axis.
pub const MIN_EXTENT: f64 = 1e-4;

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Finite with strictly ordered corners.
    pub fn is_proper(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn in_unit_square(&self) -> bool {
        self.is_proper() && self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= 1.0 && self.y2 <= 1.0
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if self.is_proper() {
            Ok(())
        } else {
            Err(Error::Degenerate { op, detail: format!("{self:?}") })
        }
    }

    /// Clamps into `[0,1]^2` keeping at least [`MIN_EXTENT`] per side.
    pub fn clipped(&self) -> BBox {
        let axis = |lo: f64, hi: f64| {
            let lo = lo.clamp(0.0, 1.0 - MIN_EXTENT);
            let hi = hi.clamp(lo + MIN_EXTENT, 1.0);
            (lo, hi)
        };
        let (x1, x2) = axis(self.x1, self.x2);
        let (y1, y2) = axis(self.y1, self.y2);
        BBox::new(x1, y1, x2, y2)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; callers guarantee proper boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let hull = (self.x2.max(other.x2) - self.x1.min(other.x1)) * (self.y2.max(other.y2) - self.y1.min(other.y1));
        inter / union - (hull - union) / hull
    }

    /// Sum of absolute coordinate differences.
    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array().iter().zip(other.to_array()).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// IoU with validation of both inputs.
pub fn checked_iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate("iou")?;
    b.validate("iou")?;
    Ok(a.iou(b))
}

/// Maps `k x 4` rows of `(cx, cy, w, h)` to corners.
pub fn cxcywh_to_corners(g: &mut Graph, x: Var) -> Result<Var> {
    #[rustfmt::skip]
    let m = Tensor::matrix(4, 4, vec![
        1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0,
        -0.5, 0.0, 0.5, 0.0,
        0.0, -0.5, 0.0, 0.5,
    ]);
    let m = g.constant(m);
    g.matmul(x, m)
}

fn tensor_of(boxes: &[BBox]) -> Tensor {
    Tensor::matrix(boxes.len(), 4, boxes.iter().flat_map(|b| b.to_array()).collect())
}

/// Per-row L1 distance to fixed targets, `k x 1`.
pub fn l1_rows(g: &mut Graph, pred: Var, targets: &[BBox]) -> Result<Var> {
    let t = g.constant(tensor_of(targets));
    let d = g.sub(pred, t)?;
    let d = g.abs(d)?;
    let ones = g.constant(Tensor::full(4, 1, 1.0));
    g.matmul(d, ones)
}

/// Per-row `1 - GIoU` against fixed targets, `k x 1`. Predicted rows must
/// have positive extent.
pub fn giou_loss_rows(g: &mut Graph, pred: Var, targets: &[BBox]) -> Result<Var> {
    let t = g.constant(tensor_of(targets));
    let col = |g: &mut Graph, v: Var, j: usize| g.slice_cols(v, j, 1);
    let (px1, py1, px2, py2) = (col(g, pred, 0)?, col(g, pred, 1)?, col(g, pred, 2)?, col(g, pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (col(g, t, 0)?, col(g, t, 1)?, col(g, t, 2)?, col(g, t, 3)?);

    let pw = g.sub(px2, px1)?;
    let ph = g.sub(py2, py1)?;
    let area_p = g.mul(pw, ph)?;
    let area_t: Vec<f64> = targets.iter().map(BBox::area).collect();
    let area_t = g.constant(Tensor::matrix(targets.len(), 1, area_t));

    let ix1 = g.maximum(px1, tx1)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let union = g.add(area_p, area_t)?;
    let union = g.sub(union, inter)?;

    let hx1 = g.minimum(px1, tx1)?;
    let hy1 = g.minimum(py1, ty1)?;
    let hx2 = g.maximum(px2, tx2)?;
    let hy2 = g.maximum(py2, ty2)?;
    let hw = g.sub(hx2, hx1)?;
    let hh = g.sub(hy2, hy1)?;
    let hull = g.mul(hw, hh)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let penalty = g.div(gap, hull)?;
    let giou = g.sub(iou, penalty)?;
    let neg = g.scale(giou, -1.0)?;
    g.add_scalar(neg, 1.0)
}
