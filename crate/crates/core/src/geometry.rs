//! Bounding boxes and the absolute/relative spatial encodings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]: requires x_t < x_b and y_t < y_b")]
    Degenerate(f64, f64, f64, f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_t: f64,
    y_t: f64,
    x_b: f64,
    y_b: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.corners()
    }
}

impl BoundingBox {
    pub fn new(x_t: f64, y_t: f64, x_b: f64, y_b: f64) -> Result<Self, GeometryError> {
        // NaN fails both comparisons and is rejected too.
        if !(x_t < x_b && y_t < y_b)
            || !(x_t.is_finite() && y_b.is_finite() && x_b.is_finite() && y_t.is_finite())
        {
            return Err(GeometryError::Degenerate(x_t, y_t, x_b, y_b));
        }
        Ok(Self { x_t, y_t, x_b, y_b })
    }

    pub fn from_center(x_c: f64, y_c: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x_c - w / 2.0, y_c - h / 2.0, x_c + w / 2.0, y_c + h / 2.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_t, self.y_t, self.x_b, self.y_b]
    }

    pub fn width(&self) -> f64 {
        self.x_b - self.x_t
    }

    pub fn height(&self) -> f64 {
        self.y_b - self.y_t
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_t <= other.x_t
            && self.y_t <= other.y_t
            && self.x_b >= other.x_b
            && self.y_b >= other.y_b
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x_b.min(other.x_b) - self.x_t.max(other.x_t)).max(0.0);
        let ih = (self.y_b.min(other.y_b) - self.y_t.max(other.y_t)).max(0.0);
        let inter = iw * ih;
        inter / (self.area() + other.area() - inter)
    }
}

/// `[x_t, y_t, x_b, y_b, w·h]`.
pub fn encode_absolute(b: &BoundingBox) -> [f64; 5] {
    [b.x_t, b.y_t, b.x_b, b.y_b, b.area()]
}

/// `[x_c, y_c, w, h]`.
pub fn to_center_form(b: &BoundingBox) -> [f64; 4] {
    [
        (b.x_t + b.x_b) / 2.0,
        (b.y_t + b.y_b) / 2.0,
        b.width(),
        b.height(),
    ]
}

/// Position of box `j` expressed in the centred frame of box `i`, plus the
/// area ratio. Not symmetric in its arguments.
///
/// Offsets are taken from box `i`'s top-left corner before subtracting the
/// half extent, so the self-case evaluates to `[-0.5, -0.5, 0.5, 0.5, 1]`
/// exactly in floating point.
pub fn relative_spatial(bi: &BoundingBox, bj: &BoundingBox) -> [f64; 5] {
    let (w, h) = (bi.width(), bi.height());
    let (half_w, half_h) = (w / 2.0, h / 2.0);
    [
        ((bj.x_t - bi.x_t) - half_w) / w,
        ((bj.y_t - bi.y_t) - half_h) / h,
        ((bj.x_b - bi.x_t) - half_w) / w,
        ((bj.y_b - bi.y_t) - half_h) / h,
        bj.area() / bi.area(),
    ]
}

pub fn union_box(bi: &BoundingBox, bj: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x_t: bi.x_t.min(bj.x_t),
        y_t: bi.y_t.min(bj.y_t),
        x_b: bi.x_b.max(bj.x_b),
        y_b: bi.y_b.max(bj.y_b),
    }
}

/// `relu(W_lift · s + b_lift)`: lifts the raw 5-d relative encoding to d_s dims.
///
/// `w_lift` (d_s×5) and `b_lift` (d_s) are nodes already registered on `g`.
pub fn lift_spatial(
    g: &mut Graph<'_>,
    s_raw: &[f64; 5],
    w_lift: Var,
    b_lift: Var,
) -> Result<Var, GeometryError> {
    let s = g.vector(s_raw.to_vec(), false);
    let z = g.matvec(w_lift, s)?;
    let z = g.add(z, b_lift)?;
    Ok(g.relu(z))
}
