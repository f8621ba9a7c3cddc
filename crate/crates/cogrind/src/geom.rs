//! Axis-aligned boxes in two coordinate conventions.
//!
//! [`Box2`] is corner form `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1` —
//! the form every metric consumes, in pixels. [`CenterBox`] is the
//! normalized `(cx, cy, w, h)` form the detection head predicts and the
//! JSONL files store. Conversions between the two are explicit so a box
//! is never ambiguous about its convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): requires x2 > x1 and y2 > y1")]
    Degenerate { x1: Real, y1: Real, x2: Real, y2: Real },
}

/// Corner-form box, `x` rightward and `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x1: Real,
    pub y1: Real,
    pub x2: Real,
    pub y2: Real,
}

impl Box2 {
    pub fn new(x1: Real, y1: Real, x2: Real, y2: Real) -> Self {
        Box2 { x1, y1, x2, y2 }
    }

    fn check(&self) -> Result<(), GeomError> {
        if self.x2 > self.x1 && self.y2 > self.y1 {
            Ok(())
        } else {
            Err(GeomError::Degenerate { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 })
        }
    }

    pub fn width(&self) -> Real {
        self.x2 - self.x1
    }

    pub fn height(&self) -> Real {
        self.y2 - self.y1
    }

    pub fn area(&self) -> Real {
        self.width() * self.height()
    }

    pub fn center(&self) -> (Real, Real) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Intersection-over-union. Degenerate operands are contract errors,
    /// never silently scored as zero.
    pub fn iou(&self, other: &Box2) -> Result<Real, GeomError> {
        self.check()?;
        other.check()?;
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        Ok(inter / (self.area() + other.area() - inter))
    }

    /// Euclidean distance between box centers.
    pub fn center_distance(&self, other: &Box2) -> Real {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Clamp to `[0, w] x [0, h]`. May produce a degenerate box if the
    /// input lies fully outside; callers decide how to handle that.
    pub fn clip(&self, w: Real, h: Real) -> Box2 {
        Box2 {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Shift by `(dx, dy)`.
    pub fn translate(&self, dx: Real, dy: Real) -> Box2 {
        Box2 { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }
}

/// Center-form box in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
}

impl CenterBox {
    pub fn new(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        CenterBox { cx, cy, w, h }
    }

    /// To corner form in pixels on a `size x size` image.
    pub fn to_pixels(&self, size: Real) -> Box2 {
        Box2 {
            x1: (self.cx - self.w / 2.0) * size,
            y1: (self.cy - self.h / 2.0) * size,
            x2: (self.cx + self.w / 2.0) * size,
            y2: (self.cy + self.h / 2.0) * size,
        }
    }

    /// From corner form in pixels on a `size x size` image.
    pub fn from_pixels(b: &Box2, size: Real) -> CenterBox {
        CenterBox {
            cx: (b.x1 + b.x2) / (2.0 * size),
            cy: (b.y1 + b.y2) / (2.0 * size),
            w: (b.x2 - b.x1) / size,
            h: (b.y2 - b.y1) / size,
        }
    }
}
