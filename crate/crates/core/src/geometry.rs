//! Axis-aligned box arithmetic.
//!
//! Boxes are stored in center form `(cx, cy, w, h)` in continuous pixel
//! coordinates. Corner form only appears at I/O boundaries, see
//! [`CornerBox`].

use crate::error::{Error, Result};

/// A center-parameterized axis-aligned box with strictly positive size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in ({cx}, {cy}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        Self::new(0.5 * (xmin + xmax), 0.5 * (ymin + ymax), xmax - xmin, ymax - ymin)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// The four fields in `(cx, cy, w, h)` order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn corners(&self) -> CornerBox {
        CornerBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.corners().area()
    }

    /// Uniformly scales every field (position and size) by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Horizontal mirror inside an image of the given width.
    pub fn mirrored(&self, width: f64) -> Self {
        Self {
            cx: width - self.cx,
            ..*self
        }
    }
}

/// Corner form `(xmin, ymin, xmax, ymax)`, unvalidated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0) * (self.ymax - self.ymin).max(0.0)
    }

    pub fn to_bbox(&self) -> Result<BBox> {
        BBox::from_corners(self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

/// Scale-invariant translation `(dx, dy)` and log-space size shift `(dw, dh)`
/// from a proposal to a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionTarget {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl RegressionTarget {
    pub const ZERO: Self = Self {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageExtent {
    width: f64,
    height: f64,
}

impl ImageExtent {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite()) || width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidBox(format!("invalid image extent {width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn contains(&self, b: &BBox) -> bool {
        let c = b.corners();
        c.xmin >= 0.0 && c.ymin >= 0.0 && c.xmax <= self.width && c.ymax <= self.height
    }
}

/// Intersection area over union area. Boxes touching only along an edge
/// have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let iw = ca.xmax.min(cb.xmax) - ca.xmin.max(cb.xmin);
    let ih = ca.ymax.min(cb.ymax) - ca.ymin.max(cb.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Offsets mapping `proposal` onto `target`.
pub fn encode(proposal: &BBox, target: &BBox) -> RegressionTarget {
    RegressionTarget {
        dx: (target.cx - proposal.cx) / proposal.w,
        dy: (target.cy - proposal.cy) / proposal.h,
        dw: (target.w / proposal.w).ln(),
        dh: (target.h / proposal.h).ln(),
    }
}

/// Applies `offsets` to `proposal`; the inverse of [`encode`].
pub fn decode(proposal: &BBox, offsets: &RegressionTarget) -> Result<BBox> {
    if !offsets.is_finite() {
        return Err(Error::DecodeOverflow(offsets.to_array()));
    }
    let cx = proposal.cx + offsets.dx * proposal.w;
    let cy = proposal.cy + offsets.dy * proposal.h;
    let w = proposal.w * offsets.dw.exp();
    let h = proposal.h * offsets.dh.exp();
    // exp overflow gives inf, underflow gives a zero-size box
    BBox::new(cx, cy, w, h).map_err(|_| Error::DecodeOverflow(offsets.to_array()))
}

/// Clamps the box's corners to the image and re-expresses it in center form.
pub fn clip(b: &BBox, extent: &ImageExtent) -> Result<BBox> {
    if extent.contains(b) {
        return Ok(*b);
    }
    let c = b.corners();
    let xmin = c.xmin.clamp(0.0, extent.width);
    let xmax = c.xmax.clamp(0.0, extent.width);
    let ymin = c.ymin.clamp(0.0, extent.height);
    let ymax = c.ymax.clamp(0.0, extent.height);
    if xmax <= xmin || ymax <= ymin {
        return Err(Error::EmptyAfterClip);
    }
    BBox::from_corners(xmin, ymin, xmax, ymax)
}
