//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

/// Top-left corner plus size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.x, self.y, self.w, self.h]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Overlap with the `[0, width) × [0, height)` frame.
    pub fn overlaps_frame(&self, width: usize, height: usize) -> bool {
        self.x < width as f64 && self.y < height as f64 && self.x2() > 0.0 && self.y2() > 0.0
    }

    /// Scales the box about its center.
    pub fn shrink(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.w * factor, self.h * factor)
    }
}

/// Grid cell `(row, col)` holding the point `(x, y)` at `stride`; `None`
/// outside the grid. Points on a cell boundary belong to the lower-right
/// cell (floor).
pub fn cell_of(x: f64, y: f64, stride: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let r = (y / stride as f64).floor() as usize;
    let c = (x / stride as f64).floor() as usize;
    (r < rows && c < cols).then_some((r, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BBox::new(1.0, 0.0, 2.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn center_to_cell_uses_floor() {
        assert_eq!(cell_of(12.0, 20.0, 8, 4, 4), Some((2, 1)));
        assert_eq!(cell_of(16.0, 8.0, 8, 4, 4), Some((1, 2)));
        assert_eq!(cell_of(32.0, 0.0, 8, 4, 4), None);
        assert_eq!(cell_of(-0.1, 0.0, 8, 4, 4), None);
    }
}
