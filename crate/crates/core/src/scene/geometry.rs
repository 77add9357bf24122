use serde::{Deserialize, Serialize};

use super::SceneError;

/// Axis-aligned box in normalized image coordinates, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, SceneError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.x1 < self.x2 && self.y1 < self.y2)
            || ![self.x1, self.y1, self.x2, self.y2].into_iter().all(in_unit)
        {
            return Err(SceneError::InvalidBox(*self));
        }
        Ok(())
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Tightest box enclosing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

/// Intersection over set-union area; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Areas entering the pair spatial feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxStats {
    pub area_h: f64,
    pub area_o: f64,
    pub intersection: f64,
    /// Area of the enclosing box, not of the set union.
    pub union: f64,
    pub union_box: BBox,
}

pub fn box_stats(h: &BBox, o: &BBox) -> BoxStats {
    let union_box = h.enclosing(o);
    BoxStats {
        area_h: h.area(),
        area_o: o.area(),
        intersection: h.intersection_area(o),
        union: union_box.area(),
        union_box,
    }
}
