//! Normalized axis-aligned bounding boxes.
//!
//! Boxes live in `[0,1]²` image coordinates with `[x1, y1, x2, y2]` order
//! (left, top, right, bottom). The wire format serializes a box as a bare
//! 4-element JSON array.

use serde::{Deserialize, Serialize};

/// A normalized bounding box `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// True when coordinates are finite and edge-ordered (`x1 <= x2`, `y1 <= y2`).
    pub fn is_ordered(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// True when ordered and fully inside the unit square.
    pub fn is_normalized(&self) -> bool {
        self.is_ordered()
            && self
                .as_array()
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Clamp every coordinate into `[0,1]`, preserving edge order.
    pub fn clamped(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &Bbox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[f64; 4]> for Bbox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Bbox> for [f64; 4] {
    fn from(b: Bbox) -> Self {
        b.as_array()
    }
}
