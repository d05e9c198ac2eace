//! Detected 2D keypoints.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModelAsset, Laterality};

/// Keypoints with confidence below this are treated as missing.
pub const DEFAULT_KP_CONF_MIN: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint2D {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Keypoint2D { x, y, confidence }
    }

    pub fn pos(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// One person's keypoints in the asset's keypoint order. Laterality tags come
/// from the asset's keypoint map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Keypoints2D {
    pub points: Vec<Keypoint2D>,
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn union(&self, o: &BBox) -> BBox {
        let x0 = self.x.min(o.x);
        let y0 = self.y.min(o.y);
        let x1 = (self.x + self.w).max(o.x + o.w);
        let y1 = (self.y + self.h).max(o.y + o.h);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    /// Grows the box by `frac` of its size on every side.
    pub fn expanded(&self, frac: f64) -> BBox {
        BBox { x: self.x - self.w * frac, y: self.y - self.h * frac, w: self.w * (1.0 + 2.0 * frac), h: self.h * (1.0 + 2.0 * frac) }
    }

    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + self.w * 0.5, self.y + self.h * 0.5)
    }
}

impl Keypoints2D {
    pub fn new(points: Vec<Keypoint2D>) -> Self {
        Keypoints2D { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_valid(&self, i: usize, conf_min: f64) -> bool {
        self.points.get(i).is_some_and(|p| p.confidence >= conf_min && p.confidence > 0.0 && p.x.is_finite() && p.y.is_finite())
    }

    pub fn valid_count(&self, conf_min: f64) -> usize {
        (0..self.points.len()).filter(|&i| self.is_valid(i, conf_min)).count()
    }

    /// Bounding box of the valid keypoints.
    pub fn bbox(&self, conf_min: f64) -> Option<BBox> {
        let valid: Vec<&Keypoint2D> = self.points.iter().enumerate().filter(|(i, _)| self.is_valid(*i, conf_min)).map(|(_, p)| p).collect();
        if valid.is_empty() {
            return None;
        }
        let x0 = valid.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let y0 = valid.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let x1 = valid.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let y1 = valid.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        Some(BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    /// Horizontal mirror about `x = width / 2` with left and right keypoints
    /// exchanged, so tags stay anatomically consistent.
    pub fn mirrored(&self, width: f64, asset: &BodyModelAsset) -> Keypoints2D {
        let partner = |i: usize| -> usize {
            let kp = &asset.keypoints[i];
            let other = match kp.laterality {
                Laterality::Left => kp.name.replacen("left", "right", 1),
                Laterality::Right => kp.name.replacen("right", "left", 1),
                Laterality::Center => return i,
            };
            asset.keypoint_index(&other).unwrap_or(i)
        };
        let points = (0..self.points.len())
            .map(|i| {
                let src = self.points[partner(i)];
                Keypoint2D { x: width - src.x, ..src }
            })
            .collect();
        Keypoints2D { points }
    }
}

/// Mean bounding-box diagonal of two people, the distance normalizer.
pub fn pair_scale(a: &Keypoints2D, b: &Keypoints2D, conf_min: f64) -> Option<f64> {
    let da = a.bbox(conf_min)?.diagonal();
    let db = b.bbox(conf_min)?.diagonal();
    let s = 0.5 * (da + db);
    (s > 0.0).then_some(s)
}
