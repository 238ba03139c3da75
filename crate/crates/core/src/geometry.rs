//! Axis-aligned 3D boxes and their 8-corner representation.

use serde::{Deserialize, Serialize};

/// Eight box corners, one `[x, y, z]` per row. Corner `i` takes the max
/// coordinate on axis `a` when bit `a` of `i` is set.
pub type Corners = [[f64; 3]; 8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_center(center: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        }
    }

    /// Tightest box around the corner set.
    pub fn from_corners(c: &Corners) -> Self {
        let mut min = c[0];
        let mut max = c[0];
        for p in &c[1..] {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self { min, max }
    }

    pub fn corners(&self) -> Corners {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for a in 0..3 {
                c[a] = if i >> a & 1 == 1 { self.max[a] } else { self.min[a] };
            }
        }
        out
    }

    pub fn center(&self) -> [f64; 3] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1]), 0.5 * (self.min[2] + self.max[2])]
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3).map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0)).product()
    }

    /// Intersection over union; two degenerate boxes give 0.
    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

pub fn iou3d(a: &Corners, b: &Corners) -> f64 {
    Aabb::from_corners(a).iou(&Aabb::from_corners(b))
}

pub fn corners_center(c: &Corners) -> [f64; 3] {
    Aabb::from_corners(c).center()
}

/// Row-major flattening used as the positional network input.
pub fn flatten_corners(c: &Corners) -> Vec<f64> {
    c.iter().flatten().copied().collect()
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
