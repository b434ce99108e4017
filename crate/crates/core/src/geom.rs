//! Planar geometry: poses, static shapes, ray casting and distances.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// World point into this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// World vector (no translation) into this pose's frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = (a + std::f64::consts::PI) % two_pi;
    if a < 0.0 {
        a += two_pi;
    }
    a - std::f64::consts::PI
}

pub fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Static obstacle: an axis-aligned rectangle or a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { min: [f64; 2], max: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
}

impl Shape {
    /// Signed distance from `p` to the boundary; negative inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Shape::Circle { center, radius } => dist(p, center) - radius,
            Shape::Rect { min, max } => {
                let cx = 0.5 * (min[0] + max[0]);
                let cy = 0.5 * (min[1] + max[1]);
                let hx = 0.5 * (max[0] - min[0]);
                let hy = 0.5 * (max[1] - min[1]);
                let dx = (p[0] - cx).abs() - hx;
                let dy = (p[1] - cy).abs() - hy;
                let outside = dx.max(0.0).hypot(dy.max(0.0));
                let inside = dx.max(dy).min(0.0);
                outside + inside
            }
        }
    }

    /// Closest boundary point to `p` (for `p` outside the shape).
    pub fn closest_point(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            Shape::Circle { center, radius } => {
                let d = dist(p, center);
                if d < 1e-12 {
                    return [center[0] + radius, center[1]];
                }
                [
                    center[0] + (p[0] - center[0]) * radius / d,
                    center[1] + (p[1] - center[1]) * radius / d,
                ]
            }
            Shape::Rect { min, max } => [p[0].clamp(min[0], max[0]), p[1].clamp(min[1], max[1])],
        }
    }

    /// Distance along the ray `origin + s·dir` (unit `dir`, `s ≥ 0`) to the
    /// first boundary crossing, if any. An origin inside the shape hits at 0.
    pub fn ray_hit(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        match *self {
            Shape::Circle { center, radius } => {
                let ox = origin[0] - center[0];
                let oy = origin[1] - center[1];
                let b = ox * dir[0] + oy * dir[1];
                let c = ox * ox + oy * oy - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = -b - disc.sqrt();
                (s >= 0.0).then_some(s)
            }
            Shape::Rect { min, max } => {
                // slab method
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..2 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                    } else {
                        let inv = 1.0 / dir[a];
                        let mut ta = (min[a] - origin[a]) * inv;
                        let mut tb = (max[a] - origin[a]) * inv;
                        if ta > tb {
                            std::mem::swap(&mut ta, &mut tb);
                        }
                        t0 = t0.max(ta);
                        t1 = t1.min(tb);
                    }
                }
                if t1 < t0 || t1 < 0.0 {
                    return None;
                }
                Some(t0.max(0.0))
            }
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.signed_distance(p) < 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_distance_cases() {
        let r = Shape::Rect {
            min: [0.0, 0.0],
            max: [2.0, 1.0],
        };
        assert!((r.signed_distance([3.0, 0.5]) - 1.0).abs() < 1e-12);
        assert!((r.signed_distance([3.0, 2.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.signed_distance([1.0, 0.5]) + 0.5).abs() < 1e-12);
        assert_eq!(r.closest_point([3.0, 2.0]), [2.0, 1.0]);
    }

    #[test]
    fn ray_hits() {
        let r = Shape::Rect {
            min: [2.0, -1.0],
            max: [3.0, 1.0],
        };
        assert!((r.ray_hit([0.0, 0.0], [1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(r.ray_hit([0.0, 0.0], [-1.0, 0.0]).is_none());
        assert!(r.ray_hit([0.0, 0.0], [0.0, 1.0]).is_none());
        let c = Shape::Circle {
            center: [0.0, 5.0],
            radius: 1.0,
        };
        assert!((c.ray_hit([0.0, 0.0], [0.0, 1.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!(c.ray_hit([0.0, 0.0], [1.0, 0.0]).is_none());
    }

    #[test]
    fn pose_round_trip() {
        let pose = Pose2::new(1.0, -2.0, 0.7);
        let p = [3.5, 0.25];
        let back = pose.to_world(pose.to_local(p));
        assert!(dist(p, back) < 1e-12);
        assert!(wrap_angle(3.0 * std::f64::consts::PI).abs() - std::f64::consts::PI < 1e-12);
    }
}
