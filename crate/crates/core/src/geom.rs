//! Small planar-geometry helpers shared across the simulator.

use serde::{Deserialize, Serialize};

/// A planar pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    /// Unit forward direction.
    pub fn forward(&self) -> (f64, f64) {
        (self.heading.cos(), self.heading.sin())
    }

    /// Unit left direction (90 degrees counter-clockwise from forward).
    pub fn left(&self) -> (f64, f64) {
        (-self.heading.sin(), self.heading.cos())
    }

    /// Express a world point in this pose's frame: x forward, y left.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let dx = px - self.x;
        let dy = py - self.y;
        let (fx, fy) = self.forward();
        let (lx, ly) = self.left();
        (dx * fx + dy * fy, dx * lx + dy * ly)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * std::f64::consts::PI);
    if r <= -std::f64::consts::PI {
        r += 2.0 * std::f64::consts::PI;
    } else if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

/// Shortest signed angular difference a - b, wrapped into (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

pub fn dist2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dx = ax - bx;
    let dy = ay - by;
    dx * dx + dy * dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.1) - 0.1).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn local_frame_axes() {
        let p = Pose::new(1.0, 2.0, PI / 2.0);
        // A point 3 m ahead (in +y world) is (3, 0) locally.
        let (fx, fy) = p.to_local(1.0, 5.0);
        assert!((fx - 3.0).abs() < 1e-12 && fy.abs() < 1e-12);
        // A point to the left (in -x world) is (0, +) locally.
        let (lx, ly) = p.to_local(0.0, 2.0);
        assert!(lx.abs() < 1e-12 && (ly - 1.0).abs() < 1e-12);
    }
}
