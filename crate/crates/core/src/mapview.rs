//! Ego-centered top-down navigation view rasterizer.
//!
//! The view is sampled per pixel against exact segment geometry (no
//! tessellation): a pixel is road if its world point lies within a lane half
//! width of some centerline. Output is deterministic byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::geom::Pose;
use crate::numerics::Array;
use crate::roadnet::RoadNetwork;

pub const ROAD_COLOR: [u8; 3] = [128, 128, 128];
pub const BACKGROUND_COLOR: [u8; 3] = [0, 0, 0];
pub const CENTERLINE_COLOR: [u8; 3] = [255, 255, 255];
pub const EGO_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    pub draw_centerlines: bool,
    /// The ego marker can be suppressed for diagnostics.
    pub draw_ego: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { width: 256, height: 256, meters_per_pixel: 0.25, draw_centerlines: true, draw_ego: true }
    }
}

impl ViewConfig {
    pub fn desk() -> Self {
        Self { width: 64, height: 64, meters_per_pixel: 0.5, ..Default::default() }
    }

    /// Ego anchor pixel: (width/2, 0.7*height), ego heading pointing up.
    pub fn anchor(&self) -> (usize, usize) {
        (self.width / 2, (0.7 * self.height as f64) as usize)
    }
}

/// Rasterized RGB view; row-major, 3 bytes per pixel, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct NavView {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl NavView {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Portable pixmap (binary P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Render the network around an ego pose, ego-aligned (heading up).
pub fn render(net: &RoadNetwork, ego: &Pose, cfg: &ViewConfig) -> NavView {
    assert!(ego.x.is_finite() && ego.y.is_finite() && ego.heading.is_finite(), "non-finite ego pose");
    let (aw, ah) = cfg.anchor();
    // Anchor pixel center in image coordinates.
    let ax = aw as f64 + 0.5;
    let ay = ah as f64 + 0.5;
    let mpp = cfg.meters_per_pixel;
    let (fx, fy) = ego.forward();
    let (lx, ly) = ego.left();

    // View radius for segment pruning.
    let half_diag = mpp * ((cfg.width * cfg.width + cfg.height * cfg.height) as f64).sqrt();
    let max_hw = net.max_half_width();
    let visible: Vec<&crate::roadnet::RoadSegment> = net
        .segments()
        .iter()
        .filter(|seg| {
            // Conservative: bounding circle of the segment vs view circle.
            let mid = seg.pose_at(seg.length * 0.5);
            let r_seg = seg.length * 0.5 + max_hw + 1.0;
            let d = ((mid.x - ego.x).powi(2) + (mid.y - ego.y).powi(2)).sqrt();
            d <= half_diag + r_seg
        })
        .collect();

    let mut pixels = vec![0u8; cfg.width * cfg.height * 3];
    let line_half = 0.5 * mpp;
    for py in 0..cfg.height {
        for px in 0..cfg.width {
            // Image right = ego right (-left), image up = ego forward.
            let ix = (px as f64 + 0.5 - ax) * mpp;
            let iy = (ay - (py as f64 + 0.5)) * mpp;
            let wx = ego.x + fx * iy - lx * ix;
            let wy = ego.y + fy * iy - ly * ix;
            let mut best = f64::MAX;
            let mut road = false;
            let mut line = false;
            for seg in &visible {
                let (_, _, dist) = seg.nearest(wx, wy);
                if dist <= seg.lane_half_width {
                    road = true;
                }
                if dist < best {
                    best = dist;
                }
            }
            if road && cfg.draw_centerlines && best <= line_half {
                line = true;
            }
            let color = if line {
                CENTERLINE_COLOR
            } else if road {
                ROAD_COLOR
            } else {
                BACKGROUND_COLOR
            };
            let i = (py * cfg.width + px) * 3;
            pixels[i..i + 3].copy_from_slice(&color);
        }
    }

    if cfg.draw_ego {
        // 3x5 px marker centered on the anchor pixel, long side forward.
        for dy in -2i64..=2 {
            for dx in -1i64..=1 {
                let x = aw as i64 + dx;
                let y = ah as i64 + dy;
                if x >= 0 && (x as usize) < cfg.width && y >= 0 && (y as usize) < cfg.height {
                    let i = (y as usize * cfg.width + x as usize) * 3;
                    pixels[i..i + 3].copy_from_slice(&EGO_COLOR);
                }
            }
        }
    }

    NavView { width: cfg.width, height: cfg.height, pixels }
}

/// Byte view to a float observation in [0,1], shape (3, height, width).
pub fn to_float(view: &NavView) -> Array {
    let (w, h) = (view.width, view.height);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = view.pixels[i + c] as f32 / 255.0;
            }
        }
    }
    Array::from_vec(&[3, h, w], data)
}

/// Float frame (3,h,w) in [0,1] back to bytes for storage.
pub fn quantize(frame: &Array) -> Vec<u8> {
    let s = frame.shape();
    assert_eq!(s.len(), 3);
    let (h, w) = (s[1], s[2]);
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = frame.data()[c * h * w + y * w + x];
                out[(y * w + x) * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{generate_network, LayoutSpec};

    fn net() -> RoadNetwork {
        generate_network(&LayoutSpec {
            seed: 2,
            n_intersections: 1,
            segment_length_range: (30.0, 60.0),
            turn_radius_range: (8.0, 14.0),
            lane_half_width: 2.0,
            min_approach: 45.0,
        })
        .unwrap()
    }

    fn cfg() -> ViewConfig {
        ViewConfig::desk()
    }

    /// Find an ego pose in the middle of a long straight, aligned.
    fn straight_pose(net: &RoadNetwork) -> Pose {
        let seg = net
            .segments()
            .iter()
            .filter(|s| s.kind == crate::roadnet::SegKind::Straight)
            .max_by(|a, b| a.length.partial_cmp(&b.length).unwrap())
            .unwrap();
        seg.pose_at(seg.length / 2.0)
    }

    #[test]
    fn determinism_byte_exact() {
        let net = net();
        let ego = straight_pose(&net);
        let a = render(&net, &ego, &cfg());
        let b = render(&net, &ego, &cfg());
        assert_eq!(a.pixels, b.pixels);
    }

    /// Stadium net whose bottom edge has exact heading 0 so the symmetry is
    /// bit-exact; the return path sits far outside the viewport.
    fn exact_straight_net() -> (RoadNetwork, Pose) {
        use crate::roadnet::{RoadSegment, SegKind};
        let segs = vec![
            RoadSegment {
                id: 0,
                kind: SegKind::Straight,
                start: Pose::new(0.0, 0.0, 0.0),
                length: 200.0,
                curvature: 0.0,
                lane_half_width: 2.0,
            },
            RoadSegment {
                id: 1,
                kind: SegKind::ArcLeft,
                start: Pose::new(200.0, 0.0, 0.0),
                length: std::f64::consts::PI * 60.0,
                curvature: 1.0 / 60.0,
                lane_half_width: 2.0,
            },
            RoadSegment {
                id: 2,
                kind: SegKind::Straight,
                start: Pose::new(200.0, 120.0, std::f64::consts::PI),
                length: 200.0,
                curvature: 0.0,
                lane_half_width: 2.0,
            },
            RoadSegment {
                id: 3,
                kind: SegKind::ArcLeft,
                start: Pose::new(0.0, 120.0, std::f64::consts::PI),
                length: std::f64::consts::PI * 60.0,
                curvature: 1.0 / 60.0,
                lane_half_width: 2.0,
            },
        ];
        let net = RoadNetwork::new(segs, vec![vec![1], vec![2], vec![3], vec![0]]).unwrap();
        (net, Pose::new(100.0, 0.0, 0.0))
    }

    #[test]
    fn straight_road_is_mirror_symmetric() {
        let (net, ego) = exact_straight_net();
        let v = render(&net, &ego, &cfg());
        // Symmetric about the ego column (anchor pixel center): pixel x
        // mirrors to width-x. Column 0 has no partner and must be empty of
        // road (the band is far narrower than the view).
        for y in 0..v.height {
            for x in 1..v.width {
                let m = v.width - x;
                assert_eq!(v.pixel(x, y), v.pixel(m, y), "asymmetry at ({x},{y})");
            }
            assert_eq!(v.pixel(0, y), BACKGROUND_COLOR);
        }
    }

    #[test]
    fn translation_invariance_along_straight() {
        let (net, ego) = exact_straight_net();
        let a = render(&net, &ego, &cfg());
        let b = render(&net, &Pose::new(ego.x + 7.0, ego.y, ego.heading), &cfg());
        // Both poses are mid-straight with the curve far outside the view.
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn anchor_is_road_colored_when_on_road() {
        let net = net();
        let ego = straight_pose(&net);
        let mut c = cfg();
        c.draw_ego = false;
        let v = render(&net, &ego, &c);
        let (ax, ay) = c.anchor();
        let px = v.pixel(ax, ay);
        assert!(px == ROAD_COLOR || px == CENTERLINE_COLOR, "anchor {:?}", px);
        // And with the marker on, it is ego-colored.
        c.draw_ego = true;
        let v = render(&net, &ego, &c);
        assert_eq!(v.pixel(ax, ay), EGO_COLOR);
    }

    /// Rotate every segment start pose about a point (test-only).
    fn rotate_network(net: &RoadNetwork, cx: f64, cy: f64, alpha: f64) -> RoadNetwork {
        let segs = net
            .segments()
            .iter()
            .map(|s| {
                let (sa, ca) = (alpha.sin(), alpha.cos());
                let dx = s.start.x - cx;
                let dy = s.start.y - cy;
                crate::roadnet::RoadSegment {
                    start: Pose::new(cx + ca * dx - sa * dy, cy + sa * dx + ca * dy, s.start.heading + alpha),
                    ..s.clone()
                }
            })
            .collect();
        let succ = (0..net.segments().len()).map(|i| net.successors(i).to_vec()).collect();
        RoadNetwork::new(segs, succ).unwrap()
    }

    #[test]
    fn rotation_equivariance() {
        // Ego rotated by theta sees the same image as the network rotated by
        // -theta around the ego, up to rasterization at pixel boundaries.
        let net = net();
        let base = straight_pose(&net);
        let c = cfg();
        let theta = 0.7;
        let v1 = render(&net, &Pose::new(base.x, base.y, base.heading + theta), &c);
        let rot = rotate_network(&net, base.x, base.y, -theta);
        let v2 = render(&rot, &base, &c);
        let same = v1.pixels.iter().zip(&v2.pixels).filter(|(a, b)| a == b).count();
        let frac = same as f64 / v1.pixels.len() as f64;
        assert!(frac >= 0.99, "only {:.4} of pixels identical", frac);
        // And the rotated view is genuinely different content.
        let v0 = render(&net, &base, &c);
        assert_ne!(v0.pixels, v1.pixels);
    }

    #[test]
    fn to_float_scaling_and_round_trip() {
        let net = net();
        let v = render(&net, &straight_pose(&net), &cfg());
        let f = to_float(&v);
        assert_eq!(f.shape(), &[3, 64, 64]);
        for (b, x) in v.pixels.iter().zip(float_iter(&f, 64, 64)) {
            assert!((*b as f32 / 255.0 - x).abs() < 1e-7);
        }
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = quantize(&f);
        assert_eq!(bytes, v.pixels);
    }

    fn float_iter<'a>(f: &'a Array, h: usize, w: usize) -> impl Iterator<Item = f32> + 'a {
        // Interleave back to row-major RGB order.
        (0..h * w).flat_map(move |i| (0..3).map(move |c| f.data()[c * h * w + i]))
    }

    #[test]
    fn byte_examples() {
        let a = Array::from_vec(&[3, 1, 1], vec![0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(quantize(&a), vec![0, 128, 255]);
        assert!((128.0f32 / 255.0 - 0.50196).abs() < 1e-5);
    }
}
