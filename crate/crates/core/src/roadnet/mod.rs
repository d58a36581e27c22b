//! Lane-centerline road networks.
//!
//! A network is a set of directed centerline segments (straights and
//! circular arcs) chained by successor adjacency. Nodes are equivalence
//! classes of segment endpoints; nodes where three or more segment ends meet
//! are intersections and carry maneuver labels derived purely from the
//! geometry of their outgoing branches.

mod fmt;
mod gen;
mod route;

pub use fmt::{load_network, parse_network, save_network, serialize_network};
pub use gen::{generate_network, LayoutSpec};
pub use route::{plan_route, RoutePlan, RouteTracker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, wrap_angle, Pose};

pub type SegmentId = usize;
pub type NodeId = usize;

/// Continuity tolerance between a segment end and its successors' starts.
pub const CONTINUITY_EPS_M: f64 = 1e-6;
pub const CONTINUITY_EPS_RAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegKind {
    Straight,
    ArcLeft,
    ArcRight,
}

/// A driving maneuver through an intersection branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Maneuver {
    Left,
    Straight,
    Right,
}

impl Maneuver {
    pub fn letter(&self) -> char {
        match self {
            Maneuver::Left => 'L',
            Maneuver::Straight => 'S',
            Maneuver::Right => 'R',
        }
    }
}

/// Classify a branch by its total heading change: Left in [45deg, 135deg],
/// Right in [-135deg, -45deg], Straight in (-45deg, 45deg).
pub fn classify_turn(heading_change: f64) -> Option<Maneuver> {
    let deg = heading_change.to_degrees();
    if (45.0..=135.0).contains(&deg) {
        Some(Maneuver::Left)
    } else if (-135.0..=-45.0).contains(&deg) {
        Some(Maneuver::Right)
    } else if deg.abs() < 45.0 {
        Some(Maneuver::Straight)
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub kind: SegKind,
    pub start: Pose,
    /// Arc length, meters, > 0.
    pub length: f64,
    /// Signed curvature, 1/m. Zero for straights; positive turns left.
    pub curvature: f64,
    pub lane_half_width: f64,
}

impl RoadSegment {
    /// Centerline pose at arc length `s` in [0, length].
    pub fn pose_at(&self, s: f64) -> Pose {
        let th0 = self.start.heading;
        if self.curvature == 0.0 {
            Pose { x: self.start.x + s * th0.cos(), y: self.start.y + s * th0.sin(), heading: th0 }
        } else {
            let k = self.curvature;
            let th = th0 + k * s;
            Pose {
                x: self.start.x + (th.sin() - th0.sin()) / k,
                y: self.start.y - (th.cos() - th0.cos()) / k,
                heading: wrap_angle(th),
            }
        }
    }

    pub fn end_pose(&self) -> Pose {
        self.pose_at(self.length)
    }

    /// Total heading change over the segment.
    pub fn heading_change(&self) -> f64 {
        self.curvature * self.length
    }

    /// Nearest centerline point to `(px, py)`: returns (s, signed lateral
    /// offset with left positive, Euclidean distance).
    pub fn nearest(&self, px: f64, py: f64) -> (f64, f64, f64) {
        if self.curvature == 0.0 {
            let (fx, fy) = self.start.forward();
            let dx = px - self.start.x;
            let dy = py - self.start.y;
            let s = (dx * fx + dy * fy).clamp(0.0, self.length);
            let p = self.pose_at(s);
            let (lx, ly) = p.left();
            let d = (px - p.x) * lx + (py - p.y) * ly;
            let dist = ((px - p.x).powi(2) + (py - p.y).powi(2)).sqrt();
            (s, d, dist)
        } else {
            let k = self.curvature;
            let _r = 1.0 / k.abs();
            // Center sits 1/k along the start pose's left axis.
            let (lx, ly) = self.start.left();
            let cx = self.start.x + lx / k;
            let cy = self.start.y + ly / k;
            // Position angle of p(s) around the center is heading(s) -/+ pi/2.
            let psi = (py - cy).atan2(px - cx);
            let theta_q = if k > 0.0 {
                psi + std::f64::consts::FRAC_PI_2
            } else {
                psi - std::f64::consts::FRAC_PI_2
            };
            // Arc spans a bounded heading interval; |k * length| <= pi.
            let ds = angle_diff(theta_q, self.start.heading) / k;
            let s = if ds >= 0.0 && ds <= self.length {
                ds
            } else {
                // Clamp to the closer endpoint.
                let d0 = crate::geom::dist2(px, py, self.start.x, self.start.y);
                let pe = self.end_pose();
                let d1 = crate::geom::dist2(px, py, pe.x, pe.y);
                if d0 <= d1 {
                    0.0
                } else {
                    self.length
                }
            };
            let p = self.pose_at(s);
            let (plx, ply) = p.left();
            let d = (px - p.x) * plx + (py - p.y) * ply;
            let dist = ((px - p.x).powi(2) + (py - p.y).powi(2)).sqrt();
            (s, d, dist)
        }
    }
}

/// Location on the network: arc length along a segment plus signed lateral
/// offset (left positive) and heading error relative to the tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub segment: SegmentId,
    pub s: f64,
    pub d: f64,
    pub heading_err: f64,
}

/// A node with the common endpoint pose and its incident segment ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetNode {
    pub pose: Pose,
    pub incoming: Vec<SegmentId>,
    pub outgoing: Vec<SegmentId>,
}

impl NetNode {
    pub fn degree(&self) -> usize {
        self.incoming.len() + self.outgoing.len()
    }
}

/// An intersection: a node where at least three segment ends meet, annotated
/// with the maneuver label of each outgoing branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Intersection {
    pub node: NodeId,
    /// (outgoing segment, label from its own heading change).
    pub branches: Vec<(SegmentId, Maneuver)>,
}

impl Intersection {
    pub fn maneuvers(&self) -> Vec<Maneuver> {
        let mut ms: Vec<Maneuver> = self.branches.iter().map(|(_, m)| *m).collect();
        ms.dedup();
        ms
    }

    pub fn branch(&self, m: Maneuver) -> Option<SegmentId> {
        self.branches.iter().find(|(_, bm)| *bm == m).map(|(s, _)| *s)
    }
}

#[derive(Debug, Error)]
pub enum RoadNetError {
    #[error("segment {id}: {reason}")]
    InvalidSegment { id: SegmentId, reason: String },
    #[error("continuity violated between segment {from} and successor {to}: {detail}")]
    Discontinuity { from: SegmentId, to: SegmentId, detail: String },
    #[error("segment {0} has no successor (network must be closed)")]
    DeadEnd(SegmentId),
    #[error("network is not strongly connected: segment {0} unreachable")]
    Disconnected(SegmentId),
    #[error("branch at node {node} from segment {branch} has unclassifiable turn angle {angle_deg:.1} deg")]
    UnclassifiableBranch { node: NodeId, branch: SegmentId, angle_deg: f64 },
    #[error("lane clearance violated between segments {a} and {b} (distance {dist:.2} m)")]
    LaneOverlap { a: SegmentId, b: SegmentId, dist: f64 },
    #[error("generation failed for seed {seed} after {attempts} attempts: {reason}")]
    GenerationFailed { seed: u64, attempts: usize, reason: String },
    #[error("pose ({x:.1}, {y:.1}) outside network bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("no branch choice for intersection at node {0}")]
    MissingBranchChoice(NodeId),
    #[error("destination node {0} unreachable from start")]
    Unreachable(NodeId),
    #[error("route has no maneuver-consistent placement: {0}")]
    NoPlacement(String),
}

/// Nearest-centerline projection outcome.
#[derive(Debug, Clone, Copy)]
pub enum Projection {
    OnRoad(FrenetCoord),
    /// Nearest centerline farther than the off-road limit; carries the
    /// nearest coordinate anyway for diagnostics.
    OffRoad(FrenetCoord, f64),
}

impl Projection {
    pub fn frenet(&self) -> &FrenetCoord {
        match self {
            Projection::OnRoad(f) => f,
            Projection::OffRoad(f, _) => f,
        }
    }

    pub fn is_off_road(&self) -> bool {
        matches!(self, Projection::OffRoad(..))
    }
}

/// Immutable after construction; all queries are pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    successors: Vec<Vec<SegmentId>>,
    predecessors: Vec<Vec<SegmentId>>,
    nodes: Vec<NetNode>,
    /// Node id at the end of each segment / at the start of each segment.
    end_node: Vec<NodeId>,
    start_node: Vec<NodeId>,
    intersections: Vec<Intersection>,
    bounds: (f64, f64, f64, f64),
}

impl RoadNetwork {
    /// Build and fully validate a network from segments and adjacency.
    pub fn new(segments: Vec<RoadSegment>, successors: Vec<Vec<SegmentId>>) -> Result<Self, RoadNetError> {
        let n = segments.len();
        assert_eq!(successors.len(), n, "adjacency list length mismatch");

        for seg in &segments {
            if !(seg.length > 0.0) {
                return Err(RoadNetError::InvalidSegment { id: seg.id, reason: "length must be > 0".into() });
            }
            if !(seg.lane_half_width > 0.0) {
                return Err(RoadNetError::InvalidSegment { id: seg.id, reason: "half width must be > 0".into() });
            }
            let kind_ok = match seg.kind {
                SegKind::Straight => seg.curvature == 0.0,
                SegKind::ArcLeft => seg.curvature > 0.0,
                SegKind::ArcRight => seg.curvature < 0.0,
            };
            if !kind_ok {
                return Err(RoadNetError::InvalidSegment {
                    id: seg.id,
                    reason: format!("kind {:?} inconsistent with curvature {}", seg.kind, seg.curvature),
                });
            }
            if seg.heading_change().abs() > std::f64::consts::PI + 1e-9 {
                return Err(RoadNetError::InvalidSegment {
                    id: seg.id,
                    reason: "arc sweeps more than pi; split it".into(),
                });
            }
        }

        // Closure and continuity.
        for (i, succ) in successors.iter().enumerate() {
            if succ.is_empty() {
                return Err(RoadNetError::DeadEnd(i));
            }
            let end = segments[i].end_pose();
            for &j in succ {
                let st = segments[j].start;
                let dp = ((end.x - st.x).powi(2) + (end.y - st.y).powi(2)).sqrt();
                let dh = angle_diff(end.heading, st.heading).abs();
                if dp > CONTINUITY_EPS_M || dh > CONTINUITY_EPS_RAD {
                    return Err(RoadNetError::Discontinuity {
                        from: i,
                        to: j,
                        detail: format!("position gap {dp:.2e} m, heading gap {dh:.2e} rad"),
                    });
                }
            }
        }

        // Strong connectivity: forward BFS and backward BFS from segment 0.
        let predecessors = {
            let mut preds = vec![Vec::new(); n];
            for (i, succ) in successors.iter().enumerate() {
                for &j in succ {
                    preds[j].push(i);
                }
            }
            preds
        };
        for adj in [&successors, &predecessors] {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for &j in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            if let Some(un) = seen.iter().position(|s| !s) {
                return Err(RoadNetError::Disconnected(un));
            }
        }

        // Nodes: union endpoint classes through the adjacency relation.
        // Index ends as 2*i (start of i) and 2*i+1 (end of i).
        let mut uf = UnionFind::new(2 * n);
        for (i, succ) in successors.iter().enumerate() {
            for &j in succ {
                uf.union(2 * i + 1, 2 * j);
            }
        }
        let mut node_of_root = std::collections::HashMap::new();
        let mut nodes: Vec<NetNode> = Vec::new();
        let mut start_node = vec![0usize; n];
        let mut end_node = vec![0usize; n];
        for i in 0..n {
            for (endpoint, pose) in [(2 * i, segments[i].start), (2 * i + 1, segments[i].end_pose())] {
                let root = uf.find(endpoint);
                let nid = *node_of_root.entry(root).or_insert_with(|| {
                    nodes.push(NetNode { pose, incoming: Vec::new(), outgoing: Vec::new() });
                    nodes.len() - 1
                });
                if endpoint % 2 == 0 {
                    start_node[i] = nid;
                    nodes[nid].outgoing.push(i);
                } else {
                    end_node[i] = nid;
                    nodes[nid].incoming.push(i);
                }
            }
        }
        for node in &mut nodes {
            node.incoming.sort_unstable();
            node.outgoing.sort_unstable();
        }

        // Intersections and branch labels.
        let mut intersections = Vec::new();
        for (nid, node) in nodes.iter().enumerate() {
            if node.degree() < 3 {
                continue;
            }
            let mut branches = Vec::new();
            for &out in &node.outgoing {
                let change = segments[out].heading_change();
                match classify_turn(change) {
                    Some(m) => branches.push((out, m)),
                    None => {
                        return Err(RoadNetError::UnclassifiableBranch {
                            node: nid,
                            branch: out,
                            angle_deg: change.to_degrees(),
                        })
                    }
                }
            }
            intersections.push(Intersection { node: nid, branches });
        }

        let mut bounds = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for seg in &segments {
            let steps = (seg.length / 0.5).ceil() as usize;
            for k in 0..=steps {
                let p = seg.pose_at(seg.length * k as f64 / steps as f64);
                bounds.0 = bounds.0.min(p.x);
                bounds.1 = bounds.1.min(p.y);
                bounds.2 = bounds.2.max(p.x);
                bounds.3 = bounds.3.max(p.y);
            }
        }

        Ok(Self { segments, successors, predecessors, nodes, end_node, start_node, intersections, bounds })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &RoadSegment {
        &self.segments[id]
    }

    pub fn successors(&self, id: SegmentId) -> &[SegmentId] {
        &self.successors[id]
    }

    pub fn predecessors(&self, id: SegmentId) -> &[SegmentId] {
        &self.predecessors[id]
    }

    pub fn nodes(&self) -> &[NetNode] {
        &self.nodes
    }

    pub fn node_at_end(&self, id: SegmentId) -> NodeId {
        self.end_node[id]
    }

    pub fn node_at_start(&self, id: SegmentId) -> NodeId {
        self.start_node[id]
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn intersection_at(&self, node: NodeId) -> Option<&Intersection> {
        self.intersections.iter().find(|ix| ix.node == node)
    }

    /// Axis-aligned bounds of all centerlines (min_x, min_y, max_x, max_y).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.bounds
    }

    pub fn max_half_width(&self) -> f64 {
        self.segments.iter().map(|s| s.lane_half_width).fold(0.0, f64::max)
    }

    /// World pose for a Frenet coordinate.
    pub fn to_world(&self, f: &FrenetCoord) -> Pose {
        let p = self.segments[f.segment].pose_at(f.s);
        let (lx, ly) = p.left();
        Pose { x: p.x + f.d * lx, y: p.y + f.d * ly, heading: wrap_angle(p.heading + f.heading_err) }
    }

    /// Project a pose onto the nearest centerline.
    ///
    /// Ambiguities (equidistant segments) are resolved by smallest heading
    /// error, then smallest segment id. A nearest distance beyond
    /// `off_road_limit` is signaled as `OffRoad`, not an error; a pose
    /// outside the network bounding box (+10 m) is a hard error.
    pub fn project(&self, pose: &Pose, off_road_limit: f64) -> Result<Projection, RoadNetError> {
        let (minx, miny, maxx, maxy) = self.bounds;
        if pose.x < minx - 10.0 || pose.x > maxx + 10.0 || pose.y < miny - 10.0 || pose.y > maxy + 10.0 {
            return Err(RoadNetError::OutOfBounds { x: pose.x, y: pose.y });
        }
        let mut best: Option<(f64, f64, FrenetCoord)> = None; // (dist, |herr|, frenet)
        for seg in &self.segments {
            let (s, d, dist) = seg.nearest(pose.x, pose.y);
            let herr = angle_diff(pose.heading, seg.pose_at(s).heading);
            let cand = FrenetCoord { segment: seg.id, s, d, heading_err: herr };
            let key = (dist, herr.abs());
            let better = match &best {
                None => true,
                Some((bd, bh, bf)) => {
                    if (dist - bd).abs() > 1e-9 {
                        dist < *bd
                    } else if (herr.abs() - bh).abs() > 1e-12 {
                        herr.abs() < *bh
                    } else {
                        cand.segment < bf.segment
                    }
                }
            };
            if better {
                best = Some((key.0, key.1, cand));
            }
        }
        let (dist, _, f) = best.expect("network has no segments");
        if dist > off_road_limit {
            Ok(Projection::OffRoad(f, dist))
        } else {
            Ok(Projection::OnRoad(f))
        }
    }

    /// Walk `distance` meters downstream from a centerline location.
    ///
    /// `branch_choices` are consumed in encounter order at nodes with more
    /// than one successor. Returns the world pose and the on-centerline
    /// Frenet coordinate at the destination.
    pub fn advance_along(
        &self,
        from: &FrenetCoord,
        distance: f64,
        branch_choices: &[Maneuver],
    ) -> Result<(Pose, FrenetCoord), RoadNetError> {
        assert!(distance >= 0.0, "advance_along: negative distance");
        let mut seg = from.segment;
        let mut s = from.s;
        let mut remaining = distance;
        let mut choices = branch_choices.iter();
        loop {
            let seg_ref = &self.segments[seg];
            if s + remaining <= seg_ref.length {
                let s2 = s + remaining;
                let pose = seg_ref.pose_at(s2);
                return Ok((pose, FrenetCoord { segment: seg, s: s2, d: 0.0, heading_err: 0.0 }));
            }
            remaining -= seg_ref.length - s;
            s = 0.0;
            let next = self.pick_successor(seg, &mut choices)?;
            seg = next;
        }
    }

    fn pick_successor<'a>(
        &self,
        seg: SegmentId,
        choices: &mut impl Iterator<Item = &'a Maneuver>,
    ) -> Result<SegmentId, RoadNetError> {
        let succ = &self.successors[seg];
        if succ.len() == 1 {
            return Ok(succ[0]);
        }
        let node = self.end_node[seg];
        let wanted = choices.next().ok_or(RoadNetError::MissingBranchChoice(node))?;
        let ix = self.intersection_at(node).ok_or(RoadNetError::MissingBranchChoice(node))?;
        ix.branch(*wanted).ok_or(RoadNetError::MissingBranchChoice(node))
    }

    /// Successor chosen by the standing rule: turn onto `maneuver` at the
    /// first node offering it, go straight elsewhere (smallest-|turn| branch
    /// if no straight exists). Returns (successor, consumed the maneuver).
    pub fn follow_branch(&self, seg: SegmentId, maneuver: Option<Maneuver>) -> (SegmentId, bool) {
        let succ = &self.successors[seg];
        if succ.len() == 1 {
            return (succ[0], false);
        }
        let node = self.end_node[seg];
        let ix = self.intersection_at(node).expect("multi-successor node must be an intersection");
        if let Some(m) = maneuver {
            if let Some(branch) = ix.branch(m) {
                return (branch, true);
            }
        }
        if let Some(branch) = ix.branch(Maneuver::Straight) {
            return (branch, false);
        }
        // No straight branch: smallest absolute turn, ties by id.
        let branch = ix
            .branches
            .iter()
            .map(|(sid, _)| (*sid, self.segments[*sid].heading_change().abs()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .map(|(sid, _)| sid)
            .expect("intersection has branches");
        (branch, false)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}
