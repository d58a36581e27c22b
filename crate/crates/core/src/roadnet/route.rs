//! Route plans over the segment graph and route-relative tracking.

use serde::{Deserialize, Serialize};

use super::{FrenetCoord, Maneuver, NodeId, RoadNetError, RoadNetwork, SegmentId};
use crate::geom::{angle_diff, Pose};

/// An intersection crossing on a route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteManeuver {
    pub node: NodeId,
    pub maneuver: Maneuver,
    /// Route arc length at which the branch begins.
    pub entry_s: f64,
    /// Route arc length at which the branch segment ends.
    pub exit_s: f64,
}

/// An ordered chain of adjacent segments starting at a centerline point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutePlan {
    pub segments: Vec<SegmentId>,
    pub maneuvers: Vec<RouteManeuver>,
    pub start: FrenetCoord,
    pub total_length: f64,
    /// Route arc length at local s=0 of each route segment (base[0] <= 0).
    base: Vec<f64>,
}

/// Projection of a pose onto a route.
#[derive(Debug, Clone, Copy)]
pub struct RouteProj {
    /// Arc length along the route, 0 at the route start.
    pub progress: f64,
    /// Signed lateral offset, left positive.
    pub d: f64,
    pub heading_err: f64,
    pub dist: f64,
    /// Index into `segments`.
    pub index: usize,
}

impl RoutePlan {
    fn from_chain(net: &RoadNetwork, start: FrenetCoord, segments: Vec<SegmentId>) -> Self {
        assert!(!segments.is_empty());
        let mut base = Vec::with_capacity(segments.len());
        base.push(-start.s);
        for (i, &seg) in segments.iter().enumerate().skip(1) {
            let prev = segments[i - 1];
            debug_assert!(net.successors(prev).contains(&seg), "route segments not adjacent");
            base.push(base[i - 1] + net.segment(prev).length);
        }
        let total_length = base[segments.len() - 1] + net.segment(segments[segments.len() - 1]).length;
        let mut maneuvers = Vec::new();
        for i in 1..segments.len() {
            let node = net.node_at_end(segments[i - 1]);
            if let Some(ix) = net.intersection_at(node) {
                let m = ix
                    .branches
                    .iter()
                    .find(|(sid, _)| *sid == segments[i])
                    .map(|(_, m)| *m)
                    .expect("route branch must be labeled at intersection");
                maneuvers.push(RouteManeuver {
                    node,
                    maneuver: m,
                    entry_s: base[i],
                    exit_s: base[i] + net.segment(segments[i]).length,
                });
            }
        }
        Self { segments, maneuvers, start, total_length, base }
    }

    /// Walk downstream from `start`, turning onto `turn` at the first node
    /// offering it and continuing straight elsewhere, until the route covers
    /// `min_length` meters past the start.
    pub fn walk(
        net: &RoadNetwork,
        start: FrenetCoord,
        min_length: f64,
        turn: Option<Maneuver>,
    ) -> Result<Self, RoadNetError> {
        let start = FrenetCoord { d: 0.0, heading_err: 0.0, ..start };
        let mut segments = vec![start.segment];
        let mut covered = net.segment(start.segment).length - start.s;
        let mut pending_turn = turn;
        let mut hops = 0usize;
        while covered < min_length {
            let cur = *segments.last().unwrap();
            let (next, consumed) = net.follow_branch(cur, pending_turn);
            if consumed {
                pending_turn = None;
            }
            covered += net.segment(next).length;
            segments.push(next);
            hops += 1;
            if hops > 10_000 {
                return Err(RoadNetError::NoPlacement("route walk did not terminate".into()));
            }
        }
        if pending_turn.is_some() {
            return Err(RoadNetError::NoPlacement(format!(
                "no intersection offering {:?} within {min_length} m",
                turn.unwrap()
            )));
        }
        Ok(Self::from_chain(net, start, segments))
    }

    /// Centerline pose and Frenet coordinate at a route arc length.
    pub fn at(&self, net: &RoadNetwork, progress: f64) -> (Pose, FrenetCoord) {
        let progress = progress.clamp(0.0, self.total_length);
        let mut idx = self.segments.len() - 1;
        for i in 0..self.segments.len() {
            let end = self.base[i] + net.segment(self.segments[i]).length;
            if progress <= end + 1e-12 {
                idx = i;
                break;
            }
        }
        let s_local = (progress - self.base[idx]).clamp(0.0, net.segment(self.segments[idx]).length);
        let pose = net.segment(self.segments[idx]).pose_at(s_local);
        (pose, FrenetCoord { segment: self.segments[idx], s: s_local, d: 0.0, heading_err: 0.0 })
    }

    /// Project a pose onto the route, restricted to a window of route arc
    /// around `hint` so nearby revisited geometry cannot capture the match.
    pub fn project_near(&self, net: &RoadNetwork, pose: &Pose, hint: f64, window: f64) -> RouteProj {
        let lo = hint - window;
        let hi = hint + window;
        let mut best: Option<RouteProj> = None;
        for (i, &sid) in self.segments.iter().enumerate() {
            let seg = net.segment(sid);
            let seg_lo = self.base[i];
            let seg_hi = self.base[i] + seg.length;
            if seg_hi < lo || seg_lo > hi {
                continue;
            }
            let (s, d, dist) = seg.nearest(pose.x, pose.y);
            let progress = self.base[i] + s;
            if progress < lo || progress > hi {
                continue;
            }
            let herr = angle_diff(pose.heading, seg.pose_at(s).heading);
            let cand = RouteProj { progress, d, heading_err: herr, dist, index: i };
            let better = match &best {
                None => true,
                Some(b) => {
                    if (dist - b.dist).abs() > 1e-9 {
                        dist < b.dist
                    } else {
                        herr.abs() < b.heading_err.abs()
                    }
                }
            };
            if better {
                best = Some(cand);
            }
        }
        best.unwrap_or_else(|| {
            // Window missed every segment (teleport-grade divergence); fall
            // back to an unrestricted search over the route.
            let mut best: Option<RouteProj> = None;
            for (i, &sid) in self.segments.iter().enumerate() {
                let seg = net.segment(sid);
                let (s, d, dist) = seg.nearest(pose.x, pose.y);
                let herr = angle_diff(pose.heading, seg.pose_at(s).heading);
                let cand = RouteProj { progress: self.base[i] + s, d, heading_err: herr, dist, index: i };
                if best.as_ref().map_or(true, |b| dist < b.dist) {
                    best = Some(cand);
                }
            }
            best.expect("route is non-empty")
        })
    }

    /// Maneuver labels only, in crossing order.
    pub fn maneuver_list(&self) -> Vec<Maneuver> {
        self.maneuvers.iter().map(|m| m.maneuver).collect()
    }
}

/// Incremental route-progress tracking for a moving pose.
#[derive(Debug, Clone)]
pub struct RouteTracker {
    pub route: RoutePlan,
    pub progress: f64,
}

impl RouteTracker {
    pub fn new(route: RoutePlan) -> Self {
        Self { route, progress: 0.0 }
    }

    /// Update with the latest pose; progress is the windowed projection.
    pub fn update(&mut self, net: &RoadNetwork, pose: &Pose) -> RouteProj {
        let proj = self.route.project_near(net, pose, self.progress, 30.0);
        self.progress = proj.progress;
        proj
    }
}

/// Shortest route by total arc length from a centerline start to a node.
///
/// Ties are broken toward the lexicographically smallest segment-id sequence
/// (in particular, the smallest first segment id).
pub fn plan_route(net: &RoadNetwork, start: &FrenetCoord, dest: NodeId) -> Result<RoutePlan, RoadNetError> {
    assert!(dest < net.nodes().len(), "unknown destination node {dest}");
    let n = net.segments().len();
    // dist[j]: best route length from start to the END of segment j.
    let mut dist = vec![f64::INFINITY; n];
    let mut path: Vec<Vec<SegmentId>> = vec![Vec::new(); n];
    let s0 = start.segment;
    dist[s0] = net.segment(s0).length - start.s;
    path[s0] = vec![s0];

    // Small graphs: O(n^2) Dijkstra with lexicographic tie-breaks.
    let mut done = vec![false; n];
    for _ in 0..n {
        let mut cur: Option<usize> = None;
        for j in 0..n {
            if done[j] || dist[j].is_infinite() {
                continue;
            }
            let better = match cur {
                None => true,
                Some(c) => {
                    dist[j] + 1e-9 < dist[c] || ((dist[j] - dist[c]).abs() <= 1e-9_f64 && path[j] < path[c])
                }
            };
            if better {
                cur = Some(j);
            }
        }
        let Some(cur) = cur else { break };
        done[cur] = true;
        for &nx in net.successors(cur) {
            let nd = dist[cur] + net.segment(nx).length;
            let mut npath = path[cur].clone();
            npath.push(nx);
            let better = nd + 1e-9 < dist[nx] || ((nd - dist[nx]).abs() <= 1e-9 && npath < path[nx]);
            if better && !done[nx] {
                dist[nx] = nd;
                path[nx] = npath;
            }
        }
    }

    let mut best: Option<SegmentId> = None;
    for j in 0..n {
        if net.node_at_end(j) != dest || dist[j].is_infinite() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => dist[j] + 1e-9 < dist[b] || ((dist[j] - dist[b]).abs() <= 1e-9 && path[j] < path[b]),
        };
        if better {
            best = Some(j);
        }
    }
    let last = best.ok_or(RoadNetError::Unreachable(dest))?;
    let start = FrenetCoord { segment: s0, s: start.s, d: 0.0, heading_err: 0.0 };
    Ok(RoutePlan::from_chain(net, start, path[last].clone()))
}

#[cfg(test)]
mod tests {
    use super::super::tests::circle_net;
    use super::*;

    #[test]
    fn single_segment_plan_has_empty_maneuvers() {
        let net = circle_net(20.0);
        let start = FrenetCoord { segment: 0, s: 5.0, d: 0.0, heading_err: 0.0 };
        let dest = net.node_at_end(0);
        let plan = plan_route(&net, &start, dest).unwrap();
        assert_eq!(plan.segments, vec![0]);
        assert!(plan.maneuvers.is_empty());
        let quarter = std::f64::consts::FRAC_PI_2 * 20.0;
        assert!((plan.total_length - (quarter - 5.0)).abs() < 1e-9);
    }

    #[test]
    fn route_at_walks_across_segments() {
        let net = circle_net(20.0);
        let start = FrenetCoord { segment: 0, s: 10.0, d: 0.0, heading_err: 0.0 };
        let route = RoutePlan::walk(&net, start, 100.0, None).unwrap();
        let quarter = std::f64::consts::FRAC_PI_2 * 20.0;
        let (_, f) = route.at(&net, quarter);
        assert_eq!(f.segment, 1);
        assert!((f.s - 10.0).abs() < 1e-9);
        // Additivity against advance_along.
        let (p1, _) = net.advance_along(&start, 47.0, &[]).unwrap();
        let (p2, _) = route.at(&net, 47.0);
        assert!((p1.x - p2.x).abs() < 1e-9 && (p1.y - p2.y).abs() < 1e-9);
    }

    #[test]
    fn tracker_follows_forward_motion() {
        let net = circle_net(20.0);
        let start = FrenetCoord { segment: 0, s: 0.0, d: 0.0, heading_err: 0.0 };
        let route = RoutePlan::walk(&net, start, 120.0, None).unwrap();
        let mut tracker = RouteTracker::new(route);
        for k in 0..60 {
            let (pose, _) = tracker.route.at(&net, k as f64);
            let proj = tracker.update(&net, &pose);
            assert!((proj.progress - k as f64).abs() < 1e-6, "progress {} at k {}", proj.progress, k);
            assert!(proj.d.abs() < 1e-9);
        }
    }
}
