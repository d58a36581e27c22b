//! Versioned plain-text network format.
//!
//! ```text
//! mapnet 1
//! seg <id> <straight|arc_left|arc_right> <x> <y> <heading> <length> <curvature> <half_width>
//! adj <id> <succ> [<succ> ...]
//! ix <node> <out_seg>:<L|S|R> [<out_seg>:<L|S|R> ...]
//! ```
//!
//! Floats are written in shortest round-trip form. The loader re-runs full
//! network validation and cross-checks the recorded intersection labels
//! against geometry, rejecting violations with line numbers.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Maneuver, RoadNetError, RoadNetwork, RoadSegment, SegKind};
use crate::geom::Pose;

#[derive(Debug, Error)]
pub enum NetFormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invariant violation: {source}")]
    Invalid { line: usize, source: RoadNetError },
}

fn perr<T>(line: usize, message: impl Into<String>) -> Result<T, NetFormatError> {
    Err(NetFormatError::Parse { line, message: message.into() })
}

pub fn serialize_network(net: &RoadNetwork) -> String {
    let mut out = String::new();
    out.push_str("mapnet 1\n");
    for seg in net.segments() {
        let kind = match seg.kind {
            SegKind::Straight => "straight",
            SegKind::ArcLeft => "arc_left",
            SegKind::ArcRight => "arc_right",
        };
        writeln!(
            out,
            "seg {} {} {:?} {:?} {:?} {:?} {:?} {:?}",
            seg.id, kind, seg.start.x, seg.start.y, seg.start.heading, seg.length, seg.curvature, seg.lane_half_width
        )
        .unwrap();
    }
    for (i, _) in net.segments().iter().enumerate() {
        let succ: Vec<String> = net.successors(i).iter().map(|s| s.to_string()).collect();
        writeln!(out, "adj {} {}", i, succ.join(" ")).unwrap();
    }
    for ix in net.intersections() {
        let branches: Vec<String> =
            ix.branches.iter().map(|(s, m)| format!("{}:{}", s, m.letter())).collect();
        writeln!(out, "ix {} {}", ix.node, branches.join(" ")).unwrap();
    }
    out
}

pub fn save_network(net: &RoadNetwork, path: &Path) -> Result<(), NetFormatError> {
    std::fs::write(path, serialize_network(net))?;
    Ok(())
}

pub fn parse_network(text: &str) -> Result<RoadNetwork, NetFormatError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(NetFormatError::Parse { line: 1, message: "empty file".into() })?;
    if header.trim() != "mapnet 1" {
        return perr(1, format!("expected header 'mapnet 1', got '{header}'"));
    }

    let mut segments: Vec<RoadSegment> = Vec::new();
    let mut adjacency: Vec<(usize, Vec<usize>, usize)> = Vec::new(); // (id, succs, line)
    let mut ix_claims: Vec<(usize, Vec<(usize, Maneuver)>, usize)> = Vec::new();

    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("seg") => {
                let fields: Vec<&str> = parts.collect();
                if fields.len() != 8 {
                    return perr(line_no, format!("seg needs 8 fields, got {}", fields.len()));
                }
                let id: usize = fields[0].parse().map_err(|_| NetFormatError::Parse {
                    line: line_no,
                    message: format!("bad segment id '{}'", fields[0]),
                })?;
                if id != segments.len() {
                    return perr(line_no, format!("segment ids must be dense and ordered; expected {}", segments.len()));
                }
                let kind = match fields[1] {
                    "straight" => SegKind::Straight,
                    "arc_left" => SegKind::ArcLeft,
                    "arc_right" => SegKind::ArcRight,
                    other => return perr(line_no, format!("unknown segment kind '{other}'")),
                };
                let nums: Result<Vec<f64>, _> = fields[2..8].iter().map(|f| f.parse::<f64>()).collect();
                let nums = nums.map_err(|_| NetFormatError::Parse {
                    line: line_no,
                    message: "bad float field".into(),
                })?;
                segments.push(RoadSegment {
                    id,
                    kind,
                    start: Pose { x: nums[0], y: nums[1], heading: nums[2] },
                    length: nums[3],
                    curvature: nums[4],
                    lane_half_width: nums[5],
                });
            }
            Some("adj") => {
                let fields: Vec<&str> = parts.collect();
                if fields.len() < 2 {
                    return perr(line_no, "adj needs an id and at least one successor");
                }
                let id: usize = fields[0]
                    .parse()
                    .map_err(|_| NetFormatError::Parse { line: line_no, message: "bad adj id".into() })?;
                let succ: Result<Vec<usize>, _> = fields[1..].iter().map(|f| f.parse::<usize>()).collect();
                let succ = succ
                    .map_err(|_| NetFormatError::Parse { line: line_no, message: "bad successor id".into() })?;
                adjacency.push((id, succ, line_no));
            }
            Some("ix") => {
                let fields: Vec<&str> = parts.collect();
                if fields.len() < 2 {
                    return perr(line_no, "ix needs a node id and branches");
                }
                let node: usize = fields[0]
                    .parse()
                    .map_err(|_| NetFormatError::Parse { line: line_no, message: "bad node id".into() })?;
                let mut branches = Vec::new();
                for f in &fields[1..] {
                    let (seg, label) = f
                        .split_once(':')
                        .ok_or(NetFormatError::Parse { line: line_no, message: format!("bad branch '{f}'") })?;
                    let seg: usize = seg
                        .parse()
                        .map_err(|_| NetFormatError::Parse { line: line_no, message: "bad branch segment".into() })?;
                    let m = match label {
                        "L" => Maneuver::Left,
                        "S" => Maneuver::Straight,
                        "R" => Maneuver::Right,
                        other => return perr(line_no, format!("bad maneuver '{other}'")),
                    };
                    branches.push((seg, m));
                }
                ix_claims.push((node, branches, line_no));
            }
            Some(other) => return perr(line_no, format!("unknown record '{other}'")),
            None => {}
        }
    }

    let n = segments.len();
    if n == 0 {
        return perr(1, "no segments");
    }
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut adj_line = vec![0usize; n];
    for (id, list, line) in adjacency {
        if id >= n {
            return perr(line, format!("adj id {id} out of range"));
        }
        for &s in &list {
            if s >= n {
                return perr(line, format!("successor {s} out of range"));
            }
        }
        succ[id] = list;
        adj_line[id] = line;
    }
    if let Some(missing) = succ.iter().position(|s| s.is_empty()) {
        return perr(1, format!("segment {missing} has no adj record (network must be closed)"));
    }

    let net = RoadNetwork::new(segments, succ).map_err(|e| {
        // Attribute structural failures to the adj line of the offending
        // segment when one is named, else to the header.
        let line = match &e {
            RoadNetError::Discontinuity { from, .. } => adj_line[*from],
            RoadNetError::DeadEnd(id) | RoadNetError::Disconnected(id) => adj_line.get(*id).copied().unwrap_or(1),
            RoadNetError::InvalidSegment { id, .. } => id + 2, // header + 1-based seg lines
            _ => 1,
        };
        NetFormatError::Invalid { line, source: e }
    })?;

    // Cross-check recorded intersections against geometry-derived labels.
    for (node, branches, line) in ix_claims {
        let Some(ix) = net.intersection_at(node) else {
            return perr(line, format!("node {node} is not an intersection"));
        };
        if ix.branches != branches {
            return perr(
                line,
                format!("intersection labels disagree with geometry: file {:?}, derived {:?}", branches, ix.branches),
            );
        }
    }

    Ok(net)
}

pub fn load_network(path: &Path) -> Result<RoadNetwork, NetFormatError> {
    let text = std::fs::read_to_string(path)?;
    parse_network(&text)
}
