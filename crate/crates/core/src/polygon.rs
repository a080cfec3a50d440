//! Convex polygon primitives on the floor plane: hull, area,
//! intersection (Sutherland-Hodgman), overlap area and IoU.
//!
//! Footprints are quadrilateral hulls and therefore always convex, so a
//! convex-only clipping kernel is sufficient. Sliver intersections below
//! [`EPS_AREA`] are reported as empty to keep floating-point noise out of
//! the miner.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Intersections (and footprints) with shoelace area below this are
/// treated as degenerate, in square meters.
pub const EPS_AREA: f64 = 1e-8;

/// Identifies the detection a footprint was projected from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub agent_id: String,
    pub episode_id: String,
    pub image_id: String,
    pub box_id: u32,
}

/// Convex counterclockwise polygon in world meters on the z = 0 plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorPolygon {
    pub vertices: Vec<[f64; 2]>,
    pub source: SourceId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolygonError {
    /// Fewer than 3 distinct points, or all points collinear.
    CollinearInput,
}

impl core::fmt::Display for PolygonError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PolygonError::CollinearInput => write!(f, "input points are collinear"),
        }
    }
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counterclockwise, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]], source: SourceId) -> Result<FloorPolygon, PolygonError> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return Err(PolygonError::CollinearInput);
    }

    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(PolygonError::CollinearInput);
    }
    Ok(FloorPolygon {
        vertices: hull,
        source,
    })
}

/// Shoelace area of a CCW vertex ring. Positive for CCW input.
pub fn ring_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

pub fn area(p: &FloorPolygon) -> f64 {
    ring_area(&p.vertices)
}

/// Sutherland-Hodgman clip of subject ring `a` against convex clip ring `b`.
/// Both rings must be CCW. Returns the intersection ring (possibly empty).
pub fn clip_rings(a: &[[f64; 2]], b: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = a.to_vec();
    let nb = b.len();
    for i in 0..nb {
        if out.is_empty() {
            break;
        }
        let ca = b[i];
        let cb = b[(i + 1) % nb];
        let input = core::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let s = input[j];
            let e = input[(j + 1) % n];
            let sd = cross(ca, cb, s);
            let ed = cross(ca, cb, e);
            // inside = left of the directed clip edge (CCW interior)
            if sd >= 0.0 {
                out.push(s);
                if ed < 0.0 {
                    out.push(edge_intersection(s, e, sd, ed));
                }
            } else if ed >= 0.0 {
                out.push(edge_intersection(s, e, sd, ed));
            }
        }
    }
    out
}

#[inline]
fn edge_intersection(s: [f64; 2], e: [f64; 2], sd: f64, ed: f64) -> [f64; 2] {
    let t = sd / (sd - ed);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

/// Convex intersection of two polygons; `None` when the overlap area is
/// below [`EPS_AREA`]. The result inherits `a`'s source tag.
pub fn intersect(a: &FloorPolygon, b: &FloorPolygon) -> Option<FloorPolygon> {
    let ring = clip_rings(&a.vertices, &b.vertices);
    if ring.len() < 3 || ring_area(&ring) < EPS_AREA {
        return None;
    }
    Some(FloorPolygon {
        vertices: ring,
        source: a.source.clone(),
    })
}

pub fn overlap_area(a: &FloorPolygon, b: &FloorPolygon) -> f64 {
    match intersect(a, b) {
        Some(p) => area(&p),
        None => 0.0,
    }
}

pub fn iou(a: &FloorPolygon, b: &FloorPolygon) -> f64 {
    let inter = overlap_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// True when `p` is inside or on the boundary of a CCW convex ring.
pub fn contains_point(vertices: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = vertices.len();
    for i in 0..n {
        if cross(vertices[i], vertices[(i + 1) % n], p) < -1e-12 {
            return false;
        }
    }
    true
}

/// Minimum Euclidean distance from `p` to the polygon (0 when inside).
pub fn distance_to_point(vertices: &[[f64; 2]], p: [f64; 2]) -> f64 {
    if contains_point(vertices, p) {
        return 0.0;
    }
    let n = vertices.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let d = segment_distance(a, b, p);
        if d < best {
            best = d;
        }
    }
    best
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let qx = a[0] + t * dx;
    let qy = a[1] + t * dy;
    crate::math::hypot(p[0] - qx, p[1] - qy)
}

/// Axis-aligned bounding box of the vertex ring: [xmin, ymin, xmax, ymax].
pub fn aabb(vertices: &[[f64; 2]]) -> [f64; 4] {
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for v in vertices {
        bb[0] = bb[0].min(v[0]);
        bb[1] = bb[1].min(v[1]);
        bb[2] = bb[2].max(v[0]);
        bb[3] = bb[3].max(v[1]);
    }
    bb
}

#[cfg(test)]
pub(crate) fn test_source(tag: u32) -> SourceId {
    use alloc::format;
    SourceId {
        agent_id: format!("a{tag}"),
        episode_id: format!("e{tag}"),
        image_id: format!("img{tag}"),
        box_id: tag,
    }
}
