//! 2D geometric primitives: oriented boxes, Bezier paths, lane-relative
//! frames and curvature. Everything here is a pure function on immutable
//! inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::HDMap;

/// A 2D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn unit(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Left-hand normal (90 degrees counterclockwise).
    pub fn left_normal(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Normalize an angle into [-pi, pi).
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a.is_nan() {
        return 0.0;
    }
    let mut a = a % (2.0 * PI);
    if a < -PI {
        a += 2.0 * PI;
    } else if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("all waypoints coincide; cannot fit a path")]
    DegenerateInput,
    #[error("point is more than {0} m from every lane centerline")]
    NoLaneWithinRange(f64),
}

// ---------------------------------------------------------------------------
// Oriented bounding boxes
// ---------------------------------------------------------------------------

/// Rectangle with arbitrary heading, given by center, half extents and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    /// (half length along the heading axis, half width across it)
    pub half_extents: Vec2,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, half_extents: Vec2, yaw: f64) -> Self {
        debug_assert!(half_extents.x > 0.0 && half_extents.y > 0.0);
        OrientedBox {
            center,
            half_extents,
            yaw,
        }
    }

    /// The two local axes (heading, lateral) as unit vectors.
    pub fn axes(&self) -> [Vec2; 2] {
        let (s, c) = self.yaw.sin_cos();
        [Vec2::new(c, s), Vec2::new(-s, c)]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let hu = u.scale(self.half_extents.x);
        let hv = v.scale(self.half_extents.y);
        [
            self.center + hu + hv,
            self.center + hu - hv,
            self.center - hu - hv,
            self.center - hu + hv,
        ]
    }

    /// Radius of the circumscribed circle (half diagonal).
    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    pub fn inflate(&self, margin: f64) -> OrientedBox {
        OrientedBox {
            center: self.center,
            half_extents: Vec2::new(self.half_extents.x + margin, self.half_extents.y + margin),
            yaw: self.yaw,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center;
        let [u, v] = self.axes();
        d.dot(u).abs() <= self.half_extents.x && d.dot(v).abs() <= self.half_extents.y
    }
}

/// Separating-axis overlap test for two oriented boxes (closed sets: boxes
/// that merely touch count as overlapping). Only the four face normals need
/// checking in 2D.
pub fn obb_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    obb_overlap_depth(a, b).is_some()
}

/// Like [`obb_overlap`] but reports the penetration depth: the smallest
/// projected overlap across the four candidate axes. `None` when separated.
pub fn obb_overlap_depth(a: &OrientedBox, b: &OrientedBox) -> Option<f64> {
    let d = b.center - a.center;
    let [au, av] = a.axes();
    let [bu, bv] = b.axes();
    let mut min_overlap = f64::INFINITY;
    for axis in [au, av, bu, bv] {
        let ra = a.half_extents.x * au.dot(axis).abs() + a.half_extents.y * av.dot(axis).abs();
        let rb = b.half_extents.x * bu.dot(axis).abs() + b.half_extents.y * bv.dot(axis).abs();
        let overlap = ra + rb - d.dot(axis).abs();
        if overlap < 0.0 {
            return None;
        }
        min_overlap = min_overlap.min(overlap);
    }
    Some(min_overlap)
}

// ---------------------------------------------------------------------------
// Polylines
// ---------------------------------------------------------------------------

/// Total length of a polyline.
pub fn polyline_length(pts: &[Vec2]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Projection of a point onto a polyline.
#[derive(Debug, Clone, Copy)]
pub struct PolylineProjection {
    /// Arc length of the closest point from the start of the polyline.
    pub s: f64,
    /// Signed lateral offset; positive to the left of travel direction.
    pub d: f64,
    /// Closest point on the polyline.
    pub point: Vec2,
    /// Index of the segment containing the closest point.
    pub segment: usize,
}

/// Project `p` onto the polyline, returning arc length, signed offset and
/// the closest point. Requires at least two points.
pub fn project_to_polyline(pts: &[Vec2], p: Vec2) -> PolylineProjection {
    assert!(pts.len() >= 2, "polyline needs at least two points");
    let mut best = PolylineProjection {
        s: 0.0,
        d: f64::INFINITY,
        point: pts[0],
        segment: 0,
    };
    let mut best_abs = f64::INFINITY;
    let mut s_acc = 0.0;
    for (i, w) in pts.windows(2).enumerate() {
        let a = w[0];
        let b = w[1];
        let ab = b - a;
        let len = ab.norm();
        if len == 0.0 {
            continue;
        }
        let t = ((p - a).dot(ab) / (len * len)).clamp(0.0, 1.0);
        let q = a + ab.scale(t);
        let dist = p.dist(q);
        if dist < best_abs {
            best_abs = dist;
            let side = ab.unit().cross(p - q);
            best = PolylineProjection {
                s: s_acc + t * len,
                d: if side >= 0.0 { dist } else { -dist },
                point: q,
                segment: i,
            };
        }
        s_acc += len;
    }
    best
}

/// Point at arc length `s` along the polyline (clamped to its ends).
pub fn point_at_arclength(pts: &[Vec2], s: f64) -> Vec2 {
    assert!(pts.len() >= 2);
    if s <= 0.0 {
        return pts[0];
    }
    let mut remaining = s;
    for w in pts.windows(2) {
        let len = w[0].dist(w[1]);
        if remaining <= len {
            return w[0] + (w[1] - w[0]).scale(remaining / len.max(1e-12));
        }
        remaining -= len;
    }
    *pts.last().unwrap()
}

/// Tangent heading at arc length `s` along the polyline.
pub fn heading_at_arclength(pts: &[Vec2], s: f64) -> f64 {
    assert!(pts.len() >= 2);
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let len = w[0].dist(w[1]);
        if remaining <= len && len > 0.0 {
            return (w[1] - w[0]).angle();
        }
        remaining -= len;
    }
    let n = pts.len();
    (pts[n - 1] - pts[n - 2]).angle()
}

/// Curvature threshold below which a centerline is reported as straight.
pub const CURVATURE_FLOOR: f64 = 1e-4;
/// Spacing of the three sample points used for the circumradius estimate.
pub const CURVATURE_SPACING: f64 = 2.0;

/// Curvature at arc length `s` from the circumradius of three points spaced
/// [`CURVATURE_SPACING`] apart. Signed: positive turns left. Values below
/// [`CURVATURE_FLOOR`] are reported as exactly zero.
pub fn curvature_at_arclength(pts: &[Vec2], s: f64) -> f64 {
    let total = polyline_length(pts);
    let h = CURVATURE_SPACING.min(total / 2.0);
    if h < 1e-6 {
        return 0.0;
    }
    let s = s.clamp(0.0, total);
    let (s0, s1, s2) = if s < h {
        (0.0, h, 2.0 * h)
    } else if s > total - h {
        (total - 2.0 * h, total - h, total)
    } else {
        (s - h, s, s + h)
    };
    let a = point_at_arclength(pts, s0);
    let b = point_at_arclength(pts, s1);
    let c = point_at_arclength(pts, s2);
    let ab = b - a;
    let bc = c - b;
    let ca = a - c;
    let area2 = ab.cross(bc); // twice the signed triangle area
    let denom = ab.norm() * bc.norm() * ca.norm();
    if denom < 1e-12 {
        return 0.0;
    }
    let k = 2.0 * area2 / denom;
    if k.abs() < CURVATURE_FLOOR {
        0.0
    } else {
        k
    }
}

// ---------------------------------------------------------------------------
// Bezier paths
// ---------------------------------------------------------------------------

/// Evaluate a Bezier curve of arbitrary degree by de Casteljau's algorithm.
pub fn bezier_point(control: &[Vec2], t: f64) -> Vec2 {
    let mut work: Vec<Vec2> = control.to_vec();
    let n = work.len();
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i].scale(1.0 - t) + work[i + 1].scale(t);
        }
    }
    work[0]
}

/// Piecewise Bezier curve with a precomputed arc-length table.
///
/// Fitted paths are piecewise cubic with C1-continuous joins; a degenerate
/// two-point fit produces a single linear segment.
#[derive(Debug, Clone)]
pub struct BezierPath {
    segments: Vec<Vec<Vec2>>,
    /// (global parameter in [0,1], cumulative arc length) pairs, strictly
    /// increasing in both columns.
    arclength: Vec<(f64, f64)>,
}

const ARCLENGTH_SAMPLES_PER_SEGMENT: usize = 32;

impl BezierPath {
    fn from_segments(segments: Vec<Vec<Vec2>>) -> Self {
        let mut path = BezierPath {
            segments,
            arclength: Vec::new(),
        };
        path.rebuild_arclength();
        path
    }

    fn rebuild_arclength(&mut self) {
        let nseg = self.segments.len();
        let mut table = vec![(0.0, 0.0)];
        let mut acc = 0.0;
        let mut prev = bezier_point(&self.segments[0], 0.0);
        for (si, seg) in self.segments.iter().enumerate() {
            for k in 1..=ARCLENGTH_SAMPLES_PER_SEGMENT {
                let t = k as f64 / ARCLENGTH_SAMPLES_PER_SEGMENT as f64;
                let p = bezier_point(seg, t);
                acc += prev.dist(p);
                prev = p;
                let u = (si as f64 + t) / nseg as f64;
                // keep the table strictly increasing
                if acc > table.last().unwrap().1 {
                    table.push((u, acc));
                }
            }
        }
        self.arclength = table;
    }

    pub fn segments(&self) -> &[Vec<Vec2>] {
        &self.segments
    }

    /// Flattened control points of every segment in order.
    pub fn control_points(&self) -> Vec<Vec2> {
        self.segments.iter().flatten().copied().collect()
    }

    pub fn arclength_table(&self) -> &[(f64, f64)] {
        &self.arclength
    }

    pub fn total_length(&self) -> f64 {
        self.arclength.last().map(|e| e.1).unwrap_or(0.0)
    }

    /// Evaluate at global parameter `u` in [0,1], mapped uniformly across
    /// segments.
    pub fn eval(&self, u: f64) -> Vec2 {
        let u = u.clamp(0.0, 1.0);
        let nseg = self.segments.len() as f64;
        let scaled = u * nseg;
        let idx = (scaled.floor() as usize).min(self.segments.len() - 1);
        let t = scaled - idx as f64;
        bezier_point(&self.segments[idx], t)
    }

    /// Global parameter at a given arc length, by table interpolation.
    pub fn param_at_arclength(&self, s: f64) -> f64 {
        let total = self.total_length();
        if s <= 0.0 || total == 0.0 {
            return 0.0;
        }
        if s >= total {
            return 1.0;
        }
        let i = self.arclength.partition_point(|e| e.1 < s);
        let (u1, s1) = self.arclength[i];
        let (u0, s0) = self.arclength[i - 1];
        let w = (s - s0) / (s1 - s0);
        u0 + w * (u1 - u0)
    }

    pub fn point_at_arclength(&self, s: f64) -> Vec2 {
        self.eval(self.param_at_arclength(s))
    }

    /// Heading of the tangent at arc length `s` (finite difference).
    pub fn heading_at_arclength(&self, s: f64) -> f64 {
        let total = self.total_length();
        let h = (total * 1e-3).clamp(1e-4, 0.5);
        let a = self.point_at_arclength((s - h).max(0.0));
        let b = self.point_at_arclength((s + h).min(total));
        (b - a).angle()
    }

    /// Arc length of the closest point to `p`, by dense table search refined
    /// with local sampling.
    pub fn project(&self, p: Vec2) -> f64 {
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for &(u, s) in &self.arclength {
            let d = self.eval(u).dist(p);
            if d < best_d {
                best_d = d;
                best_s = s;
            }
        }
        best_s
    }
}

/// Maximum allowed perpendicular deviation between a fitted path and its
/// waypoint polyline.
pub const BEZIER_FIT_TOLERANCE: f64 = 0.5;

/// Fit a piecewise cubic Bezier through the waypoints (Catmull-Rom tangents,
/// so the curve interpolates every waypoint with C1 joins). Spans whose fit
/// deviates from the waypoint polyline by more than [`BEZIER_FIT_TOLERANCE`]
/// are split at their midpoint and refitted.
pub fn bezier_fit(waypoints: &[Vec2]) -> Result<BezierPath, GeometryError> {
    // drop consecutive duplicates
    let mut pts: Vec<Vec2> = Vec::with_capacity(waypoints.len());
    for &p in waypoints {
        if pts.last().is_none_or(|q| q.dist(p) > 1e-9) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return Err(GeometryError::DegenerateInput);
    }
    if pts.len() == 2 {
        return Ok(BezierPath::from_segments(vec![vec![pts[0], pts[1]]]));
    }

    // the internal target leaves headroom below the tolerance because the
    // deviation scan is sampled, not exact
    let target = 0.85 * BEZIER_FIT_TOLERANCE;
    for _ in 0..16 {
        let path = fit_catmull_rom(&pts);
        match worst_deviation(&path, &pts) {
            Some((seg_idx, dev)) if dev > target => {
                // split the offending span at its midpoint and refit
                let a = pts[seg_idx];
                let b = pts[seg_idx + 1];
                pts.insert(seg_idx + 1, (a + b).scale(0.5));
            }
            _ => return Ok(path),
        }
    }
    Ok(fit_catmull_rom(&pts))
}

fn fit_catmull_rom(pts: &[Vec2]) -> BezierPath {
    // chordal parameterization keeps unevenly spaced waypoints from
    // producing overshoot
    let n = pts.len();
    let mut t = vec![0.0; n];
    for i in 1..n {
        t[i] = t[i - 1] + pts[i].dist(pts[i - 1]).max(1e-9);
    }
    let tangent = |i: usize| -> Vec2 {
        if i == 0 {
            (pts[1] - pts[0]).scale(1.0 / (t[1] - t[0]))
        } else if i == n - 1 {
            (pts[n - 1] - pts[n - 2]).scale(1.0 / (t[n - 1] - t[n - 2]))
        } else {
            (pts[i + 1] - pts[i - 1]).scale(1.0 / (t[i + 1] - t[i - 1]))
        }
    };
    let mut segments = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let h = t[i + 1] - t[i];
        let m0 = tangent(i).scale(h / 3.0);
        let m1 = tangent(i + 1).scale(h / 3.0);
        segments.push(vec![pts[i], pts[i] + m0, pts[i + 1] - m1, pts[i + 1]]);
    }
    BezierPath::from_segments(segments)
}

/// Worst perpendicular deviation of the path from the waypoint polyline,
/// with the index of the span it occurs in.
fn worst_deviation(path: &BezierPath, polyline: &[Vec2]) -> Option<(usize, f64)> {
    let mut worst: Option<(usize, f64)> = None;
    for (si, seg) in path.segments().iter().enumerate() {
        for k in 0..=48 {
            let t = k as f64 / 48.0;
            let p = bezier_point(seg, t);
            let d = project_to_polyline(polyline, p).d.abs();
            if worst.is_none_or(|(_, w)| d > w) {
                worst = Some((si, d));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Lane-relative frames
// ---------------------------------------------------------------------------

/// Position expressed relative to the closest lane centerline.
#[derive(Debug, Clone)]
pub struct LaneFrame {
    pub lane_id: String,
    /// Arc length along the centerline in meters.
    pub s: f64,
    /// Signed lateral offset, left of travel positive.
    pub d: f64,
    /// Heading relative to the centerline tangent, in [-pi, pi).
    pub heading_err: f64,
    /// Centerline curvature at the projection point (1/m, left positive).
    pub curvature: f64,
}

/// [`LaneFrame`] plus the marker and road-edge distances used as control
/// features.
#[derive(Debug, Clone)]
pub struct LaneProjection {
    pub frame: LaneFrame,
    /// Lateral distance from the agent center to the left lane marking.
    pub marker_dist_l: f64,
    /// Lateral distance from the agent center to the right lane marking.
    pub marker_dist_r: f64,
    /// Lateral distance to the nearest road edge on the left.
    pub road_dist_l: f64,
    /// Lateral distance to the nearest road edge on the right.
    pub road_dist_r: f64,
}

/// Rejection distance for lane projection.
pub const LANE_PROJECTION_RANGE: f64 = 20.0;
/// Sentinel used when no road edge exists on a side.
pub const ROAD_EDGE_SENTINEL: f64 = 100.0;

/// Project a pose onto the nearest lane of the map.
pub fn project_to_lane(map: &HDMap, p: Vec2, yaw: f64) -> Result<LaneProjection, GeometryError> {
    let mut best: Option<(usize, PolylineProjection)> = None;
    for (i, lane) in map.lanes.iter().enumerate() {
        let proj = project_to_polyline(&lane.centerline, p);
        if best
            .as_ref()
            .is_none_or(|(_, b)| proj.d.abs() < b.d.abs())
        {
            best = Some((i, proj));
        }
    }
    let (lane_idx, proj) =
        best.ok_or(GeometryError::NoLaneWithinRange(LANE_PROJECTION_RANGE))?;
    if proj.d.abs() > LANE_PROJECTION_RANGE {
        return Err(GeometryError::NoLaneWithinRange(LANE_PROJECTION_RANGE));
    }
    let lane = &map.lanes[lane_idx];
    if proj.d.abs() > lane.width + 5.0 {
        return Err(GeometryError::NoLaneWithinRange(LANE_PROJECTION_RANGE));
    }
    let heading = heading_at_arclength(&lane.centerline, proj.s);
    let frame = LaneFrame {
        lane_id: lane.id.clone(),
        s: proj.s,
        d: proj.d,
        heading_err: normalize_angle(yaw - heading),
        curvature: curvature_at_arclength(&lane.centerline, proj.s),
    };

    // marking distances: prefer the drawn markings, fall back to half width
    let marker_dist_l = if lane.left.len() >= 2 {
        project_to_polyline(&lane.left, p).d.abs()
    } else {
        (lane.width / 2.0 - proj.d).abs()
    };
    let marker_dist_r = if lane.right.len() >= 2 {
        project_to_polyline(&lane.right, p).d.abs()
    } else {
        (lane.width / 2.0 + proj.d).abs()
    };

    // road edges classified by which side of the agent they fall on
    let dir = Vec2::new(heading.cos(), heading.sin());
    let mut road_dist_l = ROAD_EDGE_SENTINEL;
    let mut road_dist_r = ROAD_EDGE_SENTINEL;
    for edge in &map.road_edges {
        if edge.len() < 2 {
            continue;
        }
        let ep = project_to_polyline(edge, p);
        let side = dir.cross(ep.point - p);
        let dist = ep.d.abs();
        if side >= 0.0 {
            road_dist_l = road_dist_l.min(dist);
        } else {
            road_dist_r = road_dist_r.min(dist);
        }
    }

    Ok(LaneProjection {
        frame,
        marker_dist_l,
        marker_dist_r,
        road_dist_l,
        road_dist_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Adjacency, AdjacencyRelation, HDMap, Lane};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit_square_at(x: f64, y: f64) -> OrientedBox {
        OrientedBox::new(Vec2::new(x, y), Vec2::new(0.5, 0.5), 0.0)
    }

    /// Dense point-sampling containment oracle: grid-samples the area of
    /// each box at `res` spacing and tests containment in the other box.
    /// Independent of the separating-axis implementation.
    pub fn sampling_overlap_oracle(a: &OrientedBox, b: &OrientedBox, res: f64) -> bool {
        for (src, dst) in [(a, b), (b, a)] {
            let [u, v] = src.axes();
            let nx = (2.0 * src.half_extents.x / res).ceil() as usize + 1;
            let ny = (2.0 * src.half_extents.y / res).ceil() as usize + 1;
            for i in 0..=nx {
                for j in 0..=ny {
                    let du = -src.half_extents.x + 2.0 * src.half_extents.x * i as f64 / nx as f64;
                    let dv = -src.half_extents.y + 2.0 * src.half_extents.y * j as f64 / ny as f64;
                    let p = src.center + u.scale(du) + v.scale(dv);
                    if dst.contains(p) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Smallest gap between the two box boundaries (0 when they overlap):
    /// used to exempt disagreements within the sampling resolution.
    fn boundary_gap(a: &OrientedBox, b: &OrientedBox) -> f64 {
        let ca = a.corners();
        let cb = b.corners();
        let mut gap = f64::INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                let (a0, a1) = (ca[i], ca[(i + 1) % 4]);
                let (b0, b1) = (cb[j], cb[(j + 1) % 4]);
                gap = gap.min(segment_distance(a0, a1, b0, b1));
            }
        }
        gap
    }

    fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
        let ab = b - a;
        let len2 = ab.dot(ab);
        if len2 == 0.0 {
            return p.dist(a);
        }
        let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
        p.dist(a + ab.scale(t))
    }

    fn segment_distance(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> f64 {
        point_segment_distance(a0, b0, b1)
            .min(point_segment_distance(a1, b0, b1))
            .min(point_segment_distance(b0, a0, a1))
            .min(point_segment_distance(b1, a0, a1))
    }

    #[test]
    fn coincident_unit_squares_overlap() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(0.0, 0.0);
        assert!(obb_overlap(&a, &b));
    }

    #[test]
    fn distant_unit_squares_do_not_overlap() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(10.0, 0.0);
        assert!(!obb_overlap(&a, &b));
    }

    #[test]
    fn rotated_box_pair_matches_sampling_oracle() {
        // 4x2 box at origin, yaw 0, against a 4x2 box at (3.9, 0), yaw pi/4.
        let a = OrientedBox::new(Vec2::ZERO, Vec2::new(2.0, 1.0), 0.0);
        let b = OrientedBox::new(Vec2::new(3.9, 0.0), Vec2::new(2.0, 1.0), PI / 4.0);
        let expected = sampling_overlap_oracle(&a, &b, 0.02);
        assert!(expected, "oracle finds these boxes overlapping");
        assert_eq!(obb_overlap(&a, &b), expected);
    }

    #[test]
    fn touching_boxes_count_as_overlap() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(1.0, 0.0); // edges exactly touch
        assert!(obb_overlap(&a, &b));
    }

    proptest! {
        #[test]
        fn obb_overlap_is_symmetric(
            ax in -5.0..5.0f64, ay in -5.0..5.0f64, ayaw in -3.2..3.2f64,
            aw in 0.2..3.0f64, ah in 0.2..3.0f64,
            bx in -5.0..5.0f64, by in -5.0..5.0f64, byaw in -3.2..3.2f64,
            bw in 0.2..3.0f64, bh in 0.2..3.0f64,
        ) {
            let a = OrientedBox::new(Vec2::new(ax, ay), Vec2::new(aw, ah), ayaw);
            let b = OrientedBox::new(Vec2::new(bx, by), Vec2::new(bw, bh), byaw);
            prop_assert_eq!(obb_overlap(&a, &b), obb_overlap(&b, &a));
        }
    }

    #[test]
    fn obb_overlap_agrees_with_sampling_oracle_randomized() {
        // 10^4 random pairs against the 0.02 m point-sampling oracle;
        // disagreements are only tolerated when the boundary gap is below
        // the oracle resolution.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0usize;
        for _ in 0..10_000 {
            let a = OrientedBox::new(
                Vec2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)),
                Vec2::new(rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5)),
                rng.gen_range(-PI..PI),
            );
            let b = OrientedBox::new(
                Vec2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)),
                Vec2::new(rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5)),
                rng.gen_range(-PI..PI),
            );
            let fast = obb_overlap(&a, &b);
            // circle prune keeps the oracle affordable and is independent math
            let center_gap = a.center.dist(b.center);
            if center_gap > a.bounding_radius() + b.bounding_radius() {
                assert!(!fast);
                continue;
            }
            let slow = sampling_overlap_oracle(&a, &b, 0.02);
            if fast != slow {
                let gap = boundary_gap(&a, &b);
                assert!(
                    gap < 0.02,
                    "disagreement with boundary gap {gap} (fast={fast}, slow={slow})"
                );
            }
            checked += 1;
        }
        assert!(checked > 5000);
    }

    #[test]
    fn bezier_two_waypoints_is_straight() {
        let path = bezier_fit(&[Vec2::ZERO, Vec2::new(10.0, 0.0)]).unwrap();
        assert_eq!(path.eval(0.0), Vec2::ZERO);
        assert_eq!(path.eval(1.0), Vec2::new(10.0, 0.0));
        let mid = path.eval(0.5);
        assert!((mid.y).abs() < 1e-12 && (mid.x - 5.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_de_casteljau_midpoint() {
        let p = bezier_point(
            &[Vec2::ZERO, Vec2::new(1.0, 1.0), Vec2::new(2.0, 0.0)],
            0.5,
        );
        assert!((p.x - 1.0).abs() < 1e-12);
        assert!((p.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_waypoints_rejected() {
        let p = Vec2::new(3.0, 4.0);
        assert!(matches!(
            bezier_fit(&[p, p, p]),
            Err(GeometryError::DegenerateInput)
        ));
    }

    #[test]
    fn fit_deviation_within_tolerance_dense_sampling() {
        // random 6-point polylines: deviation from the waypoint polyline
        // stays within tolerance at 1000 sampled parameters
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut pts = vec![Vec2::ZERO];
            for i in 1..6 {
                pts.push(Vec2::new(
                    i as f64 * 8.0 + rng.gen_range(-1.0..1.0),
                    rng.gen_range(-3.0..3.0),
                ));
            }
            let path = bezier_fit(&pts).unwrap();
            for k in 0..=1000 {
                let u = k as f64 / 1000.0;
                let dev = project_to_polyline(&pts, path.eval(u)).d.abs();
                assert!(dev <= BEZIER_FIT_TOLERANCE + 1e-9, "deviation {dev} at u={u}");
            }
            // endpoints interpolate exactly
            assert!(path.eval(0.0).dist(pts[0]) < 1e-12);
            assert!(path.eval(1.0).dist(*pts.last().unwrap()) < 1e-12);
        }
    }

    #[test]
    fn arclength_table_monotone_and_bounded_below() {
        let pts = vec![
            Vec2::ZERO,
            Vec2::new(5.0, 2.0),
            Vec2::new(11.0, -1.0),
            Vec2::new(18.0, 3.0),
        ];
        let path = bezier_fit(&pts).unwrap();
        let table = path.arclength_table();
        for w in table.windows(2) {
            assert!(w[1].0 > w[0].0);
            assert!(w[1].1 > w[0].1);
        }
        let chord = pts[0].dist(*pts.last().unwrap());
        assert!(path.total_length() >= chord - 1e-9);
    }

    fn straight_lane_map() -> HDMap {
        let centerline: Vec<Vec2> = (0..=20).map(|i| Vec2::new(i as f64 * 5.0, 0.0)).collect();
        let left: Vec<Vec2> = centerline.iter().map(|p| Vec2::new(p.x, 1.8)).collect();
        let right: Vec<Vec2> = centerline.iter().map(|p| Vec2::new(p.x, -1.8)).collect();
        HDMap {
            lanes: vec![Lane {
                id: "l0".into(),
                centerline,
                left,
                right,
                width: 3.6,
            }],
            road_edges: vec![],
            adjacency: vec![],
        }
    }

    #[test]
    fn straight_lane_projection_zeroes() {
        let map = straight_lane_map();
        let proj = project_to_lane(&map, Vec2::new(10.0, 0.0), 0.0).unwrap();
        assert_eq!(proj.frame.d, 0.0);
        assert_eq!(proj.frame.heading_err, 0.0);
        assert_eq!(proj.frame.curvature, 0.0);
        assert!((proj.frame.s - 10.0).abs() < 1e-9);
    }

    #[test]
    fn left_offset_sign_convention() {
        let map = straight_lane_map();
        let proj = project_to_lane(&map, Vec2::new(10.0, 1.5), 0.0).unwrap();
        assert!((proj.frame.d - 1.5).abs() < 1e-9);
    }

    #[test]
    fn marker_distances_from_lane_width() {
        let map = straight_lane_map();
        let proj = project_to_lane(&map, Vec2::new(10.0, 0.8), 0.0).unwrap();
        assert!((proj.marker_dist_l - 1.0).abs() < 1e-9);
        assert!((proj.marker_dist_r - 2.6).abs() < 1e-9);
    }

    #[test]
    fn arc_centerline_curvature_matches_circumradius_oracle() {
        // 50 m radius arc: curvature should be 0.02 within 5%
        let radius = 50.0;
        let centerline: Vec<Vec2> = (0..=60)
            .map(|i| {
                let theta = i as f64 * 1.0 / radius; // 1 m spacing
                Vec2::new(radius * theta.sin(), radius * (1.0 - theta.cos()))
            })
            .collect();
        let map = HDMap {
            lanes: vec![Lane {
                id: "arc".into(),
                centerline: centerline.clone(),
                left: vec![],
                right: vec![],
                width: 3.6,
            }],
            road_edges: vec![],
            adjacency: vec![],
        };
        let p = point_at_arclength(&centerline, 30.0);
        let proj = project_to_lane(&map, p, heading_at_arclength(&centerline, 30.0)).unwrap();
        let expected = 1.0 / radius;
        assert!(
            (proj.frame.curvature - expected).abs() / expected < 0.05,
            "curvature {} vs {}",
            proj.frame.curvature,
            expected
        );
    }

    #[test]
    fn projection_rejected_far_from_lanes() {
        let map = straight_lane_map();
        let r = project_to_lane(&map, Vec2::new(10.0, 60.0), 0.0);
        assert!(matches!(r, Err(GeometryError::NoLaneWithinRange(_))));
    }

    #[test]
    fn adjacency_validation_catches_unknown_lane() {
        let mut map = straight_lane_map();
        map.adjacency.push(Adjacency {
            from: "l0".into(),
            to: "ghost".into(),
            relation: AdjacencyRelation::Successor,
        });
        assert!(map.validate().is_err());
    }
}
