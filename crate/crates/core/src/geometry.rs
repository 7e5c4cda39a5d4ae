//! Small 2D toolkit for flexibility regions in the (p_pcc, q_pcc) plane.

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};

pub type Point = [f64; 2];

/// Vertices closer than this are merged.
const MERGE_TOL: f64 = 1e-12;
/// Edge-inclusive tolerance for membership tests.
pub const CONTAINS_TOL: f64 = 1e-9;

/// `normal · u ≤ offset`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: Point,
    pub offset: f64,
}

impl HalfSpace {
    /// `None` for a zero normal.
    pub fn new(normal: Point, offset: f64) -> Option<Self> {
        if normal[0] == 0.0 && normal[1] == 0.0 {
            None
        } else {
            Some(Self { normal, offset })
        }
    }

    /// Signed excess `normal · u − offset`; positive outside.
    pub fn excess(&self, u: Point) -> f64 {
        dot(self.normal, u) - self.offset
    }

    pub fn contains(&self, u: Point, tol: f64) -> bool {
        self.excess(u) <= tol
    }

    pub fn normalized(&self) -> Self {
        let n = norm(self.normal);
        Self {
            normal: [self.normal[0] / n, self.normal[1] / n],
            offset: self.offset / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min.iter().chain(&self.max).all(|v| v.is_finite())
            && self.min[0] <= self.max[0]
            && self.min[1] <= self.max[1]
    }

    pub fn polygon(&self) -> FlexPolygon {
        FlexPolygon::from_vertices(vec![
            self.min,
            [self.max[0], self.min[1]],
            self.max,
            [self.min[0], self.max[1]],
        ])
    }

    pub fn halfspaces(&self) -> [HalfSpace; 4] {
        [
            HalfSpace { normal: [1.0, 0.0], offset: self.max[0] },
            HalfSpace { normal: [-1.0, 0.0], offset: -self.min[0] },
            HalfSpace { normal: [0.0, 1.0], offset: self.max[1] },
            HalfSpace { normal: [0.0, -1.0], offset: -self.min[1] },
        ]
    }

    /// Grown by `margin` times the larger side on every edge.
    pub fn expanded(&self, margin: f64) -> Self {
        let d = margin * (self.max[0] - self.min[0]).max(self.max[1] - self.min[1]);
        Self {
            min: [self.min[0] - d, self.min[1] - d],
            max: [self.max[0] + d, self.max[1] + d],
        }
    }
}

/// Closed polygon, vertices counter-clockwise. Polygons produced by
/// clipping or hulls start at their lexicographically smallest vertex.
/// One or two vertices describe a degenerate (point or segment) region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexPolygon {
    pub vertices: Vec<Point>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Clipped {
    Region(FlexPolygon),
    EmptyRegion,
}

impl Clipped {
    pub fn region(self) -> Option<FlexPolygon> {
        match self {
            Clipped::Region(p) => Some(p),
            Clipped::EmptyRegion => None,
        }
    }

    pub fn into_result(self) -> Result<FlexPolygon> {
        self.region().ok_or(FlexError::EmptyRegion)
    }
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Distance from `p` to segment `ab`.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = dot(d, d);
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (dot([p[0] - a[0], p[1] - a[1]], d) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * d[0], a[1] + t * d[1]])
}

impl FlexPolygon {
    pub fn from_vertices(vertices: Vec<Point>) -> Self {
        Self { vertices, closed: true }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        if self.vertices.len() < 3 {
            return 0.0;
        }
        0.5 * self
            .edges()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Point {
        let a = self.signed_area();
        if a.abs() < MERGE_TOL {
            let n = self.vertices.len().max(1) as f64;
            let s = self
                .vertices
                .iter()
                .fold([0.0, 0.0], |s, v| [s[0] + v[0], s[1] + v[1]]);
            return [s[0] / n, s[1] / n];
        }
        let mut c = [0.0, 0.0];
        for (p, q) in self.edges() {
            let w = p[0] * q[1] - q[0] * p[1];
            c[0] += (p[0] + q[0]) * w;
            c[1] += (p[1] + q[1]) * w;
        }
        [c[0] / (6.0 * a), c[1] / (6.0 * a)]
    }

    pub fn bounding_box(&self) -> Option<Rect> {
        let first = *self.vertices.first()?;
        let mut r = Rect::new(first, first);
        for v in &self.vertices {
            r.min = [r.min[0].min(v[0]), r.min[1].min(v[1])];
            r.max = [r.max[0].max(v[0]), r.max[1].max(v[1])];
        }
        Some(r)
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges().map(|(a, b)| dist(a, b)).fold(0.0, f64::max)
    }

    /// Distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        match self.vertices.len() {
            0 => f64::INFINITY,
            1 => dist(p, self.vertices[0]),
            _ => self
                .edges()
                .map(|(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Edge-inclusive membership; works for non-convex simple polygons.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        if self.boundary_distance(p) <= tol {
            return true;
        }
        if self.vertices.len() < 3 {
            return false;
        }
        // winding number
        let mut wn = 0i32;
        for (a, b) in self.edges() {
            if a[1] <= p[1] {
                if b[1] > p[1] && cross(a, b, p) > 0.0 {
                    wn += 1;
                }
            } else if b[1] <= p[1] && cross(a, b, p) < 0.0 {
                wn -= 1;
            }
        }
        wn != 0
    }

    /// Outward edge half-spaces of a convex counter-clockwise polygon,
    /// with unit normals.
    pub fn halfspaces(&self) -> Vec<HalfSpace> {
        if self.vertices.len() < 3 {
            return Vec::new();
        }
        self.edges()
            .filter_map(|(a, b)| {
                HalfSpace::new([b[1] - a[1], a[0] - b[0]], 0.0).map(|h| {
                    let h = h.normalized();
                    HalfSpace { offset: dot(h.normal, a), ..h }
                })
            })
            .collect()
    }

    /// Drops repeated and collinear vertices and rotates the smallest
    /// vertex (lexicographic) to the front.
    pub fn canonical(mut self) -> Self {
        let scale = self
            .vertices
            .iter()
            .map(|v| v[0].abs().max(v[1].abs()))
            .fold(1.0, f64::max);
        let merge = MERGE_TOL * scale;
        let mut out: Vec<Point> = Vec::with_capacity(self.vertices.len());
        for v in self.vertices.drain(..) {
            if out.last().is_none_or(|&l| dist(l, v) > merge) {
                out.push(v);
            }
        }
        while out.len() > 1 && dist(out[0], *out.last().unwrap()) <= merge {
            out.pop();
        }
        // collinear removal, repeated until stable
        loop {
            let n = out.len();
            if n < 3 {
                break;
            }
            let drop = (0..n).find(|&i| {
                let (a, b, c) = (out[(i + n - 1) % n], out[i], out[(i + 1) % n]);
                cross(a, b, c).abs() <= merge * dist(a, c).max(merge)
            });
            match drop {
                Some(i) => {
                    out.remove(i);
                }
                None => break,
            }
        }
        if out.len() == 2 && dist(out[0], out[1]) <= merge {
            out.pop();
        }
        if let Some(start) = (0..out.len()).min_by(|&i, &j| {
            out[i][0]
                .total_cmp(&out[j][0])
                .then(out[i][1].total_cmp(&out[j][1]))
        }) {
            out.rotate_left(start);
        }
        Self { vertices: out, closed: true }
    }
}

fn clip(poly: &[Point], h: &HalfSpace) -> Vec<Point> {
    let n = poly.len();
    if n == 0 {
        return Vec::new();
    }
    let scale = norm(h.normal) * (1.0 + h.offset.abs() / norm(h.normal));
    let tol = MERGE_TOL * scale;
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let dc = h.excess(cur);
        let dn = h.excess(next);
        let cin = dc <= tol;
        let nin = dn <= tol;
        if cin {
            out.push(cur);
        }
        if cin != nin && n > 1 {
            let t = dc / (dc - dn);
            if t.is_finite() {
                out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
    }
    out
}

/// Successively clips `seed` against every half-space.
pub fn intersect_halfspaces(hs: &[HalfSpace], seed: &Rect) -> Clipped {
    let mut poly = seed.polygon().vertices;
    for h in hs {
        if h.normal == [0.0, 0.0] {
            if h.offset < 0.0 {
                return Clipped::EmptyRegion;
            }
            continue;
        }
        poly = clip(&poly, h);
        if poly.is_empty() {
            return Clipped::EmptyRegion;
        }
        poly = FlexPolygon::from_vertices(poly).canonical().vertices;
    }
    Clipped::Region(FlexPolygon::from_vertices(poly).canonical())
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> FlexPolygon {
    let mut pts: Vec<Point> = points.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return FlexPolygon::from_vertices(pts);
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    FlexPolygon::from_vertices(lower).canonical()
}

/// Splits every edge so no piece is longer than `max_edge`.
pub fn densify_boundary(p: &FlexPolygon, max_edge: f64) -> FlexPolygon {
    assert!(max_edge > 0.0, "max_edge must be positive");
    if p.vertices.len() < 2 {
        return p.clone();
    }
    let mut out = Vec::new();
    for (a, b) in p.edges() {
        let pieces = (dist(a, b) / max_edge).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let t = k as f64 / pieces as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    FlexPolygon { vertices: out, closed: p.closed }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolygonMetrics {
    pub area: f64,
    /// Share of the probe points inside the polygon.
    pub containment: f64,
    /// Largest distance from a probe point to the polygon boundary.
    pub hausdorff: f64,
}

pub fn polygon_metrics(a: &FlexPolygon, probe: &[Point]) -> Result<PolygonMetrics> {
    let area = a.area();
    if area < 1e-12 {
        return Err(FlexError::DegeneratePolygon(area));
    }
    let inside = probe.iter().filter(|&&p| a.contains(p, CONTAINS_TOL)).count();
    let hausdorff = probe
        .iter()
        .map(|&p| a.boundary_distance(p))
        .fold(0.0, f64::max);
    Ok(PolygonMetrics {
        area,
        containment: if probe.is_empty() { 1.0 } else { inside as f64 / probe.len() as f64 },
        hausdorff,
    })
}
