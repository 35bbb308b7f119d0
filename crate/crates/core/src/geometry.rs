//! Polygon shape statistics: area, compactness, minimum-area rectangle axes.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Simple polygon in metres. The ring is implicitly closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryStats {
    pub area: f64,
    pub length_major_axis: f64,
    pub width_minor_axis: f64,
    pub length_width_ratio: f64,
}

fn signed_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

impl Polygon {
    pub fn new(mut vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::InvalidShape {
                op: "polygon",
                msg: format!("{} vertices, need at least 3", vertices.len()),
            });
        }
        if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite { op: "polygon" });
        }
        if signed_area(&vertices).abs() == 0.0 {
            return Err(Error::InvalidShape {
                op: "polygon",
                msg: "zero area".into(),
            });
        }
        let n = vertices.len();
        for i in 0..n {
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(Error::InvalidShape {
                        op: "polygon",
                        msg: format!("edges {i} and {j} intersect"),
                    });
                }
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn perimeter(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        (0..n)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                (b.0 - a.0).hypot(b.1 - a.1)
            })
            .sum()
    }

    /// `P² / (4π A)`: 1 for a circle, larger for elongated or ragged shapes.
    pub fn compactness(&self) -> f64 {
        let p = self.perimeter();
        p * p / (4.0 * PI * self.area())
    }

    /// Convex hull, counter-clockwise, via the monotone chain.
    pub fn convex_hull(&self) -> Vec<(f64, f64)> {
        let mut pts = self.vertices.clone();
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite vertices"));
        pts.dedup();
        let mut lower: Vec<(f64, f64)> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<(f64, f64)> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        lower
    }

    /// Side lengths `(long, short)` of the minimum-area bounding rectangle.
    /// One side of that rectangle is collinear with a hull edge, so trying
    /// each edge direction is exhaustive.
    pub fn min_area_rect(&self) -> (f64, f64) {
        let hull = self.convex_hull();
        let n = hull.len();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if len == 0.0 {
                continue;
            }
            let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
            let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in &hull {
                let u = x * ux + y * uy;
                let v = -x * uy + y * ux;
                lo_u = lo_u.min(u);
                hi_u = hi_u.max(u);
                lo_v = lo_v.min(v);
                hi_v = hi_v.max(v);
            }
            let (w, h) = (hi_u - lo_u, hi_v - lo_v);
            if w * h < best.0 {
                best = (w * h, w.max(h), w.min(h));
            }
        }
        (best.1, best.2)
    }

    pub fn stats(&self) -> GeometryStats {
        let (length, width) = self.min_area_rect();
        GeometryStats {
            area: self.area(),
            length_major_axis: length,
            width_minor_axis: width,
            length_width_ratio: length / width,
        }
    }
}

/// One polygon per line as whitespace-separated `x,y` pairs; blank lines and
/// `#` comments are skipped.
pub fn parse_polygons(text: &str) -> Result<Vec<Polygon>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::config(format!("line {}: {what}", lineno + 1));
        let vertices = line
            .split_whitespace()
            .map(|pair| {
                let (x, y) = pair.split_once(',').ok_or_else(|| bad("expected x,y"))?;
                let x = x.trim().parse::<f64>().map_err(|_| bad("bad x coordinate"))?;
                let y = y.trim().parse::<f64>().map_err(|_| bad("bad y coordinate"))?;
                Ok((x, y))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Polygon::new(vertices).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}
