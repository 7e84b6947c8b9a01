//! Planar centerline geometry: straight segments and circular arcs,
//! parameterized by arc length.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// Rotates the point about the origin by `angle` radians (counter-clockwise).
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line {
        from: Point,
        to: Point,
    },
    /// Counter-clockwise for positive `sweep`.
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to } => from.dist(to),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point at distance `d` from the segment start; `d` may fall outside
    /// `[0, length]`, in which case straight lines are extrapolated.
    pub fn point_at(&self, d: f64) -> Point {
        match *self {
            Segment::Line { from, to } => {
                let len = from.dist(to);
                if len == 0.0 {
                    return from;
                }
                let f = d / len;
                Point::new(from.x + f * (to.x - from.x), from.y + f * (to.y - from.y))
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let theta = start_angle + sweep.signum() * d / radius;
                Point::new(center.x + radius * theta.cos(), center.y + radius * theta.sin())
            }
        }
    }

    pub fn end(&self) -> Point {
        self.point_at(self.length())
    }

    pub fn rotated(&self, angle: f64) -> Segment {
        match *self {
            Segment::Line { from, to } => Segment::Line {
                from: from.rotated(angle),
                to: to.rotated(angle),
            },
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => Segment::Arc {
                center: center.rotated(angle),
                radius,
                start_angle: start_angle + angle,
                sweep,
            },
        }
    }
}

/// Chain of segments with an arc-length origin that may be shifted into the
/// first segment (used to place arc position 0 at the negotiation-zone start).
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    offset: f64,
    raw_length: f64,
}

impl Centerline {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for seg in &segments {
            starts.push(acc);
            acc += seg.length();
        }
        Centerline {
            segments,
            starts,
            offset: 0.0,
            raw_length: acc,
        }
    }

    /// Moves arc position 0 to raw arc position `offset`.
    pub fn with_origin(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    /// Length from the (shifted) origin to the end of the last segment.
    pub fn length(&self) -> f64 {
        self.raw_length - self.offset
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn point_at(&self, s: f64) -> Point {
        let raw = s + self.offset;
        let idx = self.starts.iter().rposition(|&st| st <= raw).unwrap_or(0);
        self.segments[idx].point_at(raw - self.starts[idx])
    }
}

/// Oriented rectangle; `heading` is the direction of the `length` side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub center: Point,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl Rect {
    pub fn axis_aligned(x0: f64, x1: f64, y0: f64, y1: f64) -> Rect {
        Rect {
            center: Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
            length: (x1 - x0).abs(),
            width: (y1 - y0).abs(),
            heading: 0.0,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        let local = Point::new(p.x - self.center.x, p.y - self.center.y).rotated(-self.heading);
        local.x.abs() <= 0.5 * self.length && local.y.abs() <= 0.5 * self.width
    }

    pub fn corners(&self) -> [Point; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)].map(|(x, y)| {
            let r = Point::new(x, y).rotated(self.heading);
            Point::new(r.x + self.center.x, r.y + self.center.y)
        })
    }

    pub fn rotated(&self, angle: f64) -> Rect {
        Rect {
            center: self.center.rotated(angle),
            heading: self.heading + angle,
            ..*self
        }
    }

    /// Separating-axis overlap test with a small tolerance so that rectangles
    /// sharing an edge do not count as overlapping.
    pub fn overlaps(&self, other: &Rect) -> bool {
        const TOL: f64 = 1e-6;
        let a = self.corners();
        let b = other.corners();
        for heading in [
            self.heading,
            self.heading + PI / 2.0,
            other.heading,
            other.heading + PI / 2.0,
        ] {
            let axis = Point::new(heading.cos(), heading.sin());
            let proj = |pts: &[Point; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.x * axis.x + p.y * axis.y;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&a);
            let (b0, b1) = proj(&b);
            if a1 <= b0 + TOL || b1 <= a0 + TOL {
                return false;
            }
        }
        true
    }
}

/// Finds the arc positions in `[from, to]` where `inside` flips, sampled at
/// `step` and refined by bisection.
pub fn membership_changes(
    line: &Centerline,
    from: f64,
    to: f64,
    step: f64,
    inside: impl Fn(Point) -> bool,
) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    let mut prev_s = from;
    let mut prev = inside(line.point_at(from));
    if prev {
        out.push((from, true));
    }
    let n = ((to - from) / step).ceil() as usize;
    for i in 1..=n {
        let s = (from + i as f64 * step).min(to);
        let cur = inside(line.point_at(s));
        if cur != prev {
            let (mut lo, mut hi) = (prev_s, s);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if inside(line.point_at(mid)) == prev {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push((0.5 * (lo + hi), cur));
            prev = cur;
        }
        prev_s = s;
    }
    out
}
