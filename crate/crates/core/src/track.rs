//! Track centerlines built from straights and circular arcs.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

const CLOSURE_TOLERANCE: f64 = 1e-6;

const BUNDLED: [(&str, &str); 3] = [
    ("county", include_str!("../tracks/county.json")),
    ("imola", include_str!("../tracks/imola.json")),
    ("ring", include_str!("../tracks/ring.json")),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Straight(f64),
    /// Positive angles turn left.
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Straight(len) => len,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight(_) => 0.0,
            Segment::Arc { radius, angle } => angle.signum() / radius,
        }
    }

    fn heading_change(&self) -> f64 {
        match *self {
            Segment::Straight(_) => 0.0,
            Segment::Arc { angle, .. } => angle,
        }
    }
}

fn default_lane_count() -> usize {
    4
}

fn default_lane_width() -> f64 {
    3.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub segments: Vec<Segment>,
    #[serde(default = "default_lane_count")]
    pub lane_count: usize,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(default)]
    pub closed: bool,
    #[serde(default)]
    pub lane_marks: bool,
}

/// Position and heading of a centerline point in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    fn advance(&self, segment: &Segment, u: f64) -> Pose {
        let (sin, cos) = self.heading.sin_cos();
        match *segment {
            Segment::Straight(_) => Pose {
                x: self.x + u * cos,
                y: self.y + u * sin,
                heading: self.heading,
            },
            Segment::Arc { radius, angle } => {
                let side = angle.signum();
                let turned = side * u / radius;
                let (cx, cy) = (self.x - side * radius * sin, self.y + side * radius * cos);
                let heading = self.heading + turned;
                Pose {
                    x: cx + side * radius * heading.sin(),
                    y: cy - side * radius * heading.cos(),
                    heading,
                }
            }
        }
    }

    /// Point at signed lateral offset `d` (positive left).
    pub fn offset(&self, d: f64) -> (f64, f64) {
        let (sin, cos) = self.heading.sin_cos();
        (self.x - d * sin, self.y + d * cos)
    }
}

#[derive(Clone, Debug)]
pub struct Track {
    spec: TrackSpec,
    starts: Vec<f64>,
    poses: Vec<Pose>,
    length: f64,
}

impl Track {
    pub fn new(spec: TrackSpec) -> Result<Self> {
        if spec.segments.is_empty() {
            return Err(CoreError::Track("no segments".into()));
        }
        if spec.lane_count == 0 || spec.lane_width.is_nan() || spec.lane_width <= 0.0 {
            return Err(CoreError::Track("lane_count and lane_width must be positive".into()));
        }
        for seg in &spec.segments {
            let ok = match *seg {
                Segment::Straight(len) => len > 0.0 && len.is_finite(),
                Segment::Arc { radius, angle } => {
                    radius > spec.lane_count as f64 * spec.lane_width / 2.0
                        && angle != 0.0
                        && angle.is_finite()
                        && radius.is_finite()
                }
            };
            if !ok {
                return Err(CoreError::Track(format!("degenerate segment {seg:?}")));
            }
        }
        let mut starts = Vec::with_capacity(spec.segments.len());
        let mut poses = Vec::with_capacity(spec.segments.len() + 1);
        let mut pose = Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        };
        let mut s = 0.0;
        for seg in &spec.segments {
            starts.push(s);
            poses.push(pose);
            pose = pose.advance(seg, seg.length());
            s += seg.length();
        }
        poses.push(pose);
        if spec.closed {
            let turn: f64 = spec.segments.iter().map(Segment::heading_change).sum();
            let residual = (turn / TAU - (turn / TAU).round()).abs() * TAU;
            let gap = pose.x.hypot(pose.y);
            if residual > 1e-9 || gap > CLOSURE_TOLERANCE {
                return Err(CoreError::Track(format!(
                    "closed track does not close: heading residual {residual:.3e} rad, endpoint gap {gap:.3e} m"
                )));
            }
        }
        Ok(Track {
            spec,
            starts,
            poses,
            length: s,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Track::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading track {}", path.display()), e))?;
        Track::from_json(&text)
    }

    /// One of the tracks shipped with the crate: `county` (lane marks),
    /// `imola` and `ring`.
    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Track::from_json(text))
            .unwrap_or_else(|| Err(CoreError::UnknownTrack(name.to_string())))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// Resolves a bundled name first, then a path to a JSON file.
    pub fn resolve(reference: &str) -> Result<Self> {
        match Track::bundled(reference) {
            Err(CoreError::UnknownTrack(_)) if Path::new(reference).is_file() => {
                Track::load(Path::new(reference))
            }
            other => other,
        }
    }

    pub fn spec(&self) -> &TrackSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn closed(&self) -> bool {
        self.spec.closed
    }

    pub fn lane_count(&self) -> usize {
        self.spec.lane_count
    }

    pub fn lane_width(&self) -> f64 {
        self.spec.lane_width
    }

    pub fn lane_marks(&self) -> bool {
        self.spec.lane_marks
    }

    pub fn half_width(&self) -> f64 {
        self.spec.lane_count as f64 * self.spec.lane_width / 2.0
    }

    /// Center offset of lane `k` (1 = rightmost).
    pub fn lane_center(&self, k: usize) -> f64 {
        (k as f64 - 1.0 - self.spec.lane_count as f64 / 2.0 + 0.5) * self.spec.lane_width
    }

    /// Lane containing offset `d`, using half-open intervals
    /// `[(k-1-n/2)w, (k-n/2)w)`; `None` outside the road.
    pub fn lane_index(&self, d: f64) -> Option<usize> {
        let n = self.spec.lane_count as f64;
        let k = (d / self.spec.lane_width + n / 2.0).floor() + 1.0;
        (k >= 1.0 && k <= n).then_some(k as usize)
    }

    /// Wraps `s` into `[0, length)` on closed tracks; clamps on open ones.
    pub fn wrap(&self, s: f64) -> f64 {
        if self.spec.closed {
            s.rem_euclid(self.length)
        } else {
            s.clamp(0.0, self.length)
        }
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.starts.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }

    pub fn curvature(&self, s: f64) -> f64 {
        self.spec.segments[self.segment_at(self.wrap(s))].curvature()
    }

    pub fn pose(&self, s: f64) -> Pose {
        let s = self.wrap(s);
        let i = self.segment_at(s);
        self.poses[i].advance(&self.spec.segments[i], s - self.starts[i])
    }

    /// Frenet coordinates `(s, d)` of a world point, searching only segments
    /// overlapping `[near_s - behind, near_s + ahead]` along the centerline.
    pub fn to_frenet(&self, x: f64, y: f64, near_s: f64, behind: f64, ahead: f64) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for (i, seg) in self.spec.segments.iter().enumerate() {
            if !self.segment_near(i, near_s, behind, ahead) {
                continue;
            }
            let p0 = self.poses[i];
            let (sin, cos) = p0.heading.sin_cos();
            let (dx, dy) = (x - p0.x, y - p0.y);
            let hit = match *seg {
                Segment::Straight(len) => {
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    (0.0..=len).contains(&u).then_some((self.starts[i] + u, v))
                }
                Segment::Arc { radius, angle } => {
                    let side = angle.signum();
                    let (cx, cy) = (p0.x - side * radius * sin, p0.y + side * radius * cos);
                    let (qx, qy) = (x - cx, y - cy);
                    let dist = qx.hypot(qy);
                    let start_angle = (p0.y - cy).atan2(p0.x - cx);
                    let phi = (side * (qy.atan2(qx) - start_angle)).rem_euclid(TAU);
                    (phi <= angle.abs() && dist > 0.0).then(|| {
                        let d = if side > 0.0 { radius - dist } else { dist - radius };
                        (self.starts[i] + radius * phi, d)
                    })
                }
            };
            if let Some((s, d)) = hit {
                if best.is_none_or(|(_, bd)| d.abs() < bd.abs()) {
                    best = Some((s, d));
                }
            }
        }
        best
    }

    fn segment_near(&self, i: usize, near_s: f64, behind: f64, ahead: f64) -> bool {
        let lo = self.starts[i];
        let hi = lo + self.spec.segments[i].length();
        let (a, b) = (near_s - behind, near_s + ahead);
        if !self.spec.closed {
            return hi >= a && lo <= b;
        }
        [-self.length, 0.0, self.length]
            .iter()
            .any(|shift| hi + shift >= a && lo + shift <= b)
    }
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tracks_close() {
        for name in Track::bundled_names() {
            let t = Track::bundled(name).unwrap();
            let end = t.poses.last().unwrap();
            assert!(end.x.hypot(end.y) < CLOSURE_TOLERANCE, "{name}");
        }
    }

    #[test]
    fn open_gap_rejected() {
        let spec = TrackSpec {
            name: "bad".into(),
            segments: vec![Segment::Straight(10.0), Segment::Arc { radius: 20.0, angle: PI }],
            lane_count: 4,
            lane_width: 3.5,
            closed: true,
            lane_marks: false,
        };
        assert!(matches!(Track::new(spec), Err(CoreError::Track(_))));
    }

    #[test]
    fn frenet_round_trip() {
        let t = Track::bundled("ring").unwrap();
        for k in 0..200 {
            let s = k as f64 * t.length() / 200.0 + 0.3;
            for d in [-6.0, -1.75, 0.0, 2.5, 6.9] {
                let (x, y) = t.pose(s).offset(d);
                let (s2, d2) = t.to_frenet(x, y, s, 5.0, 5.0).unwrap();
                assert!((t.wrap(s2) - t.wrap(s)).abs() < 1e-6, "s {s} -> {s2}");
                assert!((d2 - d).abs() < 1e-6, "d {d} -> {d2}");
            }
        }
    }

    #[test]
    fn normalize_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
