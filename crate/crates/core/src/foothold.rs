//! Foothold tracks along a lane and the egocentric polar prior fed to the policy.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::{EdgeDistanceField, Terrain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FootholdConfig {
    pub d_safe: f64,
    pub spacing: f64,
    pub snap_radius: f64,
    /// Arrival threshold, shared with the sparse foothold reward.
    pub eps: f64,
    /// How far the base may pass the current foothold before it is skipped.
    pub overfly: f64,
    /// Use 3D distances for `d_L`/`d_R`; horizontal-plane otherwise.
    pub distance_3d: bool,
    /// Height jump between neighboring cells that marks an edge.
    pub h_edge: f64,
}

impl Default for FootholdConfig {
    fn default() -> Self {
        Self {
            d_safe: 0.1,
            spacing: 1.0,
            snap_radius: 0.5,
            eps: 0.2,
            overfly: 0.3,
            distance_3d: true,
            h_edge: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Foothold {
    pub p: [f64; 3],
    pub on_wall: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootholdTrack {
    points: Vec<Foothold>,
    cursor: usize,
    /// Set once the last point has been reached or passed.
    exhausted: bool,
}

/// `f_t = (d_L, d_R, psi_t, psi_next)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarPrior {
    pub d_left: f64,
    pub d_right: f64,
    pub psi: f64,
    pub psi_next: f64,
}

impl PolarPrior {
    pub fn to_array(self) -> [f64; 4] {
        [self.d_left, self.d_right, self.psi, self.psi_next]
    }
}

/// Quantities the prior reads from the robot: base position and yaw, and the
/// world-frame positions of the front feet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForefootPose {
    pub base: [f64; 3],
    pub yaw: f64,
    pub left: [f64; 3],
    pub right: [f64; 3],
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

fn dist(a: [f64; 3], b: [f64; 3], three_d: bool) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = if three_d { a[2] - b[2] } else { 0.0 };
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn bearing(base: [f64; 3], yaw: f64, p: [f64; 3]) -> f64 {
    wrap_angle((p[1] - base[1]).atan2(p[0] - base[0]) - yaw)
}

/// Nearest cell center to `(x, y)` within `radius` that passes `ok`. The query's own
/// cell short-circuits and keeps the original point.
fn snap(terrain: &Terrain, x: f64, y: f64, radius: f64, ok: impl Fn(usize, usize) -> bool) -> Option<(f64, f64)> {
    let hf = &terrain.hf;
    if let Some((i, j)) = hf.cell_of(x, y) {
        if ok(i, j) {
            return Some((x, y));
        }
    }
    let cs = hf.cell_size();
    let o = hf.origin();
    let r = (radius / cs).ceil() as isize + 1;
    let ci = ((x - o[0]) / cs).floor() as isize;
    let cj = ((y - o[1]) / cs).floor() as isize;
    let mut best: Option<(f64, (f64, f64))> = None;
    for i in (ci - r)..=(ci + r) {
        if i < 0 || i >= hf.rows() as isize {
            continue;
        }
        for j in (cj - r)..=(cj + r) {
            if j < 0 || j >= hf.cols() as isize {
                continue;
            }
            let (cx, cy) = hf.cell_center(i as usize, j as usize);
            let d2 = (cx - x).powi(2) + (cy - y).powi(2);
            if d2 > radius * radius || !ok(i as usize, j as usize) {
                continue;
            }
            if best.map_or(true, |(b, _)| d2 < b) {
                best = Some((d2, (cx, cy)));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Builds the foothold sequence for a lane: regular candidates along the centerline
/// plus one per inclined wall band, each snapped onto a safe cell or dropped.
pub fn build_track(terrain: &Terrain, edf: &EdgeDistanceField, cfg: &FootholdConfig) -> Result<FootholdTrack> {
    if !(cfg.d_safe >= 0.0 && cfg.spacing > 0.0 && cfg.snap_radius >= 0.0) {
        return Err(Error::InvalidSpec("foothold spacing must be positive and d_safe, snap radius nonnegative".into()));
    }
    let hf = &terrain.hf;
    let safe = |i: usize, j: usize| edf.at(i, j) > cfg.d_safe && !terrain.is_pit(hf.at(i, j));
    let on_wall_cell = |i: usize, j: usize| {
        let (x, y) = hf.cell_center(i, j);
        terrain.on_wall(x, y)
    };

    let mut walls = Vec::new();
    for band in &terrain.walls {
        let (cx, cy) = band.center();
        let inside = |i: usize, j: usize| {
            let (x, y) = hf.cell_center(i, j);
            band.contains(x, y) && on_wall_cell(i, j) && safe(i, j)
        };
        if let Some((x, y)) = snap(terrain, cx, cy, cfg.snap_radius, inside) {
            walls.push(Foothold {
                p: [x, y, hf.sample_clamped(x, y)],
                on_wall: true,
            });
        }
    }

    let (ex, _) = hf.extent();
    let pad = terrain.start_x * 2.0;
    let mut regular = Vec::new();
    let mut x = hf.origin()[0] + pad;
    while x < hf.origin()[0] + ex - 0.5 * pad {
        if let Some((sx, sy)) = snap(terrain, x, terrain.center_y, cfg.snap_radius, |i, j| {
            safe(i, j) && !on_wall_cell(i, j)
        }) {
            let near_wall = walls
                .iter()
                .any(|w| ((w.p[0] - sx).powi(2) + (w.p[1] - sy).powi(2)).sqrt() < 0.25);
            if !near_wall {
                regular.push(Foothold {
                    p: [sx, sy, hf.sample_clamped(sx, sy)],
                    on_wall: false,
                });
            }
        }
        x += cfg.spacing;
    }

    let mut points: Vec<Foothold> = walls.into_iter().chain(regular).collect();
    points.sort_by(|a, b| a.p[0].total_cmp(&b.p[0]));
    let mut track: Vec<Foothold> = Vec::with_capacity(points.len());
    for p in points {
        match track.last() {
            Some(last) if p.p[0] <= last.p[0] => {
                // Keep the wall point when a regular one lands on the same x.
                if p.on_wall && !last.on_wall {
                    track.pop();
                    track.push(p);
                }
            }
            _ => track.push(p),
        }
    }
    if track.is_empty() {
        return Err(Error::NoFootholds(format!(
            "{} level {} seed {}: no candidate passed the d_safe = {} filter",
            terrain.spec.family.name(),
            terrain.spec.level,
            terrain.spec.seed,
            cfg.d_safe
        )));
    }
    Ok(FootholdTrack::new(track))
}

impl FootholdTrack {
    /// Panics on an empty point list.
    pub fn new(points: Vec<Foothold>) -> Self {
        assert!(!points.is_empty(), "foothold track needs at least one point");
        Self {
            points,
            cursor: 0,
            exhausted: false,
        }
    }

    pub fn points(&self) -> &[Foothold] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the last point.
    pub fn last_index(&self) -> usize {
        self.points.len() - 1
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn current(&self) -> Foothold {
        self.points[self.cursor]
    }

    pub fn next(&self) -> Foothold {
        self.points[(self.cursor + 1).min(self.last_index())]
    }

    /// Puts the cursor on the first point ahead of `x`.
    pub fn seek(&mut self, x: f64) {
        self.exhausted = false;
        self.cursor = self
            .points
            .iter()
            .position(|p| p.p[0] > x)
            .unwrap_or(self.last_index());
    }

    pub fn prior(&self, pose: &ForefootPose, distance_3d: bool) -> PolarPrior {
        let p = self.current().p;
        PolarPrior {
            d_left: dist(pose.left, p, distance_3d),
            d_right: dist(pose.right, p, distance_3d),
            psi: bearing(pose.base, pose.yaw, p),
            psi_next: bearing(pose.base, pose.yaw, self.next().p),
        }
    }

    /// Moves the cursor forward on arrival (both front feet within `eps`) or when the
    /// base has passed the current point by more than `overfly` along `+x`. Returns
    /// the arrival flag. The cursor saturates at the last point.
    pub fn advance(&mut self, pose: &ForefootPose, cfg: &FootholdConfig) -> bool {
        if self.exhausted {
            return false;
        }
        let prior = self.prior(pose, cfg.distance_3d);
        let arrived = prior.d_left < cfg.eps && prior.d_right < cfg.eps;
        let passed = pose.base[0] - self.current().p[0] > cfg.overfly;
        if arrived || passed {
            if self.cursor == self.last_index() {
                self.exhausted = true;
            } else {
                self.cursor += 1;
            }
        }
        arrived
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for f in &self.points {
            writeln!(w, "{} {} {} {}", f.p[0], f.p[1], f.p[2], u8::from(f.on_wall))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() {
                continue;
            }
            if tok.len() != 4 {
                return Err(Error::Parse(format!("track line {n}: expected `x y z on_wall`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("track line {n}: bad number `{s}`")));
            let on_wall = match tok[3] {
                "0" => false,
                "1" => true,
                s => return Err(Error::Parse(format!("track line {n}: on_wall must be 0 or 1, got `{s}`"))),
            };
            points.push(Foothold {
                p: [num(tok[0])?, num(tok[1])?, num(tok[2])?],
                on_wall,
            });
        }
        if points.is_empty() {
            return Err(Error::Parse("empty track".into()));
        }
        Ok(Self::new(points))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(base: [f64; 3], yaw: f64) -> ForefootPose {
        ForefootPose {
            base,
            yaw,
            left: base,
            right: base,
        }
    }

    #[test]
    fn bearing_quarter_turn() {
        let t = FootholdTrack::new(vec![Foothold {
            p: [1.0, 1.0, 0.0],
            on_wall: false,
        }]);
        let f = t.prior(&pose([0.0; 3], 0.0), true);
        assert!((f.psi - PI / 4.0).abs() < 1e-15);
        assert_eq!(f.psi_next, f.psi);
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn overfly_skips_without_arrival() {
        let pts = (0..3)
            .map(|i| Foothold {
                p: [i as f64, 0.0, 0.0],
                on_wall: false,
            })
            .collect();
        let mut t = FootholdTrack::new(pts);
        let mut p = pose([0.5, 0.0, 0.3], 0.0);
        p.left = [0.4, 0.0, 0.0];
        p.right = [0.6, 0.0, 0.0];
        assert!(!t.advance(&p, &FootholdConfig::default()));
        assert_eq!(t.cursor(), 1);
    }

    #[test]
    fn track_text_round_trip() {
        let t = FootholdTrack::new(vec![
            Foothold {
                p: [1.0, 2.0, 0.01],
                on_wall: false,
            },
            Foothold {
                p: [2.5, 2.45, 0.24],
                on_wall: true,
            },
        ]);
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().nth(1), Some("2.5 2.45 0.24 1"));
        assert_eq!(FootholdTrack::read_text(buf.as_slice()).unwrap(), t);
    }
}
