//! Depth rendering against the heightfield, the delayed depth frame buffer, and
//! assembly of the actor and critic observation vectors.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foothold::{FootholdTrack, PolarPrior};
use crate::sim::{RobotState, SimConfig, FRONT_LEFT, FRONT_RIGHT, NUM_FEET};
use crate::terrain::{sample_local_grid, BasePose, GridSpec, Heightfield};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub march_step: f64,
    pub bisection_steps: usize,
    /// Mount point in the base frame.
    pub mount: [f64; 3],
    /// Downward tilt relative to the base.
    pub pitch_deg: f64,
    /// Control steps between fresh frames.
    pub period: usize,
    /// Frames kept in the depth stack.
    pub history: usize,
    /// Per-episode frame delay is drawn from `0..=max_delay` control steps.
    pub max_delay: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            hfov_deg: 87.0,
            z_min: 0.1,
            z_max: 3.0,
            march_step: 0.02,
            bisection_steps: 8,
            mount: [0.275, 0.0, 0.05],
            pitch_deg: 30.0,
            period: 5,
            history: 2,
            max_delay: 2,
        }
    }
}

impl CameraConfig {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.history == 0 || self.period == 0 {
            return Err(Error::Config("camera resolution, history and period must be positive".into()));
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min && self.march_step > 0.0) {
            return Err(Error::Config("depth clip range must satisfy 0 < z_min < z_max".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::Config("hfov must be in (0, 180) degrees".into()));
        }
        Ok(())
    }
}

/// Camera frame: `+x` optical axis, `+y` left, `+z` up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl CameraPose {
    pub fn on_robot(state: &RobotState, cfg: &CameraConfig) -> Self {
        let mount = Vector3::from(cfg.mount);
        let tilt = UnitQuaternion::from_euler_angles(0.0, cfg.pitch_deg.to_radians(), 0.0);
        Self {
            position: state.pos + state.orientation.transform_vector(&mount),
            orientation: state.orientation * tilt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Row-major meters; row 0 is the top of the image.
    pub values: Vec<f64>,
    pub timestamp: usize,
}

impl DepthImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Linear map of the clip range onto `[0, 1]`.
    pub fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        let span = self.z_max - self.z_min;
        self.values.iter().map(move |d| (d - self.z_min) / span)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "DPTH {} {} {} {}", self.width, self.height, self.z_min, self.z_max)?;
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.at(r, c).to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty depth file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != "DPTH" {
            return Err(Error::Parse(format!("bad depth header `{header}`")));
        }
        let bad = |s: &str| Error::Parse(format!("cannot parse `{s}`"));
        let width: usize = f[1].parse().map_err(|_| bad(f[1]))?;
        let height: usize = f[2].parse().map_err(|_| bad(f[2]))?;
        let z_min: f64 = f[3].parse().map_err(|_| bad(f[3]))?;
        let z_max: f64 = f[4].parse().map_err(|_| bad(f[4]))?;
        let mut values = Vec::with_capacity(width * height);
        for line in lines {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| bad(tok))?);
            }
        }
        if values.len() != width * height {
            return Err(Error::Parse(format!("expected {} depth values, got {}", width * height, values.len())));
        }
        Ok(Self {
            width,
            height,
            z_min,
            z_max,
            values,
            timestamp: 0,
        })
    }
}

/// Distance along a unit ray to the heightfield, clamped to the clip range. Misses,
/// including rays that leave the field, return `z_max`.
pub fn cast_ray(hf: &Heightfield, origin: &Vector3<f64>, dir: &Vector3<f64>, cfg: &CameraConfig) -> f64 {
    let gap = |t: f64| -> Option<f64> {
        let p = origin + dir * t;
        if !hf.contains(p.x, p.y) {
            return None;
        }
        Some(p.z - hf.sample_clamped(p.x, p.y))
    };
    if gap(0.0).is_some_and(|g| g <= 0.0) {
        return cfg.z_min;
    }
    let top = hf.max_height();
    let mut t = 0.0;
    if origin.z > top {
        if dir.z >= 0.0 {
            return cfg.z_max;
        }
        t = (origin.z - top) / -dir.z;
    }
    let mut prev = t;
    let mut entered = false;
    while t <= cfg.z_max {
        match gap(t) {
            None if entered => return cfg.z_max,
            None => {}
            Some(g) if g <= 0.0 => {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..cfg.bisection_steps {
                    let mid = 0.5 * (lo + hi);
                    match gap(mid) {
                        Some(g) if g <= 0.0 => hi = mid,
                        _ => lo = mid,
                    }
                }
                return (0.5 * (lo + hi)).clamp(cfg.z_min, cfg.z_max);
            }
            Some(_) => entered = true,
        }
        prev = t;
        t += cfg.march_step;
    }
    cfg.z_max
}

/// Camera-frame ray direction through the center of pixel `(row, col)`.
pub fn pixel_ray(cfg: &CameraConfig, row: usize, col: usize) -> Vector3<f64> {
    let f = cfg.focal();
    let u = col as f64 + 0.5 - 0.5 * cfg.width as f64;
    let v = row as f64 + 0.5 - 0.5 * cfg.height as f64;
    Vector3::new(f, -u, -v).normalize()
}

pub fn render_depth(hf: &Heightfield, pose: &CameraPose, cfg: &CameraConfig, timestamp: usize) -> DepthImage {
    let mut values = Vec::with_capacity(cfg.pixels());
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let dir = pose.orientation.transform_vector(&pixel_ray(cfg, row, col));
            values.push(cast_ray(hf, &pose.position, &dir, cfg));
        }
    }
    DepthImage {
        width: cfg.width,
        height: cfg.height,
        z_min: cfg.z_min,
        z_max: cfg.z_max,
        values,
        timestamp,
    }
}

/// Depth frames rendered every `period` control steps and delivered `delay` steps
/// later. The first frame fills every slot immediately.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthPipeline {
    period: usize,
    delay: usize,
    slots: VecDeque<DepthImage>,
    pending: VecDeque<DepthImage>,
}

impl DepthPipeline {
    pub fn new(cfg: &CameraConfig, delay: usize) -> Self {
        Self {
            period: cfg.period,
            delay,
            slots: VecDeque::with_capacity(cfg.history),
            pending: VecDeque::new(),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Advances to control step `step`, rendering through `render` when a frame is due.
    pub fn update(&mut self, step: usize, history: usize, render: impl FnOnce() -> DepthImage) {
        if step % self.period == 0 {
            let frame = render();
            if self.slots.is_empty() {
                for _ in 0..history {
                    self.slots.push_back(frame.clone());
                }
                return;
            }
            self.pending.push_back(frame);
        }
        while self.pending.front().is_some_and(|f| f.timestamp + self.delay <= step) {
            let f = self.pending.pop_front().expect("front checked");
            self.slots.pop_front();
            self.slots.push_back(f);
        }
    }

    /// Frames from oldest to newest.
    pub fn frames(&self) -> impl Iterator<Item = &DepthImage> {
        self.slots.iter()
    }

    pub fn newest(&self) -> Option<&DepthImage> {
        self.slots.back()
    }

    /// Normalized stack, `history * pixels` values, oldest frame first.
    pub fn stack(&self) -> Vec<f32> {
        self.slots.iter().flat_map(|f| f.normalized().map(|v| v as f32)).collect()
    }
}

pub const OBS_DIM: usize = 45;
pub const PRIV_DIM: usize = 60;

/// Offsets of each block inside the 45-dim observation.
pub mod layout {
    use std::ops::Range;
    pub const OMEGA: Range<usize> = 0..3;
    pub const GRAVITY: Range<usize> = 3..6;
    pub const COMMAND: Range<usize> = 6..9;
    pub const FOOT_OFFSET: Range<usize> = 9..21;
    pub const FOOT_VEL: Range<usize> = 21..33;
    pub const PREV_ACTION: Range<usize> = 33..45;
    /// Inside the privileged vector, after the observation.
    pub const BASE_VEL: Range<usize> = 45..48;
    pub const FOOTHOLD: Range<usize> = 48..51;
    pub const FOOTHOLD_NEXT: Range<usize> = 51..54;
    pub const FOREFEET: Range<usize> = 54..60;
}

/// Uniform additive noise amplitude per observation block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub omega: f64,
    pub gravity: f64,
    pub foot_offset: f64,
    pub foot_vel: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.omega == 0.0 && self.gravity == 0.0 && self.foot_offset == 0.0 && self.foot_vel == 0.0
    }
}

/// `o_t`: body angular velocity, gravity in body, command, foot offsets, foot offset
/// velocities, previous action.
pub fn assemble_observation<R: Rng>(
    state: &RobotState,
    command: [f64; 3],
    prev_action: &[f64],
    noise: &NoiseConfig,
    rng: &mut R,
) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    o[layout::OMEGA].copy_from_slice(state.omega.as_slice());
    o[layout::GRAVITY].copy_from_slice(state.gravity_in_body().as_slice());
    o[layout::COMMAND].copy_from_slice(&command);
    for f in 0..NUM_FEET {
        o[9 + 3 * f..12 + 3 * f].copy_from_slice(state.foot_offset[f].as_slice());
        o[21 + 3 * f..24 + 3 * f].copy_from_slice(state.foot_vel[f].as_slice());
    }
    o[layout::PREV_ACTION].copy_from_slice(&prev_action[..12]);
    if !noise.is_zero() {
        let mut add = |r: std::ops::Range<usize>, a: f64| {
            if a > 0.0 {
                for v in &mut o[r] {
                    *v += rng.gen_range(-a..=a);
                }
            }
        };
        add(layout::OMEGA, noise.omega);
        add(layout::GRAVITY, noise.gravity);
        add(layout::FOOT_OFFSET, noise.foot_offset);
        add(layout::FOOT_VEL, noise.foot_vel);
    }
    o
}

fn to_base(state: &RobotState, p: [f64; 3]) -> Vector3<f64> {
    state.orientation.inverse_transform_vector(&(Vector3::from(p) - state.pos))
}

/// `s_t = [o_t, v_t, p_t, p_{t+1}, x_t]` with footholds and forefeet in the base frame.
pub fn privileged_state(obs: &[f64; OBS_DIM], state: &RobotState, sim: &SimConfig, track: &FootholdTrack) -> [f64; PRIV_DIM] {
    let mut s = [0.0; PRIV_DIM];
    s[..OBS_DIM].copy_from_slice(obs);
    s[layout::BASE_VEL].copy_from_slice(state.body_velocity().as_slice());
    s[layout::FOOTHOLD].copy_from_slice(to_base(state, track.current().p).as_slice());
    s[layout::FOOTHOLD_NEXT].copy_from_slice(to_base(state, track.next().p).as_slice());
    for (k, foot) in [FRONT_LEFT, FRONT_RIGHT].into_iter().enumerate() {
        let x = state.foot_body(sim, foot);
        s[54 + 3 * k..57 + 3 * k].copy_from_slice(x.as_slice());
    }
    s
}

/// Footholds `p_t`, `p_{t+1}` in the base frame, the target of the Cartesian variants.
pub fn cartesian_targets(state: &RobotState, track: &FootholdTrack) -> [f64; 6] {
    let a = to_base(state, track.current().p);
    let b = to_base(state, track.next().p);
    [a.x, a.y, a.z, b.x, b.y, b.z]
}

pub fn height_grid(hf: &Heightfield, state: &RobotState, grid: &GridSpec) -> Vec<f64> {
    let pose = BasePose {
        x: state.pos.x,
        y: state.pos.y,
        z: state.pos.z,
        yaw: state.yaw(),
    };
    sample_local_grid(hf, pose, grid)
}

/// Ground-truth prior exactly as the foothold module computes it.
pub fn prior_truth(state: &RobotState, sim: &SimConfig, track: &FootholdTrack, distance_3d: bool) -> PolarPrior {
    track.prior(&state.forefoot_pose(sim), distance_3d)
}
