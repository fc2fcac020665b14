//! Reduced-order quadruped: a rigid box base with four massless point feet whose
//! base-frame offsets track action targets through a first-order spring-damper law.
//! Feet and base sample points touch the heightfield through penalty springs with
//! anchored (stick-slip) Coulomb friction.

use std::io::Write;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foothold::ForefootPose;
use crate::terrain::Terrain;

pub const NUM_FEET: usize = 4;
pub const ACTION_DIM: usize = 12;
/// Foot order: front-left, front-right, rear-left, rear-right.
pub const FRONT_LEFT: usize = 0;
pub const FRONT_RIGHT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub decimation: usize,
    pub gravity: f64,
    pub mass: f64,
    pub base_size: [f64; 3],
    pub stance_height: f64,
    /// Hip positions in the base frame are `(±hip_x, ±hip_y, 0)`.
    pub hip_x: f64,
    pub hip_y: f64,
    /// Half-extents of the foot offset workspace; unit actions map onto it.
    pub workspace: [f64; 3],
    pub leg_p: f64,
    pub leg_d: f64,
    pub k_n: f64,
    pub c_n: f64,
    pub k_t: f64,
    pub c_t: f64,
    pub mu_ground: f64,
    pub mu_wall: f64,
    pub linear_drag: f64,
    pub angular_drag: f64,
    /// Roll/pitch stabilization applied through stance legs (zero in flight).
    pub posture_kp: f64,
    pub posture_kd: f64,
    /// Yaw-rate damping applied through stance legs.
    pub yaw_kd: f64,
    /// Cap on the foot-offset speed relative to the hip.
    pub max_foot_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            decimation: 4,
            gravity: 9.81,
            mass: 12.0,
            base_size: [0.55, 0.30, 0.20],
            stance_height: 0.30,
            hip_x: 0.20,
            hip_y: 0.12,
            workspace: [0.20, 0.10, 0.15],
            leg_p: 20.0,
            leg_d: 0.5,
            k_n: 5000.0,
            c_n: 50.0,
            k_t: 2000.0,
            c_t: 30.0,
            mu_ground: 0.8,
            mu_wall: 0.6,
            linear_drag: 0.0,
            angular_drag: 0.05,
            posture_kp: 60.0,
            posture_kd: 8.0,
            yaw_kd: 20.0,
            max_foot_speed: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.decimation == 0 {
            return Err(Error::Config("sim dt must be positive and decimation at least 1".into()));
        }
        if !(self.mass > 0.0) || self.base_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mass and base dimensions must be positive".into()));
        }
        if !(self.leg_d > 0.0 && self.leg_p > 0.0) {
            return Err(Error::Config("leg gains must be positive".into()));
        }
        Ok(())
    }

    pub fn control_dt(&self) -> f64 {
        self.dt * self.decimation as f64
    }

    pub fn nominal_foot(&self, foot: usize) -> Vector3<f64> {
        let sx = if foot < 2 { 1.0 } else { -1.0 };
        let sy = if foot % 2 == 0 { 1.0 } else { -1.0 };
        Vector3::new(sx * self.hip_x, sy * self.hip_y, -self.stance_height)
    }

    pub fn inertia(&self) -> Vector3<f64> {
        let [a, b, c] = self.base_size;
        let k = self.mass / 12.0;
        Vector3::new(k * (b * b + c * c), k * (a * a + c * c), k * (a * a + b * b))
    }

    /// Base-frame sample points checked against the terrain: the eight box corners,
    /// the bottom face center and the front face center.
    pub fn box_points(&self) -> Vec<Vector3<f64>> {
        let [a, b, c] = self.base_size.map(|s| 0.5 * s);
        let mut pts = Vec::with_capacity(10);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    pts.push(Vector3::new(sx * a, sy * b, sz * c));
                }
            }
        }
        pts.push(Vector3::new(0.0, 0.0, -c));
        pts.push(Vector3::new(a, 0.0, 0.0));
        pts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pos: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub vel: Vector3<f64>,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
    pub foot_offset: [Vector3<f64>; NUM_FEET],
    pub foot_vel: [Vector3<f64>; NUM_FEET],
    pub contact: [bool; NUM_FEET],
    /// World-frame ground reaction at each foot.
    pub foot_force: [Vector3<f64>; NUM_FEET],
    anchors: [Option<Vector3<f64>>; NUM_FEET],
}

impl RobotState {
    pub fn at_rest(pos: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            pos,
            orientation,
            vel: Vector3::zeros(),
            omega: Vector3::zeros(),
            foot_offset: [Vector3::zeros(); NUM_FEET],
            foot_vel: [Vector3::zeros(); NUM_FEET],
            contact: [false; NUM_FEET],
            foot_force: [Vector3::zeros(); NUM_FEET],
            anchors: [None; NUM_FEET],
        }
    }

    /// `(roll, pitch, yaw)` with `R = Rz(yaw) Ry(pitch) Rx(roll)`; positive pitch is nose-down.
    pub fn rpy(&self) -> (f64, f64, f64) {
        self.orientation.euler_angles()
    }

    pub fn yaw(&self) -> f64 {
        self.rpy().2
    }

    /// World `-z` expressed in the base frame.
    pub fn gravity_in_body(&self) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0))
    }

    pub fn body_velocity(&self) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&self.vel)
    }

    /// World angular velocity.
    pub fn world_omega(&self) -> Vector3<f64> {
        self.orientation.transform_vector(&self.omega)
    }

    pub fn foot_body(&self, cfg: &SimConfig, foot: usize) -> Vector3<f64> {
        cfg.nominal_foot(foot) + self.foot_offset[foot]
    }

    pub fn foot_world(&self, cfg: &SimConfig, foot: usize) -> Vector3<f64> {
        self.pos + self.orientation.transform_vector(&self.foot_body(cfg, foot))
    }

    pub fn forefoot_pose(&self, cfg: &SimConfig) -> ForefootPose {
        let v = |p: Vector3<f64>| [p.x, p.y, p.z];
        ForefootPose {
            base: v(self.pos),
            yaw: self.yaw(),
            left: v(self.foot_world(cfg, FRONT_LEFT)),
            right: v(self.foot_world(cfg, FRONT_RIGHT)),
        }
    }

    pub fn is_finite(&self) -> bool {
        let all = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        all(&self.pos)
            && all(&self.vel)
            && all(&self.omega)
            && self.orientation.coords.iter().all(|x| x.is_finite())
            && self.foot_offset.iter().all(all)
            && self.foot_vel.iter().all(all)
    }

    pub fn kinetic_energy(&self, cfg: &SimConfig) -> f64 {
        let i = cfg.inertia();
        0.5 * cfg.mass * self.vel.norm_squared() + 0.5 * self.omega.component_mul(&self.omega).dot(&i)
    }

    pub fn potential_energy(&self, cfg: &SimConfig) -> f64 {
        cfg.mass * cfg.gravity * self.pos.z
    }
}

/// Aggregate contact information over the substeps of one control step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Base sample points touching the terrain at the last substep.
    pub n_col: usize,
    /// Largest total normal force on the base box over the substeps.
    pub collision_force: f64,
    /// Mean over substeps of `sum |F_foot . v_foot_rel|`.
    pub power: f64,
    /// True when no contact force acted in any substep.
    pub airborne: bool,
    /// Largest `|F_t| - mu F_n` seen; nonpositive when the friction cone held.
    pub cone_violation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Fell,
    Collided,
    Finished,
    Timeout,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }
}

/// Contact against the heightfield at world point `p` moving with velocity `v`.
/// Returns the force on the body with its normal and tangential magnitudes, or
/// `None` without penetration.
#[allow(clippy::too_many_arguments)]
fn contact_force(
    terrain: &Terrain,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    anchor: Option<&mut Option<Vector3<f64>>>,
    k_n: f64,
    c_n: f64,
    k_t: f64,
    c_t: f64,
    mu: f64,
) -> Option<(Vector3<f64>, f64, f64)> {
    let (h, [gx, gy]) = terrain.hf.sample_with_gradient(p.x, p.y);
    let n = Vector3::new(-gx, -gy, 1.0).normalize();
    let depth = (h - p.z) * n.z;
    if depth <= 0.0 {
        if let Some(a) = anchor {
            *a = None;
        }
        return None;
    }
    let vn = v.dot(&n);
    let fn_ = (k_n * depth - c_n * vn).max(0.0);
    let vt = v - vn * n;
    let limit = mu * fn_;
    let ft = match anchor {
        Some(slot) => {
            let a = *slot.get_or_insert(*p);
            let mut disp = p - a;
            disp -= disp.dot(&n) * n;
            let mut ft = -k_t * disp - c_t * vt;
            let mag = ft.norm();
            if mag > limit {
                ft *= limit / mag;
                // Slide the anchor so the spring alone sits on the cone.
                let dn = disp.norm();
                if dn > 0.0 {
                    *slot = Some(p - disp * ((limit / k_t).min(dn) / dn));
                }
            }
            ft
        }
        None => {
            let mut ft = -c_t * vt;
            let mag = ft.norm();
            if mag > limit {
                ft *= limit / mag;
            }
            ft
        }
    };
    Some((fn_ * n + ft, fn_, ft.norm()))
}

/// Advances the state by one control step (`decimation` substeps).
pub fn step(cfg: &SimConfig, state: &mut RobotState, action: &[f64], terrain: &Terrain) -> Result<StepReport> {
    if action.len() != ACTION_DIM {
        return Err(Error::Simulation(format!("action has {} entries, expected {ACTION_DIM}", action.len())));
    }
    let target: [Vector3<f64>; NUM_FEET] = std::array::from_fn(|f| {
        Vector3::from_fn(|k, _| action[3 * f + k].clamp(-1.0, 1.0) * cfg.workspace[k])
    });
    let inertia = cfg.inertia();
    let rate = cfg.leg_p / cfg.leg_d;
    let g = Vector3::new(0.0, 0.0, -cfg.gravity);
    let box_pts = cfg.box_points();
    let mut report = StepReport {
        airborne: true,
        cone_violation: f64::NEG_INFINITY,
        ..Default::default()
    };

    for _ in 0..cfg.decimation {
        for f in 0..NUM_FEET {
            let mut vel = (target[f] - state.foot_offset[f]) * rate;
            let speed = vel.norm();
            if speed > cfg.max_foot_speed {
                vel *= cfg.max_foot_speed / speed;
            }
            let next = state.foot_offset[f] + vel * cfg.dt;
            state.foot_offset[f] = Vector3::from_fn(|k, _| next[k].clamp(-cfg.workspace[k], cfg.workspace[k]));
            state.foot_vel[f] = vel;
        }

        let rot = state.orientation;
        let mut force = Vector3::zeros();
        let mut torque = Vector3::zeros();
        let mut power = 0.0;
        for f in 0..NUM_FEET {
            let r = state.foot_body(cfg, f);
            let p = state.pos + rot.transform_vector(&r);
            let rel = rot.transform_vector(&state.foot_vel[f]);
            let v = state.vel + rot.transform_vector(&state.omega.cross(&r)) + rel;
            let mu = if terrain.on_wall(p.x, p.y) { cfg.mu_wall } else { cfg.mu_ground };
            match contact_force(terrain, &p, &v, Some(&mut state.anchors[f]), cfg.k_n, cfg.c_n, cfg.k_t, cfg.c_t, mu) {
                Some((fw, fn_, ft)) => {
                    report.cone_violation = report.cone_violation.max(ft - mu * fn_);
                    report.airborne = false;
                    state.contact[f] = fn_ > 0.0;
                    state.foot_force[f] = fw;
                    force += fw;
                    torque += r.cross(&rot.inverse_transform_vector(&fw));
                    power += fw.dot(&rel).abs();
                }
                None => {
                    state.contact[f] = false;
                    state.foot_force[f] = Vector3::zeros();
                }
            }
        }

        let mut n_col = 0;
        let mut box_normal = 0.0;
        for r in &box_pts {
            let p = state.pos + rot.transform_vector(r);
            let v = state.vel + rot.transform_vector(&state.omega.cross(r));
            if let Some((fw, fn_, _)) = contact_force(terrain, &p, &v, None, cfg.k_n, cfg.c_n, cfg.k_t, cfg.c_t, cfg.mu_ground) {
                n_col += 1;
                box_normal += fn_;
                report.airborne = false;
                force += fw;
                torque += r.cross(&rot.inverse_transform_vector(&fw));
            }
        }
        report.n_col = n_col;
        report.collision_force = report.collision_force.max(box_normal);
        report.power += power / cfg.decimation as f64;

        let stance = state.contact.iter().filter(|&&c| c).count();
        if stance > 0 {
            let (roll, pitch, _) = state.orientation.euler_angles();
            let share = (stance as f64 / 2.0).min(1.0);
            torque.x -= share * (cfg.posture_kp * roll + cfg.posture_kd * state.omega.x);
            torque.y -= share * (cfg.posture_kp * pitch + cfg.posture_kd * state.omega.y);
            torque.z -= share * cfg.yaw_kd * state.omega.z;
        }

        let acc = force / cfg.mass + g - state.vel * (cfg.linear_drag / cfg.mass);
        state.vel += acc * cfg.dt;
        let w = state.omega;
        let iw = w.component_mul(&inertia);
        let alpha = (torque - w.cross(&iw) - w * cfg.angular_drag).component_div(&inertia);
        state.omega += alpha * cfg.dt;
        state.pos += state.vel * cfg.dt;
        state.orientation = state.orientation * UnitQuaternion::from_scaled_axis(state.omega * cfg.dt);

        if !state.is_finite() {
            return Err(Error::Simulation("state became non-finite".into()));
        }
    }
    debug_assert!(report.cone_violation <= 1e-9, "friction cone violated by {}", report.cone_violation);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub roll_limit: f64,
    pub pitch_limit: f64,
    /// Minimum base height above the terrain directly below it.
    pub height_floor: f64,
    /// Absolute base height below which the robot has fallen into a pit.
    pub pit_floor: f64,
    pub collision_force: f64,
    pub command: [f64; 3],
    pub init_rp_noise: f64,
    pub init_yaw_noise: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 750,
            roll_limit: 1.0,
            pitch_limit: 1.0,
            height_floor: 0.08,
            pit_floor: -0.4,
            collision_force: 120.0,
            command: [1.5, 0.0, 0.0],
            init_rp_noise: 0.02,
            init_yaw_noise: 0.05,
        }
    }
}

/// Places the robot at the start of the lane with every foot touching the terrain
/// and no foot below it.
pub fn reset<R: Rng>(cfg: &SimConfig, ep: &EpisodeConfig, terrain: &Terrain, rng: &mut R) -> Result<RobotState> {
    let x = terrain.start_x;
    let y = terrain.center_y;
    if !terrain.hf.contains(x, y) || terrain.finish_x <= x {
        return Err(Error::Simulation("terrain has no start pad ahead of the finish line".into()));
    }
    let sym = |r: &mut R, a: f64| if a > 0.0 { r.gen_range(-a..=a) } else { 0.0 };
    let roll = sym(rng, ep.init_rp_noise);
    let pitch = sym(rng, ep.init_rp_noise);
    let yaw = sym(rng, ep.init_yaw_noise);
    let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
    let mut z = f64::NEG_INFINITY;
    for f in 0..NUM_FEET {
        let r = q.transform_vector(&cfg.nominal_foot(f));
        let h = terrain.hf.sample_clamped(x + r.x, y + r.y);
        z = z.max(h - r.z);
    }
    Ok(RobotState::at_rest(Vector3::new(x, y, z), q))
}

pub fn check_termination(state: &RobotState, report: &StepReport, ep: &EpisodeConfig, terrain: &Terrain, steps: usize) -> Outcome {
    let (roll, pitch, _) = state.rpy();
    let ground = terrain.hf.sample_clamped(state.pos.x, state.pos.y);
    if !state.is_finite()
        || roll.abs() > ep.roll_limit
        || pitch.abs() > ep.pitch_limit
        || state.pos.z - ground < ep.height_floor
        || state.pos.z < ep.pit_floor
    {
        return Outcome::Fell;
    }
    if report.collision_force > ep.collision_force {
        return Outcome::Collided;
    }
    if state.pos.x >= terrain.finish_x {
        return Outcome::Finished;
    }
    if steps >= ep.max_steps {
        return Outcome::Timeout;
    }
    Outcome::Running
}

/// Open-loop diagonal trot: pairs (FL, RR) and (FR, RL) alternate between a stance
/// sweep from `+stride` to `-stride` and a lifted return swing. Inputs in action units.
pub fn trot_action(time: f64, freq: f64, stride: f64, lift: f64) -> [f64; ACTION_DIM] {
    use std::f64::consts::PI;
    let mut a = [0.0; ACTION_DIM];
    for f in 0..NUM_FEET {
        let shift = if f == 0 || f == 3 { 0.0 } else { PI };
        let p = (2.0 * PI * freq * time + shift).rem_euclid(2.0 * PI);
        let (x, z) = if p < PI {
            (stride * (1.0 - 2.0 * p / PI), -0.1)
        } else {
            let u = (p - PI) / PI;
            (stride * (2.0 * u - 1.0), lift * (PI * u).sin())
        };
        a[3 * f] = x;
        a[3 * f + 2] = z;
    }
    a
}

/// Rotation matrix of the base (world from body).
pub fn rotation(state: &RobotState) -> Matrix3<f64> {
    *state.orientation.to_rotation_matrix().matrix()
}

pub const TRAJ_MAGIC: &[u8; 5] = b"TRAJ1";

/// Column names of one trajectory record, in file order.
pub fn traj_columns() -> Vec<String> {
    let mut c: Vec<String> = ["step", "time", "x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for f in 0..NUM_FEET {
        for k in ["x", "y", "z"] {
            c.push(format!("off{f}_{k}"));
        }
    }
    for f in 0..NUM_FEET {
        for k in ["x", "y", "z"] {
            c.push(format!("force{f}_{k}"));
        }
    }
    for f in 0..NUM_FEET {
        c.push(format!("contact{f}"));
    }
    c.push("cursor".into());
    c
}

pub fn traj_record(step: usize, time: f64, state: &RobotState, cursor: usize) -> Vec<f64> {
    let (r, p, y) = state.rpy();
    let w = state.world_omega();
    let mut rec = vec![step as f64, time];
    rec.extend(state.pos.iter());
    rec.extend([r, p, y]);
    rec.extend(state.vel.iter());
    rec.extend(w.iter());
    for o in &state.foot_offset {
        rec.extend(o.iter());
    }
    for f in &state.foot_force {
        rec.extend(f.iter());
    }
    rec.extend(state.contact.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    rec.push(cursor as f64);
    rec
}

/// Binary layout: `TRAJ1`, u32 LE field count `n`, u32 LE record count, then each
/// record as `n` little-endian f64 in [`traj_columns`] order.
pub fn write_traj_binary<W: Write>(mut w: W, records: &[Vec<f64>]) -> std::io::Result<()> {
    let n = traj_columns().len();
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        assert_eq!(r.len(), n, "trajectory record width");
        for v in r {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_traj_csv<W: Write>(mut w: W, records: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(w, "{}", traj_columns().join(","))?;
    for r in records {
        let row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Heightfield;

    fn flat() -> Terrain {
        Terrain::from_heightfield(Heightfield::flat(200, 80, 0.05, 0.0).unwrap(), 2.0)
    }

    #[test]
    fn free_fall_matches_gravity() {
        let cfg = SimConfig::default();
        let mut s = RobotState::at_rest(Vector3::new(5.0, 2.0, 50.0), UnitQuaternion::identity());
        for _ in 0..25 {
            step(&cfg, &mut s, &[0.0; 12], &flat()).unwrap();
        }
        assert!((s.vel.z + cfg.gravity * 0.5).abs() < 1e-6, "{}", s.vel.z);
    }

    #[test]
    fn zero_gravity_keeps_velocity() {
        let cfg = SimConfig {
            gravity: 0.0,
            ..SimConfig::default()
        };
        let mut s = RobotState::at_rest(Vector3::new(5.0, 2.0, 5.0), UnitQuaternion::identity());
        s.vel = Vector3::new(0.3, -0.2, 0.1);
        for _ in 0..100 {
            step(&cfg, &mut s, &[0.0; 12], &flat()).unwrap();
        }
        assert_eq!(s.vel, Vector3::new(0.3, -0.2, 0.1));
    }

    #[test]
    fn nose_down_pitch_is_positive() {
        let s = RobotState::at_rest(Vector3::zeros(), UnitQuaternion::from_euler_angles(0.0, 0.3, 0.0));
        let nose = s.orientation.transform_vector(&Vector3::x());
        assert!(nose.z < 0.0);
        assert!((s.rpy().1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn traj_layout() {
        let s = RobotState::at_rest(Vector3::zeros(), UnitQuaternion::identity());
        let rec = traj_record(3, 0.06, &s, 1);
        assert_eq!(rec.len(), traj_columns().len());
        let mut buf = Vec::new();
        write_traj_binary(&mut buf, &[rec]).unwrap();
        assert_eq!(&buf[..5], TRAJ_MAGIC);
        assert_eq!(buf.len(), 5 + 8 + 8 * traj_columns().len());
    }
}
