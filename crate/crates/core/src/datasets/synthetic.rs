//! Ideal event camera flying over a textured plane.
//!
//! The plane sits at world `z = plane_depth` and carries a texture of
//! bright square cells on a dark background; intensity is bilinearly
//! interpolated between cell centres. Each pixel keeps a reference
//! log-intensity and emits an event every time the current value moves a
//! full contrast threshold away from it, with the timestamp interpolated
//! between simulation samples.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::poses::{euler_rates_to_body_rate, euler_zyx, PoseSample, VelocityRecord};
use crate::encoding::Event;
use crate::error::{Error, Result};

/// Constant world-frame linear velocity with linearly varying Euler angles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    /// Metres, world frame.
    pub p0: [f64; 3],
    /// m/s, world frame.
    pub v_world: [f64; 3],
    /// Initial (roll, pitch, yaw), radians.
    pub euler0: [f64; 3],
    /// (roll, pitch, yaw) rates, rad/s.
    pub euler_rate: [f64; 3],
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            p0: [0.0; 3],
            v_world: [0.0; 3],
            euler0: [0.0; 3],
            euler_rate: [0.0; 3],
        }
    }
}

impl Trajectory {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.p0) + Vector3::from(self.v_world) * t
    }

    pub fn euler(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|i| self.euler0[i] + self.euler_rate[i] * t)
    }

    pub fn orientation(&self, t: f64) -> UnitQuaternion<f64> {
        let [r, p, y] = self.euler(t);
        euler_zyx(r, p, y)
    }

    pub fn pose(&self, t: f64) -> PoseSample {
        PoseSample {
            t,
            position: self.position(t),
            orientation: self.orientation(t),
        }
    }

    /// Analytic ground truth at `t`.
    pub fn velocity(&self, t: f64) -> VelocityRecord {
        let v = self
            .orientation(t)
            .inverse_transform_vector(&Vector3::from(self.v_world));
        VelocityRecord {
            t,
            linear: [v.x, v.y, v.z],
            angular: self.euler_rate.map(f64::to_degrees),
            bin_index: 0,
        }
    }

    /// Body-frame angular velocity at `t`, rad/s.
    pub fn body_rate(&self, t: f64) -> Vector3<f64> {
        let [r, p, _] = self.euler(t);
        euler_rates_to_body_rate(Vector3::from(self.euler_rate), r, p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub sensor_w: usize,
    pub sensor_h: usize,
    /// Pixels.
    pub focal: f64,
    /// Principal point; the sensor centre when absent.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    /// Metres from the world origin along +z.
    pub plane_depth: f64,
    /// Side of one texture cell, metres.
    pub texture_cell: f64,
    /// Fraction of bright cells.
    pub texture_density: f64,
    pub dark: f64,
    pub bright: f64,
    /// Log-intensity change per event.
    pub contrast_threshold: f64,
    /// Simulation sampling interval, seconds.
    pub sim_dt: f64,
    /// Pose output interval, seconds.
    pub pose_dt: f64,
    pub trajectory: Trajectory,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            sensor_w: 64,
            sensor_h: 64,
            focal: 60.0,
            cx: None,
            cy: None,
            plane_depth: 2.0,
            texture_cell: 0.1,
            texture_density: 0.25,
            dark: 0.1,
            bright: 1.0,
            contrast_threshold: 0.2,
            sim_dt: 5e-4,
            pose_dt: 1e-3,
            trajectory: Trajectory::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal", self.focal),
            ("texture_cell", self.texture_cell),
            ("dark", self.dark),
            ("bright", self.bright),
            ("contrast_threshold", self.contrast_threshold),
            ("sim_dt", self.sim_dt),
            ("pose_dt", self.pose_dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sensor_w == 0
            || self.sensor_h == 0
            || self.sensor_w > usize::from(u16::MAX)
            || self.sensor_h > usize::from(u16::MAX)
        {
            return Err(Error::Config("sensor dimensions must be in 1..=65535".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_density) {
            return Err(Error::Config("texture_density must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn principal_point(&self) -> (f64, f64) {
        (
            self.cx.unwrap_or((self.sensor_w as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((self.sensor_h as f64 - 1.0) / 2.0),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub events: Vec<Event>,
    pub poses: Vec<PoseSample>,
    /// Analytic velocities at the pose timestamps.
    pub velocities: Vec<VelocityRecord>,
}

/// Stateless cell texture: bright with probability `density`.
#[derive(Clone, Copy, Debug)]
struct Texture {
    seed: u64,
    density: f64,
    cell: f64,
    dark: f64,
    bright: f64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Texture {
    fn cell_value(&self, i: i64, j: i64) -> f64 {
        let h = mix(self.seed ^ mix((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64)));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.density {
            self.bright
        } else {
            self.dark
        }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell - 0.5, y / self.cell - 0.5);
        let (fx, fy) = (gx.floor(), gy.floor());
        let (wx, wy) = (gx - fx, gy - fy);
        let (i, j) = (fx as i64, fy as i64);
        let v00 = self.cell_value(i, j);
        let v10 = self.cell_value(i + 1, j);
        let v01 = self.cell_value(i, j + 1);
        let v11 = self.cell_value(i + 1, j + 1);
        (1.0 - wy) * ((1.0 - wx) * v00 + wx * v10) + wy * ((1.0 - wx) * v01 + wx * v11)
    }
}

struct Renderer<'a> {
    spec: &'a SyntheticSceneSpec,
    texture: Texture,
    /// Camera-frame ray of every pixel, row-major.
    rays: Vec<Vector3<f64>>,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a SyntheticSceneSpec, seed: u64) -> Self {
        let (cx, cy) = spec.principal_point();
        let mut rays = Vec::with_capacity(spec.sensor_w * spec.sensor_h);
        for y in 0..spec.sensor_h {
            for x in 0..spec.sensor_w {
                rays.push(Vector3::new(
                    (x as f64 - cx) / spec.focal,
                    (y as f64 - cy) / spec.focal,
                    1.0,
                ));
            }
        }
        Self {
            spec,
            texture: Texture {
                seed,
                density: spec.texture_density,
                cell: spec.texture_cell,
                dark: spec.dark,
                bright: spec.bright,
            },
            rays,
        }
    }

    /// Log intensity of every pixel at time `t`.
    fn render(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let traj = &self.spec.trajectory;
        let pos = traj.position(t);
        let rot = traj.orientation(t);
        let height = self.spec.plane_depth - pos.z;
        if height.abs() < 1e-9 {
            return Err(Error::Geometry(format!("camera lies in the scene plane at t = {t}")));
        }
        let sky = self.spec.dark.ln();
        for (o, ray) in out.iter_mut().zip(&self.rays) {
            let d = rot * ray;
            let s = height / d.z;
            *o = if d.z.abs() < 1e-12 || s <= 0.0 {
                sky
            } else {
                self.texture.intensity(pos.x + s * d.x, pos.y + s * d.y).ln()
            };
        }
        Ok(())
    }
}

/// Simulates `duration` seconds of the scene's trajectory.
pub fn gen_synthetic_events(scene: &SyntheticSceneSpec, duration: f64, seed: u64) -> Result<SyntheticClip> {
    scene.validate()?;
    if !(duration > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let renderer = Renderer::new(scene, seed);
    let n_pix = scene.sensor_w * scene.sensor_h;
    let mut reference = vec![0.0; n_pix];
    renderer.render(0.0, &mut reference)?;
    let mut prev = reference.clone();
    let mut cur = vec![0.0; n_pix];
    let steps = (duration / scene.sim_dt).ceil() as usize;
    let c = scene.contrast_threshold;
    let mut events = Vec::new();
    for k in 1..=steps {
        let (t0, t1) = ((k - 1) as f64 * scene.sim_dt, (k as f64 * scene.sim_dt).min(duration));
        renderer.render(t1, &mut cur)?;
        for p in 0..n_pix {
            let (a, b) = (prev[p], cur[p]);
            if a == b {
                continue;
            }
            loop {
                let diff = b - reference[p];
                if diff.abs() < c {
                    break;
                }
                let pol: i8 = if diff > 0.0 { 1 } else { -1 };
                let level = reference[p] + f64::from(pol) * c;
                // crossing time on the linear segment between samples
                let w = ((level - a) / (b - a)).clamp(0.0, 1.0);
                let t = t0 + w * (t1 - t0);
                events.push(Event {
                    t: (t * 1e6).round() as u64,
                    x: (p % scene.sensor_w) as u16,
                    y: (p / scene.sensor_w) as u16,
                    p: pol,
                });
                reference[p] = level;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    let n_poses = (duration / scene.pose_dt).round() as usize + 1;
    let poses: Vec<PoseSample> = (0..n_poses)
        .map(|k| scene.trajectory.pose((k as f64 * scene.pose_dt).min(duration)))
        .collect();
    let velocities = poses.iter().map(|p| scene.trajectory.velocity(p.t)).collect();
    Ok(SyntheticClip {
        events,
        poses,
        velocities,
    })
}

/// Ranges from which clip trajectories are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionRanges {
    /// Forward (optical-axis) speed range, m/s.
    pub forward: [f64; 2],
    /// Maximum magnitude of each lateral speed component, m/s.
    pub lateral: f64,
    /// Maximum magnitude of each Euler rate, deg/s.
    pub angular: f64,
    /// Maximum magnitude of the initial roll and pitch, degrees.
    pub tilt: f64,
    /// Half-width of the start-position square, metres.
    pub start_extent: f64,
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self {
            forward: [-3.0, 3.0],
            lateral: 3.0,
            angular: 10.0,
            tilt: 5.0,
            start_extent: 50.0,
        }
    }
}

impl MotionRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let forward = if self.forward[1] > self.forward[0] {
            rng.gen_range(self.forward[0]..=self.forward[1])
        } else {
            self.forward[0]
        };
        let v_cam = Vector3::new(sym(rng, self.lateral), sym(rng, self.lateral), forward);
        let euler0 = [
            sym(rng, self.tilt).to_radians(),
            sym(rng, self.tilt).to_radians(),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let q0 = euler_zyx(euler0[0], euler0[1], euler0[2]);
        let v_world = q0 * v_cam;
        let e = self.angular.to_radians();
        Trajectory {
            p0: [sym(rng, self.start_extent), sym(rng, self.start_extent), 0.0],
            v_world: [v_world.x, v_world.y, v_world.z],
            euler0,
            euler_rate: [sym(rng, e), sym(rng, e), sym(rng, e)],
        }
    }
}

/// Draws a trajectory for clip `index` of a dataset seeded with `seed`.
pub fn clip_trajectory(ranges: &MotionRanges, seed: u64, index: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(index as u64 + 1)));
    ranges.sample(&mut rng)
}
