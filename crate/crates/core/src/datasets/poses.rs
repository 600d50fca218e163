//! Camera poses and their conversion to body-frame velocity records.
//!
//! Orientation follows intrinsic ZYX Euler angles over the camera axes
//! (x right, y down, z along the optical axis): `R = Rz(yaw) Ry(pitch)
//! Rx(roll)`, mapping camera coordinates to world coordinates. Angular
//! velocity is reported as Euler-angle rates `(roll, pitch, yaw)` in deg/s,
//! linear velocity in m/s expressed in the camera frame.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample {
    /// Seconds.
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityRecord {
    pub t: f64,
    /// m/s, camera frame.
    pub linear: [f64; 3],
    /// Euler-angle rates (roll, pitch, yaw), deg/s.
    pub angular: [f64; 3],
    /// Chronological bin this record stands for, when attached to a sample.
    pub bin_index: usize,
}

impl VelocityRecord {
    /// `[lx ly lz wx wy wz]`, the row layout used by the loss.
    pub fn as_row(&self) -> [f64; 6] {
        let (l, a) = (self.linear, self.angular);
        [l[0], l[1], l[2], a[0], a[1], a[2]]
    }

    /// The record seen by a camera whose image is mirrored. Reflecting the
    /// scene across the camera's x (or y) axis conjugates the ZYX attitude,
    /// which flips pitch and yaw (or roll and yaw) rates exactly.
    pub fn mirrored(&self, flip_x: bool, flip_y: bool) -> Self {
        let mut r = self.clone();
        if flip_x {
            r.linear[0] = -r.linear[0];
            r.angular[1] = -r.angular[1];
            r.angular[2] = -r.angular[2];
        }
        if flip_y {
            r.linear[1] = -r.linear[1];
            r.angular[0] = -r.angular[0];
            r.angular[2] = -r.angular[2];
        }
        r
    }

    pub fn is_finite(&self) -> bool {
        self.as_row().iter().all(|v| v.is_finite())
    }
}

pub fn euler_zyx(roll: f64, pitch: f64, yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
}

/// Euler-angle rates from a body-frame angular velocity at attitude
/// `(roll, pitch)`. Singular at pitch = ±90°.
pub fn body_rate_to_euler_rates(omega: Vector3<f64>, roll: f64, pitch: f64) -> Vector3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (tp, cp) = (pitch.tan(), pitch.cos());
    let a = omega.y * sr + omega.z * cr;
    Vector3::new(omega.x + a * tp, omega.y * cr - omega.z * sr, a / cp)
}

/// Body-frame angular velocity from Euler-angle rates at `(roll, pitch)`.
pub fn euler_rates_to_body_rate(rates: Vector3<f64>, roll: f64, pitch: f64) -> Vector3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Vector3::new(
        rates.x - rates.z * sp,
        rates.y * cr + rates.z * sr * cp,
        -rates.y * sr + rates.z * cr * cp,
    )
}

/// Velocities by finite differences: central inside the sequence,
/// one-sided at the two ends. Rotation uses the relative quaternion
/// between the neighbouring samples.
pub fn poses_to_velocity(poses: &[PoseSample]) -> Result<Vec<VelocityRecord>> {
    if poses.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "need at least 3 poses for differentiation, got {}",
            poses.len()
        )));
    }
    for (i, w) in poses.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::Timestamps(i + 1));
        }
    }
    let n = poses.len();
    (0..n)
        .map(|k| {
            let (a, b) = match k {
                0 => (0, 1),
                k if k == n - 1 => (n - 2, n - 1),
                k => (k - 1, k + 1),
            };
            let (pa, pb) = (&poses[a], &poses[b]);
            let dt = pb.t - pa.t;
            let v_world = (pb.position - pa.position) / dt;
            let here = &poses[k];
            let v_cam = here.orientation.inverse_transform_vector(&v_world);
            // relative rotation expressed in the body frame
            let rel = pa.orientation.inverse() * pb.orientation;
            let omega_body = rel.scaled_axis() / dt;
            // body rates at the midpoint frame are the same vector when the
            // rate is constant; re-express in the frame at `k`
            let mid = pa.orientation.inverse() * here.orientation;
            let omega_here = mid.inverse_transform_vector(&omega_body);
            let (roll, pitch, _) = here.orientation.euler_angles();
            let rates = body_rate_to_euler_rates(omega_here, roll, pitch);
            Ok(VelocityRecord {
                t: here.t,
                linear: [v_cam.x, v_cam.y, v_cam.z],
                angular: [rates.x.to_degrees(), rates.y.to_degrees(), rates.z.to_degrees()],
                bin_index: 0,
            })
        })
        .collect()
}

/// Linear interpolation of records at time `t` (clamped to the ends).
pub fn velocity_at(records: &[VelocityRecord], t: f64) -> Result<VelocityRecord> {
    let first = records.first().ok_or(Error::Empty("velocity records"))?;
    let last = records.last().expect("non-empty");
    if t <= first.t {
        return Ok(*first);
    }
    if t >= last.t {
        return Ok(*last);
    }
    let hi = records.partition_point(|r| r.t <= t);
    let (a, b) = (&records[hi - 1], &records[hi]);
    let w = (t - a.t) / (b.t - a.t);
    let lerp = |x: [f64; 3], y: [f64; 3]| [0, 1, 2].map(|i| x[i] + w * (y[i] - x[i]));
    Ok(VelocityRecord {
        t,
        linear: lerp(a.linear, b.linear),
        angular: lerp(a.angular, b.angular),
        bin_index: 0,
    })
}

/// Writes `t_s px py pz qw qx qy qz` rows with a header line.
pub fn write_pose_csv(path: &Path, poses: &[PoseSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_s,px,py,pz,qw,qx,qy,qz")?;
    for p in poses {
        let q = p.orientation.quaternion();
        writeln!(
            w,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            p.t, p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads pose rows separated by commas or whitespace; a non-numeric
/// first line is taken as a header.
pub fn read_pose_csv(path: &Path) -> Result<Vec<PoseSample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(err(e.to_string())),
        };
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = Quaternion::new(vals[4], vals[5], vals[6], vals[7]);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(err(format!("quaternion norm {norm} is not 1")));
        }
        out.push(PoseSample {
            t: vals[0],
            position: Vector3::new(vals[1], vals[2], vals[3]),
            orientation: UnitQuaternion::new_normalize(q),
        });
    }
    Ok(out)
}
