//! Synthetic velocity-estimation dataset: clips on disk, a TOML manifest,
//! and the loader that turns clips into encoded training samples.
//!
//! A clip spans `t_steps` encoding windows starting at `t = 0`. Its target
//! rows are the velocities at the centres of the `n_bins` chronological
//! bins of the final window, derived from the clip's pose file.

use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::poses::{poses_to_velocity, read_pose_csv, velocity_at, write_pose_csv, PoseSample, VelocityRecord};
use super::synthetic::{
    clip_trajectory, gen_synthetic_events, MotionRanges, SyntheticClip, SyntheticSceneSpec, Trajectory,
};
use crate::encoding::io::{read_events, write_events, EventFormat};
use crate::encoding::{check_sorted, encode_events, Event, SpikeTensor, WindowSpec};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityDatasetSpec {
    pub clips: usize,
    pub train: usize,
    pub val: usize,
    pub scene: SyntheticSceneSpec,
    pub motion: MotionRanges,
    pub window: WindowSpec,
    pub event_format: EventFormat,
}

impl Default for VelocityDatasetSpec {
    fn default() -> Self {
        Self {
            clips: 220,
            train: 200,
            val: 20,
            scene: SyntheticSceneSpec::default(),
            motion: MotionRanges::default(),
            window: WindowSpec::default(),
            event_format: EventFormat::Binary,
        }
    }
}

impl VelocityDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train + self.val != self.clips || self.clips == 0 {
            return Err(Error::Config(format!(
                "train ({}) + val ({}) must equal clips ({}) > 0",
                self.train, self.val, self.clips
            )));
        }
        self.scene.validate()?;
        self.window.validate()?;
        if (self.window.sensor_w, self.window.sensor_h) != (self.scene.sensor_w, self.scene.sensor_h) {
            return Err(Error::Config("window and scene sensor sizes differ".into()));
        }
        Ok(())
    }

    pub fn clip_duration(&self) -> f64 {
        self.window.span_us() as f64 * 1e-6
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    /// Relative to the manifest directory.
    pub events: PathBuf,
    pub poses: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub format: Option<EventFormat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub window: WindowSpec,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.window.validate()?;
        Ok(m)
    }

    /// Writes through a temporary file so a failed run leaves no manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let tmp = path.with_extension("toml.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Reads an event file and checks ordering and, when a sensor size is
/// given, coordinates.
pub fn load_events(path: &Path, format: EventFormat, sensor: Option<(usize, usize)>) -> Result<Vec<Event>> {
    let events = read_events(path, format)?;
    check_sorted(&events)?;
    if let Some((w, h)) = sensor {
        if let Some((index, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| usize::from(e.x) >= w || usize::from(e.y) >= h)
        {
            return Err(Error::OutOfBounds {
                index,
                x: e.x.into(),
                y: e.y.into(),
                width: w,
                height: h,
            });
        }
    }
    Ok(events)
}

/// One encoded clip with its `n_bins x 6` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySample {
    pub name: String,
    pub spikes: SpikeTensor,
    pub targets: Vec<VelocityRecord>,
    pub dropped_events: usize,
}

impl VelocitySample {
    /// Mirrored and/or polarity-swapped copy with targets to match.
    pub fn augmented(&self, flip_x: bool, flip_y: bool, swap_polarity: bool) -> Self {
        Self {
            name: self.name.clone(),
            spikes: self.spikes.transformed(flip_x, flip_y, swap_polarity),
            targets: self.targets.iter().map(|r| r.mirrored(flip_x, flip_y)).collect(),
            dropped_events: self.dropped_events,
        }
    }

    pub fn target_rows(&self) -> Vec<f64> {
        self.targets.iter().flat_map(|r| r.as_row()).collect()
    }
}

/// Target times: centres of the bins of the last window, seconds.
pub fn target_times(window: &WindowSpec) -> Vec<f64> {
    let w = window.window_us() as f64 * 1e-6;
    let start = w * (window.t_steps - 1) as f64;
    (0..window.n_bins)
        .map(|b| start + (b as f64 + 0.5) * w / window.n_bins as f64)
        .collect()
}

pub fn make_sample(
    name: &str,
    events: &[Event],
    velocities: &[VelocityRecord],
    window: &WindowSpec,
) -> Result<VelocitySample> {
    let (spikes, binned) = encode_events(events, window, Some(0))?;
    let targets = target_times(window)
        .into_iter()
        .enumerate()
        .map(|(b, t)| {
            let mut r = velocity_at(velocities, t)?;
            r.bin_index = b;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VelocitySample {
        name: name.to_string(),
        spikes,
        targets,
        dropped_events: binned.dropped,
    })
}

#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub name: String,
    pub split: Split,
    pub trajectory: Trajectory,
    pub clip: SyntheticClip,
}

/// Simulates every clip of the dataset in memory. Clip `i` draws its
/// trajectory and texture from `(seed, i)` alone, so the result does not
/// depend on scheduling.
pub fn generate_clips(spec: &VelocityDatasetSpec, seed: u64) -> Result<Vec<GeneratedClip>> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..spec.clips).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; spec.clips];
    for &i in &order[spec.train..] {
        split[i] = Split::Val;
    }
    let duration = spec.clip_duration();
    (0..spec.clips)
        .into_par_iter()
        .map(|i| {
            let trajectory = clip_trajectory(&spec.motion, seed, i);
            let scene = SyntheticSceneSpec {
                trajectory,
                ..spec.scene.clone()
            };
            let clip = gen_synthetic_events(&scene, duration, seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9))?;
            Ok(GeneratedClip {
                name: format!("clip_{i:04}"),
                split: split[i].clone(),
                trajectory,
                clip,
            })
        })
        .collect()
}

/// Writes event and pose files plus the manifest, which is written last.
pub fn write_velocity_dataset(spec: &VelocityDatasetSpec, clips: &[GeneratedClip], dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let ext = match spec.event_format {
        EventFormat::Binary => "bin",
        EventFormat::Text => "txt",
    };
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let events = PathBuf::from(format!("{}.{ext}", c.name));
        let poses = PathBuf::from(format!("{}_poses.csv", c.name));
        write_events(&dir.join(&events), spec.event_format, &c.clip.events)?;
        write_pose_csv(&dir.join(&poses), &c.clip.poses)?;
        entries.push(ClipEntry {
            name: c.name.clone(),
            events,
            poses,
            split: c.split.clone(),
            format: Some(spec.event_format),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        window: spec.window.clone(),
        clips: entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default)]
pub struct VelocityData {
    pub window: Option<WindowSpec>,
    pub train: Vec<VelocitySample>,
    pub val: Vec<VelocitySample>,
}

impl VelocityData {
    /// Encodes in-memory clips. Ground truth is differentiated from the
    /// poses, exactly as when the written dataset is loaded back.
    pub fn from_generated(spec: &VelocityDatasetSpec, clips: &[GeneratedClip]) -> Result<Self> {
        let samples: Vec<(Split, VelocitySample)> = clips
            .par_iter()
            .map(|c| {
                // renormalise as the pose reader does, so both paths agree bit for bit
                let poses: Vec<PoseSample> = c
                    .clip
                    .poses
                    .iter()
                    .map(|p| PoseSample {
                        orientation: UnitQuaternion::new_normalize(*p.orientation.quaternion()),
                        ..*p
                    })
                    .collect();
                let velocities = poses_to_velocity(&poses)?;
                Ok((
                    c.split.clone(),
                    make_sample(&c.name, &c.clip.events, &velocities, &spec.window)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self::split(Some(spec.window.clone()), samples))
    }

    /// Loads a manifest directory; ground truth comes from differentiating
    /// the pose files.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let window = manifest.window.clone();
        let samples: Vec<(Split, VelocitySample)> = manifest
            .clips
            .par_iter()
            .map(|c| {
                let path = dir.join(&c.events);
                let format = c.format.unwrap_or_else(|| EventFormat::from_path(&path));
                let events = load_events(&path, format, Some((window.sensor_w, window.sensor_h)))?;
                let poses = read_pose_csv(&dir.join(&c.poses))?;
                let velocities = poses_to_velocity(&poses)?;
                Ok((c.split.clone(), make_sample(&c.name, &events, &velocities, &window)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self::split(Some(window), samples))
    }

    fn split(window: Option<WindowSpec>, samples: Vec<(Split, VelocitySample)>) -> Self {
        let mut out = Self {
            window,
            ..Default::default()
        };
        for (s, sample) in samples {
            match s {
                Split::Train => out.train.push(sample),
                Split::Val => out.val.push(sample),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> VelocityDatasetSpec {
        let scene = SyntheticSceneSpec {
            sensor_w: 16,
            sensor_h: 16,
            focal: 15.0,
            sim_dt: 1e-3,
            ..Default::default()
        };
        VelocityDatasetSpec {
            clips: 4,
            train: 3,
            val: 1,
            scene,
            window: WindowSpec {
                window_duration: 0.02,
                n_bins: 2,
                t_steps: 2,
                sensor_h: 16,
                sensor_w: 16,
            },
            ..Default::default()
        }
    }

    #[test]
    fn target_times_are_last_window_bin_centres() {
        let w = WindowSpec {
            window_duration: 0.05,
            n_bins: 5,
            t_steps: 2,
            ..Default::default()
        };
        let t = target_times(&w);
        assert_eq!(t.len(), 5);
        assert!((t[0] - 0.055).abs() < 1e-12 && (t[4] - 0.095).abs() < 1e-12);
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let spec = tiny_spec();
        let clips = generate_clips(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_velocity_dataset(&spec, &clips, dir.path()).unwrap();
        let mem = VelocityData::from_generated(&spec, &clips).unwrap();
        let disk = VelocityData::load(dir.path()).unwrap();
        assert_eq!(mem.train.len(), 3);
        assert_eq!(disk.val.len(), 1);
        for (a, b) in mem.train.iter().zip(&disk.train) {
            assert_eq!(a.spikes, b.spikes);
            assert_eq!(a.targets, b.targets);
        }
        // differentiated poses stay close to the analytic trajectory
        for (c, s) in clips.iter().filter(|c| c.split == Split::Train).zip(&mem.train) {
            for r in &s.targets {
                let exact = c.trajectory.velocity(r.t);
                for (x, y) in r.as_row().iter().zip(exact.as_row()) {
                    assert!((x - y).abs() < 1e-3, "{r:?} vs {exact:?}");
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = tiny_spec();
        let a = generate_clips(&spec, 1).unwrap();
        let b = generate_clips(&spec, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn manifest_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            version: MANIFEST_VERSION + 1,
            window: WindowSpec::default(),
            clips: vec![],
        };
        let p = dir.path().join(MANIFEST_FILE);
        m.write(&p).unwrap();
        assert!(Manifest::read(&p).is_err());
    }
}
