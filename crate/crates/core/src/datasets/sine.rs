//! Phase-shifted sine sequences for regression and closed-loop forecasting.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineDatasetSpec {
    pub num_sequences: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Length of the fitted (teacher-forced) segment.
    pub steps: usize,
    /// Length of the closed-loop segment that follows it.
    pub forecast_steps: usize,
    /// Radians advanced per step.
    pub x_step: f64,
}

impl Default for SineDatasetSpec {
    fn default() -> Self {
        Self {
            num_sequences: 100,
            train_count: 97,
            val_count: 3,
            steps: 1000,
            forecast_steps: 1000,
            x_step: 2.0 * PI / 100.0,
        }
    }
}

impl SineDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_count + self.val_count != self.num_sequences {
            return Err(Error::Config(format!(
                "train_count ({}) + val_count ({}) != num_sequences ({})",
                self.train_count, self.val_count, self.num_sequences
            )));
        }
        if self.steps == 0 || self.num_sequences == 0 {
            return Err(Error::Config(
                "sine dataset needs steps > 0 and at least one sequence".into(),
            ));
        }
        if !(self.x_step.is_finite() && self.x_step > 0.0) {
            return Err(Error::Config("x_step must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps + self.forecast_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SineSequence {
    pub phase: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SineDataset {
    pub spec: SineDatasetSpec,
    pub sequences: Vec<SineSequence>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// `y_i[k] = sin(k * x_step + d_i)` with `d_i ~ U[0, 2*pi)`; the split is a
/// seeded shuffle of sequence indices.
pub fn gen_sine_dataset(spec: &SineDatasetSpec, seed: u64) -> Result<SineDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.total_steps();
    let sequences: Vec<SineSequence> = (0..spec.num_sequences)
        .map(|_| {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let values = (0..total).map(|k| (k as f64 * spec.x_step + phase).sin()).collect();
            SineSequence { phase, values }
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.num_sequences).collect();
    order.shuffle(&mut rng);
    let mut train = order[..spec.train_count].to_vec();
    let mut val = order[spec.train_count..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(SineDataset {
        spec: spec.clone(),
        sequences,
        train,
        val,
    })
}

impl SineDataset {
    /// Writes `seq_XXX.csv` (`step,value`) per sequence plus `split.csv`
    /// (`sequence,phase,split`).
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, seq) in self.sequences.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(seq_file(i)))?);
            writeln!(f, "step,value")?;
            for (k, v) in seq.values.iter().enumerate() {
                writeln!(f, "{k},{v:e}")?;
            }
            f.flush()?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("split.csv"))?);
        writeln!(f, "sequence,phase,split")?;
        for (i, seq) in self.sequences.iter().enumerate() {
            let split = if self.val.contains(&i) { "val" } else { "train" };
            writeln!(f, "{i},{:e},{split}", seq.phase)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`SineDataset::write_csv`].
    pub fn read_csv(dir: &Path, spec: &SineDatasetSpec) -> Result<Self> {
        let split_path = dir.join("split.csv");
        let text = std::fs::read_to_string(&split_path)?;
        let mut sequences = Vec::new();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (ln, line) in text.lines().enumerate().skip(1) {
            let parse_err = |m: &str| Error::Parse {
                path: split_path.display().to_string(),
                line: ln + 1,
                message: m.to_string(),
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(parse_err("expected `sequence,phase,split`"));
            }
            let idx: usize = cols[0].parse().map_err(|_| parse_err("bad sequence index"))?;
            let phase: f64 = cols[1].parse().map_err(|_| parse_err("bad phase"))?;
            match cols[2] {
                "train" => train.push(idx),
                "val" => val.push(idx),
                _ => return Err(parse_err("split must be train or val")),
            }
            let seq_path = dir.join(seq_file(idx));
            let body = std::fs::read_to_string(&seq_path)?;
            let mut values = Vec::new();
            for (k, l) in body.lines().enumerate().skip(1) {
                let v = l
                    .split(',')
                    .nth(1)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: seq_path.display().to_string(),
                        line: k + 1,
                        message: "expected `step,value`".into(),
                    })?;
                values.push(v);
            }
            sequences.push(SineSequence { phase, values });
        }
        let ds = Self {
            spec: spec.clone(),
            sequences,
            train,
            val,
        };
        if ds.sequences.len() != spec.num_sequences {
            return Err(Error::Config(format!(
                "found {} sequences, expected {}",
                ds.sequences.len(),
                spec.num_sequences
            )));
        }
        Ok(ds)
    }
}

fn seq_file(i: usize) -> String {
    format!("seq_{i:03}.csv")
}
