//! Error metrics and spike-train statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{alif_step, lif_step, NeuronKind, NeuronParams, NeuronState};
use crate::scalar::Scalar;

fn check_pair<T>(pred: &[T], gt: &[T], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::InvalidParam("sample dimension must be >= 1".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            context: "metric inputs",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not split into samples of {dim}",
            pred.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric inputs"));
    }
    Ok(pred.len() / dim)
}

/// Root mean square of per-sample error norms; samples are consecutive
/// runs of `dim` values.
pub fn rmse<T: Scalar>(pred: &[T], gt: &[T], dim: usize) -> Result<T> {
    let n = check_pair(pred, gt, dim)?;
    let sum: T = pred.iter().zip(gt).map(|(&p, &g)| (g - p) * (g - p)).sum();
    Ok((sum / T::lit(n as f64)).sqrt())
}

pub fn rmse_scalar<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    rmse(pred, gt, 1)
}

/// Mean over samples of `||gt - pred|| / max(||gt||, eps)`.
pub fn relative_error<T: Scalar>(pred: &[T], gt: &[T], dim: usize, eps: T) -> Result<T> {
    let n = check_pair(pred, gt, dim)?;
    let mut total = T::zero();
    for (p, g) in pred.chunks(dim).zip(gt.chunks(dim)) {
        let err: T = p.iter().zip(g).map(|(&a, &b)| (b - a) * (b - a)).sum::<T>().sqrt();
        let norm: T = g.iter().map(|&b| b * b).sum::<T>().sqrt();
        total += err / norm.max(eps);
    }
    Ok(total / T::lit(n as f64))
}

pub const RE_EPS: f64 = 1e-6;

/// Named error summary. `rmse_dagger` is RMSE x 1000 and
/// `rmse_star_angular` the angular RMSE x 100, the conventions used when
/// reporting small errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: BTreeMap<String, f64>,
    pub re: BTreeMap<String, f64>,
    pub rmse_dagger: BTreeMap<String, f64>,
    pub rmse_star_angular: Option<f64>,
    pub n_samples: usize,
}

impl MetricReport {
    /// Adds one quantity whose samples have `dim` components.
    pub fn add(&mut self, name: &str, pred: &[f64], gt: &[f64], dim: usize) -> Result<()> {
        let r = rmse(pred, gt, dim)?;
        let re = relative_error(pred, gt, dim, RE_EPS)?;
        self.rmse.insert(name.to_string(), r);
        self.re.insert(name.to_string(), re);
        self.rmse_dagger.insert(name.to_string(), r * 1000.0);
        if name == "angular" {
            self.rmse_star_angular = Some(r * 100.0);
        }
        self.n_samples = pred.len() / dim;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiringProfile {
    pub kind: NeuronKind,
    /// Spikes per neuron over the trace.
    pub counts: Vec<usize>,
    /// Mean spikes per neuron per step.
    pub mean_rate: f64,
    /// Inter-spike interval (steps) -> occurrences, pooled over neurons.
    pub isi_histogram: BTreeMap<usize, usize>,
    /// Spike raster, `steps x neurons`.
    #[serde(skip)]
    pub raster: Vec<Vec<u8>>,
}

/// Simulates one population on `trace` (`steps x neurons` input currents).
/// For ALIF the donor is each neuron's own potential from the previous
/// step, since a lone population has no preceding layer.
pub fn firing_profile<T: Scalar>(
    kind: NeuronKind,
    params: &NeuronParams<T>,
    trace: &[Vec<T>],
) -> Result<FiringProfile> {
    params.validate()?;
    let n = trace.first().map_or(0, |r| r.len());
    if trace.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged input trace".into()));
    }
    if trace.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input trace"));
    }
    let mut state = NeuronState::at_rest(n);
    let mut counts = vec![0usize; n];
    let mut last: Vec<Option<usize>> = vec![None; n];
    let mut isi = BTreeMap::new();
    let mut raster = Vec::with_capacity(trace.len());
    for (t, input) in trace.iter().enumerate() {
        let (next, spikes) = match kind {
            NeuronKind::Lif => lif_step(&state, input, params)?,
            NeuronKind::Alif => {
                let own = state.v.clone();
                alif_step(&state.with_donor(own)?, input, params)?
            }
        };
        state = next;
        let mut row = vec![0u8; n];
        for j in 0..n {
            if spikes[j] == T::one() {
                row[j] = 1;
                counts[j] += 1;
                if let Some(prev) = last[j] {
                    *isi.entry(t - prev).or_insert(0) += 1;
                }
                last[j] = Some(t);
            }
        }
        raster.push(row);
    }
    let total: usize = counts.iter().sum();
    let denom = (trace.len() * n).max(1);
    Ok(FiringProfile {
        kind,
        counts,
        mean_rate: total as f64 / denom as f64,
        isi_histogram: isi,
        raster,
    })
}
