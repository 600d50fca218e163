//! Event streams to binary spike tensors.
//!
//! A sample covers `t_steps` consecutive windows. Each window is cut into
//! `n_bins` chronological bins and every bin contributes two channels, one
//! per polarity, laid out bin-major: channel `2 * bin + (p > 0)`.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{read_binary, read_text, write_binary, write_text, EventFormat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// -1 or +1.
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Result<Self> {
        if p != 1 && p != -1 {
            return Err(Error::InvalidParam(format!("polarity must be -1 or 1, got {p}")));
        }
        Ok(Self { t, x, y, p })
    }

    pub fn channel_in_bin(&self) -> usize {
        usize::from(self.p > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    /// Seconds covered by one network time step.
    pub window_duration: f64,
    pub n_bins: usize,
    pub t_steps: usize,
    pub sensor_h: usize,
    pub sensor_w: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_duration: 0.05,
            n_bins: 5,
            t_steps: 5,
            sensor_h: 64,
            sensor_w: 64,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.t_steps == 0 {
            return Err(Error::Config("n_bins and t_steps must be >= 1".into()));
        }
        if !(self.window_duration > 0.0) || !self.window_duration.is_finite() {
            return Err(Error::Config("window_duration must be positive".into()));
        }
        if self.sensor_h == 0 || self.sensor_w == 0 {
            return Err(Error::Config("sensor dimensions must be >= 1".into()));
        }
        if self.window_us() == 0 {
            return Err(Error::Config("window_duration is below one microsecond".into()));
        }
        Ok(())
    }

    /// Window length in whole microseconds, the clock resolution of events.
    pub fn window_us(&self) -> u64 {
        (self.window_duration * 1e6).round() as u64
    }

    pub fn channels(&self) -> usize {
        2 * self.n_bins
    }

    pub fn span_us(&self) -> u64 {
        self.window_us() * self.t_steps as u64
    }

    /// `(window, bin)` of an offset from the sample start, or `None` past
    /// the covered span. Integer arithmetic keeps bin edges exact.
    pub fn locate(&self, dt_us: u64) -> Option<(usize, usize)> {
        let w = self.window_us();
        let window = dt_us / w;
        if window >= self.t_steps as u64 {
            return None;
        }
        let within = dt_us % w;
        let bin = (within as u128 * self.n_bins as u128 / w as u128) as usize;
        Some((window as usize, bin))
    }
}

/// Events grouped per `(window, bin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedEvents {
    pub t0: u64,
    /// `groups[window * n_bins + bin]`.
    pub groups: Vec<Vec<Event>>,
    pub assigned: usize,
    /// Events before `t0` or past the covered span.
    pub dropped: usize,
}

impl BinnedEvents {
    pub fn group(&self, spec: &WindowSpec, window: usize, bin: usize) -> &[Event] {
        &self.groups[window * spec.n_bins + bin]
    }
}

/// Assigns each event to one `(window, bin)` relative to `t0`, or to the
/// first event's timestamp when `t0` is `None`.
pub fn bin_events(events: &[Event], spec: &WindowSpec, t0: Option<u64>) -> Result<BinnedEvents> {
    spec.validate()?;
    check_sorted(events)?;
    let start = t0.or_else(|| events.first().map(|e| e.t)).unwrap_or(0);
    let mut groups = vec![Vec::new(); spec.t_steps * spec.n_bins];
    let (mut assigned, mut dropped) = (0, 0);
    for e in events {
        match e.t.checked_sub(start).and_then(|dt| spec.locate(dt)) {
            Some((w, b)) => {
                groups[w * spec.n_bins + b].push(*e);
                assigned += 1;
            }
            None => dropped += 1,
        }
    }
    Ok(BinnedEvents {
        t0: start,
        groups,
        assigned,
        dropped,
    })
}

pub fn check_sorted(events: &[Event]) -> Result<()> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(Error::UnsortedEvents {
                index: i + 1,
                prev: w[0].t,
                next: w[1].t,
            });
        }
    }
    Ok(())
}

/// Binary tensor with axes `[T, B, C, H, W]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTensor {
    shape: [usize; 5],
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(t: usize, b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [t, b, c, h, w],
            data: vec![0; t * b * c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, b, c, h, w] = self.shape;
        (((idx[0] * b + idx[1]) * c + idx[2]) * h + idx[3]) * w + idx[4]
    }

    pub fn get(&self, idx: [usize; 5]) -> u8 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5]) {
        let o = self.offset(idx);
        self.data[o] = 1;
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Copy with the image mirrored along x and/or y, and optionally each
    /// polarity pair of channels exchanged.
    pub fn transformed(&self, flip_x: bool, flip_y: bool, swap_polarity: bool) -> Self {
        let [t, b, c, h, w] = self.shape;
        let mut out = Self::zeros(t, b, c, h, w);
        for ti in 0..t {
            for bi in 0..b {
                for ci in 0..c {
                    let co = if swap_polarity && c % 2 == 0 { ci ^ 1 } else { ci };
                    for y in 0..h {
                        let yo = if flip_y { h - 1 - y } else { y };
                        for x in 0..w {
                            if self.get([ti, bi, ci, y, x]) == 1 {
                                let xo = if flip_x { w - 1 - x } else { x };
                                out.set([ti, bi, co, yo, xo]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Length of one `(t, b)` slice, `C * H * W`.
    pub fn frame_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Time step `t` as a `[B, C*H*W]` matrix.
    pub fn frame<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let (b, f) = (self.shape[1], self.frame_len());
        let start = t * b * f;
        let data = self.data[start..start + b * f]
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(b, f, data).expect("frame size")
    }
}

/// Occupancy encoding of one sample (`B = 1`).
pub fn encode_polarity(binned: &BinnedEvents, spec: &WindowSpec) -> Result<SpikeTensor> {
    spec.validate()?;
    if binned.groups.len() != spec.t_steps * spec.n_bins {
        return Err(Error::Shape(format!(
            "{} event groups for {} windows of {} bins",
            binned.groups.len(),
            spec.t_steps,
            spec.n_bins
        )));
    }
    let mut out = SpikeTensor::zeros(spec.t_steps, 1, spec.channels(), spec.sensor_h, spec.sensor_w);
    let mut index = 0;
    for (g, events) in binned.groups.iter().enumerate() {
        let (window, bin) = (g / spec.n_bins, g % spec.n_bins);
        for e in events {
            if e.p != 1 && e.p != -1 {
                return Err(Error::InvalidParam(format!("event {index} has polarity {}", e.p)));
            }
            if usize::from(e.x) >= spec.sensor_w || usize::from(e.y) >= spec.sensor_h {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                    width: spec.sensor_w,
                    height: spec.sensor_h,
                });
            }
            out.set([window, 0, 2 * bin + e.channel_in_bin(), e.y.into(), e.x.into()]);
            index += 1;
        }
    }
    Ok(out)
}

/// Bins and encodes a sample starting at `t0`.
pub fn encode_events(events: &[Event], spec: &WindowSpec, t0: Option<u64>) -> Result<(SpikeTensor, BinnedEvents)> {
    let binned = bin_events(events, spec, t0)?;
    let tensor = encode_polarity(&binned, spec)?;
    Ok((tensor, binned))
}

/// Stacks single or multi-sample tensors along the batch axis.
pub fn batch_samples(samples: &[SpikeTensor]) -> Result<SpikeTensor> {
    let first = samples.first().ok_or(Error::Empty("sample list"))?;
    let [t, _, c, h, w] = first.shape;
    for s in samples {
        let [st, _, sc, sh, sw] = s.shape;
        if (st, sc, sh, sw) != (t, c, h, w) {
            return Err(Error::Shape(format!(
                "sample shape [{st}, _, {sc}, {sh}, {sw}] differs from [{t}, _, {c}, {h}, {w}]"
            )));
        }
    }
    let b: usize = samples.iter().map(|s| s.shape[1]).sum();
    let frame = c * h * w;
    let mut data = Vec::with_capacity(t * b * frame);
    for step in 0..t {
        for s in samples {
            let n = s.shape[1] * frame;
            data.extend_from_slice(&s.data[step * n..(step + 1) * n]);
        }
    }
    Ok(SpikeTensor {
        shape: [t, b, c, h, w],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_bins: usize, t_steps: usize, window: f64) -> WindowSpec {
        WindowSpec {
            window_duration: window,
            n_bins,
            t_steps,
            sensor_h: 8,
            sensor_w: 8,
        }
    }

    #[test]
    fn empty_stream_gives_empty_groups() {
        let b = bin_events(&[], &spec(4, 2, 0.01), None).unwrap();
        assert!(b.groups.iter().all(Vec::is_empty));
        assert_eq!((b.assigned, b.dropped), (0, 0));
    }

    #[test]
    fn first_event_lands_in_first_bin() {
        let e = Event::new(1234, 1, 1, 1).unwrap();
        let s = spec(4, 1, 0.01);
        let b = bin_events(&[e], &s, None).unwrap();
        assert_eq!(b.group(&s, 0, 0), &[e]);
    }

    #[test]
    fn uniform_train_two_per_bin() {
        let s = spec(5, 1, 0.01);
        let events: Vec<Event> = (0..10).map(|k| Event::new(k * 1000, 0, 0, 1).unwrap()).collect();
        let b = bin_events(&events, &s, None).unwrap();
        for bin in 0..5 {
            assert_eq!(b.group(&s, 0, bin).len(), 2);
        }
    }

    #[test]
    fn unsorted_is_rejected() {
        let events = [Event::new(5, 0, 0, 1).unwrap(), Event::new(4, 0, 0, 1).unwrap()];
        assert!(matches!(
            bin_events(&events, &spec(1, 1, 0.01), None),
            Err(Error::UnsortedEvents { index: 1, .. })
        ));
    }

    #[test]
    fn positive_event_channel_index() {
        let s = spec(4, 1, 0.004);
        // bin 2 covers [2000, 3000) us
        let e = Event::new(2500, 3, 5, 1).unwrap();
        let (t, _) = encode_events(&[e], &s, Some(0)).unwrap();
        assert_eq!(t.popcount(), 1);
        assert_eq!(t.get([0, 0, 5, 5, 3]), 1);
    }

    #[test]
    fn duplicate_events_saturate() {
        let s = spec(1, 1, 0.01);
        let e = Event::new(0, 2, 2, -1).unwrap();
        let (t, _) = encode_events(&[e, e], &s, None).unwrap();
        assert_eq!(t.popcount(), 1);
        assert_eq!(t.get([0, 0, 0, 2, 2]), 1);
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let s = spec(1, 1, 0.01);
        let e = Event::new(0, 8, 0, 1).unwrap();
        assert!(matches!(encode_events(&[e], &s, None), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn batching() {
        let s = spec(2, 3, 0.01);
        let e = Event::new(12_000, 1, 2, 1).unwrap();
        let (t, _) = encode_events(&[e], &s, Some(0)).unwrap();
        assert_eq!(batch_samples(std::slice::from_ref(&t)).unwrap(), t);
        let three = batch_samples(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert_eq!(three.shape(), [3, 3, 4, 8, 8]);
        for b in 0..3 {
            for step in 0..3 {
                for c in 0..4 {
                    for y in 0..8 {
                        for x in 0..8 {
                            assert_eq!(three.get([step, b, c, y, x]), t.get([step, 0, c, y, x]));
                        }
                    }
                }
            }
        }
        let other = SpikeTensor::zeros(2, 1, 4, 8, 8);
        assert!(batch_samples(&[t, other]).is_err());
    }

    #[test]
    fn bad_polarity_rejected() {
        assert!(Event::new(0, 0, 0, 0).is_err());
    }
}
