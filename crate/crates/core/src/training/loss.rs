//! Two-part velocity loss and its dynamic balancing.
//!
//! Each prediction row holds `[lx, ly, lz, wx, wy, wz]`: linear velocity
//! followed by angular (Euler-rate) velocity. Per row the part losses are
//! `0.5 * ||e||` for the linear and angular errors; rows are averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::tape::{Tape, Var};

pub const VELOCITY_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaleState<T> {
    pub ema_angular: T,
    pub ema_linear: T,
    pub decay: T,
    pub scale_a: T,
    pub scale_l: T,
}

pub const SCALE_MIN: f64 = 1e-3;
pub const SCALE_MAX: f64 = 1e3;

impl<T: Scalar> LossScaleState<T> {
    pub fn new(decay: T) -> Self {
        Self {
            ema_angular: T::zero(),
            ema_linear: T::zero(),
            decay,
            scale_a: T::one(),
            scale_l: T::one(),
        }
    }
}

impl<T: Scalar> Default for LossScaleState<T> {
    fn default() -> Self {
        Self::new(T::lit(0.99))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityLoss<T> {
    pub total: T,
    pub angular: T,
    pub linear: T,
}

fn half_norm<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    T::lit(0.5) * s.sqrt()
}

/// Loss over flattened `[B, n, 6]` predictions and ground truth.
pub fn velocity_loss<T: Scalar>(pred: &[T], gt: &[T], scale: &LossScaleState<T>) -> Result<VelocityLoss<T>> {
    if pred.len() != gt.len() || pred.len() % VELOCITY_DIM != 0 {
        return Err(Error::Shape(format!(
            "velocity loss over {} predictions and {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.iter().chain(gt).any(|x| x.is_nan()) {
        return Err(Error::NonFinite("velocity loss input"));
    }
    let rows = pred.len() / VELOCITY_DIM;
    if rows == 0 {
        return Err(Error::Empty("velocity loss"));
    }
    let (mut la, mut ll) = (T::zero(), T::zero());
    for (p, g) in pred.chunks(VELOCITY_DIM).zip(gt.chunks(VELOCITY_DIM)) {
        ll += half_norm(&p[..3], &g[..3]);
        la += half_norm(&p[3..], &g[3..]);
    }
    let n = T::lit(rows as f64);
    let (angular, linear) = (la / n, ll / n);
    Ok(VelocityLoss {
        total: scale.scale_a * angular + scale.scale_l * linear,
        angular,
        linear,
    })
}

/// Recorded form of [`velocity_loss`]; `pred` is `rows x 6`. Returns the
/// mean angular and mean linear part nodes.
pub fn velocity_loss_parts<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<(Var, Var)> {
    if tape.value(pred).shape() != gt.shape() || gt.cols() != VELOCITY_DIM {
        return Err(Error::Shape(format!(
            "velocity loss: prediction {:?}, target {:?}",
            tape.value(pred).shape(),
            gt.shape()
        )));
    }
    if !gt.is_finite() || !tape.value(pred).is_finite() {
        return Err(Error::NonFinite("velocity loss input"));
    }
    let target = tape.constant(gt.clone());
    let err = tape.sub(target, pred)?;
    let nl = tape.row_norm(err, 0, 3)?;
    let na = tape.row_norm(err, 3, 3)?;
    let ml = tape.mean(nl)?;
    let ma = tape.mean(na)?;
    let half = T::lit(0.5);
    Ok((tape.scale(ma, half), tape.scale(ml, half)))
}

/// Mean squared error node, `1 x 1`.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Feeds one pair of part-gradient norms into the running averages and
/// re-derives the scales so both scaled averages equal their geometric mean.
pub fn update_loss_scales<T: Scalar>(
    scale: &LossScaleState<T>,
    grad_a_norm: T,
    grad_l_norm: T,
) -> Result<LossScaleState<T>> {
    if grad_a_norm < T::zero() || grad_l_norm < T::zero() || grad_a_norm.is_nan() || grad_l_norm.is_nan() {
        return Err(Error::InvalidParam("gradient norms must be >= 0".into()));
    }
    let mut next = *scale;
    if grad_a_norm == T::zero() && grad_l_norm == T::zero() {
        return Ok(next);
    }
    let keep = scale.decay;
    let mix = T::one() - keep;
    next.ema_angular = keep * scale.ema_angular + mix * grad_a_norm;
    next.ema_linear = keep * scale.ema_linear + mix * grad_l_norm;
    if next.ema_angular > T::zero() && next.ema_linear > T::zero() {
        let target = (next.ema_angular * next.ema_linear).sqrt();
        let (lo, hi) = (T::lit(SCALE_MIN), T::lit(SCALE_MAX));
        next.scale_a = (target / next.ema_angular).max(lo).min(hi);
        next.scale_l = (target / next.ema_linear).max(lo).min(hi);
    }
    Ok(next)
}
