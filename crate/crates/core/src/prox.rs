//! Proximal operators for the supported regularizers and the proximal-gradient
//! stationarity map.

use crate::error::{Error, Result};
use crate::problems::{Regularizer, SmoothLossSet};
use crate::ParamVector;

/// `sign(v) * max(|v| - threshold, 0)`; ties at `|v| == threshold` give 0.
#[inline]
pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// Euclidean projection onto `{x : ||x|| <= radius}`.
pub fn project_ball(x: &mut ParamVector, radius: f64) {
    let norm = x.norm();
    if norm > radius {
        *x *= radius / norm;
    }
}

/// `argmin_x scale*h(x) + 1/2 ||x - z||^2`.
///
/// For `L1Ball` this is soft-thresholding followed by projection onto the
/// ball, which is the exact minimizer of the combined term.
pub fn prox(h: &Regularizer, z: &ParamVector, scale: f64) -> Result<ParamVector> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidConfig(format!("prox scale must be positive, got {scale}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prox input"));
    }
    Ok(match *h {
        Regularizer::None => z.clone(),
        Regularizer::L1 { theta } => z.map(|v| soft_threshold(v, scale * theta)),
        Regularizer::L1Ball { theta, radius } => {
            let mut x = z.map(|v| soft_threshold(v, scale * theta));
            project_ball(&mut x, radius);
            x
        }
    })
}

/// `||prox(z1) - prox(z2)|| <= ||z1 - z2||` up to a 1e-12 relative slack.
pub fn prox_nonexpansive_check(h: &Regularizer, z1: &ParamVector, z2: &ParamVector, scale: f64) -> bool {
    match (prox(h, z1, scale), prox(h, z2, scale)) {
        (Ok(p1), Ok(p2)) => (p1 - p2).norm() <= (z1 - z2).norm() * (1.0 + 1e-12),
        _ => false,
    }
}

/// The proximal gradient `x - Prox_h(x - g)` and its norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxGradReport {
    pub map_value: ParamVector,
    pub norm: f64,
}

/// Proximal-gradient map for an explicit gradient `g` (unit step).
pub fn prox_gradient_map_with(h: &Regularizer, x: &ParamVector, g: &ParamVector) -> Result<ProxGradReport> {
    let map_value = x - prox(h, &(x - g), 1.0)?;
    let norm = map_value.norm();
    Ok(ProxGradReport { map_value, norm })
}

/// Stationarity measure at `x` using fresh gradients of every machine.
pub fn prox_gradient_map(losses: &SmoothLossSet, h: &Regularizer, x: &ParamVector) -> Result<ProxGradReport> {
    losses.check_dim(x)?;
    prox_gradient_map_with(h, x, &losses.average_gradient(x))
}
