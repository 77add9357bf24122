//! Binary focal loss on probabilities.

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Focusing exponent and positive-class weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// `-α z (1-p)^γ log p - (1-α)(1-z) p^γ log(1-p)` with `p` clamped.
pub fn binary_focal_loss(p: f64, z: f64, gamma: f64, alpha: f64) -> f64 {
    focal_value(p, z, gamma, alpha)
}

pub(crate) fn focal_value(p: f64, z: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = if z != 0.0 {
        -alpha * z * (1.0 - p).powf(gamma) * p.ln()
    } else {
        0.0
    };
    let neg = if z != 1.0 {
        -(1.0 - alpha) * (1.0 - z) * p.powf(gamma) * (1.0 - p).ln()
    } else {
        0.0
    };
    pos + neg
}

/// d(loss)/dp. Zero where the clamp is active.
pub(crate) fn focal_grad(p: f64, z: f64, gamma: f64, alpha: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let mut d = 0.0;
    if z != 0.0 {
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        d += alpha * z * (focus - q.powf(gamma) / p);
    }
    if z != 1.0 {
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0) * q.ln()
        };
        d -= (1.0 - alpha) * (1.0 - z) * (focus - p.powf(gamma) / q);
    }
    d
}
