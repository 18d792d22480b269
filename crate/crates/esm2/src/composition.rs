//! Sequential composition of the four tower probabilities.
//!
//! The towers estimate conditional probabilities on the edges of the behavior
//! graph impression→click→D(O)Action→purchase:
//!
//! * `y1` — click given impression
//! * `y2` — deterministic action (cart/wishlist) given click
//! * `y3` — purchase given deterministic action
//! * `y4` — purchase given other action
//!
//! Composing them along the graph yields the supervised targets. This module
//! is parameter-free and pure; the backward pass is the exact chain rule of
//! the polynomial forward map.

use crate::error::{Esm2Error, Result};

/// The four hidden edge probabilities produced by the towers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerOutputs {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    pub y4: f64,
}

impl TowerOutputs {
    pub fn new(y1: f64, y2: f64, y3: f64, y4: f64) -> Self {
        TowerOutputs { y1, y2, y3, y4 }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("y1", self.y1),
            ("y2", self.y2),
            ("y3", self.y3),
            ("y4", self.y4),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Esm2Error::ShapeMismatch(format!(
                    "tower output {name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Composed probabilities over the graph.
///
/// `pctr` ranks clicks, `pcvr` ranks purchases among clicks (the headline
/// conversion-rate quantity), `pctavr` and `pctcvr` are the entire-space
/// supervised targets for deterministic actions and purchases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposedProbs {
    pub pctr: f64,
    pub pctavr: f64,
    pub pcvr: f64,
    pub pctcvr: f64,
}

/// Upstream loss gradients with respect to each composed probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposedGrads {
    pub d_pctr: f64,
    pub d_pctavr: f64,
    pub d_pcvr: f64,
    pub d_pctcvr: f64,
}

/// Walk the graph forward:
///
/// ```text
/// pctr   = y1
/// pctavr = y1 * y2
/// pcvr   = y4 * (1 - y2) + y2 * y3
/// pctcvr = y1 * pcvr
/// ```
///
/// `pctcvr` is computed as `y1 * pcvr` so the factorization
/// `pctcvr = pctr * pcvr` holds identically, not just up to rounding.
pub fn compose(y: &TowerOutputs) -> Result<ComposedProbs> {
    y.validate()?;
    let pcvr = y.y4 * (1.0 - y.y2) + y.y2 * y.y3;
    Ok(ComposedProbs {
        pctr: y.y1,
        pctavr: y.y1 * y.y2,
        pcvr,
        pctcvr: y.y1 * pcvr,
    })
}

/// Chain rule through [`compose`], accumulating the contributions of all four
/// composed outputs into gradients for `y1..y4`.
pub fn compose_backward(y: &TowerOutputs, g: &ComposedGrads) -> [f64; 4] {
    let pcvr = y.y4 * (1.0 - y.y2) + y.y2 * y.y3;
    let d_y1 = g.d_pctr + g.d_pctavr * y.y2 + g.d_pctcvr * pcvr;
    let d_y2 = g.d_pctavr * y.y1 + (g.d_pcvr + g.d_pctcvr * y.y1) * (y.y3 - y.y4);
    let d_y3 = (g.d_pcvr + g.d_pctcvr * y.y1) * y.y2;
    let d_y4 = (g.d_pcvr + g.d_pctcvr * y.y1) * (1.0 - y.y2);
    [d_y1, d_y2, d_y3, d_y4]
}

/// Two-tower baseline composition: one tower predicts click-through rate,
/// the other predicts conversion directly; their product is the entire-space
/// click-through conversion rate.
pub fn compose_esmm(y1: f64, ycvr: f64) -> Result<(f64, f64, f64)> {
    for (name, v) in [("y1", y1), ("ycvr", ycvr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Esm2Error::ShapeMismatch(format!(
                "{name} = {v} outside [0, 1]"
            )));
        }
    }
    Ok((y1, ycvr, y1 * ycvr))
}

/// Gradients of the baseline composition: `(d_y1, d_ycvr)` given upstream
/// gradients for `pctr` and `pctcvr`.
pub fn compose_esmm_backward(y1: f64, ycvr: f64, d_pctr: f64, d_pctcvr: f64) -> (f64, f64) {
    (d_pctr + d_pctcvr * ycvr, d_pctcvr * y1)
}
